"""Streaming retain/discard decisions against a calibration profile."""
import csv
import json
import time
import warnings
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import DripError, ProfileMismatchError
from .gradcam import score_predicted
from .network import forward


class Verdict(str, Enum):
    RETAIN = "Retain"
    DISCARD = "Discard"


class Reason(str, Enum):
    IN_WINDOW = "InWindow"
    OUTSIDE_WINDOW = "OutsideWindow"
    CLASS_UNCALIBRATED = "ClassUncalibrated"
    INVALID_INPUT = "InvalidInput"


@dataclass(frozen=True)
class RetentionDecision:
    verdict: Verdict
    predicted_class: int
    score: object  # DripScore, or None for an invalid input
    decision_micros: int
    reason: Reason
    index: int = -1
    error: str = ""


@dataclass(frozen=True)
class FilterResult:
    decisions: list
    retained: np.ndarray  # arrival indices with verdict Retain

    @property
    def retention_rate(self):
        return len(self.retained) / len(self.decisions) if self.decisions else 0.0

    @property
    def mean_decision_micros(self):
        if not self.decisions:
            return 0.0
        return float(np.mean([d.decision_micros for d in self.decisions]))


def predict_class(model, input):
    """Argmax of the logits; ``np.argmax`` resolves ties to the lowest index."""
    return int(np.argmax(forward(model, input)))


def decide(profile, class_index, score):
    """Discard iff ``lower <= score <= upper`` for the class; unknown classes are retained."""
    value = score.value if hasattr(score, "value") else float(score)
    t = profile.thresholds(class_index)
    if t is None:
        return RetentionDecision(Verdict.RETAIN, int(class_index), score, 0, Reason.CLASS_UNCALIBRATED)
    if t.lower <= value <= t.upper:
        return RetentionDecision(Verdict.DISCARD, int(class_index), score, 0, Reason.IN_WINDOW)
    return RetentionDecision(Verdict.RETAIN, int(class_index), score, 0, Reason.OUTSIDE_WINDOW)


def check_profile(model, profile, allow_mismatch=False):
    if profile.model_fingerprint == model.fingerprint():
        return
    message = "calibration profile was built for a different model"
    if not allow_mismatch:
        raise ProfileMismatchError(message)
    warnings.warn(message, stacklevel=3)


def filter_stream(model, profile, stream, allow_mismatch=False):
    """One decision per input, in arrival order.

    ``stream`` is any iterable of inputs (a ``LabeledDataset`` contributes its
    ``inputs``). Timing covers scoring plus the threshold lookup only. Bad
    inputs yield a Retain/InvalidInput decision instead of stopping the stream.
    """
    check_profile(model, profile, allow_mismatch)
    items = stream.inputs if hasattr(stream, "inputs") else stream
    decisions = []
    retained = []
    for i, x in enumerate(items):
        t0 = time.perf_counter_ns()
        try:
            predicted, score, _ = score_predicted(model, x)
            d = decide(profile, predicted, score)
        except (DripError, ValueError, TypeError) as exc:
            d = RetentionDecision(Verdict.RETAIN, -1, None, 0, Reason.INVALID_INPUT, error=str(exc))
        micros = (time.perf_counter_ns() - t0) // 1000
        d = replace(d, decision_micros=int(micros), index=i)
        decisions.append(d)
        if d.verdict is Verdict.RETAIN:
            retained.append(i)
    return FilterResult(decisions, np.asarray(retained, dtype=np.int64))


# ---------------------------------------------------------------- decision log

LOG_FIELDS = ("index", "predicted_class", "score", "verdict", "reason", "decision_micros")


def _record(d, timing=True):
    rec = {
        "index": d.index,
        "predicted_class": d.predicted_class,
        "score": None if d.score is None else format(d.score.value, ".17g"),
        "verdict": d.verdict.value,
        "reason": d.reason.value,
    }
    if timing:
        rec["decision_micros"] = d.decision_micros
    return rec


def write_decisions_csv(decisions, path, timing=True):
    fields = LOG_FIELDS if timing else LOG_FIELDS[:-1]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for d in decisions:
            rec = _record(d, timing)
            rec["score"] = "" if rec["score"] is None else rec["score"]
            writer.writerow(rec)


def write_decisions_jsonl(decisions, path, timing=True):
    with open(path, "w", newline="\n") as f:
        for d in decisions:
            rec = _record(d, timing)
            if rec["score"] is not None:
                rec["score"] = float(rec["score"])
            f.write(json.dumps(rec, sort_keys=False) + "\n")
