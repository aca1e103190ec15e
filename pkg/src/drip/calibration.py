"""Per-class retention thresholds from calibration-set DRIP scores.

Scores are bucketed by the model's *predicted* class (the same label the
production filter will see). For each class the sorted scores are scanned
with a window covering ``dpw_percent`` of them; the window with the smallest
population standard deviation (earliest start on ties) supplies the closed
discard interval ``[lower, upper]``.
"""
import datetime as _dt
import json
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from itertools import accumulate

import numpy as np

from . import kernels
from .errors import NoThresholdsError, ParseError, RejectedInputError
from .gradcam import score_predicted

PROFILE_FORMAT_VERSION = 1
DEFAULT_DPW = 25.0


@dataclass(frozen=True)
class ClassScoreList:
    class_index: int
    scores: np.ndarray

    def __post_init__(self):
        s = np.sort(np.asarray(self.scores, dtype=np.float64).reshape(-1))
        if s.size and s[0] < 0:
            raise RejectedInputError("DRIP scores are non-negative")
        s.flags.writeable = False
        object.__setattr__(self, "scores", s)

    def __len__(self):
        return self.scores.shape[0]


@dataclass(frozen=True)
class ClassThresholds:
    class_index: int
    lower: float
    upper: float
    window_start: int
    window_length: int
    sample_count: int

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise RejectedInputError(f"class {self.class_index}: lower {self.lower} > upper {self.upper}")

    def contains(self, value):
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class CalibrationProfile:
    dpw_percent: float
    per_class: dict  # class_index -> ClassThresholds; absent classes are uncalibrated
    n_classes: int
    model_fingerprint: str
    created_at: str = ""

    def thresholds(self, class_index):
        return self.per_class.get(int(class_index))


@dataclass(frozen=True)
class ScoreHistogram:
    class_index: int
    edges: np.ndarray
    counts: np.ndarray


def collect_scores(model, calibration_set):
    """Score every item against its predicted class; returns ``{class: ClassScoreList}``.

    Only classes that were predicted at least once appear in the result.
    """
    if len(calibration_set) == 0:
        raise RejectedInputError("calibration set is empty")
    buckets = {}
    for x in calibration_set.inputs:
        predicted, score, _ = score_predicted(model, x)
        buckets.setdefault(predicted, []).append(score.value)
    return {c: ClassScoreList(c, buckets[c]) for c in sorted(buckets)}


def window_length(n, dpw_percent):
    """``round_half_up(dpw% * n)`` clamped to ``[1, n]``."""
    if not 0 < dpw_percent <= 100:
        raise RejectedInputError(f"dpw_percent must lie in (0, 100], got {dpw_percent}")
    exact = Fraction(str(dpw_percent)) / 100 * n
    return min(max(int((exact + Fraction(1, 2)) // 1), 1), n)


def select_window(sorted_scores, length):
    """Start of the minimal-std window, smallest start on ties.

    A window's std is defined as ``sqrt(float(v))`` with ``v`` the exact
    rational population variance, so the value does not depend on summation
    order. The float scan shortlists every window within rounding distance of
    the minimum and only the shortlist is re-scored that way.
    """
    stds = kernels.window_std_scan(sorted_scores, length)
    best = float(stds.min())
    slack = 1e-9 * best + 1e-12 * float(np.max(np.abs(sorted_scores)))
    shortlist = np.flatnonzero(stds <= best + slack)
    if shortlist.size == 1:
        return int(shortlist[0])
    lo, hi = int(shortlist[0]), int(shortlist[-1]) + length
    exact = [Fraction(float(v)) for v in sorted_scores[lo:hi]]
    s1 = [0, *accumulate(exact)]
    s2 = [0, *accumulate(v * v for v in exact)]

    def key(start):
        a, b = start - lo, start - lo + length
        total = s1[b] - s1[a]
        return math.sqrt(float((length * (s2[b] - s2[a]) - total * total) / (length * length)))

    return int(min(shortlist, key=lambda start: (key(int(start)), int(start))))


def window_thresholds(scores, dpw_percent):
    if not isinstance(scores, ClassScoreList):
        scores = ClassScoreList(-1, scores)
    n = len(scores)
    if n == 0:
        raise NoThresholdsError(f"class {scores.class_index} has no scores")
    length = window_length(n, dpw_percent)
    start = select_window(scores.scores, length)
    return ClassThresholds(
        scores.class_index,
        float(scores.scores[start]),
        float(scores.scores[start + length - 1]),
        start,
        length,
        n,
    )


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
            else _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0))
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def profile_from_scores(score_lists, dpw_percent, n_classes, fingerprint, created_at=None):
    per_class = {}
    for c, scores in score_lists.items():
        try:
            per_class[int(c)] = window_thresholds(scores, dpw_percent)
        except NoThresholdsError:
            continue
    return CalibrationProfile(float(dpw_percent), per_class, int(n_classes), fingerprint,
                              created_at or _timestamp())


def build_profile(model, calibration_set, dpw_percent=DEFAULT_DPW, created_at=None):
    window_length(1, dpw_percent)  # validate before the expensive scoring pass
    scores = collect_scores(model, calibration_set)
    return profile_from_scores(scores, dpw_percent, model.spec.class_count, model.fingerprint(), created_at)


def histogram(scores, bin_count):
    """Equal-width bins over ``[min, max]``; one bin when every score is equal."""
    if bin_count < 1:
        raise RejectedInputError("bin_count must be >= 1")
    if not isinstance(scores, ClassScoreList):
        scores = ClassScoreList(-1, scores)
    s = scores.scores
    if s.size == 0:
        return ScoreHistogram(scores.class_index, np.array([0.0, 0.0]), np.array([0]))
    lo, hi = float(s[0]), float(s[-1])
    if lo == hi:
        return ScoreHistogram(scores.class_index, np.array([lo, hi]), np.array([s.size]))
    counts, edges = np.histogram(s, bins=bin_count, range=(lo, hi))
    return ScoreHistogram(scores.class_index, edges, counts)


# ---------------------------------------------------------------- persistence


def _real(x):
    x = float(x)
    if not np.isfinite(x):
        raise RejectedInputError(f"cannot serialise non-finite value {x}")
    text = format(x, ".17g")
    if "e" not in text and "." not in text and "n" not in text:
        text += ".0"
    return text


def profile_to_text(profile):
    """Profile document with every real printed to 17 significant digits."""
    lines = [
        "{",
        f'  "format_version": {PROFILE_FORMAT_VERSION},',
        f'  "dpw_percent": {_real(profile.dpw_percent)},',
        f'  "n_classes": {int(profile.n_classes)},',
        f'  "model_fingerprint": {json.dumps(profile.model_fingerprint)},',
        f'  "created_at": {json.dumps(profile.created_at)},',
        '  "classes": [',
    ]
    entries = []
    for c in sorted(profile.per_class):
        t = profile.per_class[c]
        entries.append(
            f'    {{"class_index": {int(t.class_index)}, "lower": {_real(t.lower)}, '
            f'"upper": {_real(t.upper)}, "window_start": {int(t.window_start)}, '
            f'"window_length": {int(t.window_length)}, "sample_count": {int(t.sample_count)}}}'
        )
    lines.append(",\n".join(entries))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(line for line in lines if line) + "\n"


def save_profile(profile, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(profile_to_text(profile))


def _field(doc, name, kind):
    if name not in doc:
        raise ParseError(name, "missing field")
    value = doc[name]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ParseError(name, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def profile_from_text(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError("document", str(exc)) from None
    if not isinstance(doc, dict):
        raise ParseError("document", "expected an object")
    version = _field(doc, "format_version", int)
    if version != PROFILE_FORMAT_VERSION:
        raise ParseError("format_version", f"unsupported version {version}")
    per_class = {}
    for entry in _field(doc, "classes", list):
        if not isinstance(entry, dict):
            raise ParseError("classes", "entries must be objects")
        try:
            t = ClassThresholds(
                _field(entry, "class_index", int),
                _field(entry, "lower", float),
                _field(entry, "upper", float),
                _field(entry, "window_start", int),
                _field(entry, "window_length", int),
                _field(entry, "sample_count", int),
            )
        except RejectedInputError as exc:
            raise ParseError("classes", str(exc)) from None
        per_class[t.class_index] = t
    return CalibrationProfile(
        _field(doc, "dpw_percent", float),
        per_class,
        _field(doc, "n_classes", int),
        _field(doc, "model_fingerprint", str),
        _field(doc, "created_at", str),
    )


def load_profile(path):
    with open(path, encoding="utf-8") as f:
        return profile_from_text(f.read())
