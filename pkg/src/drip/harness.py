"""Experiment protocol: baseline / DRIP / All-Data / Random arms, repetitions, sweeps, reports.

Seed scheme
-----------
A repetition is identified by one integer *run seed*. Repetition ``r`` of a
config with master seed ``m`` uses ``derive_seed(m, r)``. Inside a run, each
random consumer gets its own stream ``derive_seed(run_seed, STREAM)`` with
``SPLIT=0, TRAIN=1, RANDOM=2, NOISE=3``. ``derive_seed`` hashes its integer
arguments through ``numpy.random.SeedSequence`` and keeps the low 63 bits.
All arms of one run share the TRAIN seed, so arms that see the same training
multiset produce the same model.
"""
import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import calibration, data, network, retention
from .errors import RejectedInputError
from .network import DEFAULT_BATCH_SIZE

SPLIT, TRAIN, RANDOM, NOISE = 0, 1, 2, 3
ARMS = ("baseline", "all_data", "drip", "random")

REPORT_COLUMNS = (
    ("baseline_acc", "Baseline Acc."),
    ("all_data_acc", "All-Data Acc."),
    ("drip_acc", "DRIP Acc."),
    ("random_acc", "Random Acc."),
    ("storage_savings", "Storage Savings"),
)


def derive_seed(*parts):
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint32)
    return int((int(state[1]) << 32 | int(state[0])) & ((1 << 63) - 1))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    network: dict = None
    seed: int = 0
    split_seed_policy: str = "per_repetition"  # or "fixed"
    dpw_percent: float = calibration.DEFAULT_DPW
    repetitions: int = 20
    epochs: int = 10
    learning_rate: float = 0.05
    batch_size: int = DEFAULT_BATCH_SIZE
    retrain: str = "scratch"  # or "finetune"
    noise_levels: tuple = (0, 10, 20, 30, 40, 50, 60, 70, 80, 90)
    noise: dict = field(default_factory=lambda: {"label_flip": True, "pixel_noise": False, "salt_fraction": 0.1})
    dpw_sweep: tuple = (10, 20, 30, 40, 50, 60, 70, 80)
    output_dir: str = "drip-out"
    allow_profile_mismatch: bool = False

    def __post_init__(self):
        object.__setattr__(self, "noise_levels", tuple(self.noise_levels))
        object.__setattr__(self, "dpw_sweep", tuple(self.dpw_sweep))
        if self.repetitions < 1:
            raise RejectedInputError("repetitions must be >= 1")
        for dpw in (self.dpw_percent,) + self.dpw_sweep:
            if not 0 < dpw <= 100:
                raise RejectedInputError(f"dpw value {dpw} outside (0, 100]")
        if self.split_seed_policy not in ("per_repetition", "fixed"):
            raise RejectedInputError("split_seed_policy must be 'per_repetition' or 'fixed'")
        if self.retrain not in ("scratch", "finetune"):
            raise RejectedInputError("retrain must be 'scratch' or 'finetune'")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise RejectedInputError("epochs must be >= 0 and learning_rate > 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise RejectedInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as exc:
                raise RejectedInputError(f"config {path}: {exc}") from None

    def to_dict(self):
        d = asdict(self)
        d["noise_levels"] = list(self.noise_levels)
        d["dpw_sweep"] = list(self.dpw_sweep)
        return d

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def repetition_seeds(self):
        return [derive_seed(self.seed, r) for r in range(self.repetitions)]


_DATASET_CACHE = {}


def load_dataset(cfg):
    """Materialise the configured dataset (cached per dataset description)."""
    d = dict(cfg.dataset)
    key = json.dumps(d, sort_keys=True)
    if key in _DATASET_CACHE:
        return _DATASET_CACHE[key]
    kind = d.pop("kind", "synthetic")
    if kind == "synthetic":
        ds = data.synth_blobs(d.get("class_count", 4), d.get("per_class", 250), d.get("image_size", 12),
                              d.get("seed", 0), noise=d.get("noise", 0.15), jitter=d.get("jitter", 0.08))
    elif kind == "idx":
        ds = data.load_idx(d["images"], d["labels"], d.get("class_count"), d.get("limit"))
    elif kind == "raw":
        ds = data.load_raw(d["inputs"], d["labels"], d.get("class_count"))
    else:
        raise RejectedInputError(f"unknown dataset kind {kind!r}")
    _DATASET_CACHE[key] = ds
    return ds


def network_spec(cfg, dataset):
    if cfg.network is None:
        return network.default_spec(dataset.input_shape, dataset.class_count)
    return network.NetworkSpec.from_dict(cfg.network)


def noise_spec(cfg, level, seed):
    n = cfg.noise
    return data.NoiseSpec(level, n.get("label_flip", True), n.get("pixel_noise", False),
                          n.get("salt_fraction", 0.1), seed)


def split_seed(cfg, run_seed):
    if cfg.split_seed_policy == "fixed":
        return derive_seed(cfg.seed, SPLIT)
    return derive_seed(run_seed, SPLIT)


@dataclass(frozen=True)
class RunReport:
    seed: int
    baseline_acc: float
    all_data_acc: float
    drip_acc: float
    random_acc: float
    retention_rate: float
    storage_savings: float
    mean_decision_micros: float
    production_size: int
    retained_count: int
    drip_train_size: int
    random_train_size: int
    dpw_percent: float
    noise_level: float = 0.0
    split_seed: int = 0
    train_seed: int = 0
    random_seed: int = 0
    noise_seed: int = 0


TIMING_FIELDS = ("mean_decision_micros",)


def prepare_splits(cfg, run_seed, noise_level=0.0):
    ds = load_dataset(cfg)
    train_set, cal_set, prod_set = data.split(ds, data.SplitSpec(split_seed(cfg, run_seed)))
    if noise_level:
        prod_set = data.inject_noise(prod_set, noise_spec(cfg, noise_level, derive_seed(run_seed, NOISE)))
    return train_set, cal_set, prod_set


def run_single(cfg, seed, noise_level=0.0, arms=ARMS, profile_hook=None):
    """One full protocol run. ``profile_hook(profile) -> profile`` may replace the calibrated profile.

    Production items are appended after the training split in arrival order,
    so equal multisets mean equal training inputs. Arms not listed in ``arms``
    (other than baseline and drip, which are always run) report NaN accuracy.
    """
    train_set, cal_set, prod_set = prepare_splits(cfg, seed, noise_level)
    spec = network_spec(cfg, train_set)
    train_seed = derive_seed(seed, TRAIN)
    random_seed = derive_seed(seed, RANDOM)

    def fit(extra, base):
        ds = train_set if extra is None else train_set.concat(extra)
        init = base if (cfg.retrain == "finetune" and base is not None) else None
        return network.train(spec, ds, cfg.epochs, cfg.learning_rate, train_seed, cfg.batch_size, init=init)

    baseline = fit(None, None)
    baseline_acc = network.accuracy(baseline, cal_set)
    profile = calibration.build_profile(baseline, cal_set, cfg.dpw_percent, created_at="-")
    if profile_hook is not None:
        profile = profile_hook(profile)
    result = retention.filter_stream(baseline, profile, prod_set, allow_mismatch=cfg.allow_profile_mismatch)
    kept = result.retained
    drip_acc = network.accuracy(fit(prod_set.subset(kept), baseline), cal_set)
    all_acc = math.nan
    if "all_data" in arms:
        all_acc = network.accuracy(fit(prod_set, baseline), cal_set)
    rnd_acc = math.nan
    rnd_idx = data.random_retention(len(prod_set), len(kept), random_seed)
    if "random" in arms:
        rnd_acc = network.accuracy(fit(prod_set.subset(rnd_idx), baseline), cal_set)
    rate = len(kept) / len(prod_set) if len(prod_set) else 0.0
    return RunReport(
        seed=int(seed),
        baseline_acc=baseline_acc,
        all_data_acc=all_acc,
        drip_acc=drip_acc,
        random_acc=rnd_acc,
        retention_rate=rate,
        storage_savings=1.0 - rate,
        mean_decision_micros=result.mean_decision_micros,
        production_size=len(prod_set),
        retained_count=len(kept),
        drip_train_size=len(train_set) + len(kept),
        random_train_size=len(train_set) + len(rnd_idx),
        dpw_percent=float(cfg.dpw_percent),
        noise_level=float(noise_level),
        split_seed=split_seed(cfg, seed),
        train_seed=train_seed,
        random_seed=random_seed,
        noise_seed=derive_seed(seed, NOISE) if noise_level else 0,
    )


# ---------------------------------------------------------------- aggregation

SUMMARY_METRICS = ("baseline_acc", "all_data_acc", "drip_acc", "random_acc",
                   "retention_rate", "storage_savings", "mean_decision_micros")


@dataclass(frozen=True)
class SummaryTable:
    """Per-metric mean and population std (ddof=0) over completed runs."""

    mean: dict
    std: dict
    count: int
    failures: tuple = ()
    reports: tuple = ()


def summarize(reports, failures=()):
    mean, std = {}, {}
    for m in SUMMARY_METRICS:
        values = np.array([getattr(r, m) for r in reports], dtype=np.float64)
        values = values[~np.isnan(values)]
        if values.size == 0:
            mean[m] = std[m] = math.nan
            continue
        mean[m] = float(values.mean())
        std[m] = float(values.std())
    return SummaryTable(mean, std, len(reports), tuple(failures), tuple(reports))


def run_repeated(cfg, seeds=None, noise_level=0.0, arms=ARMS):
    """Run every repetition; failed runs are recorded and left out of the summary."""
    seeds = cfg.repetition_seeds() if seeds is None else list(seeds)
    reports, failures = [], []
    for s in seeds:
        try:
            reports.append(run_single(cfg, s, noise_level, arms))
        except Exception as exc:  # one bad repetition must not sink the sweep
            failures.append((int(s), f"{type(exc).__name__}: {exc}"))
    return summarize(reports, failures)


def sweep_dpw(cfg, dpw_values=None):
    dpw_values = cfg.dpw_sweep if dpw_values is None else tuple(dpw_values)
    return {float(d): run_repeated(replace(cfg, dpw_percent=float(d))) for d in dpw_values}


def sweep_noise(cfg, levels=None):
    """Per level: DRIP-filtered arm vs unfiltered (All-Data on the noisy production split)."""
    levels = cfg.noise_levels if levels is None else tuple(levels)
    return {float(lv): run_repeated(cfg, noise_level=float(lv), arms=("baseline", "drip", "all_data"))
            for lv in levels}


# ---------------------------------------------------------------- reports


def _fmt(x):
    if isinstance(x, float):
        return "" if math.isnan(x) else format(x, ".17g")
    return str(x)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def runs_csv(reports, timing=False):
    names = [f.name for f in fields(RunReport) if timing or f.name not in TIMING_FIELDS]
    return _csv_text(names, [[getattr(r, n) for n in names] for r in reports])


def summary_csv(table):
    metrics = [m for m in SUMMARY_METRICS if m not in TIMING_FIELDS]
    return _csv_text(["metric", "mean", "std", "count"],
                     [[m, table.mean[m], table.std[m], table.count] for m in metrics])


def _pct(mean, std):
    if math.isnan(mean):
        return "n/a"
    return f"{100 * mean:.1f} ± {100 * std:.1f}"


def table_text(rows):
    """Aligned text table; ``rows`` is a list of ``(label, SummaryTable)``."""
    header = ["Dataset"] + [title for _, title in REPORT_COLUMNS]
    body = [[label] + [_pct(t.mean[k], t.std[k]) for k, _ in REPORT_COLUMNS] for label, t in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def timing_csv(reports):
    return _csv_text(["seed", "mean_decision_micros"], [[r.seed, r.mean_decision_micros] for r in reports])


def long_table_csv(key_name, tables):
    rows = []
    for key, t in tables.items():
        for m in SUMMARY_METRICS:
            if m in TIMING_FIELDS:
                continue
            rows.append([key, m, t.mean[m], t.std[m], t.count])
    return _csv_text([key_name, "metric", "mean", "std", "count"], rows)


class OutputWriter:
    """Writes artifacts under one directory and records them for the manifest.

    Files flagged ``deterministic=False`` carry wall-clock timings; everything
    else must be byte-identical across re-runs with the same config and seed.
    """

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.outputs = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def text(self, name, content, deterministic=True):
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as f:
            f.write(content)
        self.record(name, deterministic)

    def record(self, name, deterministic=True):
        entry = {"name": name, "deterministic": deterministic}
        if deterministic:
            with open(self.path(name), "rb") as f:
                entry["sha256"] = hashlib.sha256(f.read()).hexdigest()
        self.outputs.append(entry)

    def manifest(self, command, cfg, inputs=()):
        doc = {
            "command": command,
            "config_digest": cfg.digest(),
            "config": cfg.to_dict(),
            "inputs": list(inputs),
            "outputs": self.outputs,
        }
        with open(self.path("manifest.json"), "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def emit_report(table, out, label="dataset"):
    """Per-run CSV, summary CSV, aligned text table and timing CSV."""
    out.text("runs.csv", runs_csv(table.reports))
    out.text("summary.csv", summary_csv(table))
    out.text("summary.txt", table_text([(label, table)]))
    if table.failures:
        out.text("failures.csv", _csv_text(["seed", "error"], table.failures))
    out.text("timing.csv", timing_csv(table.reports), deterministic=False)


def dataset_label(cfg):
    d = cfg.dataset
    return d.get("label") or d.get("kind", "dataset")
