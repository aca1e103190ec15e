"""Command line entry point: ``drip {train,calibrate,filter,experiment,sweep-dpw,sweep-noise} CONFIG``.

Failures exit non-zero after printing one JSON line ``{"error": kind, "message": ...}``
to stderr.
"""
import argparse
import json
import os
import sys
from dataclasses import replace

from . import calibration, data, gradcam, harness, network, retention
from .errors import DripError


def _config(args):
    cfg = harness.ExperimentConfig.load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.dpw is not None:
        overrides["dpw_percent"] = args.dpw
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.out is not None:
        overrides["output_dir"] = args.out
    return replace(cfg, **overrides) if overrides else cfg


def _run_seed(cfg):
    # single-shot commands reproduce repetition 0 of an experiment
    return cfg.repetition_seeds()[0]


def _model_path(args, out):
    return args.model or out.path("model.ckpt")


def _profile_path(args, out):
    return args.profile or out.path("profile.json")


def cmd_train(args, cfg, out):
    seed = _run_seed(cfg)
    train_set, cal_set, _ = harness.prepare_splits(cfg, seed)
    spec = harness.network_spec(cfg, train_set)
    model = network.train(spec, train_set, cfg.epochs, cfg.learning_rate,
                          harness.derive_seed(seed, harness.TRAIN), cfg.batch_size)
    path = _model_path(args, out)
    network.save_model(model, path)
    if os.path.dirname(os.path.abspath(path)) == os.path.abspath(out.out_dir):
        out.record(os.path.basename(path))
    acc = network.accuracy(model, cal_set)
    out.text("train_report.csv", harness._csv_text(
        ["train_size", "calibration_size", "epochs", "train_seed", "calibration_acc", "model_fingerprint"],
        [[len(train_set), len(cal_set), cfg.epochs, model.seed, acc, model.fingerprint()]]))
    return [harness.dataset_label(cfg)]


def cmd_calibrate(args, cfg, out):
    seed = _run_seed(cfg)
    model_path = _model_path(args, out)
    model = network.load_model(model_path)
    _, cal_set, _ = harness.prepare_splits(cfg, seed)
    scores = calibration.collect_scores(model, cal_set)
    profile = calibration.profile_from_scores(scores, cfg.dpw_percent, model.spec.class_count,
                                              model.fingerprint())
    calibration.save_profile(profile, out.path("profile.json"))
    out.record("profile.json", deterministic="SOURCE_DATE_EPOCH" in os.environ)
    out.text("scores.csv", harness._csv_text(
        ["class_index", "rank", "score"],
        [[c, i, float(v)] for c, lst in scores.items() for i, v in enumerate(lst.scores)]))
    rows = []
    for c, lst in scores.items():
        h = calibration.histogram(lst, args.bins)
        for b, count in enumerate(h.counts):
            rows.append([c, b, float(h.edges[b]), float(h.edges[b + 1]), int(count)])
    out.text("histograms.csv", harness._csv_text(["class_index", "bin", "lower_edge", "upper_edge", "count"], rows))
    return [model_path, harness.dataset_label(cfg)]


def _stream(args, cfg):
    if args.input:
        x = data.load_tensor(args.input)
        return x[:, None] if x.ndim == 3 else x
    return harness.prepare_splits(cfg, _run_seed(cfg))[2].inputs


def cmd_filter(args, cfg, out):
    model_path, profile_path = _model_path(args, out), _profile_path(args, out)
    model = network.load_model(model_path)
    profile = calibration.load_profile(profile_path)
    stream = _stream(args, cfg)
    allow = args.allow_mismatch or cfg.allow_profile_mismatch
    result = retention.filter_stream(model, profile, stream, allow_mismatch=allow)
    retention.write_decisions_csv(result.decisions, out.path("decisions.csv"))
    out.record("decisions.csv", deterministic=False)
    retention.write_decisions_jsonl(result.decisions, out.path("decisions.jsonl"))
    out.record("decisions.jsonl", deterministic=False)
    out.text("retained.csv", harness._csv_text(["index"], [[int(i)] for i in result.retained]))
    reasons = {r.value: 0 for r in retention.Reason}
    for d in result.decisions:
        reasons[d.reason.value] += 1
    n = len(result.decisions)
    out.text("filter_summary.csv", harness._csv_text(
        ["stream_size", "retained", "retention_rate", "storage_savings"] + list(reasons),
        [[n, len(result.retained), result.retention_rate, 1.0 - result.retention_rate] + list(reasons.values())]))
    out.text("latency.csv", harness._csv_text(["mean_decision_micros"], [[result.mean_decision_micros]]),
             deterministic=False)
    if args.dump_heatmaps:
        os.makedirs(out.path("heatmaps"), exist_ok=True)
        for i, x in enumerate(stream):
            try:
                _, _, heat = gradcam.score_predicted(model, x)
            except DripError:
                continue
            gradcam.save_heatmap_csv(heat, out.path(os.path.join("heatmaps", f"{i:06d}.csv")))
    return [model_path, profile_path, args.input or harness.dataset_label(cfg)]


def cmd_experiment(args, cfg, out):
    table = harness.run_repeated(cfg)
    harness.emit_report(table, out, harness.dataset_label(cfg))
    return [harness.dataset_label(cfg)]


def cmd_sweep_dpw(args, cfg, out):
    tables = harness.sweep_dpw(cfg)
    out.text("dpw_sweep.csv", harness.long_table_csv("dpw_percent", tables))
    out.text("dpw_sweep.txt", harness.table_text([(f"DPW {d:g}%", t) for d, t in tables.items()]))
    out.text("runs.csv", "".join(harness.runs_csv(t.reports) if i == 0 else
                                 harness.runs_csv(t.reports).split("\n", 1)[1]
                                 for i, t in enumerate(tables.values())))
    out.text("timing.csv", harness.timing_csv([r for t in tables.values() for r in t.reports]),
             deterministic=False)
    return [harness.dataset_label(cfg)]


def cmd_sweep_noise(args, cfg, out):
    tables = harness.sweep_noise(cfg)
    out.text("noise_sweep.csv", harness.long_table_csv("noise_level", tables))
    rows = [[lv, t.mean["drip_acc"], t.std["drip_acc"], t.mean["all_data_acc"], t.std["all_data_acc"],
             t.mean["baseline_acc"], t.count] for lv, t in tables.items()]
    out.text("noise_accuracy.csv", harness._csv_text(
        ["noise_level", "drip_mean", "drip_std", "unfiltered_mean", "unfiltered_std", "baseline_mean", "count"],
        rows))
    out.text("runs.csv", "".join(harness.runs_csv(t.reports) if i == 0 else
                                 harness.runs_csv(t.reports).split("\n", 1)[1]
                                 for i, t in enumerate(tables.values())))
    out.text("timing.csv", harness.timing_csv([r for t in tables.values() for r in t.reports]),
             deterministic=False)
    return [harness.dataset_label(cfg)]


COMMANDS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "filter": cmd_filter,
    "experiment": cmd_experiment,
    "sweep-dpw": cmd_sweep_dpw,
    "sweep-noise": cmd_sweep_noise,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="drip", description="Grad-CAM based selective data retention")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON experiment configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--dpw", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if name in ("train", "calibrate", "filter"):
            p.add_argument("--model", help="checkpoint path (default OUT/model.ckpt)")
        if name == "calibrate":
            p.add_argument("--bins", type=int, default=20, help="histogram bins per class")
        if name == "filter":
            p.add_argument("--profile", help="profile path (default OUT/profile.json)")
            p.add_argument("--input", help="raw tensor container with the stream inputs")
            p.add_argument("--allow-mismatch", action="store_true",
                           help="warn instead of failing when the profile belongs to another model")
            p.add_argument("--dump-heatmaps", action="store_true", help="write one heatmap CSV per input")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        out = harness.OutputWriter(cfg.output_dir)
        inputs = COMMANDS[args.command](args, cfg, out)
        out.manifest(args.command, cfg, inputs)
    except DripError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 2
    except (OSError, KeyError, TypeError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
