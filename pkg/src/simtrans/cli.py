"""Command-line experiment runner.

Every command writes the effective ``config.txt`` and a ``metrics.csv`` into
``--out``; studies add per-seed rows, mean/std summaries and SVG plots.
Failures print a single ``error: kind=<Type> message=<text>`` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .plots import line_plot
from .synthdata import ConfigurationError, load_dataset, save_dataset

log = logging.getLogger("simtrans")

COMMANDS = {
    "gen-data": None,
    "run": "run",
    "ablation": "ablation",
    "transfer-study": "transfer",
    "scale-study": "scale",
    "noise-study": "noise",
    "report": None,
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simtrans", description="Weak-shot classification experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("run_dir", help="directory written by another command")
            continue
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        p.add_argument("--out", help="output directory")
        p.add_argument("--noise-ratio", type=float, dest="noise_ratio")
        p.add_argument("--no-weights", action="store_true")
        p.add_argument("--no-reg", action="store_true")
        p.add_argument("--no-adversarial", action="store_true")
        if name == "run":
            p.add_argument("--data", help="dataset file from gen-data (default: generate)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ex.ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        cfg = ex.ExperimentConfig.from_text(path.read_text(encoding="ascii"))
    else:
        cfg = ex.ExperimentConfig()
    study = COMMANDS[args.command]
    if study:
        cfg = replace(cfg, study=study)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.noise_ratio is not None:
        cfg = replace(cfg, noise=replace(cfg.noise, ratio=args.noise_ratio))
    train = cfg.train
    if args.no_weights:
        train = replace(train, use_weights=False)
    if args.no_reg:
        train = replace(train, use_reg=False)
    if args.no_adversarial:
        train = replace(train, use_adversarial=False)
    return replace(cfg, train=train)


def _prepare_out(cfg: ex.ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="ascii")
    return out


def _summarize(rows, keys, values, path):
    """Mean/std per group for each metric in ``values``, merged into one table."""
    merged: dict[tuple, dict] = {}
    for value in values:
        for r in ex.aggregate(rows, keys, value):
            key = tuple(r[k] for k in keys)
            merged.setdefault(key, {k: r[k] for k in keys} | {"n": r["n"]})
            merged[key][f"{value}_mean"] = r[f"{value}_mean"]
            merged[key][f"{value}_std"] = r[f"{value}_std"]
    table = list(merged.values())
    columns = keys + [f"{v}_{s}" for v in values for s in ("mean", "std")] + ["n"]
    ex.write_csv(table, path, columns)
    return table


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ex.ExperimentConfig) -> dict:
    out = _prepare_out(cfg)
    seed = cfg.seeds[0]
    spec, noise, _ = cfg.for_seed(seed)
    ds = ex.build_dataset(spec, noise)
    save_dataset(ds, out / "dataset.txt")
    novel = ds.mask("novel_train")
    row = {"config_hash": cfg.config_hash(), "seed": seed, "n_records": len(ds),
           "n_base_categories": spec.n_base_categories,
           "n_novel_categories": spec.n_novel_categories,
           "n_noisy": int(ds.is_noisy[novel].sum())}
    ex.write_csv([row], out / "metrics.csv")
    return row


def _run_row(cfg, seed, res: ex.RunResult, ds) -> dict:
    t = cfg.train
    row = {"config_hash": cfg.config_hash(), "seed": seed, "mode": t.mode,
           "weights": t.use_weights, "reg": t.use_reg, "adversarial": t.use_adversarial,
           "accuracy": res.accuracy, "mean_w_clean": float("nan"), "mean_w_noisy": float("nan")}
    if res.weights is not None:
        noisy = ds.is_noisy[ds.mask("novel_train")]
        if np.any(~noisy):
            row["mean_w_clean"] = float(res.weights[~noisy].mean())
        if np.any(noisy):
            row["mean_w_noisy"] = float(res.weights[noisy].mean())
    return row


def cmd_run(cfg: ex.ExperimentConfig, data_path: str | None = None) -> list[dict]:
    out = _prepare_out(cfg)
    rows = []
    for seed in cfg.seeds:
        spec, noise, train = cfg.for_seed(seed)
        ds = load_dataset(data_path) if data_path else ex.build_dataset(spec, noise)
        res = ex.run_pipeline(ds, train)
        prefix = f"seed{seed}_" if len(cfg.seeds) > 1 else ""
        ex.save_run_artifacts(res, out, prefix)
        ep = res.history.epochs
        line_plot({"train": ([r["epoch"] for r in ep], [r["train_acc"] for r in ep]),
                   "test": ([r["epoch"] for r in ep], [r["test_acc"] for r in ep])},
                  out / f"{prefix}accuracy_curve.svg", "Classifier accuracy", "epoch", "accuracy (%)")
        rows.append(_run_row(cfg, seed, res, ds))
        log.info("run seed=%s accuracy=%.2f", seed, res.accuracy)
    ex.write_csv(rows, out / "metrics.csv")
    return rows


def cmd_ablation(cfg: ex.ExperimentConfig) -> list[dict]:
    out = _prepare_out(cfg)
    rows = ex.ablation_study(cfg)
    ex.write_csv(rows, out / "metrics.csv")
    _summarize(rows, ["method"], ["accuracy"], out / "ablation_summary.csv")
    return rows


def cmd_transfer(cfg: ex.ExperimentConfig) -> tuple[list[dict], list[dict]]:
    out = _prepare_out(cfg)
    pair_rows, source_rows = ex.transfer_study(cfg)
    ex.write_csv(pair_rows, out / "pair_metrics.csv")
    ex.write_csv(source_rows, out / "metrics.csv")
    metric_cols = [k for k in pair_rows[0] if k.startswith(("similar_", "dissimilar_"))]
    _summarize(pair_rows, ["split"], metric_cols, out / "pair_summary.csv")
    _summarize(source_rows, ["source", "type"], ["accuracy"], out / "source_summary.csv")
    return pair_rows, source_rows


def cmd_scale(cfg: ex.ExperimentConfig) -> list[dict]:
    out = _prepare_out(cfg)
    rows = ex.scale_study(cfg)
    ex.write_csv(rows, out / "metrics.csv")
    table = _summarize(rows, ["n_base_categories", "n_base_images"], ["simnet_f1", "accuracy"],
                       out / "scale_summary.csv")
    for metric, label in (("accuracy", "classifier accuracy (%)"), ("simnet_f1", "similar-pair F1")):
        series = {}
        for n_img in cfg.scale_images:
            pts = [r for r in table if r["n_base_images"] == n_img]
            series[f"N={n_img}"] = ([r["n_base_categories"] for r in pts],
                                    [r[f"{metric}_mean"] for r in pts])
        line_plot(series, out / f"scale_{metric}.svg", f"{label} vs base categories",
                  "base categories", label)
    return rows


def cmd_noise(cfg: ex.ExperimentConfig) -> list[dict]:
    out = _prepare_out(cfg)
    rows = ex.noise_study(cfg)
    ex.write_csv(rows, out / "metrics.csv")
    table = _summarize(rows, ["noise_ratio", "method"], ["accuracy"], out / "noise_summary.csv")
    series = {}
    for method in ("Cls", "SimTrans"):
        pts = [r for r in table if r["method"] == method]
        series[method] = ([r["noise_ratio"] for r in pts], [r["accuracy_mean"] for r in pts])
    line_plot(series, out / "noise.svg", "Accuracy vs noise ratio", "noise ratio", "accuracy (%)")
    return rows


def cmd_report(run_dir) -> dict:
    """Index the files of a run directory and summarize logs and weight diagnostics."""
    run_dir = Path(run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.is_file():
        raise FileNotFoundError(f"missing metrics file: {metrics}")
    index = []
    for path in sorted(run_dir.iterdir()):
        if path.suffix == ".csv" and path.name != "report_index.csv":
            index.append({"file": path.name, "kind": "csv", "rows": len(ex.read_csv(path))})
        elif path.suffix == ".svg":
            index.append({"file": path.name, "kind": "svg", "rows": 0})

    summary = {"metrics_rows": len(ex.read_csv(metrics))}
    for log_path in sorted(run_dir.glob("*classifier_log.csv")):
        rows = ex.read_csv(log_path)
        if not rows:
            continue
        epochs = [int(r["epoch"]) for r in rows]
        name = log_path.name.replace("classifier_log.csv", "loss_curve.svg")
        line_plot({k: (epochs, [float(r[k]) for r in rows]) for k in ("L_cls_w", "L_full")},
                  run_dir / name, "Training loss", "epoch", "loss")
        index.append({"file": name, "kind": "svg", "rows": 0})

    weight_rows = []
    for diag in sorted(run_dir.glob("*weight_diagnostics.csv")):
        for r in ex.read_csv(diag):
            clean, noisy = float(r["mean_w_clean"]), float(r["mean_w_noisy"])
            weight_rows.append({"source": diag.name, "category": int(r["category"]),
                                "mean_w_clean": clean, "mean_w_noisy": noisy,
                                "noisy_below_clean": noisy < clean,
                                "top3_noisy": int(r["top3_noisy"]),
                                "bottom3_noisy": int(r["bottom3_noisy"])})
    if weight_rows:
        ex.write_csv(weight_rows, run_dir / "weight_report.csv")
        index.append({"file": "weight_report.csv", "kind": "csv", "rows": len(weight_rows)})
        summary["categories_noisy_below_clean"] = sum(r["noisy_below_clean"] for r in weight_rows)
        summary["categories"] = len(weight_rows)
    ex.write_csv(index, run_dir / "report_index.csv", ["file", "kind", "rows"])
    return summary


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(message)s")
        if args.command == "report":
            result = cmd_report(args.run_dir)
            print(json.dumps(result, sort_keys=True))
            return 0
        cfg = resolve_config(args)
        if args.command == "gen-data":
            result = cmd_gen_data(cfg)
        elif args.command == "run":
            result = cmd_run(cfg, args.data)
        elif args.command == "ablation":
            result = cmd_ablation(cfg)
        elif args.command == "transfer-study":
            result = cmd_transfer(cfg)
        elif args.command == "scale-study":
            result = cmd_scale(cfg)
        else:
            result = cmd_noise(cfg)
        if isinstance(result, tuple):
            result = result[-1]
        n = len(result) if isinstance(result, list) else 1
        print(f"ok command={args.command} out={cfg.out_dir} rows={n}")
        return 0
    except Exception as exc:  # one-line error contract
        message = " ".join(str(exc).split())
        print(f"error: kind={type(exc).__name__} message={json.dumps(message)}", file=sys.stderr)
        return 2 if isinstance(exc, (CliError, ValueError)) else 1


if __name__ == "__main__":
    sys.exit(main())
