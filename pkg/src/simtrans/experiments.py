"""End-to-end pipelines and the ablation / transfer / scale / noise studies."""

from __future__ import annotations

import csv
import hashlib
import itertools
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .classifier import ClassifierHistory, evaluate_accuracy, save_classifier, train_classifier
from .config import TrainConfig
from .denoise import (
    SimilarityMatrix,
    batch_similarity,
    oracle_similarity,
    weights_for_view,
)
from .numcore import mlp_forward
from .seeding import substream
from .simnet import (
    baseline_similarity,
    eval_pairs,
    pretrain_backbone,
    random_guess_metrics,
    save_simnet,
    similar_pair_rate,
    train_simnet,
)
from .synthdata import (
    ConfigurationError,
    Dataset,
    DatasetSpec,
    NoiseSpec,
    TrainView,
    generate_dataset,
    inject_web_noise,
)

log = logging.getLogger(__name__)

STUDIES = ("run", "ablation", "transfer", "scale", "noise")

# Table-2 style toggle combinations: (weights, reg, adversarial)
ABLATION_ROWS = {
    "Cls": (False, False, False),
    "Weight": (True, False, False),
    "Reg": (False, True, False),
    "Weight+Ad": (True, False, True),
    "Reg+Ad": (False, True, True),
    "Weight+Reg": (True, True, False),
    "Weight+Reg+Ad": (True, True, True),
}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    study: str = "run"
    out_dir: str = "runs"
    seeds: tuple = (0, 1, 2, 3, 4)
    scale_categories: tuple = (5, 10, 15)
    scale_images: tuple = (5, 15, 30)
    noise_ratios: tuple = (0.1, 0.2, 0.3, 0.4)

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ConfigurationError(f"study must be one of {STUDIES}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")

    # flat key space: dataset fields keep their names, noise fields get a
    # noise_ prefix, train fields keep theirs; per-part seeds come from `seeds`
    def to_flat(self) -> dict:
        out = {}
        for f in fields(DatasetSpec):
            if f.name != "seed":
                out[f.name] = getattr(self.dataset, f.name)
        out["noise_ratio"] = self.noise.ratio
        out["noise_flip_fraction"] = self.noise.flip_fraction
        for f in fields(TrainConfig):
            if f.name != "seed":
                out[f.name] = getattr(self.train, f.name)
        out["study"] = self.study
        out["out_dir"] = self.out_dir
        for name in ("seeds", "scale_categories", "scale_images", "noise_ratios"):
            out[name] = getattr(self, name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.to_flat().items())

    @classmethod
    def from_flat(cls, values: dict) -> "ExperimentConfig":
        base = cls().to_flat()
        unknown = sorted(set(values) - set(base))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        merged = {k: _coerce(v, base[k], k) for k, v in {**base, **values}.items()}
        ds = DatasetSpec(**{f.name: merged[f.name] for f in fields(DatasetSpec) if f.name != "seed"})
        noise = NoiseSpec(ratio=merged["noise_ratio"], flip_fraction=merged["noise_flip_fraction"])
        train = TrainConfig(**{f.name: merged[f.name] for f in fields(TrainConfig) if f.name != "seed"})
        return cls(ds, noise, train, merged["study"], merged["out_dir"], merged["seeds"],
                   merged["scale_categories"], merged["scale_images"], merged["noise_ratios"])

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return cls.from_flat(values)

    def config_hash(self) -> str:
        """Digest of everything that affects results (the output directory does not)."""
        flat = self.to_flat()
        del flat["out_dir"]
        text = "".join(f"{k} = {_format_value(v)}\n" for k, v in flat.items())
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def for_seed(self, seed: int) -> tuple[DatasetSpec, NoiseSpec, TrainConfig]:
        return (replace(self.dataset, seed=seed), replace(self.noise, seed=seed),
                replace(self.train, seed=seed))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(value, like, key):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(like, bool):
            if value.lower() not in ("true", "false"):
                raise ValueError(value)
            return value.lower() == "true"
        if isinstance(like, tuple):
            kind = type(like[0]) if like else float
            return tuple(kind(x) for x in value.split(",") if x.strip())
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from None
    return value


def build_dataset(spec: DatasetSpec, noise: NoiseSpec) -> Dataset:
    return inject_web_noise(generate_dataset(spec), noise)


# ---------------------------------------------------------------------------
# similarity sources


def _simnet_for_source(ds: Dataset, source: str, cfg: TrainConfig):
    base, novel = ds.view("base_train"), ds.view("novel_train")
    if source == "base":
        return train_simnet(base, novel, cfg)
    if source == "novel":
        return train_simnet(novel, None, cfg)
    if source == "novel+base":
        both = TrainView(np.vstack([base.features, novel.features]),
                         np.concatenate([base.labels, novel.labels]))
        return train_simnet(both, None, cfg)
    raise ConfigurationError(f"unknown similarity source {source!r}")


def _source_view(ds: Dataset, source: str) -> TrainView:
    base, novel = ds.view("base_train"), ds.view("novel_train")
    if source == "base":
        return base
    if source == "novel":
        return novel
    return TrainView(np.vstack([base.features, novel.features]),
                     np.concatenate([base.labels, novel.labels]))


def similarity_provider(ds: Dataset, cfg: TrainConfig, kind: str = "simnet", source: str = "base"):
    """Return ``(provider, simnet_or_None)``; provider maps (indices, features) to a matrix.

    ``kind="oracle"`` reads ground-truth labels of novel_train and exists only
    for the transfer study's upper-bound row.
    """
    if kind == "simnet":
        model = _simnet_for_source(ds, source, cfg)

        def provider(_idx, feats):
            return batch_similarity(model, feats)
        return provider, model
    if kind in ("euclidean", "cosine"):
        backbone = pretrain_backbone(_source_view(ds, source), ds.dim, cfg)

        def provider(_idx, feats):
            s = baseline_similarity(mlp_forward(backbone, feats)[-1], kind)
            if kind == "euclidean":
                # 1/(0 + eps) on the diagonal would swamp every row mean
                np.fill_diagonal(s, 0.0)
            return SimilarityMatrix(s, kind)
        return provider, None
    if kind == "oracle":
        truth = ds.true_labels[ds.mask("novel_train")]

        def provider(idx, _feats):
            return oracle_similarity(truth[idx])
        return provider, None
    raise ConfigurationError(f"unknown similarity kind {kind!r}")


# ---------------------------------------------------------------------------
# one pipeline run


def weight_diagnostics(ds: Dataset, weights: np.ndarray) -> list[dict]:
    """Mean normalized weight of clean vs noisy records per novel category."""
    m = ds.mask("novel_train")
    labels, noisy = ds.labels[m], ds.is_noisy[m]
    rows = []
    for c in sorted(set(labels.tolist())):
        in_c = labels == c
        order = np.argsort(weights[in_c], kind="stable")
        flags = noisy[in_c]
        rows.append({
            "category": c,
            "mean_w_clean": float(weights[in_c & ~noisy].mean()) if np.any(in_c & ~noisy) else float("nan"),
            "mean_w_noisy": float(weights[in_c & noisy].mean()) if np.any(in_c & noisy) else float("nan"),
            "n_noisy": int(flags.sum()),
            "top3_noisy": int(flags[order[-3:]].sum()),
            "bottom3_noisy": int(flags[order[:3]].sum()),
        })
    return rows


@dataclass
class RunResult:
    accuracy: float
    weight_rows: list = field(default_factory=list)
    weights: np.ndarray | None = None
    simnet: object = None
    classifier: object = None
    history: ClassifierHistory | None = None


def run_pipeline(ds: Dataset, cfg: TrainConfig, kind: str = "simnet", source: str = "base",
                 simnet=None, provider=None) -> RunResult:
    """SimNet (if needed) -> sample weights -> classifier -> test accuracy.

    A pre-trained ``simnet`` or ``provider`` may be passed to share one
    similarity model across several classifier configurations.
    """
    novel = ds.view("novel_train")
    needs_similarity = cfg.use_weights or cfg.use_reg
    if needs_similarity and provider is None:
        if simnet is not None:
            def provider(_idx, feats):
                return batch_similarity(simnet, feats)
        else:
            provider, simnet = similarity_provider(ds, cfg, kind, source)
    weights, rows = None, []
    if cfg.use_weights:
        weights, _ = weights_for_view(novel, provider)
        rows = weight_diagnostics(ds, weights)
    generalized = cfg.mode == "generalized"
    base = ds.view("base_train") if generalized else None
    if generalized:
        test = TrainView(np.vstack([ds.view("base_test").features, ds.view("novel_test").features]),
                         np.concatenate([ds.view("base_test").labels, ds.view("novel_test").labels]))
    else:
        test = ds.view("novel_test")
    history = ClassifierHistory()
    model = train_classifier(novel, weights, provider if cfg.use_reg else None, cfg,
                             base_train=base, history=history, test_view=test)
    return RunResult(evaluate_accuracy(model, test), rows, weights, simnet, model, history)


def toggled(cfg: TrainConfig, weights: bool, reg: bool, adversarial: bool) -> TrainConfig:
    return replace(cfg, use_weights=weights, use_reg=reg, use_adversarial=adversarial)


# ---------------------------------------------------------------------------
# studies


def _tag(cfg: ExperimentConfig, seed: int) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": seed}


def ablation_study(cfg: ExperimentConfig) -> list[dict]:
    rows = []
    for seed in cfg.seeds:
        spec, noise, train = cfg.for_seed(seed)
        ds = build_dataset(spec, noise)
        simnets = {}
        for name, (w, r, a) in ABLATION_ROWS.items():
            tc = toggled(train, w, r, a)
            if (w or r) and a not in simnets:
                simnets[a] = _simnet_for_source(ds, "base", tc)
            res = run_pipeline(ds, tc, simnet=simnets.get(a))
            rows.append({**_tag(cfg, seed), "method": name, "weights": w, "reg": r,
                         "adversarial": a, "accuracy": res.accuracy})
            log.info("ablation seed=%s %s acc=%.2f", seed, name, res.accuracy)
    return rows


def transfer_eval_shape(ds_spec: DatasetSpec, train: TrainConfig) -> tuple[int, int]:
    """Batch shape usable on both test splits: C_m capped by the smaller category set."""
    C_m = min(train.C_m, ds_spec.n_base_categories, ds_spec.n_novel_categories)
    per = min(train.M // C_m, ds_spec.test_per_category)
    return C_m, C_m * per


def transfer_study(cfg: ExperimentConfig) -> tuple[list[dict], list[dict]]:
    """Pair metrics on base vs novel test pairs, and classifier accuracy per similarity source/type."""
    pair_rows, source_rows = [], []
    for seed in cfg.seeds:
        spec, noise, train = cfg.for_seed(seed)
        ds = build_dataset(spec, noise)
        C_m, M = transfer_eval_shape(spec, train)
        base_model = _simnet_for_source(ds, "base", train)
        for split in ("base_test", "novel_test"):
            m = eval_pairs(base_model, ds.view(split), C_m, M, train.eval_batches,
                           substream(seed, "eval"))
            pair_rows.append({**_tag(cfg, seed), "split": split, "C_m": C_m, "M": M, **m.row()})
        rand = random_guess_metrics(similar_pair_rate(C_m, M))
        pair_rows.append({**_tag(cfg, seed), "split": "rand_analytic", "C_m": C_m, "M": M,
                          **rand.row()})
        for source, kind in itertools.product(("novel", "novel+base", "base"),
                                              ("euclidean", "cosine", "simnet")):
            if (source, kind) == ("base", "simnet"):
                res = run_pipeline(ds, train, simnet=base_model)
            else:
                res = run_pipeline(ds, train, kind=kind, source=source)
            source_rows.append({**_tag(cfg, seed), "source": source, "type": kind,
                                "accuracy": res.accuracy})
        res = run_pipeline(ds, train, kind="oracle")
        source_rows.append({**_tag(cfg, seed), "source": "oracle", "type": "oracle",
                            "accuracy": res.accuracy})
        log.info("transfer seed=%s done", seed)
    return pair_rows, source_rows


def scale_study(cfg: ExperimentConfig) -> list[dict]:
    rows = []
    for seed in cfg.seeds:
        spec, noise, train = cfg.for_seed(seed)
        ds = build_dataset(spec, noise)
        for n_cat, n_img in itertools.product(cfg.scale_categories, cfg.scale_images):
            sub = restrict_base(ds, n_cat, n_img)
            C_m, M = transfer_eval_shape(replace(spec, n_base_categories=n_cat), train)
            tc = replace(train, C_m=min(train.C_m, n_cat),
                         M=min(train.C_m, n_cat) * min(train.M // train.C_m, n_img))
            model = _simnet_for_source(sub, "base", tc)
            pm = eval_pairs(model, sub.view("novel_test"), C_m, M, train.eval_batches,
                            substream(seed, "eval"))
            res = run_pipeline(sub, train, simnet=model)
            rows.append({**_tag(cfg, seed), "n_base_categories": n_cat, "n_base_images": n_img,
                         "simnet_f1": pm.similar.f1, "accuracy": res.accuracy})
            log.info("scale seed=%s C=%s N=%s acc=%.2f", seed, n_cat, n_img, res.accuracy)
    return rows


def restrict_base(ds: Dataset, n_categories: int, n_images: int) -> Dataset:
    """Keep the first ``n_categories`` base categories and ``n_images`` training images each."""
    keep = np.ones(len(ds), dtype=bool)
    base_train = ds.mask("base_train")
    base_any = base_train | ds.mask("base_test")
    base_ids = sorted(set(ds.labels[base_any].tolist()))
    allowed = set(base_ids[:n_categories])
    for c in base_ids:
        rows = np.flatnonzero(base_train & (ds.labels == c))
        if c not in allowed:
            keep[base_any & (ds.labels == c)] = False
        else:
            keep[rows[n_images:]] = False
    return ds.subset(keep)


def noise_study(cfg: ExperimentConfig) -> list[dict]:
    rows = []
    for seed in cfg.seeds:
        spec, noise, train = cfg.for_seed(seed)
        for ratio in cfg.noise_ratios:
            ds = build_dataset(spec, replace(noise, ratio=ratio))
            for method, tc in (("Cls", toggled(train, False, False, False)),
                               ("SimTrans", toggled(train, True, True, True))):
                res = run_pipeline(ds, tc)
                rows.append({**_tag(cfg, seed), "noise_ratio": ratio, "method": method,
                             "accuracy": res.accuracy})
            log.info("noise seed=%s ratio=%s done", seed, ratio)
    return rows


# ---------------------------------------------------------------------------
# aggregation and output


def aggregate(rows: list[dict], keys: list[str], value: str) -> list[dict]:
    """Mean and (population) std of ``value`` grouped by ``keys``, in first-seen order."""
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    out = []
    for key, vals in groups.items():
        out.append({**dict(zip(keys, key)), f"{value}_mean": float(np.mean(vals)),
                    f"{value}_std": float(np.std(vals)), "n": len(vals)})
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(rows: list[dict], path, columns: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with path.open("w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="ascii") as fh:
        return list(csv.DictReader(fh))


def write_classifier_log(history: ClassifierHistory, path) -> None:
    write_csv(history.epochs, path, ["epoch", "L_cls_w", "L_reg_raw", "L_reg_norm", "L_full",
                                     "train_acc", "test_acc"])


def save_run_artifacts(res: RunResult, out: Path, prefix: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    if res.history is not None:
        write_classifier_log(res.history, out / f"{prefix}classifier_log.csv")
    if res.simnet is not None:
        save_simnet(res.simnet, out / f"{prefix}simnet.ckpt")
    if res.classifier is not None:
        save_classifier(res.classifier, out / f"{prefix}classifier.ckpt")
    if res.weight_rows:
        write_csv(res.weight_rows, out / f"{prefix}weight_diagnostics.csv")


__all__ = [
    "ABLATION_ROWS",
    "ExperimentConfig",
    "RunResult",
    "ablation_study",
    "aggregate",
    "build_dataset",
    "noise_study",
    "run_pipeline",
    "scale_study",
    "similarity_provider",
    "transfer_study",
    "write_csv",
]
