"""Pairwise similarity network: backbone, enumeration layer, relation head.

Also holds balanced batch sampling, plain and adversarial training, pair-level
evaluation and the Euclidean/cosine baseline similarities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig
from .numcore import (
    Layer,
    MlpParams,
    NumericError,
    SgdState,
    ShapeError,
    binary_ce,
    init_mlp,
    mlp_backward,
    mlp_forward,
    sgd_step,
    softmax_ce,
)
from .seeding import substream
from .synthdata import ConfigurationError, TrainView


class SamplingError(ValueError):
    pass


@dataclass
class SimNetModel:
    backbone: MlpParams  # D -> E
    relation_fc: MlpParams  # 2E -> R, relu
    score_head: MlpParams  # R -> 1, sigmoid
    counts: dict = field(default_factory=lambda: {"backbone": 0, "head": 0}, compare=False)

    def arrays(self) -> list[np.ndarray]:
        return self.backbone.arrays() + self.relation_fc.arrays() + self.score_head.arrays()

    def copy(self) -> "SimNetModel":
        return SimNetModel(self.backbone.copy(), self.relation_fc.copy(), self.score_head.copy())

    def embed(self, x: np.ndarray) -> np.ndarray:
        self.counts["backbone"] += len(x)
        return mlp_forward(self.backbone, x)[-1]

    def project(self, emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Left/right halves of the relation layer applied to each embedding once."""
        W = self.relation_fc.layers[0].weight
        E = emb.shape[1]
        return emb @ W[:, :E].T, emb @ W[:, E:].T

    def pair_scores(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        """Scores for all pairs (i, j) from left projections ``left[i]`` and right ``right[j]``."""
        r = _relation_from_projections(self, left, right)
        self.counts["head"] += len(r)
        s = mlp_forward(self.score_head, r)[-1]
        return s.reshape(len(left), len(right))


def _relation_from_projections(model: SimNetModel, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    # relation_fc(concat(e_i, e_j)) == relu(A e_i + B e_j + b); identical to
    # running the layer on enumerate_pairs output, without materializing it.
    layer = model.relation_fc.layers[0]
    z = left[:, None, :] + right[None, :, :] + layer.bias
    return np.maximum(z, 0.0).reshape(-1, z.shape[2])


def init_simnet(dim: int, config: TrainConfig, rng: np.random.Generator) -> SimNetModel:
    E = config.embed_dim
    return SimNetModel(
        backbone=init_mlp([dim, config.hidden_dim, E], rng),
        relation_fc=init_mlp([2 * E, config.relation_dim], rng, output="relu"),
        score_head=init_mlp([config.relation_dim, 1], rng, output="sigmoid"),
    )


def init_discriminator(config: TrainConfig, rng: np.random.Generator) -> MlpParams:
    return init_mlp([config.relation_dim, config.disc_hidden, 1], rng, output="sigmoid")


# ---------------------------------------------------------------------------
# batches and pair enumeration


@dataclass(frozen=True)
class PairBatch:
    features: np.ndarray
    labels: np.ndarray
    categories: tuple

    @property
    def M(self) -> int:
        return len(self.labels)


def sample_balanced_batch(view: TrainView, C_m: int, M: int, rng: np.random.Generator) -> PairBatch:
    """Pick ``C_m`` categories, then ``M / C_m`` images from each, shuffled."""
    if C_m < 1 or M % C_m:
        raise SamplingError(f"C_m={C_m} must divide M={M}")
    per = M // C_m
    cats = np.array(view.categories)
    if len(cats) < C_m:
        raise SamplingError(f"need {C_m} categories, split has {len(cats)}")
    chosen = rng.choice(cats, size=C_m, replace=False)
    idx = []
    for c in chosen:
        members = np.flatnonzero(view.labels == c)
        if len(members) < per:
            raise SamplingError(f"category {c} has {len(members)} images, need {per}")
        idx.append(rng.choice(members, size=per, replace=False))
    idx = rng.permutation(np.concatenate(idx))
    return PairBatch(view.features[idx], view.labels[idx], tuple(int(c) for c in chosen))


def sample_random_batch(view: TrainView, M: int, rng: np.random.Generator) -> PairBatch:
    if len(view) < M:
        raise SamplingError(f"need {M} images, split has {len(view)}")
    idx = rng.choice(len(view), size=M, replace=False)
    labels = view.labels[idx]
    return PairBatch(view.features[idx], labels, tuple(sorted(set(labels.tolist()))))


def pair_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels[:, None] == labels[None, :]).astype(np.float64)


def enumerate_pairs(emb: np.ndarray, other: np.ndarray | None = None) -> np.ndarray:
    """Row ``i * len(other) + j`` holds ``concat(emb[i], other[j])``."""
    other = emb if other is None else other
    a, b = len(emb), len(other)
    left = np.repeat(emb, b, axis=0)
    right = np.tile(other, (a, 1))
    return np.hstack([left, right])


def off_diagonal_mask(M: int) -> np.ndarray:
    return ~np.eye(M, dtype=bool)


# ---------------------------------------------------------------------------
# forward / backward through the whole network


@dataclass
class RelationPass:
    """Cached activations of one SimNet forward pass over a batch."""

    backbone_acts: list
    relation: np.ndarray  # (M*M, R); row i*M + j is the pair (i, j)
    score_acts: list

    @property
    def M(self) -> int:
        return len(self.backbone_acts[0])

    @property
    def scores(self) -> np.ndarray:
        return self.score_acts[-1].reshape(self.M, self.M)


def relation_forward(model: SimNetModel, features) -> RelationPass:
    """Similarity scores and relation features for all ordered pairs of a batch."""
    if isinstance(features, PairBatch):
        features = features.features
    if len(model.relation_fc.layers) != 1:
        raise ShapeError("relation_fc must be a single fully-connected layer")
    acts_b = mlp_forward(model.backbone, features)
    model.counts["backbone"] += len(features)
    left, right = model.project(acts_b[-1])
    r = _relation_from_projections(model, left, right)
    model.counts["head"] += len(r)
    acts_s = mlp_forward(model.score_head, r)
    return RelationPass(acts_b, r, acts_s)


def relation_forward_enumerated(model: SimNetModel, features: np.ndarray) -> RelationPass:
    """Reference path through an explicit ``M^2 x 2E`` enumeration layer."""
    acts_b = mlp_forward(model.backbone, features)
    r = mlp_forward(model.relation_fc, enumerate_pairs(acts_b[-1]))[-1]
    return RelationPass(acts_b, r, mlp_forward(model.score_head, r))


def relation_backward(model: SimNetModel, fp: RelationPass,
                      d_scores: np.ndarray | None, d_relation: np.ndarray | None = None
                      ) -> list[np.ndarray]:
    """Gradients for :meth:`SimNetModel.arrays` given dL/d scores (M x M) and dL/d relation."""
    M = fp.M
    if d_scores is not None:
        g_head, g_r = mlp_backward(model.score_head, fp.score_acts, d_scores.reshape(M * M, 1))
    else:
        g_head = [np.zeros_like(a) for a in model.score_head.arrays()]
        g_r = np.zeros_like(fp.relation)
    if d_relation is not None:
        g_r = g_r + d_relation
    g_z = (g_r * (fp.relation > 0)).reshape(M, M, -1)
    g_left = g_z.sum(axis=1)  # contributions of e_i as the first element
    g_right = g_z.sum(axis=0)  # ... and as the second
    emb = fp.backbone_acts[-1]
    W = model.relation_fc.layers[0].weight
    E = emb.shape[1]
    g_W = np.hstack([g_left.T @ emb, g_right.T @ emb])
    g_b = g_left.sum(axis=0)
    g_emb = g_left @ W[:, :E] + g_right @ W[:, E:]
    g_bb, _ = mlp_backward(model.backbone, fp.backbone_acts, g_emb)
    return g_bb + [g_W, g_b] + g_head


def relation_loss(scores: np.ndarray, labels: np.ndarray, mask: np.ndarray):
    """Mean binary cross-entropy over the masked ordered pairs, and dL/d scores."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ConfigurationError("relation loss mask selects no pairs")
    losses, grads = binary_ce(scores, labels)
    loss = float(losses[mask].sum() / n)
    return loss, np.where(mask, grads, 0.0) / n


def disc_forward(disc: MlpParams, relation: np.ndarray) -> list:
    return mlp_forward(disc, relation)


@dataclass
class AdversarialLosses:
    L_D: float
    L_G: float
    relation_ce: float
    disc_grads: list  # for the discriminator step
    simnet_grads: list  # for the generator step


def discriminator_loss(d_base: np.ndarray, d_novel: np.ndarray):
    """``mean log(1 - d_base) + mean log d_novel`` with gradients w.r.t. both score vectors."""
    ce_b, g_b = binary_ce(d_base, 0.0)
    ce_n, g_n = binary_ce(d_novel, 1.0)
    L_D = -(ce_b.mean() + ce_n.mean())
    return float(L_D), -g_b / len(d_base), -g_n / len(d_novel)


def adversarial_losses(model: SimNetModel, disc: MlpParams,
                       base_batch: PairBatch, novel_batch: PairBatch, beta: float,
                       fp_base: RelationPass | None = None,
                       fp_novel: RelationPass | None = None,
                       need: str = "both") -> AdversarialLosses:
    """Both losses of the alternating game at the current parameters.

    ``disc_grads`` are dL_D/d(disc params); ``simnet_grads`` are dL_G/d(SimNet
    params) with the discriminator held fixed. Novel pairs never enter the
    relation classification term.
    """
    fp_base = fp_base or relation_forward(model, base_batch.features)
    fp_novel = fp_novel or relation_forward(model, novel_batch.features)
    acts_b = disc_forward(disc, fp_base.relation)
    acts_n = disc_forward(disc, fp_novel.relation)
    L_D, g_db, g_dn = discriminator_loss(acts_b[-1], acts_n[-1])

    labels = pair_labels(base_batch.labels)
    ce, d_scores = relation_loss(fp_base.scores, labels, off_diagonal_mask(base_batch.M))
    disc_grads: list = []
    simnet_grads: list = []
    if need in ("disc", "both"):
        gb_disc, _ = mlp_backward(disc, acts_b, g_db)
        gn_disc, _ = mlp_backward(disc, acts_n, g_dn)
        disc_grads = [a + b for a, b in zip(gb_disc, gn_disc)]
    if need in ("gen", "both"):
        if beta:
            _, g_rb = mlp_backward(disc, acts_b, g_db, param_grads=False)
            _, g_rn = mlp_backward(disc, acts_n, g_dn, param_grads=False)
            g_base = relation_backward(model, fp_base, d_scores, -beta * g_rb)
            g_novel = relation_backward(model, fp_novel, None, -beta * g_rn)
            simnet_grads = [a + b for a, b in zip(g_base, g_novel)]
        else:
            simnet_grads = relation_backward(model, fp_base, d_scores)
    return AdversarialLosses(L_D, -beta * L_D + ce, ce, disc_grads, simnet_grads)


# ---------------------------------------------------------------------------
# training


@dataclass
class SimNetHistory:
    relation_ce: list = field(default_factory=list)
    L_D: list = field(default_factory=list)
    L_G: list = field(default_factory=list)


def pretrain_backbone(view: TrainView, dim: int, config: TrainConfig) -> MlpParams:
    """Plain softmax classifier on ``view``; returns its backbone."""
    rng = substream(config.seed, "pretrain")
    cats = view.categories
    index = {c: k for k, c in enumerate(cats)}
    y = np.array([index[c] for c in view.labels.tolist()])
    backbone = init_mlp([dim, config.hidden_dim, config.embed_dim], rng)
    head = init_mlp([config.embed_dim, len(cats)], rng)
    params = backbone.arrays() + head.arrays()
    state = SgdState(config.simnet_lr, config.momentum, config.weight_decay)
    n = len(view)
    bs = min(config.batch_size, n)
    for _ in range(config.pretrain_epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            acts_b = mlp_forward(backbone, view.features[idx])
            acts_h = mlp_forward(head, acts_b[-1])
            losses, g = softmax_ce(acts_h[-1], y[idx])
            g_head, g_emb = mlp_backward(head, acts_h, g / len(idx))
            g_bb, _ = mlp_backward(backbone, acts_b, g_emb)
            sgd_step(params, g_bb + g_head, state)
    return backbone


def iterations_per_epoch(n_images: int, M: int) -> int:
    return max(1, n_images // M)


def train_simnet(base_train: TrainView, novel_train: TrainView | None, config: TrainConfig,
                 history: SimNetHistory | None = None) -> SimNetModel:
    """Train on balanced base batches.

    Novel data, when given, initializes the backbone (if ``pretrain_backbone``)
    and, with ``use_adversarial``, feeds the discriminator game.
    """
    dim = base_train.features.shape[1]
    model = init_simnet(dim, config, substream(config.seed, "simnet-init"))
    has_novel = novel_train is not None and len(novel_train) > 0
    adversarial = has_novel and config.use_adversarial
    if has_novel and config.pretrain_backbone:
        model.backbone = pretrain_backbone(novel_train, dim, config)
    batch_rng = substream(config.seed, "simnet-batches")
    C_m = min(config.C_m, len(base_train.categories))
    M = config.M - config.M % C_m

    state = SgdState(config.simnet_lr, config.momentum, config.weight_decay)
    params = model.arrays()
    if adversarial:
        disc = init_discriminator(config, substream(config.seed, "disc-init"))
        disc_state = SgdState(config.simnet_lr, config.momentum, config.weight_decay)
        disc_params = disc.arrays()
        novel_rng = substream(config.seed, "disc-batches")
        M_novel = min(M, len(novel_train))

    n_iter = iterations_per_epoch(len(base_train), M)
    for _ in range(config.simnet_epochs):
        for _ in range(n_iter):
            base = sample_balanced_batch(base_train, C_m, M, batch_rng)
            fp_b = relation_forward(model, base.features)
            if not adversarial:
                labels = pair_labels(base.labels)
                ce, d_scores = relation_loss(fp_b.scores, labels, off_diagonal_mask(M))
                sgd_step(params, relation_backward(model, fp_b, d_scores), state)
                if history is not None:
                    history.relation_ce.append(ce)
                continue
            novel = sample_random_batch(novel_train, M_novel, novel_rng)
            fp_n = relation_forward(model, novel.features)
            # discriminator step with SimNet frozen
            step1 = adversarial_losses(model, disc, base, novel, config.beta, fp_b, fp_n,
                                       need="disc")
            sgd_step(disc_params, step1.disc_grads, disc_state)
            # SimNet step with the updated discriminator frozen
            step2 = adversarial_losses(model, disc, base, novel, config.beta, fp_b, fp_n,
                                       need="gen")
            sgd_step(params, step2.simnet_grads, state)
            if history is not None:
                history.relation_ce.append(step2.relation_ce)
                history.L_D.append(step1.L_D)
                history.L_G.append(step2.L_G)
    return model


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class PairMetrics:
    similar: ClassMetrics
    dissimilar: ClassMetrics

    def row(self) -> dict:
        out = {}
        for name in ("similar", "dissimilar"):
            m = getattr(self, name)
            out[f"{name}_PR"] = m.precision
            out[f"{name}_RR"] = m.recall
            out[f"{name}_F1"] = m.f1
        return out


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def _class_metrics(pred: np.ndarray, truth: np.ndarray) -> ClassMetrics:
    tp = float(np.sum(pred & truth))
    n_pred = float(pred.sum())
    n_true = float(truth.sum())
    pr = 100.0 * tp / n_pred if n_pred else 0.0
    rr = 100.0 * tp / n_true if n_true else 0.0
    return ClassMetrics(pr, rr, f1_score(pr, rr))


def pair_metrics(scores: np.ndarray, labels, include_diagonal: bool = False,
                 threshold: float = 0.5) -> PairMetrics:
    truth = pair_labels(labels).astype(bool)
    pred = np.asarray(scores) >= threshold
    keep = np.ones_like(truth) if include_diagonal else off_diagonal_mask(len(truth))
    pred, truth = pred[keep], truth[keep]
    return PairMetrics(_class_metrics(pred, truth), _class_metrics(~pred, ~truth))


def _average(metrics: list[PairMetrics]) -> PairMetrics:
    def avg(name):
        ms = [getattr(m, name) for m in metrics]
        return ClassMetrics(
            float(np.mean([m.precision for m in ms])),
            float(np.mean([m.recall for m in ms])),
            float(np.mean([m.f1 for m in ms])),
        )
    return PairMetrics(avg("similar"), avg("dissimilar"))


Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


def eval_pairs(model: SimNetModel | Scorer, test_view: TrainView, C_m: int, M: int,
               n_batches: int, rng: np.random.Generator,
               include_diagonal: bool = False) -> PairMetrics:
    """Pair-level precision/recall/F1 averaged over balanced test batches.

    ``model`` may also be any callable ``(features, labels) -> M x M scores``.
    Scores at or above 0.5 count as a "similar" prediction.
    """
    if isinstance(model, SimNetModel):
        def scorer(x, _labels):
            return relation_forward(model, x).scores
    else:
        scorer = model
    results = []
    for _ in range(n_batches):
        batch = sample_balanced_batch(test_view, C_m, M, rng)
        results.append(pair_metrics(scorer(batch.features, batch.labels), batch.labels,
                                    include_diagonal))
    return _average(results)


def random_guess_metrics(similar_rate: float) -> PairMetrics:
    """Closed-form metrics of a coin-flip predictor at a given similar-pair rate."""
    sim = ClassMetrics(100 * similar_rate, 50.0, f1_score(100 * similar_rate, 50.0))
    dis = ClassMetrics(100 * (1 - similar_rate), 50.0, f1_score(100 * (1 - similar_rate), 50.0))
    return PairMetrics(sim, dis)


def similar_pair_rate(C_m: int, M: int, include_diagonal: bool = False) -> float:
    per = M // C_m
    if include_diagonal:
        return per / M
    return (per - 1) / (M - 1)


# ---------------------------------------------------------------------------
# baselines


def baseline_similarity(emb: np.ndarray, kind: str, eps: float = 1e-6) -> np.ndarray:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or len(emb) == 0:
        raise ShapeError("embeddings must be a non-empty 2-D array")
    if kind == "euclidean":
        sq = np.sum(emb ** 2, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * emb @ emb.T, 0.0)
        np.fill_diagonal(d2, 0.0)
        return 1.0 / (np.sqrt(d2) + eps)
    if kind == "cosine":
        norms = np.linalg.norm(emb, axis=1)
        if np.any(norms == 0):
            raise NumericError("cosine similarity undefined for zero-norm embeddings")
        unit = emb / norms[:, None]
        return np.clip(unit @ unit.T, 0.0, 1.0)
    raise ValueError(f"unknown similarity kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints


def _named_arrays(prefix: str, params: MlpParams):
    for k, layer in enumerate(params.layers):
        yield f"{prefix}.{k}.weight.{layer.activation}", layer.weight
        yield f"{prefix}.{k}.bias.{layer.activation}", layer.bias.reshape(1, -1)


def save_params(groups: dict[str, MlpParams], path) -> None:
    lines = []
    for prefix, params in groups.items():
        for name, arr in _named_arrays(prefix, params):
            vals = ",".join(repr(float(v)) for v in arr.reshape(-1))
            lines.append(f"{name},{arr.shape[0]},{arr.shape[1]},{vals}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_params(path) -> dict[str, MlpParams]:
    tensors: dict[str, dict[int, dict]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        if not line:
            continue
        name, rows, cols, *vals = line.split(",")
        rows, cols = int(rows), int(cols)
        if len(vals) != rows * cols:
            raise ValueError(f"line {lineno}: expected {rows * cols} values, found {len(vals)}")
        prefix, k, kind, act = name.rsplit(".", 3)
        arr = np.array([float(v) for v in vals]).reshape(rows, cols)
        tensors.setdefault(prefix, {}).setdefault(int(k), {"act": act})[kind] = arr
    out = {}
    for prefix, layers in tensors.items():
        out[prefix] = MlpParams([
            Layer(layers[k]["weight"], layers[k]["bias"].reshape(-1), layers[k]["act"])
            for k in sorted(layers)
        ])
    return out


def save_simnet(model: SimNetModel, path) -> None:
    save_params({"backbone": model.backbone, "relation_fc": model.relation_fc,
                 "score_head": model.score_head}, path)


def load_simnet(path) -> SimNetModel:
    g = load_params(path)
    return SimNetModel(g["backbone"], g["relation_fc"], g["score_head"])
