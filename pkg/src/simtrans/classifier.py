"""Novel-category classifier trained on weighted CE plus graph regularization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import TrainConfig
from .denoise import SimilarityMatrix, batch_similarity
from .numcore import (
    MlpParams,
    SgdState,
    ShapeError,
    init_mlp,
    mlp_backward,
    mlp_forward,
    sgd_step,
    softmax_ce,
)
from .seeding import substream
from .simnet import SimNetModel, save_params, load_params
from .synthdata import ConfigurationError, TrainView


@dataclass
class ClassifierModel:
    backbone: MlpParams  # D -> E, the feature extractor h
    head: MlpParams  # E -> C logits
    categories: list[int]

    def arrays(self) -> list[np.ndarray]:
        return self.backbone.arrays() + self.head.arrays()

    def logits(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.head, mlp_forward(self.backbone, x)[-1])[-1]

    def predict(self, x: np.ndarray) -> np.ndarray:
        # argmax keeps the first maximum, so ties go to the lowest class index
        return np.asarray(self.categories)[np.argmax(self.logits(x), axis=1)]


def init_classifier(dim: int, categories, config: TrainConfig,
                    rng: np.random.Generator) -> ClassifierModel:
    backbone = init_mlp([dim, config.hidden_dim, config.embed_dim], rng)
    head = init_mlp([config.embed_dim, len(categories)], rng)
    return ClassifierModel(backbone, head, list(categories))


def weighted_ce_loss(logits: np.ndarray, labels, weights) -> tuple[float, np.ndarray]:
    """``mean_m( -w_m log softmax(logits_m)[y_m] )`` and its gradient w.r.t. logits."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(logits),):
        raise ShapeError(f"weights {weights.shape} do not match {len(logits)} samples")
    if np.any(weights < 0):
        raise ValueError("sample weights must be non-negative")
    losses, grad = softmax_ce(logits, labels)
    M = len(logits)
    return float(np.sum(weights * losses) / M), grad * (weights[:, None] / M)


def graph_reg_loss(emb: np.ndarray, S, normalize: bool = True) -> tuple[float, np.ndarray]:
    """``sum_ij s_ij ||h_i - h_j||^2`` (divided by M^2 when ``normalize``) and d/d emb.

    The similarity matrix is treated as a constant.
    """
    s = S.entries if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)
    M = len(emb)
    if s.shape != (M, M):
        raise ShapeError(f"similarity {s.shape} does not match {M} embeddings")
    diff = emb[:, None, :] - emb[None, :, :]
    loss = float(np.sum(s * np.sum(diff * diff, axis=2)))
    A = s + s.T
    grad = 2.0 * (A.sum(axis=1)[:, None] * emb - A @ emb)
    if normalize:
        return loss / M ** 2, grad / M ** 2
    return loss, grad


def class_balance_weights(counts) -> np.ndarray:
    """Inverse-frequency multipliers with unit mean over categories."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ConfigurationError("every category needs at least one image")
    inv = 1.0 / counts
    return inv / inv.mean()


BatchSimilarity = Callable[[np.ndarray, np.ndarray], SimilarityMatrix]


@dataclass
class ClassifierHistory:
    steps: list = field(default_factory=list)  # per-step loss dicts
    epochs: list = field(default_factory=list)  # per-epoch log rows


def train_classifier(novel_train: TrainView, sample_weights, similarity, config: TrainConfig,
                     base_train: TrainView | None = None, history: ClassifierHistory | None = None,
                     test_view: TrainView | None = None) -> ClassifierModel:
    """Minimize ``L_cls_w + alpha * L_reg`` over shuffled mini-batches.

    ``similarity`` is a frozen :class:`SimNetModel` or a callable
    ``(record_indices, features) -> SimilarityMatrix`` producing the batch
    adjacency; it may be ``None`` when ``config.use_reg`` is off. In
    generalized mode ``base_train`` is appended to the training set with unit
    sample weights and every sample's weight is scaled by its category's
    inverse-frequency multiplier.
    """
    if config.use_reg and similarity is None:
        raise ConfigurationError("graph regularization needs a similarity source")
    if isinstance(similarity, SimNetModel):
        simnet = similarity

        def similarity(_idx, feats):
            return batch_similarity(simnet, feats)

    n_novel = len(novel_train)
    w = np.ones(n_novel) if sample_weights is None or not config.use_weights \
        else np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n_novel,):
        raise ShapeError(f"{len(w)} weights for {n_novel} training records")
    feats, labels = novel_train.features, novel_train.labels
    # with no base data generalized mode is weak-shot mode
    merge = config.mode == "generalized" and base_train is not None and len(base_train) > 0
    if merge:
        feats = np.vstack([base_train.features, feats])
        labels = np.concatenate([base_train.labels, labels])
        w = np.concatenate([np.ones(len(base_train)), w])
    categories = sorted(set(labels.tolist()))
    index = {c: k for k, c in enumerate(categories)}
    y = np.array([index[c] for c in labels.tolist()], dtype=np.int64)
    if merge:
        mult = class_balance_weights(np.bincount(y, minlength=len(categories)))
        w = w * mult[y]

    dim = feats.shape[1]
    model = init_classifier(dim, categories, config, substream(config.seed, "classifier-init"))
    params = model.arrays()
    state = SgdState(config.lr, config.momentum, config.weight_decay)
    rng = substream(config.seed, "classifier-batches")
    n = len(y)
    offset = n - n_novel  # similarity callables index into the novel view

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            acts_b = mlp_forward(model.backbone, feats[idx])
            acts_h = mlp_forward(model.head, acts_b[-1])
            l_cls, g_logits = weighted_ce_loss(acts_h[-1], y[idx], w[idx])
            g_head, g_emb = mlp_backward(model.head, acts_h, g_logits)
            l_raw = l_norm = 0.0
            if config.use_reg:
                S = similarity(idx - offset, feats[idx])
                l_norm, g_reg = graph_reg_loss(acts_b[-1], S)
                l_raw = l_norm * len(idx) ** 2
                g_emb = g_emb + config.alpha * g_reg
            l_full = l_cls + config.alpha * l_norm
            g_bb, _ = mlp_backward(model.backbone, acts_b, g_emb)
            sgd_step(params, g_bb + g_head, state)
            sums += (l_cls, l_raw, l_norm, l_full)
            if history is not None:
                history.steps.append({"epoch": epoch, "L_cls_w": l_cls, "L_reg_raw": l_raw,
                                      "L_reg_norm": l_norm, "L_full": l_full})
        if history is not None:
            n_batches = -(-n // config.batch_size)
            means = sums / n_batches
            history.epochs.append({
                "epoch": epoch,
                "L_cls_w": means[0],
                "L_reg_raw": means[1],
                "L_reg_norm": means[2],
                "L_full": means[3],
                "train_acc": accuracy(model.predict(feats), labels),
                "test_acc": evaluate_accuracy(model, test_view) if test_view is not None else float("nan"),
            })
    return model


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if len(truth) == 0:
        raise ConfigurationError("cannot compute accuracy on an empty set")
    return 100.0 * float(np.mean(pred == truth))


def evaluate_accuracy(model: ClassifierModel, test_view: TrainView) -> float:
    """Top-1 accuracy in percent."""
    if len(test_view) == 0:
        raise ConfigurationError("empty test set")
    return accuracy(model.predict(test_view.features), test_view.labels)


def save_classifier(model: ClassifierModel, path) -> None:
    save_params({"backbone": model.backbone, "head": model.head}, path)


def load_classifier(path, categories) -> ClassifierModel:
    g = load_params(path)
    return ClassifierModel(g["backbone"], g["head"], list(categories))
