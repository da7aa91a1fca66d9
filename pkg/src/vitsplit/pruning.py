"""Class-conditioned structured pruning of a ViT scored by KL divergence.

A sub-model for class subset ``C_i`` is carved out of the original model in
three stages, each scored on the current structure and then physically
applied: residual channels, attention q/k/v dimensions, FFN hidden units.
Every stage keeps the fraction ``s = (h - hp) / h`` of its units.

Unit importance is the mean KL divergence between the stage-input model's
softmax output and the output with that single unit zeroed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import cost
from .tensor_math import (
    DTYPE,
    Adam,
    DenseLayer,
    cross_entropy_with_grad,
    dense_backward,
    dense_forward,
    softmax_rows,
)
from .vit import (
    Block,
    ViTConfig,
    ViTWeights,
    check_weights,
    embed,
    encode,
    forward_embedding,
    run_block,
)

logger = logging.getLogger(__name__)

STAGES = ("residual", "mhsa", "ffn")
Q_FLOOR = 1e-12


class PruningError(ValueError):
    pass


@dataclass(frozen=True)
class PruneSpec:
    """How hard to prune one sub-model and for which classes."""

    hp: int
    h: int
    classes: tuple[int, ...]

    def __post_init__(self):
        if not 0 <= self.hp < self.h:
            raise PruningError(f"hp must satisfy 0 <= hp < h={self.h}, got {self.hp}")
        if not self.classes:
            raise PruningError("class subset is empty")
        object.__setattr__(self, "classes", tuple(sorted(int(c) for c in self.classes)))

    @property
    def s(self) -> float:
        return (self.h - self.hp) / self.h


def pruned_config(config: ViTConfig, spec: PruneSpec, num_classes: int | None = None) -> ViTConfig:
    """Config of the sub-model produced by all three stages.

    ``num_classes`` defaults to the original head size (the head is swapped
    for the subset head by :func:`prune_pipeline`, not by the stages).
    """
    d = cost.round_half_up(spec.s * config.d)
    if d < 1:
        raise PruningError(f"s={spec.s} leaves no residual channels")
    return replace(
        config,
        d=d,
        h=config.h - spec.hp,
        c=max(1, cost.round_half_up(spec.s * config.c)),
        head_dim=config.head_dim,
        num_classes=config.num_classes if num_classes is None else num_classes,
    )


def subset_head_size(classes, n_total: int) -> int:
    """Outputs of a sub-model head: one per class in the subset plus "other"."""
    return len(classes) + (0 if len(classes) == n_total else 1)


# ----------------------------------------------------------------------------
# calibration data
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    """Resampled training data for one class subset.

    ``y`` holds relabelled targets (subset position, or ``len(classes)`` for
    "other"); ``source_y`` keeps the original labels.
    """

    X: np.ndarray
    y: np.ndarray
    source_y: np.ndarray
    classes: tuple[int, ...]

    def __len__(self):
        return len(self.y)

    @property
    def n_outputs(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0


def resample(X, y, classes, seed: int = 0, n_classes: int | None = None) -> CalibrationSet:
    """Positives of ``classes`` plus an equal-sized uniform draw of the rest.

    Positives are relabelled ``0..len(classes)-1`` in sorted class order and
    the negatives get the extra label ``len(classes)``. When ``classes``
    covers every label there is no "other" bucket.
    """
    X = np.asarray(X, dtype=DTYPE)
    y = np.asarray(y, dtype=np.int64)
    classes = tuple(sorted(int(c) for c in classes))
    if not classes:
        raise PruningError("class subset is empty")
    all_classes = np.unique(y) if n_classes is None else np.arange(n_classes)
    if not set(classes) <= set(all_classes.tolist()):
        raise PruningError(f"classes {classes} not a subset of {all_classes.tolist()}")
    remap = {c: i for i, c in enumerate(classes)}
    pos = np.flatnonzero(np.isin(y, classes))
    rest = np.flatnonzero(~np.isin(y, classes))
    rng = np.random.default_rng(seed)
    n_other = min(len(pos), len(rest))
    other = np.sort(rng.choice(rest, size=n_other, replace=False)) if n_other else rest[:0]
    idx = np.sort(np.concatenate([pos, other]))
    labels = np.array([remap.get(int(v), len(classes)) for v in y[idx]], dtype=np.int64)
    return CalibrationSet(X=X[idx], y=labels, source_y=y[idx], classes=classes)


def calibration_batch(calib: CalibrationSet, size: int = 256, seed: int = 0) -> np.ndarray:
    """Seeded subset of at most ``size`` calibration inputs (original order kept)."""
    if len(calib) == 0:
        raise PruningError("empty calibration set")
    if len(calib) <= size:
        return calib.X
    rng = np.random.default_rng(seed)
    return calib.X[np.sort(rng.choice(len(calib), size=size, replace=False))]


# ----------------------------------------------------------------------------
# KL importance
# ----------------------------------------------------------------------------


def kl_divergence(P, Q) -> float:
    """``sum_i P(i) log(P(i) / Q(i))`` for two probability vectors."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError(f"distribution shapes differ: {P.shape} vs {Q.shape}")
    for name, dist in (("P", P), ("Q", Q)):
        if np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-5:
            raise ValueError(f"{name} is not a probability distribution (sum={dist.sum()})")
    return float(_kl_rows(P[None], Q[None])[0])


def _kl_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    P = P.astype(np.float64)
    Q = np.maximum(Q.astype(np.float64), Q_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * np.log(P / Q), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def mean_kl(P: np.ndarray, logits: np.ndarray) -> float:
    """Average per-sample KL between reference probabilities and ``softmax(logits)``."""
    return float(_kl_rows(P, softmax_rows(logits)).mean())


@dataclass(frozen=True, eq=False)
class ImportanceTable:
    """Per-unit scores of one stage.

    ``scores`` has shape ``(d,)`` for the residual stage and
    ``(depth, units)`` for the per-block stages.
    """

    stage: str
    scores: np.ndarray

    def keep_indices(self, n_keep: int) -> np.ndarray | list[np.ndarray]:
        if self.scores.ndim == 1:
            return _keep(self.scores, n_keep)
        return [_keep(row, n_keep) for row in self.scores]


def _keep(scores: np.ndarray, n_keep: int) -> np.ndarray:
    # lowest score pruned first; ties prune the lowest index first
    order = np.lexsort((np.arange(len(scores)), scores))
    return np.sort(order[len(scores) - n_keep:])


def _zero(a: np.ndarray, index, axis: int = 0) -> np.ndarray:
    out = a.copy()
    sl = [slice(None)] * a.ndim
    sl[axis] = index
    out[tuple(sl)] = 0
    return out


def mask_residual_channel(weights: ViTWeights, i: int) -> ViTWeights:
    """Zero residual channel ``i`` everywhere it is written or normalized."""
    blocks = tuple(
        replace(
            b,
            ln1_gain=_zero(b.ln1_gain, i),
            ln1_shift=_zero(b.ln1_shift, i),
            proj=DenseLayer(_zero(b.proj.weight, i), _zero(b.proj.bias, i)),
            ln2_gain=_zero(b.ln2_gain, i),
            ln2_shift=_zero(b.ln2_shift, i),
            fc2=DenseLayer(_zero(b.fc2.weight, i), _zero(b.fc2.bias, i)),
        )
        for b in weights.blocks
    )
    return replace(
        weights,
        patch_embed=DenseLayer(_zero(weights.patch_embed.weight, i), _zero(weights.patch_embed.bias, i)),
        cls_token=_zero(weights.cls_token, i),
        pos_embed=_zero(weights.pos_embed, i, axis=1),
        blocks=blocks,
        norm_gain=_zero(weights.norm_gain, i),
        norm_shift=_zero(weights.norm_shift, i),
    )


def mask_attention_dim(block: Block, i: int, inner: int) -> Block:
    """Zero the i-th query, key and value dimension of one block."""
    rows = [i, inner + i, 2 * inner + i]
    return replace(block, qkv=DenseLayer(_zero(block.qkv.weight, rows), _zero(block.qkv.bias, rows)))


def mask_ffn_unit(block: Block, u: int) -> Block:
    """Silence FFN hidden unit ``u`` by zeroing its outgoing weights."""
    return replace(block, fc2=DenseLayer(_zero(block.fc2.weight, u, axis=1), block.fc2.bias))


def score_units(weights: ViTWeights, config: ViTConfig, inputs, stage: str) -> ImportanceTable:
    """KL importance of every prunable unit of ``stage`` on calibration ``inputs``.

    The reference distribution is the unmasked ``weights``' output on the
    same inputs. Units are scored independently and assembled in index order.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    inputs = inputs.X if isinstance(inputs, CalibrationSet) else np.asarray(inputs, dtype=DTYPE)
    if len(inputs) == 0:
        raise PruningError("empty calibration set")

    def logits_from(x, start, w=weights):
        return dense_forward(w.head, encode(w, config, x, start))

    x0 = embed(weights, config, inputs)
    P = softmax_rows(logits_from(x0, 0))

    if stage == "residual":
        scores = np.empty(config.d)
        for i in range(config.d):
            masked = mask_residual_channel(weights, i)
            scores[i] = mean_kl(P, logits_from(embed(masked, config, inputs), 0, masked))
        logger.debug("residual scores: %s", scores)
        return ImportanceTable(stage, scores)

    n_units = config.inner if stage == "mhsa" else config.c
    scores = np.empty((config.depth, n_units))
    x = x0
    for b, block in enumerate(weights.blocks):
        for u in range(n_units):
            masked = mask_attention_dim(block, u, config.inner) if stage == "mhsa" else mask_ffn_unit(block, u)
            scores[b, u] = mean_kl(P, logits_from(run_block(masked, config, x), b + 1))
        x = run_block(block, config, x)
    return ImportanceTable(stage, scores)


# ----------------------------------------------------------------------------
# physical removal
# ----------------------------------------------------------------------------


def _check_table(table: ImportanceTable, stage: str, expected_shape):
    if table.stage != stage or table.scores.shape != expected_shape:
        raise PruningError(
            f"{stage} pruning needs a {stage} table of shape {expected_shape}, "
            f"got {table.stage} {table.scores.shape}"
        )


def prune_residual(weights: ViTWeights, config: ViTConfig, spec: PruneSpec, table: ImportanceTable):
    """Drop the ``d - round(s d)`` least important residual channels."""
    _check_table(table, "residual", (config.d,))
    n_keep = cost.round_half_up(spec.s * config.d)
    if n_keep < 1:
        raise PruningError(f"s={spec.s} leaves no residual channels (d={config.d})")
    k = table.keep_indices(n_keep)
    blocks = tuple(
        replace(
            b,
            ln1_gain=b.ln1_gain[k],
            ln1_shift=b.ln1_shift[k],
            qkv=DenseLayer(b.qkv.weight[:, k], b.qkv.bias.copy()),
            proj=DenseLayer(b.proj.weight[k], b.proj.bias[k]),
            ln2_gain=b.ln2_gain[k],
            ln2_shift=b.ln2_shift[k],
            fc1=DenseLayer(b.fc1.weight[:, k], b.fc1.bias.copy()),
            fc2=DenseLayer(b.fc2.weight[k], b.fc2.bias[k]),
        )
        for b in weights.blocks
    )
    new = replace(
        weights,
        patch_embed=DenseLayer(weights.patch_embed.weight[k], weights.patch_embed.bias[k]),
        cls_token=weights.cls_token[k],
        pos_embed=weights.pos_embed[:, k],
        blocks=blocks,
        norm_gain=weights.norm_gain[k],
        norm_shift=weights.norm_shift[k],
        head=DenseLayer(weights.head.weight[:, k], weights.head.bias.copy()),
    )
    new_config = replace(config, d=n_keep, head_dim=config.head_dim)
    check_weights(new, new_config)
    return new, new_config


def prune_mhsa(weights: ViTWeights, config: ViTConfig, spec: PruneSpec, table: ImportanceTable):
    """Keep the ``(h - hp) * head_dim`` best q/k/v dimensions of every block.

    Dimensions are ranked across all heads; the survivors are regrouped, in
    their original order, into ``h - hp`` heads of unchanged width.
    """
    _check_table(table, "mhsa", (config.depth, config.inner))
    h_new = config.h - spec.hp
    if h_new < 1:
        raise PruningError("pruning would remove every attention head")
    inner = config.inner
    blocks = []
    for b, keep in zip(weights.blocks, table.keep_indices(h_new * config.head_dim)):
        rows = np.concatenate([keep, inner + keep, 2 * inner + keep])
        blocks.append(
            replace(
                b,
                qkv=DenseLayer(b.qkv.weight[rows], b.qkv.bias[rows]),
                proj=DenseLayer(b.proj.weight[:, keep], b.proj.bias.copy()),
            )
        )
    new = replace(weights, blocks=tuple(blocks))
    new_config = replace(config, h=h_new, head_dim=config.head_dim)
    check_weights(new, new_config)
    return new, new_config


def prune_ffn(weights: ViTWeights, config: ViTConfig, spec: PruneSpec, table: ImportanceTable):
    """Shrink every FFN hidden layer from ``c`` to ``round(s c)`` units."""
    _check_table(table, "ffn", (config.depth, config.c))
    n_keep = max(1, cost.round_half_up(spec.s * config.c))
    blocks = []
    for b, keep in zip(weights.blocks, table.keep_indices(n_keep)):
        blocks.append(
            replace(
                b,
                fc1=DenseLayer(b.fc1.weight[keep], b.fc1.bias[keep]),
                fc2=DenseLayer(b.fc2.weight[:, keep], b.fc2.bias.copy()),
            )
        )
    new = replace(weights, blocks=tuple(blocks))
    new_config = replace(config, c=n_keep, head_dim=config.head_dim)
    check_weights(new, new_config)
    return new, new_config


# ----------------------------------------------------------------------------
# sub-model assembly
# ----------------------------------------------------------------------------


@dataclass(eq=False)
class SubModel:
    """A pruned ViT responsible for one class subset.

    ``weights`` is ``None`` for cost-only sub-models used in planning.
    """

    weights: ViTWeights | None
    config: ViTConfig
    classes: tuple[int, ...]
    hp: int
    original_h: int
    head_losses: list[float] = field(default_factory=list)

    @property
    def s(self) -> float:
        return (self.original_h - self.hp) / self.original_h

    @property
    def profile(self) -> cost.CostProfile:
        return cost.profile(self.config)

    def embed(self, X) -> np.ndarray:
        if self.weights is None:
            raise PruningError("cost-only sub-model has no weights to run")
        return forward_embedding(self.weights, self.config, X)


def subset_head(head: DenseLayer, classes, n_total: int) -> DenseLayer:
    """Head rows for ``classes``; the "other" row averages the remaining rows."""
    classes = list(classes)
    w, b = head.weight[classes], head.bias[classes]
    if len(classes) < n_total:
        rest = [c for c in range(n_total) if c not in set(classes)]
        w = np.vstack([w, head.weight[rest].mean(axis=0, keepdims=True)])
        b = np.concatenate([b, head.bias[rest].mean(keepdims=True)])
    return DenseLayer(w.astype(DTYPE), b.astype(DTYPE))


def train_dense_head(
    head: DenseLayer,
    features,
    labels,
    epochs: int = 10,
    lr: float = 1e-4,
    batch_size: int = 256,
    seed: int = 0,
):
    """Mini-batch Adam on a linear classifier over fixed features.

    Returns the trained layer and the full-data loss before training and
    after every epoch.
    """
    features = np.asarray(features, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise PruningError("cannot train a head on an empty set")
    weight, bias = head.weight.copy(), head.bias.copy()
    opt = Adam([weight, bias], lr=lr)
    rng = np.random.default_rng(seed)

    def full_loss():
        return cross_entropy_with_grad(dense_forward(DenseLayer(weight, bias), features), labels)[0]

    losses = [full_loss()]
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            layer = DenseLayer(weight, bias)
            _, grad = cross_entropy_with_grad(dense_forward(layer, features[idx]), labels[idx])
            gw, gb, _ = dense_backward(layer, features[idx], grad)
            opt.step([gw, gb])
        losses.append(full_loss())
    return DenseLayer(weight, bias), losses


def retrain_head(
    sub: SubModel,
    calib: CalibrationSet,
    epochs: int = 10,
    lr: float = 1e-4,
    batch_size: int = 256,
    seed: int = 0,
) -> SubModel:
    """Train only the classifier head of ``sub`` on ``calib``; the body stays frozen."""
    if len(calib) == 0:
        raise PruningError("empty calibration set")
    if calib.y.max() >= sub.config.num_classes:
        raise PruningError(
            f"head has {sub.config.num_classes} outputs but labels reach {calib.y.max()}"
        )
    if epochs == 0:
        return sub
    features = sub.embed(calib.X)
    head, losses = train_dense_head(sub.weights.head, features, calib.y, epochs, lr, batch_size, seed)
    return SubModel(
        weights=replace(sub.weights, head=head),
        config=sub.config,
        classes=sub.classes,
        hp=sub.hp,
        original_h=sub.original_h,
        head_losses=losses,
    )


def prune_pipeline(
    weights: ViTWeights,
    config: ViTConfig,
    X,
    y,
    spec: PruneSpec,
    *,
    retrain: bool = True,
    epochs: int = 10,
    lr: float = 1e-4,
    batch_size: int = 256,
    calib_size: int = 256,
    seed: int = 0,
) -> SubModel:
    """Resample, prune residual -> MHSA -> FFN with rescoring, then fit the head."""
    calib = resample(X, y, spec.classes, seed=seed, n_classes=config.num_classes)
    inputs = calibration_batch(calib, calib_size, seed)
    w, cfg = weights, config
    if spec.hp > 0:
        w, cfg = prune_residual(w, cfg, spec, score_units(w, cfg, inputs, "residual"))
        w, cfg = prune_mhsa(w, cfg, spec, score_units(w, cfg, inputs, "mhsa"))
        w, cfg = prune_ffn(w, cfg, spec, score_units(w, cfg, inputs, "ffn"))
    n_out = subset_head_size(spec.classes, config.num_classes)
    head = subset_head(w.head, spec.classes, config.num_classes)
    cfg = cfg.with_classes(n_out)
    w = replace(w, head=head)
    check_weights(w, cfg)
    sub = SubModel(weights=w, config=cfg, classes=spec.classes, hp=spec.hp, original_h=config.h)
    if retrain:
        sub = retrain_head(sub, calib, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)
    logger.info(
        "sub-model classes=%s hp=%d -> d=%d h=%d c=%d (%.3f MiB)",
        spec.classes, spec.hp, cfg.d, cfg.h, cfg.c, cost.mem_mib(cfg),
    )
    return sub
