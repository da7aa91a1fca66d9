"""Pre-norm Vision Transformer: configuration, parameters and forward pass.

A pruned sub-model is just another :class:`ViTConfig` with smaller widths, so
the same forward code serves the original model and every sub-model.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .tensor_math import (
    DTYPE,
    DenseLayer,
    ShapeError,
    as_tensor,
    dense_forward,
    gelu,
    layer_norm,
    matmul,
    softmax_rows,
)


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    """Architecture hyperparameters.

    ``head_dim`` defaults to ``d // h``. It is carried explicitly so that a
    model whose residual width has been pruned but whose attention has not
    yet been (an intermediate pruning state) is still describable.
    """

    depth: int
    d: int
    h: int
    c: int
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    num_classes: int = 1000
    head_dim: int | None = None

    def __post_init__(self):
        for name in ("depth", "d", "h", "c", "image_size", "patch_size", "channels", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.head_dim is None:
            if self.d % self.h:
                raise InvalidConfigError(f"d={self.d} is not divisible by h={self.h}")
            object.__setattr__(self, "head_dim", self.d // self.h)
        elif self.head_dim < 1:
            raise InvalidConfigError(f"head_dim must be positive, got {self.head_dim}")
        if self.image_size % self.patch_size:
            raise InvalidConfigError(
                f"patch_size={self.patch_size} does not divide image_size={self.image_size}"
            )

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def p(self) -> int:
        """Token count, class token included."""
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def inner(self) -> int:
        """Total attention width ``h * head_dim``."""
        return self.h * self.head_dim

    def with_classes(self, num_classes: int) -> "ViTConfig":
        return replace(self, num_classes=num_classes)


PRESETS = {
    "vit-small": ViTConfig(depth=12, d=384, h=6, c=1536),
    "vit-base": ViTConfig(depth=12, d=768, h=12, c=3072),
    "vit-large": ViTConfig(depth=24, d=1024, h=16, c=4096),
    # desk-scale model used by the synthetic end-to-end runs
    "vit-tiny": ViTConfig(depth=2, d=32, h=4, c=64, image_size=16, patch_size=4, channels=1, num_classes=8),
}


def preset(name: str, num_classes: int | None = None) -> ViTConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise InvalidConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg if num_classes is None else cfg.with_classes(num_classes)


@dataclass(frozen=True, eq=False)
class Block:
    ln1_gain: np.ndarray
    ln1_shift: np.ndarray
    qkv: DenseLayer
    proj: DenseLayer
    ln2_gain: np.ndarray
    ln2_shift: np.ndarray
    fc1: DenseLayer
    fc2: DenseLayer

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        yield prefix + "ln1.gain", self.ln1_gain
        yield prefix + "ln1.shift", self.ln1_shift
        yield prefix + "qkv.weight", self.qkv.weight
        yield prefix + "qkv.bias", self.qkv.bias
        yield prefix + "proj.weight", self.proj.weight
        yield prefix + "proj.bias", self.proj.bias
        yield prefix + "ln2.gain", self.ln2_gain
        yield prefix + "ln2.shift", self.ln2_shift
        yield prefix + "fc1.weight", self.fc1.weight
        yield prefix + "fc1.bias", self.fc1.bias
        yield prefix + "fc2.weight", self.fc2.weight
        yield prefix + "fc2.bias", self.fc2.bias


@dataclass(frozen=True, eq=False)
class ViTWeights:
    patch_embed: DenseLayer
    cls_token: np.ndarray
    pos_embed: np.ndarray
    blocks: tuple[Block, ...]
    norm_gain: np.ndarray
    norm_shift: np.ndarray
    head: DenseLayer

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """All parameter tensors in declaration order (the persistence order)."""
        yield "patch_embed.weight", self.patch_embed.weight
        yield "patch_embed.bias", self.patch_embed.bias
        yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for i, block in enumerate(self.blocks):
            yield from block.named_tensors(f"blocks.{i}.")
        yield "norm.gain", self.norm_gain
        yield "norm.shift", self.norm_shift
        yield "head.weight", self.head.weight
        yield "head.bias", self.head.bias

    def num_params(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, t in self.named_tensors():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(t, dtype="<f4").tobytes())
        return digest.hexdigest()


def expected_shapes(config: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, c, inner = config.d, config.c, config.inner
    shapes = [
        ("patch_embed.weight", (d, config.patch_dim)),
        ("patch_embed.bias", (d,)),
        ("cls_token", (d,)),
        ("pos_embed", (config.p, d)),
    ]
    for i in range(config.depth):
        pre = f"blocks.{i}."
        shapes += [
            (pre + "ln1.gain", (d,)),
            (pre + "ln1.shift", (d,)),
            (pre + "qkv.weight", (3 * inner, d)),
            (pre + "qkv.bias", (3 * inner,)),
            (pre + "proj.weight", (d, inner)),
            (pre + "proj.bias", (d,)),
            (pre + "ln2.gain", (d,)),
            (pre + "ln2.shift", (d,)),
            (pre + "fc1.weight", (c, d)),
            (pre + "fc1.bias", (c,)),
            (pre + "fc2.weight", (d, c)),
            (pre + "fc2.bias", (d,)),
        ]
    shapes += [
        ("norm.gain", (d,)),
        ("norm.shift", (d,)),
        ("head.weight", (config.num_classes, d)),
        ("head.bias", (config.num_classes,)),
    ]
    return shapes


def check_weights(weights: ViTWeights, config: ViTConfig) -> None:
    """Raise :class:`ShapeError` unless every tensor matches ``config``."""
    if len(weights.blocks) != config.depth:
        raise ShapeError(f"{len(weights.blocks)} blocks but config depth is {config.depth}")
    for (name, tensor), (exp_name, shape) in zip(weights.named_tensors(), expected_shapes(config)):
        assert name == exp_name, (name, exp_name)
        if tensor.shape != shape:
            raise ShapeError(f"{name}: shape {tensor.shape}, config expects {shape}")


def weights_from_tensors(config: ViTConfig, tensors: list[np.ndarray]) -> ViTWeights:
    """Inverse of ``named_tensors``: assemble weights from a flat ordered list."""
    shapes = expected_shapes(config)
    if len(tensors) != len(shapes):
        raise ShapeError(f"expected {len(shapes)} tensors, got {len(tensors)}")
    it = iter(as_tensor(t).reshape(shape) for t, (_, shape) in zip(tensors, shapes))
    patch_embed = DenseLayer(next(it), next(it))
    cls_token = next(it)
    pos_embed = next(it)
    blocks = []
    for _ in range(config.depth):
        ln1g, ln1s = next(it), next(it)
        qkv = DenseLayer(next(it), next(it))
        proj = DenseLayer(next(it), next(it))
        ln2g, ln2s = next(it), next(it)
        fc1 = DenseLayer(next(it), next(it))
        fc2 = DenseLayer(next(it), next(it))
        blocks.append(Block(ln1g, ln1s, qkv, proj, ln2g, ln2s, fc1, fc2))
    norm_gain, norm_shift = next(it), next(it)
    head = DenseLayer(next(it), next(it))
    return ViTWeights(patch_embed, cls_token, pos_embed, tuple(blocks), norm_gain, norm_shift, head)


def build_random(config: ViTConfig, seed: int = 0) -> ViTWeights:
    """Seeded init: weight matrices, class token and positions ~ N(0, 0.02).

    Norm gains start at one; norm shifts and linear biases at zero.
    """
    rng = np.random.default_rng(seed)
    tensors = []
    for name, shape in expected_shapes(config):
        if name.endswith(".gain"):
            tensors.append(np.ones(shape, dtype=DTYPE))
        elif name.endswith((".shift", ".bias")):
            tensors.append(np.zeros(shape, dtype=DTYPE))
        else:
            tensors.append(rng.normal(0.0, 0.02, size=shape).astype(DTYPE))
    return weights_from_tensors(config, tensors)


def patchify(image, config: ViTConfig) -> np.ndarray:
    """Split [channels, H, W] (or a batch of them) into flattened patches.

    Patches are ordered row by row; each is flattened channel-major.
    """
    image = as_tensor(image)
    expected = (config.channels, config.image_size, config.image_size)
    if image.shape[-3:] != expected or image.ndim not in (3, 4):
        raise ShapeError(f"image shape {image.shape} does not match {expected}")
    batch = image.shape[:-3]
    g = config.image_size // config.patch_size
    ps = config.patch_size
    x = image.reshape(batch + (config.channels, g, ps, g, ps))
    x = np.moveaxis(x, (-4, -2), (-5, -4))  # -> (..., g, g, C, ps, ps)
    return np.ascontiguousarray(x.reshape(batch + (g * g, config.patch_dim)))


def embed(weights: ViTWeights, config: ViTConfig, images) -> np.ndarray:
    """Token sequence entering the first block, shape [B, p, d]."""
    patches = patchify(images, config)
    tokens = dense_forward(weights.patch_embed, patches)
    cls = np.broadcast_to(weights.cls_token, (tokens.shape[0], 1, config.d))
    return np.concatenate([cls, tokens], axis=1) + weights.pos_embed


def attention(block: Block, config: ViTConfig, y: np.ndarray) -> np.ndarray:
    bsz, p, _ = y.shape
    h, hd, inner = config.h, config.head_dim, config.inner
    qkv = dense_forward(block.qkv, y)
    q, k, v = (
        qkv[..., j * inner:(j + 1) * inner].reshape(bsz, p, h, hd).transpose(0, 2, 1, 3)
        for j in range(3)
    )
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * DTYPE(1.0 / np.sqrt(hd))
    ctx = matmul(softmax_rows(scores), v)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(bsz, p, inner)
    return dense_forward(block.proj, ctx)


def run_block(block: Block, config: ViTConfig, x: np.ndarray) -> np.ndarray:
    x = x + attention(block, config, layer_norm(x, block.ln1_gain, block.ln1_shift))
    hidden = gelu(dense_forward(block.fc1, layer_norm(x, block.ln2_gain, block.ln2_shift)))
    return x + dense_forward(block.fc2, hidden)


def encode(weights: ViTWeights, config: ViTConfig, x: np.ndarray, start: int = 0) -> np.ndarray:
    """Run blocks ``start..depth-1`` on the residual stream and return normed class tokens."""
    for block in weights.blocks[start:]:
        x = run_block(block, config, x)
    return layer_norm(x[:, 0], weights.norm_gain, weights.norm_shift)


def _batched(images, config):
    images = as_tensor(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    return images, single


def forward_embedding(weights: ViTWeights, config: ViTConfig, images) -> np.ndarray:
    """Class-token embedding after the final norm: [d] for one image, [B, d] for a batch."""
    images, single = _batched(images, config)
    emb = encode(weights, config, embed(weights, config, images))
    return emb[0] if single else emb


def forward_logits(weights: ViTWeights, config: ViTConfig, images) -> np.ndarray:
    images, single = _batched(images, config)
    logits = dense_forward(weights.head, encode(weights, config, embed(weights, config, images)))
    return logits[0] if single else logits
