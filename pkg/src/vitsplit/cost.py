"""Analytical cost model: MACs, parameter counts, memory and communication.

Conventions:

* one MAC counts as one FLOP;
* weights are stored as 32-bit floats and memory is reported in MiB;
* a megabit is 2**20 bits, which is what makes 1536 bytes over a 2 Mbps link
  take 5.86 ms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .vit import ViTConfig

BYTES_PER_PARAM = 4
MIB = 2**20


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class CostProfile:
    params: int
    macs_per_sample: int
    mem_bytes: int
    feature_bytes: int

    def __post_init__(self):
        if min(self.params, self.macs_per_sample, self.mem_bytes, self.feature_bytes) < 0:
            raise ValueError(f"negative cost in {self}")

    @property
    def mem_mib(self) -> float:
        return self.mem_bytes / MIB


def fc_macs(fc_in: int, fc_out: int) -> int:
    """Operation count ``(2 * fc_in + 1) * fc_out`` of one fully connected layer."""
    return (2 * fc_in + 1) * fc_out


def mhsa_macs(p: int, d: int, h: int) -> int:
    """Multi-head self-attention count ``3 p d^2 + 2 p^2 d``.

    Independent of ``h``: the per-head terms sum back to full width.
    """
    if d % h:
        raise ValueError(f"d={d} is not divisible by h={h}")
    return 3 * p * d * d + 2 * p * p * d


def model_macs(config: ViTConfig, include_attention_matmuls: bool = False) -> int:
    """Per-sample MACs of all linear layers, evaluated per token.

    Counts the patch embedding (per patch), QKV, attention output projection
    and both FFN layers (per token, class token included) and the classifier
    head. The ``Q K^T`` and ``A V`` products are left out by default; this is
    the convention that reproduces published ViT FLOP figures (ViT-Base
    16.85e9). Pass ``include_attention_matmuls=True`` to add ``2 p^2 inner``
    per block.
    """
    p, d, c, inner = config.p, config.d, config.c, config.inner
    per_block = p * (3 * d * inner + inner * d + 2 * d * c)
    if include_attention_matmuls:
        per_block += 2 * p * p * inner
    patch = config.n_patches * config.patch_dim * d
    head = d * config.num_classes
    return patch + config.depth * per_block + head


def model_flops_formula(config: ViTConfig) -> int:
    """Literal composition of :func:`fc_macs` and :func:`mhsa_macs` over a ViT.

    Kept for reference; it counts a multiply-add as two operations in the
    dense layers but as one in attention, so it overshoots measured figures.
    """
    if config.inner != config.d:
        raise ValueError("formula assumes inner attention width == d")
    p, d, c = config.p, config.d, config.c
    per_block = mhsa_macs(p, d, config.h) + p * fc_macs(d, d) + p * (fc_macs(d, c) + fc_macs(c, d))
    return (
        config.n_patches * fc_macs(config.patch_dim, d)
        + config.depth * per_block
        + fc_macs(d, config.num_classes)
    )


def param_count(config: ViTConfig) -> int:
    d, c, inner = config.d, config.c, config.inner
    per_block = (
        4 * d  # two norms
        + 3 * inner * d + 3 * inner  # qkv
        + d * inner + d  # output projection
        + c * d + c  # fc1
        + d * c + d  # fc2
    )
    return (
        config.patch_dim * d + d  # patch embedding
        + d  # class token
        + config.p * d  # positions
        + config.depth * per_block
        + 2 * d  # final norm
        + d * config.num_classes + config.num_classes
    )


def mem_bytes(config: ViTConfig) -> int:
    return param_count(config) * BYTES_PER_PARAM


def mem_mib(config: ViTConfig) -> float:
    return mem_bytes(config) / MIB


def feature_payload_bytes(d: int, s: float) -> int:
    """Bytes of a float32 class-token embedding of width ``round(s * d)``."""
    if not 0.0 < s <= 1.0:
        raise ValueError(f"keep fraction must lie in (0, 1], got {s}")
    return BYTES_PER_PARAM * round_half_up(s * d)


def comm_time(n_bytes: int, bandwidth_mbps: float) -> float:
    """Seconds to push ``n_bytes`` over a link of ``bandwidth_mbps`` (2**20 bit/s units)."""
    if bandwidth_mbps <= 0:
        raise ValueError("bandwidth must be positive")
    if math.isinf(bandwidth_mbps):
        return 0.0
    return n_bytes * 8 / (bandwidth_mbps * MIB)


def profile(config: ViTConfig) -> CostProfile:
    params = param_count(config)
    return CostProfile(
        params=params,
        macs_per_sample=model_macs(config),
        mem_bytes=params * BYTES_PER_PARAM,
        feature_bytes=BYTES_PER_PARAM * config.d,
    )
