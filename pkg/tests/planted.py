"""Models with units that provably do nothing, built by direct tensor edits."""
from __future__ import annotations

import numpy as np

from vitsplit.vit import build_random, weights_from_tensors


def perturbed_model(config, seed=1, scale=0.1):
    """Random weights with non-trivial norms and biases."""
    rng = np.random.default_rng(seed)
    base = build_random(config, seed=seed)
    return {name: t + rng.normal(0, scale, t.shape).astype(np.float32) for name, t in base.named_tensors()}


def to_weights(config, tensors: dict):
    return weights_from_tensors(config, list(tensors.values()))


def kill_ffn_units(tensors: dict, config, units_per_block):
    """Zero the in- and outgoing weights of the given FFN units."""
    t = {k: v.copy() for k, v in tensors.items()}
    for b, units in enumerate(units_per_block):
        t[f"blocks.{b}.fc1.weight"][units] = 0
        t[f"blocks.{b}.fc1.bias"][units] = 0
        t[f"blocks.{b}.fc2.weight"][:, units] = 0
    return t


def kill_head(tensors: dict, config, head_per_block):
    """Zero one attention head per block: its q/k/v rows and output columns."""
    t = {k: v.copy() for k, v in tensors.items()}
    hd, inner = config.head_dim, config.inner
    for b, head in enumerate(head_per_block):
        dims = np.arange(head * hd, (head + 1) * hd)
        rows = np.concatenate([dims, inner + dims, 2 * inner + dims])
        t[f"blocks.{b}.qkv.weight"][rows] = 0
        t[f"blocks.{b}.qkv.bias"][rows] = 0
        t[f"blocks.{b}.proj.weight"][:, dims] = 0
    return t


def kill_residual_channels(tensors: dict, config, channels):
    """Make residual channels identically zero and invisible to every norm."""
    t = {k: v.copy() for k, v in tensors.items()}
    ch = list(channels)
    t["patch_embed.weight"][ch] = 0
    t["patch_embed.bias"][ch] = 0
    t["cls_token"][ch] = 0
    t["pos_embed"][:, ch] = 0
    for b in range(config.depth):
        for name in ("ln1.gain", "ln1.shift", "ln2.gain", "ln2.shift", "proj.bias", "fc2.bias"):
            t[f"blocks.{b}.{name}"][ch] = 0
        t[f"blocks.{b}.proj.weight"][ch] = 0
        t[f"blocks.{b}.fc2.weight"][ch] = 0
    t["norm.gain"][ch] = 0
    t["norm.shift"][ch] = 0
    return t
