"""On-disk formats: binary weight files and JSON plan files.

Weight files start with the magic ``b"EDVT"`` and a little-endian u32 format
version, followed by a u32 kind tag and a kind-specific config block. Tensors
then follow in declaration order, each as a u64 element count and that many
little-endian float32 values.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .assignment import AssignmentPlan, DeviceSpec, SubModelProfile
from .fusion import FusionMLP, FusionMLPClassifier
from .pruning import SubModel
from .tensor_math import DTYPE, DenseLayer
from .vit import ViTConfig, ViTWeights, expected_shapes, weights_from_tensors

MAGIC = b"EDVT"
FORMAT_VERSION = 1
KIND_VIT = 0
KIND_FUSION = 1

_VIT_FIELDS = ("depth", "d", "h", "c", "image_size", "patch_size", "channels", "num_classes", "head_dim")
_LE_F32 = np.dtype("<f4")


class WeightFormatError(ValueError):
    pass


class BadMagicError(WeightFormatError):
    pass


class VersionMismatchError(WeightFormatError):
    def __init__(self, found: int, expected: int = FORMAT_VERSION):
        self.found, self.expected = found, expected
        super().__init__(f"weight file format version {found}, this build reads version {expected}")


class TruncatedFileError(WeightFormatError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file ends at byte {len(self.data)} while reading {what} (need {self.pos + n})"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self, shape, name: str) -> np.ndarray:
        (count,) = self.unpack("<Q", f"length of {name}")
        expected = int(np.prod(shape))
        if count != expected:
            raise WeightFormatError(f"{name}: stored {count} values, config implies {expected}")
        raw = self.take(4 * count, name)
        return np.frombuffer(raw, dtype=_LE_F32).astype(DTYPE).reshape(shape)


def _header(kind: int) -> bytes:
    return MAGIC + struct.pack("<II", FORMAT_VERSION, kind)


def _tensor_bytes(array: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(array, dtype=_LE_F32).ravel()
    return struct.pack("<Q", flat.size) + flat.tobytes()


def _open(data: bytes, kind: int) -> _Reader:
    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not a weight file: magic {magic!r}, expected {MAGIC!r}")
    (version,) = reader.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version)
    (found,) = reader.unpack("<I", "kind tag")
    if found != kind:
        raise WeightFormatError(f"file holds kind {found}, expected kind {kind}")
    return reader


def _finish(reader: _Reader):
    if reader.pos != len(reader.data):
        raise WeightFormatError(f"{len(reader.data) - reader.pos} trailing bytes after the last tensor")


def dump_weights(weights: ViTWeights, config: ViTConfig) -> bytes:
    parts = [_header(KIND_VIT), struct.pack(f"<{len(_VIT_FIELDS)}I", *(getattr(config, f) for f in _VIT_FIELDS))]
    parts.extend(_tensor_bytes(t) for _, t in weights.named_tensors())
    return b"".join(parts)


def parse_weights(data: bytes) -> tuple[ViTWeights, ViTConfig]:
    reader = _open(data, KIND_VIT)
    values = reader.unpack(f"<{len(_VIT_FIELDS)}I", "config block")
    config = ViTConfig(**dict(zip(_VIT_FIELDS, values)))
    tensors = [reader.tensor(shape, name) for name, shape in expected_shapes(config)]
    _finish(reader)
    return weights_from_tensors(config, tensors), config


def save_weights(weights: ViTWeights, config: ViTConfig, path) -> None:
    Path(path).write_bytes(dump_weights(weights, config))


def load_weights(path) -> tuple[ViTWeights, ViTConfig]:
    """Read a ViT weight file; raises a :class:`WeightFormatError` subclass on bad input."""
    return parse_weights(Path(path).read_bytes())


def dump_fusion(clf: FusionMLPClassifier) -> bytes:
    mlp = clf.mlp_
    hidden = mlp.hidden.out_features
    parts = [
        _header(KIND_FUSION),
        struct.pack("<IIId", mlp.input_dim, hidden, mlp.n_classes, mlp.shrink),
    ]
    for t in (mlp.hidden.weight, mlp.hidden.bias, mlp.out.weight, mlp.out.bias):
        parts.append(_tensor_bytes(t))
    return b"".join(parts)


def parse_fusion(data: bytes) -> FusionMLPClassifier:
    reader = _open(data, KIND_FUSION)
    n_in, hidden, n_out, shrink = reader.unpack("<IIId", "fusion config block")
    w1 = reader.tensor((hidden, n_in), "hidden.weight")
    b1 = reader.tensor((hidden,), "hidden.bias")
    w2 = reader.tensor((n_out, hidden), "out.weight")
    b2 = reader.tensor((n_out,), "out.bias")
    _finish(reader)
    clf = FusionMLPClassifier(shrink=shrink, n_classes=n_out)
    clf.mlp_ = FusionMLP(DenseLayer(w1, b1), DenseLayer(w2, b2), shrink)
    clf.classes_ = np.arange(n_out)
    clf.n_features_in_ = n_in
    clf.loss_curve_ = []
    return clf


def save_fusion(clf: FusionMLPClassifier, path) -> None:
    Path(path).write_bytes(dump_fusion(clf))


def load_fusion(path) -> FusionMLPClassifier:
    return parse_fusion(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# plan files
# ----------------------------------------------------------------------------

PLAN_FILE = "plan.json"
FUSION_FILE = "fusion.edvt"


def sub_model_file(i: int) -> str:
    return f"submodel_{i}.edvt"


def plan_to_dict(plan, sub_models, profiles, devices, budget, L, extra=None) -> dict:
    """JSON-ready description of a deployment (mapping, hp vector, per-model cost)."""
    return {
        "format": "vitsplit-plan",
        "version": FORMAT_VERSION,
        "L": L,
        "budget_bytes": budget,
        "hp": [sm.hp for sm in sub_models],
        "devices": [
            {"id": d.id, "memory_bytes": d.memory, "energy_flops": d.energy, "throughput": d.throughput}
            for d in devices
        ],
        "sub_models": [
            {
                "id": p.id,
                "classes": list(p.classes),
                "hp": sm.hp,
                "original_h": sm.original_h,
                "memory_bytes": p.memory,
                "flops": p.flops,
                "config": {f: getattr(sm.config, f) for f in _VIT_FIELDS},
                "device": None if plan is None else plan.mapping.get(p.id),
                "weights": sub_model_file(p.id) if sm.weights is not None else None,
            }
            for sm, p in zip(sub_models, profiles)
        ],
        **(extra or {}),
    }


class PlanBundle:
    """A saved deployment: devices, sub-model profiles, mapping and optional weights."""

    def __init__(self, data: dict, root: Path):
        self.data = data
        self.root = root

    @property
    def L(self) -> int:
        return int(self.data["L"])

    @property
    def budget(self) -> float:
        return float(self.data["budget_bytes"])

    @property
    def devices(self) -> list[DeviceSpec]:
        return [
            DeviceSpec(int(d["id"]), d["memory_bytes"], d["energy_flops"], d["throughput"])
            for d in self.data["devices"]
        ]

    @property
    def profiles(self) -> list[SubModelProfile]:
        return [
            SubModelProfile(int(s["id"]), int(s["memory_bytes"]), int(s["flops"]), tuple(s["classes"]))
            for s in self.data["sub_models"]
        ]

    @property
    def mapping(self) -> dict[int, int]:
        return {int(s["id"]): int(s["device"]) for s in self.data["sub_models"] if s["device"] is not None}

    def plan(self) -> AssignmentPlan:
        return AssignmentPlan.build(self.mapping, self.devices, self.profiles, self.L)

    def sub_models(self, load: bool = True) -> list[SubModel]:
        out = []
        for s in self.data["sub_models"]:
            config = ViTConfig(**s["config"])
            weights = None
            if load and s.get("weights"):
                weights, stored = load_weights(self.root / s["weights"])
                if stored != config:
                    raise WeightFormatError(f"sub-model {s['id']}: weight file config differs from plan")
            out.append(SubModel(weights, config, tuple(s["classes"]), int(s["hp"]), int(s["original_h"])))
        return out

    def fusion(self):
        path = self.root / FUSION_FILE
        return load_fusion(path) if path.exists() else None


def write_bundle(out_dir, plan, sub_models, profiles, devices, budget, L, fusion=None, extra=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sm, p in zip(sub_models, profiles):
        if sm.weights is not None:
            save_weights(sm.weights, sm.config, out / sub_model_file(p.id))
    if fusion is not None:
        save_fusion(fusion, out / FUSION_FILE)
    data = plan_to_dict(plan, sub_models, profiles, devices, budget, L, extra)
    (out / PLAN_FILE).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out / PLAN_FILE


def read_bundle(path) -> PlanBundle:
    """Load a plan from its JSON file or from the directory holding it."""
    path = Path(path)
    if path.is_dir():
        path = path / PLAN_FILE
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None
    if data.get("format") != "vitsplit-plan":
        raise ValueError(f"{path}: not a plan file")
    if data.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(data.get("version"))
    return PlanBundle(data, path.parent)
