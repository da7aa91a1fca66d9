import struct

import numpy as np
import pytest

from vitsplit.fusion import FusionMLPClassifier
from vitsplit.persistence import (
    MAGIC,
    BadMagicError,
    TruncatedFileError,
    VersionMismatchError,
    WeightFormatError,
    dump_weights,
    load_fusion,
    load_weights,
    parse_weights,
    save_fusion,
    save_weights,
)
from vitsplit.pruning import PruneSpec, pruned_config
from vitsplit.vit import build_random


class TestWeights:
    def test_roundtrip_bit_identical(self, tiny_config, tiny_weights, tmp_path):
        path = tmp_path / "w.edvt"
        save_weights(tiny_weights, tiny_config, path)
        loaded, cfg = load_weights(path)
        assert cfg == tiny_config
        assert loaded.checksum() == tiny_weights.checksum()

    def test_layout(self, tiny_config, tiny_weights):
        data = dump_weights(tiny_weights, tiny_config)
        assert data[:4] == MAGIC
        assert struct.unpack("<I", data[4:8])[0] == 1
        n_values = tiny_weights.num_params()
        n_tensors = len(list(tiny_weights.named_tensors()))
        assert len(data) == 4 + 4 + 4 + 9 * 4 + 8 * n_tensors + 4 * n_values

    def test_pruned_config_roundtrip(self, tiny_config):
        # head_dim no longer equals d / h after residual pruning
        cfg = pruned_config(tiny_config, PruneSpec(1, 4, (0,)), num_classes=2)
        w = build_random(cfg, 0)
        loaded, cfg2 = parse_weights(dump_weights(w, cfg))
        assert cfg2 == cfg and loaded.checksum() == w.checksum()

    def test_bad_magic(self, tiny_config, tiny_weights):
        data = b"XXXX" + dump_weights(tiny_weights, tiny_config)[4:]
        with pytest.raises(BadMagicError):
            parse_weights(data)

    def test_version_mismatch_names_both(self, tiny_config, tiny_weights):
        data = bytearray(dump_weights(tiny_weights, tiny_config))
        data[4:8] = struct.pack("<I", 7)
        with pytest.raises(VersionMismatchError, match="version 7.*version 1"):
            parse_weights(bytes(data))

    @pytest.mark.parametrize("cut", [2, 10, 30, 100, -1])
    def test_truncation(self, tiny_config, tiny_weights, cut):
        data = dump_weights(tiny_weights, tiny_config)
        with pytest.raises(TruncatedFileError):
            parse_weights(data[:cut])

    def test_trailing_bytes(self, tiny_config, tiny_weights):
        with pytest.raises(WeightFormatError, match="trailing"):
            parse_weights(dump_weights(tiny_weights, tiny_config) + b"\0")


class TestFusionFile:
    def test_roundtrip(self, tmp_path, rng):
        X = rng.standard_normal((20, 6))
        y = rng.integers(0, 3, 20)
        clf = FusionMLPClassifier(shrink=0.5, epochs=2, lr=1e-2, n_classes=3).fit(X, y)
        save_fusion(clf, tmp_path / "f.edvt")
        again = load_fusion(tmp_path / "f.edvt")
        assert np.array_equal(again.predict_proba(X), clf.predict_proba(X))
        assert again.shrink == 0.5 and again.n_features_in_ == 6

    def test_kind_checked(self, tmp_path, tiny_config, tiny_weights):
        save_weights(tiny_weights, tiny_config, tmp_path / "w.edvt")
        with pytest.raises(WeightFormatError, match="kind"):
            load_fusion(tmp_path / "w.edvt")
