import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vitsplit import cost
from vitsplit.pruning import PruneSpec, pruned_config
from vitsplit.vit import ViTConfig, preset


class TestFormulas:
    def test_fc_macs(self):
        assert cost.fc_macs(768, 3072) == 4_721_664

    def test_mhsa_macs(self):
        assert cost.mhsa_macs(197, 768, 12) == 408_196_608

    def test_mhsa_requires_divisible(self):
        with pytest.raises(ValueError):
            cost.mhsa_macs(197, 768, 7)

    @given(st.integers(1, 64), st.integers(1, 64))
    def test_fc_macs_linear_in_out(self, fin, fout):
        assert cost.fc_macs(fin, 2 * fout) == 2 * cost.fc_macs(fin, fout)

    def test_model_macs_base(self):
        assert cost.model_macs(preset("vit-base")) == pytest.approx(16.8485e9, rel=1e-4)

    def test_attention_matmuls_added(self):
        cfg = preset("vit-base")
        extra = cost.model_macs(cfg, include_attention_matmuls=True) - cost.model_macs(cfg)
        assert extra == cfg.depth * 2 * cfg.p**2 * cfg.inner

    def test_formula_composition(self):
        # literal fc/mhsa composition, kept for reference
        assert cost.model_flops_formula(preset("vit-base")) == pytest.approx(30.24e9, rel=1e-3)

    def test_macs_monotone_in_hp(self):
        cfg = preset("vit-base", num_classes=10)
        values = [cost.model_macs(pruned_config(cfg, PruneSpec(hp, 12, (0,)))) for hp in range(12)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestMemory:
    @pytest.mark.parametrize(
        "name,params", [("vit-small", 22_050_664), ("vit-base", 86_567_656), ("vit-large", 304_326_632)]
    )
    def test_param_counts(self, name, params):
        assert cost.param_count(preset(name)) == params

    def test_mem_mib_base_10(self):
        assert cost.mem_mib(preset("vit-base", 10)) == pytest.approx(327.325, abs=1e-3)

    def test_profile(self):
        p = cost.profile(preset("vit-tiny"))
        assert p.mem_bytes == 4 * p.params
        assert p.feature_bytes == 4 * 32
        assert p.mem_mib == p.mem_bytes / 2**20

    def test_profile_rejects_negative(self):
        with pytest.raises(ValueError):
            cost.CostProfile(-1, 0, 0, 0)


class TestCommunication:
    def test_payloads(self):
        assert cost.feature_payload_bytes(768, 6 / 12) == 1536
        assert cost.feature_payload_bytes(768, 2 / 12) == 512

    @pytest.mark.parametrize("s", [0.0, -0.1, 1.5])
    def test_payload_bad_fraction(self, s):
        with pytest.raises(ValueError):
            cost.feature_payload_bytes(768, s)

    def test_comm_time(self):
        assert cost.comm_time(1536, 2) == pytest.approx(5.859375e-3, rel=1e-12)
        assert cost.comm_time(512, 2) == pytest.approx(1.953125e-3, rel=1e-12)
        assert cost.comm_time(512, math.inf) == 0.0

    def test_comm_time_bad_bandwidth(self):
        with pytest.raises(ValueError):
            cost.comm_time(10, 0)

    def test_round_half_up(self):
        assert [cost.round_half_up(v) for v in (0.5, 1.5, 2.4999, 2.5)] == [1, 2, 2, 3]

    def test_config_with_explicit_head_dim(self):
        cfg = ViTConfig(depth=1, d=6, h=2, c=8, image_size=4, patch_size=2, channels=1, num_classes=2, head_dim=4)
        assert cost.param_count(cfg) > 0
