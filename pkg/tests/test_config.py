import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitsplit import cost
from vitsplit.config import ConfigError, ExperimentConfig, parse_config, serialize_config


class TestParse:
    def test_minimal_gets_defaults(self):
        cfg = parse_config('preset = "vit-base"\nn_devices = 4\n')
        assert cfg.preset == "vit-base" and cfg.n_devices == 4
        assert cfg.shrink == 0.5
        assert cfg.bandwidth_mbps == (2.0,)
        assert cfg.batch_size == 256

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# header\n\nL = 3  # samples\n")
        assert cfg.L == 3

    def test_lists_and_model_overrides(self):
        cfg = parse_config("preset = vit-base\nmodel.num_classes = 10\nn_devices = 2\nhp = 1, 2\nmemory_mib = 100, 200\n")
        assert cfg.vit_config().num_classes == 10
        assert cfg.hp == (1, 2)
        fleet = cfg.fleet()
        assert [d.memory for d in fleet.devices] == [100 * cost.MIB, 200 * cost.MIB]

    def test_bool(self):
        assert parse_config("retrain = false").retrain is False

    @pytest.mark.parametrize(
        "text,fragment",
        [
            ("budget_mib = 0", "budget_mib must be positive"),
            ("budget_mib = -5", "budget_mib must be positive"),
            ("n_devices = two", "line 1"),
            ("nonsense = 1", "unknown key"),
            ("L = 1\nL = 2", "duplicate key"),
            ("just words", "expected 'key = value'"),
            ("model.width = 3", "unknown model field"),
            ("preset = vit-huge", "unknown preset"),
            ("n_devices = 2\nhp = 1", "hp has 1 entries"),
            ("retrain = maybe", "boolean"),
            ("L = 1.5", "integer"),
            ("shrink = 0", "shrink"),
        ],
    )
    def test_errors(self, text, fragment):
        with pytest.raises(ConfigError, match=fragment):
            parse_config(text)

    def test_error_carries_line(self):
        with pytest.raises(ConfigError) as info:
            parse_config("L = 1\n\nseed = x\n")
        assert info.value.line == 3 and "seed = x" in str(info.value)

    def test_per_device_length_mismatch(self):
        cfg = parse_config("n_devices = 3\nenergy_gflop = 1, 2")
        with pytest.raises(ConfigError, match="energy_gflop"):
            cfg.fleet()


class TestRoundTrip:
    def test_full_config(self):
        text = (
            "preset = vit-base\nmodel.num_classes = 10\nmode = cost\nn_devices = 3\n"
            "device_counts = 1, 2, 3\nmemory_mib = 256, 512, 1024\nenergy_gflop = 20\n"
            "throughput = 460000000\nbandwidth_mbps = 2, 4, 8\naggregator_throughput = 1e9\n"
            "budget_mib = 180\nL = 7\nrequired_accuracy = 0.85\nshrink = 0.25\nhp = 0, 1, 2\n"
            "seed = 5\nretrain = false\nbatch_size = 64\nhead_epochs = 3\nhead_lr = 0.001\n"
            "fusion_epochs = 4\nfusion_lr = 0.01\ncalib_size = 32\nsamples_per_class = 12\n"
            "separation = 2.5\ndata_seed = 9\n"
        )
        cfg = parse_config(text)
        assert parse_config(serialize_config(cfg)) == cfg
        assert serialize_config(parse_config(serialize_config(cfg))) == serialize_config(cfg)

    @settings(max_examples=50, deadline=None)
    @given(
        n=st.integers(1, 6),
        budget=st.floats(1e-3, 1e4, allow_nan=False),
        lr=st.floats(1e-6, 1.0),
        shrink=st.floats(0.01, 1.0),
        retrain=st.booleans(),
        seed=st.integers(0, 2**31),
    )
    def test_property(self, n, budget, lr, shrink, retrain, seed):
        cfg = ExperimentConfig(
            n_devices=n, budget_mib=budget, fusion_lr=lr, shrink=shrink, retrain=retrain, seed=seed,
            memory_mib=tuple(float(100 + i) for i in range(n)),
        )
        assert parse_config(serialize_config(cfg)) == cfg

    def test_overrides(self):
        cfg = ExperimentConfig(n_devices=2, hp=(1, 1))
        assert cfg.with_overrides(n_devices=3).hp == ()
        assert cfg.with_overrides(seed=None) == cfg
