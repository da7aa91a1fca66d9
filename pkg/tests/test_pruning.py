import numpy as np
import pytest

import planted
from vitsplit import cost
from vitsplit.pruning import (
    CalibrationSet,
    ImportanceTable,
    PruneSpec,
    PruningError,
    calibration_batch,
    kl_divergence,
    prune_ffn,
    prune_mhsa,
    prune_pipeline,
    prune_residual,
    pruned_config,
    resample,
    retrain_head,
    score_units,
    subset_head,
    subset_head_size,
)
from vitsplit.tensor_math import DenseLayer
from vitsplit.vit import forward_logits

ALL = tuple(range(8))


@pytest.fixture(scope="module")
def probe(tiny_data):
    return tiny_data[0][:24]


class TestSpec:
    @pytest.mark.parametrize("hp", [-1, 4])
    def test_hp_bounds(self, hp):
        with pytest.raises(PruningError):
            PruneSpec(hp, 4, (0,))

    def test_empty_classes(self):
        with pytest.raises(PruningError):
            PruneSpec(0, 4, ())

    def test_classes_sorted_and_s(self):
        spec = PruneSpec(1, 4, (3, 1))
        assert spec.classes == (1, 3)
        assert spec.s == 0.75

    def test_pruned_config(self, tiny_config):
        cfg = pruned_config(tiny_config, PruneSpec(1, 4, (0,)), num_classes=2)
        assert (cfg.d, cfg.h, cfg.head_dim, cfg.c, cfg.num_classes) == (24, 3, 8, 48, 2)

    def test_pruned_base(self):
        from vitsplit.vit import preset

        cfg = pruned_config(preset("vit-base"), PruneSpec(10, 12, (0,)))
        assert (cfg.d, cfg.h, cfg.inner, cfg.c) == (128, 2, 128, 512)

    def test_head_size(self):
        assert subset_head_size((0, 1), 8) == 3
        assert subset_head_size(ALL, 8) == 8


class TestKL:
    def test_known_value(self):
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(
            0.5 * np.log(2) + 0.5 * np.log(2 / 3), rel=1e-12
        )

    def test_zero_for_identical(self):
        assert kl_divergence([0.2, 0.8], [0.2, 0.8]) == 0.0

    def test_zero_mass_in_p_ignored(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2))

    def test_q_floor_keeps_finite(self):
        assert np.isfinite(kl_divergence([0.5, 0.5], [1.0, 0.0]))

    @pytest.mark.parametrize("P,Q", [([0.5, 0.6], [0.5, 0.5]), ([-0.1, 1.1], [0.5, 0.5]), ([1.0], [0.5, 0.5])])
    def test_invalid(self, P, Q):
        with pytest.raises(ValueError):
            kl_divergence(P, Q)


class TestCalibration:
    def test_resample_balanced(self, tiny_data):
        X, y = tiny_data
        calib = resample(X, y, (5, 2), seed=0, n_classes=8)
        assert calib.classes == (2, 5)
        assert (calib.y < 2).sum() == 80 and (calib.y == 2).sum() == 80
        assert np.array_equal(calib.y[calib.source_y == 2], np.zeros(40))
        assert np.array_equal(calib.y[calib.source_y == 5], np.ones(40))

    def test_resample_all_classes_has_no_other(self, tiny_data):
        X, y = tiny_data
        calib = resample(X, y, ALL, n_classes=8)
        assert len(calib) == len(y) and calib.n_outputs == 8

    def test_resample_deterministic(self, tiny_data):
        X, y = tiny_data
        a = resample(X, y, (0,), seed=4)
        b = resample(X, y, (0,), seed=4)
        assert np.array_equal(a.source_y, b.source_y) and np.array_equal(a.X, b.X)

    def test_resample_unknown_class(self, tiny_data):
        with pytest.raises(PruningError):
            resample(*tiny_data, (9,), n_classes=8)

    def test_batch_size(self, tiny_data):
        calib = resample(*tiny_data, (0, 1), n_classes=8)
        assert len(calib_batch := calibration_batch(calib, 16, seed=0)) == 16
        assert calibration_batch(calib, 1000).shape == calib.X.shape
        with pytest.raises(PruningError):
            calibration_batch(CalibrationSet(calib.X[:0], calib.y[:0], calib.y[:0], (0,)))
        assert calib_batch.dtype == np.float32


class TestImportanceTable:
    def test_ties_prune_lowest_index_first(self):
        table = ImportanceTable("residual", np.array([0.0, 0.0, 1.0, 0.0, 2.0]))
        assert table.keep_indices(3).tolist() == [2, 3, 4]

    def test_per_block(self):
        table = ImportanceTable("ffn", np.array([[3.0, 1.0, 2.0], [0.0, 5.0, 5.0]]))
        assert [k.tolist() for k in table.keep_indices(2)] == [[0, 2], [1, 2]]

    def test_wrong_table_rejected(self, tiny_config, tiny_weights):
        table = ImportanceTable("ffn", np.zeros((2, 64)))
        with pytest.raises(PruningError):
            prune_residual(tiny_weights, tiny_config, PruneSpec(1, 4, ALL), table)

    def test_unknown_stage(self, tiny_config, tiny_weights, probe):
        with pytest.raises(ValueError):
            score_units(tiny_weights, tiny_config, probe, "heads")


class TestPlantedDeadUnits:
    """Units with no effect must score zero, go first and leave the output unchanged."""

    def test_ffn(self, tiny_config, probe):
        dead = [np.arange(0, 64, 4), np.arange(1, 64, 4)]  # 16 per block = c - round(0.75 c)
        t = planted.kill_ffn_units(planted.perturbed_model(tiny_config), tiny_config, dead)
        w = planted.to_weights(tiny_config, t)
        table = score_units(w, tiny_config, probe, "ffn")
        for b in range(2):
            assert np.all(table.scores[b, dead[b]] == 0.0)
            live = np.setdiff1d(np.arange(64), dead[b])
            assert np.all(table.scores[b, live] > 0.0)
        w2, cfg2 = prune_ffn(w, tiny_config, PruneSpec(1, 4, ALL), table)
        assert cfg2.c == 48
        diff = np.abs(forward_logits(w2, cfg2, probe) - forward_logits(w, tiny_config, probe)).max()
        assert diff < 1e-5

    def test_attention_head(self, tiny_config, probe):
        t = planted.kill_head(planted.perturbed_model(tiny_config), tiny_config, [2, 0])
        w = planted.to_weights(tiny_config, t)
        table = score_units(w, tiny_config, probe, "mhsa")
        dead = [np.arange(16, 24), np.arange(0, 8)]
        for b in range(2):
            assert np.all(table.scores[b, dead[b]] == 0.0)
            assert np.all(np.delete(table.scores[b], dead[b]) > 0.0)
        w2, cfg2 = prune_mhsa(w, tiny_config, PruneSpec(1, 4, ALL), table)
        assert (cfg2.h, cfg2.inner) == (3, 24)
        diff = np.abs(forward_logits(w2, cfg2, probe) - forward_logits(w, tiny_config, probe)).max()
        assert diff < 1e-5

    def test_residual_channels(self, tiny_config, probe):
        dead = [3, 7, 11, 12, 20, 25, 30, 31]  # 8 = d - round(0.75 d)
        t = planted.kill_residual_channels(planted.perturbed_model(tiny_config), tiny_config, dead)
        w = planted.to_weights(tiny_config, t)
        table = score_units(w, tiny_config, probe, "residual")
        assert np.all(table.scores[dead] == 0.0)
        assert np.all(np.delete(table.scores, dead) > 0.0)
        kept = table.keep_indices(24)
        assert not set(kept.tolist()) & set(dead)
        w2, cfg2 = prune_residual(w, tiny_config, PruneSpec(1, 4, ALL), table)
        assert cfg2.d == 24
        # dead channels still enter the norm statistics, so the output moves
        # slightly; it must stay finite and close
        diff = np.abs(forward_logits(w2, cfg2, probe) - forward_logits(w, tiny_config, probe)).max()
        assert np.isfinite(diff)


class TestPipeline:
    def test_hp_zero_full_classes_is_identity(self, tiny_config, tiny_trained, tiny_data):
        X, y = tiny_data
        sub = prune_pipeline(tiny_trained, tiny_config, X, y, PruneSpec(0, 4, ALL), retrain=False)
        assert sub.weights.checksum() == tiny_trained.checksum()
        assert sub.config == tiny_config
        assert np.array_equal(
            forward_logits(sub.weights, sub.config, X[:8]), forward_logits(tiny_trained, tiny_config, X[:8])
        )

    @pytest.mark.parametrize("hp", [1, 3])
    def test_shapes_follow_pruned_config(self, tiny_config, tiny_trained, tiny_data, hp):
        X, y = tiny_data
        spec = PruneSpec(hp, 4, (1, 6))
        sub = prune_pipeline(tiny_trained, tiny_config, X, y, spec, retrain=False, calib_size=16)
        assert sub.config == pruned_config(tiny_config, spec, num_classes=3)
        assert sub.weights.num_params() == cost.param_count(sub.config)
        assert sub.embed(X[:5]).shape == (5, sub.config.d)

    def test_param_count_strictly_decreasing(self, tiny_config):
        counts = [cost.param_count(pruned_config(tiny_config, PruneSpec(hp, 4, (0,)), 2)) for hp in range(4)]
        assert all(a > b for a, b in zip(counts, counts[1:]))

    def test_deterministic(self, tiny_config, tiny_trained, tiny_data):
        X, y = tiny_data
        spec = PruneSpec(2, 4, (0, 3))
        a = prune_pipeline(tiny_trained, tiny_config, X, y, spec, epochs=2, lr=1e-2, calib_size=16)
        b = prune_pipeline(tiny_trained, tiny_config, X, y, spec, epochs=2, lr=1e-2, calib_size=16)
        assert a.weights.checksum() == b.weights.checksum()


class TestHead:
    def test_subset_head_other_row_is_mean(self, rng):
        head = DenseLayer(rng.standard_normal((5, 3)), rng.standard_normal(5))
        sub = subset_head(head, (1, 3), 5)
        assert np.array_equal(sub.weight[:2], head.weight[[1, 3]])
        assert np.allclose(sub.weight[2], head.weight[[0, 2, 4]].mean(axis=0))
        assert np.isclose(sub.bias[2], head.bias[[0, 2, 4]].mean())

    def test_retrain_reduces_loss(self, tiny_config, tiny_trained, tiny_data):
        X, y = tiny_data
        sub = prune_pipeline(tiny_trained, tiny_config, X, y, PruneSpec(0, 4, (2, 5)), retrain=False)
        calib = resample(X, y, (2, 5), n_classes=8)
        trained = retrain_head(sub, calib, epochs=5, lr=1e-2, batch_size=32)
        assert trained.head_losses[-1] < trained.head_losses[0]
        # body untouched
        assert np.array_equal(trained.weights.blocks[0].fc1.weight, sub.weights.blocks[0].fc1.weight)

    def test_retrain_zero_epochs_is_noop(self, tiny_config, tiny_trained, tiny_data):
        X, y = tiny_data
        sub = prune_pipeline(tiny_trained, tiny_config, X, y, PruneSpec(0, 4, (2,)), retrain=False)
        assert retrain_head(sub, resample(X, y, (2,), n_classes=8), epochs=0) is sub

    def test_retrain_label_range(self, tiny_config, tiny_trained, tiny_data):
        X, y = tiny_data
        sub = prune_pipeline(tiny_trained, tiny_config, X, y, PruneSpec(0, 4, (2,)), retrain=False)
        with pytest.raises(PruningError):
            retrain_head(sub, resample(X, y, ALL, n_classes=8))
