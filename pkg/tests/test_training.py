import csv
import hashlib
import json

import numpy as np
import pytest

from werank.data import AugmentConfig, ToyDataConfig, gen_synthetic_graph, gen_toy_dataset
from werank.losses import VicregConfig, WERankConfig
from werank.models import NetworkSpec, init_weights
from werank.training import (AdamState, GraphViews, OptimizerConfig, ToyViews, TrainingDivergence,
                             TrainRunConfig, adamw_step, minimize_werank, sgd_step, train_ema,
                             train_siamese)


@pytest.fixture(scope="module")
def small_toy():
    return gen_toy_dataset(ToyDataConfig(n_points=64, dim=8, seed=1))


def _toy_cfg(epochs=5, werank=None, **kw):
    return TrainRunConfig(model=NetworkSpec.linear_chain([8, 8, 8]), epochs=epochs,
                          trace_every=2, werank=werank, **kw)


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestOptimizers:
    def test_sgd_examples(self):
        cfg = OptimizerConfig(learning_rate=0.1)
        assert sgd_step([np.array([1.0])], [np.array([2.0])], cfg)[0][0] == pytest.approx(0.8)
        p = np.array([3.0, -1.0])
        assert np.array_equal(sgd_step([p], [np.zeros(2)], cfg)[0], p)

    def test_sgd_descends_quadratic(self):
        cfg = OptimizerConfig(learning_rate=0.1)
        p = [np.array([5.0])]
        for _ in range(100):
            p = sgd_step(p, [2 * p[0]], cfg)
        assert abs(p[0][0]) < 1e-8

    def test_adamw_first_step(self):
        cfg = OptimizerConfig("adamw", learning_rate=0.01)
        p = [np.array([1.0])]
        new, state = adamw_step(AdamState.zeros_like(p), p, [np.array([1.0])], cfg)
        assert new[0][0] - 1.0 == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)
        assert state.t == 1

    def test_adamw_decoupled_decay(self):
        cfg = OptimizerConfig("adamw", learning_rate=0.01, weight_decay=3e-4)
        p = [np.array([2.0])]
        new, _ = adamw_step(AdamState.zeros_like(p), p, [np.array([0.0])], cfg)
        assert new[0][0] == pytest.approx(2.0 * (1 - 0.01 * 3e-4), rel=1e-15)

    def test_adamw_deterministic(self):
        cfg = OptimizerConfig("adamw", learning_rate=0.01, weight_decay=1e-2)
        p, g = [np.arange(4.0)], [np.ones(4)]
        a = adamw_step(AdamState.zeros_like(p), p, g, cfg)[0][0]
        b = adamw_step(AdamState.zeros_like(p), p, g, cfg)[0][0]
        assert np.array_equal(a, b)

    def test_validation(self):
        with pytest.raises(ValueError):
            OptimizerConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            OptimizerConfig("lbfgs")


class TestConfig:
    def test_alpha_length_checked(self):
        with pytest.raises(ValueError):
            _toy_cfg(werank=WERankConfig([0.1]))

    def test_bad_values(self):
        with pytest.raises(ValueError):
            _toy_cfg(epochs=-1)
        with pytest.raises(ValueError):
            TrainRunConfig(model=NetworkSpec.linear_chain([2, 2]), loss="barlow")


class TestSiamese:
    def test_zero_epochs_keeps_init(self, small_toy):
        cfg = _toy_cfg(epochs=0)
        r = train_siamese(cfg, small_toy)
        assert r.stack.checksum() == init_weights(cfg.model, cfg.seed).checksum()
        assert r.losses == []

    def test_losses_finite_and_regularizer_nonnegative(self, small_toy):
        r = train_siamese(_toy_cfg(werank=WERankConfig.uniform(0.1, 2)), small_toy)
        for _, ssl, reg, total in r.losses:
            assert np.isfinite(total) and reg >= 0
            assert total == pytest.approx(ssl + reg)

    def test_trace_schedule(self, small_toy):
        r = train_siamese(_toy_cfg(epochs=5), small_toy)
        assert r.report.series("W1")[0].tolist() == [0, 2, 4, 5]
        assert r.report.matrix_ids() == ["W1", "W2", "Z"]

    def test_alpha_zero_is_bit_identical(self, small_toy, tmp_path):
        plain = train_siamese(_toy_cfg(), small_toy).write(tmp_path / "plain")
        zero = train_siamese(_toy_cfg(werank=WERankConfig.uniform(0.0, 2)), small_toy).write(tmp_path / "zero")
        assert _digest(plain / "trace.csv") == _digest(zero / "trace.csv")

    def test_rerun_is_identical(self, small_toy, tmp_path):
        a = train_siamese(_toy_cfg(loss="infonce"), small_toy).write(tmp_path / "a")
        b = train_siamese(_toy_cfg(loss="infonce"), small_toy).write(tmp_path / "b")
        for name in ("trace.csv", "loss.csv", "meta.json"):
            assert _digest(a / name) == _digest(b / name)

    def test_written_files(self, small_toy, tmp_path):
        out = train_siamese(_toy_cfg(epochs=2), small_toy).write(tmp_path)
        with open(out / "loss.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "ssl", "werank", "total"] and len(rows) == 3
        meta = json.loads((out / "meta.json").read_text())
        assert meta["config"]["epochs"] == 2 and meta["noise_block"] == "last coordinates"

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self, small_toy):
        cfg = _toy_cfg(epochs=50, optimizer=OptimizerConfig(learning_rate=50.0))
        with pytest.raises(TrainingDivergence):
            train_siamese(cfg, small_toy)

    def test_werank_lifts_small_singular_values(self, small_toy):
        base = _toy_cfg(epochs=300, vicreg=VicregConfig(inv_reduction="entry"))
        reg = _toy_cfg(epochs=300, vicreg=VicregConfig(inv_reduction="entry"),
                       werank=WERankConfig.uniform(0.5, 2, normalize_by_d2=False))
        low = train_siamese(base, small_toy).report.final("W1").sigmas.min()
        high = train_siamese(reg, small_toy).report.final("W1").sigmas.min()
        assert high > low


class TestWERankOnly:
    def test_converges_to_orthonormal(self):
        w0 = np.random.default_rng(0).normal(size=(16, 16)) / 4
        _, steps, err = minimize_werank(w0, WERankConfig([1.0], normalize_by_d2=False),
                                        OptimizerConfig(learning_rate=5e-4), 20000, tol=1e-3)
        assert err < 1e-3 and steps <= 20000

    def test_rectangular(self):
        w0 = np.random.default_rng(1).normal(size=(4, 9)) / 2
        w, _, err = minimize_werank(w0, WERankConfig([1.0], normalize_by_d2=False),
                                    OptimizerConfig(learning_rate=1e-3), 20000, tol=1e-3)
        assert err < 1e-3
        np.testing.assert_allclose(w @ w.T, np.eye(4), atol=3e-3)


class TestEma:
    def _cfg(self, epochs=4, decay=0.995, werank=None, optimizer=None):
        return TrainRunConfig(model=NetworkSpec.linear_chain([8, 8]), loss="byol", epochs=epochs,
                              trace_every=1, ema_decay=decay, werank=werank,
                              predictor=NetworkSpec.linear_chain([8, 8]),
                              optimizer=optimizer or OptimizerConfig("adamw", learning_rate=0.01,
                                                                     weight_decay=3e-4))

    def test_decay_one_freezes_target(self, small_toy):
        cfg = self._cfg(decay=1.0)
        r = train_ema(cfg, ToyViews(small_toy, 0.1, cfg.seed))
        assert r.target.checksum() == init_weights(cfg.model, cfg.seed).checksum()
        assert r.stack.checksum() != r.target.checksum()

    def test_tracks_h_and_z(self, small_toy):
        r = train_ema(self._cfg(), ToyViews(small_toy, 0.1, 0))
        assert r.report.matrix_ids() == ["W1", "H", "Z"]
        assert r.meta["trainer"] == "ema" and r.meta["predictor"] is True

    def test_rejects_other_losses(self, small_toy):
        cfg = _toy_cfg()
        with pytest.raises(ValueError):
            train_ema(cfg, ToyViews(small_toy, 0.1, 0))

    def test_werank_raises_spectrum_with_adamw(self, small_toy):
        plain = train_ema(self._cfg(epochs=200), ToyViews(small_toy, 0.1, 0))
        reg = train_ema(self._cfg(epochs=200, werank=WERankConfig([0.02], normalize_by_d2=False)),
                        ToyViews(small_toy, 0.1, 0))
        gap = lambda r: np.abs(r.report.final("W1").sigmas - 1).max()
        assert gap(reg) < gap(plain)

    def test_graph_views(self):
        g = gen_synthetic_graph(n_nodes=40, n_blocks=2, feat_dim=6, p_in=0.3, p_out=0.02)
        cfg = TrainRunConfig(model=NetworkSpec.gcn_encoder([6, 8, 4]), loss="byol", epochs=3,
                             trace_every=1, predictor=NetworkSpec.mlp_predictor(4, 8),
                             werank=WERankConfig.uniform(0.1, 2),
                             optimizer=OptimizerConfig("adamw", learning_rate=1e-3))
        provider = GraphViews(g, AugmentConfig(), cfg.seed)
        a = train_ema(cfg, provider)
        b = train_ema(cfg, GraphViews(g, AugmentConfig(), cfg.seed))
        assert a.stack.checksum() == b.stack.checksum()
        assert all(np.isfinite(t) for *_, t in a.losses)
        v1, v2 = provider.views(1)
        assert not np.array_equal(v1[0], v2[0])
