import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitee.data import synth_make
from splitee.errors import ConfigError, ShapeError
from splitee.inference import (
    ExitDecisionConfig,
    default_grid,
    entropy,
    infer_one,
    sweep,
    sweep_csv,
)
from splitee.model import table_spec
from splitee.training import TrainConfig, run_sequential


@pytest.fixture(scope="module")
def trained():
    """A briefly trained client/server pair plus its evaluation data."""
    spec = table_spec(3, num_classes=4, input_shape=(1, 16, 16), channel_scale=0.125)
    train = synth_make(4, 40, (1, 16, 16), difficulty=0.2, seed=3)
    test = synth_make(4, 15, (1, 16, 16), difficulty=0.2, seed=4)
    cfg = TrainConfig(strategy="sequential", clients=2, end_layers=(1, 2), rounds=3,
                      batch_size=32, seed=1, eval_every=3)
    res = run_sequential(cfg, train, test, spec)
    return res.clients[2], res.shared_server, test


class TestEntropy:
    def test_uniform_is_log_k(self):
        assert entropy(np.full(10, 0.1)) == pytest.approx(math.log(10), abs=1e-12)

    def test_one_hot_is_zero(self):
        p = np.zeros(6)
        p[2] = 1.0
        assert entropy(p) == 0.0

    def test_two_point_uniform_is_log_2(self):
        p = np.array([0.5, 0.5, 0.0, 0.0])
        assert entropy(p) == pytest.approx(math.log(2), abs=1e-12)

    def test_rejects_unnormalized(self):
        with pytest.raises(ConfigError):
            entropy(np.array([0.5, 0.6]))

    def test_rejects_negative(self):
        with pytest.raises(ConfigError):
            entropy(np.array([1.2, -0.2]))

    def test_rejects_matrix(self):
        with pytest.raises(ShapeError):
            entropy(np.ones((2, 2)) / 4)

    @given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_bounds(self, raw):
        p = np.array(raw)
        p /= p.sum()
        h = entropy(p)
        assert -1e-12 <= h <= math.log(len(p)) + 1e-9


class TestExitDecisionConfig:
    def test_negative_tau_rejected(self):
        with pytest.raises(ConfigError):
            ExitDecisionConfig(tau_exit=-0.1)


class TestInferOne:
    def test_tau_zero_always_server(self, trained):
        client, server, ds = trained
        for j in range(5):
            _, where, h = infer_one(client, server, ds.normalized([j])[0],
                                    ExitDecisionConfig(0.0))
            assert where == "server"
            assert h >= 0.0

    def test_tau_above_log_k_always_client(self, trained):
        client, server, ds = trained
        cfg = ExitDecisionConfig(math.log(ds.num_classes) + 0.1)
        for j in range(5):
            _, where, _ = infer_one(client, server, ds.normalized([j])[0], cfg)
            assert where == "client"

    def test_threshold_consistency(self, trained):
        # a sample that exits at tau keeps exiting at every larger tau
        client, server, ds = trained
        x = ds.normalized([0])[0]
        _, _, h = infer_one(client, server, x, ExitDecisionConfig(0.0))
        for tau in (h / 2, h, h + 0.1, 4.0):
            _, where, _ = infer_one(client, server, x, ExitDecisionConfig(tau))
            assert where == ("client" if h < tau else "server")

    def test_width_mismatch_rejected(self, trained):
        from splitee.tensor import Tensor

        client, server, ds = trained
        spec = table_spec(3, num_classes=4, input_shape=(1, 16, 16), channel_scale=0.125)
        with pytest.raises(ShapeError):
            server.forward(
                Tensor(np.zeros((1, spec.scaled_channels(2) + 3, 8, 8))), entry=2
            )


class TestDefaultGrid:
    def test_has_81_points(self):
        g = default_grid()
        assert len(g) == 81
        assert g[0] == 0.0 and g[-1] == 4.0

    def test_step(self):
        g = default_grid()
        steps = np.diff(g)
        np.testing.assert_allclose(steps, 0.05, atol=1e-9)

    def test_custom(self):
        assert default_grid(0.0, 1.0, 0.5) == [0.0, 0.5, 1.0]


class TestSweep:
    def test_empty_grid_rejected(self, trained):
        client, server, ds = trained
        with pytest.raises(ConfigError):
            sweep(client, server, ds, [])

    def test_unsorted_grid_rejected(self, trained):
        client, server, ds = trained
        with pytest.raises(ConfigError):
            sweep(client, server, ds, [1.0, 0.5])

    def test_boundary_ratios(self, trained):
        client, server, ds = trained
        pts = sweep(client, server, ds, [0.0, math.log(ds.num_classes) + 0.1])
        assert pts[0].client_ratio == 0.0
        assert pts[0].server_ratio == 1.0
        assert pts[-1].client_ratio == 1.0

    def test_client_ratio_monotone_on_default_grid(self, trained):
        client, server, ds = trained
        pts = sweep(client, server, ds, default_grid())
        ratios = [p.client_ratio for p in pts]
        assert all(b >= a for a, b in zip(ratios, ratios[1:]))

    def test_avg_entropy_constant(self, trained):
        client, server, ds = trained
        pts = sweep(client, server, ds, default_grid())
        assert len({p.avg_entropy for p in pts}) == 1

    def test_endpoints_match_direct_evaluation(self, trained):
        client, server, ds = trained
        pts = sweep(client, server, ds, [0.0, math.log(ds.num_classes) + 0.1])
        from splitee.tensor import Tensor

        x = Tensor(ds.normalized(np.arange(len(ds))))
        h, logits_c = client.forward(x, training=False)
        logits_s = server.forward(h.detach(), training=False, entry=client.end_layer)
        acc_server = float((logits_s.values.argmax(axis=1) == ds.labels).mean())
        acc_client = float((logits_c.values.argmax(axis=1) == ds.labels).mean())
        assert pts[0].accuracy == acc_server
        assert pts[-1].accuracy == acc_client

    def test_sweep_matches_infer_one(self, trained):
        # the batched sweep and the per-sample path agree on every decision
        client, server, ds = trained
        tau = 1.0
        pts = sweep(client, server, ds, [tau])
        cfg = ExitDecisionConfig(tau)
        preds, wheres = [], []
        for j in range(len(ds)):
            p, where, _ = infer_one(client, server, ds.normalized([j])[0], cfg)
            preds.append(p)
            wheres.append(where)
        acc = float((np.array(preds) == ds.labels).mean())
        ratio = wheres.count("client") / len(ds)
        assert pts[0].accuracy == pytest.approx(acc, abs=1e-12)
        assert pts[0].client_ratio == pytest.approx(ratio, abs=1e-12)


class TestSweepCsv:
    def test_header_and_rows(self, trained):
        client, server, ds = trained
        pts = sweep(client, server, ds, default_grid())
        text = sweep_csv(pts)
        lines = text.strip().split("\n")
        assert lines[0] == "tau,accuracy,client_ratio,server_ratio,avg_entropy"
        assert len(lines) == 82

    def test_deterministic(self, trained):
        client, server, ds = trained
        a = sweep_csv(sweep(client, server, ds, default_grid()))
        b = sweep_csv(sweep(client, server, ds, default_grid()))
        assert a == b
