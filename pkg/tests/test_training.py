import json

import numpy as np
import pytest

from splitee.data import synth_make
from splitee.errors import ConfigError
from splitee.model import build_base, split, table_spec
from splitee.training import (
    TrainConfig,
    cross_layer_aggregate,
    run_averaging,
    run_centralized,
    run_distributed,
    run_sequential,
    run_strategy,
)


def small_spec(depth=4, classes=4):
    return table_spec(depth, num_classes=classes, input_shape=(1, 16, 16),
                      channel_scale=0.125)


def small_data(classes=4, per_class=12, seed=7):
    train = synth_make(classes, per_class, (1, 16, 16), difficulty=0.3, seed=seed)
    test = synth_make(classes, 4, (1, 16, 16), difficulty=0.3, seed=seed + 1)
    return train, test


def desk_cfg(strategy, rounds=2, **kw):
    base = dict(strategy=strategy, clients=3, end_layers=(1, 2, 3), rounds=rounds,
                batch_size=16, seed=11, eval_every=rounds)
    base.update(kw)
    return TrainConfig(**base)


def client_bytes(result):
    out = {}
    for i, c in result.clients.items():
        out[i] = b"".join(t.values.tobytes() for _, t in c.params.items())
    return out


def server_bytes(server):
    return b"".join(t.values.tobytes() for _, t in server.params.items())


class TestConfigValidation:
    def test_bad_strategy(self):
        with pytest.raises(ConfigError):
            TrainConfig(strategy="nope", clients=1, end_layers=(1,), rounds=1)

    def test_end_layer_count_mismatch(self):
        with pytest.raises(ConfigError):
            TrainConfig(strategy="averaging", clients=3, end_layers=(1, 2), rounds=1)

    def test_end_layer_out_of_range(self):
        spec = small_spec()
        train, test = small_data()
        cfg = TrainConfig(strategy="averaging", clients=1, end_layers=(9,), rounds=1)
        with pytest.raises(ConfigError):
            run_averaging(cfg, train, test, spec)

    def test_centralized_needs_homogeneous_cut(self):
        spec = small_spec()
        train, test = small_data()
        cfg = TrainConfig(strategy="centralized", clients=2, end_layers=(1, 2), rounds=1)
        with pytest.raises(ConfigError):
            run_centralized(cfg, train, test, spec)


class TestCrossLayerAggregate:
    """Oracle: brute-force per-scalar mean over the membership sets."""

    def _manual_mean(self, servers, members, path):
        return sum(servers[i].params[path].values for i in members) / len(members)

    def _randomize(self, servers, rng):
        for s in servers.values():
            for _, t in s.params.items():
                t.values += rng.standard_normal(t.values.shape)

    def test_matches_bruteforce_heterogeneous(self):
        spec = small_spec(depth=5)
        base = build_base(spec, 0)
        end_layers = {1: 3, 2: 3, 3: 4, 4: 5}
        servers = {i: split(base, l, spec, i)[1] for i, l in end_layers.items()}
        rng = np.random.default_rng(5)
        self._randomize(servers, rng)
        # snapshot before aggregation for the oracle
        before = {
            i: {p: t.values.copy() for p, t in s.params.items()}
            for i, s in servers.items()
        }
        cross_layer_aggregate(servers, end_layers, spec.depth)
        for layer in range(1, spec.depth + 2):
            if layer <= spec.depth:
                members = sorted(i for i, l in end_layers.items() if l < layer)
                prefix = f"layer{layer}."
            else:
                members = sorted(end_layers)
                prefix = "head.server."
            if not members:
                continue
            for path in servers[members[0]].params.paths():
                if not path.startswith(prefix):
                    continue
                expect = sum(before[i][path] for i in members) / len(members)
                for i in members:
                    np.testing.assert_allclose(
                        servers[i].params[path].values, expect, rtol=0, atol=1e-15
                    )

    def test_membership_excludes_own_cut(self):
        # layer l is averaged over clients with end_layer < l: a client cut at
        # 4 does not hold layer 4 on the server side.
        spec = small_spec(depth=4)
        base = build_base(spec, 1)
        end_layers = {1: 3, 2: 4}
        servers = {i: split(base, l, spec, i)[1] for i, l in end_layers.items()}
        assert any(p.startswith("layer4.") for p in servers[1].params.paths())
        assert not any(p.startswith("layer4.") for p in servers[2].params.paths())
        lone = servers[1].params["layer4.block1.conv1.weight"].values.copy()
        cross_layer_aggregate(servers, end_layers, spec.depth)
        # only member -> unchanged
        np.testing.assert_array_equal(
            servers[1].params["layer4.block1.conv1.weight"].values, lone
        )

    def test_idempotent_on_consensus(self):
        spec = small_spec(depth=4)
        base = build_base(spec, 2)
        end_layers = {1: 1, 2: 2, 3: 3}
        servers = {i: split(base, l, spec, i)[1] for i, l in end_layers.items()}
        rng = np.random.default_rng(9)
        self._randomize(servers, rng)
        cross_layer_aggregate(servers, end_layers, spec.depth)
        after_once = {
            i: {p: t.values.copy() for p, t in s.params.items()}
            for i, s in servers.items()
        }
        cross_layer_aggregate(servers, end_layers, spec.depth)
        for i, s in servers.items():
            for p, t in s.params.items():
                # re-averaging identical replicas may round by one ulp
                np.testing.assert_allclose(t.values, after_once[i][p], rtol=0, atol=1e-15)

    def test_adam_moments_untouched(self):
        spec = small_spec(depth=3)
        base = build_base(spec, 3)
        end_layers = {1: 1, 2: 2}
        servers = {i: split(base, l, spec, i)[1] for i, l in end_layers.items()}
        for s in servers.values():
            for p in s.adam.m:
                s.adam.m[p] += 1.0
        snapshots = {i: {p: a.copy() for p, a in s.adam.m.items()} for i, s in servers.items()}
        cross_layer_aggregate(servers, end_layers, spec.depth)
        for i, s in servers.items():
            for p in s.adam.m:
                np.testing.assert_array_equal(s.adam.m[p], snapshots[i][p])


class TestHierarchicalIndependence:
    def test_client_params_ignore_server_updates(self):
        """Server-side updates must never leak into client parameters."""
        spec = small_spec()
        train, test = small_data()
        cfg = desk_cfg("sequential", rounds=2)
        with_updates = run_sequential(cfg, train, test, spec, server_updates=True)
        without = run_sequential(cfg, train, test, spec, server_updates=False)
        assert client_bytes(with_updates) == client_bytes(without)
        # and the server genuinely trained in one case only
        assert server_bytes(with_updates.shared_server) != server_bytes(
            without.shared_server
        )


class TestDeterminism:
    def test_same_seed_same_result(self):
        spec = small_spec()
        train, test = small_data()
        a = run_averaging(desk_cfg("averaging"), train, test, spec)
        b = run_averaging(desk_cfg("averaging"), train, test, spec)
        assert client_bytes(a) == client_bytes(b)
        assert {i: server_bytes(s) for i, s in a.servers.items()} == {
            i: server_bytes(s) for i, s in b.servers.items()
        }
        assert [l.to_json_dict() for l in a.logs] == [l.to_json_dict() for l in b.logs]

    def test_workers_do_not_change_results(self):
        spec = small_spec()
        train, test = small_data()
        serial = run_averaging(desk_cfg("averaging", workers=1), train, test, spec)
        parallel = run_averaging(desk_cfg("averaging", workers=4), train, test, spec)
        assert client_bytes(serial) == client_bytes(parallel)
        assert {i: server_bytes(s) for i, s in serial.servers.items()} == {
            i: server_bytes(s) for i, s in parallel.servers.items()
        }
        sj = [json.dumps(l.to_json_dict(), sort_keys=True) for l in serial.logs]
        pj = [json.dumps(l.to_json_dict(), sort_keys=True) for l in parallel.logs]
        assert sj == pj

    def test_seed_changes_results(self):
        spec = small_spec()
        train, test = small_data()
        a = run_averaging(desk_cfg("averaging", seed=1), train, test, spec)
        b = run_averaging(desk_cfg("averaging", seed=2), train, test, spec)
        assert client_bytes(a) != client_bytes(b)


class TestStrategyRelations:
    def test_distributed_is_averaging_without_aggregation(self):
        spec = small_spec()
        train, test = small_data()
        dist = run_distributed(desk_cfg("distributed"), train, test, spec)
        noagg = run_averaging(desk_cfg("averaging"), train, test, spec, aggregate=False)
        assert client_bytes(dist) == client_bytes(noagg)
        assert {i: server_bytes(s) for i, s in dist.servers.items()} == {
            i: server_bytes(s) for i, s in noagg.servers.items()
        }

    def test_single_client_distributed_equals_centralized(self):
        spec = small_spec()
        train, test = small_data()
        cfg_d = TrainConfig(strategy="distributed", clients=1, end_layers=(2,),
                            rounds=2, batch_size=16, seed=3, eval_every=2)
        cfg_c = TrainConfig(strategy="centralized", clients=1, end_layers=(2,),
                            rounds=2, batch_size=16, seed=3, eval_every=2)
        d = run_distributed(cfg_d, train, test, spec)
        c = run_centralized(cfg_c, train, test, spec)
        assert client_bytes(d) == client_bytes(c)
        assert server_bytes(d.servers[1]) == server_bytes(c.servers[1])

    def test_aggregation_produces_consensus_on_shared_layers(self):
        spec = small_spec()
        train, test = small_data()
        res = run_averaging(desk_cfg("averaging"), train, test, spec)
        # head.server is shared by everyone: all replicas agree after the
        # final round barrier
        ref = res.servers[1].params["head.server.linear.weight"].values
        for i in (2, 3):
            np.testing.assert_array_equal(
                res.servers[i].params["head.server.linear.weight"].values, ref
            )


class TestLogsAndCounters:
    def test_round_logs_emitted(self):
        spec = small_spec()
        train, test = small_data()
        res = run_sequential(desk_cfg("sequential", rounds=3, eval_every=3),
                             train, test, spec)
        assert len(res.logs) == 3
        assert [l.round for l in res.logs] == [0, 1, 2]
        # eval only on the cadence
        assert res.logs[0].server_acc == {}
        assert set(res.logs[2].server_acc) == {1, 2, 3}

    def test_wall_clock_not_serialized(self):
        spec = small_spec()
        train, test = small_data()
        res = run_sequential(desk_cfg("sequential", rounds=1), train, test, spec)
        assert "wall_clock" not in res.logs[0].to_json_dict()
        assert res.logs[0].wall_clock > 0

    def test_message_and_byte_counters(self):
        spec = small_spec()
        train, _ = small_data(per_class=12)  # 48 samples -> 16 per client
        cfg = desk_cfg("sequential", rounds=2)
        res = run_sequential(cfg, train, None, spec)
        # one message per client batch: 16 samples / batch 16 = 1 per client
        # per round
        assert res.total_messages == 3 * 2
        assert res.total_bytes > 0
        assert res.logs[-1].messages == res.total_messages

    def test_distributed_has_no_communication(self):
        spec = small_spec()
        train, _ = small_data()
        res = run_distributed(desk_cfg("distributed"), train, None, spec)
        assert res.total_messages == 0
        assert res.total_bytes == 0

    def test_sequential_byte_accounting(self):
        spec = small_spec()
        train, _ = small_data(per_class=12)
        cfg = TrainConfig(strategy="sequential", clients=1, end_layers=(2,),
                          rounds=1, batch_size=48, seed=0)
        res = run_sequential(cfg, train, None, spec)
        ch = spec.scaled_channels(2)
        # features are (B, ch, 16, 16) float64 plus int64 labels
        assert res.total_bytes == 48 * ch * 16 * 16 * 8 + 48 * 8


class TestRunStrategy:
    @pytest.mark.parametrize("strategy", ["sequential", "averaging", "distributed"])
    def test_dispatch(self, strategy):
        spec = small_spec()
        train, test = small_data()
        res = run_strategy(desk_cfg(strategy, rounds=1, eval_every=1), train, test, spec)
        assert res.config.strategy == strategy
        assert len(res.logs) == 1

    def test_dispatch_centralized(self):
        spec = small_spec()
        train, test = small_data()
        cfg = TrainConfig(strategy="centralized", clients=2, end_layers=(2, 2),
                          rounds=1, batch_size=16, seed=0)
        res = run_strategy(cfg, train, test, spec)
        assert res.config.clients == 1  # union of data on a single actor

    def test_max_batches_caps_work(self):
        spec = small_spec()
        train, _ = small_data(per_class=24)
        cfg = TrainConfig(strategy="sequential", clients=1, end_layers=(1,),
                          rounds=1, batch_size=8, seed=0, max_batches=2)
        res = run_sequential(cfg, train, None, spec)
        assert res.total_messages == 2
