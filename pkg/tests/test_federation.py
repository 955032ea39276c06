import threading
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfl_recon import nn
from gfl_recon.federation import (
    FederationConfig,
    PosteriorOracle,
    QueryBudgetExceeded,
    fedavg_aggregate,
    init_federation,
    query_posteriors,
    round_trace_csv,
    run_round,
    run_training,
)
from gfl_recon.graph import generate_sbm, make_split, partition_from_sets, partition_graph
from gfl_recon.manipulation import identity_hook
from gfl_recon.metrics import DefenseSetting


def _scalar_model(value):
    return nn.ModelState(nn.ModelArch("GCN"), OrderedDict(w=np.array([float(value)])), 1, 2)


class TestFedAvg:
    def test_equal_sizes(self):
        assert fedavg_aggregate([_scalar_model(1), _scalar_model(3)], [5, 5]).params["w"][0] == 2.0

    def test_weighted(self):
        out = fedavg_aggregate([_scalar_model(0), _scalar_model(4)], [1, 3]).params["w"][0]
        assert abs(out - 3.0) <= 1e-12

    def test_fixed_point(self):
        m = nn.init_model(nn.ModelArch("GAT"), 4, 3, 0)
        out = fedavg_aggregate([m.copy() for _ in range(5)], [3, 1, 4, 1, 5])
        assert all(np.abs(out.params[k] - m.params[k]).max() <= 1e-12 for k in m.params)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        models = [nn.init_model(nn.ModelArch("GCN", hidden_dim=4), 3, 2, int(s)) for s in rng.integers(0, 99, 4)]
        sizes = rng.integers(1, 50, 4).tolist()
        perm = rng.permutation(4)
        a = fedavg_aggregate(models, sizes)
        b = fedavg_aggregate([models[i] for i in perm], [sizes[i] for i in perm])
        assert all(np.abs(a.params[k] - b.params[k]).max() <= 1e-12 for k in a.params)

    def test_shape_mismatch(self):
        a = nn.init_model(nn.ModelArch("GCN"), 4, 3, 0)
        b = nn.init_model(nn.ModelArch("GCN"), 5, 3, 0)
        with pytest.raises(ValueError):
            fedavg_aggregate([a, b], [1, 1])

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            fedavg_aggregate([_scalar_model(1)], [0])


@pytest.fixture(scope="module")
def setup():
    g = generate_sbm(3, 20, 0.3, 0.03, 8, 1.0, seed=1)
    return g, partition_graph(g, 3, 0.0, 0, 1), make_split(g, 0.6, 0.2, 1)


class TestRounds:
    def test_identical_clients_equal_single_client(self, setup):
        g, _, split = setup
        everyone = np.arange(g.num_nodes)
        part = partition_from_sets(g, [everyone, everyone, everyone])
        cfg = FederationConfig(rounds=1, server_arch=nn.ModelArch("GraphSAGE"), seed=2)
        state = init_federation(cfg, g, part, split)
        start = state.global_model.copy()
        run_round(state)
        solo, _ = nn.train_local(start, g, g.features, nn.one_hot(g.labels, 3), split.train, 1, nn.AdamState())
        assert all(np.abs(state.global_model.params[k] - solo.params[k]).max() <= 1e-12 for k in solo.params)

    def test_identity_hook_is_benign(self, setup):
        g, part, split = setup
        cfg = FederationConfig(rounds=3, seed=0)
        a = run_training(cfg, g, part, split)
        b = run_training(cfg, g, part, split, identity_hook)
        assert all(a.global_model.params[k].tobytes() == b.global_model.params[k].tobytes() for k in a.global_model.params)

    def test_state_contract(self, setup):
        g, part, split = setup
        state = init_federation(FederationConfig(rounds=2), g, part, split)
        run_round(state)
        assert state.round_index == 1
        shapes = {k: v.shape for k, v in state.global_model.params.items()}
        assert all({k: v.shape for k, v in m.params.items()} == shapes for m in state.client_models)
        run_round(state)
        with pytest.raises(RuntimeError):
            run_round(state)

    def test_single_round_training_equals_run_round(self, setup):
        g, part, split = setup
        cfg = FederationConfig(rounds=1, seed=4)
        state = init_federation(cfg, g, part, split)
        run_round(state)
        trained = run_training(cfg, g, part, split)
        assert all(np.array_equal(trained.global_model.params[k], state.global_model.params[k]) for k in state.global_model.params)
        assert len(trained.trace) == 1

    def test_hook_only_touches_malicious_client(self, setup):
        g, part, split = setup
        seen = []

        def hook(r, model, sub, x, labels):
            seen.append(sub)
            return x, nn.one_hot(labels, sub.num_classes)

        run_training(FederationConfig(rounds=2), g, part, split, hook)
        assert len(seen) == 2 and all(s is part.malicious_subgraph for s in seen)

    def test_benign_fixture_validation_accuracy(self):
        g = generate_sbm(4, 125, 0.2, 0.02, 8, 1.0, seed=0)
        part, split = partition_graph(g, 3, 0.0, 0, 0), make_split(g, 0.6, 0.2, 0)
        state = run_training(FederationConfig(rounds=100, server_arch=nn.ModelArch("GCN")), g, part, split)
        assert state.trace[-1]["global_val_acc"] >= 0.9

    def test_trace_csv(self, setup):
        g, part, split = setup
        state = run_training(FederationConfig(rounds=2), g, part, split)
        lines = round_trace_csv(state.trace).splitlines()
        assert lines[0] == "round,global_train_acc,global_val_acc,malicious_local_loss"
        assert [l.split(",")[0] for l in lines[1:]] == ["1", "2"]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FederationConfig(rounds=0)


class TestOracle:
    def _oracle(self, setup, **kw):
        g, _, _ = setup
        return PosteriorOracle(nn.init_model(nn.ModelArch("GCN"), 8, 3, 0), g, **kw)

    def test_rows_and_repeatability(self, setup):
        o = self._oracle(setup)
        a = query_posteriors(o, [0, 5, 5])
        assert np.abs(a.sum(axis=1) - 1).max() <= 1e-9
        assert np.array_equal(a[1], a[2])
        assert np.array_equal(query_posteriors(o, [5])[0], a[1])

    def test_query_log(self, setup):
        o = self._oracle(setup)
        o.query([1, 2, 3])
        o.query([4])
        assert o.query_log == 4

    def test_budget(self, setup):
        o = self._oracle(setup, budget=3)
        o.query([0, 1])
        with pytest.raises(QueryBudgetExceeded):
            o.query([2, 3])

    def test_invalid_id(self, setup):
        with pytest.raises(IndexError):
            self._oracle(setup).query([10_000])

    def test_noise_independent_of_query_order(self, setup):
        d = DefenseSetting("laplace", 0.1)
        a = self._oracle(setup, defense=d, seed=3)
        b = self._oracle(setup, defense=d, seed=3)
        first = a.query([1, 2])
        b.query([2])
        b.query([1])
        # node 1 and node 2 are each on their first query in both oracles
        assert np.array_equal(a.query([2])[0], b.query([2])[0])
        fresh = self._oracle(setup, defense=d, seed=3)
        assert np.array_equal(fresh.query([2, 1])[::-1], first)

    def test_zero_strength_defense_is_identity(self, setup):
        plain = self._oracle(setup).query([0, 1])
        noisy = self._oracle(setup, defense=DefenseSetting("laplace", 0.0)).query([0, 1])
        assert plain.tobytes() == noisy.tobytes()

    def test_concurrent_query_log(self, setup):
        o = self._oracle(setup)
        threads = [threading.Thread(target=lambda: [o.query([i % 60]) for i in range(50)]) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert o.query_log == 200

    def test_exposes_no_parameters(self, setup):
        o = self._oracle(setup)
        public = {n for n in dir(o) if not n.startswith("_")}
        assert public == {"query", "query_log", "num_nodes"}
