import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmmoe import checkpoint
from pmmoe.datagen import (
    PartitionSpec,
    class_means,
    generate_synthetic,
    partition_dirichlet,
    separation_threshold,
    train_test_split,
)
from pmmoe.errors import DimensionError, ParameterError
from pmmoe.federation import ServerState, aggregate, make_clients, pretrain, run_round
from pmmoe.metrics import a_total
from pmmoe.splitmodel import SplitConfig, SplitModel, local_train, split_params


def reference_mean(uploads):
    """Weighted mean coded the slow way: one scalar at a time, same summation order."""
    total = sum(n for n, _ in uploads)
    out = {}
    for k in uploads[0][1]:
        flat = [np.asarray(p[k], dtype=np.float64).ravel() for _, p in uploads]
        vals = []
        for i in range(flat[0].size):
            acc = 0.0
            for (n, _), f in zip(uploads, flat):
                acc = acc + (n / total) * float(f[i])
            vals.append(acc)
        out[k] = np.array(vals).reshape(np.shape(uploads[0][1][k]))
    return out


def setup(M=4, C=3, U=6, per_class=40, seed=0, S=0, cfg=None, spread_frac=0.9):
    spread = spread_frac * separation_threshold(class_means(C, U, seed))
    data = generate_synthetic(C, U, per_class, spread, seed)
    part = partition_dirichlet(data, PartitionSpec(M=M, S=S, beta=0.5, seed=seed, min_size=6))
    splits = train_test_split(data, part, 0.75, seed)
    cfg = cfg or SplitConfig(U, 4, C, fe_hidden=8)
    return make_clients(cfg, splits, seed)


def test_aggregate_examples():
    assert aggregate([(1, {"w": np.array([2.0, 4.0])}), (3, {"w": np.array([6.0, 8.0])})])["w"].tolist() == [5.0, 7.0]
    single = {"w": np.array([[0.1, -3.0]]), "b": np.array([7.0])}
    out = aggregate([(5, single)])
    assert all(out[k].tobytes() == single[k].tobytes() for k in single)
    same = aggregate([(2, single), (7, single), (1, single)])
    for k in single:
        np.testing.assert_allclose(same[k], single[k], rtol=1e-15)


def test_aggregate_errors():
    with pytest.raises(ParameterError):
        aggregate([])
    with pytest.raises(ParameterError):
        aggregate([(0, {"w": np.ones(2)})])
    with pytest.raises(DimensionError):
        aggregate([(1, {"w": np.ones(2)}), (1, {"w": np.ones(3)})])
    with pytest.raises(DimensionError):
        aggregate([(1, {"w": np.ones(2)}), (1, {"v": np.ones(2)})])


@pytest.mark.parametrize("case", range(100))
def test_aggregate_matches_reference_bitwise(case):
    rng = np.random.default_rng(case)
    M = int(rng.integers(1, 9))
    shapes = [tuple(int(d) for d in rng.integers(1, 5, size=rng.integers(0, 3))) for _ in range(rng.integers(1, 4))]
    uploads = [
        (int(rng.integers(1, 500)), {f"t{i}": rng.standard_normal(s) * 10.0 ** rng.integers(-3, 4) for i, s in enumerate(shapes)})
        for _ in range(M)
    ]
    got, want = aggregate(uploads), reference_mean(uploads)
    for k in want:
        assert got[k].shape == want[k].shape
        assert got[k].tobytes() == want[k].tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2.0, 0.5, 4.0, -1.0, 0.25]))
def test_aggregate_is_linear(seed, a):
    rng = np.random.default_rng(seed)
    uploads = [(int(rng.integers(1, 50)), {"w": rng.standard_normal(5)}) for _ in range(int(rng.integers(1, 6)))]
    scaled = [(n, {"w": a * p["w"]}) for n, p in uploads]
    # scaling by a power of two (or -1) commutes with every rounding step
    assert aggregate(scaled)["w"].tobytes() == (a * aggregate(uploads)["w"]).tobytes()


def test_zero_lr_round_leaves_global_part():
    server, clients = setup()
    before = {k: v.copy() for k, v in server.W_g.items()}
    m = run_round(server, clients, epochs=2, lr=0.0)
    for k in before:
        np.testing.assert_allclose(server.W_g[k], before[k], rtol=1e-15, atol=0)
    assert m.round == 1


def test_round_metrics_schema():
    server, clients = setup()
    m = run_round(server, clients, 1, 0.05)
    assert m.round == 1 and len(m.train_loss) == len(clients) == len(m.test_accuracy)
    assert m.mean_train_loss == pytest.approx(np.mean(m.train_loss))
    assert m.a_total == pytest.approx(a_total([(c.n_test, a) for c, a in zip(clients, m.test_accuracy)]))


def test_single_client_equals_centralized_training():
    server, clients = setup(M=1)
    c = clients[0]
    ref = SplitModel(c.model.cfg, np.random.default_rng([0, 10]), np.random.default_rng([0, 11, 0]))
    ref_rng = np.random.default_rng([0, 12, 0])
    for _ in range(5):
        run_round(server, clients, 1, 0.05)
        local_train(ref, c.train, 1, 0.05, ref_rng)
        for k, v in ref.state().items():
            np.testing.assert_array_equal(c.model.state()[k], v)


def test_server_never_holds_private_bytes():
    server, clients = setup()
    for _ in range(3):
        run_round(server, clients, 1, 0.05)
        blob = checkpoint.dumps(server.W_g)
        assert set(server.W_g) == set(split_params(clients[0].model)[0])
        for c in clients:
            for name, t in split_params(c.model)[1].items():
                assert t.tobytes() not in blob, (c.id, name)


def test_pretrain_rejects_zero_rounds():
    server, clients = setup()
    with pytest.raises(ParameterError):
        pretrain(server, clients, 0, 1, 0.05)
    with pytest.raises(ParameterError):
        ServerState({}, strategy="fedprox")


def test_pretrain_reaches_high_accuracy_on_separable_data():
    server, clients = setup(M=4, C=3, U=6, per_class=60)
    hist = pretrain(server, clients, 100, 1, 0.05)
    assert len(hist) == 100
    assert hist[-1].a_total >= 0.9


def test_pretrain_is_deterministic_and_worker_independent():
    runs = []
    for workers in (1, 1, 3):
        server, clients = setup(seed=4)
        hist = pretrain(server, clients, 5, 1, 0.05, workers=workers)
        runs.append((hist[-1].a_total, checkpoint.dumps(server.W_g), [checkpoint.dumps(c.model.state()) for c in clients]))
    assert runs[0] == runs[1] == runs[2]


def test_clients_keep_their_counts():
    server, clients = setup(M=3)
    assert [c.n_train for c in clients] == [len(c.train) for c in clients]
    assert all(c.n_train > 0 for c in clients)
