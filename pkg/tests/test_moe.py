import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pmmoe.errors import DimensionError, ParameterError
from pmmoe.moe import (
    GatedModel,
    GateNetwork,
    MoEConfig,
    build_pools,
    default_k,
    finetune_client,
    gate_forward,
    mpe_mix,
    mpp_mix,
    pool_digest,
    select_topk,
    write_finetune_csv,
)
from pmmoe.numerics import Tensor
from pmmoe.numerics import autograd as ag
from pmmoe.splitmodel import SplitConfig, split_params

from fdcheck import REL_TOL, numeric_grad, rel_error
from fedfix import cached, federation, gate_rng


def fixed_gate(logits, k, U=3):
    """A gate whose output ignores x: zero last-layer weights, bias = logits."""
    g = GateNetwork(U, len(logits), k, np.random.default_rng(0), MoEConfig(k=k, gate_hidden=(4,)))
    last = g.net.layers[-1]
    last.weight.data = np.zeros_like(last.weight.data)
    last.bias.data = np.asarray(logits, dtype=np.float64)
    return g


# -- pools ------------------------------------------------------------------------


def test_pool_order_identity_and_freeze():
    cfg, server, clients, pool = cached(M=3)
    assert pool.size == 3 and pool.owners == (0, 1, 2)
    for j, c in enumerate(clients):
        for k, v in split_params(c.model)[1].items():
            assert pool.entries[j][k].tobytes() == v.tobytes()
        assert pool.pp[j].tobytes() == c.model.pp.data.tobytes()
    with pytest.raises(ValueError):
        pool.pp[0, 0] = 1.0
    with pytest.raises(ValueError):
        pool.entries[1]["p_hd.0.weight"][0, 0] = 1.0
    with pytest.raises(ValueError):
        pool.fe[0].layers[0].weight.data[0, 0] = 1.0


def test_pool_errors():
    cfg, _, clients, _ = cached(M=3)
    parts = [split_params(c.model)[1] for c in clients]
    with pytest.raises(ParameterError):
        build_pools([parts[0], None, parts[2]], cfg)
    bad = dict(parts[1])
    bad["pp"] = np.ones(7)
    with pytest.raises(DimensionError):
        build_pools([parts[0], bad], cfg)
    with pytest.raises(ParameterError):
        build_pools([], cfg)


def test_default_k():
    assert default_k(8, 0) == 4 and default_k(8, 20) == 8 and default_k(1, 0) == 1


# -- gate -------------------------------------------------------------------------


def test_gate_topk_renormalizes_example():
    g = fixed_gate(np.log([0.5, 0.25, 0.25]), k=2)
    out = gate_forward(g, np.zeros(3))
    np.testing.assert_allclose(out.weights, [2 / 3, 1 / 3, 0.0], atol=1e-15)
    assert out.selected.tolist() == [True, True, False]


def test_gate_equal_logits_is_uniform():
    out = gate_forward(fixed_gate(np.zeros(5), k=5), np.ones(3))
    np.testing.assert_allclose(out.weights, np.full(5, 0.2), atol=1e-15)


def test_gate_k1_is_one_hot_at_argmax():
    out = gate_forward(fixed_gate([0.1, 2.0, -1.0, 2.0], k=1), np.zeros((2, 3)))
    assert out.weights.tolist() == [[0.0, 1.0, 0.0, 0.0]] * 2


def test_gate_respects_mask_and_rejects_empty_mask():
    g = fixed_gate([5.0, 1.0, 0.0], k=2)
    out = gate_forward(g, np.zeros(3), np.array([False, True, True]))
    assert out.weights[0] == 0.0 and out.weights.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ParameterError):
        gate_forward(g, np.zeros(3), np.zeros(3, dtype=bool))


def test_gate_output_width_is_pool_size():
    g = GateNetwork(7, 6, 3, np.random.default_rng(1))
    assert g.net.sizes == (7, 128, 256, 128, 6)
    w = gate_forward(g, np.random.default_rng(2).standard_normal((4, 7))).weights
    assert w.shape == (4, 6) and ((w > 0).sum(axis=1) <= 3).all()


logit_rows = arrays(np.float64, st.integers(1, 12), elements=st.floats(-20, 20))


@settings(max_examples=200, deadline=None)
@given(logit_rows, st.data())
def test_topk_monotone_in_k(z, data):
    P = z.size
    active = data.draw(arrays(np.bool_, P))
    if not active.any():
        active[0] = True
    prev = np.zeros(P, dtype=bool)
    for k in range(1, P + 1):
        sel = select_topk(z, active, k)[0]
        assert (sel | ~prev).all()  # prev subset of sel
        assert sel.sum() == min(k, active.sum())
        prev = sel


@settings(max_examples=200, deadline=None)
@given(logit_rows, st.data())
def test_gate_weights_are_a_distribution(z, data):
    P = z.size
    k = data.draw(st.integers(1, P))
    active = data.draw(arrays(np.bool_, P))
    if not active.any():
        active[P - 1] = True
    out = gate_forward(fixed_gate(z, k), np.zeros(3), active)
    w = out.weights
    assert (w >= 0).all()
    assert abs(w.sum() - 1.0) <= 1e-12
    assert (w[~out.selected] == 0).all()


# -- mixtures ---------------------------------------------------------------------


def test_mpp_examples():
    pool = np.array([[1.0, 3.0], [3.0, 5.0]])
    assert mpp_mix(pool, [0.5, 0.5]).tolist() == [2.0, 4.0]
    assert mpp_mix(pool, [0.0, 1.0]).tolist() == [3.0, 5.0]
    same = np.tile([0.3, -7.0], (3, 1))
    np.testing.assert_allclose(mpp_mix(same, [0.2, 0.5, 0.3]), [0.3, -7.0], rtol=1e-15)
    with pytest.raises(DimensionError):
        mpp_mix(pool, [1.0, 0.0, 0.0])


def test_mpe_examples():
    assert mpe_mix([lambda x: 2 * x.data, lambda x: 4 * x.data], [0.25, 0.75], np.array([1.0])).tolist() == [3.5]
    w = np.array([[1.0, -2.0], [0.5, 3.0]])
    out = mpe_mix([lambda x: x.data @ w.T, lambda x: x.data @ (-w).T], [0.5, 0.5], np.array([0.7, -1.3]))
    assert out.tolist() == [0.0, 0.0]
    e1 = lambda x: np.sin(x.data) * 3.1
    got = mpe_mix([e1, lambda x: x.data * 0.0 + 99.0], [1.0, 0.0], np.array([0.4, 0.9]))
    assert got.tobytes() == e1(Tensor([0.4, 0.9])).tobytes()
    with pytest.raises(DimensionError):
        mpe_mix([e1], [0.5, 0.5], np.zeros(2))


# -- gated model ------------------------------------------------------------------


@pytest.mark.parametrize(
    "flags", [(True, True, True), (True, False, False), (False, True, False), (False, False, True), (True, False, True)]
)
def test_clamped_gate_reproduces_pretrained_logits(flags):
    cfg, server, clients, pool = federation(M=4, flags=flags, rounds=3)
    for c in clients:
        gm = GatedModel(server.W_g, pool, c.id, MoEConfig(k=2), gate_rng(0, c.id))
        x = np.concatenate([c.train.x, c.test.x])
        got = gm.logits(gm.features(x), clamp_local=True).data
        want = c.model(x)[1].data
        assert np.max(np.abs(got - want)) <= 1e-10


def test_gate_gradients_match_finite_differences():
    cfg, server, clients, pool = cached(M=4)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        c = clients[seed % 4]
        gm = GatedModel(server.W_g, pool, c.id, MoEConfig(k=3, gate_hidden=(5, 6)), rng)
        idx = rng.choice(len(c.train), size=min(6, len(c.train)), replace=False)
        feats = gm.features(c.train.x[idx])
        y = c.train.y[idx]

        def loss_t():
            return ag.cross_entropy(gm.logits(feats), y)

        params = gm.parameters()
        grads = ag.grad(loss_t(), params)
        assert len(params) == 2 * 2 * 3
        for p, g in zip(params, grads):
            assert rel_error(g, numeric_grad(lambda: float(loss_t().data), p)) < REL_TOL, (seed, p.name)


def test_gate_gradients_never_reach_pool_or_backbone():
    cfg, server, clients, pool = cached(M=4)
    gm = GatedModel(server.W_g, pool, 0, MoEConfig(k=2), gate_rng(0, 0))
    loss = ag.cross_entropy(gm.logits(gm.features(clients[0].train.x)), clients[0].train.y)
    leaves = ag.backward(loss)
    assert {id(p) for p in leaves} == {id(p) for p in gm.parameters()}


def run_ft(pool, server, c, **kw):
    gm = GatedModel(server.W_g, pool, c.id, MoEConfig(**{"k": 2, "epochs": 3, **kw}), gate_rng(0, c.id))
    return gm, finetune_client(gm, c.train, c.test, np.random.default_rng([0, 21, c.id]))


def test_zero_epochs_leaves_gates_and_matches_gated_eval():
    cfg, server, clients, pool = cached(M=4)
    c = clients[1]
    gm0 = GatedModel(server.W_g, pool, c.id, MoEConfig(k=2, epochs=0), gate_rng(0, c.id))
    before = gm0.gate_state()
    res = finetune_client(gm0, c.train, c.test, np.random.default_rng(0))
    assert all(before[k].tobytes() == v.tobytes() for k, v in gm0.gate_state().items())
    assert len(res.history) == 1
    fresh = GatedModel(server.W_g, pool, c.id, MoEConfig(k=2), gate_rng(0, c.id))
    fresh.refresh_masks(fresh.features(c.train.x))
    assert res.history[0].test_accuracy == fresh.accuracy(fresh.features(c.test.x), c.test.y, clamp_local=False)


def test_zero_learning_rate_leaves_gates():
    cfg, server, clients, pool = cached(M=4)
    gm = GatedModel(server.W_g, pool, 2, MoEConfig(k=2, lr=0.0, epochs=2), gate_rng(0, 2))
    before = gm.gate_state()
    finetune_client(gm, clients[2].train, clients[2].test, np.random.default_rng(0))
    assert all(before[k].tobytes() == v.tobytes() for k, v in gm.gate_state().items())


def test_finetune_freezes_pool_and_backbone():
    cfg, server, clients, pool = cached(M=4)
    digest = pool_digest(pool)
    backbone = {k: v.tobytes() for k, v in server.W_g.items()}
    for c in clients:
        gm, _ = run_ft(pool, server, c)
        assert {k: v.tobytes() for k, v in gm.backbone_tensors().items()} == backbone
    assert pool_digest(pool) == digest


def test_single_client_pool_collapses_to_pretrained_model():
    cfg, server, clients, pool = federation(M=1, rounds=5)
    c = clients[0]
    gm, res = run_ft(pool, server, c, k=1, fallback=False)
    feats = gm.features(c.test.x)
    np.testing.assert_array_equal(gm_weights(gm, feats), np.ones((len(c.test), 1)))
    assert np.max(np.abs(gm.logits(feats).data - c.model(c.test.x)[1].data)) <= 1e-10
    phase1 = float((c.model(c.test.x)[1].data.argmax(1) == c.test.y).mean())
    assert abs(res.final_accuracy - phase1) <= 1e-10


def gm_weights(gm, feats):
    return gm.pe_gate(Tensor(feats.x), gm.kept_pe)[0].data


def test_fallback_restores_local_model_when_gates_do_not_help():
    cfg, server, clients, pool = cached(M=4)
    c = clients[0]
    gm, res = run_ft(pool, server, c, lr=0.0)
    tr = gm.features(c.train.x)
    gated, local = gm.loss(tr, c.train.y, False), gm.loss(tr, c.train.y, True)
    assert res.fell_back == (local <= gated)
    if res.fell_back:
        phase1 = float((c.model(c.test.x)[1].data.argmax(1) == c.test.y).mean())
        assert res.final_accuracy == phase1


def test_finetune_records_and_masks():
    cfg, server, clients, pool = cached(M=4)
    c = clients[3]
    gm, res = run_ft(pool, server, c, gamma=0.5, epochs=4)
    assert [r.epoch for r in res.history] == list(range(5))
    assert all(r.kept_expert_count == 4 - 1 for r in res.history)  # floor(0.5 * 3) removed
    assert res.report_pe.kept[c.id] and res.report_pp.kept[c.id]
    assert all(np.isfinite(r.loss) for r in res.history)


def test_finetune_is_deterministic(tmp_path):
    cfg, server, clients, pool = cached(M=4)
    outs = []
    for i in range(2):
        results = [run_ft(pool, server, c)[1] for c in clients]
        write_finetune_csv(tmp_path / f"f{i}.csv", results)
        outs.append((tmp_path / f"f{i}.csv").read_bytes())
    assert outs[0] == outs[1]
    assert outs[0].splitlines()[0] == b"client_id,epoch,loss,test_accuracy,kept_expert_count"


def test_finetune_rejects_empty_training_set():
    from pmmoe.datagen import LabeledDataset

    cfg, server, clients, pool = cached(M=4)
    gm = GatedModel(server.W_g, pool, 0, MoEConfig(k=2), gate_rng(0, 0))
    with pytest.raises(ParameterError):
        finetune_client(gm, LabeledDataset(np.zeros((0, 6)), np.zeros(0, dtype=int), 3), clients[0].test, np.random.default_rng(0))


def test_anchor_outside_pool_rejected():
    cfg, server, clients, pool = cached(M=4)
    with pytest.raises(ParameterError):
        GatedModel(server.W_g, pool, 4, MoEConfig(k=2), gate_rng(0, 0))
    with pytest.raises(ParameterError):
        MoEConfig(k=0)
