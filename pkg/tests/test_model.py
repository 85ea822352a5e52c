import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ovpano.model import (DTYPE, ConfigError, GraphInputs, MoeConfig, MoeSuperpointNet, NumericalError,
                          forward, gate, grad_check, load_balance_loss, load_checkpoint, loss_affinity,
                          loss_rec, loss_triplet, model_grad_check, random_hierarchy, sample_triplets,
                          save_checkpoint, train_toy)
from ovpano.superpoint import Level, SuperpointHierarchy

from oracles import bce, load_balance_two_pass


def toy(levels=2, seed=0, **kw):
    hier = random_hierarchy(12, levels, 32, seed=seed)
    cfg = MoeConfig(levels=levels, hidden=16, feat_dim=32, n_experts=4, seed=seed, **kw)
    return hier, GraphInputs.from_hierarchy(hier), MoeSuperpointNet(cfg)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# ------------------------------------------------------------------ gating

def test_gate_equal_logits_tie():
    probs, sel, w = gate(np.zeros((1, 3)), np.zeros((1, 2)), np.zeros((4, 5)), np.zeros(4))
    np.testing.assert_allclose(probs.numpy(), [[0.25] * 4])
    assert sel.tolist() == [[0, 1]]
    np.testing.assert_allclose(w.numpy(), [[0.5, 0.5]])


def test_gate_dominant_logit():
    probs, sel, w = gate(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((4, 2)), np.array([10.0, 0, 0, 0]))
    p = np.exp([10.0, 0, 0, 0]) / np.exp([10.0, 0, 0, 0]).sum()
    expect0 = p[0] / (p[0] + p[1])
    assert sel.tolist() == [[0, 1]]
    assert float(w[0, 0]) == pytest.approx(expect0, abs=1e-15)
    assert float(w[0, 0]) == pytest.approx(1 / (1 + math.exp(-10)), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_gate_weights_sum_to_one_and_pick_top(seed, e):
    rng = np.random.default_rng(seed)
    probs, sel, w = gate(rng.normal(size=(20, 5)), rng.normal(size=(20, 3)), rng.normal(size=(e, 8)) * 3,
                         rng.normal(size=e))
    np.testing.assert_allclose(w.sum(1).numpy(), 1.0, atol=1e-9)
    np.testing.assert_allclose(probs.sum(1).numpy(), 1.0, atol=1e-12)
    p = probs.numpy()
    for row, s in zip(p, sel.numpy()):
        assert row[s[0]] >= row[s[1]] >= np.delete(row, s).max(initial=-1)


# ------------------------------------------------------------- load balance

def test_load_balance_uniform_is_one():
    for e in (2, 4, 7):
        probs = torch.full((2 * e, e), 1.0 / e, dtype=DTYPE)
        sel = torch.tensor([[i % e, (i + 1) % e] for i in range(2 * e)])
        assert float(load_balance_loss(probs, sel)) == pytest.approx(1.0, abs=1e-9)


def test_load_balance_single_expert_is_e():
    probs = torch.zeros((6, 4), dtype=DTYPE)
    probs[:, 0] = 1.0
    sel = torch.zeros((6, 2), dtype=torch.long)
    assert float(load_balance_loss(probs, sel)) == pytest.approx(4.0, abs=1e-9)


def test_load_balance_matches_two_pass_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        probs, sel, _ = gate(rng.normal(size=(64, 4)), rng.normal(size=(64, 2)), rng.normal(size=(5, 6)),
                             rng.normal(size=5))
        got = float(load_balance_loss(probs, sel))
        assert got == pytest.approx(load_balance_two_pass(probs.numpy(), sel.numpy()), abs=1e-9)


def test_load_balance_can_fall_below_one():
    # three nodes prefer experts 0,1 weakly; one node prefers 2,3 strongly
    weak = [0.26, 0.26, 0.24, 0.24]
    strong = [0.0, 0.0, 0.5, 0.5]
    probs = torch.tensor([weak, weak, weak, strong], dtype=DTYPE)
    sel = torch.tensor([[0, 1], [0, 1], [0, 1], [2, 3]])
    assert float(load_balance_loss(probs, sel)) == pytest.approx(0.89, abs=1e-12)


def test_load_balance_needs_nodes():
    with pytest.raises(ValueError):
        load_balance_loss(torch.zeros((0, 4), dtype=DTYPE), torch.zeros((0, 2), dtype=torch.long))


# ------------------------------------------------------------------ forward

def test_forward_contracts():
    hier, inputs, model = toy()
    out = forward(model, inputs)
    s = hier.levels[0].size
    q = len(hier.levels[0].edges)
    assert out.pred_vec.shape == (s, 32)
    assert out.pred_affinity.shape == (q,)
    assert torch.all((out.pred_affinity >= 0) & (out.pred_affinity <= 1))
    np.testing.assert_allclose(out.pred_vec.norm(dim=1).detach().numpy(), 1.0, atol=1e-12)
    assert len(out.gates) == 2 * 2 - 1
    for g in out.gates:
        np.testing.assert_allclose(g.probs.sum(1).detach().numpy(), 1.0, atol=1e-12)
        np.testing.assert_allclose(g.weights.sum(1).detach().numpy(), 1.0, atol=1e-9)
        assert torch.all(g.weights > 0)
        assert torch.all(g.selected[:, 0] != g.selected[:, 1])
    for f, p in out.gate_stats:
        assert f.sum() == pytest.approx(1.0) and p.sum() == pytest.approx(1.0)
    assert all(torch.isfinite(v) for v in out.losses.values())


def test_forward_only_selected_experts_contribute():
    _, inputs, model = toy()
    block = model.encoders[0]
    g = inputs.levels[0]
    h = model.embed[0](g.geom).detach()
    with torch.no_grad():
        h0, rec = block(h, g)
        for e, expert in enumerate(block.experts):
            saved = [p.clone() for p in expert.parameters()]
            for p in expert.parameters():
                p.mul_(3.0)
            h1, _ = block(h, g, rec.selected)
            for p, s in zip(expert.parameters(), saved):
                p.copy_(s)
            uses = (rec.selected == e).any(1)
            assert torch.equal(h1[~uses], h0[~uses])
            if uses.any():
                assert not torch.allclose(h1[uses], h0[uses])


def test_forward_is_deterministic():
    _, inputs, m1 = toy(seed=3)
    _, _, m2 = toy(seed=3)
    a = forward(m1, inputs)
    b = forward(m2, inputs)
    assert torch.equal(a.pred_vec, b.pred_vec) and torch.equal(a.pred_affinity, b.pred_affinity)


def permute_hierarchy(hier, perm):
    """Relabel level-1 superpoints: new id ``i`` is old id ``perm[i]``."""
    inv = np.argsort(perm)
    lv, lv2 = hier.levels
    edges = inv[lv.edges]
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    new1 = Level(inv[lv.parent_of], edges[order], lv.edge_feat[order], lv.sp_geom[perm], lv.point_count[perm])
    for name in ("targets", "target_mask", "majority_class", "majority_instance", "is_thing"):
        setattr(new1, name, getattr(lv, name)[perm])
    new2 = Level(lv2.parent_of[perm], lv2.edges, lv2.edge_feat, lv2.sp_geom, lv2.point_count)
    return SuperpointHierarchy([new1, new2], hier.n_points), order


def test_forward_permutation_equivariant():
    hier, inputs, model = toy(seed=1)
    perm = np.random.default_rng(0).permutation(hier.levels[0].size)
    phier, order = permute_hierarchy(hier, perm)
    a = forward(model, inputs)
    b = forward(model, GraphInputs.from_hierarchy(phier))
    np.testing.assert_allclose(b.pred_vec.detach().numpy(), a.pred_vec.detach().numpy()[perm], atol=1e-10)
    np.testing.assert_allclose(b.pred_affinity.detach().numpy(), a.pred_affinity.detach().numpy()[order], atol=1e-10)


def test_forward_rejects_depth_mismatch():
    hier = random_hierarchy(12, 3, 32)
    model = MoeSuperpointNet(MoeConfig(levels=2, hidden=16, feat_dim=32))
    with pytest.raises(ConfigError):
        forward(model, GraphInputs.from_hierarchy(hier))


def test_config_validation():
    with pytest.raises(ConfigError):
        MoeConfig(top_k=3)
    with pytest.raises(ConfigError):
        MoeConfig(n_experts=1)
    with pytest.raises(ConfigError):
        MoeConfig(margin=2.0)
    with pytest.raises(ConfigError):
        MoeConfig(hidden=15, heads=2)


# ------------------------------------------------------------------- losses

def test_loss_rec_identities():
    v = unit(np.arange(1.0, 6.0))
    e = np.eye(5)
    assert float(loss_rec(v, np.stack([v] * 3))) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_rec(v, np.stack([-v] * 3))) == pytest.approx(2.0, abs=1e-12)
    assert float(loss_rec(e[0], e[1:4])) == pytest.approx(1.0, abs=1e-12)


def test_loss_rec_mask_excludes_rows():
    v = unit([1.0, 2.0])
    pred = np.stack([v, v])
    targets = np.stack([np.stack([v] * 3), np.stack([-v] * 3)])
    assert float(loss_rec(pred, targets, [True, False])) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_rec(pred, targets, [False, False])) == 0.0


def triplet_vectors(cos_p, cos_n):
    a = np.array([1.0, 0, 0])
    p = np.array([cos_p, math.sqrt(1 - cos_p ** 2), 0])
    n = np.array([cos_n, 0, math.sqrt(1 - cos_n ** 2)])
    return a, p, n


@pytest.mark.parametrize("cp,cn,expect", [(1.0, 0.0, 0.0), (0.3, 0.9, 0.8), (0.5, 0.5, 0.2)])
def test_loss_triplet_arithmetic(cp, cn, expect):
    assert float(loss_triplet(*triplet_vectors(cp, cn), 0.2)) == pytest.approx(expect, abs=1e-12)


def test_sample_triplets_rules():
    rng = np.random.default_rng(0)
    classes = np.array([0, 0, 1, 1, 2, -1])
    a, p, n = sample_triplets(classes, rng)
    assert a.tolist() == [0, 1, 2, 3]
    for i, j, k in zip(a.tolist(), p.tolist(), n.tolist()):
        assert classes[j] == classes[i] and j != i
        assert classes[k] != classes[i] and classes[k] >= 0


def test_loss_affinity_cases():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    assert float(loss_affinity(y, y)) <= 1e-6
    assert float(loss_affinity(np.full(4, 0.5), y)) == pytest.approx(math.log(2), abs=1e-12)
    rng = np.random.default_rng(1)
    p = rng.uniform(0.01, 0.99, 50)
    lab = rng.integers(0, 2, 50).astype(float)
    assert float(loss_affinity(p, lab)) == pytest.approx(bce(p, lab), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_ranges(seed):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(6, 8))
    targets = rng.normal(size=(6, 3, 8))
    r = float(loss_rec(pred, targets))
    t = float(loss_triplet(pred[:2], pred[2:4], pred[4:], 0.3))
    assert 0 <= r <= 2 and 0 <= t <= 2.3


# ---------------------------------------------------------------- gradients

def test_grad_check_quadratic_probe():
    rng = np.random.default_rng(0)
    a = torch.as_tensor(rng.normal(size=(6, 6)), dtype=DTYPE)
    x = torch.as_tensor(rng.normal(size=6), dtype=DTYPE, ).requires_grad_(True)
    res = grad_check(lambda: x @ a @ x + (x ** 2).sum(), [x])
    assert res.n_checked == 6 and res.max_rel_error < 1e-8


def test_grad_check_requires_double():
    x = torch.ones(3, dtype=torch.float32, requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: (x ** 2).sum(), [x])


def test_grad_check_excludes_routing_tie():
    _, inputs, model = toy()
    gate_layer = model.encoders[0].gate
    with torch.no_grad():
        gate_layer.weight.zero_()
        gate_layer.bias.zero_()
    base = forward(model, inputs)
    assert torch.all(base.gates[0].selected == torch.tensor([0, 1]))
    routing = [r.clone() for r in base.routing]
    state = {}

    def loss_fn():
        out = forward(model, inputs, routing=routing, triplets=sample_triplets(inputs.classes, np.random.default_rng(0)))
        state["nat"] = [r.clone() for r in out.natural_routing]
        return out.losses["total"]

    res = grad_check(loss_fn, [gate_layer.bias], selection_fn=lambda: state["nat"])
    assert res.n_excluded == 4 and res.n_checked == 0


def test_toy_model_grad_check():
    _, inputs, model = toy()
    res = model_grad_check(model, inputs, max_checks=300)
    assert res.n_checked > 200
    assert res.max_rel_error < 1e-4


# ----------------------------------------------------------------- training

def test_train_zero_steps_keeps_params():
    _, inputs, model = toy()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    trace = train_toy(model, inputs, 0)
    assert trace.steps == []
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_train_lowers_total_loss():
    _, inputs, model = toy()
    trace = train_toy(model, inputs, 60)
    total = trace.column("total")
    assert total[-1] < total[0]
    assert set(trace.steps[0]) >= {"rec", "triplet", "balance", "affinity", "total", "step"}


def test_balance_only_training_moves_toward_one():
    _, inputs, model = toy(w_rec=0.0, w_tri=0.0, w_aff=0.0, w_bal=1.0)
    bal = train_toy(model, inputs, 100, lr=0.5).column("balance")
    assert bal[0] > 1.0
    assert abs(bal[-1] - 1.0) < abs(bal[0] - 1.0)


def test_train_divergence_reports_step():
    _, inputs, model = toy()
    with pytest.raises(NumericalError) as err:
        train_toy(model, inputs, 5, lr=float("inf"))
    assert err.value.step == 1


def test_train_is_deterministic():
    _, inputs, m1 = toy(seed=2)
    _, _, m2 = toy(seed=2)
    a = train_toy(m1, inputs, 10).column("total")
    b = train_toy(m2, inputs, 10).column("total")
    np.testing.assert_array_equal(a, b)


def test_checkpoint_roundtrip(tmp_path):
    _, inputs, model = toy(seed=4)
    save_checkpoint(tmp_path / "m.hck", model, {"note": 1})
    assert (tmp_path / "m.hck").read_bytes()[:4] == b"HCK1"
    back, extra = load_checkpoint(tmp_path / "m.hck")
    assert extra == {"note": 1} and back.config == model.config
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2
        torch.testing.assert_close(v2, v.to(torch.float32).to(DTYPE))
    (tmp_path / "bad.hck").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.hck")
