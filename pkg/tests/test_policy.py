import numpy as np
import pytest

from augsearch import autodiff as ad
from augsearch import operations as ops
from augsearch import policy as pol
from augsearch.autodiff import Tensor
from augsearch.policy import INFERENCE, gate, init_policy, policy_forward, stage_forward, subpolicy_forward


@pytest.fixture
def x():
    return np.random.default_rng(0).random((6, 3, 8, 8)).astype(np.float32)


def test_gate_midpoint(x):
    o = np.zeros_like(x)
    out = gate(Tensor(o), Tensor(x), Tensor(np.float32(0.0)), 0.05, u=np.full(6, 0.5)).data
    np.testing.assert_allclose(out, 0.5 * x, atol=1e-7)


def test_gate_rejects_nonpositive_temperature(x):
    with pytest.raises(ValueError):
        gate(Tensor(x), Tensor(x), Tensor(np.float32(0.0)), 0.0)


def test_inference_gate_always_applies_for_huge_logit(x):
    o = np.zeros_like(x)
    out = gate(Tensor(o), Tensor(x), Tensor(np.float32(50.0)), 0.05, np.random.default_rng(1), mode=INFERENCE)
    np.testing.assert_array_equal(out.data, o)


def test_init_is_near_uniform_and_deterministic():
    a = init_policy(10, 2, rng=np.random.default_rng(3))
    b = init_policy(10, 2, rng=np.random.default_rng(3))
    for (_, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(ta.data, tb.data)
    probs = a.sub_policies[0].stages[0].probabilities(a.eta)
    # logits within 1e-3 at eta = 0.05 keep every probability within
    # exp(+-0.04) of 1/17, i.e. well inside one percentage point
    assert np.abs(probs * 17 - 1).max() <= np.expm1(0.04)
    assert np.abs(probs - 1 / 17).max() < 0.01 and abs(probs.sum() - 1) < 1e-6
    assert (a.L, a.K) == (10, 2)


def test_small_eta_is_one_hot():
    p = init_policy(1, 1, eta=1e-5, rng=np.random.default_rng(4))
    w = p.sub_policies[0].stages[0].weights.data
    w[3] = w.max() + 1e-3
    assert p.sub_policies[0].stages[0].probabilities(p.eta).max() > 1 - 1e-6


def _one_hot_invert(K):
    p = init_policy(1, K, rng=np.random.default_rng(5))
    for stage in p.sub_policies[0].stages:
        stage.weights.data[:] = -10
        stage.weights.data[ops.OP_INDEX["invert"]] = 10
        stage.ops[ops.OP_INDEX["invert"]].p_raw.data[...] = 40
    return p


def test_double_inversion_is_identity(x):
    p = _one_hot_invert(2)
    out = subpolicy_forward(p.sub_policies[0], Tensor(x), p.eta, p.lam, np.random.default_rng(0))
    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_search_stage_is_convex_combination(x):
    p = init_policy(1, 1, rng=np.random.default_rng(6))
    stage = p.sub_policies[0].stages[0]
    with ad.no_grad():
        out = stage_forward(stage, Tensor(x), p.eta, p.lam, np.random.default_rng(7)).data
        rng = np.random.default_rng(7)
        outs = [ops.apply(o.kind, Tensor(x), ad.sigmoid(o.mu_raw), rng).data for o in stage.ops
                if o.kind not in ops.AFFINE_OPS]
        outs += [ops.apply(o.kind, Tensor(x), ad.sigmoid(o.mu_raw)).data for o in stage.ops
                 if o.kind in ops.AFFINE_OPS]
    lo = np.minimum(np.min(outs, axis=0), x)
    hi = np.maximum(np.max(outs, axis=0), x)
    assert np.all(out >= lo - 1e-5) and np.all(out <= hi + 1e-5)


def test_fused_stage_matches_per_op_gating(x):
    p = init_policy(1, 1, rng=np.random.default_rng(8))
    stage = p.sub_policies[0].stages[0]
    stage.weights.data[:] = np.random.default_rng(9).normal(0, 0.05, 17)
    out = stage_forward(stage, Tensor(x), p.eta, p.lam, np.random.default_rng(10)).data

    rng = np.random.default_rng(10)
    affine = [o for o in stage.ops if o.kind in ops.AFFINE_OPS]
    others = [o for o in stage.ops if o.kind not in ops.AFFINE_OPS]
    results = {o.kind: ops.apply(o.kind, Tensor(x), ad.sigmoid(o.mu_raw), rng) for o in others}
    results.update({o.kind: ops.apply(o.kind, Tensor(x), ad.sigmoid(o.mu_raw)) for o in affine})
    u = rng.random((17, x.shape[0]))
    weights = stage.probabilities(p.eta)
    expected = np.zeros(x.shape)
    for row, o in enumerate(affine + others):
        gated = gate(results[o.kind], Tensor(x), o.p_raw, p.lam, u=u[row]).data
        expected += weights[ops.OP_INDEX[o.kind]] * gated
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_every_parameter_receives_gradient(x):
    # a generic configuration: at lambda = 0.05 most relaxed gates saturate in
    # float32 and a small batch can leave an individual p_raw gradient at zero
    # (and equalize is the identity on 8x8 images with all-distinct values)
    p = init_policy(2, 2, lam=0.5, eta=0.5, rng=np.random.default_rng(11))
    x = np.random.default_rng(0).uniform(0.2, 0.6, (6, 3, 16, 16)).astype(np.float32)
    out = policy_forward(p, Tensor(x), chunk_size=3, rng=np.random.default_rng(12))
    (out * Tensor(np.random.default_rng(13).normal(size=x.shape))).sum().backward()
    used = set()
    for name, t in p.named_parameters():
        if t.grad is not None and np.any(t.grad != 0):
            used.add(name.split(".")[0])
    assert used  # sub-policies drawn for this batch got gradients
    for name, t in p.named_parameters():
        if name.split(".")[0] in used and name.endswith(("weights", "p_raw")):
            assert t.grad is not None and np.any(t.grad != 0), name


def test_inference_evaluates_one_op_per_stage(x, monkeypatch):
    calls = []
    real_apply = ops.apply
    monkeypatch.setattr(pol.ops, "apply", lambda *a, **k: calls.append(a[0]) or real_apply(*a, **k))
    p = init_policy(3, 2, rng=np.random.default_rng(14)).with_mode(INFERENCE)
    policy_forward(p, Tensor(x), chunk_size=2, rng=np.random.default_rng(15))
    assert len(calls) == 3 * 2  # three chunks of two images, K=2


def test_chunk_assignment_is_reproducible():
    a = pol.chunk_assignment(50, 8, 10, np.random.default_rng(16))
    b = pol.chunk_assignment(50, 8, 10, np.random.default_rng(16))
    assert len(a) == 7 and np.array_equal(a, b)
    with pytest.raises(ValueError):
        pol.chunk_assignment(5, 0, 1, np.random.default_rng(0))


def test_inference_is_hard_and_in_range(x):
    p = init_policy(2, 2, rng=np.random.default_rng(17))
    traces = []
    out = pol.augment(p, x, chunk_size=16, seed=1, traces=traces)
    assert out.min() >= 0 and out.max() <= 1 and len(traces) == len(x)
    assert all(isinstance(applied, bool) for _, steps in traces for _, applied in steps)


def test_augment_with_zero_probability_is_identity(x):
    p = init_policy(2, 2, rng=np.random.default_rng(18))
    for sub in p.sub_policies:
        for stage in sub.stages:
            for o in stage.ops:
                o.p_raw.data[...] = -np.inf
    np.testing.assert_array_equal(pol.augment(p, x, seed=3), x)


def test_invalid_structure():
    with pytest.raises(ValueError):
        init_policy(0, 1)
    with pytest.raises(ValueError):
        init_policy(1, 1, eta=0.0)
