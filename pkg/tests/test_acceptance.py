"""Acceptance suite: one test (and one summary line) per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the detail lines as
they happen; a summary is printed at the end of every pytest run either way.
"""

import json
import time

import numpy as np
import pytest

from augsearch import autodiff as ad
from augsearch import gradcheck, policy_io, reference
from augsearch import operations as ops
from augsearch.autodiff import Tensor
from augsearch.data import (BadMagicError, ChecksumError, DatasetBundle, LabelRangeError, SyntheticSpec,
                            TruncatedPayloadError, VersionError, from_bytes, make_synthetic, to_bytes)
from augsearch.objective import Adam, CriticNet, LinearCritic, gradient_penalty, wgan_gp_critic_loss
from augsearch.policy import INFERENCE, gate, init_policy, sample_operation, stage_forward
from augsearch.search import SearchConfig, ablation_grid, recovered, run_search, stage_summary

# operations whose output is a pointwise function of one pixel value
EXACT_OPS = ("invert", "solarize", "posterize")


def _op_output(kind, x, mu, seed):
    return ops.apply(kind, Tensor(x), Tensor(np.float32(mu)), np.random.default_rng(seed)).data


def _oracle_output(kind, x, mu, seed):
    n, _, h, w = x.shape
    centers = ops.cutout_centers(np.random.default_rng(seed), n, h, w) if kind == "cutout" else None
    perm = ops.pairing_permutation(np.random.default_rng(seed), n) if kind == "sample_pairing" else None
    return reference.apply(kind, x, float(np.float32(mu)), centers=centers, perm=perm)


def test_c1_forward_fidelity(record):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    x = rng.random((50, 3, 16, 16)).astype(np.float32)
    worst, failures = {}, []
    for i, kind in enumerate(ops.OP_NAMES):
        for trial in range(3):
            mu = np.float32(rng.random())
            got = _op_output(kind, x, mu, seed=100 * i + trial)
            want = _oracle_output(kind, x, mu, seed=100 * i + trial)
            if kind in EXACT_OPS:
                err = float(np.abs(got.astype(np.float64) - want.astype(np.float32)).max())
                ok = err == 0.0
            else:
                err = float(np.abs(got.astype(np.float64) - want).max())
                ok = err <= 1e-5
            worst[kind] = max(worst.get(kind, 0.0), err)
            if not ok:
                failures.append((kind, float(mu), err))
    elapsed = time.perf_counter() - start
    passed = not failures and elapsed < 30
    top = max(worst, key=worst.get)
    record("C1 forward fidelity (17 ops, 50 images, tol 1e-5, exact for pointwise, < 30 s)", passed,
           f"worst {top} {worst[top]:.2e}; failures {failures}; {elapsed:.1f}s")
    assert passed


def test_c2_gradient_suite(record):
    start = time.perf_counter()
    results = gradcheck.run_suite()
    elapsed = time.perf_counter() - start
    print(gradcheck.format_table(results))
    names = {r.name for r in results}
    discrete = {r.name: r.exact for r in results if r.name in ("solarize", "posterize", "cutout")}
    covered = set(ops.OP_NAMES) | {"gate", "stage", "subpolicy_k2", "critic"} <= names
    exact_ok = all(d.get("d_out/d_mu == 1") for d in discrete.values()) and len(discrete) == 3
    passed = covered and exact_ok and all(r.passed for r in results) and elapsed < 120
    worst = max(results, key=lambda r: r.max_error)
    record("C2 gradient suite (h=1e-3, rel tol 1e-2, discrete d/dmu == 1, < 2 min)", passed,
           f"{sum(r.passed for r in results)}/{len(results)} rows pass; worst {worst.name} "
           f"{worst.max_error:.2e}; {elapsed:.1f}s")
    assert passed


def test_c3_relaxation_limits(record):
    rng = np.random.default_rng(3)
    x = rng.random((4, 3, 16, 16)).astype(np.float32)
    op_out = rng.random((4, 3, 16, 16)).astype(np.float32)
    gate_err = 0.0
    for p in (0.1, 0.9):
        p_raw = Tensor(np.float32(np.log(p / (1 - p))))
        out = gate(Tensor(op_out), Tensor(x), p_raw, lam=1e-4, u=np.full(4, 0.5)).data
        hard = op_out if 0.5 < p else x
        gate_err = max(gate_err, float(np.abs(out - hard).max()))

    # one logit clearly above the rest; the stage must reduce to that op's gated output
    policy = init_policy(1, 1, eta=1e-5, lam=0.05, rng=np.random.default_rng(4))
    stage = policy.sub_policies[0].stages[0]
    best = ops.OP_INDEX["rotate"]
    stage.weights.data[best] = 0.01
    stage.ops[best].mu_raw.data[...] = np.float32(1.2)
    stage.ops[best].p_raw.data[...] = np.float32(0.4)
    seed = 11
    with ad.no_grad():
        mixed = stage_forward(stage, Tensor(x), policy.eta, policy.lam, np.random.default_rng(seed)).data
    # replay the random stream: non-affine candidates draw first, then one u per (candidate, image)
    replay = np.random.default_rng(seed)
    affine = [o.kind for o in stage.ops if o.kind in ops.AFFINE_OPS]
    for o in stage.ops:
        if o.kind not in ops.AFFINE_OPS:
            ops.apply(o.kind, Tensor(x), ad.sigmoid(o.mu_raw), replay)
    u = replay.random((len(stage.ops), x.shape[0]))[affine.index("rotate")]
    single = ops.apply("rotate", Tensor(x), ad.sigmoid(stage.ops[best].mu_raw))
    expected = gate(single, Tensor(x), stage.ops[best].p_raw, policy.lam, u=u).data
    mix_err = float(np.abs(mixed - expected).max())
    top_weight = float(stage.probabilities(policy.eta).max())

    passed = gate_err <= 1e-3 and mix_err <= 1e-4 and top_weight > 1 - 1e-6
    record("C3 relaxation limits (gate lam=1e-4 tol 1e-3; mixture eta=1e-5 tol 1e-4)", passed,
           f"gate err {gate_err:.2e}; mixture err {mix_err:.2e}; argmax weight {top_weight:.8f}")
    assert passed


def _frequencies(stage, eta, subset, draws, seed):
    rng = np.random.default_rng(seed)
    names = [o.kind for o in stage.ops if o.kind in subset]
    counts = dict.fromkeys(names, 0)
    for _ in range(draws):
        counts[sample_operation(stage, eta, rng, subset).kind] += 1
    z = np.array([stage.weights.data[ops.OP_INDEX[n]] for n in names], dtype=np.float64) / eta
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    freq = np.array([counts[n] for n in names]) / draws
    return float(np.abs(freq - probs).max())


def test_c4_sampling_fidelity(record):
    draws = 100_000
    policy = init_policy(1, 1, rng=np.random.default_rng(5))
    stage = policy.sub_policies[0].stages[0]
    stage.weights.data[:] = np.random.default_rng(6).normal(0, 0.05, size=stage.weights.shape)
    err3 = _frequencies(stage, 0.05, ops.OP_NAMES[:3], draws, 7)
    err16 = _frequencies(stage, 0.05, ops.OP_NAMES[:16], draws, 8)

    gate_errs = []
    ones = Tensor(np.ones((draws, 1), dtype=np.float32))
    zeros = Tensor(np.zeros((draws, 1), dtype=np.float32))
    for p in (0.1, 0.37, 0.5, 0.9):
        p_raw = Tensor(np.float32(np.log(p / (1 - p))))
        out = gate(ones, zeros, p_raw, 0.05, np.random.default_rng(int(p * 100)), mode=INFERENCE)
        gate_errs.append(abs(float(out.data.mean()) - p))
    passed = err3 <= 0.01 and err16 <= 0.01 and max(gate_errs) <= 0.01
    record("C4 sampling fidelity (100k draws, abs tol 0.01)", passed,
           f"3-op {err3:.4f}; 16-op {err16:.4f}; gate {max(gate_errs):.4f}")
    assert passed


def test_c5_wgan_gp_sanity(record):
    shape = (3, 8, 8)
    direction = np.full(shape, 1 / np.sqrt(np.prod(shape)), dtype=np.float32)
    rng = np.random.default_rng(9)
    real = rng.random((16,) + shape).astype(np.float32)
    fake = rng.random((16,) + shape).astype(np.float32)
    gp = float(gradient_penalty(LinearCritic(direction), real, fake, rng).item())

    # two distributions that differ only in the mean of one pixel
    n = 64
    base = rng.uniform(0.3, 0.7, size=(2 * n,) + shape).astype(np.float32)
    real, fake = base[:n].copy(), base[n:].copy()
    real[:, 0, 3, 3] = rng.uniform(0.8, 1.0, size=n)
    fake[:, 0, 3, 3] = rng.uniform(0.0, 0.2, size=n)
    net = CriticNet(3, 2, rng=np.random.default_rng(10))
    opt = Adam(net.parameters(), lr=1e-3, betas=(0.0, 0.999))
    crng = np.random.default_rng(11)
    estimates = []
    for _ in range(500):
        opt.zero_grad()
        loss, w_est, _ = wgan_gp_critic_loss(net, Tensor(real), Tensor(fake), 10.0, crng)
        loss.backward()
        opt.step()
        estimates.append(w_est.item())
    early, late = np.mean(estimates[:25]), np.mean(estimates[-25:])
    passed = abs(gp) <= 1e-6 and late > 0 and late > early
    record("C5 WGAN-GP sanity (unit linear critic GP == 0 within 1e-6; separation within 500 steps)", passed,
           f"GP {gp:.2e}; estimate {early:.4f} -> {late:.4f}")
    assert passed


TOY_SEEDS = (0, 1, 2, 3, 4)
TOY_STEPS = 2000
TOY_BATCH = 32


@pytest.fixture(scope="module")
def toy_runs():
    runs = []
    cpu0, wall0 = time.process_time(), time.perf_counter()
    for seed in TOY_SEEDS:
        source, target, truth = make_synthetic(SyntheticSpec("rotated_pair", 20.0, n=256, seed=seed))
        config = SearchConfig(L=1, K=1, seed=seed, max_steps=TOY_STEPS, batch_size=TOY_BATCH)
        policy, history = run_search(config, source, target)
        runs.append((seed, truth, policy, history))
    return runs, time.process_time() - cpu0, time.perf_counter() - wall0


@pytest.mark.slow
def test_c6_toy_policy_recovery(record, toy_runs):
    runs, cpu, wall = toy_runs
    lines, wins = [], 0
    for seed, truth, policy, _ in runs:
        ok = recovered(policy, truth.op, truth.mu, mu_tol=0.07, p_min=0.8)
        wins += ok
        s = stage_summary(policy)
        lines.append(f"seed {seed}: {s['op']} w={s['weight']:.3f} p={s['p']:.3f} mu={s['mu']:.4f} "
                     f"({'ok' if ok else 'miss'})")
    for line in lines:
        print(line)
    passed = wins >= 4 and cpu < 600
    record("C6 toy recovery (rotate argmax, p > 0.8, |mu - 0.8333| <= 0.07, >= 4/5 seeds, < 10 min CPU)",
           passed, f"{wins}/5 seeds; {cpu:.0f}s CPU, {wall:.0f}s wall")
    assert passed


@pytest.mark.slow
def test_c6b_policy_loss_trend(record, toy_runs):
    runs, _, _ = toy_runs
    lowered = 0
    for _, _, _, history in runs:
        tail = len(history) // 10
        first = np.median([r.policy_loss for r in history[:tail]])
        last = np.median([r.policy_loss for r in history[-tail:]])
        lowered += last < first
    passed = lowered >= 4
    record("C6b toy policy-loss trend (median last 10% < first 10%, >= 4/5 seeds)", passed,
           f"{lowered}/5 seeds")
    assert passed


def test_c7_ablation_harness(record):
    source, target, truth = make_synthetic(SyntheticSpec("rotated_pair", 20.0, n=64, seed=0))
    base = SearchConfig(L=1, K=1, seed=0, max_steps=20, batch_size=16)
    start = time.perf_counter()
    rows_l = ablation_grid(base, "L", [1, 2, 4, 8], source, target, (truth.op, truth.mu))
    rows_k = ablation_grid(base, "K", [1, 2, 3, 4], source, target, (truth.op, truth.mu))
    elapsed = time.perf_counter() - start
    for row in rows_l + rows_k:
        print(json.dumps(row.to_dict()))
    passed = ([r.value for r in rows_l] == [1, 2, 4, 8] and [r.value for r in rows_k] == [1, 2, 3, 4]
              and all(r.steps == 20 and np.isfinite(r.final_wasserstein) for r in rows_l + rows_k))
    record("C7 ablation harness (L in {1,2,4,8}, K in {1,2,3,4}, one report row each)", passed,
           f"{len(rows_l) + len(rows_k)} rows in {elapsed:.1f}s")
    assert passed


def test_c8_determinism(record):
    source, target, _ = make_synthetic(SyntheticSpec("rotated_pair", 20.0, n=64, seed=3))
    config = SearchConfig(L=2, K=2, seed=7, max_steps=15, batch_size=16)
    runs = []
    for _ in range(2):
        policy, history = run_search(config, source, target)
        runs.append((policy_io.dumps(policy), [tuple(r.to_dict().values()) for r in history]))
    same_policy = runs[0][0] == runs[1][0]
    same_history = runs[0][1] == runs[1][1]
    other, _ = run_search(SearchConfig(L=2, K=2, seed=8, max_steps=15, batch_size=16), source, target)
    passed = same_policy and same_history and policy_io.dumps(other) != runs[0][0]
    record("C8 determinism (same seed -> identical policy bytes and loss history)", passed,
           f"policy identical {same_policy}; history identical {same_history}")
    assert passed


def _expect(fn, error) -> bool:
    try:
        fn()
    except error:
        return True
    except Exception:
        return False
    return False


def test_c9_formats(record):
    rng = np.random.default_rng(12)
    bundle = DatasetBundle(rng.random((5, 3, 4, 4)).astype(np.float32), rng.integers(0, 3, 5), 3, "b")
    raw = to_bytes(bundle)
    back = from_bytes(raw)
    aug1_ok = to_bytes(back) == raw and np.array_equal(back.images, bundle.images)

    policy = init_policy(3, 2, rng=np.random.default_rng(13))
    for _, t in policy.named_parameters():
        t.data[...] = rng.normal(0, 2, size=t.shape)
    text = policy_io.dumps(policy)
    policy_ok = policy_io.dumps(policy_io.loads(text)) == text

    bad_version = bytearray(raw)
    bad_version[4:8] = (2).to_bytes(4, "little")
    flipped = bytearray(raw)
    flipped[40] ^= 0xFF
    bad_label = to_bytes(DatasetBundle(bundle.images, np.array([0, 1, 2, 0, 1]), 3))
    bad_label = bytearray(bad_label)
    label_at = 28 + 4 * bundle.images.size
    bad_label[label_at:label_at + 4] = (7).to_bytes(4, "little")
    import zlib
    bad_label[-4:] = zlib.crc32(bytes(bad_label[:-4])).to_bytes(4, "little")
    doc = json.loads(text)
    errors = {
        "bad magic": _expect(lambda: from_bytes(b"AUG2" + raw[4:]), BadMagicError),
        "version": _expect(lambda: from_bytes(bytes(bad_version)), VersionError),
        "truncated": _expect(lambda: from_bytes(raw[:-9]), TruncatedPayloadError),
        "checksum": _expect(lambda: from_bytes(bytes(flipped)), ChecksumError),
        "label range": _expect(lambda: from_bytes(bytes(bad_label)), LabelRangeError),
        "policy unknown field": _expect(lambda: policy_io.from_dict({**doc, "extra": 1}),
                                        policy_io.PolicyFormatError),
        "policy version": _expect(lambda: policy_io.from_dict({**doc, "version": 99}),
                                  policy_io.PolicyFormatError),
        "policy bad op": _expect(
            lambda: policy_io.from_dict({**doc, "op_table": [{**doc["op_table"][0], "name": "warp"}]
                                         + doc["op_table"][1:]}), policy_io.PolicyFormatError),
    }
    passed = aug1_ok and policy_ok and all(errors.values())
    record("C9 formats (AUG1 and policy JSON round-trip bitwise; structured errors)", passed,
           f"AUG1 {aug1_ok}; policy {policy_ok}; errors {errors}")
    assert passed
