"""Central finite-difference checks of analytic gradients.

A check projects the output of ``fn`` onto a fixed random direction, so one
backward pass gives the full vector-Jacobian product, then compares it with
central differences of the same projection.  The reported error is
``max|analytic - numeric| / max|numeric|`` per input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import operations as ops
from .autodiff import Tensor

DEFAULT_STEP = 1e-3
DEFAULT_TOL = 1e-2


@dataclass
class CheckResult:
    name: str
    errors: dict[str, float]
    tol: float
    exact: dict[str, bool] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol and all(self.exact.values())


def _projection(out: Tensor, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(out.shape)


def _projected(fn, inputs: dict[str, np.ndarray], r: np.ndarray) -> float:
    with ad.no_grad():
        out = fn(**{k: Tensor(v, dtype=v.dtype) for k, v in inputs.items()})
    return float(np.sum(out.data.astype(np.float64) * r))


def numeric_gradient(fn, inputs: dict[str, np.ndarray], name: str, r: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    base = inputs[name]
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus.reshape(-1)[i] += h
        minus.reshape(-1)[i] -= h
        fp = _projected(fn, {**inputs, name: plus}, r)
        fm = _projected(fn, {**inputs, name: minus}, r)
        flat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_gradients(fn, inputs: dict[str, np.ndarray], seed: int = 0):
    tensors = {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in inputs.items()}
    out = fn(**tensors)
    r = _projection(out, seed)
    (out * Tensor(r, dtype=out.dtype)).sum().backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()}
    return grads, r


def check(fn: Callable[..., Tensor], inputs: dict[str, np.ndarray], name: str = "check",
          wrt: tuple[str, ...] | None = None, h: float = DEFAULT_STEP, tol: float = DEFAULT_TOL,
          seed: int = 0) -> CheckResult:
    """Compare analytic and central-difference gradients of ``fn`` w.r.t. ``wrt``."""
    # float32 values, evaluated in float64 so that round-off stays far below h
    inputs = {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in inputs.items()}
    grads, r = analytic_gradients(fn, inputs, seed)
    errors = {}
    for key in wrt or tuple(inputs):
        num = numeric_gradient(fn, inputs, key, r, h)
        scale = max(np.abs(num).max(), np.abs(grads[key]).max(), 1e-8)
        errors[key] = float(np.abs(grads[key] - num).max() / scale)
    return CheckResult(name, errors, tol)


def mu_jacobian(kind: str, x: np.ndarray, mu: float, seed: int = 0) -> np.ndarray:
    """d(out_i)/d(mu) for every output element, one backward pass per element."""
    mut = Tensor(np.float32(mu), requires_grad=True)
    out = ops.apply(kind, Tensor(x), mut, np.random.default_rng(seed))
    jac = np.empty(out.size)
    onehot = np.zeros(out.shape, dtype=out.dtype)
    for i in range(out.size):
        onehot.reshape(-1)[i] = 1
        mut.grad = None
        out.backward(onehot)
        jac[i] = mut.grad
        onehot.reshape(-1)[i] = 0
    return jac


# ---------------------------------------------------------------------------
# the suite run by the command-line tool and the acceptance tests


def _safe_image(rng, shape=(2, 3, 6, 6)) -> np.ndarray:
    return rng.uniform(0.25, 0.75, size=shape).astype(np.float32)


def input_vjp(kind: str, x: np.ndarray, mu: float, seed: int = 0):
    """(analytic VJP w.r.t. x, the projection used) for one operation."""
    grads, r = analytic_gradients(lambda x: ops.apply(kind, x, Tensor(np.float32(mu)), np.random.default_rng(seed)),
                                  {"x": x}, seed)
    return grads["x"], r


def _frozen_input_check(kind: str, x: np.ndarray, mu: float, seed: int) -> tuple[str, bool]:
    """Exact backward rules of operations whose statistics are held constant."""
    g, r = input_vjp(kind, x, mu, seed)
    if kind == "auto_contrast":
        lo = x.min(axis=(2, 3), keepdims=True)
        hi = x.max(axis=(2, 3), keepdims=True)
        expected = r / (hi.astype(np.float64) - lo)
        return "d_out/d_x == 1/(max-min)", bool(np.allclose(g, expected, rtol=1e-5, atol=0))
    return "d_out/d_x == identity", bool(np.allclose(g, r, rtol=1e-6, atol=0))


FROZEN_INPUT_OPS = ("posterize", "auto_contrast", "equalize")


def op_checks(kind: str, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x = _safe_image(rng)
    spec = ops.SPEC_BY_NAME[kind]
    mu = np.float32(rng.uniform(0.3, 0.45) if kind in ops.COLOR_OPS else rng.uniform(0.35, 0.65))
    res = CheckResult(kind, {}, DEFAULT_TOL)
    if spec.magnitude_class == ops.DISCRETE:
        res.exact["d_out/d_mu == 1"] = bool(np.all(mu_jacobian(kind, x, float(mu), seed) == 1.0))
    if kind in FROZEN_INPUT_OPS:
        label, ok = _frozen_input_check(kind, x, float(mu), seed)
        res.exact[label] = ok
        return [res]
    if kind == "solarize":
        # keep pixels away from the threshold so the branch is stable under +-h
        thr = 1.0 - mu
        x = np.where(np.abs(x - thr) < 0.01, x + 0.02, x).astype(np.float32)

    def f(x, mu, kind=kind):
        return ops.apply(kind, x, mu, np.random.default_rng(seed))

    wrt = ("x", "mu") if spec.magnitude_class == ops.CONTINUOUS else ("x",)
    res.errors.update(check(f, {"x": x, "mu": mu}, kind, wrt=wrt, seed=seed).errors)
    return [res]


def gate_check(seed: int = 0) -> CheckResult:
    from .policy import gate

    rng = np.random.default_rng(seed)
    x = _safe_image(rng)
    o = _safe_image(rng)
    u = np.random.default_rng(seed + 1).uniform(0.3, 0.7, size=(x.shape[0],))

    def f(op_out, x, p_raw):
        return gate(op_out, x, p_raw, 0.5, u=u)

    return check(f, {"op_out": o, "x": x, "p_raw": np.float32(0.3)}, "gate", seed=seed)


def _smooth_stage_policy(seed: int, k: int):
    from .policy import init_policy

    rng = np.random.default_rng(seed)
    policy = init_policy(1, k, eta=0.5, lam=0.5, rng=rng)
    for stage in policy.sub_policies[0].stages:
        stage.weights.data[:] = rng.normal(0, 0.3, size=stage.weights.shape).astype(np.float32)
        for op in stage.ops:
            op.p_raw.data[...] = np.float32(rng.normal(0, 0.5))
            op.mu_raw.data[...] = np.float32(rng.normal(0, 0.3))
    return policy


SMOOTH_OPS = ("shear_x", "translate_y", "rotate", "contrast", "color", "brightness", "invert", "sample_pairing")


def _bind(model, values: dict[str, Tensor]) -> None:
    for name, value in values.items():
        model.set_parameter(name, value)


def stage_check(seed: int = 0, k: int = 1) -> CheckResult:
    """Gradient of a stage mixture (k=1) or a k-stage chain w.r.t. its parameters.

    A single stage mixes all candidates; magnitudes of piecewise-constant
    operations are excluded because their straight-through gradient is not a
    finite difference by construction.  Longer chains use only the smooth
    candidates, since later stages would otherwise pass straight-through input
    gradients back to earlier ones.
    """
    from .policy import subpolicy_forward

    policy = _smooth_stage_policy(seed, k)
    sub = policy.sub_policies[0]
    x = _safe_image(np.random.default_rng(seed))
    base = {n: t.data.copy() for n, t in policy.named_parameters()}
    subset = None if k == 1 else SMOOTH_OPS

    def differentiable(name: str) -> bool:
        if name.endswith(".weights") or name.endswith(".p_raw"):
            return subset is None or name.split(".")[2] in subset
        kind = name.split(".")[2]
        return ops.SPEC_BY_NAME[kind].magnitude_class == ops.CONTINUOUS and (subset is None or kind in subset)

    def f(x, **params):
        _bind(policy, params)
        return subpolicy_forward(sub, x, policy.eta, policy.lam, np.random.default_rng(seed),
                                 mode="search", op_subset=subset)

    wrt = tuple(n for n in base if differentiable(n))
    res = check(f, {"x": x, **base}, "stage" if k == 1 else f"subpolicy_k{k}", wrt=wrt, seed=seed)
    _bind(policy, {n: Tensor(v, requires_grad=True) for n, v in base.items()})
    return res


def critic_check(seed: int = 0) -> CheckResult:
    from .objective import CriticNet

    net = CriticNet(in_channels=3, num_classes=2, rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 7)
    x = rng.uniform(0, 1, size=(2, 3, 8, 8)).astype(np.float32)
    base = {n: p.data.copy() for n, p in net.named_parameters()}
    wrt = ("x", "conv1.weight", "conv3.bias", "head1.weight", "head2.bias", "cls.weight")

    def f(x, **params):
        _bind(net, params)
        scores, logits = net.scores(x)
        return ad.concat([scores.reshape(-1, 1), logits], axis=1)

    return check(f, {"x": x, **base}, "critic", wrt=wrt, seed=seed)


CHECK_NAMES = ops.OP_NAMES + ("gate", "stage", "subpolicy", "critic")


def run_suite(only: str | None = None, seed: int = 0) -> list[CheckResult]:
    if only is not None and only not in CHECK_NAMES:
        raise ValueError(f"unknown check {only!r}; valid: {', '.join(CHECK_NAMES)}")
    results: list[CheckResult] = []
    for kind in ops.OP_NAMES:
        if only in (None, kind):
            results.extend(op_checks(kind, seed))
    if only in (None, "gate"):
        results.append(gate_check(seed))
    if only in (None, "stage"):
        results.append(stage_check(seed, k=1))
    if only in (None, "subpolicy"):
        results.append(stage_check(seed, k=2))
    if only in (None, "critic"):
        results.append(critic_check(seed))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<16} {'max rel err':>12}  {'exact':<28} status"]
    for r in results:
        exact = ", ".join(f"{k}={'yes' if v else 'NO'}" for k, v in r.exact.items()) or "-"
        lines.append(f"{r.name:<16} {r.max_error:>12.3e}  {exact:<28} {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
