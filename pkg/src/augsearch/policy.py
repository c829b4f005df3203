"""Learnable augmentation policies.

A :class:`Policy` holds ``L`` sub-policies, each a chain of ``K`` stages.  A
stage keeps one mixture logit and one (probability, magnitude) pair per
candidate operation.  In search mode a stage outputs the softmax-weighted sum
of all relaxed-gated candidates; in inference mode it samples one candidate
and applies it with a hard Bernoulli gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import operations as ops
from .autodiff import Tensor

SEARCH = "search"
INFERENCE = "inference"
_U_EPS = 1e-7


@dataclass
class OpParams:
    kind: str
    p_raw: Tensor
    mu_raw: Tensor

    @property
    def p(self) -> float:
        return float(ad.sigmoid(self.p_raw.data).data)

    @property
    def mu(self) -> float:
        return float(ad.sigmoid(self.mu_raw.data).data)


@dataclass
class Stage:
    weights: Tensor
    ops: list[OpParams]

    @property
    def op_names(self) -> tuple[str, ...]:
        return tuple(o.kind for o in self.ops)

    def probabilities(self, eta: float) -> np.ndarray:
        """Softmax of the mixture logits at temperature ``eta`` (float64)."""
        z = self.weights.data.astype(np.float64) / eta
        e = np.exp(z - z.max())
        return e / e.sum()


@dataclass
class SubPolicy:
    stages: list[Stage]


@dataclass
class Policy:
    sub_policies: list[SubPolicy]
    lam: float = 0.05
    eta: float = 0.05
    mode: str = SEARCH
    op_names: tuple[str, ...] = field(default=ops.OP_NAMES)

    def __post_init__(self):
        if self.lam <= 0 or self.eta <= 0:
            raise ValueError(f"temperatures must be positive, got lambda={self.lam}, eta={self.eta}")
        if not self.sub_policies or not self.sub_policies[0].stages:
            raise ValueError("a policy needs L >= 1 sub-policies of K >= 1 stages")

    @property
    def L(self) -> int:
        return len(self.sub_policies)

    @property
    def K(self) -> int:
        return len(self.sub_policies[0].stages)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, sub in enumerate(self.sub_policies):
            for k, stage in enumerate(sub.stages):
                prefix = f"sub{i}.stage{k}"
                yield f"{prefix}.weights", stage.weights
                for op in stage.ops:
                    yield f"{prefix}.{op.kind}.p_raw", op.p_raw
                    yield f"{prefix}.{op.kind}.mu_raw", op.mu_raw

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def set_parameter(self, name: str, value: Tensor) -> None:
        sub, stage, *rest = name.split(".")
        st = self.sub_policies[int(sub[3:])].stages[int(stage[5:])]
        if rest == ["weights"]:
            st.weights = value
            return
        kind, attr = rest
        setattr(st.ops[st.op_names.index(kind)], attr, value)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def with_mode(self, mode: str) -> Policy:
        if mode not in (SEARCH, INFERENCE):
            raise ValueError(f"mode must be {SEARCH!r} or {INFERENCE!r}")
        return Policy(self.sub_policies, self.lam, self.eta, mode, self.op_names)


def init_policy(L: int = 10, K: int = 2, eta: float = 0.05, lam: float = 0.05,
                rng: np.random.Generator | None = None, op_names=ops.OP_NAMES) -> Policy:
    """Fresh policy: near-uniform mixtures and p, mu close to 0.5."""
    if L < 1 or K < 1:
        raise ValueError(f"L and K must be >= 1, got L={L}, K={K}")
    rng = rng if rng is not None else np.random.default_rng()
    subs = []
    for _ in range(L):
        stages = []
        for _ in range(K):
            w = Tensor(rng.uniform(-1e-3, 1e-3, size=len(op_names)), requires_grad=True)
            params = [
                OpParams(name,
                         Tensor(np.float32(rng.normal(0.0, 0.01)), requires_grad=True),
                         Tensor(np.float32(rng.normal(0.0, 0.01)), requires_grad=True))
                for name in op_names
            ]
            stages.append(Stage(w, params))
        subs.append(SubPolicy(stages))
    return Policy(subs, lam=lam, eta=eta, op_names=tuple(op_names))


def gate(op_out: Tensor, x: Tensor, p_raw: Tensor, lam: float, rng: np.random.Generator | None = None,
         mode: str = SEARCH, u: np.ndarray | None = None) -> Tensor:
    """Blend ``op_out`` and ``x`` per image with a (relaxed) Bernoulli draw of ``sigmoid(p_raw)``."""
    if lam <= 0:
        raise ValueError(f"relaxation temperature must be positive, got {lam}")
    if op_out.shape != x.shape:
        raise ad.ShapeError(f"gate: op output {op_out.shape} and input {x.shape} differ")
    n = x.shape[0]
    bshape = (n,) + (1,) * (x.ndim - 1)
    if u is None:
        u = (rng if rng is not None else np.random.default_rng()).random(n)
    u = np.clip(np.asarray(u, dtype=np.float64), _U_EPS, 1 - _U_EPS).reshape(bshape)
    p_raw = p_raw if isinstance(p_raw, Tensor) else Tensor(p_raw)
    if mode == INFERENCE:
        p = float(ad.sigmoid(p_raw.data).data)
        return ad.where(u < p, op_out, x)
    # log(p / (1 - p)) is p_raw itself when p = sigmoid(p_raw)
    noise = Tensor(np.log(u / (1 - u)).astype(p_raw.dtype))
    b = ad.sigmoid((p_raw + noise) / lam)
    return b * op_out + (1.0 - b) * x


def _candidates(stage: Stage, op_subset) -> list[int]:
    if op_subset is None:
        return list(range(len(stage.ops)))
    return [i for i, o in enumerate(stage.ops) if o.kind in op_subset]


def sample_operation(stage: Stage, eta: float, rng: np.random.Generator, op_subset=None) -> OpParams:
    """Draw one candidate from the categorical distribution softmax(weights / eta)."""
    idx = _candidates(stage, op_subset)
    z = stage.weights.data[idx].astype(np.float64) / eta
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    return stage.ops[idx[int(rng.choice(len(idx), p=probs))]]


def stage_forward(stage: Stage, x: Tensor, eta: float, lam: float, rng: np.random.Generator,
                  mode: str = SEARCH, op_subset=None, trace: list | None = None) -> Tensor:
    """One stage of a sub-policy.

    ``op_subset`` restricts the mixture to the named candidates (softmax over
    their logits only); ``trace`` collects ``(op, applied_mask)`` in
    inference mode.
    """
    if mode == INFERENCE:
        chosen = sample_operation(stage, eta, rng, op_subset)
        out = ops.apply(chosen.kind, x, ad.sigmoid(chosen.mu_raw), rng)
        u = rng.random(x.shape[0])
        if trace is not None:
            trace.append((chosen.kind, u < chosen.p))
        return gate(out, x, chosen.p_raw, lam, mode=INFERENCE, u=u)

    # Every candidate is evaluated; affine ones share a single resampling
    # pass.  The gated mixture sum_n w_n (b_n o_n + (1 - b_n) x) is formed as
    # x + sum_n w_n b_n (o_n - x), which is the same since sum_n w_n = 1.
    idx = _candidates(stage, op_subset)
    logits = stage.weights if op_subset is None else stage.weights[np.array(idx)]
    weights = ad.softmax(logits, eta)
    affine = [j for j, i in enumerate(idx) if stage.ops[i].kind in ops.AFFINE_OPS]
    others = [j for j, i in enumerate(idx) if stage.ops[i].kind not in ops.AFFINE_OPS]
    pieces = []
    if affine:
        chosen = [stage.ops[idx[j]] for j in affine]
        pieces.append(ops.apply_affine_many([o.kind for o in chosen], x, [ad.sigmoid(o.mu_raw) for o in chosen]))
    for j in others:
        op = stage.ops[idx[j]]
        pieces.append(ops.apply(op.kind, x, ad.sigmoid(op.mu_raw), rng).reshape((1,) + x.shape))
    order = affine + others
    outs = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)

    n = x.shape[0]
    u = np.clip(rng.random((len(order), n)), _U_EPS, 1 - _U_EPS)
    p_raw = ad.stack([stage.ops[idx[j]].p_raw for j in order]).reshape(-1, 1)
    b = ad.sigmoid((p_raw + Tensor(np.log(u / (1 - u)).astype(p_raw.dtype))) / lam)
    coef = weights[np.array(order)].reshape(-1, 1) * b
    return ad.mixture(x, outs, coef)


def subpolicy_forward(sub: SubPolicy, x: Tensor, eta: float, lam: float, rng: np.random.Generator,
                      mode: str = SEARCH, op_subset=None, trace: list | None = None) -> Tensor:
    for stage in sub.stages:
        x = stage_forward(stage, x, eta, lam, rng, mode, op_subset, trace)
    return ad.clamp01(x)


def chunk_assignment(n: int, chunk_size: int, num_sub_policies: int, rng: np.random.Generator) -> np.ndarray:
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    return rng.integers(0, num_sub_policies, size=math.ceil(n / chunk_size))


def policy_forward(policy: Policy, batch, chunk_size: int = 8, rng: np.random.Generator | None = None,
                   traces: list | None = None) -> Tensor:
    """Augment ``batch`` chunk by chunk, each chunk with a uniformly drawn sub-policy.

    In search mode chunks that drew the same sub-policy are evaluated together
    (one mixture pass per distinct sub-policy).  ``traces``, when given,
    receives one ``(sub_policy_index, [(op, applied), ...])`` record per image
    in inference mode.
    """
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    rng = rng if rng is not None else np.random.default_rng()
    n = batch.shape[0]
    if n < 1:
        raise ValueError("policy_forward needs a non-empty batch")
    assign = chunk_assignment(n, chunk_size, policy.L, rng)
    bounds = [(c * chunk_size, min(n, (c + 1) * chunk_size)) for c in range(len(assign))]

    if policy.mode == INFERENCE:
        pieces = []
        with ad.no_grad():
            for (lo, hi), l in zip(bounds, assign):
                trace: list = []
                pieces.append(subpolicy_forward(policy.sub_policies[l], batch[lo:hi], policy.eta, policy.lam,
                                                rng, INFERENCE, trace=trace))
                if traces is not None:
                    for i in range(hi - lo):
                        traces.append((int(l), [(kind, bool(mask[i])) for kind, mask in trace]))
            return pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)

    order, pieces = [], []
    for l in np.unique(assign):
        rows = np.concatenate([np.arange(*bounds[c]) for c in np.flatnonzero(assign == l)])
        order.append(rows)
        sub_batch = batch if len(rows) == n else batch[rows]
        pieces.append(subpolicy_forward(policy.sub_policies[l], sub_batch, policy.eta, policy.lam, rng, SEARCH))
    if len(pieces) == 1 and np.array_equal(order[0], np.arange(n)):
        return pieces[0]
    inverse = np.argsort(np.concatenate(order))
    return ad.concat(pieces, axis=0)[inverse]


def augment(policy: Policy, images: np.ndarray, chunk_size: int = 16, seed: int = 0,
            traces: list | None = None) -> np.ndarray:
    """Apply ``policy`` in inference mode to a numpy batch; deterministic per ``seed``."""
    if len(images) == 0:
        return np.array(images, dtype=np.float32, copy=True)
    out = policy_forward(policy.with_mode(INFERENCE), Tensor(np.asarray(images, dtype=np.float32)),
                         chunk_size, np.random.default_rng(seed), traces)
    return out.data
