"""The policy search loop, checkpoints and ablation sweeps.

Each step draws a source batch B and a disjoint real batch B', augments B
with the relaxed policy, takes one critic step on (real=B', fake=A detached)
and one policy step on ``-mean D(A) + eps * classification loss``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import DatasetBundle, disjoint_partner, epoch_order, steps_per_epoch
from .objective import Adam, CriticNet, LossReport, critic_terms, cross_entropy, policy_loss
from .operations import OP_NAMES
from .policy import INFERENCE, Policy, init_policy, policy_forward

log = logging.getLogger(__name__)

MAX_NON_FINITE = 10


class SearchAborted(RuntimeError):
    """Raised after too many consecutive non-finite losses."""


@dataclass
class SearchConfig:
    epochs: int = 20
    L: int = 10
    K: int = 2
    lam: float = 0.05
    eta: float = 0.05
    lr: float = 1e-3
    betas: tuple[float, float] = (0.0, 0.999)
    eps_cls: float = 0.1
    gp_coef: float = 10.0
    chunk_size: int = 8
    batch_size: int = 64
    seed: int = 0
    critic_steps: int = 1
    max_steps: int | None = None
    op_names: tuple[str, ...] = OP_NAMES

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.op_names = tuple(self.op_names)
        if self.epochs < 1 or self.L < 1 or self.K < 1 or self.critic_steps < 1:
            raise ValueError("epochs, L, K and critic_steps must all be >= 1")
        if self.lam <= 0 or self.eta <= 0:
            raise ValueError("temperatures lam and eta must be positive")
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        unknown = set(self.op_names) - set(OP_NAMES)
        if unknown or not self.op_names:
            raise ValueError(f"unknown operations {sorted(unknown)}; valid: {', '.join(OP_NAMES)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["op_names"] = list(self.op_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SearchConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)

    def total_steps(self, n: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return self.epochs * steps_per_epoch(n, self.batch_size)


@dataclass
class SearchState:
    policy: Policy
    critic: CriticNet
    policy_opt: Adam
    critic_opt: Adam
    rng: np.random.Generator
    step: int = 0
    history: list[LossReport] = field(default_factory=list)
    non_finite_streak: int = 0


def init_state(config: SearchConfig, dataset: DatasetBundle) -> SearchState:
    """Fresh policy, critic and optimizers, all seeded from ``config.seed``."""
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    policy = init_policy(config.L, config.K, eta=config.eta, lam=config.lam,
                         rng=np.random.default_rng(seeds[0]), op_names=config.op_names)
    critic = CriticNet(in_channels=dataset.shape[0], num_classes=dataset.class_count,
                       rng=np.random.default_rng(seeds[1]))
    return SearchState(
        policy=policy,
        critic=critic,
        policy_opt=Adam(policy.parameters(), config.lr, config.betas),
        critic_opt=Adam(critic.parameters(), config.lr, config.betas),
        rng=np.random.default_rng(seeds[2]),
    )


@contextmanager
def _frozen(params: Sequence[ad.Tensor]):
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def _check_dataset(config: SearchConfig, dataset: DatasetBundle, target: DatasetBundle | None) -> None:
    if len(dataset) < 2 * config.batch_size:
        raise ValueError(f"dataset too small: {len(dataset)} samples, need >= 2 * batch_size = {2 * config.batch_size}")
    if target is not None:
        if target.shape != dataset.shape:
            raise ValueError(f"target image shape {target.shape} differs from source {dataset.shape}")
        if len(target) < 2 * config.batch_size:
            raise ValueError(f"target set too small: {len(target)} samples, need >= {2 * config.batch_size}")
        if target.class_count != dataset.class_count:
            raise ValueError("source and target disagree on class_count")


def search_step(config: SearchConfig, state: SearchState, dataset: DatasetBundle,
                target: DatasetBundle | None = None) -> LossReport:
    """One critic update followed by one policy update."""
    real_pool = dataset if target is None else target
    spe = steps_per_epoch(len(dataset), config.batch_size)
    epoch, b = divmod(state.step, spe)
    order = epoch_order(len(dataset), config.seed, epoch)
    idx = order[b * config.batch_size:(b + 1) * config.batch_size]
    # B' avoids the indices of B; for a paired target set this also keeps an
    # image's own transformed copy out of the real batch
    idx_real = disjoint_partner(len(real_pool), idx, config.batch_size, state.rng)
    x, y = dataset.images[idx], dataset.labels[idx]
    x_real, y_real = real_pool.images[idx_real], real_pool.labels[idx_real]
    policy, critic = state.policy, state.critic

    augmented = policy_forward(policy, x, config.chunk_size, state.rng)
    fake = ad.stop_grad(augmented)
    real = ad.Tensor(x_real)

    for _ in range(config.critic_steps):
        state.critic_opt.zero_grad()
        c_loss, w_est, gp, logits_real, logits_fake = critic_terms(critic, real, fake, config.gp_coef, state.rng)
        c_total = c_loss + config.eps_cls * (cross_entropy(logits_fake, y) + cross_entropy(logits_real, y_real))
        critic_finite = bool(np.isfinite(c_total.item()))
        if critic_finite:
            c_total.backward()
            state.critic_opt.step()

    policy.zero_grad()
    with _frozen(critic.parameters()):
        # the real-batch classification term is constant for the policy, so
        # the logits from the critic step are reused as-is
        p_loss, cls = policy_loss(critic, augmented, y, y_real, ad.stop_grad(logits_real), config.eps_cls)
        policy_finite = bool(np.isfinite(p_loss.item()))
        if policy_finite:
            p_loss.backward()
            state.policy_opt.step()

    report = LossReport(
        wasserstein_estimate=w_est.item(),
        gradient_penalty=gp.item(),
        cls_loss=cls.item(),
        policy_loss=p_loss.item(),
        critic_loss=c_loss.item(),
    )
    state.step += 1
    state.history.append(report)
    if critic_finite and policy_finite:
        state.non_finite_streak = 0
    else:
        state.non_finite_streak += 1
        log.warning("step %d: non-finite loss (%s), updates skipped", state.step, report.to_dict())
        if state.non_finite_streak >= MAX_NON_FINITE:
            raise SearchAborted(
                f"aborting after {state.non_finite_streak} consecutive non-finite losses at step {state.step}; "
                f"last report {report.to_dict()}; skipped Adam steps: policy {state.policy_opt.skipped}, "
                f"critic {state.critic_opt.skipped}")
    return report


def run_search(config: SearchConfig, dataset: DatasetBundle, target: DatasetBundle | None = None, *,
               state: SearchState | None = None,
               on_step: Callable[[int, LossReport], None] | None = None) -> tuple[Policy, list[LossReport]]:
    """Search a policy that maps ``dataset`` onto ``target`` (``dataset`` itself when omitted).

    Passing a ``state`` (fresh from :func:`init_state` or restored from a
    checkpoint) resumes from its step counter; the state is updated in place.
    Returns the policy in inference mode and the full loss history.
    """
    _check_dataset(config, dataset, target)
    state = state if state is not None else init_state(config, dataset)
    total = config.total_steps(len(dataset))
    log.info("search: %d steps, L=%d K=%d batch=%d", total, config.L, config.K, config.batch_size)
    while state.step < total:
        report = search_step(config, state, dataset, target)
        if on_step is not None:
            on_step(state.step, report)
    return state.policy.with_mode(INFERENCE), state.history


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"AUGCKPT1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _state_arrays(state: SearchState) -> dict[str, np.ndarray]:
    arrays = {f"policy/{n}": t.data for n, t in state.policy.named_parameters()}
    arrays.update({f"critic/{n}": t.data for n, t in state.critic.named_parameters()})
    arrays.update({f"policy_opt/{k}": v for k, v in state.policy_opt.state_arrays().items()})
    arrays.update({f"critic_opt/{k}": v for k, v in state.critic_opt.state_arrays().items()})
    return arrays


def checkpoint_bytes(state: SearchState, config: SearchConfig) -> bytes:
    arrays = _state_arrays(state)
    manifest = [[name, arr.dtype.str, list(arr.shape)] for name, arr in arrays.items()]
    header = {
        "config": config.to_dict(),
        "step": state.step,
        "non_finite_streak": state.non_finite_streak,
        "optimizers": {"policy": [state.policy_opt.t, state.policy_opt.skipped],
                       "critic": [state.critic_opt.t, state.critic_opt.skipped]},
        "rng": state.rng.bit_generator.state,
        "history": [r.to_dict() for r in state.history],
        "arrays": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(a).tobytes() for a in arrays.values())
    out = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head + body
    return out + struct.pack("<I", zlib.crc32(out))


def save_checkpoint(state: SearchState, config: SearchConfig, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state, config))


def restore_bytes(raw: bytes) -> tuple[SearchState, SearchConfig]:
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {raw[:len(CKPT_MAGIC)]!r}")
    if len(raw) < len(CKPT_MAGIC) + 12:
        raise CheckpointError("corrupt checkpoint: truncated header")
    version, head_len = struct.unpack_from("<II", raw, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    (stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored:
        raise CheckpointError("corrupt checkpoint: checksum mismatch")
    start = len(CKPT_MAGIC) + 8
    header = json.loads(raw[start:start + head_len])
    config = SearchConfig.from_dict({**header["config"], "betas": tuple(header["config"]["betas"])})
    offset = start + head_len
    arrays = {}
    for name, dtype, shape in header["arrays"]:
        dt = np.dtype(dtype)
        count = math.prod(shape)
        arrays[name] = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(shape).copy()
        offset += count * dt.itemsize
    if offset != len(raw) - 4:
        raise CheckpointError("corrupt checkpoint: payload size disagrees with manifest")

    n_classes = arrays["critic/cls.bias"].shape[0]
    in_channels = arrays["critic/conv1.weight"].shape[1]
    policy = init_policy(config.L, config.K, config.eta, config.lam, np.random.default_rng(0), config.op_names)
    for name, t in policy.named_parameters():
        t.data[...] = arrays[f"policy/{name}"]
    critic = CriticNet(in_channels, n_classes, rng=np.random.default_rng(0))
    critic.load_arrays({k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("critic/")})
    p_opt = Adam(policy.parameters(), config.lr, config.betas)
    c_opt = Adam(critic.parameters(), config.lr, config.betas)
    p_opt.load_state(*header["optimizers"]["policy"],
                     {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("policy_opt/")})
    c_opt.load_state(*header["optimizers"]["critic"],
                     {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("critic_opt/")})
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    state = SearchState(policy, critic, p_opt, c_opt, rng, header["step"],
                        [LossReport(**r) for r in header["history"]], header["non_finite_streak"])
    return state, config


def restore(path) -> tuple[SearchState, SearchConfig]:
    return restore_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# recovery check and ablations

def stage_summary(policy: Policy, sub: int = 0, stage: int = 0) -> dict:
    st = policy.sub_policies[sub].stages[stage]
    probs = st.probabilities(policy.eta)
    best = int(np.argmax(probs))
    op = st.ops[best]
    return {"op": op.kind, "weight": float(probs[best]), "p": op.p, "mu": op.mu}


def recovered(policy: Policy, op: str, mu: float, mu_tol: float = 0.07, p_min: float = 0.8) -> bool:
    """True if some stage picks ``op`` as its argmax with p > p_min and |mu - mu*| <= mu_tol."""
    for i, sub in enumerate(policy.sub_policies):
        for k in range(len(sub.stages)):
            s = stage_summary(policy, i, k)
            if s["op"] == op and s["p"] > p_min and abs(s["mu"] - mu) <= mu_tol:
                return True
    return False


@dataclass
class AblationRow:
    axis: str
    value: int
    steps: int
    final_wasserstein: float
    recovered: bool | None

    def to_dict(self) -> dict:
        return asdict(self)


def ablation_grid(config: SearchConfig, axis: str, values: Sequence[int], dataset: DatasetBundle,
                  target: DatasetBundle | None = None, truth: tuple[str, float] | None = None) -> list[AblationRow]:
    """Run one search per value of ``axis`` ("L" or "K") and report each.

    ``final_wasserstein`` is the mean critic estimate over the last 10% of
    steps; ``recovered`` applies :func:`recovered` when ``truth`` is given.
    """
    if axis not in ("L", "K"):
        raise ValueError(f"axis must be 'L' or 'K', got {axis!r}")
    if not values:
        raise ValueError("ablation needs at least one value")
    rows = []
    for v in values:
        cfg = SearchConfig.from_dict({**config.to_dict(), axis: int(v)})
        policy, history = run_search(cfg, dataset, target)
        tail = history[-max(1, len(history) // 10):]
        w = float(np.mean([r.wasserstein_estimate for r in tail]))
        rows.append(AblationRow(axis, int(v), len(history), w,
                                None if truth is None else recovered(policy, *truth)))
        log.info("ablation %s=%d: final wasserstein %.4f", axis, v, w)
    ws = [r.final_wasserstein for r in rows]
    trend = "decreasing" if all(a >= b for a, b in zip(ws, ws[1:])) else "not monotone"
    log.info("ablation over %s: final wasserstein %s (%s)", axis, [round(w, 4) for w in ws], trend)
    return rows
