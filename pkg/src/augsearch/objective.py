"""Adversarial density matching: critic network, losses and the Adam optimizer."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GP_EPS = 1e-12


@dataclass
class LossReport:
    wasserstein_estimate: float
    gradient_penalty: float
    cls_loss: float
    policy_loss: float
    critic_loss: float

    def to_dict(self) -> dict:
        return asdict(self)


class CriticNet:
    """Small conv backbone shared by a perceptron critic head and a linear classifier head.

    Three 3x3 stride-2 convolutions with ReLU, global average pooling, then
    ``critic: 64 -> 64 -> 1`` and ``classifier: 64 -> num_classes``.
    """

    def __init__(self, in_channels: int = 3, num_classes: int = 10, widths=(16, 32, 64), hidden: int = 64,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.hidden = hidden
        self.params: dict[str, Tensor] = {}
        c = in_channels
        for i, f in enumerate(self.widths, start=1):
            bound = math.sqrt(6.0 / (c * 9))
            self.params[f"conv{i}.weight"] = _param(rng.uniform(-bound, bound, size=(f, c, 3, 3)))
            self.params[f"conv{i}.bias"] = _param(np.zeros(f))
            c = f
        self._linear("head1", c, hidden, rng, relu=True)
        self._linear("head2", hidden, 1, rng)
        self._linear("cls", c, num_classes, rng)

    def _linear(self, name, fan_in, fan_out, rng, relu=False):
        bound = math.sqrt((6.0 if relu else 3.0) / fan_in)
        self.params[f"{name}.weight"] = _param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.params[f"{name}.bias"] = _param(np.zeros(fan_out))

    # -- parameter plumbing ---------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_parameter(self, name: str, value: Tensor) -> None:
        if name not in self.params:
            raise KeyError(name)
        self.params[name] = value

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            self.params[name] = _param(arr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ---------------------------------------------------------------
    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ad.ShapeError(f"critic expects [N, {self.in_channels}, H, W], got {x.shape}")

    def features(self, x) -> tuple[Tensor, list[np.ndarray]]:
        """Pooled backbone features and the ReLU masks of each conv block."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        masks = []
        h = x
        for i in range(1, len(self.widths) + 1):
            a = ad.conv2d(h, self.params[f"conv{i}.weight"], stride=2, padding=1)
            a = a + self.params[f"conv{i}.bias"].reshape(1, -1, 1, 1)
            masks.append(a.data > 0)
            h = ad.relu(a)
        return h.mean(axis=(2, 3)), masks

    def heads(self, f: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        z = ad.relu(f @ p["head1.weight"] + p["head1.bias"])
        scores = (z @ p["head2.weight"] + p["head2.bias"]).reshape(-1)
        logits = f @ p["cls.weight"] + p["cls.bias"]
        return scores, logits

    def scores(self, x) -> tuple[Tensor, Tensor]:
        """Critic score per image [N] and class logits [N, C]."""
        f, _ = self.features(x)
        return self.heads(f)

    def critic(self, x) -> Tensor:
        return self.scores(x)[0]

    def input_gradient(self, x) -> Tensor:
        """d(score_n)/d(x_n) for every image, as a graph differentiable in the weights.

        The ReLU masks are taken from a plain forward pass and held constant
        (their derivative is zero almost everywhere), so the backward pass of
        the network can be written out with ordinary first-order primitives.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        p = self.params
        with ad.no_grad():
            shapes = [x.shape[2:]]
            h = x
            masks = []
            for i in range(1, len(self.widths) + 1):
                a = ad.conv2d(h, p[f"conv{i}.weight"], stride=2, padding=1) + p[f"conv{i}.bias"].reshape(1, -1, 1, 1)
                masks.append(a.data > 0)
                h = ad.relu(a)
                shapes.append(h.shape[2:])
            f = h.mean(axis=(2, 3))
            z_mask = (f @ p["head1.weight"] + p["head1.bias"]).data > 0

        n = x.shape[0]
        g = Tensor(np.ones((n, 1), dtype=np.float32)) @ p["head2.weight"].T
        g = ad.where(z_mask, g, 0.0) @ p["head1.weight"].T
        hh, ww = shapes[-1]
        g = ad.broadcast_to(g.reshape(n, -1, 1, 1) * (1.0 / (hh * ww)), (n, self.widths[-1], hh, ww))
        for i in range(len(self.widths), 0, -1):
            g = ad.where(masks[i - 1], g, 0.0)
            g = ad.conv2d_transpose(g, p[f"conv{i}.weight"], stride=2, padding=1, out_hw=shapes[i - 1])
        return g


class LinearCritic:
    """Fixed linear critic ``D(x) = sum(v * x)`` (no learnable weights)."""

    def __init__(self, direction: np.ndarray):
        self.direction = np.asarray(direction, dtype=np.float32)

    def critic(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return (x * Tensor(self.direction[None])).sum(axis=tuple(range(1, x.ndim)))

    def input_gradient(self, x) -> Tensor:
        n = x.shape[0]
        return Tensor(np.broadcast_to(self.direction[None], (n,) + self.direction.shape))


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)


def critic_scores(net: CriticNet, x) -> tuple[Tensor, Tensor]:
    return net.scores(x)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = ad.log_softmax(logits, axis=1)
    return -logp[np.arange(labels.size), labels].mean()


def gradient_penalty(net, real, fake, rng: np.random.Generator | None = None) -> Tensor:
    """mean_n (||d D(x_hat_n) / d x_hat_n|| - 1)^2 at random interpolates of real and fake."""
    real = real.data if isinstance(real, Tensor) else np.asarray(real, dtype=np.float32)
    fake = fake.data if isinstance(fake, Tensor) else np.asarray(fake, dtype=np.float32)
    rng = rng if rng is not None else np.random.default_rng()
    eps = rng.random(real.shape[0]).astype(np.float32).reshape((-1,) + (1,) * (real.ndim - 1))
    x_hat = Tensor(eps * real + (1 - eps) * fake)
    g = net.input_gradient(x_hat)
    norm = ad.sqrt((g * g).sum(axis=tuple(range(1, g.ndim))) + GP_EPS)
    return ((norm - 1.0) ** 2).mean()


def critic_terms(net, real, fake, gp_coef: float = 10.0, rng: np.random.Generator | None = None):
    """Critic loss pieces from a single forward pass over ``[real; fake]``.

    Returns ``(loss, wasserstein_estimate, gradient_penalty, logits_real,
    logits_fake)``; logits are ``None`` for nets without a classifier head.
    """
    real = ad.stop_grad(real)
    fake = ad.stop_grad(fake)
    if real.shape != fake.shape:
        raise ad.ShapeError(f"real {real.shape} and fake {fake.shape} batches differ in shape")
    n = real.shape[0]
    both = ad.concat([real, fake], axis=0)
    if hasattr(net, "scores"):
        scores, logits = net.scores(both)
        logits_real, logits_fake = logits[:n], logits[n:]
    else:
        scores, logits_real, logits_fake = net.critic(both), None, None
    w_est = scores[:n].mean() - scores[n:].mean()
    gp = gradient_penalty(net, real, fake, rng)
    return -w_est + gp_coef * gp, w_est, gp, logits_real, logits_fake


def wgan_gp_critic_loss(net, real, fake, gp_coef: float = 10.0, rng: np.random.Generator | None = None):
    """Critic loss ``mean D(fake) - mean D(real) + gp_coef * GP``.

    Returns ``(loss, wasserstein_estimate, gradient_penalty)``; the fake batch is
    detached so no gradient reaches whatever produced it.
    """
    return critic_terms(net, real, fake, gp_coef, rng)[:3]


def policy_loss(net: CriticNet, fake: Tensor, labels, labels_real, logits_real: Tensor, eps: float = 0.1):
    """``-mean D(fake) + eps * (CE(cls(fake), labels) + CE(logits_real, labels_real))``.

    Returns ``(loss, classification_loss)``.
    """
    scores, logits = net.scores(fake)
    cls = cross_entropy(logits, labels) + cross_entropy(logits_real, labels_real)
    return -scores.mean() + eps * cls, cls


class Adam:
    """Adam with bias correction; a step with any non-finite gradient is skipped."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.0, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.skipped = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        grads = [p.grad for p in self.params]
        if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            warnings.warn(f"non-finite gradient; Adam step skipped ({self.skipped} so far)", RuntimeWarning)
            return False
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            g = g.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data[...] = (p.data.astype(np.float64) - update).astype(p.dtype)
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state(self, t: int, skipped: int, arrays: dict[str, np.ndarray]) -> None:
        self.t, self.skipped = t, skipped
        self.m = [np.array(arrays[f"m{i}"], dtype=np.float64) for i in range(len(self.params))]
        self.v = [np.array(arrays[f"v{i}"], dtype=np.float64) for i in range(len(self.params))]


def adam_step(params, grads, state: dict | None = None, lr: float = 1e-3, betas=(0.0, 0.999), eps_adam: float = 1e-8):
    """Functional Adam update on plain arrays; returns ``(new_params, new_state)``."""
    b1, b2 = betas
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p, dtype=np.float64) for p in params],
                 "v": [np.zeros_like(p, dtype=np.float64) for p in params], "skipped": 0}
    if any(not np.all(np.isfinite(g)) for g in grads):
        warnings.warn("non-finite gradient; Adam step skipped", RuntimeWarning)
        return [np.array(p) for p in params], {**state, "skipped": state["skipped"] + 1}
    t = state["t"] + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        g = np.asarray(g, dtype=np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(np.asarray(p, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps_adam))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v, "skipped": state["skipped"]}
