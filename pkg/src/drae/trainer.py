"""Loss bookkeeping and parameter updates.

Six loss components feed one total:

    total = l_reflex + l_schema + alpha * (l_moe + l_prag)
                                + gamma * (l_hyper + l_dpmm)

Only the two prediction losses are differentiable with respect to the
gating, expert, and fusion parameters; the control-stack components are
probes that participate in the total and in the adaptive weighting but
not in gradient steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dpmm as dp
from .errors import InvalidParameter, ShapeMismatch

WEIGHT_LOW, WEIGHT_HIGH = 0.1, 10.0


@dataclass
class LossBreakdown:
    l_reflex: float
    l_schema: float
    l_moe: float
    l_prag: float
    l_hyper: float
    l_dpmm: float
    alpha_t: float
    gamma_t: float
    total: float

    @classmethod
    def build(cls, l_reflex, l_schema, l_moe, l_prag, l_hyper, l_dpmm,
              alpha_t, gamma_t) -> "LossBreakdown":
        if alpha_t <= 0 or gamma_t <= 0:
            raise InvalidParameter("adaptive weights must be positive")
        total = (l_reflex + l_schema
                 + alpha_t * (l_moe + l_prag)
                 + gamma_t * (l_hyper + l_dpmm))
        return cls(l_reflex, l_schema, l_moe, l_prag, l_hyper, l_dpmm,
                   alpha_t, gamma_t, total)


@dataclass
class TrainConfig:
    lr: float = 0.05
    batch: int = 16
    weight_step: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidParameter("lr must be positive")
        if self.batch < 1:
            raise InvalidParameter("batch must be >= 1")


def compute_losses(system, batch) -> LossBreakdown:
    """Evaluate all six components on a labeled batch, read-only.

    ``batch`` is a sequence of (x, label) pairs. The prediction losses
    use the live parameters; the DP-mixture loss is the negative
    predictive log-likelihood of each input before assimilation; the
    control-stack components come from their probes.
    """
    if len(batch) == 0:
        raise InvalidParameter("batch must be nonempty")
    xs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    labels = np.array([int(y) for _, y in batch])
    l_moe = system.loss_moe(xs, labels)
    l_prag = system.loss_prag(xs, labels)
    if system.dpmm is not None:
        l_dpmm = float(np.mean([-dp.predictive_loglik(system.dpmm, x)
                                for x in xs]))
    else:
        l_dpmm = 0.0
    return LossBreakdown.build(
        l_reflex=system.probe_reflex(),
        l_schema=system.probe_schema(),
        l_moe=l_moe,
        l_prag=l_prag,
        l_hyper=system.probe_hyper(),
        l_dpmm=l_dpmm,
        alpha_t=system.alpha_t,
        gamma_t=system.gamma_t,
    )


def adapt_weights(prev: tuple[float, float], val_losses: LossBreakdown,
                  ref_losses: LossBreakdown, step: float) -> tuple[float, float]:
    """Multiplicative update of (alpha, gamma) from validation drift.

    Each weight moves by exp(step * relative excess over the reference)
    and is clamped to [0.1, 10].
    """
    if step <= 0:
        raise InvalidParameter("step must be positive")
    alpha, gamma = prev
    val_pred = val_losses.l_moe + val_losses.l_prag
    ref_pred = ref_losses.l_moe + ref_losses.l_prag
    val_mem = val_losses.l_hyper + val_losses.l_dpmm
    ref_mem = ref_losses.l_hyper + ref_losses.l_dpmm
    alpha = float(np.clip(
        alpha * np.exp(step * (val_pred - ref_pred) / max(ref_pred, 1e-8)),
        WEIGHT_LOW, WEIGHT_HIGH))
    gamma = float(np.clip(
        gamma * np.exp(step * (val_mem - ref_mem) / max(ref_mem, 1e-8)),
        WEIGHT_LOW, WEIGHT_HIGH))
    return alpha, gamma


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, frozen: frozenset | set = frozenset()) -> dict[str, np.ndarray]:
    """p <- p - lr * g per entry; frozen names keep their original array."""
    if lr <= 0:
        raise InvalidParameter("lr must be positive")
    out = {}
    for name, p in params.items():
        if name in frozen or name not in grads:
            out[name] = p
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param shape "
                                f"{p.shape} for {name!r}")
        out[name] = p - lr * g
    return out


def grad_check(loss_and_grad_fn, params: dict[str, np.ndarray], epsilon: float,
               rng: np.random.Generator, samples_per_param: int = 6) -> float:
    """Central finite differences against the analytic gradient.

    Returns the max over sampled coordinates of
    |fd - analytic| / (|fd| + |analytic| + 1e-12).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise InvalidParameter("epsilon must lie in [1e-7, 1e-3]")
    _, grads = loss_and_grad_fn(params)
    worst = 0.0
    for name, p in params.items():
        if name not in grads:
            continue
        flat = p.ravel()
        n_coords = min(samples_per_param, flat.size)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
        for c in coords:
            bumped = dict(params)
            up = p.copy().ravel()
            up[c] += epsilon
            bumped[name] = up.reshape(p.shape)
            loss_up, _ = loss_and_grad_fn(bumped)
            down = p.copy().ravel()
            down[c] -= epsilon
            bumped[name] = down.reshape(p.shape)
            loss_down, _ = loss_and_grad_fn(bumped)
            fd = (loss_up - loss_down) / (2.0 * epsilon)
            analytic = np.asarray(grads[name]).ravel()[c]
            rel = abs(fd - analytic) / (abs(fd) + abs(analytic) + 1e-12)
            worst = max(worst, float(rel))
    return worst
