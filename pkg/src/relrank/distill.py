"""Closed-form constrained projection and the distillation training loss.

The projection of an output distribution p under constraint values f with
weight lam is q_i proportional to p_i * exp(lam * f_i); the training loss
mixes plain cross-entropy against the label with cross-entropy against the
projection, weighted by an iteration schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_LAMBDA = 6.0
SCHEDULE_CAP = 0.1
SCHEDULE_BASE = 0.95

# Probabilities are floored inside cross-entropy logs.
CE_FLOOR = 1e-12


@dataclass
class DistillConfig:
    """Constraint weight and mixing-schedule parameters.

    `total_iters` may stay None in configs; trainers resolve it to the run
    length before the first schedule lookup.
    """

    lam: float = DEFAULT_LAMBDA
    total_iters: int | None = None
    cap: float = SCHEDULE_CAP
    base: float = SCHEDULE_BASE

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.total_iters is not None and self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if not 0.0 < self.base < 1.0:
            raise ValueError("base must lie in (0, 1)")
        if not 0.0 <= self.cap <= 1.0:
            raise ValueError("cap must lie in [0, 1]")


def pi_schedule(t: int, config: DistillConfig) -> float:
    """Distillation weight at iteration t: min(1 - base**(t/T), cap)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if config.total_iters is None:
        raise ValueError("total_iters is unresolved")
    return min(1.0 - config.base ** (t / config.total_iters), config.cap)


def project(p, f, lam: float) -> np.ndarray:
    """Projection of p rewarding mass where f is high: q_i ~ p_i * e^(lam*f_i).

    Computed in log space with max-subtraction; lam*f can reach about -110
    for floored log-probability constraints, which would underflow directly.
    """
    p = np.asarray(p, dtype=float)
    f = np.asarray(f, dtype=float)
    if p.shape != f.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("constraint values must be finite")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    with np.errstate(divide="ignore"):
        log_q = np.log(p) + lam * f
    log_q -= log_q.max()
    q = np.exp(log_q)
    total = q.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise ValueError("projection degenerate")
    return q / total


def cross_entropy(target, p) -> float:
    """-sum(target * log p); `target` is a class id or a distribution."""
    p = np.asarray(p, dtype=float)
    log_p = np.log(np.maximum(p, CE_FLOOR))
    if isinstance(target, (int, np.integer)):
        if not 0 <= target < len(p):
            raise ValueError(f"label {target} outside distribution of size {len(p)}")
        return float(-log_p[int(target)])
    target = np.asarray(target, dtype=float)
    if target.shape != p.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {p.shape}")
    return float(-(target * log_p).sum())


def distill_loss(y: int, p, q, pi: float) -> float:
    """(1 - pi) * CE(y, p) + pi * CE(q, p)."""
    if not 0.0 <= pi <= 1.0:
        raise ValueError("pi must lie in [0, 1]")
    return (1.0 - pi) * cross_entropy(y, p) + pi * cross_entropy(q, p)
