"""Penalty-Lagrangian functions and the per-class multiplier schedules.

Three penalties are provided (``"phr"``, ``"p2"``, ``"p3"``). Each is a
function ``P(z, lam, rho)`` of the constraint value ``z`` whose derivative in
``z`` equals ``lam`` at ``z = 0``; the derivative is what the multiplier
update uses.
"""

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import DomainError

LAMBDA_FLOOR = 1e-12
PENALTY_KINDS = ("phr", "p2", "p3")


def _check_kind(kind):
    kind = str(kind).lower()
    if kind not in PENALTY_KINDS:
        raise DomainError(f"unknown penalty kind {kind!r}")
    return kind


def _check_lr(lam, rho):
    lam = np.asarray(lam, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho <= 0):
        raise DomainError("rho must be strictly positive")
    if np.any(lam < 0):
        raise DomainError("lambda must be non-negative")
    return lam, rho


def penalty(kind, z, lam, rho):
    """Value of the penalty; works elementwise on arrays."""
    kind = _check_kind(kind)
    lam, rho = _check_lr(lam, rho)
    z = np.asarray(z, dtype=np.float64)
    if kind == "phr":
        active = lam + rho * z >= 0
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(active, lam * z + 0.5 * rho * z**2, -lam**2 / (2.0 * rho))
    else:
        pos = z >= 0
        zn = np.minimum(z, 0.0)
        neg_branch = lam * zn / (1.0 - rho * zn)
        if kind == "p2":
            pos_branch = lam * z + lam * rho * z**2 + rho**2 * z**3 / 6.0
        else:
            pos_branch = lam * z + lam * rho * z**2
        out = np.where(pos, pos_branch, neg_branch)
    return out[()] if out.ndim == 0 else out


def penalty_prime(kind, z, lam, rho):
    """Derivative of :func:`penalty` with respect to ``z``."""
    kind = _check_kind(kind)
    lam, rho = _check_lr(lam, rho)
    z = np.asarray(z, dtype=np.float64)
    if kind == "phr":
        out = np.maximum(0.0, lam + rho * z)
    else:
        pos = z >= 0
        zn = np.minimum(z, 0.0)
        neg_branch = lam / (1.0 - rho * zn) ** 2
        if kind == "p2":
            pos_branch = lam + 2.0 * lam * rho * z + 0.5 * rho**2 * z**2
        else:
            pos_branch = lam + 2.0 * lam * rho * z
        out = np.where(pos, pos_branch, neg_branch)
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class AlmState:
    """Per-class multipliers ``lam``, penalty parameters ``rho`` and bookkeeping.

    ``prev_violation`` holds ``d_k - eta`` from the last epoch on which the
    penalty parameters were revisited; NaN means "not yet observed".
    """

    lam: np.ndarray
    rho: np.ndarray
    eta: float = 1.0
    beta: float = 1.2
    update_period: int = 10
    prev_violation: np.ndarray = None

    def __post_init__(self):
        lam = np.array(self.lam, dtype=np.float64)
        rho = np.array(self.rho, dtype=np.float64)
        if lam.shape != rho.shape or lam.ndim != 1:
            raise DomainError("lam and rho must be vectors of equal length")
        if np.any(lam <= 0) or np.any(rho <= 0):
            raise DomainError("lam and rho must be strictly positive")
        if not self.beta > 1:
            raise DomainError("beta must exceed 1")
        if not self.eta > 0:
            raise DomainError("eta must be positive")
        if int(self.update_period) < 1:
            raise DomainError("update_period must be >= 1")
        prev = (np.full(lam.shape, np.nan) if self.prev_violation is None
                else np.array(self.prev_violation, dtype=np.float64))
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "prev_violation", prev)

    @classmethod
    def initial(cls, n_classes, lam0=1e-6, rho0=1.0, **kwargs):
        return cls(lam=np.full(n_classes, lam0), rho=np.full(n_classes, rho0), **kwargs)


def normalized_violation(d_hat, eta):
    """Constraint value ``d / eta - 1`` used by the multiplier update."""
    return np.asarray(d_hat, dtype=np.float64) / eta - 1.0


def update_multipliers(state, kind, d_hat):
    """``lam_k <- P'(d_k / eta - 1, lam_k, rho_k)``, floored at 1e-12.

    Entries of ``d_hat`` that are NaN (class absent from the validation set)
    leave their multiplier untouched.
    """
    d_hat = np.asarray(d_hat, dtype=np.float64)
    seen = np.isfinite(d_hat)
    z = normalized_violation(np.where(seen, d_hat, state.eta), state.eta)
    new = penalty_prime(kind, z, state.lam, state.rho)
    new = np.maximum(new, LAMBDA_FLOOR)
    return replace(state, lam=np.where(seen, new, state.lam))


def update_rho(state, d_hat, epoch):
    """Grow ``rho_k`` by ``beta`` when class ``k``'s violation did not improve.

    Acts only when ``epoch`` is a multiple of ``update_period``. The first
    acting epoch just records the violations.
    """
    if int(epoch) % state.update_period != 0:
        return state
    d_hat = np.asarray(d_hat, dtype=np.float64)
    violation = d_hat - state.eta
    seen = np.isfinite(violation)
    prev = state.prev_violation
    with np.errstate(invalid="ignore"):
        grow = seen & np.isfinite(prev) & (violation > np.maximum(0.0, prev))
    rho = np.where(grow, state.beta * state.rho, state.rho)
    prev = np.where(seen, violation, prev)
    return replace(state, rho=rho, prev_violation=prev)


@dataclass(frozen=True)
class HrState:
    """Multipliers adjusted by the multiplicative heuristic rule."""

    lam: np.ndarray
    mu: float = 1.1
    tau: float = 1.1
    prev_penalty: np.ndarray = None

    def __post_init__(self):
        lam = np.array(self.lam, dtype=np.float64)
        if np.any(lam <= 0):
            raise DomainError("lam must be strictly positive")
        if not (self.mu > 1 and self.tau > 1):
            raise DomainError("mu and tau must exceed 1")
        prev = (np.full(lam.shape, np.nan) if self.prev_penalty is None
                else np.array(self.prev_penalty, dtype=np.float64))
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "prev_penalty", prev)

    @classmethod
    def initial(cls, n_classes, lam0=0.1, **kwargs):
        return cls(lam=np.full(n_classes, lam0), **kwargs)


def update_multipliers_hr(state, current_penalty):
    """Scale ``lam_k`` up by ``mu`` if its penalty grew by more than a factor
    ``tau``, down by ``mu`` if it shrank by more than ``tau``.
    """
    new = np.asarray(current_penalty, dtype=np.float64)
    old = state.prev_penalty
    with np.errstate(invalid="ignore"):
        up = np.isfinite(old) & np.isfinite(new) & (new > state.tau * old)
        down = np.isfinite(old) & np.isfinite(new) & (old > state.tau * new)
    lam = np.where(up, state.mu * state.lam, np.where(down, state.lam / state.mu, state.lam))
    prev = np.where(np.isfinite(new), new, old)
    return replace(state, lam=lam, prev_penalty=prev)
