"""
Hamiltonian Monte Carlo with a diagonal mass matrix.

The single-chain functions (:func:`hamiltonian`, :func:`leapfrog`,
:func:`hmc_chain`) take scalar-valued callbacks on 1-D parameter vectors.
:func:`hmc_batch` runs many independent chains in lockstep for the SMC
mutation step; each chain uses its own random stream, step size and number
of leapfrog steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "HmcPlan",
    "ChainStats",
    "NumericalError",
    "hamiltonian",
    "leapfrog",
    "hmc_chain",
    "hmc_batch",
    "leapfrog_batch",
]


class NumericalError(FloatingPointError):
    """A gradient or target evaluation returned a non-finite value."""


@dataclass(frozen=True)
class HmcPlan:
    """Step-size bound, leapfrog-count bound, mass diagonal and step budget."""

    delta_star: float
    l_star: int
    mass_diag: np.ndarray
    max_steps: int

    def __post_init__(self):
        object.__setattr__(self, "mass_diag", np.asarray(self.mass_diag, dtype=float))
        if not self.delta_star > 0:
            raise ValueError("delta_star must be positive")
        if int(self.l_star) < 1:
            raise ValueError("l_star must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be nonnegative")
        if np.any(~(self.mass_diag > 0)):
            raise ValueError("mass_diag entries must be positive")
        object.__setattr__(self, "l_star", int(self.l_star))

    def replace(self, **kw) -> "HmcPlan":
        return replace(self, **kw)


@dataclass
class ChainStats:
    samples: list = field(default_factory=list)
    accepts: int = 0
    proposals: int = 0

    @property
    def accept_rate(self) -> float:
        return self.accepts / self.proposals if self.proposals else float("nan")


def hamiltonian(theta, p, target_logpdf: Callable, mass_diag) -> float:
    """``-log p(theta) + sum p^2 / (2 m)``."""
    p = np.asarray(p, dtype=float)
    return float(-target_logpdf(np.asarray(theta, dtype=float)) + np.sum(p * p / (2.0 * np.asarray(mass_diag))))


def leapfrog(theta, p, delta: float, L: int, grad_logpdf: Callable, mass_diag):
    """``L`` half-kick / drift / half-kick steps.

    Raises
    ------
    NumericalError
        If the gradient becomes non-finite.
    """
    if not delta > 0 or L < 1:
        raise ValueError("leapfrog needs delta > 0 and L >= 1")
    theta = np.array(theta, dtype=float)
    p = np.array(p, dtype=float)
    inv_mass = 1.0 / np.asarray(mass_diag, dtype=float)
    grad = np.asarray(grad_logpdf(theta), dtype=float)
    for _ in range(int(L)):
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient in leapfrog")
        p = p + 0.5 * delta * grad
        theta = theta + delta * inv_mass * p
        grad = np.asarray(grad_logpdf(theta), dtype=float)
        p = p + 0.5 * delta * grad
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient in leapfrog")
    return theta, p


def hmc_chain(
    theta0,
    plan: HmcPlan,
    delta: float,
    L: int,
    target_logpdf: Callable,
    grad_logpdf: Callable,
    rng: np.random.Generator,
    stop: Callable | None = None,
) -> ChainStats:
    """Run up to ``plan.max_steps`` Metropolis-corrected HMC transitions.

    Non-finite energies after a trajectory are rejected. ``stop`` receives
    the list of samples so far after every transition.
    """
    if delta > plan.delta_star * (1 + 1e-12) or L > plan.l_star:
        raise ValueError("delta and L must respect the plan bounds")
    mass = plan.mass_diag
    sd = np.sqrt(mass)
    theta = np.array(theta0, dtype=float)
    stats = ChainStats()
    for _ in range(plan.max_steps):
        p0 = sd * rng.standard_normal(theta.shape)
        h0 = hamiltonian(theta, p0, target_logpdf, mass)
        try:
            prop, p1 = leapfrog(theta, p0, delta, L, grad_logpdf, mass)
            h1 = hamiltonian(prop, p1, target_logpdf, mass)
        except NumericalError:
            h1 = np.nan
        u = rng.random()
        stats.proposals += 1
        if np.isfinite(h1) and np.log(u) < h0 - h1:
            theta = prop
            stats.accepts += 1
        stats.samples.append(theta.copy())
        if stop is not None and stop(stats.samples):
            break
    return stats


def leapfrog_batch(thetas, ps, deltas, Ls, logpdf_and_grad: Callable, mass_diag, start=None):
    """Leapfrog many chains at once.

    Row ``n`` takes ``Ls[n]`` steps of size ``deltas[n]``; rows that have
    finished are frozen. Non-finite rows are frozen and flagged.

    Returns
    -------
    thetas, ps, logp, grad, finite
        End points, the target log density and gradient there, and a mask
        of rows whose trajectory stayed finite.
    """
    thetas = np.array(thetas, dtype=float)
    ps = np.array(ps, dtype=float)
    deltas = np.asarray(deltas, dtype=float)[:, None]
    Ls = np.asarray(Ls, dtype=int)
    inv_mass = 1.0 / np.asarray(mass_diag, dtype=float)
    if start is None:
        logp, grad = logpdf_and_grad(thetas)
    else:
        logp, grad = start
        logp, grad = logp.copy(), grad.copy()
    finite = np.isfinite(logp) & np.isfinite(grad).all(axis=1)
    half = 0.5 * deltas
    pos_step = deltas * inv_mass
    for step in range(int(Ls.max(initial=0))):
        active = (step < Ls) & finite
        all_active = active.all()
        if not all_active and not active.any():
            break
        p_half = ps + half * grad
        th_new = thetas + pos_step * p_half
        with np.errstate(over="ignore", invalid="ignore"):
            lp_new, g_new = logpdf_and_grad(th_new)
            p_new = p_half + half * g_new
        # NaN or inf anywhere in the row makes this sum non-finite
        ok = np.isfinite(lp_new + g_new.sum(axis=1) + p_new.sum(axis=1))
        if all_active and ok.all():
            thetas, ps, grad, logp = th_new, p_new, g_new, lp_new
            continue
        finite = finite & (ok | ~active)
        a = (active & ok)[:, None]
        thetas = np.where(a, th_new, thetas)
        ps = np.where(a, p_new, ps)
        grad = np.where(a, g_new, grad)
        logp = np.where(a[:, 0], lp_new, logp)
    return thetas, ps, logp, grad, finite


def hmc_batch(
    thetas,
    deltas: Sequence[float],
    Ls: Sequence[int],
    logpdf_and_grad: Callable,
    mass_diag,
    rngs: Sequence[np.random.Generator],
    n_steps: int,
    on_step: Callable | None = None,
):
    """Lockstep HMC over independent chains (one row per chain).

    Parameters
    ----------
    thetas : ndarray, shape (N, d)
    deltas, Ls : per-chain step size and leapfrog count
    logpdf_and_grad : callable
        Maps ``(N, d)`` to ``((N,), (N, d))``.
    rngs : one generator per chain
    n_steps : maximum number of transitions
    on_step : callable, optional
        Called as ``on_step(m, samples)`` after transition ``m`` (1-based),
        where ``samples`` is the list of ``(N, d)`` states so far; returning
        ``True`` stops all chains.

    Returns
    -------
    chains : ndarray, shape (N, m, d)
    accepts : ndarray, shape (N,)
    logp : ndarray
        Target log density at the final states.
    """
    thetas = np.array(thetas, dtype=float)
    n, d = thetas.shape
    mass = np.asarray(mass_diag, dtype=float)
    sd = np.sqrt(mass)
    logp, grad = logpdf_and_grad(thetas)
    chains = []
    accepts = np.zeros(n, dtype=int)
    for m in range(1, n_steps + 1):
        p0 = np.stack([r.standard_normal(d) for r in rngs]) * sd
        u = np.array([r.random() for r in rngs])
        h0 = -logp + np.sum(p0 * p0 / (2 * mass), axis=1)
        prop, p1, lp1, g1, finite = leapfrog_batch(thetas, p0, deltas, Ls, logpdf_and_grad, mass, (logp, grad))
        with np.errstate(invalid="ignore", over="ignore"):
            h1 = -lp1 + np.sum(p1 * p1 / (2 * mass), axis=1)
            acc = finite & np.isfinite(h1) & (np.log(u) < h0 - h1)
        thetas = np.where(acc[:, None], prop, thetas)
        logp = np.where(acc, lp1, logp)
        grad = np.where(acc[:, None], g1, grad)
        accepts += acc
        chains.append(thetas.copy())
        if on_step is not None and on_step(m, chains):
            break
    out = np.stack(chains, axis=1) if chains else np.empty((n, 0, d))
    return out, accepts, logp
