"""
Bayesian model over tabular action values.

The likelihood of an observed reward ``r`` at ``(s, a)`` is a Gaussian kernel
centred at the Bellman residual ``g_{s,a}(theta)``; the prior is an isotropic
Gaussian. Data are split into an *old* and a *new* partition, each with its
own tolerance.

Everything here is vectorised over a batch of parameter vectors of shape
``(N, d_theta)``; every output row depends only on the matching input row, so
results do not change with batch size or chunking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .mdp import Dataset, QIndex, TabularMdp, Transition

__all__ = [
    "UNCONSTRAINED",
    "PriorSpec",
    "ToleranceAssignment",
    "BellmanModel",
    "Posterior",
    "bellman_residual",
    "log_kernel",
    "partition_loglik",
    "log_posterior",
    "grad_log_posterior",
    "empirical_bellman_error",
    "recurrence_direction",
]

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class _Unconstrained:
    """Tolerance tag for a partition that does not enter the likelihood."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNCONSTRAINED"

    def __str__(self):
        return "unconstrained"

    def __reduce__(self):
        return (_Unconstrained, ())


UNCONSTRAINED = _Unconstrained()


def is_unconstrained(eps) -> bool:
    return eps is UNCONSTRAINED


def _check_eps(eps, name: str):
    if is_unconstrained(eps):
        return eps
    eps = float(eps)
    if not (eps > 0 and math.isfinite(eps)):
        raise ValueError(f"{name} must be positive and finite or UNCONSTRAINED, got {eps}")
    return eps


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic Gaussian prior ``N(mean, sigma^2 I)``."""

    sigma: float
    mean: np.ndarray | float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("prior sigma must be positive")

    def mean_vector(self, d: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.mean, dtype=float), (d,))

    def _centred(self, thetas):
        if np.ndim(self.mean) == 0 and self.mean == 0:
            return thetas
        return thetas - self.mean_vector(thetas.shape[-1])

    def logpdf(self, thetas: np.ndarray) -> np.ndarray:
        d = thetas.shape[-1]
        z = self._centred(thetas) / self.sigma
        return -0.5 * np.sum(z * z, axis=-1) - d * (math.log(self.sigma) + _HALF_LOG_2PI)

    def grad(self, thetas: np.ndarray) -> np.ndarray:
        return -self._centred(thetas) / self.sigma**2

    def sample(self, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean_vector(d) + self.sigma * rng.standard_normal((n, d))


@dataclass(frozen=True)
class ToleranceAssignment:
    """Tolerances for the old and new data partitions."""

    eps_old: float | _Unconstrained
    eps_new: float | _Unconstrained

    def __post_init__(self):
        eo = _check_eps(self.eps_old, "eps_old")
        en = _check_eps(self.eps_new, "eps_new")
        object.__setattr__(self, "eps_old", eo)
        object.__setattr__(self, "eps_new", en)
        if not is_unconstrained(en) and (is_unconstrained(eo) or eo > en * (1 + 1e-12)):
            raise ValueError("eps_old must not exceed eps_new unless new data is unconstrained")

    @property
    def common(self) -> bool:
        return not is_unconstrained(self.eps_new) and self.eps_old == self.eps_new


def log_kernel(eps: float, x, y):
    """Log density of ``N(y; x, eps^2)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    z = (np.asarray(x, dtype=float) - y) / eps
    return -0.5 * z * z - math.log(eps) - _HALF_LOG_2PI


def partition_loglik(eps, sq_resid, n: int):
    """Sum of ``log_kernel`` over a partition from its squared-residual sum.

    ``sq_resid`` may be an array of per-particle sums. An unconstrained
    partition contributes exactly zero.
    """
    if is_unconstrained(eps) or n == 0:
        return np.zeros_like(np.asarray(sq_resid, dtype=float))
    return -0.5 * np.asarray(sq_resid) / eps**2 - n * (math.log(eps) + _HALF_LOG_2PI)


class BellmanModel:
    """Vectorised Bellman residuals for a fixed list of observed transitions.

    Parameters
    ----------
    mdp : TabularMdp
    idx : QIndex
    records : iterable of Transition
        Only ``(s, a, r)`` is used; expectations over next states use the
        known transition kernel.
    """

    def __init__(self, mdp: TabularMdp, idx: QIndex, records: Iterable[Transition] = ()):
        self.mdp = mdp
        self.idx = idx
        records = [Transition(*t) for t in records]
        d = idx.d_theta
        self.d = d
        zero_slot, pad_slot = d, d + 1
        for t in records:
            mdp.check_action(t.s, t.a)
        self.n = len(records)
        self.r = np.array([t.r for t in records], dtype=float)
        self.sa_idx = np.array(
            [zero_slot if mdp.is_goal(t.s) else idx[(t.s, t.a)] for t in records], dtype=np.intp
        )
        supports = [mdp.successors(t.s, t.a) for t in records]
        k = max((len(sp) for sp, _ in supports), default=1)
        states = sorted({int(s) for sp, _ in supports for s in sp})
        local = {s: i for i, s in enumerate(states)}
        self.succ_states = np.array(states, dtype=np.intp)
        succ = np.zeros((self.n, k), dtype=np.intp)
        prob = np.zeros((self.n, k))
        for i, (sp, pr) in enumerate(supports):
            succ[i, : len(sp)] = [local[int(s)] for s in sp]
            prob[i, : len(sp)] = pr
        self.succ, self.prob = succ, prob
        a_max = max((len(mdp.actions[s]) for s in states), default=1)
        table = np.full((max(len(states), 1), a_max), pad_slot, dtype=np.intp)
        for i, s in enumerate(states):
            for j, a in enumerate(sorted(mdp.actions[s])):
                table[i, j] = zero_slot if mdp.is_goal(s) else idx[(s, a)]
        self.action_table = table
        self.records = records
        self._point_mass = k == 1 and bool(np.all(prob == 1.0))

    def _evaluate(self, thetas: np.ndarray, need_best: bool = True):
        n_rows, d = thetas.shape
        ext = np.empty((n_rows, d + 2))
        ext[:, :d] = thetas
        ext[:, d] = 0.0
        ext[:, d + 1] = -np.inf
        q = ext[:, self.action_table]
        v = q.max(axis=2)
        if self._point_mass:
            g = ext[:, self.sa_idx] - v[:, self.succ[:, 0]]
        else:
            g = ext[:, self.sa_idx] - np.sum(v[:, self.succ] * self.prob, axis=-1)
        best = np.argmax(q, axis=2) if need_best else None
        return g, best

    def residuals(self, thetas: np.ndarray) -> np.ndarray:
        """Bellman residuals ``g``, shape ``(N, n_records)``."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if self.n == 0:
            return np.zeros((thetas.shape[0], 0))
        return self._evaluate(thetas, need_best=False)[0]

    def sq_resid(self, thetas: np.ndarray) -> np.ndarray:
        """Per-row ``sum_i (r_i - g_i)^2``."""
        e = self.residuals(thetas) - self.r
        return np.sum(e * e, axis=-1)

    def errors_and_grad(self, thetas: np.ndarray, weights: np.ndarray):
        """Residual errors ``g - r`` and the gradient of ``sum_i w_i (g_i - r_i)^2``."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        n_rows, d = thetas.shape
        if self.n == 0:
            return np.zeros((n_rows, 0)), np.zeros((n_rows, d))
        g, best = self._evaluate(thetas)
        e = g - self.r
        coef = 2.0 * weights * e
        width = d + 2
        offs = np.arange(0, n_rows * width, width)[:, None]
        if self._point_mass:
            # argmax slot at the single successor of every record
            chosen = self.action_table[self.succ[:, 0], best[:, self.succ[:, 0]]]
            idx = np.concatenate([offs + self.sa_idx, offs + chosen], axis=1)
            val = np.concatenate([coef, -coef], axis=1)
        else:
            chosen = self.action_table[self.succ[None, :, :], best[:, self.succ]]
            idx = np.concatenate([(offs + self.sa_idx).ravel(), (offs[:, :, None] + chosen).ravel()])
            val = np.concatenate([coef.ravel(), (-(coef[:, :, None] * self.prob)).ravel()])
        grad = np.bincount(idx.ravel(), weights=val.ravel(), minlength=n_rows * width)
        return e, grad.reshape(n_rows, width)[:, :d]

    def sq_resid_and_grad(self, thetas: np.ndarray):
        """Squared-residual sums and their gradient with respect to theta."""
        e, grad = self.errors_and_grad(thetas, np.ones(self.n))
        return np.sum(e * e, axis=-1), grad


class Posterior:
    """Unnormalised log posterior with per-partition tolerances.

    Parameters
    ----------
    prior : PriorSpec
    old, new : BellmanModel
    tol : ToleranceAssignment
    """

    def __init__(self, prior: PriorSpec, old: BellmanModel, new: BellmanModel, tol: ToleranceAssignment, joint=None):
        self.prior, self.old, self.new, self.tol = prior, old, new, tol
        if joint is None:
            joint = BellmanModel(old.mdp, old.idx, old.records + new.records)
        self.joint = joint
        self._is_new = np.arange(joint.n) >= old.n
        self._weights = None

    def with_tolerance(self, tol: ToleranceAssignment) -> "Posterior":
        return Posterior(self.prior, self.old, self.new, tol, self.joint)

    def loglik_from_sums(self, r_old, r_new, tol: ToleranceAssignment | None = None):
        tol = self.tol if tol is None else tol
        return partition_loglik(tol.eps_old, r_old, self.old.n) + partition_loglik(
            tol.eps_new, r_new, self.new.n
        )

    def _split(self, e2):
        return e2[:, ~self._is_new].sum(axis=1), e2[:, self._is_new].sum(axis=1)

    def residual_sums(self, thetas):
        e = self.joint.residuals(thetas) - self.joint.r
        return self._split(e * e)

    def logpdf(self, thetas) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        r_old, r_new = self.residual_sums(thetas)
        return self.prior.logpdf(thetas) + self.loglik_from_sums(r_old, r_new)

    @staticmethod
    def _coef(eps):
        return 0.0 if is_unconstrained(eps) else -0.5 / eps**2

    def logpdf_and_grad(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if self._weights is None:
            self._weights = np.where(
                self._is_new, self._coef(self.tol.eps_new), self._coef(self.tol.eps_old)
            )
            self._offset = float(self.loglik_from_sums(0.0, 0.0))
        e, g_lik = self.joint.errors_and_grad(thetas, self._weights)
        # each kernel term is w_i e_i^2 plus a constant
        lik = (e * e) @ self._weights + self._offset
        return self.prior.logpdf(thetas) + lik, self.prior.grad(thetas) + g_lik

    def grad(self, thetas) -> np.ndarray:
        return self.logpdf_and_grad(thetas)[1]


def _as_records(data) -> list[Transition]:
    if data is None:
        return []
    return list(data)


def make_posterior(mdp, idx, prior, old_data, new_data, tol) -> Posterior:
    return Posterior(
        prior,
        BellmanModel(mdp, idx, _as_records(old_data)),
        BellmanModel(mdp, idx, _as_records(new_data)),
        tol,
    )


def bellman_residual(mdp: TabularMdp, idx: QIndex, theta, s: int, a: int) -> float:
    """``theta[nu(s,a)] - E[max_a' theta[nu(S', a')] | s, a]`` with goals at 0."""
    model = BellmanModel(mdp, idx, [Transition(s, a, 0.0, s)])
    return float(model.residuals(np.asarray(theta, dtype=float)[None, :])[0, 0])


def log_posterior(mdp, idx, prior, old_data, new_data, tol, theta) -> float:
    """Unnormalised log posterior at a single ``theta``."""
    return float(make_posterior(mdp, idx, prior, old_data, new_data, tol).logpdf(theta)[0])


def grad_log_posterior(mdp, idx, prior, old_data, new_data, tol, theta) -> np.ndarray:
    """Gradient of :func:`log_posterior` at a single ``theta`` (ties: lowest action)."""
    return make_posterior(mdp, idx, prior, old_data, new_data, tol).grad(theta)[0]


def empirical_bellman_error(particles, mdp: TabularMdp, idx: QIndex, data) -> float:
    """Weighted mean over particles of ``sum_D (g - r)^2``."""
    model = BellmanModel(mdp, idx, _as_records(data))
    w = particles.weights()
    return float(np.sum(w * model.sq_resid(particles.thetas)))


def recurrence_direction(mdp: TabularMdp, idx: QIndex, s_r: int, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Maximal probability of reaching ``s_r`` from each pair, by monotone iteration."""
    if mdp.is_goal(s_r):
        raise ValueError("s_r must be a non-goal state")
    pairs = [sa for sa in mdp.pairs() if not mdp.is_goal(sa[0])]
    u = np.zeros(idx.d_theta)

    def v_of(state, u):
        if mdp.is_goal(state):
            return 0.0
        return max(u[idx[(state, a)]] for a in mdp.actions[state])

    for _ in range(max_iter):
        new = np.empty_like(u)
        for s, a in pairs:
            sp, pr = mdp.successors(s, a)
            new[idx[(s, a)]] = sum(p * (1.0 if s2 == s_r else v_of(int(s2), u)) for s2, p in zip(sp, pr))
        done = np.max(np.abs(new - u), initial=0.0) < tol
        u = new
        if done:
            break
    return u
