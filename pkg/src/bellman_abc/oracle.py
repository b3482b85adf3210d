"""
Exact posterior quantities for tabular MDPs with a Gaussian prior and kernel.

Fixing which action attains each successor maximum (an *assignment*) makes
the Bellman residuals linear in ``theta``, so on every assignment region the
posterior is a truncated Gaussian. Event probabilities then reduce to
Gaussian orthant-type masses, estimated here by plain Monte Carlo.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import multivariate_normal

from .mdp import QIndex, TabularMdp, Transition, five_state_example

__all__ = [
    "Assignment",
    "AssignmentPartition",
    "LinearEvent",
    "AssignmentCapError",
    "enumerate_assignments",
    "event_probability",
    "five_state_choice_probability",
    "parse_event",
]

_JITTER = 1e-12


class AssignmentCapError(RuntimeError):
    """Too many maximiser assignments to enumerate."""


@dataclass
class Assignment:
    """One maximiser assignment and its conditional Gaussian."""

    choice: dict
    B: np.ndarray
    log_weight: float
    mean: np.ndarray
    cov: np.ndarray
    constraints: np.ndarray  # rows c with c @ theta >= 0 on the region


@dataclass
class AssignmentPartition:
    successors: list
    assignments: list
    r: np.ndarray
    sigma: float
    eps: float


@dataclass
class LinearEvent:
    """Intersection of strict half-spaces ``A @ theta > b``."""

    A: np.ndarray
    b: np.ndarray

    @classmethod
    def whole_space(cls, d: int) -> "LinearEvent":
        return cls(np.zeros((0, d)), np.zeros(0))

    def contains(self, thetas: np.ndarray) -> np.ndarray:
        if self.A.shape[0] == 0:
            return np.ones(thetas.shape[0], dtype=bool)
        return np.all(thetas @ self.A.T > self.b, axis=1)


_TERM = re.compile(r"^\s*theta_(\d+)\s*([<>])\s*theta_(\d+)\s*$")


def parse_event(spec: str | Sequence[str] | None, d: int) -> LinearEvent:
    """Parse ``"theta_i>theta_j"`` terms (1-based, comma separated)."""
    if spec is None:
        return LinearEvent.whole_space(d)
    terms = [spec] if isinstance(spec, str) else list(spec)
    terms = [t for s in terms for t in s.split(",") if t.strip()]
    rows = []
    for t in terms:
        m = _TERM.match(t)
        if not m:
            raise ValueError(f"cannot parse event term {t!r}; expected theta_i>theta_j")
        i, op, j = int(m.group(1)) - 1, m.group(2), int(m.group(3)) - 1
        if not (0 <= i < d and 0 <= j < d) or i == j:
            raise ValueError(f"event term {t!r} refers to invalid coordinates (d={d})")
        row = np.zeros(d)
        row[i], row[j] = (1.0, -1.0) if op == ">" else (-1.0, 1.0)
        rows.append(row)
    A = np.array(rows).reshape(-1, d)
    return LinearEvent(A, np.zeros(A.shape[0]))


def _unique_records(data) -> list[Transition]:
    seen, out = set(), []
    for t in data or []:
        t = Transition(*t)
        if (t.s, t.a) not in seen:
            seen.add((t.s, t.a))
            out.append(t)
    return out


def enumerate_assignments(
    mdp: TabularMdp,
    idx: QIndex,
    data,
    sigma: float,
    eps: float,
    cap: int = 1_000_000,
) -> AssignmentPartition:
    """Enumerate maximiser assignments over the observed successor states.

    Raises
    ------
    AssignmentCapError
        When the number of assignments exceeds ``cap``.
    """
    if not (sigma > 0 and eps > 0):
        raise ValueError("sigma and eps must be positive")
    records = [t for t in _unique_records(data) if not mdp.is_goal(t.s)]
    d = idx.d_theta
    succ = sorted({int(s) for t in records for s in mdp.successors(t.s, t.a)[0] if not mdp.is_goal(int(s))})
    choices = [sorted(mdp.actions[s]) for s in succ]
    total = math.prod(len(c) for c in choices)
    if total > cap:
        raise AssignmentCapError(f"{total} assignments exceed the cap of {cap}")
    n = len(records)
    r = np.array([t.r for t in records], dtype=float)
    s2 = sigma**2
    out = []
    for combo in itertools.product(*choices):
        ell = dict(zip(succ, combo))
        B = np.zeros((n, d))
        for i, t in enumerate(records):
            B[i, idx[(t.s, t.a)]] += 1.0
            sp, pr = mdp.successors(t.s, t.a)
            for s_next, p in zip(sp, pr):
                s_next = int(s_next)
                if not mdp.is_goal(s_next):
                    B[i, idx[(s_next, ell[s_next])]] -= p
        cons = []
        for s, a_star in ell.items():
            for a in mdp.actions[s]:
                if a != a_star:
                    row = np.zeros(d)
                    row[idx[(s, a_star)]] += 1.0
                    row[idx[(s, a)]] -= 1.0
                    cons.append(row)
        S = s2 * B @ B.T + eps**2 * np.eye(n)
        if n:
            gamma = np.linalg.inv(S)
            mean = s2 * B.T @ gamma @ r
            cov = s2 * np.eye(d) - s2**2 * B.T @ gamma @ B
            logw = float(multivariate_normal(np.zeros(n), S).logpdf(r))
        else:
            mean, cov, logw = np.zeros(d), s2 * np.eye(d), 0.0
        cov = 0.5 * (cov + cov.T)
        out.append(Assignment(ell, B, logw, mean, cov, np.array(cons).reshape(-1, d)))
    return AssignmentPartition(succ, out, r, sigma, eps)


def _cholesky(cov: np.ndarray) -> np.ndarray:
    d = cov.shape[0]
    scale = max(float(np.max(np.abs(np.diag(cov)), initial=0.0)), 1.0)
    jitter = _JITTER
    for _ in range(12):
        try:
            return np.linalg.cholesky(cov + jitter * scale * np.eye(d))
        except np.linalg.LinAlgError:
            jitter *= 10
    raise np.linalg.LinAlgError("conditional covariance is not positive definite")


def event_probability(
    mdp: TabularMdp,
    idx: QIndex,
    data,
    sigma: float,
    eps: float,
    event: LinearEvent | str | Sequence[str] | None,
    n_mc: int = 1_000_000,
    rng: np.random.Generator | None = None,
    cap: int = 1_000_000,
    batch: int = 250_000,
) -> tuple[float, float]:
    """Posterior probability of a polyhedral event and its Monte Carlo SE.

    Returns ``(p, se)``; the standard error comes from the delta method for
    the ratio of the two weighted sums of truncated masses.
    """
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000")
    rng = np.random.default_rng() if rng is None else rng
    d = idx.d_theta
    if not isinstance(event, LinearEvent):
        event = parse_event(event, d)
    if event.A.shape[0] == 0:
        return 1.0, 0.0
    part = enumerate_assignments(mdp, idx, data, sigma, eps, cap)
    logw = np.array([a.log_weight for a in part.assignments])
    w = np.exp(logw - logw.max())
    num = np.zeros(len(w))
    den = np.zeros(len(w))
    # per-assignment sums of I_q, I_m, I_q^2 = I_q, I_m^2 = I_m, I_q I_m = I_q
    for k, asg in enumerate(part.assignments):
        chol = _cholesky(asg.cov)
        q_hits = m_hits = 0
        left = n_mc
        while left > 0:
            b = min(batch, left)
            z = asg.mean + rng.standard_normal((b, d)) @ chol.T
            in_m = np.all(z @ asg.constraints.T >= 0, axis=1) if asg.constraints.size else np.ones(b, dtype=bool)
            in_q = in_m & event.contains(z)
            m_hits += int(in_m.sum())
            q_hits += int(in_q.sum())
            left -= b
        num[k], den[k] = q_hits / n_mc, m_hits / n_mc
    Q, M = float(w @ num), float(w @ den)
    if M <= 0:
        raise FloatingPointError("no Monte Carlo draw fell inside any assignment region")
    p = Q / M
    # Var(I_q - p I_m) per assignment, using I_q <= I_m
    var_terms = num * (1 - 2 * p) + p**2 * den - (num - p * den) ** 2
    se = math.sqrt(max(float(np.sum(w**2 * var_terms)) / n_mc, 0.0)) / M
    return p, se


def five_state_choice_probability(r1: float, r2: float, r3: float, r4: float, sigma: float, eps: float) -> float:
    """Closed-form posterior probability that ``theta_1 > theta_2`` on the
    five-state chain with complete data."""
    if not (sigma > 0 and eps > 0):
        raise ValueError("sigma and eps must be positive")
    d = r1 - r2
    c = r2 + r4 - r1 - r3
    k = eps**2 / sigma**2
    scale = sigma * math.sqrt(2 * k * (k + 2) * (k * k + 3 * k + 1))
    return float(ndtr((k * d - c) / scale))


def five_state_oracle(r1, r2, r3, r4, sigma, eps, n_mc=1_000_000, rng=None):
    """Monte Carlo counterpart of :func:`five_state_choice_probability`."""
    mdp = five_state_example(r1, r2, r3, r4)
    idx = QIndex(mdp)
    data = [Transition(0, 0, r1, 1), Transition(0, 1, r2, 2), Transition(1, 0, r3, 3), Transition(2, 1, r4, 4)]
    return event_probability(mdp, idx, data, sigma, eps, "theta_1>theta_2", n_mc, rng)
