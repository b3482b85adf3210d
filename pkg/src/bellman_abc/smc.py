"""
Sequential Monte Carlo over a growing dataset with staged tolerance annealing.

Stages, named as in the trace output:

``I``    new data enters with a finite tolerance (from unconstrained)
``II``   the new-data tolerance is lowered toward the old-data one
``III``  the common tolerance is lowered toward the target
``IVa``  the old-data tolerance is raised (MCMC ineffective, tolerances differ)
``IVb``  the common tolerance is raised (MCMC ineffective, tolerances equal)

Each SMC step reweights, resamples when the ESS falls below ``N/2``, adapts
the HMC kernel from trial trajectories and mutates every particle with up to
``M`` HMC transitions.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .hmc import HmcPlan, hmc_batch, leapfrog_batch
from .mdp import Dataset, QIndex, TabularMdp
from .model import (
    UNCONSTRAINED,
    BellmanModel,
    Posterior,
    PriorSpec,
    ToleranceAssignment,
    is_unconstrained,
    partition_loglik,
)
from .rng import substream

__all__ = [
    "STAGES",
    "ParticleSet",
    "ToleranceState",
    "GrDiagnostic",
    "TraceRow",
    "SmcConfig",
    "DegeneracyError",
    "InvalidTransitionError",
    "ess",
    "reweight",
    "resample_multinomial",
    "find_tolerance",
    "adapt_kernel",
    "gelman_rubin",
    "smc_one_step",
    "SmcEngine",
    "update_posterior",
    "valid_stage_sequence",
    "thread_count",
]

STAGES = ("I", "II", "III", "IVa", "IVb")
_LOG_09 = abs(math.log(0.9))
_VAR_FLOOR = 1e-8


class DegeneracyError(RuntimeError):
    """All particle weights vanished."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace if trace is not None else []


class InvalidTransitionError(ValueError):
    """A tolerance move that does not match its stage."""


@dataclass
class ParticleSet:
    """Weighted particles with cached squared-residual sums per partition.

    ``log_weights`` are kept normalised (``logsumexp == 0``). ``n_old`` and
    ``n_new`` are the sizes of the partitions the caches refer to.
    """

    thetas: np.ndarray
    log_weights: np.ndarray
    r_old: np.ndarray | None = None
    r_new: np.ndarray | None = None
    n_old: int = 0
    n_new: int = 0

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        n = self.thetas.shape[0]
        if n < 2:
            raise ValueError("a particle set needs at least two particles")
        self.log_weights = _normalise(np.asarray(self.log_weights, dtype=float))
        self.r_old = np.zeros(n) if self.r_old is None else np.asarray(self.r_old, dtype=float)
        self.r_new = np.zeros(n) if self.r_new is None else np.asarray(self.r_new, dtype=float)

    @classmethod
    def uniform(cls, thetas) -> "ParticleSet":
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        return cls(thetas, np.zeros(thetas.shape[0]))

    @property
    def n(self) -> int:
        return self.thetas.shape[0]

    @property
    def d(self) -> int:
        return self.thetas.shape[1]

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def copy(self) -> "ParticleSet":
        return ParticleSet(
            self.thetas.copy(), self.log_weights.copy(), self.r_old.copy(), self.r_new.copy(), self.n_old, self.n_new
        )

    def mean(self) -> np.ndarray:
        return self.weights() @ self.thetas

    def variance(self) -> np.ndarray:
        w = self.weights()
        mu = w @ self.thetas
        return w @ (self.thetas - mu) ** 2

    def loglik(self, tol: ToleranceAssignment) -> np.ndarray:
        return partition_loglik(tol.eps_old, self.r_old, self.n_old) + partition_loglik(
            tol.eps_new, self.r_new, self.n_new
        )


def _normalise(log_w: np.ndarray) -> np.ndarray:
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    if not np.any(np.isfinite(log_w)):
        raise DegeneracyError("all particle weights are zero")
    return log_w - logsumexp(log_w)


@dataclass
class ToleranceState:
    eps_old: float
    eps_new: float | object
    stage: str = "done"
    c_m: int = 0
    c_b: int = 0
    exit_reason: str = ""

    @property
    def tol(self) -> ToleranceAssignment:
        return ToleranceAssignment(self.eps_old, self.eps_new)


@dataclass
class GrDiagnostic:
    W: np.ndarray
    B: np.ndarray
    sigma_hat_sq: np.ndarray
    pass_fraction: float


@dataclass
class TraceRow:
    update_index: int
    stage: str
    eps_old: float
    eps_new: float | object
    ess: float
    resampled: bool
    gr_pass_fraction: float
    bellman_error: float
    accept_rate: float


@dataclass
class SmcConfig:
    """Tuning constants of the SMC sampler.

    ``adaptive=False`` disables the Gelman-Rubin and Bellman-error checks so
    the tolerance path is driven by the ESS rule alone.
    """

    alpha: float = 0.9
    gr_threshold: float = 2.2
    gr_majority: float = 0.5
    n_m: int = 3
    n_b: int = 5
    bellman_rel_improvement: float = 0.01
    max_hmc_steps: int = 30
    min_hmc_steps: int = 5
    delta_star0: float = 0.5
    l_star0: int = 10
    l_star_max: int = 100
    adaptive: bool = True
    max_smc_steps: int = 500
    bisect_max_iter: int = 100
    bisect_rel_tol: float = 1e-3
    chunk_size: int = 32

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 <= self.gr_majority <= 1:
            raise ValueError("gr_majority must lie in [0, 1]")
        for name in ("n_m", "n_b", "l_star0", "max_smc_steps", "chunk_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_hmc_steps < 0 or self.delta_star0 <= 0:
            raise ValueError("invalid HMC settings")


def thread_count() -> int:
    """Worker threads, capped by ``BELLMAN_ABC_THREADS``."""
    env = os.environ.get("BELLMAN_ABC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"BELLMAN_ABC_THREADS must be an integer, got {env!r}") from None
    return max(1, os.cpu_count() or 1)


# ---------------------------------------------------------------- weights


def ess(log_weights) -> float:
    """``(sum w)^2 / sum w^2`` computed in log space."""
    lw = np.asarray(log_weights, dtype=float)
    lw = np.where(np.isnan(lw), -np.inf, lw)
    if not np.any(np.isfinite(lw)):
        raise DegeneracyError("all particle weights are zero")
    return float(np.exp(2 * logsumexp(lw) - logsumexp(2 * lw)))


def _check_transition(stage: str, tf: ToleranceAssignment, tt: ToleranceAssignment) -> None:
    uf, ut = is_unconstrained(tf.eps_new), is_unconstrained(tt.eps_new)
    ok = False
    if stage == "I":
        ok = uf and not ut and tt.eps_old == tf.eps_old
    elif stage == "II":
        ok = not uf and tt.eps_old == tf.eps_old and tt.eps_new <= tf.eps_new
    elif stage in ("III", "IVb"):
        ok = tf.common and tt.common
        if ok and stage == "III":
            ok = tt.eps_old <= tf.eps_old
        elif ok:
            ok = tt.eps_old >= tf.eps_old
    elif stage == "IVa":
        ok = not uf and tt.eps_new == tf.eps_new and tt.eps_old >= tf.eps_old
    if not ok:
        raise InvalidTransitionError(f"stage {stage} cannot move {tf} to {tt}")


def reweight(particles: ParticleSet, stage: str, eps_from: ToleranceAssignment, eps_to: ToleranceAssignment) -> np.ndarray:
    """Normalised log weights after moving the target from ``eps_from`` to ``eps_to``.

    The increment is the change of the cached partition log-likelihoods,
    which reproduces every row of the weight-update table with the Gaussian
    kernel.
    """
    _check_transition(stage, eps_from, eps_to)
    inc = particles.loglik(eps_to) - particles.loglik(eps_from)
    return _normalise(particles.log_weights + inc)


def resample_multinomial(particles: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Multinomial resampling; weights reset to ``1/N``."""
    w = particles.weights()
    anc = rng.choice(particles.n, size=particles.n, p=w / w.sum())
    anc.sort()
    return ParticleSet(
        particles.thetas[anc].copy(),
        np.zeros(particles.n),
        particles.r_old[anc].copy(),
        particles.r_new[anc].copy(),
        particles.n_old,
        particles.n_new,
    )


# ---------------------------------------------------------------- tolerance search


def _assign(stage: str, current: ToleranceAssignment, x: float) -> ToleranceAssignment:
    if stage in ("I", "II"):
        return ToleranceAssignment(current.eps_old, x)
    if stage in ("III", "IVb"):
        return ToleranceAssignment(x, x)
    if stage == "IVa":
        return ToleranceAssignment(x, current.eps_new)
    raise InvalidTransitionError(f"unknown stage {stage!r}")


def _stage_value(stage: str, current: ToleranceAssignment):
    return current.eps_old if stage == "IVa" or current.common else current.eps_new


def find_tolerance(
    particles: ParticleSet,
    stage: str,
    eps_current: ToleranceAssignment,
    eps_target: float,
    alpha: float,
    direction: str = "decrease",
    cap: float | None = None,
    max_iter: int = 100,
    rel_tol: float = 1e-3,
) -> float:
    """Next tolerance under the ESS rule.

    Returns ``eps_target`` (decrease) or ``cap`` (increase) when that value
    keeps ``ESS >= alpha * ESS_current``; otherwise bisects ``log eps`` until
    ``|ESS - alpha * E| <= rel_tol * alpha * E``.
    """
    E = ess(particles.log_weights)
    goal = alpha * E
    base = particles.loglik(eps_current)

    def ess_at(x):
        inc = particles.loglik(_assign(stage, eps_current, x)) - base
        lw = particles.log_weights + inc
        if not np.any(np.isfinite(lw)):
            return 0.0
        return ess(lw)

    if direction == "decrease":
        if ess_at(eps_target) >= goal:
            return float(eps_target)
        lo = float(eps_target)
        cur = _stage_value(stage, eps_current)
        if is_unconstrained(cur):
            hi = max(2.0 * lo, 1.0)
            for _ in range(2000):
                if ess_at(hi) >= goal:
                    break
                hi *= 2.0
            else:
                raise DegeneracyError("could not bracket the initial tolerance")
        else:
            hi = float(cur)
        good, bad = hi, lo
    elif direction == "increase":
        if cap is None:
            raise ValueError("an increase needs a cap")
        if ess_at(cap) >= goal:
            return float(cap)
        good, bad = float(_stage_value(stage, eps_current)), float(cap)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    best = good
    for _ in range(max_iter):
        mid = math.sqrt(good * bad)
        e_mid = ess_at(mid)
        if abs(e_mid - goal) <= rel_tol * goal:
            return mid
        if e_mid >= goal:
            good = best = mid
        else:
            bad = mid
        if abs(good - bad) <= 1e-15 * good:
            break
    return best


# ---------------------------------------------------------------- kernel adaptation


def _golden_min(f: Callable[[float], float], a: float, b: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    invphi = (math.sqrt(5) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2


@dataclass
class KernelTrials:
    deltas: np.ndarray
    Ls: np.ndarray
    zeta: np.ndarray
    esjd: np.ndarray
    alpha_star: float


def _weighted_var(thetas, log_weights):
    w = np.exp(log_weights)
    mu = w @ thetas
    return w @ (thetas - mu) ** 2


def adapt_kernel(
    prev_particles: ParticleSet,
    current_thetas: np.ndarray,
    logpdf_and_grad: Callable,
    plan: HmcPlan,
    rngs: Sequence[np.random.Generator],
    pick_rng: np.random.Generator,
    l_star_max: int | None = None,
):
    """Tune mass, step-size bound and leapfrog bound from trial trajectories.

    Parameters
    ----------
    prev_particles : ParticleSet
        Weighted particles used for the variance estimate.
    current_thetas : ndarray
        Starting points of the trials.
    logpdf_and_grad : callable
        Batched target of the coming mutation.
    rngs : one generator per particle for the trials
    pick_rng : generator for resampling hyperparameters

    Returns
    -------
    plan : HmcPlan
    deltas, Ls : ndarray
        Per-particle step size and leapfrog count.
    trials : KernelTrials
    """
    thetas = np.asarray(current_thetas, dtype=float)
    n, d = thetas.shape
    var = _weighted_var(prev_particles.thetas, prev_particles.log_weights)
    if np.any(var < _VAR_FLOOR):
        warnings.warn("particle variance below 1e-8 in some dimension; flooring the mass", RuntimeWarning, stacklevel=2)
        var = np.maximum(var, _VAR_FLOOR)
    mass = 1.0 / var
    sd = np.sqrt(mass)
    d_trial = np.array([r.uniform(0.0, plan.delta_star) for r in rngs])
    l_trial = np.array([r.integers(1, plan.l_star + 1) for r in rngs])
    p0 = np.stack([r.standard_normal(d) for r in rngs]) * sd

    lp0, g0 = logpdf_and_grad(thetas)
    h0 = -lp0 + np.sum(p0 * p0 / (2 * mass), axis=1)
    th1, p1, lp1, _, finite = leapfrog_batch(thetas, p0, d_trial, l_trial, logpdf_and_grad, mass, (lp0, g0))
    with np.errstate(invalid="ignore", over="ignore"):
        h1 = -lp1 + np.sum(p1 * p1 / (2 * mass), axis=1)
        zeta = np.where(finite & np.isfinite(h1), h0 - h1, -np.inf)
        jump = np.sum((th1 - thetas) ** 2 * var, axis=1) / l_trial
        esjd = np.where(np.isfinite(zeta), jump * np.minimum(1.0, np.exp(np.minimum(zeta, 0.0))), 0.0)

    ok = np.isfinite(zeta) & (d_trial > 0)
    abs_z, dd = np.abs(zeta[ok]), d_trial[ok] ** 2
    alpha_star = 0.0
    if ok.any():
        hi = float(np.max(abs_z / dd))
        if hi > 0:
            alpha_star = _golden_min(lambda a: float(np.sum(np.abs(abs_z - a * dd))), 0.0, hi)
    cands = []
    if alpha_star > 0:
        cands.append(math.sqrt(_LOG_09 / alpha_star))
    passing = d_trial[np.isfinite(zeta) & (np.abs(zeta) < _LOG_09)]
    if passing.size:
        cands.append(float(passing.max()))
    delta_star = max(cands) if cands else 0.5 * plan.delta_star
    delta_star = max(delta_star, 1e-6)

    total = esjd.sum()
    if total > 0 and np.isfinite(total):
        pick = pick_rng.choice(n, size=n, p=esjd / total)
    else:
        pick = pick_rng.integers(0, n, size=n)
    deltas = np.minimum(np.maximum(d_trial[pick], 1e-12), delta_star)
    Ls = l_trial[pick]

    l_star = plan.l_star
    if np.mean(Ls >= np.percentile(l_trial, 80)) > 0.5:
        l_star += 5
    elif np.mean(Ls <= np.percentile(l_trial, 20)) > 0.5 and l_star > 5:
        l_star = max(5, l_star - 5)
    if l_star_max is not None:
        l_star = min(l_star, l_star_max)
    new_plan = plan.replace(delta_star=delta_star, l_star=l_star, mass_diag=mass)
    return new_plan, deltas, Ls, KernelTrials(d_trial, l_trial, zeta, esjd, alpha_star)


# ---------------------------------------------------------------- diagnostics


def gelman_rubin(chains, threshold: float = 2.2, majority: float = 0.5):
    """Between/within chain variance ratio per dimension.

    Parameters
    ----------
    chains : array_like, shape (N, M, d)
        ``N`` chains of ``M`` states each.

    Returns
    -------
    GrDiagnostic, bool
        The diagnostic and whether at least ``majority`` of the dimensions
        have ``sigma_hat_sq < threshold``. Dimensions with ``W == 0`` fail.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    n, m, _ = x.shape
    if n < 2 or m < 2:
        raise ValueError("gelman_rubin needs at least two chains of length two")
    chain_mean = x.mean(axis=1)
    grand = chain_mean.mean(axis=0)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    # rounding in the mean leaves W slightly positive for chains that never moved
    W = np.where(np.ptp(x, axis=1).max(axis=0) > 0, W, 0.0)
    B = m / (n - 1) * np.sum((chain_mean - grand) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s2 = np.where(W > 0, ((m - 1) / m * W + B) / W, np.inf)
    passed = (W > 0) & (s2 < threshold)
    frac = float(passed.mean())
    return GrDiagnostic(W, B, s2, frac), frac >= majority


# ---------------------------------------------------------------- one SMC step


class ChunkedTarget:
    """Evaluate a batched target in fixed-size row chunks, possibly threaded.

    Rows are independent, so the result is identical for any thread count.
    """

    def __init__(self, posterior: Posterior, chunk: int = 32, pool: ThreadPoolExecutor | None = None):
        self.posterior = posterior
        self.chunk = chunk
        self.pool = pool

    def __call__(self, thetas):
        n = thetas.shape[0]
        if self.pool is None or n <= self.chunk:
            return self.posterior.logpdf_and_grad(thetas)
        parts = [thetas[i : i + self.chunk] for i in range(0, n, self.chunk)]
        out = list(self.pool.map(self.posterior.logpdf_and_grad, parts))
        return np.concatenate([o[0] for o in out]), np.concatenate([o[1] for o in out])


@dataclass
class StepInfo:
    ess: float
    resampled: bool
    accept_rate: float
    n_moves: int


def smc_one_step(
    particles: ParticleSet,
    stage: str,
    eps_from: ToleranceAssignment,
    eps_to: ToleranceAssignment,
    plan: HmcPlan,
    posterior: Posterior,
    seed: int,
    step_id: int,
    config: SmcConfig | None = None,
    pool: ThreadPoolExecutor | None = None,
):
    """Reweight, resample if ``ESS < N/2``, adapt the kernel and mutate.

    ``posterior`` is the target at ``eps_to``. Random streams are keyed by
    ``(seed, purpose, step_id, particle)``.

    Returns
    -------
    particles, plan, chains, GrDiagnostic or None, effective, StepInfo
    """
    config = config or SmcConfig()
    posterior = posterior.with_tolerance(eps_to)
    n = particles.n
    lw = reweight(particles, stage, eps_from, eps_to)
    weighted = replace(particles.copy(), log_weights=lw)
    e = ess(lw)
    resampled = e < n / 2
    current = resample_multinomial(weighted, substream(seed, "resample", step_id)) if resampled else weighted

    target = ChunkedTarget(posterior, config.chunk_size, pool)
    if plan.max_steps == 0:
        return current, plan, np.empty((n, 0, particles.d)), None, True, StepInfo(e, resampled, float("nan"), 0)

    trial_rngs = [substream(seed, "adapt", step_id, i) for i in range(n)]
    plan, deltas, Ls, _ = adapt_kernel(
        weighted, current.thetas, target, plan, trial_rngs, substream(seed, "adapt-pick", step_id), config.l_star_max
    )

    def stop(m, samples):
        if not config.adaptive or m < config.min_hmc_steps:
            return False
        return gelman_rubin(np.stack(samples, axis=1), config.gr_threshold, config.gr_majority)[1]

    move_rngs = [substream(seed, "mutate", step_id, i) for i in range(n)]
    chains, accepts, _ = hmc_batch(current.thetas, deltas, Ls, target, plan.mass_diag, move_rngs, plan.max_steps, stop)
    m = chains.shape[1]
    new_thetas = chains[:, -1, :]
    r_old, r_new = posterior.residual_sums(new_thetas)
    out = ParticleSet(new_thetas, current.log_weights, r_old, r_new, particles.n_old, particles.n_new)
    diag, effective = (gelman_rubin(chains, config.gr_threshold, config.gr_majority) if m >= 2 else (None, False))
    info = StepInfo(e, bool(resampled), float(accepts.sum() / (n * m)), m)
    return out, plan, chains, diag, effective, info


# ---------------------------------------------------------------- full update


_NEXT = {
    None: {"I", "III"},
    "I": {"II", "III", "IVa", "IVb"},
    "II": {"II", "III", "IVa", "IVb"},
    "III": {"III", "IVb"},
    "IVa": {"IVa", "IVb", "II"},
    "IVb": {"IVb"},
}


def valid_stage_sequence(stages: Sequence[str]) -> bool:
    """Check the stages emitted by one update against the transition rules.

    A raising phase ending in ``IVb`` ends the update; a raising phase in
    ``IVa`` that restores effectiveness resumes ``II``. A closing run of
    ``II`` steps after ``IVa`` (see :meth:`SmcEngine.update`) is allowed.
    """
    prev = None
    for s in stages:
        if s not in _NEXT.get(prev, set()):
            return False
        prev = s
    return True


class SmcEngine:
    """Sequential posterior updates for one MDP and prior.

    Parameters
    ----------
    mdp : TabularMdp
    prior : PriorSpec
    config : SmcConfig
    seed : int
        Master seed for all random substreams.
    threads : int, optional
        Worker threads for target evaluation; defaults to
        :func:`thread_count`.
    """

    def __init__(self, mdp: TabularMdp, prior: PriorSpec, config: SmcConfig | None = None, seed: int = 0, threads: int | None = None):
        self.mdp = mdp
        self.idx = QIndex(mdp)
        self.prior = prior
        self.config = config or SmcConfig()
        self.seed = int(seed)
        self.threads = thread_count() if threads is None else max(1, int(threads))
        self.step_counter = 0
        self.update_counter = 0
        d = self.idx.d_theta
        self.plan = HmcPlan(self.config.delta_star0, self.config.l_star0, np.ones(d), self.config.max_hmc_steps)

    def initial_particles(self, n: int) -> ParticleSet:
        thetas = self.prior.sample(n, self.idx.d_theta, substream(self.seed, "init"))
        return ParticleSet.uniform(thetas)

    def _pool(self):
        return ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None

    def update(self, particles: ParticleSet, old_data, new_data, eps_old: float, eps_target: float):
        """Move particles from the posterior on ``old_data`` at ``eps_old`` to
        the posterior on both datasets at (ideally) ``eps_target``.

        Returns
        -------
        particles : ParticleSet
        state : ToleranceState
        trace : list of TraceRow
        """
        pool = self._pool()
        try:
            return self._update(particles, list(old_data or []), list(new_data or []), float(eps_old), float(eps_target), pool)
        finally:
            if pool is not None:
                pool.shutdown()

    def _update(self, particles, old, new, eps_old, eps_target, pool):
        cfg = self.config
        if eps_target <= 0:
            raise ValueError("eps_target must be positive")
        self.update_counter += 1
        uidx = self.update_counter
        m_old = BellmanModel(self.mdp, self.idx, old)
        m_new = BellmanModel(self.mdp, self.idx, new)
        m_all = BellmanModel(self.mdp, self.idx, old + new)
        post = Posterior(self.prior, m_old, m_new, ToleranceAssignment(eps_old, eps_old), joint=m_all)
        r_old, r_new = post.residual_sums(particles.thetas)
        parts = ParticleSet(particles.thetas, particles.log_weights, r_old, r_new, m_old.n, m_new.n)
        if not m_old.n:
            eps_old = eps_target
        if parts.d == 0:
            return parts, ToleranceState(eps_target, eps_target, "done", exit_reason="empty"), []

        tol = ToleranceAssignment(eps_old, UNCONSTRAINED if m_new.n else eps_old)
        st = ToleranceState(tol.eps_old, tol.eps_new)
        trace: list[TraceRow] = []
        raise_cap = None
        prev_be = None
        finishing = False
        n_steps = 0

        def bellman(p):
            return float(np.sum(p.weights() * m_all.sq_resid(p.thetas)))

        while True:
            if finishing and tol.common:
                break
            if raise_cap is not None and not finishing:
                stage = "IVb" if tol.common else "IVa"
                cap = raise_cap if tol.common else min(raise_cap, tol.eps_new)
                x = find_tolerance(parts, stage, tol, eps_target, cfg.alpha, "increase", cap, cfg.bisect_max_iter, cfg.bisect_rel_tol)
            elif is_unconstrained(tol.eps_new):
                stage = "I"
                target = eps_old if m_old.n else eps_target
                x = find_tolerance(parts, stage, tol, target, cfg.alpha, "decrease", None, cfg.bisect_max_iter, cfg.bisect_rel_tol)
            elif not tol.common:
                stage = "II"
                x = find_tolerance(parts, stage, tol, tol.eps_old, cfg.alpha, "decrease", None, cfg.bisect_max_iter, cfg.bisect_rel_tol)
            elif tol.eps_old > eps_target:
                stage = "III"
                x = find_tolerance(parts, stage, tol, eps_target, cfg.alpha, "decrease", None, cfg.bisect_max_iter, cfg.bisect_rel_tol)
            else:
                st.exit_reason = st.exit_reason or "target"
                break

            tol_to = _assign(stage, tol, x)
            self.step_counter += 1
            parts, self.plan, _, diag, effective, info = smc_one_step(
                parts, stage, tol, tol_to, self.plan, post, self.seed, self.step_counter, cfg, pool
            )
            n_steps += 1
            was_common = tol.common
            tol = tol_to
            if stage == "I" and m_old.n == 0:
                # the old partition is empty, so its tolerance is free
                tol = ToleranceAssignment(tol.eps_new, tol.eps_new)
            be = bellman(parts)
            trace.append(
                TraceRow(uidx, stage, tol.eps_old, tol.eps_new, info.ess, info.resampled,
                         diag.pass_fraction if diag is not None else float("nan"), be, info.accept_rate)
            )
            if not np.isfinite(be):
                raise DegeneracyError("non-finite Bellman error", trace)
            if finishing:
                continue

            if cfg.adaptive:
                if was_common and stage in ("III", "IVb"):
                    if prev_be is not None and not be < prev_be * (1 - cfg.bellman_rel_improvement):
                        st.c_b += 1
                    else:
                        st.c_b = 0
                if tol.common:
                    prev_be = be
                if raise_cap is not None:
                    if effective:
                        st.c_m = 0
                        raise_cap = None
                        if tol.common:
                            st.exit_reason = "raised"
                            break
                    elif x >= raise_cap * (1 - 1e-12):
                        st.exit_reason = "raise_cap"
                        finishing = True
                        continue
                elif effective:
                    st.c_m = 0
                else:
                    st.c_m += 1
                    if st.c_m >= cfg.n_m:
                        base = tol.eps_old
                        raise_cap = 2.0 * base
                if st.c_b >= cfg.n_b:
                    st.exit_reason = "bellman_stall"
                    finishing = True
                    continue
            if n_steps >= cfg.max_smc_steps:
                st.exit_reason = "max_steps"
                finishing = True

        # merge partitions: everything is now "old" at the common tolerance
        merged = ParticleSet(parts.thetas, parts.log_weights, parts.r_old + parts.r_new, np.zeros(parts.n), m_all.n, 0)
        st.eps_old, st.eps_new, st.stage = tol.eps_old, tol.eps_new, "done"
        return merged, st, trace


def update_posterior(particles, old_data, new_data, eps_old, eps_target, config, rng_seed, mdp=None, prior=None, engine=None):
    """Functional wrapper around :meth:`SmcEngine.update`.

    Either pass an existing ``engine`` or ``mdp`` and ``prior`` to build one.
    """
    if engine is None:
        if mdp is None or prior is None:
            raise ValueError("update_posterior needs an engine or an mdp and a prior")
        engine = SmcEngine(mdp, prior, config, rng_seed)
    return engine.update(particles, old_data, new_data, eps_old, eps_target)
