"""
Scikit-learn style estimators over tabular action values.

``fit`` takes observed transitions as rows ``(s, a, r, s_next)`` of an
environment named by the ``env`` parameter. ``predict`` maps states to
greedy actions under the posterior mean, ``predict_proba`` gives the
posterior probability of each action being greedy, and ``score`` is the
negative empirical Bellman error on held-out transitions.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_states, check_transitions
from .hmc import HmcPlan, hmc_batch, hmc_chain
from .mdp import Dataset, QIndex, make_env
from .model import BellmanModel, Posterior, PriorSpec, ToleranceAssignment, empirical_bellman_error
from .rng import substream
from .smc import ParticleSet, SmcConfig, SmcEngine

__all__ = ["OfflineHMCPosterior", "SMCQPosterior"]


class _QPosteriorMixin:
    """Prediction helpers shared by the sample- and particle-based estimators."""

    def _draws(self):
        """Posterior draws and their weights."""
        raise NotImplementedError

    def _action_values(self, theta, s):
        acts = sorted(self.mdp_.actions[s])
        if self.mdp_.is_goal(s):
            return acts, np.zeros((len(acts),) + np.shape(theta)[:-1])
        return acts, np.array([theta[..., self.idx_[(s, a)]] for a in acts])

    def predict(self, states):
        """Greedy action under the posterior mean for each state."""
        check_is_fitted(self)
        states = check_states(states, self.mdp_)
        out = np.empty(states.size, dtype=int)
        for i, s in enumerate(states):
            acts, q = self._action_values(self.mean_, int(s))
            out[i] = acts[int(np.argmax(q))]
        return out

    def predict_proba(self, states):
        """Posterior probability that each action is greedy.

        Returns an array of shape ``(n_states, max_actions)``; columns follow
        the sorted admissible actions and are zero-padded. Ties split evenly.
        """
        check_is_fitted(self)
        states = check_states(states, self.mdp_)
        thetas, w = self._draws()
        width = max(len(a) for a in self.mdp_.actions)
        out = np.zeros((states.size, width))
        for i, s in enumerate(states):
            acts, q = self._action_values(thetas, int(s))
            top = q == q.max(axis=0)
            out[i, : len(acts)] = (top / top.sum(axis=0)) @ w
        return out

    def score(self, X, y=None):
        """Negative weighted mean squared Bellman error on ``X``."""
        check_is_fitted(self)
        data = check_transitions(X, self.mdp_)
        thetas, w = self._draws()
        return -empirical_bellman_error(ParticleSet(thetas, np.log(w)), self.mdp_, self.idx_, data)


class OfflineHMCPosterior(_QPosteriorMixin, BaseEstimator):
    """HMC samples from the fixed-tolerance posterior on a fixed dataset.

    Parameters
    ----------
    env : str
        Environment spec, e.g. ``"two_state"`` or ``"deep_sea:5"``.
    eps : float
        Kernel width for every observation.
    prior_sigma : float
    n_samples : int
        Kept samples after warm-up.
    n_warmup : int
        Warm-up transitions used to tune the step size and the mass.
    n_leapfrog : int
    target_accept : float
        Acceptance rate the step-size adaptation aims for.
    seed : int

    Attributes
    ----------
    samples_ : ndarray, shape (n_samples, d_theta)
    mean_ : ndarray
    step_size_ : float
        Upper end of the per-transition step size, drawn uniformly from
        ``[0.8, 1.0]`` times this value.
    mass_diag_ : ndarray
    accept_rate_ : float
    """

    def __init__(
        self,
        env="two_state",
        eps=0.05,
        prior_sigma=4.0,
        n_samples=10_000,
        n_warmup=1_000,
        n_leapfrog=10,
        target_accept=0.8,
        seed=0,
    ):
        self.env = env
        self.eps = eps
        self.prior_sigma = prior_sigma
        self.n_samples = n_samples
        self.n_warmup = n_warmup
        self.n_leapfrog = n_leapfrog
        self.target_accept = target_accept
        self.seed = seed

    def _check_params(self):
        if not (self.eps > 0 and self.prior_sigma > 0):
            raise ValueError("eps and prior_sigma must be positive")
        if self.n_samples < 1 or self.n_warmup < 0 or self.n_leapfrog < 1:
            raise ValueError("n_samples and n_leapfrog must be >= 1, n_warmup >= 0")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")

    def fit(self, X, y=None):
        self._check_params()
        self.mdp_ = make_env(self.env)
        self.idx_ = QIndex(self.mdp_)
        data = check_transitions(X, self.mdp_)
        self.n_records_ = len(data)
        d = self.idx_.d_theta
        empty = BellmanModel(self.mdp_, self.idx_, [])
        post = Posterior(
            PriorSpec(self.prior_sigma),
            BellmanModel(self.mdp_, self.idx_, data),
            empty,
            ToleranceAssignment(self.eps, self.eps),
        )
        theta = self._initial_point(post, d)
        delta, mass = self._warmup(post, theta)
        plan = HmcPlan(delta, self.n_leapfrog, mass, self.n_samples)

        cache = {}

        def both(t):
            # the chain asks for the density and the gradient at the same points
            key = t.tobytes()
            if key not in cache:
                cache.clear()
                lp, g = post.logpdf_and_grad(t[None])
                cache[key] = (float(lp[0]), g[0])
            return cache[key]

        def logpdf(t):
            return both(t)[0]

        def grad(t):
            return both(t)[1]

        # a fixed trajectory length can resonate with the target's period;
        # jittering the step size per transition breaks that
        one = plan.replace(max_steps=1)
        rng = substream(self.seed, "offline-sample")
        jitter = substream(self.seed, "offline-jitter").uniform(0.8, 1.0, self.n_samples)
        state = self._warm_state if d else theta
        samples, accepts = np.empty((self.n_samples, d)), 0
        for i in range(self.n_samples):
            stats = hmc_chain(state, one, delta * jitter[i], self.n_leapfrog, logpdf, grad, rng)
            state = stats.samples[-1]
            samples[i] = state
            accepts += stats.accepts
        self.samples_ = samples
        self.mean_ = self.samples_.mean(axis=0)
        self.step_size_ = delta
        self.mass_diag_ = mass
        self.accept_rate_ = accepts / self.n_samples
        return self

    def _initial_point(self, post, d, n_starts=8):
        """Best local mode over a few prior draws and the origin.

        The density is flat wherever a record's greedy action disagrees with
        the data, so a chain started there can stay far from the bulk.
        """
        if d == 0:
            return np.zeros(0)
        rng = substream(self.seed, "offline-init")
        starts = np.vstack([np.zeros(d), self.prior_sigma * rng.standard_normal((n_starts - 1, d))])

        def neg(t):
            lp, g = post.logpdf_and_grad(t[None])
            return -float(lp[0]), -g[0]

        best, best_val = starts[0], np.inf
        for x0 in starts:
            res = minimize(neg, x0, jac=True, method="L-BFGS-B")
            if np.isfinite(res.fun) and res.fun < best_val:
                best, best_val = res.x, res.fun
        return np.asarray(best, dtype=float)

    def _warmup(self, post, theta):
        """Robbins-Monro step-size tuning; the mass comes from the second half."""
        d = theta.size
        self._warm_state = theta
        if d == 0 or self.n_warmup == 0:
            return 0.1, np.ones(d)
        rng = substream(self.seed, "offline-warmup")
        log_delta = math.log(0.1)
        mass = np.ones(d)
        half = self.n_warmup // 2
        state = theta[None, :].copy()
        kept, log_deltas = [], []
        for w in range(self.n_warmup):
            delta = math.exp(log_delta)
            chain, acc, _ = hmc_batch(
                state, [delta], [self.n_leapfrog], post.logpdf_and_grad, mass, [rng], 1
            )
            state = chain[:, -1, :]
            # decaying gain; restart the schedule when the mass changes
            k = w + 1 if w < half else w - half + 1
            log_delta += (float(acc[0]) - self.target_accept) / k**0.6
            if w >= half // 2 and w < half:
                kept.append(state[0].copy())
            if w == half - 1 and len(kept) > 1:
                var = np.var(np.array(kept), axis=0)
                mass = 1.0 / np.maximum(var, 1e-8)
                # step sizes are relative to the new scale
                log_delta = math.log(0.5)
            if w >= half + (self.n_warmup - half) // 2:
                log_deltas.append(log_delta)
        self._warm_state = state[0]
        final = math.exp(np.mean(log_deltas)) if log_deltas else math.exp(log_delta)
        return final, mass

    def _draws(self):
        n = self.samples_.shape[0]
        return self.samples_, np.full(n, 1.0 / n)


class SMCQPosterior(_QPosteriorMixin, BaseEstimator):
    """Particle approximation of the posterior, updated as data arrives.

    ``fit`` starts from the prior; ``partial_fit`` adds only transitions not
    seen before (deterministic rewards) and moves the particles with the
    staged tolerance schedule.

    Parameters
    ----------
    env : str
    n_particles : int
    prior_sigma : float
    eps_target : float
    mode : {"adaptive", "non_adaptive"}
    max_hmc_steps : int
    seed : int

    Attributes
    ----------
    particles_ : ParticleSet
    tolerance_ : float
    trace_ : list of TraceRow
    mean_ : ndarray
    """

    def __init__(self, env="two_state", n_particles=200, prior_sigma=4.0, eps_target=0.05, mode="non_adaptive", max_hmc_steps=30, seed=0):
        self.env = env
        self.n_particles = n_particles
        self.prior_sigma = prior_sigma
        self.eps_target = eps_target
        self.mode = mode
        self.max_hmc_steps = max_hmc_steps
        self.seed = seed

    def _engine(self):
        if self.mode not in ("adaptive", "non_adaptive"):
            raise ValueError("mode must be adaptive or non_adaptive")
        if not (self.eps_target > 0 and self.prior_sigma > 0):
            raise ValueError("eps_target and prior_sigma must be positive")
        cfg = SmcConfig(adaptive=self.mode == "adaptive", max_hmc_steps=self.max_hmc_steps)
        return SmcEngine(self.mdp_, PriorSpec(self.prior_sigma), cfg, self.seed)

    def fit(self, X, y=None):
        self.mdp_ = make_env(self.env)
        self.idx_ = QIndex(self.mdp_)
        self.engine_ = self._engine()
        self.dataset_ = Dataset(dedup_mode="unique_pairs" if self.mdp_.deterministic_rewards else "multiset")
        self.particles_ = self.engine_.initial_particles(self.n_particles)
        self.tolerance_ = float(self.eps_target)
        self.trace_ = []
        return self._assimilate(X)

    def partial_fit(self, X, y=None):
        if not hasattr(self, "particles_"):
            return self.fit(X)
        return self._assimilate(X)

    def _assimilate(self, X):
        new = self.dataset_.new_records(check_transitions(X, self.mdp_))
        if new or self.tolerance_ > self.eps_target:
            self.particles_, state, rows = self.engine_.update(
                self.particles_, self.dataset_.records, new, self.tolerance_, self.eps_target
            )
            self.tolerance_ = float(state.eps_old)
            self.trace_.extend(rows)
            self.dataset_.extend(new)
        self.mean_ = self.particles_.mean()
        return self

    def _draws(self):
        return self.particles_.thetas, self.particles_.weights()
