"""
Online exploration by posterior sampling.

Each episode draws one particle by weight, acts greedily with respect to it
until a goal (or the step cap) is reached, adds the new transitions to the
dataset and updates the particle approximation of the posterior.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import RunConfig
from .mdp import Dataset, QIndex, TabularMdp, Transition, optimal_value, step, value_iteration
from .model import PriorSpec
from .smc import ParticleSet, SmcEngine, TraceRow, ess
from .rng import substream

__all__ = [
    "EpisodeLog",
    "OnlineResult",
    "greedy_action",
    "regret",
    "learning_time",
    "run_online",
    "v_star_initial",
]


@dataclass
class EpisodeLog:
    episode: int
    steps: int
    ret: float
    regret: float
    cumulative_regret: float
    tolerance_at_end: float
    ess_at_end: float
    bellman_error_at_end: float


@dataclass
class OnlineResult:
    logs: list
    particles: ParticleSet
    trace: list
    snapshots: list = field(default_factory=list)
    error: Exception | None = None


def greedy_action(theta, idx: QIndex, mdp: TabularMdp, s: int, rng: np.random.Generator) -> int:
    """Greedy action at ``s``; exact ties are broken uniformly at random."""
    acts = sorted(mdp.actions[s])
    if len(acts) == 1 or mdp.is_goal(s):
        return acts[0]
    q = np.array([theta[idx[(s, a)]] for a in acts])
    best = np.flatnonzero(q == q.max())
    if len(best) == 1:
        return acts[int(best[0])]
    return acts[int(best[rng.integers(len(best))])]


def regret(returns, v_star_s0: float):
    """Per-episode and cumulative regret against ``V*(s0)``.

    ``returns`` may be episode returns or :class:`EpisodeLog` records.
    """
    rets = np.array([r.ret if isinstance(r, EpisodeLog) else r for r in returns], dtype=float)
    per = v_star_s0 - rets
    return per, np.cumsum(per)


def learning_time(logs) -> int | None:
    """First episode count ``E > 1`` with average regret at most 0.5."""
    per = np.array([x.regret if isinstance(x, EpisodeLog) else x for x in logs], dtype=float)
    if per.size < 2:
        return None
    avg = np.cumsum(per) / np.arange(1, per.size + 1)
    hits = np.flatnonzero(avg[1:] <= 0.5)
    return int(hits[0]) + 2 if hits.size else None


def v_star_initial(mdp: TabularMdp) -> float:
    """Expected optimal value under the initial distribution."""
    return float(mdp.initial_dist @ optimal_value(mdp, value_iteration(mdp)))


def _rollout(mdp, idx, theta, rng, max_steps):
    s = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
    out = []
    while not mdp.is_goal(s) and len(out) < max_steps:
        a = greedy_action(theta, idx, mdp, s, rng)
        r, s_next = step(mdp, s, a, rng)
        out.append(Transition(s, a, r, s_next))
        s = s_next
    return out


def run_online(
    mdp: TabularMdp,
    config: RunConfig,
    seed: int | None = None,
    threads: int | None = None,
    snapshot_stride: int = 0,
    stop_at_learning_time: bool = False,
) -> OnlineResult:
    """Posterior-sampling exploration for ``config.episodes`` episodes.

    Parameters
    ----------
    seed : int, optional
        Overrides ``config.seed``.
    snapshot_stride : int
        Keep a copy of the particles every this many episodes (0: never).
    stop_at_learning_time : bool
        End the run as soon as the learning time is reached.

    Notes
    -----
    The posterior is updated after every episode that adds new data, and
    also after episodes without new data while the tolerance is still above
    its target. For stochastic rewards the kernel width is the known noise
    level.
    A :class:`~bellman_abc.smc.DegeneracyError` ends the run; partial logs
    are returned with ``error`` set.
    """
    seed = config.seed if seed is None else int(seed)
    stochastic = not mdp.deterministic_rewards
    eps_target = float(mdp.reward_noise_sd) if stochastic else config.eps_target
    engine = SmcEngine(mdp, PriorSpec(config.prior_sigma), config.smc_config(), seed, threads)
    idx = engine.idx
    particles = engine.initial_particles(config.n_particles)
    data = Dataset(dedup_mode="multiset" if stochastic else "unique_pairs")
    v0 = v_star_initial(mdp)
    max_steps = 10 * mdp.n_states
    eps_current = eps_target
    logs, trace, snaps = [], [], []
    cum = 0.0
    bellman_now = float("nan")
    error = None
    for e in range(1, config.episodes + 1):
        pick = int(substream(seed, "pick", e).choice(particles.n, p=particles.weights()))
        episode = _rollout(mdp, idx, particles.thetas[pick], substream(seed, "episode", e), max_steps)
        new = data.new_records(episode)
        if new or eps_current > eps_target * (1 + 1e-9):
            try:
                particles, state, rows = engine.update(particles, data.records, new, eps_current, eps_target)
            except Exception as exc:  # degeneracy or numerical failure: keep partial output
                error = exc
                trace.extend(getattr(exc, "trace", []))
            else:
                eps_current = state.eps_old
                trace.extend(rows)
                if rows:
                    bellman_now = rows[-1].bellman_error
            data.extend(new)
        ret = float(sum(t.r for t in episode))
        reg = v0 - ret
        cum += reg
        logs.append(EpisodeLog(e, len(episode), ret, reg, cum, eps_current, ess(particles.log_weights), bellman_now))
        if snapshot_stride and (e % snapshot_stride == 0 or e == 1):
            snaps.append((e, particles.copy()))
        if error is not None:
            break
        if stop_at_learning_time and learning_time(logs) is not None:
            break
    return OnlineResult(logs, particles, trace, snaps, error)
