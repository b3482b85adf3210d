"""
Finite MDPs with absorbing goal states.

States are dense integers ``0..n_states-1``; ``state_labels`` maps them back
to structured labels (e.g. ``(row, col)`` cells for Deep Sea). Actions are
small integers, admissible per state.

Parameter indexing follows the tabular convention: every non-goal
state-action pair owns one coordinate of ``theta`` (0-based, in state then
action order) and goal pairs are appended after them with a value fixed at 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "TabularMdp",
    "QIndex",
    "Transition",
    "Dataset",
    "DivergenceError",
    "step",
    "deep_sea",
    "two_state_example",
    "five_state_example",
    "value_iteration",
    "make_env",
]


class DivergenceError(RuntimeError):
    """Value iteration failed to converge (no proper policy)."""


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite stochastic-shortest-path MDP.

    Parameters
    ----------
    actions : sequence of tuples of int
        Admissible actions for each state.
    goal_states : iterable of int
        Absorbing states. Each must have a single zero-reward self loop.
    transition : dict
        ``(s, a) -> probability vector`` over next states.
    mean_reward : dict
        ``(s, a) -> float``.
    initial_dist : array_like
        Initial state distribution.
    reward_noise_sd : float, optional
        Standard deviation of additive Gaussian reward noise. ``None`` means
        deterministic rewards.
    state_labels : sequence, optional
        Human-readable label per state.
    name : str
    """

    actions: tuple[tuple[int, ...], ...]
    goal_states: frozenset[int]
    transition: dict[tuple[int, int], np.ndarray]
    mean_reward: dict[tuple[int, int], float]
    initial_dist: np.ndarray
    reward_noise_sd: float | None = None
    state_labels: tuple[Hashable, ...] | None = None
    name: str = "mdp"
    _label_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.actions)
        labels = self.state_labels if self.state_labels is not None else tuple(range(n))
        object.__setattr__(self, "state_labels", tuple(labels))
        object.__setattr__(self, "goal_states", frozenset(int(g) for g in self.goal_states))
        object.__setattr__(self, "initial_dist", np.asarray(self.initial_dist, dtype=float))
        object.__setattr__(self, "_label_index", {lab: i for i, lab in enumerate(labels)})
        self._validate()

    def _validate(self):
        n = self.n_states
        if not self.goal_states:
            raise ValueError("an MDP needs at least one goal state")
        if len(self.state_labels) != n:
            raise ValueError("state_labels must have one entry per state")
        if self.initial_dist.shape != (n,) or abs(self.initial_dist.sum() - 1.0) > 1e-12:
            raise ValueError("initial_dist must be a probability vector over states")
        if self.reward_noise_sd is not None and self.reward_noise_sd < 0:
            raise ValueError("reward_noise_sd must be nonnegative")
        for s, acts in enumerate(self.actions):
            if len(acts) == 0:
                raise ValueError(f"state {s} has no admissible action")
            for a in acts:
                p = self.transition.get((s, a))
                if p is None or (s, a) not in self.mean_reward:
                    raise ValueError(f"missing dynamics for pair {(s, a)}")
                if p.shape != (n,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                    raise ValueError(f"transition{(s, a)} is not a distribution")
        for g in self.goal_states:
            acts = self.actions[g]
            if len(acts) != 1:
                raise ValueError(f"goal state {g} must have exactly one action")
            a = acts[0]
            if self.transition[(g, a)][g] != 1.0 or self.mean_reward[(g, a)] != 0.0:
                raise ValueError(f"goal state {g} must be a zero-reward self loop")

    @property
    def n_states(self) -> int:
        return len(self.actions)

    @property
    def deterministic_rewards(self) -> bool:
        return not self.reward_noise_sd

    def is_goal(self, s: int) -> bool:
        return s in self.goal_states

    def state_index(self, label) -> int:
        """Dense index of a structured state label."""
        return self._label_index[label]

    def pairs(self):
        """All ``(s, a)`` pairs in canonical order."""
        return [(s, a) for s, acts in enumerate(self.actions) for a in acts]

    def successors(self, s: int, a: int) -> tuple[np.ndarray, np.ndarray]:
        """Support and probabilities of ``p(.|s, a)``."""
        p = self.transition[(s, a)]
        support = np.flatnonzero(p)
        return support, p[support]

    def check_action(self, s: int, a: int) -> None:
        if a not in self.actions[s]:
            raise ValueError(f"action {a} is not admissible in state {self.state_labels[s]}")


class QIndex:
    """Bijection between state-action pairs and parameter coordinates.

    Non-goal pairs get indices ``0..d_theta-1``; goal pairs get
    ``d_theta..d_theta+n_goal-1`` and always evaluate to zero.
    """

    def __init__(self, mdp: TabularMdp):
        forward = {}
        k = 0
        for s, acts in enumerate(mdp.actions):
            if mdp.is_goal(s):
                continue
            for a in acts:
                forward[(s, a)] = k
                k += 1
        self.d_theta = k
        for g in sorted(mdp.goal_states):
            forward[(g, mdp.actions[g][0])] = k
            k += 1
        self.forward = forward
        self.inverse = {j: sa for sa, j in forward.items()}
        self.n_pairs = k

    def __getitem__(self, sa: tuple[int, int]) -> int:
        return self.forward[sa]

    def __len__(self) -> int:
        return self.n_pairs

    def is_param(self, j: int) -> bool:
        return j < self.d_theta


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int


class Dataset:
    """Collection of observed transitions.

    With ``dedup_mode="unique_pairs"`` (deterministic rewards) only the first
    record of each ``(s, a)`` is kept; ``"multiset"`` keeps every record.
    """

    def __init__(self, records: Iterable[Transition] = (), dedup_mode: str = "unique_pairs"):
        if dedup_mode not in ("unique_pairs", "multiset"):
            raise ValueError(f"unknown dedup_mode {dedup_mode!r}")
        self.dedup_mode = dedup_mode
        self.records: list[Transition] = []
        self._pairs: set[tuple[int, int]] = set()
        self.extend(records)

    def add(self, record: Transition) -> bool:
        """Add one record; return ``True`` if it was kept."""
        record = Transition(int(record[0]), int(record[1]), float(record[2]), int(record[3]))
        key = (record.s, record.a)
        if self.dedup_mode == "unique_pairs" and key in self._pairs:
            return False
        self._pairs.add(key)
        self.records.append(record)
        return True

    def extend(self, records: Iterable[Transition]) -> list[Transition]:
        """Add records and return the ones that were new."""
        return [Transition(*r) for r in records if self.add(r)]

    def new_records(self, records: Iterable[Transition]) -> list[Transition]:
        """Records that would be kept if added, without mutating."""
        if self.dedup_mode == "multiset":
            return [Transition(*r) for r in records]
        seen = set(self._pairs)
        out = []
        for r in records:
            key = (int(r[0]), int(r[1]))
            if key not in seen:
                seen.add(key)
                out.append(Transition(int(r[0]), int(r[1]), float(r[2]), int(r[3])))
        return out

    def copy(self) -> "Dataset":
        return Dataset(self.records, self.dedup_mode)

    def pairs(self) -> set[tuple[int, int]]:
        return set(self._pairs)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __repr__(self):
        return f"Dataset(n={len(self)}, dedup_mode={self.dedup_mode!r})"


def step(mdp: TabularMdp, s: int, a: int, rng: np.random.Generator) -> tuple[float, int]:
    """Simulate one transition from ``(s, a)``."""
    mdp.check_action(s, a)
    s_next = int(rng.choice(mdp.n_states, p=mdp.transition[(s, a)]))
    r = mdp.mean_reward[(s, a)]
    if mdp.reward_noise_sd:
        r = r + mdp.reward_noise_sd * rng.standard_normal()
    return float(r), s_next


def _point_mass(n: int, s: int) -> np.ndarray:
    p = np.zeros(n)
    p[s] = 1.0
    return p


def _build(actions, goals, edges, labels, initial, name, noise=None):
    n = len(actions)
    transition, reward = {}, {}
    for (s, a), (dest, r) in edges.items():
        transition[(s, a)] = _point_mass(n, dest) if np.isscalar(dest) else np.asarray(dest, float)
        reward[(s, a)] = float(r)
    return TabularMdp(
        actions=tuple(tuple(a) for a in actions),
        goal_states=frozenset(goals),
        transition=transition,
        mean_reward=reward,
        initial_dist=_point_mass(n, initial),
        reward_noise_sd=noise,
        state_labels=labels,
        name=name,
    )


def deep_sea(depth: int) -> TabularMdp:
    """Deep Sea with the diver always starting at the top-left cell.

    Cells ``(row, col)`` with ``0 <= col <= row < depth``. Action 0 moves
    down-right (reward ``-1/(100 depth)``), action 1 moves down-left (reward
    ``+1/(100 depth)``, column clamped at 0). Entering the bottom-right cell
    adds the treasure reward 1. The bottom row is absorbing.
    """
    depth = int(depth)
    if depth < 1:
        raise ValueError("depth must be >= 1")
    labels = [(r, c) for r in range(depth) for c in range(r + 1)]
    index = {lab: i for i, lab in enumerate(labels)}
    step_reward = 1.0 / (100 * depth)
    goals = {index[(depth - 1, c)] for c in range(depth)}
    actions, edges = [], {}
    for (row, col), i in index.items():
        if i in goals:
            actions.append((0,))
            edges[(i, 0)] = (i, 0.0)
            continue
        actions.append((0, 1))
        right = (row + 1, col + 1)
        left = (row + 1, max(col - 1, 0))
        treasure = 1.0 if right == (depth - 1, depth - 1) else 0.0
        edges[(i, 0)] = (index[right], -step_reward + treasure)
        edges[(i, 1)] = (index[left], step_reward)
    return _build(actions, goals, edges, labels, index[(0, 0)], f"deep_sea:{depth}")


def two_state_example(r1: float = -1.0, r2: float = -1.0) -> TabularMdp:
    """Two states: ``s1`` self-loops under a1 or reaches goal ``s2`` under a2."""
    actions = [(0, 1), (0,)]
    edges = {(0, 0): (0, r1), (0, 1): (1, r2), (1, 0): (1, 0.0)}
    return _build(actions, {1}, edges, ("s1", "s2"), 0, "two_state")


def five_state_example(r1: float, r2: float, r3: float, r4: float) -> TabularMdp:
    """Deterministic 5-state chain with a single decision at ``s1``.

    ``s1 -a1-> s2 -a1-> s4`` and ``s1 -a2-> s3 -a2-> s5``; ``s4, s5`` absorb.
    """
    actions = [(0, 1), (0,), (1,), (0,), (0,)]
    edges = {
        (0, 0): (1, r1),
        (0, 1): (2, r2),
        (1, 0): (3, r3),
        (2, 1): (4, r4),
        (3, 0): (3, 0.0),
        (4, 0): (4, 0.0),
    }
    return _build(actions, {3, 4}, edges, ("s1", "s2", "s3", "s4", "s5"), 0, "five_state")


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_sweeps: int = 10_000) -> dict:
    """Optimal action values of an undiscounted SSP.

    Returns a dict ``(s, a) -> Q*(s, a)`` whose Bellman residual is below
    ``tol`` in sup norm. Raises :class:`DivergenceError` when the iteration
    has not settled after ``max_sweeps`` sweeps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pairs = mdp.pairs()
    P = np.array([mdp.transition[sa] for sa in pairs])
    R = np.array([mdp.mean_reward[sa] for sa in pairs])
    goal_mask = np.array([mdp.is_goal(s) for s, _ in pairs])
    owner = np.array([s for s, _ in pairs])
    q = np.zeros(len(pairs))
    for _ in range(max_sweeps):
        v = np.full(mdp.n_states, -np.inf)
        np.maximum.at(v, owner, q)
        q_new = np.where(goal_mask, 0.0, R + P @ v)
        v_new = np.full(mdp.n_states, -np.inf)
        np.maximum.at(v_new, owner, q_new)
        residual = np.abs(q_new - np.where(goal_mask, 0.0, R + P @ v_new)).max()
        q = q_new
        if residual < tol:
            return {sa: float(x) for sa, x in zip(pairs, q)}
        if not np.all(np.isfinite(q)):
            break
    raise DivergenceError(f"value iteration did not converge within {max_sweeps} sweeps")


def optimal_value(mdp: TabularMdp, q: dict | None = None) -> np.ndarray:
    """State values ``V*(s)`` from a Q table (computed if not given)."""
    q = value_iteration(mdp) if q is None else q
    return np.array([max(q[(s, a)] for a in acts) for s, acts in enumerate(mdp.actions)])


def make_env(spec: str) -> TabularMdp:
    """Build a built-in environment from its CLI name.

    Accepted forms: ``deep_sea:<depth>``, ``two_state``,
    ``five_state:<r1>,<r2>,<r3>,<r4>``.
    """
    name, _, arg = spec.strip().partition(":")
    if name == "deep_sea":
        if not arg:
            raise ValueError("deep_sea needs a depth, e.g. deep_sea:5")
        return deep_sea(int(arg))
    if name == "two_state":
        return two_state_example()
    if name == "five_state":
        vals = [float(x) for x in arg.split(",")] if arg else []
        if len(vals) != 4:
            raise ValueError("five_state needs four rewards, e.g. five_state:1,0,0,2")
        return five_state_example(*vals)
    raise ValueError(f"unknown environment {spec!r}")


def rollout(mdp: TabularMdp, policy, rng: np.random.Generator, max_steps: int) -> list[Transition]:
    """Run one episode; ``policy(s) -> a``. Stops at a goal or ``max_steps``."""
    s = int(rng.choice(mdp.n_states, p=mdp.initial_dist))
    out = []
    while not mdp.is_goal(s) and len(out) < max_steps:
        a = policy(s)
        r, s_next = step(mdp, s, a, rng)
        out.append(Transition(s, a, r, s_next))
        s = s_next
    return out


def pairs_array(records: Sequence[Transition]) -> np.ndarray:
    return np.array([(t.s, t.a) for t in records], dtype=int).reshape(-1, 2)
