"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .mdp import TabularMdp, Transition

__all__ = ["check_transitions", "check_states"]


def _as_index(col: np.ndarray, name: str) -> np.ndarray:
    if not np.all(col == np.round(col)):
        raise ValueError(f"{name} must hold integers")
    return col.astype(int)


def check_transitions(X, mdp: TabularMdp) -> list[Transition]:
    """Validate transitions given as rows ``(s, a, r, s_next)``.

    Accepts a 2-D array-like with four columns or an iterable of
    :class:`~bellman_abc.mdp.Transition`. Every row must use an admissible
    action and a successor with positive probability.
    """
    if isinstance(X, (list, tuple)) and len(X) == 0:
        return []
    if isinstance(X, (list, tuple)) and all(isinstance(t, Transition) for t in X):
        rows = np.array([tuple(t) for t in X], dtype=float)
    else:
        rows = check_array(X, dtype=float, ensure_min_samples=0)
    if rows.shape[0] == 0:
        return []
    if rows.shape[1] != 4:
        raise ValueError(f"transitions need 4 columns (s, a, r, s_next), got {rows.shape[1]}")
    s = _as_index(rows[:, 0], "s")
    a = _as_index(rows[:, 1], "a")
    s_next = _as_index(rows[:, 3], "s_next")
    out = []
    for i, (si, ai, ri, ni) in enumerate(zip(s, a, rows[:, 2], s_next)):
        if not (0 <= si < mdp.n_states and 0 <= ni < mdp.n_states):
            raise ValueError(f"row {i}: state out of range")
        mdp.check_action(int(si), int(ai))
        if mdp.transition[(int(si), int(ai))][ni] <= 0:
            raise ValueError(f"row {i}: s_next={ni} is unreachable from ({si}, {ai})")
        out.append(Transition(int(si), int(ai), float(ri), int(ni)))
    return out


def check_states(states, mdp: TabularMdp) -> np.ndarray:
    """Validate a 1-D array of state indices."""
    arr = check_array(np.asarray(states).reshape(-1, 1), dtype=float, ensure_min_samples=1).ravel()
    arr = _as_index(arr, "states")
    if np.any((arr < 0) | (arr >= mdp.n_states)):
        raise ValueError("state index out of range")
    return arr
