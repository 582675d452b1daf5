"""Task-switching policies: adaptive (parameter-plateau) and fixed-interval.

The adaptive policy snapshots the flattened trainable parameters at the
end of every episode into a sliding window of the last ``window_size``
snapshots. Once the window is full, it compares the newest snapshot
against the oldest as a relative L2 change in percent; if that change
falls strictly below the threshold, training has plateaued and the active
environment advances round-robin. The window is cleared on every switch,
so at least ``window_size`` episodes run on each visit before the next
switch can fire.

The fixed-interval baseline switches unconditionally every N completed
episodes and never inspects the parameters.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


def relative_change_percent(new: np.ndarray, old: np.ndarray) -> float:
    """100 * ||new - old||_2 / ||old||_2.

    Degree-0 homogeneous: scaling both vectors by any positive constant
    leaves the result unchanged. The reference vector must have nonzero
    norm; with standard weight initialization this always holds.
    """
    new = np.asarray(new).ravel()
    old = np.asarray(old).ravel()
    if new.shape != old.shape:
        raise ValueError(
            f"parameter snapshots differ in length: {new.shape} vs {old.shape}"
        )
    ref = np.sqrt(np.sum(old * old))
    if ref == 0.0:
        raise ValueError("reference parameter snapshot has zero norm")
    diff = new - old
    return 100.0 * np.sqrt(np.sum(diff * diff)) / ref


def next_env_index(index: int, num_envs: int) -> int:
    """Round-robin advance: (index + 1) mod num_envs."""
    if num_envs < 1:
        raise ValueError(f"num_envs must be >= 1, got {num_envs}")
    return (index + 1) % num_envs


@dataclass(frozen=True)
class SwitchDecision:
    """Outcome of one end-of-episode check.

    ``delta`` is the relative parameter change in percent, or None when it
    was not computed (window not yet full, or fixed-interval policy).
    """

    delta: float | None
    switched: bool
    threshold: float


class AdaptiveSwitchPolicy:
    """Switch environments when parameter updates stagnate."""

    def __init__(self, num_envs: int, window_size: int = 5, threshold: float = 10.0):
        if window_size < 1:
            raise ValueError(f"window_size must be >= 1, got {window_size}")
        if num_envs < 1:
            raise ValueError(f"num_envs must be >= 1, got {num_envs}")
        self.num_envs = num_envs
        self.window_size = window_size
        self.threshold = threshold
        self.env_index = 0
        self._history: deque[np.ndarray] = deque(maxlen=window_size)

    @property
    def history_length(self) -> int:
        return len(self._history)

    def on_episode_end(self, parameters: np.ndarray) -> SwitchDecision:
        """Record an end-of-episode snapshot and decide whether to switch.

        Must be called exactly once per terminal state. Appends the
        snapshot (evicting the oldest beyond the window), and once the
        window holds ``window_size`` entries compares newest vs oldest.
        Switching advances the environment index and clears the window.
        """
        self._history.append(np.array(parameters, copy=True))
        if len(self._history) < self.window_size:
            return SwitchDecision(delta=None, switched=False, threshold=self.threshold)
        delta = relative_change_percent(self._history[-1], self._history[0])
        if delta < self.threshold:
            self.env_index = next_env_index(self.env_index, self.num_envs)
            self._history.clear()
            return SwitchDecision(delta=delta, switched=True, threshold=self.threshold)
        return SwitchDecision(delta=delta, switched=False, threshold=self.threshold)


class FixedIntervalPolicy:
    """Switch unconditionally every ``episodes_per_task`` completed episodes."""

    def __init__(self, num_envs: int, episodes_per_task: int = 25):
        if episodes_per_task < 1:
            raise ValueError(
                f"episodes_per_task must be >= 1, got {episodes_per_task}"
            )
        if num_envs < 1:
            raise ValueError(f"num_envs must be >= 1, got {num_envs}")
        self.num_envs = num_envs
        self.episodes_per_task = episodes_per_task
        self.env_index = 0
        self._since_switch = 0

    def on_episode_end(self, parameters: np.ndarray) -> SwitchDecision:
        self._since_switch += 1
        if self._since_switch >= self.episodes_per_task:
            self._since_switch = 0
            self.env_index = next_env_index(self.env_index, self.num_envs)
            return SwitchDecision(delta=None, switched=True, threshold=float("inf"))
        return SwitchDecision(delta=None, switched=False, threshold=float("inf"))
