"""Experience replay, exploration schedule, and bootstrap targets.

One replay buffer per environment; sampling is uniform without
replacement within a batch and deterministic under a fixed seed. The
bootstrap target decouples action selection from evaluation: the online
network picks the argmax action at the next state and the frozen target
network scores it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .network import QNetwork


@dataclass
class Transition:
    """One environment step: (observation, action, reward, next observation).

    ``phi_next`` is always stored; when ``terminal`` is true the target
    computation ignores it.
    """

    phi: np.ndarray
    action: int
    reward: float
    phi_next: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform batch sampling."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError(f"replay capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._storage: list[Transition] = []
        self._next = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._storage)

    def push(self, transition: Transition) -> None:
        if len(self._storage) < self.capacity:
            self._storage.append(transition)
        else:
            self._storage[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch: int) -> list[Transition]:
        if batch > len(self._storage):
            raise ValueError(
                f"cannot sample {batch} transitions from a buffer of size {len(self._storage)}"
            )
        indices = self._rng.choice(len(self._storage), size=batch, replace=False)
        return [self._storage[i] for i in indices]


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear exploration annealing over global frames, clamped at the end.

    value(f) = start + (end - start) * f / decay_frames for f < decay_frames,
    and exactly ``end`` from there on.
    """

    start: float = 1.00
    end: float = 0.10
    decay_frames: int = 1_000_000

    def value(self, frame: int) -> float:
        if frame < 0:
            raise ValueError(f"frame must be non-negative, got {frame}")
        if frame >= self.decay_frames:
            return self.end
        return self.start + (self.end - self.start) * (frame / self.decay_frames)


def select_action(
    q_values: np.ndarray | None,
    epsilon: float,
    rng: np.random.Generator,
    num_actions: int,
) -> int:
    """Epsilon-greedy action: argmax with probability 1 - eps, else uniform.

    Ties break toward the lowest action index. At eps >= 1 the Q-values
    are not consulted at all (``q_values`` may be None), and the random
    draw consumes exactly one uniform integer -- the same stream pattern
    as a pure random policy.
    """
    if epsilon >= 1.0:
        return int(rng.integers(num_actions))
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(num_actions))
    if q_values is None:
        raise ValueError("greedy action requested but no Q-values supplied")
    return int(np.argmax(q_values))


def double_q_targets_from_values(
    rewards: np.ndarray,
    terminals: np.ndarray,
    q_next_online: np.ndarray,
    q_next_target: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """Per-sample bootstrap targets from precomputed next-state Q tables.

    y = r for terminal transitions, else
    y = r + gamma * Q_target(phi', argmax_a Q_online(phi', a)).
    """
    rewards = np.asarray(rewards, dtype=q_next_target.dtype)
    terminals = np.asarray(terminals, dtype=bool)
    best = np.argmax(q_next_online, axis=1)
    bootstrap = np.take_along_axis(q_next_target, best[:, None], axis=1)[:, 0]
    return np.where(terminals, rewards, rewards + gamma * bootstrap)


def double_q_target(
    batch: list[Transition],
    online: QNetwork,
    target: QNetwork,
    gamma: float,
    context: np.ndarray | None = None,
) -> np.ndarray:
    """Bootstrap targets for a transition batch (both nets in inference mode)."""
    phi_next = np.stack([t.phi_next for t in batch])
    rewards = np.array([t.reward for t in batch])
    terminals = np.array([t.terminal for t in batch])
    with ad.no_grad():
        q_next_online = online.forward(phi_next, context, training=False).data
        q_next_target = target.forward(phi_next, context, training=False).data
    return double_q_targets_from_values(
        rewards, terminals, q_next_online, q_next_target, gamma
    )
