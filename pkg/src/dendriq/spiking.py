"""Integrate-and-fire dynamics, surrogate gradients, and dendritic gating.

The neuron model: membrane potential accumulates the (possibly dendrite-
modulated) input current each simulation step; a neuron emits a binary
spike when its potential strictly exceeds the threshold and is then hard
reset to zero. The spike nonlinearity is non-differentiable, so training
substitutes a surrogate pseudo-derivative in the backward pass.

Every function here is pure given its state arguments: membrane state is
threaded explicitly through :func:`if_step`, so independent copies can run
in parallel threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SURROGATE_KINDS = ("rectangular", "atan")
SHARING_MODES = ("layer-shared", "per-neuron")


@dataclass(frozen=True)
class SurrogateSpec:
    """Pseudo-derivative used to backpropagate through the spike.

    Both kinds are non-negative, symmetric about the threshold, and
    integrate to one: the rectangular window has height 1/width over
    |v - v_th| < width/2, and the atan curve is
    width / (1 + (pi * width * (v - v_th))^2), peaking at ``width``.
    """

    kind: str = "atan"
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ValueError(f"unknown surrogate kind {self.kind!r}; use one of {SURROGATE_KINDS}")
        if self.width <= 0:
            raise ValueError(f"surrogate width must be positive, got {self.width}")


def pseudo_derivative(spec: SurrogateSpec, distance: np.ndarray) -> np.ndarray:
    """Surrogate derivative of the spike at ``distance = v - v_th``."""
    d = np.asarray(distance)
    if spec.kind == "rectangular":
        return (np.abs(d) < spec.width / 2.0) / spec.width
    return spec.width / (1.0 + (np.pi * spec.width * d) ** 2)


def soft_spike_value(spec: SurrogateSpec, distance: np.ndarray) -> np.ndarray:
    """Smooth relaxation of the spike whose true derivative is the surrogate.

    Used by gradient checks: finite differences of this relaxed forward
    match the surrogate backward exactly.
    """
    d = np.asarray(distance)
    if spec.kind == "rectangular":
        return np.clip(d / spec.width + 0.5, 0.0, 1.0)
    return np.arctan(np.pi * spec.width * d) / np.pi + 0.5


def spike(distance: Tensor, spec: SurrogateSpec, relaxed: bool = False) -> Tensor:
    """Spike nonlinearity over ``distance = v - v_th``.

    Forward emits binary spikes (1 where distance > 0, strict); with
    ``relaxed=True`` it emits the smooth relaxation instead. Backward uses
    the surrogate pseudo-derivative in both modes.
    """
    if relaxed:
        out = soft_spike_value(spec, distance.data)
    else:
        out = (distance.data > 0).astype(distance.dtype)

    def backward(grad):
        ad.accumulate_grad(distance, grad * pseudo_derivative(spec, distance.data))

    return ad.from_op(out, (distance,), backward, "spike")


# ----------------------------------------------------------------------
# membrane dynamics


@dataclass
class MembraneState:
    """Per-neuron membrane potential plus threshold and step index."""

    v: Tensor
    threshold: float = 1.0
    step_index: int = 0


def init_membrane(shape, threshold: float = 1.0) -> MembraneState:
    return MembraneState(v=Tensor(np.zeros(shape)), threshold=threshold, step_index=0)


def if_step(
    state: MembraneState,
    current: Tensor,
    surrogate: SurrogateSpec | None = None,
    relaxed: bool = False,
) -> tuple[Tensor, MembraneState]:
    """One integrate-and-fire step.

    The potential integrates the input current; neurons whose potential
    strictly exceeds the threshold emit a spike and are hard reset to
    zero. Returns (spikes, next state). With no surrogate the spikes carry
    no gradient (pure simulation).
    """
    v_pre = state.v + current
    if surrogate is None:
        spikes = Tensor((v_pre.data > state.threshold).astype(v_pre.dtype))
    else:
        spikes = spike(v_pre - state.threshold, surrogate, relaxed=relaxed)
    v_next = v_pre * (1.0 - spikes)
    return spikes, MembraneState(v=v_next, threshold=state.threshold, step_index=state.step_index + 1)


# ----------------------------------------------------------------------
# active dendrites


def one_hot_context(index: int, size: int) -> np.ndarray:
    """One-hot context signal identifying the active task."""
    if not 0 <= index < size:
        raise ValueError(f"context index {index} out of range for {size} tasks")
    c = np.zeros(size, dtype=ad.default_dtype())
    c[index] = 1.0
    return c


@dataclass
class DendriteBank:
    """Learned dendritic segments gating a layer's feedforward drive.

    ``segments`` has shape (units, num_segments, context_dim): one row of
    segments per neuron, or a single shared row when ``sharing`` is
    ``"layer-shared"``. Trainable parameter count is the segment tensor
    size, units * num_segments * context_dim.
    """

    segments: Tensor
    sharing: str

    def __post_init__(self):
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"unknown sharing mode {self.sharing!r}; use one of {SHARING_MODES}")
        if self.segments.ndim != 3:
            raise ValueError(f"dendrite segments must be 3-D, got shape {self.segments.shape}")
        if self.sharing == "layer-shared" and self.segments.shape[0] != 1:
            raise ValueError("layer-shared bank must have a single unit row")

    @property
    def num_segments(self) -> int:
        return self.segments.shape[1]

    @property
    def context_dim(self) -> int:
        return self.segments.shape[2]


def build_dendrite_bank(
    num_segments: int,
    context_dim: int,
    sharing: str,
    num_units: int,
    rng: np.random.Generator,
    scale: float = 0.5,
) -> DendriteBank:
    units = 1 if sharing == "layer-shared" else num_units
    segments = Tensor(
        rng.uniform(-scale, scale, size=(units, num_segments, context_dim)),
        requires_grad=True,
    )
    return DendriteBank(segments=segments, sharing=sharing)


def selected_segments(bank: DendriteBank, context: np.ndarray) -> np.ndarray:
    """Index of the winning segment per unit (argmax of segment-context match)."""
    context = np.asarray(context)
    if context.shape != (bank.context_dim,):
        raise ValueError(
            f"context has length {context.shape}, bank expects ({bank.context_dim},)"
        )
    activations = bank.segments.data @ context  # (units, num_segments)
    return np.argmax(activations, axis=1)


def dendritic_gate(bank: DendriteBank, context: np.ndarray) -> Tensor:
    """Gating factor sigmoid(max_j segment_j . context), one per unit.

    The max is a hard selection: only the argmax segment receives
    gradient. Ties break toward the lowest segment index.
    """
    context = np.asarray(context, dtype=bank.segments.dtype)
    if context.shape != (bank.context_dim,):
        raise ValueError(
            f"context has length {context.shape}, bank expects ({bank.context_dim},)"
        )
    units, num_segments, context_dim = bank.segments.shape
    flat = bank.segments.reshape(units * num_segments, context_dim)
    activations = (flat @ Tensor(context)).reshape(units, num_segments)
    winners = np.argmax(activations.data, axis=1)
    best = ad.take_along_last(activations, winners)
    return ad.sigmoid(best)


def dendritic_modulate(current: Tensor, bank: DendriteBank, context: np.ndarray) -> Tensor:
    """Scale an input current by the context-selected dendritic gate."""
    if bank.sharing == "per-neuron" and current.shape[-1] != bank.segments.shape[0]:
        raise ValueError(
            f"per-neuron bank has {bank.segments.shape[0]} units but current has "
            f"{current.shape[-1]} features"
        )
    return current * dendritic_gate(bank, context)


# ----------------------------------------------------------------------
# input coding


def encode_input(observation: np.ndarray, sim_steps: int) -> list[np.ndarray]:
    """Direct coding: present the same observation as input current each step.

    The network's output is then the mean over steps of the final layer's
    per-step readout.
    """
    if sim_steps < 1:
        raise ValueError(f"sim_steps must be >= 1, got {sim_steps}")
    return [observation] * sim_steps
