"""Q-network builders, forward evaluation, and checkpoint serialization.

Five variants share one trunk shape: three (or, in the toy profile, two)
conv + batch-norm + nonlinearity blocks, a flatten, a 512-unit (toy: 64)
hidden layer per head stream, and linear readouts. The variants differ in
the nonlinearity (ReLU vs integrate-and-fire), the head structure (single
Q readout vs dueling value/advantage streams), and whether the hidden
spiking layer is gated by a context-driven dendrite bank:

    dqn     rectified trunk, single head
    dsqn    spiking trunk, single head
    dqn_d   rectified trunk, dueling heads
    dsqn_d  spiking trunk, dueling heads
    add     dsqn_d plus active dendrites on the hidden spiking layer

Spiking variants unroll ``sim_steps`` of membrane dynamics per forward
pass (direct input coding) and read out Q as the mean over steps of the
final linear layer; the readout layer itself is a non-spiking
accumulator. Dueling heads aggregate as Q = V + A - mean(A).

For the dueling dendritic variant, one dendrite bank gates both stream
hidden layers: the gate depends only on the context, so the two streams
share a single bank (18 trainable dendritic parameters in the full-scale
configuration).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import BatchNorm2d, Conv2d, Linear
from .spiking import (
    DendriteBank,
    SurrogateSpec,
    build_dendrite_bank,
    dendritic_gate,
    encode_input,
    if_step,
    init_membrane,
)

VARIANTS = ("dqn", "dsqn", "dqn_d", "dsqn_d", "add")
PROFILES = ("paper", "toy")

PAPER_CONV_PLAN = ((32, 8, 4), (64, 4, 2), (64, 3, 1))
TOY_CONV_PLAN = ((8, 3, 2), (16, 3, 1))


@dataclass(frozen=True)
class ArchSpec:
    """Complete structural description of a Q-network."""

    variant: str
    input_shape: tuple[int, int, int]  # (channels, height, width)
    num_actions: int
    context_dim: int
    conv_plan: tuple[tuple[int, int, int], ...]  # (out_channels, kernel, stride)
    fc_width: int
    spiking: bool
    dueling: bool
    dendrites: tuple[int, int, str] | None = None  # (segments, context_dim, sharing)
    sim_steps: int = 4
    threshold: float = 1.0
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; use one of {VARIANTS}")
        if self.num_actions < 1:
            raise ValueError("num_actions must be positive")
        if self.dendrites is not None and not self.spiking:
            raise ValueError("dendrites require a spiking variant")
        if self.variant == "add" and self.dendrites is None:
            raise ValueError("the add variant requires a dendrite configuration")
        if self.dendrites is not None and self.dendrites[1] != self.context_dim:
            raise ValueError(
                f"dendrite context dim {self.dendrites[1]} differs from "
                f"network context dim {self.context_dim}"
            )
        if self.sim_steps < 1:
            raise ValueError("sim_steps must be >= 1")
        # Fail early if the conv plan does not fit the input.
        self.flatten_size()

    def spatial_sizes(self) -> list[tuple[int, int]]:
        """Per-layer (height, width) after each convolution."""
        h, w = self.input_shape[1], self.input_shape[2]
        sizes = []
        for _, kernel, stride in self.conv_plan:
            h = ad.conv_output_size(h, kernel, stride)
            w = ad.conv_output_size(w, kernel, stride)
            sizes.append((h, w))
        return sizes

    def flatten_size(self) -> int:
        sizes = self.spatial_sizes()
        channels = self.conv_plan[-1][0] if self.conv_plan else self.input_shape[0]
        h, w = sizes[-1] if sizes else self.input_shape[1:]
        return channels * h * w


def _variant_flags(variant: str) -> tuple[bool, bool]:
    spiking = variant in ("dsqn", "dsqn_d", "add")
    dueling = variant in ("dqn_d", "dsqn_d", "add")
    return spiking, dueling


def spec_for_variant(
    variant: str,
    profile: str = "paper",
    sim_steps: int = 4,
    surrogate: SurrogateSpec | None = None,
    threshold: float = 1.0,
) -> ArchSpec:
    """Canonical architecture for a variant under a given profile.

    The paper profile is the full-scale configuration: 4 stacked 84x84
    frames, conv plan (32,8,4)/(64,4,2)/(64,3,1), 512-unit hidden layers,
    18 actions, and (for ``add``) a layer-shared bank of 6 segments over a
    3-task context. The toy profile is the desk-scale counterpart matched
    to the built-in environment suite.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; use one of {PROFILES}")
    spiking, dueling = _variant_flags(variant)
    dendrites = None
    if variant == "add":
        dendrites = (6, 3, "layer-shared")
    if profile == "paper":
        input_shape, conv_plan, fc_width, num_actions = (4, 84, 84), PAPER_CONV_PLAN, 512, 18
    else:
        input_shape, conv_plan, fc_width, num_actions = (2, 12, 12), TOY_CONV_PLAN, 64, 4
    return ArchSpec(
        variant=variant,
        input_shape=input_shape,
        num_actions=num_actions,
        context_dim=3,
        conv_plan=conv_plan,
        fc_width=fc_width,
        spiking=spiking,
        dueling=dueling,
        dendrites=dendrites,
        sim_steps=sim_steps,
        threshold=threshold,
        surrogate=surrogate or SurrogateSpec(),
    )


class QNetwork:
    """A built network: layer objects plus an ordered parameter registry.

    The registry order is the construction order and defines the layout of
    the flattened parameter vector used by the switching policy and by
    checkpoints.
    """

    def __init__(self, spec: ArchSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.conv_blocks: list[tuple[Conv2d, BatchNorm2d]] = []
        in_channels = spec.input_shape[0]
        for out_channels, kernel, stride in spec.conv_plan:
            conv = Conv2d(in_channels, out_channels, kernel, stride, rng)
            bn = BatchNorm2d(out_channels)
            self.conv_blocks.append((conv, bn))
            in_channels = out_channels

        flat = spec.flatten_size()
        self.dendrite_bank: DendriteBank | None = None
        if spec.dueling:
            self.value_hidden = Linear(flat, spec.fc_width, rng)
            self.value_head = Linear(spec.fc_width, 1, rng)
            self.adv_hidden = Linear(flat, spec.fc_width, rng)
            self.adv_head = Linear(spec.fc_width, spec.num_actions, rng)
        else:
            self.hidden = Linear(flat, spec.fc_width, rng)
            self.head = Linear(spec.fc_width, spec.num_actions, rng)
        if spec.dendrites is not None:
            segments, context_dim, sharing = spec.dendrites
            self.dendrite_bank = build_dendrite_bank(
                segments, context_dim, sharing, spec.fc_width, rng
            )

        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._bn_by_prefix: dict[str, BatchNorm2d] = {}
        self._register()

    # ------------------------------------------------------------------
    # registry

    def _register(self) -> None:
        for i, (conv, bn) in enumerate(self.conv_blocks, start=1):
            self._add_layer(f"conv{i}", conv)
            self._add_layer(f"bn{i}", bn)
            self._bn_by_prefix[f"bn{i}"] = bn
        if self.spec.dueling:
            self._add_layer("value_hidden", self.value_hidden)
            self._add_layer("value_head", self.value_head)
            self._add_layer("adv_hidden", self.adv_hidden)
            self._add_layer("adv_head", self.adv_head)
        else:
            self._add_layer("hidden", self.hidden)
            self._add_layer("head", self.head)
        if self.dendrite_bank is not None:
            name = "dendrites.segments"
            self.dendrite_bank.segments.name = name
            self.params[name] = self.dendrite_bank.segments

    def _add_layer(self, prefix: str, layer) -> None:
        for name, tensor in layer.parameters():
            full = f"{prefix}.{name}"
            tensor.name = full
            self.params[full] = tensor
        for name, buf in layer.buffers():
            self.buffers[f"{prefix}.{name}"] = buf

    def refresh_buffers(self) -> None:
        """Re-read buffer arrays from layers (they are replaced, not mutated)."""
        for prefix, bn in self._bn_by_prefix.items():
            for name, buf in bn.buffers():
                self.buffers[f"{prefix}.{name}"] = buf

    def count_trainable(self) -> int:
        """Total trainable parameter count (buffers excluded)."""
        return sum(p.data.size for p in self.params.values())

    def flat_parameters(self) -> np.ndarray:
        """All trainable parameters flattened in registry order."""
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def copy_from(self, other: "QNetwork") -> None:
        """Copy all parameters and buffers from a structurally identical net."""
        self_shapes = {k: v.shape for k, v in self.params.items()}
        other_shapes = {k: v.shape for k, v in other.params.items()}
        if self_shapes != other_shapes:
            raise ValueError("cannot sync: parameter registries differ in names or shapes")
        for name, p in self.params.items():
            p.data = other.params[name].data.copy()
        other.refresh_buffers()
        for prefix, bn in self._bn_by_prefix.items():
            src = other._bn_by_prefix[prefix]
            bn.running_mean = src.running_mean.copy()
            bn.running_var = src.running_var.copy()
        self.refresh_buffers()

    # ------------------------------------------------------------------
    # forward

    def forward(
        self,
        obs: np.ndarray,
        context: np.ndarray | None = None,
        training: bool = False,
        relaxed: bool = False,
        update_running: bool | None = None,
        per_step_out: list | None = None,
    ) -> Tensor:
        """Batched Q-values, shape (N, num_actions).

        ``context`` is the one-hot task signal; it is required for
        dendritic variants and ignored otherwise. ``relaxed`` replaces the
        binary spike with its smooth surrogate relaxation (gradient
        checking only). ``per_step_out``, if given, collects the per-step
        readout arrays whose mean is the returned Q.
        """
        obs = np.asarray(obs)
        if obs.ndim == 3:
            obs = obs[None]
        if obs.shape[1:] != self.spec.input_shape:
            raise ValueError(
                f"observation shape {obs.shape[1:]} does not match "
                f"network input {self.spec.input_shape}"
            )
        gate: Tensor | None = None
        if self.dendrite_bank is not None:
            if context is None:
                raise ValueError("dendritic variant requires a context signal")
            gate = dendritic_gate(self.dendrite_bank, context)

        n = obs.shape[0]
        spec = self.spec
        steps = encode_input(obs, spec.sim_steps if spec.spiking else 1)
        x = Tensor(obs)

        if spec.spiking:
            sizes = spec.spatial_sizes()
            conv_states = [
                init_membrane((n, plan[0], h, w), spec.threshold)
                for plan, (h, w) in zip(spec.conv_plan, sizes)
            ]
            if spec.dueling:
                hidden_states = [
                    init_membrane((n, spec.fc_width), spec.threshold) for _ in range(2)
                ]
            else:
                hidden_states = [init_membrane((n, spec.fc_width), spec.threshold)]

        acc: Tensor | None = None
        for _ in steps:
            h = x
            for i, (conv, bn) in enumerate(self.conv_blocks):
                cur = bn(conv(h), training=training, update_running=update_running)
                if spec.spiking:
                    h, conv_states[i] = if_step(
                        conv_states[i], cur, spec.surrogate, relaxed=relaxed
                    )
                else:
                    h = ad.relu(cur)
            flat = h.reshape(n, -1)
            if spec.dueling:
                v_cur = self.value_hidden(flat)
                a_cur = self.adv_hidden(flat)
                if gate is not None:
                    v_cur = v_cur * gate
                    a_cur = a_cur * gate
                if spec.spiking:
                    v_act, hidden_states[0] = if_step(
                        hidden_states[0], v_cur, spec.surrogate, relaxed=relaxed
                    )
                    a_act, hidden_states[1] = if_step(
                        hidden_states[1], a_cur, spec.surrogate, relaxed=relaxed
                    )
                else:
                    v_act, a_act = ad.relu(v_cur), ad.relu(a_cur)
                value = self.value_head(v_act)  # (N, 1)
                advantage = self.adv_head(a_act)  # (N, A)
                step_q = value + advantage - advantage.mean(axis=1, keepdims=True)
            else:
                cur = self.hidden(flat)
                if gate is not None:
                    cur = cur * gate
                if spec.spiking:
                    act, hidden_states[0] = if_step(
                        hidden_states[0], cur, spec.surrogate, relaxed=relaxed
                    )
                else:
                    act = ad.relu(cur)
                step_q = self.head(act)
            if per_step_out is not None:
                per_step_out.append(step_q.data.copy())
            acc = step_q if acc is None else acc + step_q
        assert acc is not None
        return acc * (1.0 / len(steps))

    def q_values(self, obs: np.ndarray, context: np.ndarray | None = None) -> np.ndarray:
        """Inference-mode Q-vector for a single observation."""
        with ad.no_grad():
            out = self.forward(obs, context, training=False)
        return out.data[0]


# ----------------------------------------------------------------------
# checkpoint serialization

CHECKPOINT_MAGIC = b"DQNET\x00"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: "<f8", 1: "<f4"}


def _spec_to_meta(spec: ArchSpec) -> dict:
    return {
        "variant": spec.variant,
        "input_shape": list(spec.input_shape),
        "num_actions": spec.num_actions,
        "context_dim": spec.context_dim,
        "conv_plan": [list(p) for p in spec.conv_plan],
        "fc_width": spec.fc_width,
        "spiking": spec.spiking,
        "dueling": spec.dueling,
        "dendrites": list(spec.dendrites) if spec.dendrites else None,
        "sim_steps": spec.sim_steps,
        "threshold": spec.threshold,
        "surrogate": {"kind": spec.surrogate.kind, "width": spec.surrogate.width},
    }


def _spec_from_meta(meta: dict) -> ArchSpec:
    dendrites = meta["dendrites"]
    return ArchSpec(
        variant=meta["variant"],
        input_shape=tuple(meta["input_shape"]),
        num_actions=meta["num_actions"],
        context_dim=meta["context_dim"],
        conv_plan=tuple(tuple(p) for p in meta["conv_plan"]),
        fc_width=meta["fc_width"],
        spiking=meta["spiking"],
        dueling=meta["dueling"],
        dendrites=(dendrites[0], dendrites[1], dendrites[2]) if dendrites else None,
        sim_steps=meta["sim_steps"],
        threshold=meta["threshold"],
        surrogate=SurrogateSpec(**meta["surrogate"]),
    )


def save_checkpoint(net: QNetwork, path, extra_meta: dict | None = None) -> None:
    """Write a versioned little-endian binary checkpoint.

    Layout: magic, u16 version, u32 meta length + JSON metadata (the
    architecture plus any extra keys), u32 entry count, then per entry a
    length-prefixed name, a kind byte (0 parameter, 1 buffer), a dtype
    code (0 float64, 1 float32), u8 rank, u32 dims, and the raw row-major
    little-endian element bytes.
    """
    net.refresh_buffers()
    meta = {"arch": _spec_to_meta(net.spec)}
    if extra_meta:
        meta.update(extra_meta)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    entries: list[tuple[str, int, np.ndarray]] = []
    for name, p in net.params.items():
        entries.append((name, 0, p.data))
    for name, buf in net.buffers.items():
        entries.append((name, 1, buf))

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(entries)))
        for name, kind, arr in entries:
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BB", kind, _DTYPE_CODES[arr.dtype]))
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> tuple[QNetwork, dict]:
    """Rebuild a network from a checkpoint; returns (network, metadata)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, tuple[int, np.ndarray]] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            kind, dtype_code = struct.unpack("<BB", fh.read(2))
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = np.dtype(_CODE_DTYPES[dtype_code])
            raw = fh.read(dtype.itemsize * int(np.prod(shape, dtype=np.int64)))
            arrays[name] = (kind, np.frombuffer(raw, dtype=dtype).reshape(shape).copy())

    spec = _spec_from_meta(meta["arch"])
    net = QNetwork(spec, seed=0)
    for name, p in net.params.items():
        if name not in arrays:
            raise ValueError(f"{path}: checkpoint is missing parameter {name!r}")
        kind, arr = arrays[name]
        if arr.shape != p.data.shape:
            raise ValueError(
                f"{path}: parameter {name!r} has shape {arr.shape}, expected {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype)
    for prefix, bn in net._bn_by_prefix.items():
        for name in ("running_mean", "running_var"):
            full = f"{prefix}.{name}"
            if full in arrays:
                bn.set_buffer(name, arrays[full][1])
    net.refresh_buffers()
    return net, meta


def sync_target(online: QNetwork, target: QNetwork) -> None:
    """Copy the online network into the target network (hard update)."""
    target.copy_from(online)
