"""Unet assembly: equivariant, plain-baseline, and exported-dense variants.

The three modes share one topology: per level two conv blocks, maxpool on
the way down, trilinear upsample plus skip concatenation on the way up,
and a final pointwise classification layer to scalar logits.

equivariant   steerable conv + self-connection (summed), instance norm,
              gated nonlinearity; gate scalars are extra block outputs.
plain         dense kernels of equal equivalent channel depth, instance
              norm, leaky ReLU; the controlled non-equivariant baseline.
exported      the equivariant network with every steerable kernel
              precomputed to a dense kernel and every self-connection to a
              dense 1x1x1 matrix; reproduces equivariant logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .field import DEFAULT_EPS, VoxelField
from .kernel import RadialBasis, SteerableKernelBasis, default_r_max
from .so3 import Irrep, RepLayout, scalar_layout, selection_paths

L_BY_INDEX = (0, 1, 2)
MODES = ("equivariant", "plain", "exported")
CONFIG_KEYS = (
    "levels",
    "top_mults",
    "kernel_size",
    "radial_count",
    "in_channels",
    "n_classes",
    "mode",
    "seed",
)


@dataclass(frozen=True)
class UnetConfig:
    levels: int = 3
    top_mults: tuple[int, int, int] = (8, 4, 2)
    kernel_size: int = 5
    radial_count: int = 5
    in_channels: int = 1
    n_classes: int = 3
    mode: str = "equivariant"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "top_mults", tuple(int(m) for m in self.top_mults))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.top_mults) != 3 or any(m < 0 for m in self.top_mults):
            raise ValueError(f"top_mults must be 3 non-negative ints, got {self.top_mults}")
        if not any(self.top_mults):
            raise ValueError("top_mults must not be all zero")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        if self.radial_count < 2:
            raise ValueError("radial_count must be >= 2")
        if self.in_channels < 1 or self.n_classes < 2:
            raise ValueError("need in_channels >= 1 and n_classes >= 2")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "top_mults": list(self.top_mults),
            "kernel_size": self.kernel_size,
            "radial_count": self.radial_count,
            "in_channels": self.in_channels,
            "n_classes": self.n_classes,
            "mode": self.mode,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnetConfig":
        keys = set(d)
        expected = set(CONFIG_KEYS)
        if keys != expected:
            missing = sorted(expected - keys)
            extra = sorted(keys - expected)
            raise ValueError(f"config keys mismatch: missing {missing}, unexpected {extra}")
        return cls(
            levels=int(d["levels"]),
            top_mults=tuple(d["top_mults"]),
            kernel_size=int(d["kernel_size"]),
            radial_count=int(d["radial_count"]),
            in_channels=int(d["in_channels"]),
            n_classes=int(d["n_classes"]),
            mode=str(d["mode"]),
            seed=int(d["seed"]),
        )


def load_config(path) -> UnetConfig:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    return UnetConfig.from_dict(d)


def save_config(path, config: UnetConfig):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


def hidden_layout(config: UnetConfig, level: int) -> RepLayout:
    """Feature layout at a pyramid level; multiplicities double per level."""
    mults = tuple(m * (2**level) for m in config.top_mults)
    if config.mode == "plain":
        depth = sum(m * (2 * l + 1) for l, m in zip(L_BY_INDEX, mults))
        return scalar_layout(depth)
    entries = tuple((m, Irrep(l)) for l, m in zip(L_BY_INDEX, mults) if m > 0)
    return RepLayout(entries)


def pre_gate_layout(hidden: RepLayout) -> RepLayout:
    """Block output layout: feature scalars and gate scalars first, then the
    non-scalar entries (one gate scalar per non-scalar copy)."""
    n_scalar = hidden.mult_of_order(0)
    nonscalar = tuple((m, ir) for m, ir in hidden.entries if ir.l != 0)
    n_gates = sum(m for m, _ in nonscalar)
    return RepLayout(((n_scalar + n_gates, Irrep(0)),) + nonscalar)


@dataclass(frozen=True)
class ConvBlockSpec:
    name: str
    in_layout: RepLayout
    conv_out_layout: RepLayout  # pre-nonlinearity layout
    post_layout: RepLayout  # after gate / leaky ReLU
    basis: SteerableKernelBasis | None
    self_orders: tuple[int, ...]


@dataclass
class Network:
    config: UnetConfig
    enc: list[list[ConvBlockSpec]]
    bottom: list[ConvBlockSpec]
    dec: list[list[ConvBlockSpec]]
    in_layout: RepLayout
    out_layout: RepLayout
    final_in_layout: RepLayout
    param_shapes: dict[str, tuple[int, ...]]

    def all_blocks(self) -> list[ConvBlockSpec]:
        blocks = [b for level in self.enc for b in level]
        blocks += self.bottom
        blocks += [b for level in reversed(self.dec) for b in level]
        return blocks


@dataclass
class ParameterStore:
    """Flat named registry of learnable arrays."""

    arrays: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.arrays)

    def total_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore({k: v.astype(dtype) for k, v in self.arrays.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


class _Builder:
    def __init__(self, config: UnetConfig):
        self.config = config
        self.shapes: dict[str, tuple[int, ...]] = {}
        self._basis_cache: dict[tuple[str, str], SteerableKernelBasis] = {}
        self.radial = RadialBasis(config.radial_count, default_r_max(config.kernel_size))

    def block(self, name: str, in_layout: RepLayout, hidden: RepLayout) -> ConvBlockSpec:
        cfg = self.config
        k = cfg.kernel_size
        if cfg.mode == "plain":
            self.shapes[f"{name}.conv"] = (hidden.dim, in_layout.dim, k, k, k)
            return ConvBlockSpec(name, in_layout, hidden, hidden, None, ())
        out_layout = pre_gate_layout(hidden)
        self_orders = tuple(
            l for l in out_layout.orders() if in_layout.mult_of_order(l) > 0
        )
        if cfg.mode == "exported":
            self.shapes[f"{name}.conv"] = (out_layout.dim, in_layout.dim, k, k, k)
            self.shapes[f"{name}.self"] = (out_layout.dim, in_layout.dim)
            return ConvBlockSpec(name, in_layout, out_layout, hidden, None, self_orders)
        key = (str(in_layout), str(out_layout))
        basis = self._basis_cache.get(key)
        if basis is None:
            table = selection_paths(in_layout, out_layout, 2)
            basis = SteerableKernelBasis(table, k, self.radial)
            self._basis_cache[key] = basis
        self.shapes[f"{name}.conv"] = basis.weight_shape()
        for l in self_orders:
            self.shapes[f"{name}.self.l{l}"] = (
                out_layout.mult_of_order(l),
                in_layout.mult_of_order(l),
            )
        return ConvBlockSpec(name, in_layout, out_layout, hidden, basis, self_orders)


def build_network(config: UnetConfig) -> Network:
    """Construct the layer graph and parameter shape table (no weights)."""
    b = _Builder(config)
    in_layout = scalar_layout(config.in_channels)
    enc = []
    carry = in_layout
    for level in range(config.levels):
        hid = hidden_layout(config, level)
        blocks = [
            b.block(f"enc{level}.block0", carry, hid),
            b.block(f"enc{level}.block1", hid, hid),
        ]
        enc.append(blocks)
        carry = hid
    bottom_hid = hidden_layout(config, config.levels)
    bottom = [
        b.block("bottom.block0", carry, bottom_hid),
        b.block("bottom.block1", bottom_hid, bottom_hid),
    ]
    dec = [None] * config.levels
    carry = bottom_hid
    for level in reversed(range(config.levels)):
        hid = hidden_layout(config, level)
        cat = carry.concat(hid)  # upsampled features first, then the skip
        dec[level] = [
            b.block(f"dec{level}.block0", cat, hid),
            b.block(f"dec{level}.block1", hid, hid),
        ]
        carry = hid
    final_in = hidden_layout(config, 0)
    out_layout = scalar_layout(config.n_classes)
    b.shapes["final.self.l0"] = (config.n_classes, final_in.mult_of_order(0))
    return Network(
        config=config,
        enc=enc,
        bottom=bottom,
        dec=dec,
        in_layout=in_layout,
        out_layout=out_layout,
        final_in_layout=final_in,
        param_shapes=b.shapes,
    )


def build_unet(config: UnetConfig, seed: int | None = None) -> tuple[Network, ParameterStore]:
    """Network plus unit-normal float32 parameters, deterministic per seed."""
    net = build_network(config)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    arrays = {
        name: rng.normal(size=shape).astype(np.float32)
        for name, shape in net.param_shapes.items()
    }
    return net, ParameterStore(arrays)


def parameter_count(network: Network) -> int:
    return sum(int(np.prod(s)) for s in network.param_shapes.values())


# ---------------------------------------------------------------------------
# forward pass


def _apply_block(spec: ConvBlockSpec, x, get, tape, mode: str, eps: float, pins=None):
    if mode == "plain":
        y = ad.conv(tape, x, get(f"{spec.name}.conv"))
        y = ad.instance_norm(tape, y, spec.conv_out_layout, eps)
        return ad.leaky_relu(tape, y, pins)
    if mode == "equivariant":
        kern = ad.assemble(tape, get(f"{spec.name}.conv"), spec.basis)
        y = ad.conv(tape, x, kern)
        if spec.self_orders:
            mixes = {l: get(f"{spec.name}.self.l{l}") for l in spec.self_orders}
            y = ad.add(
                tape,
                y,
                ad.self_connect(tape, x, mixes, spec.in_layout, spec.conv_out_layout),
            )
    else:  # exported
        y = ad.conv(tape, x, get(f"{spec.name}.conv"))
        y = ad.add(tape, y, ad.pointwise_matrix(tape, x, get(f"{spec.name}.self")))
    y = ad.instance_norm(tape, y, spec.conv_out_layout, eps)
    y, _ = ad.gate(tape, y, spec.conv_out_layout, pins)
    return y


def run_forward(
    network: Network,
    get,
    data,
    tape=None,
    eps: float = DEFAULT_EPS,
    pins=None,
):
    """Shared forward walk; ``get`` maps parameter name to array or Var.

    ``pins`` (autodiff.BranchPins) records or replays the piecewise branch
    selections of this pass; gradient checks replay them so the finite
    difference samples the branch the backward pass differentiates.
    """
    cfg = network.config
    mode = cfg.mode
    x = data
    skips = []
    for level in range(cfg.levels):
        for spec in network.enc[level]:
            x = _apply_block(spec, x, get, tape, mode, eps, pins)
        skips.append(x)
        x = ad.maxpool(tape, x, network.enc[level][-1].post_layout, pins=pins)
    for spec in network.bottom:
        x = _apply_block(spec, x, get, tape, mode, eps, pins)
    for level in reversed(range(cfg.levels)):
        x = ad.upsample(tape, x)
        x = ad.concat(tape, x, skips[level])
        for spec in network.dec[level]:
            x = _apply_block(spec, x, get, tape, mode, eps, pins)
    return ad.self_connect(
        tape,
        x,
        {0: get("final.self.l0")},
        network.final_in_layout,
        network.out_layout,
    )


def forward(network: Network, params: ParameterStore, field: VoxelField) -> VoxelField:
    """Scalar logits field with the input's spatial dims."""
    _check_input(network, field)
    out = run_forward(network, lambda n: params.arrays[n], field.data)
    return VoxelField(network.out_layout, out)


def _check_input(network: Network, field: VoxelField):
    cfg = network.config
    if field.layout.dim != network.in_layout.dim or any(
        ir.l != 0 for _, ir in field.layout.entries
    ):
        raise ValueError(
            f"input layout {field.layout} incompatible with expected {network.in_layout}"
        )
    step = 2**cfg.levels
    if any(d % step for d in field.dims):
        raise ValueError(f"input dims {field.dims} not divisible by {step}")


# ---------------------------------------------------------------------------
# export to an ordinary dense CNN


def export_network(network: Network, params: ParameterStore) -> tuple[Network, ParameterStore]:
    """Precompute dense kernels / mixing matrices for every block.

    Plain networks are already dense: returns copies unchanged.
    """
    from .kernel import self_connection_matrix

    if network.config.mode == "plain":
        return network, params.copy()
    if network.config.mode == "exported":
        return network, params.copy()
    cfg = replace(network.config, mode="exported")
    exported = build_network(cfg)
    arrays: dict[str, np.ndarray] = {}
    for spec in network.all_blocks():
        w = params.arrays[f"{spec.name}.conv"]
        arrays[f"{spec.name}.conv"] = spec.basis.assemble(w)
        mixes = {
            l: params.arrays[f"{spec.name}.self.l{l}"] for l in spec.self_orders
        }
        arrays[f"{spec.name}.self"] = self_connection_matrix(
            spec.in_layout, spec.conv_out_layout, mixes
        ).astype(w.dtype)
    arrays["final.self.l0"] = params.arrays["final.self.l0"].copy()
    return exported, ParameterStore(arrays)
