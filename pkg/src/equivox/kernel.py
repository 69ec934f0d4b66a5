"""Steerable convolution kernels on the voxel grid.

A kernel basis element for a path (l_in, l, l_out) and radial index k is
the grid sampling of  b_k(|a|) * [CG(l_in, l, l_out) . Y^l(a/|a|)],
which satisfies exact steerability under every rotation that maps the
grid to itself.  Learned kernels are linear combinations of these basis
elements with one weight per (radial index, path), scattered into the
full (dim_out, dim_in, k, k, k) channel matrix and scaled per output
channel by a fan-in factor.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .so3 import (
    PathTable,
    RepLayout,
    _sh_unchecked,
    clebsch_gordan,
    irrep_dim,
)

SMOOTH_FINITE_PREFACTOR = 8.433573


def sus(x):
    """Soft unit step: exp(-1/x) for x > 0, zero otherwise."""
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros_like(x)
    pos = x > 0
    with np.errstate(divide="ignore"):
        out[pos] = np.exp(-1.0 / x[pos])
    return float(out[0]) if scalar else out


def smooth_finite(x):
    """C-infinity bump 8.433573 * sus(x+1) * sus(1-x), zero outside (-1, 1)."""
    out = SMOOTH_FINITE_PREFACTOR * sus(np.add(x, 1.0)) * sus(np.subtract(1.0, x))
    return out


def default_r_max(kernel_size: int) -> float:
    """Largest offset norm in a k^3 kernel cube: sqrt(3)*(k-1)/2."""
    return np.sqrt(3.0) * (kernel_size - 1) / 2.0


@dataclass(frozen=True)
class RadialBasis:
    """Equally spaced translated copies of the smooth finite bump.

    Centers c_k = k * r_max / (count-1); half-support equals the spacing,
    so b_k vanishes for |r - c_k| >= r_max/(count-1).
    """

    count: int
    r_max: float

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"radial basis needs count >= 2, got {self.count}")
        if self.r_max <= 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")

    @property
    def spacing(self) -> float:
        return self.r_max / (self.count - 1)

    def values(self, r) -> np.ndarray:
        """b_k(r) for k = 0..count-1; shape (count,) + shape of r."""
        r = np.asarray(r, dtype=float)
        if np.any(r < 0):
            raise ValueError("radius must be non-negative")
        centers = np.arange(self.count) * self.spacing
        arg = (r[None, ...] - centers.reshape((self.count,) + (1,) * r.ndim)) / self.spacing
        return smooth_finite(arg)


def radial_basis_values(basis: RadialBasis, r: float) -> np.ndarray:
    return basis.values(r)


def _kernel_offsets(kernel_size: int) -> np.ndarray:
    if kernel_size <= 0 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {kernel_size}")
    half = (kernel_size - 1) // 2
    ax = np.arange(-half, half + 1, dtype=float)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


@functools.lru_cache(maxsize=None)
def _sample_grids(l_in: int, l: int, l_out: int, kernel_size: int, count: int, r_max: float):
    basis = RadialBasis(count, r_max)
    offsets = _kernel_offsets(kernel_size)
    k = kernel_size
    d_in, d_out = irrep_dim(l_in), irrep_dim(l_out)
    cg = clebsch_gordan(l_in, l, l_out).coefficients
    radii = np.linalg.norm(offsets, axis=-1)
    grids = np.zeros((count, d_out, d_in, k, k, k))
    center = ((k - 1) // 2,) * 3
    for idx in np.ndindex(k, k, k):
        if idx == center:
            continue  # kernel center is exactly zero by definition
        r = radii[idx]
        y = _sh_unchecked(l, offsets[idx] / r)
        ang = np.einsum("imj,m->ji", cg, y)  # (d_out, d_in)
        rad = basis.values(r)
        grids[(slice(None), slice(None), slice(None)) + idx] = rad[:, None, None] * ang[None]
    grids.setflags(write=False)
    return grids


def sample_kernel_basis(
    l_in: int, l: int, l_out: int, kernel_size: int, basis: RadialBasis
) -> np.ndarray:
    """Basis grids for one path signature, shape (K, 2l_out+1, 2l_in+1, k, k, k)."""
    return _sample_grids(l_in, l, l_out, kernel_size, basis.count, basis.r_max)


@dataclass(frozen=True)
class _PathGroup:
    # all copy-level paths sharing (input entry, harmonic order, output entry)
    in_offset: int
    out_offset: int
    mult_in: int
    mult_out: int
    grids: np.ndarray  # (K, d_out, d_in, k, k, k)
    path_index: np.ndarray  # (mult_in, mult_out) positions into the flat path order


class SteerableKernelBasis:
    """Sampled basis grids plus the machinery to assemble dense kernels.

    Weights are a (num_paths, radial_count) array in the path table's
    deterministic order; ``assemble`` produces the dense
    (dim_out, dim_in, k, k, k) kernel including the per-output-channel
    fan-in normalization 1/sqrt(paths_into_channel * (k^3 - 1)).
    """

    def __init__(self, table: PathTable, kernel_size: int, basis: RadialBasis):
        _kernel_offsets(kernel_size)  # validates odd size
        self.table = table
        self.kernel_size = kernel_size
        self.radial = basis
        self.dim_in = table.in_layout.dim
        self.dim_out = table.out_layout.dim

        pos = {(p.i, p.l, p.j): n for n, p in enumerate(table.paths)}
        in_entries = _entry_spans(table.in_layout)
        out_entries = _entry_spans(table.out_layout)
        groups = []
        for eo, (out_off, out_copy0, mult_out, ir_out) in enumerate(out_entries):
            for ei, (in_off, in_copy0, mult_in, ir_in) in enumerate(in_entries):
                for l in range(table.l_max + 1):
                    key = (in_copy0, l, out_copy0)
                    if key not in pos:
                        continue
                    index = np.empty((mult_in, mult_out), dtype=np.intp)
                    for p in range(mult_in):
                        for q in range(mult_out):
                            index[p, q] = pos[(in_copy0 + p, l, out_copy0 + q)]
                    grids = sample_kernel_basis(
                        ir_in.l, l, ir_out.l, kernel_size, basis
                    )
                    groups.append(
                        _PathGroup(in_off, out_off, mult_in, mult_out, grids, index)
                    )
        self.groups = tuple(groups)

        paths_into = np.zeros(table.out_layout.num_copies, dtype=np.intp)
        for p in table.paths:
            paths_into[p.j] += 1
        support = kernel_size**3 - 1
        norm = np.zeros(self.dim_out)
        for j, offset, ir in table.out_layout.copies():
            if paths_into[j]:
                norm[offset : offset + ir.dim] = 1.0 / np.sqrt(paths_into[j] * support)
        self._out_norm = norm

    @property
    def num_weights(self) -> int:
        return len(self.table) * self.radial.count

    def weight_shape(self) -> tuple[int, int]:
        return (len(self.table), self.radial.count)

    def assemble(self, weights: np.ndarray) -> np.ndarray:
        """Dense kernel from per-(path, radial) weights; linear in weights."""
        weights = np.asarray(weights)
        if weights.shape != self.weight_shape():
            raise ValueError(
                f"weights shape {weights.shape} != expected {self.weight_shape()}"
            )
        k = self.kernel_size
        out = np.zeros((self.dim_out, self.dim_in, k, k, k), dtype=weights.dtype)
        for g in self.groups:
            w = weights[g.path_index]  # (mult_in, mult_out, K)
            grids = g.grids.astype(weights.dtype, copy=False)
            block = np.einsum("pqk,kdexyz->qdpexyz", w, grids, optimize=True)
            d_out, d_in = g.grids.shape[1], g.grids.shape[2]
            rows = slice(g.out_offset, g.out_offset + g.mult_out * d_out)
            cols = slice(g.in_offset, g.in_offset + g.mult_in * d_in)
            out[rows, cols] += block.reshape(
                g.mult_out * d_out, g.mult_in * d_in, k, k, k
            )
        out *= self._out_norm.astype(weights.dtype)[:, None, None, None, None]
        return out

    def assemble_vjp(self, grad_kernel: np.ndarray) -> np.ndarray:
        """Gradient of a scalar wrt weights given its gradient wrt the kernel."""
        gk = grad_kernel * self._out_norm.astype(grad_kernel.dtype)[
            :, None, None, None, None
        ]
        gw = np.zeros(self.weight_shape(), dtype=grad_kernel.dtype)
        k = self.kernel_size
        for g in self.groups:
            d_out, d_in = g.grids.shape[1], g.grids.shape[2]
            rows = slice(g.out_offset, g.out_offset + g.mult_out * d_out)
            cols = slice(g.in_offset, g.in_offset + g.mult_in * d_in)
            block = gk[rows, cols].reshape(g.mult_out, d_out, g.mult_in, d_in, k, k, k)
            grids = g.grids.astype(grad_kernel.dtype, copy=False)
            gw_group = np.einsum("qdpexyz,kdexyz->pqk", block, grids, optimize=True)
            np.add.at(gw, g.path_index, gw_group)
        return gw


def _entry_spans(layout: RepLayout):
    """(channel_offset, first_copy_index, multiplicity, irrep) per entry."""
    spans = []
    offset = 0
    copy0 = 0
    for mult, ir in layout.entries:
        spans.append((offset, copy0, mult, ir))
        offset += mult * ir.dim
        copy0 += mult
    return spans


def assemble_kernel(basis: SteerableKernelBasis, weights: np.ndarray) -> np.ndarray:
    return basis.assemble(weights)


def count_parameters(path_tables, radial_count: int, self_connections) -> int:
    """Total learnable scalars: radial_count per path, plus one per
    (input copy, output copy) pair of equal order in each self-connection.

    ``path_tables`` is an iterable of PathTable (or path counts);
    ``self_connections`` an iterable of (in_layout, out_layout) pairs.
    """
    total = 0
    for table in path_tables:
        n = table if isinstance(table, int) else len(table)
        total += radial_count * n
    for in_layout, out_layout in self_connections:
        for l in out_layout.orders():
            total += in_layout.mult_of_order(l) * out_layout.mult_of_order(l)
    return total


def self_connection_matrix(
    in_layout: RepLayout, out_layout: RepLayout, mixes: dict[int, np.ndarray]
) -> np.ndarray:
    """Dense (dim_out, dim_in) matrix equivalent of a per-order mixing.

    Orders absent from ``mixes`` contribute zero rows; each (out copy,
    in copy) pair of order l receives w * identity on its (2l+1)-block.
    """
    out = np.zeros((out_layout.dim, in_layout.dim))
    in_by_order: dict[int, list[int]] = {}
    for _, offset, ir in in_layout.copies():
        in_by_order.setdefault(ir.l, []).append(offset)
    out_by_order: dict[int, list[int]] = {}
    for _, offset, ir in out_layout.copies():
        out_by_order.setdefault(ir.l, []).append(offset)
    for l, w in mixes.items():
        d = irrep_dim(l)
        ins = in_by_order.get(l, [])
        outs = out_by_order.get(l, [])
        if w.shape != (len(outs), len(ins)):
            raise ValueError(
                f"order-{l} mix has shape {w.shape}, expected {(len(outs), len(ins))}"
            )
        for q, oo in enumerate(outs):
            for p, io in enumerate(ins):
                out[oo : oo + d, io : io + d] += w[q, p] * np.eye(d)
    return out


def export_plain_kernel(
    basis: SteerableKernelBasis,
    conv_weights: np.ndarray,
    self_mixes: dict[int, np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Precompute a steerable layer as an ordinary conv kernel plus a dense
    1x1x1 mixing matrix; convolving with these reproduces the layer's
    pre-nonlinearity output exactly."""
    kernel = basis.assemble(conv_weights)
    mix = self_connection_matrix(basis.table.in_layout, basis.table.out_layout, self_mixes)
    return kernel, mix.astype(conv_weights.dtype)
