"""Voxel feature fields and the equivariant layer operations.

A ``VoxelField`` stores a direct sum of irrep channels on a 3D grid,
channel-major, shape (layout.dim, X, Y, Z).  All operations here are pure
functions returning new fields.  The convolution is an ordinary dense 3D
cross-correlation with "same" zero padding, run as chunked im2col matmul;
its gradient helpers live here too so the autodiff layer stays thin.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform

from .so3 import Irrep, RepLayout, Rotation, _wigner_matrix

LEAKY_SLOPE = 0.01
DEFAULT_EPS = 1e-5

_COL_BUDGET_BYTES = 48 << 20


@dataclass(frozen=True)
class VoxelField:
    """A grid of direct-sum irrep features, data shape (dim, X, Y, Z)."""

    layout: RepLayout
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 4 or d.shape[0] != self.layout.dim:
            raise ValueError(
                f"data shape {d.shape} inconsistent with layout {self.layout} "
                f"(dim {self.layout.dim})"
            )
        object.__setattr__(self, "data", d)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def astype(self, dtype) -> "VoxelField":
        return VoxelField(self.layout, self.data.astype(dtype))

    def validate_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("field contains non-finite values")


@dataclass(frozen=True)
class LabelVolume:
    """Integer class labels per voxel, shape (X, Y, Z), range [0, n_classes)."""

    data: np.ndarray
    n_classes: int

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise ValueError(f"labels must be a 3D volume, got shape {d.shape}")
        if d.size and (d.min() < 0 or d.max() >= self.n_classes):
            raise ValueError(
                f"labels out of range [0, {self.n_classes}): "
                f"min {d.min()}, max {d.max()}"
            )
        object.__setattr__(self, "data", d.astype(np.int32))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# dense 3D cross-correlation
#
# torch (when importable and not disabled) supplies the heavy sliding-window
# arithmetic; the chunked im2col matmul below is the reference fallback and
# the two are asserted equal in the test suite.

if os.environ.get("EQUIVOX_CONV_BACKEND", "auto") == "numpy":
    _torch = None
else:
    try:
        import torch as _torch
    except ImportError:  # pragma: no cover
        _torch = None


def _check_kernel(x: np.ndarray, w: np.ndarray) -> int:
    k = w.shape[2]
    if w.ndim != 5 or w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"kernel must be cubic with odd size, got {w.shape[2:]}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"kernel expects {w.shape[1]} input channels, field has {x.shape[0]}")
    return k


def _conv3d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cross-correlation of (Ci,X,Y,Z) with (Co,Ci,k,k,k), same zero padding."""
    k = _check_kernel(x, w)
    if _torch is not None:
        xt = _torch.from_numpy(np.ascontiguousarray(x))
        wt = _torch.from_numpy(np.ascontiguousarray(w))
        with _torch.no_grad():
            out = _torch.nn.functional.conv3d(xt[None], wt, padding=k // 2)
        return out.numpy()[0]
    return _conv3d_numpy(x, w)


def _conv3d_numpy(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    ci, X, Y, Z = x.shape
    co = w.shape[0]
    k = _check_kernel(x, w)
    p = k // 2
    xp = np.zeros((ci, X + 2 * p, Y + 2 * p, Z + 2 * p), dtype=x.dtype)
    xp[:, p : p + X, p : p + Y, p : p + Z] = x
    wm = np.ascontiguousarray(w.reshape(co, ci * k * k * k))
    out = np.empty((co, X, Y, Z), dtype=x.dtype)
    for x0, x1, col in _im2col_slabs(xp, X, Y, Z, k):
        out[:, x0:x1] = (wm @ col).reshape(co, x1 - x0, Y, Z)
    return out


def _conv3d_input_grad(gout: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of _conv3d in its field argument."""
    k = w.shape[2]
    if _torch is not None:
        shape = (1, w.shape[1]) + gout.shape[1:]
        gt = _torch.from_numpy(np.ascontiguousarray(gout))
        wt = _torch.from_numpy(np.ascontiguousarray(w))
        with _torch.no_grad():
            gx = _torch.nn.grad.conv3d_input(shape, wt, gt[None], padding=k // 2)
        return gx.numpy()[0]
    w_adj = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    return _conv3d_numpy(gout, w_adj)


def _conv3d_weight_grad(x: np.ndarray, gout: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of _conv3d in its kernel argument."""
    ci, X, Y, Z = x.shape
    co = gout.shape[0]
    if _torch is not None:
        xt = _torch.from_numpy(np.ascontiguousarray(x))
        gt = _torch.from_numpy(np.ascontiguousarray(gout))
        with _torch.no_grad():
            gw = _torch.nn.grad.conv3d_weight(
                xt[None], (co, ci, k, k, k), gt[None], padding=k // 2
            )
        return gw.numpy()
    p = k // 2
    xp = np.zeros((ci, X + 2 * p, Y + 2 * p, Z + 2 * p), dtype=x.dtype)
    xp[:, p : p + X, p : p + Y, p : p + Z] = x
    gw = np.zeros((co, ci * k * k * k), dtype=x.dtype)
    for x0, x1, col in _im2col_slabs(xp, X, Y, Z, k):
        g = gout[:, x0:x1].reshape(co, -1)
        gw += g @ col.T
    return gw.reshape(co, ci, k, k, k)


def _im2col_slabs(xp: np.ndarray, X: int, Y: int, Z: int, k: int):
    """Yield (x0, x1, column matrix) over x-slabs, bounding the buffer size."""
    ci = xp.shape[0]
    per_slice = ci * k * k * k * Y * Z * xp.itemsize
    slab = max(1, _COL_BUDGET_BYTES // per_slice)
    col = None
    for x0 in range(0, X, slab):
        x1 = min(x0 + slab, X)
        nx = x1 - x0
        if col is None or col.shape[4] != nx:
            col = np.empty((ci, k, k, k, nx, Y, Z), dtype=xp.dtype)
        for dx in range(k):
            for dy in range(k):
                for dz in range(k):
                    col[:, dx, dy, dz] = xp[
                        :, x0 + dx : x1 + dx, dy : dy + Y, dz : dz + Z
                    ]
        yield x0, x1, col.reshape(ci * k * k * k, nx * Y * Z)


def convolve(field: VoxelField, kernel: np.ndarray, out_layout: RepLayout) -> VoxelField:
    """Dense 3D cross-correlation preserving spatial dims ("same" padding)."""
    if kernel.shape[0] != out_layout.dim:
        raise ValueError(
            f"kernel output dim {kernel.shape[0]} != layout dim {out_layout.dim}"
        )
    return VoxelField(out_layout, _conv3d(field.data, kernel))


# ---------------------------------------------------------------------------
# pointwise and structural operations


def _copies_of_order(layout: RepLayout, l: int) -> list[int]:
    return [offset for _, offset, ir in layout.copies() if ir.l == l]


def _gather_order(data: np.ndarray, offsets: list[int], d: int) -> np.ndarray:
    idx = [o + c for o in offsets for c in range(d)]
    return data[idx].reshape(len(offsets), d, *data.shape[1:])


def self_connection(
    field: VoxelField, mixes: dict[int, np.ndarray], out_layout: RepLayout
) -> VoxelField:
    """Pointwise per-order linear mixing of irrep copies (1x1x1 analogue).

    ``mixes[l]`` has shape (out copies of order l, in copies of order l);
    the same matrix entry scales all 2l+1 components of a copy.
    """
    out = np.zeros((out_layout.dim,) + field.dims, dtype=field.data.dtype)
    for l in out_layout.orders():
        in_offs = _copies_of_order(field.layout, l)
        out_offs = _copies_of_order(out_layout, l)
        if not in_offs:
            raise ValueError(f"output asks for order {l} but input has none")
        if l not in mixes:
            raise ValueError(f"missing mixing matrix for order {l}")
        w = mixes[l]
        if w.shape != (len(out_offs), len(in_offs)):
            raise ValueError(
                f"order-{l} mix shape {w.shape} != {(len(out_offs), len(in_offs))}"
            )
        d = 2 * l + 1
        block = _gather_order(field.data, in_offs, d)
        mixed = np.einsum("qp,pd...->qd...", w.astype(field.data.dtype), block)
        for q, o in enumerate(out_offs):
            out[o : o + d] = mixed[q]
    return VoxelField(out_layout, out)


def _split_gate_layout(layout: RepLayout):
    """Split (scalars | gates | non-scalars); returns index bounds and the
    output layout with the gate scalars consumed."""
    entries = list(layout.entries)
    n_scalar = 0
    seen_nonscalar = False
    nonscalar_entries = []
    for mult, ir in entries:
        if ir.l == 0:
            if seen_nonscalar:
                raise ValueError("scalar entries must precede non-scalar entries")
            n_scalar += mult
        else:
            seen_nonscalar = True
            nonscalar_entries.append((mult, ir))
    n_gates = sum(mult for mult, _ in nonscalar_entries)
    n_features = n_scalar - n_gates
    if n_features < 0:
        raise ValueError(
            f"layout {layout} has {n_scalar} scalars but needs "
            f"{n_gates} gates for its non-scalar channels"
        )
    out_entries = []
    if n_features:
        parity = next((ir.parity for _, ir in entries if ir.l == 0), "e")
        out_entries.append((n_features, Irrep(0, parity)))
    out_entries.extend(nonscalar_entries)
    return n_features, n_gates, nonscalar_entries, RepLayout(tuple(out_entries))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def gate(field: VoxelField) -> VoxelField:
    """Gated nonlinearity: leaky-ReLU on feature scalars, sigmoid(gate) times
    each non-scalar channel; the gate scalars are consumed."""
    n_feat, n_gates, nonscalar_entries, out_layout = _split_gate_layout(field.layout)
    data = field.data
    out = np.empty((out_layout.dim,) + field.dims, dtype=data.dtype)
    feats = data[:n_feat]
    out[:n_feat] = np.where(feats > 0, feats, LEAKY_SLOPE * feats)
    sig = _sigmoid(data[n_feat : n_feat + n_gates])
    src = n_feat + n_gates
    dst = n_feat
    g = 0
    for mult, ir in nonscalar_entries:
        d = ir.dim
        block = data[src : src + mult * d].reshape(mult, d, *field.dims)
        out[dst : dst + mult * d] = (block * sig[g : g + mult, None]).reshape(
            mult * d, *field.dims
        )
        src += mult * d
        dst += mult * d
        g += mult
    return VoxelField(out_layout, out)


def _pool_blocks(a: np.ndarray, window: int) -> np.ndarray:
    """Reshape trailing (X,Y,Z) into blocks, flattened x-fastest last."""
    *lead, X, Y, Z = a.shape
    w = window
    b = a.reshape(*lead, X // w, w, Y // w, w, Z // w, w)
    # scan order (dz, dy, dx) so np.argmax ties resolve x-fastest
    b = np.moveaxis(b, (-5, -3, -1), (-1, -2, -3))
    return b.reshape(*lead, X // w, Y // w, Z // w, w * w * w)


def _maxpool_with_indices(field: VoxelField, window: int = 2):
    X, Y, Z = field.dims
    if X % window or Y % window or Z % window:
        raise ValueError(f"dims {field.dims} not divisible by window {window}")
    data = field.data
    out = np.empty((field.layout.dim, X // window, Y // window, Z // window), data.dtype)
    # selected flat block index per (copy component, block), for the backward pass
    sel = np.empty(out.shape, dtype=np.intp)
    for _, off, ir in field.layout.copies():
        d = ir.dim
        blocks = _pool_blocks(data[off : off + d], window)
        if ir.l == 0:
            idx = np.argmax(blocks[0], axis=-1)
        else:
            norms = np.einsum("d...b,d...b->...b", blocks, blocks)
            idx = np.argmax(norms, axis=-1)
        chosen = np.take_along_axis(blocks, idx[None, ..., None], axis=-1)[..., 0]
        out[off : off + d] = chosen
        sel[off : off + d] = idx[None]
    return VoxelField(field.layout, out), sel


def equivariant_maxpool(field: VoxelField, window: int = 2) -> VoxelField:
    """Componentwise max for scalars; for non-scalar channels the entire
    vector from the block voxel with the greatest norm (raster tie-break)."""
    pooled, _ = _maxpool_with_indices(field, window)
    return pooled


def _upsample_axis(a: np.ndarray) -> np.ndarray:
    """Double the last axis by trilinear interpolation, align-corners-false."""
    n = a.shape[-1]
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * n,), dtype=a.dtype)
    out[..., 0::2] = 0.25 * prev + 0.75 * a
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return out


def _upsample_axis_adjoint(g: np.ndarray) -> np.ndarray:
    ge = g[..., 0::2]
    go = g[..., 1::2]
    ga = 0.75 * (ge + go)
    ga[..., 0] += 0.25 * ge[..., 0]
    ga[..., :-1] += 0.25 * ge[..., 1:]
    ga[..., 1:] += 0.25 * go[..., :-1]
    ga[..., -1] += 0.25 * go[..., -1]
    return ga


def _upsample3(data: np.ndarray) -> np.ndarray:
    for ax in (1, 2, 3):
        data = np.moveaxis(_upsample_axis(np.moveaxis(data, ax, -1)), -1, ax)
    return data


def _upsample3_adjoint(g: np.ndarray) -> np.ndarray:
    for ax in (3, 2, 1):
        g = np.moveaxis(_upsample_axis_adjoint(np.moveaxis(g, ax, -1)), -1, ax)
    return g


def trilinear_upsample(field: VoxelField, factor: int = 2) -> VoxelField:
    """Channelwise trilinear upsampling by 2, align-corners-false."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    return VoxelField(field.layout, _upsample3(field.data))


def equivariant_instance_norm(field: VoxelField, eps: float = DEFAULT_EPS) -> VoxelField:
    """Scalars: zero-mean, unit-std over voxels.  Non-scalar channels are
    divided by their mean norm over voxels.  No learned affine terms."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    data = field.data
    out = np.empty_like(data)
    for _, off, ir in field.layout.copies():
        if ir.l == 0:
            x = data[off]
            mu = x.mean()
            sd = x.std()
            out[off] = (x - mu) / (sd + eps)
        else:
            block = data[off : off + ir.dim]
            norms = np.sqrt(np.einsum("d...,d...->...", block, block))
            out[off : off + ir.dim] = block / (norms.mean() + eps)
    return VoxelField(field.layout, out)


def concat_fields(a: VoxelField, b: VoxelField) -> VoxelField:
    if a.dims != b.dims:
        raise ValueError(f"spatial dims differ: {a.dims} vs {b.dims}")
    return VoxelField(a.layout.concat(b.layout), np.concatenate([a.data, b.data]))


def add_fields(a: VoxelField, b: VoxelField) -> VoxelField:
    if a.layout != b.layout:
        raise ValueError(f"layouts differ: {a.layout} vs {b.layout}")
    return VoxelField(a.layout, a.data + b.data)


# ---------------------------------------------------------------------------
# rotation harness


def _grid_source_indices(dims: tuple[int, int, int], r: Rotation) -> tuple:
    X, Y, Z = dims
    if not (X == Y == Z):
        raise ValueError(f"exact rotation needs cubic dims, got {dims}")
    c = (X - 1) / 2.0
    ax = np.arange(X, dtype=float)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([gx, gy, gz]).reshape(3, -1) - c
    src = r.matrix.T @ pts + c
    rounded = np.rint(src)
    if np.abs(src - rounded).max() > 1e-9:
        raise ValueError("rotation does not map the voxel grid to itself")
    if rounded.min() < 0 or rounded.max() > X - 1:
        raise ValueError("rotation moves voxels outside the grid")
    sx, sy, sz = rounded.astype(np.intp)
    return sx, sy, sz


def rotate_field_exact(field: VoxelField, r: Rotation) -> VoxelField:
    """Rotate a field by a grid-preserving rotation: exact voxel permutation
    about the volume center plus the per-order Wigner action on components."""
    X, _, _ = field.dims
    sx, sy, sz = _grid_source_indices(field.dims, r)
    permuted = field.data[:, sx, sy, sz].reshape(field.data.shape)
    out = np.empty_like(permuted)
    wig = {l: _wigner_matrix(l, r.matrix).astype(field.data.dtype) for l in field.layout.orders()}
    for _, off, ir in field.layout.copies():
        if ir.l == 0:
            out[off] = permuted[off]
        else:
            out[off : off + ir.dim] = np.tensordot(
                wig[ir.l], permuted[off : off + ir.dim], axes=(1, 0)
            )
    return VoxelField(field.layout, out)


def rotate_labels_exact(labels: LabelVolume, r: Rotation) -> LabelVolume:
    sx, sy, sz = _grid_source_indices(labels.dims, r)
    return LabelVolume(labels.data[sx, sy, sz].reshape(labels.dims), labels.n_classes)


def rotate_volume_interp(volume, r: Rotation):
    """Resample about the volume center at rotated coordinates: trilinear for
    intensities, nearest-neighbor for labels, zero / background fill.

    Grid-preserving rotations degenerate to the exact permutation, avoiding
    float jitter at voxels that land exactly on the boundary."""
    try:
        if isinstance(volume, LabelVolume):
            return rotate_labels_exact(volume, r)
        if all(ir.l == 0 for _, ir in volume.layout.entries):
            return rotate_field_exact(volume, r)
    except ValueError:
        pass
    if isinstance(volume, LabelVolume):
        c = (np.array(volume.dims) - 1) / 2.0
        m = r.matrix.T
        moved = affine_transform(
            volume.data, m, offset=c - m @ c, order=0, mode="constant", cval=0
        )
        return LabelVolume(moved, volume.n_classes)
    if any(ir.l != 0 for _, ir in volume.layout.entries):
        raise ValueError("interpolated rotation supports scalar fields only")
    c = (np.array(volume.dims) - 1) / 2.0
    m = r.matrix.T
    out = np.empty_like(volume.data)
    for ch in range(volume.data.shape[0]):
        out[ch] = affine_transform(
            volume.data[ch].astype(np.float64),
            m,
            offset=c - m @ c,
            order=1,
            mode="constant",
            cval=0.0,
            prefilter=False,
        ).astype(volume.data.dtype)
    return VoxelField(volume.layout, out)
