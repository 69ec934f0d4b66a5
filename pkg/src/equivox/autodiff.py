"""Minimal reverse-mode autodiff over the field operations.

A ``Tape`` records each differentiable operation as it executes; nodes are
appended in execution order, which is a topological order of the value
graph, so the backward pass is a single reversed sweep with additive
gradient accumulation at fan-out points.  Saved activations live inside
the per-parent vjp closures.

Every op here takes the tape as its first argument and also works with
``tape=None``, in which case it simply computes the forward value; that
keeps inference and training on one code path.
"""

from __future__ import annotations

import numpy as np

from .field import (
    LEAKY_SLOPE,
    _conv3d,
    _conv3d_input_grad,
    _conv3d_weight_grad,
    _maxpool_with_indices,
    _pool_blocks,
    _sigmoid,
    _split_gate_layout,
    _upsample3,
    _upsample3_adjoint,
    VoxelField,
)
from .kernel import SteerableKernelBasis
from .so3 import RepLayout


class Var:
    """A tracked array: a value plus its node id on the tape."""

    __slots__ = ("value", "vid")

    def __init__(self, value, vid=None):
        self.value = value
        self.vid = vid


class BranchPins:
    """Branch selections (pool argmax indices, activation sign masks) of one
    forward pass, replayable at perturbed parameters.

    The network's loss is only piecewise smooth; its reverse-mode gradient
    differentiates the branch active at the evaluation point.  Recording the
    branches once and replaying them makes a finite-difference oracle sample
    that same smooth branch instead of stepping across argmax switches and
    ReLU kinks inside the difference stencil.
    """

    def __init__(self):
        self._items: list = []
        self._cursor: int | None = None  # None -> recording

    def rewind(self):
        if not self._items:
            raise ValueError("no recorded branches to replay")
        self._cursor = 0

    def take(self, compute):
        if self._cursor is None:
            item = compute()
            self._items.append(item)
            return item
        if self._cursor >= len(self._items):
            raise ValueError("branch replay ran past the recorded forward pass")
        item = self._items[self._cursor]
        self._cursor += 1
        return item


def val(x):
    return x.value if isinstance(x, Var) else x


class Tape:
    """Operation record for one forward pass.

    With ``collect_diagnostics=True`` ops append smoothness notes (currently
    the norm-pooling switch margin) to ``notes``; finite-difference checks
    use them to confirm the evaluation point is locally smooth.
    """

    def __init__(self, collect_diagnostics: bool = False):
        self._nodes = []  # (vid, ((parent_vid, vjp), ...)) in execution order
        self._next = 0
        self.collect_diagnostics = collect_diagnostics
        self.notes: list[dict] = []

    def min_margin(self, op: str) -> float:
        vals = [n["margin"] for n in self.notes if n["op"] == op]
        return min(vals) if vals else float("inf")

    def leaf(self, value) -> Var:
        v = Var(value, self._next)
        self._next += 1
        return v

    def record(self, value, parents) -> Var:
        """parents: iterable of (Var, vjp) with vjp mapping out-grad to parent-grad."""
        out = Var(value, self._next)
        self._next += 1
        deps = tuple((p.vid, fn) for p, fn in parents if isinstance(p, Var))
        self._nodes.append((out.vid, deps))
        return out

    def backward(self, loss: Var, seed=1.0) -> dict[int, np.ndarray]:
        """Gradients of ``loss`` wrt every upstream leaf/node, keyed by vid."""
        if not isinstance(loss, Var) or loss.vid is None or loss.vid >= self._next:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.vid: np.asarray(seed, dtype=np.asarray(loss.value).dtype)}
        for vid, deps in reversed(self._nodes):
            g = grads.pop(vid, None)
            if g is None:
                continue
            for pvid, vjp in deps:
                contrib = vjp(g)
                if pvid in grads:
                    grads[pvid] = grads[pvid] + contrib
                else:
                    grads[pvid] = contrib
        return grads


# ---------------------------------------------------------------------------
# differentiable operations (arrays are channel-major (C, X, Y, Z))


def assemble(tape, weights, basis: SteerableKernelBasis):
    kern = basis.assemble(val(weights))
    if tape is None:
        return kern
    return tape.record(kern, [(weights, lambda g: basis.assemble_vjp(g))])


def conv(tape, x, kernel):
    xv, kv = val(x), val(kernel)
    out = _conv3d(xv, kv)
    if tape is None:
        return out
    k = kv.shape[2]
    return tape.record(
        out,
        [
            (x, lambda g: _conv3d_input_grad(g, kv)),
            (kernel, lambda g: _conv3d_weight_grad(xv, g, k)),
        ],
    )


def _order_channels(layout: RepLayout, l: int) -> list[int]:
    return [o + c for _, o, ir in layout.copies() if ir.l == l for c in range(ir.dim)]


def self_connect(tape, x, mixes, in_layout: RepLayout, out_layout: RepLayout):
    """Per-order pointwise mixing; ``mixes`` maps order -> (q, p) matrix Var.

    Output orders without a mix entry are left zero (the network wires a
    self-connection only for orders its block input provides)."""
    xv = val(x)
    out = np.zeros((out_layout.dim,) + xv.shape[1:], dtype=xv.dtype)
    parents = []
    gx_specs = []
    for l in out_layout.orders():
        if l not in mixes:
            continue
        d = 2 * l + 1
        in_ch = _order_channels(in_layout, l)
        out_ch = _order_channels(out_layout, l)
        if not in_ch:
            raise ValueError(f"output asks for order {l} but input has none")
        w = mixes[l]
        wv = val(w)
        p, q = len(in_ch) // d, len(out_ch) // d
        if wv.shape != (q, p):
            raise ValueError(f"order-{l} mix shape {wv.shape} != {(q, p)}")
        xb = xv[in_ch].reshape(p, d, *xv.shape[1:])
        out[out_ch] = np.einsum(
            "qp,pd...->qd...", wv.astype(xv.dtype), xb, optimize=True
        ).reshape(len(out_ch), *xv.shape[1:])
        if tape is not None:
            def w_vjp(g, out_ch=out_ch, xb=xb, p=p, q=q, d=d):
                gb = g[out_ch].reshape(q, d, *g.shape[1:])
                return np.einsum("qd...,pd...->qp", gb, xb, optimize=True)

            parents.append((w, w_vjp))
            gx_specs.append((l, in_ch, out_ch, wv, p, q, d))
    if tape is None:
        return out

    def x_vjp(g):
        gx = np.zeros_like(xv)
        for l, in_ch, out_ch, wv, p, q, d in gx_specs:
            gb = g[out_ch].reshape(q, d, *g.shape[1:])
            gx[in_ch] = np.einsum(
                "qp,qd...->pd...", wv.astype(g.dtype), gb, optimize=True
            ).reshape(len(in_ch), *g.shape[1:])
        return gx

    parents.append((x, x_vjp))
    return tape.record(out, parents)


def pointwise_matrix(tape, x, matrix):
    """Dense 1x1x1 channel mixing: out[c] = sum_d M[c,d] x[d]."""
    xv, mv = val(x), val(matrix)
    out = np.einsum("cd,d...->c...", mv.astype(xv.dtype), xv, optimize=True)
    if tape is None:
        return out
    return tape.record(
        out,
        [
            (x, lambda g: np.einsum("cd,c...->d...", mv.astype(g.dtype), g, optimize=True)),
            (matrix, lambda g: np.einsum("c...,d...->cd", g, xv, optimize=True)),
        ],
    )


def add(tape, a, b):
    out = val(a) + val(b)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: g), (b, lambda g: g)])


def concat(tape, a, b):
    av, bv = val(a), val(b)
    out = np.concatenate([av, bv])
    if tape is None:
        return out
    na = av.shape[0]
    return tape.record(out, [(a, lambda g: g[:na]), (b, lambda g: g[na:])])


def leaky_relu(tape, x, pins: BranchPins | None = None):
    xv = val(x)
    pos = (xv > 0) if pins is None else pins.take(lambda: xv > 0)
    out = np.where(pos, xv, LEAKY_SLOPE * xv)
    if tape is None:
        return out
    scale = np.where(pos, 1.0, LEAKY_SLOPE).astype(xv.dtype)
    return tape.record(out, [(x, lambda g: g * scale)])


def gate(tape, x, layout: RepLayout, pins: BranchPins | None = None):
    """Gated nonlinearity; returns (value-or-Var, consumed layout)."""
    n_feat, n_gates, nonscalar_entries, out_layout = _split_gate_layout(layout)
    xv = val(x)
    dims = xv.shape[1:]
    out = np.empty((out_layout.dim,) + dims, dtype=xv.dtype)
    feats = xv[:n_feat]
    pos = (feats > 0) if pins is None else pins.take(lambda: feats > 0)
    out[:n_feat] = np.where(pos, feats, LEAKY_SLOPE * feats)
    sig = _sigmoid(xv[n_feat : n_feat + n_gates])
    copies = []  # (src, dst, gate_index, mult, d) per non-scalar entry
    src, dst, gi = n_feat + n_gates, n_feat, 0
    for mult, ir in nonscalar_entries:
        d = ir.dim
        block = xv[src : src + mult * d].reshape(mult, d, *dims)
        out[dst : dst + mult * d] = (block * sig[gi : gi + mult, None]).reshape(
            mult * d, *dims
        )
        copies.append((src, dst, gi, mult, d))
        src += mult * d
        dst += mult * d
        gi += mult
    if tape is None:
        return out, out_layout

    def x_vjp(g):
        gx = np.zeros_like(xv)
        gx[:n_feat] = g[:n_feat] * np.where(pos, 1.0, LEAKY_SLOPE).astype(g.dtype)
        for src, dst, gi, mult, d in copies:
            gb = g[dst : dst + mult * d].reshape(mult, d, *dims)
            block = xv[src : src + mult * d].reshape(mult, d, *dims)
            s = sig[gi : gi + mult]
            gx[src : src + mult * d] = (gb * s[:, None]).reshape(mult * d, *dims)
            gx[n_feat + gi : n_feat + gi + mult] = np.einsum(
                "md...,md...->m...", gb, block
            ) * (s * (1.0 - s))
        return gx

    return tape.record(out, [(x, x_vjp)]), out_layout


def instance_norm(tape, x, layout: RepLayout, eps: float):
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = val(x)
    n_vox = xv[0].size
    out = np.empty_like(xv)
    specs = []
    for _, off, ir in layout.copies():
        if ir.l == 0:
            ch = xv[off]
            mu = ch.mean()
            sd = ch.std()
            inv = 1.0 / (sd + eps)
            out[off] = (ch - mu) * inv
            specs.append(("s", off, 1, mu, max(sd, 1e-30), inv))
        else:
            block = xv[off : off + ir.dim]
            norms = np.sqrt(np.einsum("d...,d...->...", block, block))
            m = norms.mean()
            inv = 1.0 / (m + eps)
            out[off : off + ir.dim] = block * inv
            specs.append(("v", off, ir.dim, norms, m, inv))
    if tape is None:
        return out

    def x_vjp(g):
        gx = np.empty_like(xv)
        for kind, off, d, a, b, inv in specs:
            if kind == "s":
                mu, sd = a, b
                ch = xv[off]
                gc = g[off]
                xc = ch - mu
                gx[off] = inv * (gc - gc.mean()) - xc * (
                    np.sum(gc * xc) * inv * inv / (n_vox * sd)
                )
            else:
                norms = a
                block = xv[off : off + d]
                gb = g[off : off + d]
                s = np.sum(gb * block)
                gx[off : off + d] = gb * inv - block * (
                    s * inv * inv / (n_vox * np.maximum(norms, 1e-30))
                )
        return gx

    return tape.record(out, [(x, x_vjp)])


def maxpool(tape, x, layout: RepLayout, window: int = 2, pins: BranchPins | None = None):
    xv = val(x)
    if pins is None:
        pooled, sel = _maxpool_with_indices(VoxelField(layout, xv), window)
    else:
        sel = pins.take(
            lambda: _maxpool_with_indices(VoxelField(layout, xv), window)[1]
        )
        blocks_all = _pool_blocks(xv, window)
        pooled = VoxelField(
            layout, np.take_along_axis(blocks_all, sel[..., None], axis=-1)[..., 0]
        )
    if tape is None:
        return pooled.data
    if tape.collect_diagnostics:
        # distance to the nearest norm-pooling argmax switch (where the
        # pooled value jumps); scalar max switches are continuous
        margin = np.inf
        for _, off, ir in layout.copies():
            if ir.l == 0:
                continue
            blocks = _pool_blocks(xv[off : off + ir.dim], window)
            norms = np.sqrt(np.einsum("d...b,d...b->...b", blocks, blocks))
            top2 = np.sort(norms, axis=-1)[..., -2:]
            margin = min(margin, float((top2[..., 1] - top2[..., 0]).min()))
        tape.notes.append({"op": "maxpool_switch", "margin": margin})

    def x_vjp(g):
        gx = np.zeros_like(xv)
        c, xb, yb, zb = np.indices(g.shape)
        dx = sel % window
        dy = (sel // window) % window
        dz = sel // (window * window)
        np.add.at(gx, (c, window * xb + dx, window * yb + dy, window * zb + dz), g)
        return gx

    return tape.record(pooled.data, [(x, x_vjp)])


def upsample(tape, x):
    xv = val(x)
    out = _upsample3(xv)
    if tape is None:
        return out
    return tape.record(out, [(x, lambda g: _upsample3_adjoint(g))])


def softmax_cross_entropy(tape, logits, labels: np.ndarray):
    """Mean voxelwise cross entropy; labels is an (X, Y, Z) int array."""
    z = val(logits)
    if z.shape[1:] != labels.shape:
        raise ValueError(f"logit dims {z.shape[1:]} != label dims {labels.shape}")
    zmax = z.max(axis=0)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=0)
    logp = z - zmax - np.log(denom)
    picked = np.take_along_axis(logp, labels[None], axis=0)[0]
    loss = -picked.mean()
    if tape is None:
        return float(loss)

    def z_vjp(g):
        soft = ez / denom
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, labels[None], 1.0, axis=0)
        return (g * (soft - onehot) / labels.size).astype(z.dtype)

    return tape.record(float(loss), [(logits, z_vjp)])
