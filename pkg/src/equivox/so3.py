"""Real representation theory of SO(3) for steerable voxel kernels.

Conventions used throughout the package:

- Irreps are indexed by a non-negative order ``l`` and have dimension
  ``2l+1``.  Components are ordered ``m = -l..l``.
- Spherical harmonics are real-valued with "component" normalization:
  ``|Y^l(u)|^2 = 2l+1`` for every unit vector ``u``.  Concretely
  ``Y^1(u) = sqrt(3) * (y, z, x)`` and ``Y^2`` is built from the real
  quadratic harmonics (xy, yz, 3z^2-r^2, zx, x^2-y^2).
- Wigner matrices ``D^l(R)`` are the unique real orthogonal matrices with
  ``Y^l(R u) = D^l(R) Y^l(u)``.  They are computed as matrix exponentials
  of hard-coded so(3) generator images in the harmonic basis.
- Reduced tensor products (Clebsch-Gordan tensors) are solved numerically
  from the equivariance constraint, normalized to unit Frobenius norm,
  with the sign fixed so the first nonzero coefficient (C-order index
  scan) is positive.

Orders ``l <= 2`` are what the package needs and what the test suite
guarantees; the generic code paths accept the hard-coded table only.
"""

from __future__ import annotations

import functools
import itertools
import re
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.spatial.transform import Rotation as _SciRotation

L_MAX = 2

_SQ3 = np.sqrt(3.0)

# so(3) generator images G_x, G_y, G_z per order, defined by
# d/dt D^l(exp(t L_a)) |_{t=0} = G_a  in the real harmonic basis above.
_GENERATORS = {
    0: np.zeros((3, 1, 1)),
    1: np.array(
        [
            [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
            [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
            [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
        ],
        dtype=float,
    ),
    2: np.array(
        [
            [
                [0, 0, 0, -1, 0],
                [0, 0, -_SQ3, 0, -1],
                [0, _SQ3, 0, 0, 0],
                [1, 0, 0, 0, 0],
                [0, 1, 0, 0, 0],
            ],
            [
                [0, 1, 0, 0, 0],
                [-1, 0, 0, 0, 0],
                [0, 0, 0, -_SQ3, 0],
                [0, 0, _SQ3, 0, -1],
                [0, 0, 0, 1, 0],
            ],
            [
                [0, 0, 0, 0, 2],
                [0, 0, 0, 1, 0],
                [0, 0, 0, 0, 0],
                [0, -1, 0, 0, 0],
                [-2, 0, 0, 0, 0],
            ],
        ],
        dtype=float,
    ),
}

_PARITY_ALIASES = {"e": "e", "o": "o", "even": "e", "odd": "o"}


def irrep_dim(l: int) -> int:
    """Dimension 2l+1 of the order-l irrep."""
    if not isinstance(l, (int, np.integer)) or l < 0:
        raise ValueError(f"irrep order must be a non-negative integer, got {l!r}")
    return 2 * int(l) + 1


@dataclass(frozen=True)
class Irrep:
    """An irreducible representation of SO(3).

    ``parity`` ("e" or "o") is carried as a label for I/O round-trips only;
    no numerical result in this package depends on it.
    """

    l: int
    parity: str = "e"

    def __post_init__(self):
        irrep_dim(self.l)
        p = _PARITY_ALIASES.get(self.parity)
        if p is None:
            raise ValueError(f"parity must be 'e'/'o' (or 'even'/'odd'), got {self.parity!r}")
        object.__setattr__(self, "parity", p)

    @property
    def dim(self) -> int:
        return irrep_dim(self.l)

    def __str__(self) -> str:
        return f"{self.l}{self.parity}"


_LAYOUT_TERM = re.compile(r"^(\d+)x(\d+)([eo])$")


@dataclass(frozen=True)
class RepLayout:
    """An ordered direct sum of irrep copies, e.g. ``8x0e+4x1e+2x2e``.

    ``entries`` is a tuple of ``(multiplicity, Irrep)``.  Channel indices
    enumerate individual copies in entry order; ``copies()`` yields them
    together with their component offsets into the channel dimension.
    """

    entries: tuple[tuple[int, Irrep], ...]

    def __post_init__(self):
        ents = []
        for mult, ir in self.entries:
            if int(mult) <= 0:
                raise ValueError(f"multiplicity must be positive, got {mult}")
            ents.append((int(mult), ir))
        object.__setattr__(self, "entries", tuple(ents))

    @classmethod
    def parse(cls, text: str) -> "RepLayout":
        """Parse the string form, the exact inverse of ``str()``."""
        entries = []
        for term in text.strip().split("+"):
            m = _LAYOUT_TERM.match(term.strip())
            if m is None:
                raise ValueError(f"malformed layout term {term!r} in {text!r}")
            mult, l, parity = m.groups()
            entries.append((int(mult), Irrep(int(l), parity)))
        return cls(tuple(entries))

    def __str__(self) -> str:
        return "+".join(f"{mult}x{ir}" for mult, ir in self.entries)

    @property
    def dim(self) -> int:
        return sum(mult * ir.dim for mult, ir in self.entries)

    @property
    def num_copies(self) -> int:
        return sum(mult for mult, _ in self.entries)

    def copies(self):
        """Yield ``(channel_index, component_offset, irrep)`` per copy."""
        idx = 0
        offset = 0
        for mult, ir in self.entries:
            for _ in range(mult):
                yield idx, offset, ir
                idx += 1
                offset += ir.dim
        assert offset == self.dim

    def irreps_of_copies(self) -> list[Irrep]:
        return [ir for _, _, ir in self.copies()]

    def mult_of_order(self, l: int) -> int:
        return sum(mult for mult, ir in self.entries if ir.l == l)

    def orders(self) -> list[int]:
        """Distinct orders present, ascending."""
        return sorted({ir.l for _, ir in self.entries})

    def scaled(self, factor: int) -> "RepLayout":
        return RepLayout(tuple((mult * factor, ir) for mult, ir in self.entries))

    def concat(self, other: "RepLayout") -> "RepLayout":
        return RepLayout(self.entries + other.entries)


def scalar_layout(channels: int, parity: str = "e") -> RepLayout:
    return RepLayout(((channels, Irrep(0, parity)),))


@dataclass(frozen=True)
class Rotation:
    """A proper rotation of 3-space; wraps an orthogonal matrix with det +1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got shape {m.shape}")
        if np.abs(m @ m.T - np.eye(3)).max() > 1e-12:
            raise ValueError("matrix is not orthogonal within 1e-12")
        if abs(np.linalg.det(m) - 1.0) > 1e-12:
            raise ValueError("matrix determinant is not +1 within 1e-12")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0:
            raise ValueError("axis must be nonzero")
        return cls(_SciRotation.from_rotvec(axis / n * angle_rad).as_matrix())

    @classmethod
    def from_euler(cls, seq: str, angles, degrees: bool = False) -> "Rotation":
        return cls(_SciRotation.from_euler(seq, angles, degrees=degrees).as_matrix())

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Rotation":
        q = rng.normal(size=4)
        return cls(_SciRotation.from_quat(q / np.linalg.norm(q)).as_matrix())

    def compose(self, other: "Rotation") -> "Rotation":
        """The rotation that applies ``other`` first, then ``self``."""
        return Rotation(self.matrix @ other.matrix)

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def as_rotvec(self) -> np.ndarray:
        return _SciRotation.from_matrix(self.matrix).as_rotvec()


@dataclass(frozen=True)
class WignerBlock:
    """Order-l Wigner matrix, real orthogonal of shape (2l+1, 2l+1)."""

    l: int
    matrix: np.ndarray


def _check_order(l: int):
    irrep_dim(l)
    if l > L_MAX:
        raise ValueError(f"order l={l} unsupported (l <= {L_MAX})")


def spherical_harmonics(l: int, u) -> np.ndarray:
    """Real spherical harmonics Y^l(u) of a unit vector, components m=-l..l.

    Component normalization: |Y^l(u)|^2 = 2l+1 for every unit u.
    """
    _check_order(l)
    u = np.asarray(u, dtype=float)
    if u.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {u.shape}")
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise ValueError("input must be a unit vector within 1e-9")
    return _sh_unchecked(l, u)


def _sh_unchecked(l: int, u: np.ndarray) -> np.ndarray:
    x, y, z = u
    if l == 0:
        return np.array([1.0])
    if l == 1:
        return _SQ3 * np.array([y, z, x])
    s15 = np.sqrt(15.0)
    return np.array(
        [
            s15 * x * y,
            s15 * y * z,
            np.sqrt(5.0) / 2.0 * (3.0 * z * z - 1.0),
            s15 * z * x,
            s15 / 2.0 * (x * x - y * y),
        ]
    )


def _wigner_matrix(l: int, rot_matrix: np.ndarray) -> np.ndarray:
    if l == 0:
        return np.ones((1, 1))
    rotvec = _SciRotation.from_matrix(rot_matrix).as_rotvec()
    gen = _GENERATORS[l]
    return expm(rotvec[0] * gen[0] + rotvec[1] * gen[1] + rotvec[2] * gen[2])


def wigner_d(l: int, r: Rotation) -> WignerBlock:
    """Wigner matrix D^l(R) with Y^l(Ru) = D^l(R) Y^l(u)."""
    _check_order(l)
    return WignerBlock(l, _wigner_matrix(l, r.matrix))


def rep_matrix(layout: RepLayout, r: Rotation) -> np.ndarray:
    """Block-diagonal action of a rotation on a direct-sum layout."""
    blocks = {l: _wigner_matrix(l, r.matrix) for l in layout.orders()}
    for l in layout.orders():
        _check_order(l)
    out = np.zeros((layout.dim, layout.dim))
    for _, offset, ir in layout.copies():
        out[offset : offset + ir.dim, offset : offset + ir.dim] = blocks[ir.l]
    return out


@dataclass(frozen=True)
class CGTensor:
    """Reduced tensor product coefficients for l1 x l2 -> l3.

    ``coefficients`` has shape (2l1+1, 2l2+1, 2l3+1).  ``allowed`` is False
    (and the tensor identically zero) when the selection rule fails.
    """

    l1: int
    l2: int
    l3: int
    coefficients: np.ndarray
    allowed: bool = True


_CG_SEED = 0x5E3D
_CG_NUM_ROTATIONS = 20
_cg_lock = threading.Lock()


def selection_rule(l1: int, l2: int, l3: int) -> bool:
    return abs(l1 - l2) <= l3 <= l1 + l2


@functools.lru_cache(maxsize=None)
def _cg_coefficients(l1: int, l2: int, l3: int) -> np.ndarray:
    d1, d2, d3 = irrep_dim(l1), irrep_dim(l2), irrep_dim(l3)
    rng = np.random.default_rng(_CG_SEED)
    blocks = []
    for _ in range(_CG_NUM_ROTATIONS):
        r = Rotation.random(rng)
        m1 = _wigner_matrix(l1, r.matrix)
        m2 = _wigner_matrix(l2, r.matrix)
        m3 = _wigner_matrix(l3, r.matrix)
        # constraint on vec(C), C-order index (m1, m2, m3):
        # sum_{ij} D1[i,a] D2[j,b] C[i,j,n] = sum_m D3[n,m] C[a,b,m]
        lhs = np.kron(m1.T, np.kron(m2.T, np.eye(d3)))
        rhs = np.kron(np.eye(d1), np.kron(np.eye(d2), m3))
        blocks.append(lhs - rhs)
    a = np.vstack(blocks)
    _, svals, vt = np.linalg.svd(a)
    if svals[-1] > 1e-8:
        raise RuntimeError(
            f"no equivariant tensor found for ({l1},{l2},{l3}); "
            f"smallest singular value {svals[-1]:.3e}"
        )
    if len(svals) > 1 and svals[-2] < 1e-8:
        raise RuntimeError(f"tensor product ({l1},{l2},{l3}) is not multiplicity-free")
    coeff = vt[-1]
    nz = np.nonzero(np.abs(coeff) > 1e-9)[0]
    if coeff[nz[0]] < 0:
        coeff = -coeff
    coeff = coeff / np.linalg.norm(coeff)
    coeff = coeff.reshape(d1, d2, d3)
    coeff.setflags(write=False)
    return coeff


def clebsch_gordan(l1: int, l2: int, l3: int) -> CGTensor:
    """Unit-Frobenius-norm solution of the CG equivariance constraint.

    Returns a flagged zero tensor when the selection rule excludes the
    triple.  Results are cached; the cache is safe for concurrent readers
    and initialization is serialized.
    """
    for l in (l1, l2, l3):
        _check_order(l)
    if not selection_rule(l1, l2, l3):
        zero = np.zeros((irrep_dim(l1), irrep_dim(l2), irrep_dim(l3)))
        return CGTensor(l1, l2, l3, zero, allowed=False)
    with _cg_lock:
        coeff = _cg_coefficients(l1, l2, l3)
    return CGTensor(l1, l2, l3, coeff, allowed=True)


def tensor_product_reduce(v1, v2, l3: int) -> np.ndarray:
    """Bilinear equivariant reduction of two irrep vectors into order l3."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if v1.ndim != 1 or v1.shape[0] % 2 != 1:
        raise ValueError(f"first factor has invalid irrep dimension {v1.shape}")
    if v2.ndim != 1 or v2.shape[0] % 2 != 1:
        raise ValueError(f"second factor has invalid irrep dimension {v2.shape}")
    l1 = (v1.shape[0] - 1) // 2
    l2 = (v2.shape[0] - 1) // 2
    cg = clebsch_gordan(l1, l2, l3)
    return np.einsum("abn,a,b->n", cg.coefficients, v1, v2)


@dataclass(frozen=True)
class Path:
    """One selection-rule path: input copy i, harmonic order l, output copy j."""

    i: int
    l: int
    j: int
    l_in: int
    l_out: int
    in_offset: int
    out_offset: int


@dataclass(frozen=True)
class PathTable:
    """All selection-rule paths between two layouts, in deterministic order.

    Ordering is input-copy-major, then harmonic order, then output copy.
    """

    in_layout: RepLayout
    out_layout: RepLayout
    l_max: int
    paths: tuple[Path, ...]

    def __len__(self) -> int:
        return len(self.paths)


def selection_paths(in_layout: RepLayout, out_layout: RepLayout, l_max: int) -> PathTable:
    """Enumerate (input copy, harmonic order, output copy) triples allowed
    by |l_i - l_j| <= l <= l_i + l_j with l <= l_max."""
    if l_max < 0:
        raise ValueError("l_max must be non-negative")
    in_copies = list(in_layout.copies())
    out_copies = list(out_layout.copies())
    paths = []
    for i, in_off, ir_i in in_copies:
        for l in range(l_max + 1):
            for j, out_off, ir_j in out_copies:
                if selection_rule(ir_i.l, l, ir_j.l):
                    paths.append(Path(i, l, j, ir_i.l, ir_j.l, in_off, out_off))
    return PathTable(in_layout, out_layout, l_max, tuple(paths))


def cube_rotations() -> list[Rotation]:
    """The 24 orientation-preserving symmetries of the cube, fixed order.

    Signed permutation matrices with determinant +1, sorted by their
    flattened entries; these map any cubic voxel grid onto itself.
    """
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(perm, signs)):
                m[row, col] = s
            if np.linalg.det(m) > 0:
                mats.append(m)
    mats.sort(key=lambda m: tuple(m.ravel()))
    assert len(mats) == 24
    return [Rotation(m) for m in mats]
