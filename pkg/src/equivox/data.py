"""Synthetic orientation-sensitive datasets and the volume/checkpoint formats.

Synthetic cases contain ellipsoid pairs with identical intensity whose class
label (1 vs 2) is decided purely by each ellipsoid's orientation relative to
its partner: long axes aligned with the pair separation -> class 1, long
axes orthogonal -> class 2.  The rule is invariant under joint rotation of
a case, so rotating a (volume, labels) pair yields another valid case.
Object poses are jittered only up to ``tilt_max_deg`` around a canonical
frame, mirroring how scanned anatomy clusters near a standard orientation;
test-time rotations therefore probe poses unseen in training.

File formats (both little-endian, bit-exact round trips):

  volume      one JSON header line {dims, channels, dtype, layout?} + "\n"
              + raw payload, index = ((c*Z + z)*Y + y)*X + x
  checkpoint  one JSON manifest line {config, params: [{name, shape,
              offset}...], payload_bytes} + "\n" + concatenated float32
              parameter payload
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .field import LabelVolume, VoxelField
from .net import ParameterStore, UnetConfig, build_network
from .so3 import RepLayout, scalar_layout

N_CLASSES = 3  # background, aligned pair, orthogonal pair


@dataclass(frozen=True)
class SyntheticSpec:
    grid: int = 32
    pairs: tuple[int, int] = (2, 2)  # min/max ellipsoid pairs per case
    long_axis: float = 4.6
    short_axis: float = 1.9
    separation: float = 6.0  # between ellipsoid centers, across their axes
    tilt_max_deg: float = 20.0
    noise_sigma: float = 0.05
    intensity: float = 1.0
    retry_budget: int = 200

    def __post_init__(self):
        if self.grid < 16:
            raise ValueError("grid must be >= 16")
        if self.pairs[0] < 1 or self.pairs[0] > self.pairs[1]:
            raise ValueError(f"invalid pair count range {self.pairs}")


def _random_tilt(rng, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_deg))
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _frame_from_axis(axis: np.ndarray, rng) -> np.ndarray:
    """Orthonormal frame whose first column is ``axis``."""
    a = axis / np.linalg.norm(axis)
    helper = rng.normal(size=3)
    b = helper - (helper @ a) * a
    while np.linalg.norm(b) < 1e-6:
        helper = rng.normal(size=3)
        b = helper - (helper @ a) * a
    b /= np.linalg.norm(b)
    c = np.cross(a, b)
    return np.stack([a, b, c], axis=1)


def _ellipsoid_mask(grid: int, center, frame, semi_axes) -> np.ndarray:
    ax = np.arange(grid, dtype=float)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    rel = np.stack([gx, gy, gz], axis=-1) - center
    local = rel @ frame  # coordinates in the ellipsoid frame
    q = (local / np.asarray(semi_axes)) ** 2
    return q.sum(axis=-1) <= 1.0


def generate_synthetic_case(seed: int, spec: SyntheticSpec | None = None):
    """Deterministic (volume, labels) pair; classes decided by relative
    orientation of each ellipsoid pair (aligned=1, orthogonal=2)."""
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    grid = spec.grid
    center = (grid - 1) / 2.0
    # any rotation about the volume center keeps objects inside this ball
    safe_radius = grid / 2.0 - 2.0
    extent = spec.separation / 2.0 + 1.15 * spec.long_axis
    max_offcenter = safe_radius - extent
    if max_offcenter < 0:
        raise ValueError("objects do not fit the grid; shrink geometry or grow grid")
    n_pairs = int(rng.integers(spec.pairs[0], spec.pairs[1] + 1))
    if n_pairs == 1:
        pair_classes = [int(rng.integers(1, N_CLASSES))]
    else:
        pair_classes = [1 + (i % 2) for i in range(n_pairs)]  # both classes first
        rng.shuffle(pair_classes)
    labels = np.zeros((grid, grid, grid), dtype=np.int32)
    occupied = np.zeros((grid, grid, grid), dtype=bool)
    for cls in pair_classes:
        placed = False
        for _ in range(spec.retry_budget):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            radius = rng.uniform(0.0, max_offcenter)
            pair_center = center + radius * direction
            tilt = _random_tilt(rng, spec.tilt_max_deg)
            # ellipsoids sit side by side across sep_dir; class 1 has both
            # long axes parallel, class 2 mutually orthogonal
            sep_dir = tilt @ np.array([1.0, 0.0, 0.0])
            axis1 = tilt @ np.array([0.0, 1.0, 0.0])
            if cls == 1:
                axis2 = axis1
            else:
                phi = rng.uniform(0.0, 2 * np.pi)
                axis2 = np.cos(phi) * (tilt @ np.array([0.0, 0.0, 1.0])) + np.sin(
                    phi
                ) * sep_dir
            masks = []
            for sign, axis in ((-1.0, axis1), (+1.0, axis2)):
                c = pair_center + sign * (spec.separation / 2.0) * sep_dir
                semi = (
                    spec.long_axis * rng.uniform(0.9, 1.1),
                    spec.short_axis * rng.uniform(0.9, 1.1),
                    spec.short_axis * rng.uniform(0.9, 1.1),
                )
                frame = _frame_from_axis(axis, rng)
                masks.append(_ellipsoid_mask(grid, c, frame, semi))
            union = masks[0] | masks[1]
            if masks[0].sum() == 0 or masks[1].sum() == 0:
                continue
            if (masks[0] & masks[1]).any() or (union & occupied).any():
                continue
            occupied |= union
            labels[union] = cls
            placed = True
            break
        if not placed:
            raise RuntimeError(
                f"could not place a class-{cls} pair within {spec.retry_budget} tries"
            )
    vol = np.zeros((1, grid, grid, grid), dtype=np.float32)
    vol[0][occupied] = spec.intensity
    vol[0] += rng.normal(0.0, spec.noise_sigma, size=(grid, grid, grid)).astype(
        np.float32
    )
    return VoxelField(scalar_layout(1), vol), LabelVolume(labels, N_CLASSES)


def make_dataset(n_cases: int, base_seed: int, spec: SyntheticSpec | None = None):
    return [generate_synthetic_case(base_seed + i, spec) for i in range(n_cases)]


def zscore(volume: VoxelField, eps: float = 1e-8) -> VoxelField:
    """Per-channel zero-mean unit-std normalization of a whole volume."""
    data = volume.data.astype(np.float32)
    mu = data.mean(axis=(1, 2, 3), keepdims=True)
    sd = data.std(axis=(1, 2, 3), keepdims=True)
    return VoxelField(volume.layout, (data - mu) / (sd + eps))


# ---------------------------------------------------------------------------
# volume files


_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def write_volume(path, volume):
    if isinstance(volume, LabelVolume):
        arr = volume.data[None]
        header = {"dims": list(volume.dims), "channels": 1, "dtype": "i32"}
    elif isinstance(volume, VoxelField):
        arr = volume.data
        header = {
            "dims": list(volume.dims),
            "channels": arr.shape[0],
            "dtype": "f32",
            "layout": str(volume.layout),
        }
    else:
        raise TypeError(f"cannot write {type(volume).__name__}")
    payload = np.ascontiguousarray(
        arr.transpose(0, 3, 2, 1).astype(_DTYPES[header["dtype"]])
    ).tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def _read_header_and_payload(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: malformed header: {e}") from e
    return header, payload


def read_volume(path, n_classes: int | None = None):
    """Inverse of write_volume; i32 payloads come back as LabelVolume."""
    header, payload = _read_header_and_payload(path)
    for key in ("dims", "channels", "dtype"):
        if key not in header:
            raise ValueError(f"{path}: header missing {key!r}")
    dims = tuple(int(d) for d in header["dims"])
    channels = int(header["channels"])
    if channels < 1:
        raise ValueError(f"{path}: channel count must be positive, got {channels}")
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"{path}: bad dims {dims}")
    dtype = _DTYPES.get(header["dtype"])
    if dtype is None:
        raise ValueError(f"{path}: unknown dtype {header['dtype']!r}")
    expected = channels * dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload length mismatch: expected {expected} bytes, "
            f"got {len(payload)}"
        )
    x, y, z = dims
    arr = np.frombuffer(payload, dtype=dtype).reshape(channels, z, y, x)
    arr = np.ascontiguousarray(arr.transpose(0, 3, 2, 1))
    if header["dtype"] == "i32":
        data = arr[0]
        return LabelVolume(data, n_classes if n_classes else int(data.max()) + 1)
    layout = (
        RepLayout.parse(header["layout"])
        if "layout" in header
        else scalar_layout(channels)
    )
    if layout.dim != channels:
        raise ValueError(
            f"{path}: layout {header['layout']!r} has dim {layout.dim}, "
            f"header says {channels} channels"
        )
    return VoxelField(layout, arr)


def case_paths(directory, index: int) -> tuple[str, str]:
    stem = os.path.join(directory, f"case_{index:03d}")
    return stem + "_image.vol", stem + "_labels.vol"


def save_dataset(directory, dataset):
    os.makedirs(directory, exist_ok=True)
    for i, (vol, lab) in enumerate(dataset):
        img_path, lab_path = case_paths(directory, i)
        write_volume(img_path, vol)
        write_volume(lab_path, lab)


def load_dataset(directory, n_classes: int = N_CLASSES):
    """All (volume, labels) pairs in a directory, sorted by case index."""
    images = sorted(
        f for f in os.listdir(directory) if f.endswith("_image.vol")
    )
    if not images:
        raise FileNotFoundError(f"no *_image.vol files in {directory}")
    out = []
    for img in images:
        lab = img.replace("_image.vol", "_labels.vol")
        lab_path = os.path.join(directory, lab)
        if not os.path.exists(lab_path):
            raise FileNotFoundError(f"missing labels file {lab_path}")
        out.append(
            (
                read_volume(os.path.join(directory, img)),
                read_volume(lab_path, n_classes=n_classes),
            )
        )
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParameterStore, config: UnetConfig):
    entries = []
    chunks = []
    offset = 0
    for name, arr in params.arrays.items():
        raw = np.ascontiguousarray(arr.astype("<f4")).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "config": config.to_dict(),
        "params": entries,
        "payload_bytes": offset,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8"))
        fh.write(b"\n")
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path, expect_config: UnetConfig | None = None):
    """Read (params, config); verifies the payload against the config's
    parameter table and optionally against an expected config."""
    manifest, payload = _read_header_and_payload(path)
    for key in ("config", "params", "payload_bytes"):
        if key not in manifest:
            raise ValueError(f"{path}: manifest missing {key!r}")
    config = UnetConfig.from_dict(manifest["config"])
    if expect_config is not None and config != expect_config:
        diffs = [
            f"{k}: checkpoint={v} expected={ev}"
            for (k, v), (_, ev) in zip(
                sorted(config.to_dict().items()), sorted(expect_config.to_dict().items())
            )
            if v != ev
        ]
        raise ValueError(f"{path}: config mismatch: " + "; ".join(diffs))
    if len(payload) != manifest["payload_bytes"]:
        raise ValueError(
            f"{path}: payload length mismatch: manifest says "
            f"{manifest['payload_bytes']} bytes, file has {len(payload)}"
        )
    expected_shapes = build_network(config).param_shapes
    arrays = {}
    offset_check = 0
    for entry in manifest["params"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if offset != offset_check:
            raise ValueError(f"{path}: parameter offsets not contiguous at {name!r}")
        if name not in expected_shapes:
            raise ValueError(f"{path}: unexpected parameter {name!r} for this config")
        if shape != expected_shapes[name]:
            raise ValueError(
                f"{path}: {name!r} has shape {shape}, config implies "
                f"{expected_shapes[name]}"
            )
        nbytes = int(np.prod(shape)) * 4
        arrays[name] = (
            np.frombuffer(payload[offset : offset + nbytes], dtype="<f4")
            .reshape(shape)
            .copy()
        )
        offset_check = offset + nbytes
    if offset_check != len(payload):
        raise ValueError(f"{path}: payload has {len(payload) - offset_check} stray bytes")
    missing = set(expected_shapes) - set(arrays)
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)}")
    return ParameterStore(arrays), config
