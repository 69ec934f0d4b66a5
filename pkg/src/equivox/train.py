"""Training loop, optimizer, loss, Dice metric, and patch-wise prediction."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .field import LabelVolume, VoxelField
from .net import Network, ParameterStore, run_forward

ADAM_LR = 5e-3


@dataclass
class AdamState:
    """Adam moments and hyperparameters (paper protocol: lr 5e-3)."""

    lr: float = ADAM_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = dc_field(default_factory=dict)
    v: dict[str, np.ndarray] = dc_field(default_factory=dict)


def adam_step(
    params: ParameterStore, grads: dict[str, np.ndarray], state: AdamState
) -> tuple[ParameterStore, AdamState]:
    """One Adam update with bias correction; parameters updated in place."""
    state.step += 1
    t = state.step
    for name, p in params.arrays.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p, dtype=np.float64)
            state.m[name] = m
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * np.square(g)
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        p -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return params, state


def softmax_cross_entropy(logits: VoxelField, labels: LabelVolume) -> float:
    """Mean voxelwise cross entropy, max-subtraction stabilized."""
    if any(ir.l != 0 for _, ir in logits.layout.entries):
        raise ValueError("logits must be a scalar-only field")
    if logits.layout.dim != labels.n_classes:
        raise ValueError(
            f"{logits.layout.dim} logit channels for {labels.n_classes} classes"
        )
    return ad.softmax_cross_entropy(None, logits.data, labels.data)


def backward(tape: Tape, loss: Var, param_vars: dict[str, Var]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the recorded loss, keyed by parameter name."""
    by_vid = tape.backward(loss)
    return {
        name: by_vid.get(var.vid, np.zeros_like(var.value))
        for name, var in param_vars.items()
    }


def dice_score(pred: LabelVolume, ref: LabelVolume, c: int) -> float:
    """2|P n R| / (|P| + |R|); defined as 1.0 when both masks are empty."""
    if pred.dims != ref.dims:
        raise ValueError(f"dims differ: {pred.dims} vs {ref.dims}")
    p = pred.data == c
    r = ref.data == c
    denom = int(p.sum()) + int(r.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & r).sum()) / denom


@dataclass
class TrainConfig:
    max_epochs: int = 100
    patience: int = 25
    batch_size: int = 1
    patch_size: int = 32
    seed: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def _fit_patch(vol: VoxelField, lab: LabelVolume, size: int, rng=None):
    """Crop (random corner when rng given, else centered) or zero-pad to size^3."""
    dims = vol.dims
    if dims == (size, size, size):
        return vol, lab
    data = vol.data
    labels = lab.data
    pads = [(0, max(0, size - d)) for d in dims]
    if any(p[1] for p in pads):
        data = np.pad(data, [(0, 0)] + pads)
        labels = np.pad(labels, pads)
        dims = data.shape[1:]
    starts = []
    for d in dims:
        room = d - size
        if room == 0:
            starts.append(0)
        elif rng is None:
            starts.append(room // 2)
        else:
            starts.append(int(rng.integers(0, room + 1)))
    sx, sy, sz = starts
    return (
        VoxelField(vol.layout, data[:, sx : sx + size, sy : sy + size, sz : sz + size]),
        LabelVolume(labels[sx : sx + size, sy : sy + size, sz : sz + size], lab.n_classes),
    )


def _loss_and_grads(network: Network, params: ParameterStore, vol, lab):
    tape = Tape()
    pvars = {name: tape.leaf(a) for name, a in params.arrays.items()}
    logits = run_forward(network, lambda n: pvars[n], vol.data, tape)
    loss = ad.softmax_cross_entropy(tape, logits, lab.data)
    return loss.value, backward(tape, loss, pvars)


def evaluate(network: Network, params: ParameterStore, dataset, patch_size: int):
    """Mean loss and per-class Dice (classes 1..n-1) over a dataset."""
    losses = []
    n_classes = network.config.n_classes
    dice_acc = np.zeros(n_classes - 1)
    for vol, lab in dataset:
        v, l = _fit_patch(vol, lab, patch_size)
        logits = run_forward(network, lambda n: params.arrays[n], v.data)
        losses.append(ad.softmax_cross_entropy(None, logits, l.data))
        pred = LabelVolume(np.argmax(logits, axis=0), n_classes)
        for c in range(1, n_classes):
            dice_acc[c - 1] += dice_score(pred, l, c)
    return float(np.mean(losses)), tuple(dice_acc / len(dataset))


def train(
    network: Network,
    params: ParameterStore,
    train_set,
    val_set,
    config: TrainConfig,
    adam: AdamState | None = None,
) -> tuple[ParameterStore, list[dict]]:
    """Epoch loop with early stopping on validation loss.

    Returns the parameters from the best validation epoch (a copy) and a
    per-epoch history: epoch, train_loss, val_loss, val_dice. Deterministic
    for a given seed and config.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    adam = adam or AdamState()
    rng = np.random.default_rng(config.seed)
    best_loss = None
    best_params = params.copy()
    best_epoch = 0
    stale = 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_losses = []
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0 : b0 + config.batch_size]
            acc = None
            for idx in batch:
                vol, lab = train_set[idx]
                v, l = _fit_patch(vol, lab, config.patch_size, rng)
                loss, grads = _loss_and_grads(network, params, v, l)
                epoch_losses.append(loss)
                if acc is None:
                    acc = grads
                else:
                    for name in acc:
                        acc[name] += grads[name]
            for name in acc:
                acc[name] /= len(batch)
            adam_step(params, acc, adam)
        val_loss, val_dice = evaluate(network, params, val_set, config.patch_size)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_loss": val_loss,
                "val_dice": val_dice,
            }
        )
        if best_loss is None or val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_params = params.copy()
            stale = 0
            if config.checkpoint_path:
                from .data import save_checkpoint

                save_checkpoint(config.checkpoint_path, best_params, network.config)
        else:
            stale += 1
            if stale >= config.patience:
                break
    history[best_epoch - 1]["best"] = True
    return best_params, history


def write_history_csv(path, history, n_classes: int):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "train_loss", "val_loss"]
            + [f"val_dice_{c}" for c in range(1, n_classes)]
        )
        for row in history:
            writer.writerow(
                [row["epoch"], f"{row['train_loss']:.6f}", f"{row['val_loss']:.6f}"]
                + [f"{d:.6f}" for d in row["val_dice"]]
            )


def _gaussian_window(patch: int, dtype) -> np.ndarray:
    """Separable Gaussian patch weight, sigma = patch/8, strictly positive."""
    sigma = patch / 8.0
    ax = np.arange(patch, dtype=np.float64) - (patch - 1) / 2.0
    g1 = np.exp(-0.5 * (ax / sigma) ** 2)
    w = g1[:, None, None] * g1[None, :, None] * g1[None, None, :]
    return np.maximum(w, np.finfo(np.float64).tiny).astype(dtype)


def _patch_starts(full: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, full - patch + 1, stride))
    if starts[-1] + patch < full:
        starts.append(full - patch)
    return starts


def predict_volume(
    network: Network,
    params: ParameterStore,
    volume: VoxelField,
    patch_size: int,
    stride: int,
) -> LabelVolume:
    """Argmax labels from Gaussian-weighted overlapping patch logits."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride > patch_size:
        raise ValueError("stride must not exceed patch_size")
    if patch_size % (2**network.config.levels):
        raise ValueError(
            f"patch_size {patch_size} not divisible by 2^levels"
        )
    dims = volume.dims
    data = volume.data
    pads = [(0, max(0, patch_size - d)) for d in dims]
    if any(p[1] for p in pads):
        data = np.pad(data, [(0, 0)] + pads)
    pdims = data.shape[1:]
    n_classes = network.config.n_classes
    acc = np.zeros((n_classes,) + pdims, dtype=np.float64)
    wacc = np.zeros(pdims, dtype=np.float64)
    window = _gaussian_window(patch_size, np.float64)
    for sx in _patch_starts(pdims[0], patch_size, stride):
        for sy in _patch_starts(pdims[1], patch_size, stride):
            for sz in _patch_starts(pdims[2], patch_size, stride):
                sl = (
                    slice(sx, sx + patch_size),
                    slice(sy, sy + patch_size),
                    slice(sz, sz + patch_size),
                )
                logits = run_forward(
                    network, lambda n: params.arrays[n], data[(slice(None),) + sl]
                )
                acc[(slice(None),) + sl] += logits * window
                wacc[sl] += window
    assert wacc.min() > 0.0
    labels = np.argmax(acc / wacc, axis=0).astype(np.int32)
    crop = tuple(slice(0, d) for d in dims)
    return LabelVolume(labels[crop], n_classes)
