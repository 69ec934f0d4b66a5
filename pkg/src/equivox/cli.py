"""Command line interface: data generation, training, prediction,
equivariance checking, rotation sweeps, and kernel export.

Exit codes: 0 success, 1 validation failure, 2 usage error.  Every command
is deterministic given its flags and seeds; ``--json`` switches the report
to a machine-readable document with stable field names.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

PLANE_AXES = {"axial": (0.0, 0.0, 1.0), "sagittal": (1.0, 0.0, 0.0), "coronal": (0.0, 1.0, 0.0)}


class UsageError(Exception):
    """Raised for misuse that argparse cannot catch (exit code 2)."""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="emit a JSON report")
    common.add_argument("--threads", type=int, default=None, help="cap worker threads")
    parser = argparse.ArgumentParser(
        prog="equivox",
        description="SE(3)-equivariant voxel segmentation toolkit",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add_parser("gen-data", help="generate synthetic cases")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of cases")
    p.add_argument("--size", type=int, default=32, help="cubic grid size")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.set_defaults(func=cmd_gen_data)

    p = add_parser("train", help="train a network on a data directory")
    p.add_argument("--config", required=True, help="network config JSON")
    p.add_argument("--data", required=True, help="directory of case files")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--val", type=int, default=5, help="cases held out for validation")
    p.add_argument("--history", default=None, help="history CSV path")
    p.set_defaults(func=cmd_train)

    p = add_parser("predict", help="segment a volume with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True, help="input volume file")
    p.add_argument("--out", required=True, help="output label file")
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--stride", type=int, default=None, help="default patch/2")
    p.set_defaults(func=cmd_predict)

    p = add_parser("equivariance-check", help="verify rotation equivariance")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--random", action="store_true", help="use a randomly initialized network")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--size", type=int, default=32, help="test volume size")
    p.add_argument("--seed", type=int, default=0, help="test input seed")
    p.set_defaults(func=cmd_equivariance_check)

    p = add_parser("rotation-sweep", help="Dice vs rotation angle")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="directory of test cases")
    p.add_argument("--angles", required=True, help="comma-separated degrees")
    p.add_argument("--plane", choices=sorted(PLANE_AXES), default="axial")
    p.add_argument("--out", default=None, help="CSV output path (default stdout)")
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=cmd_rotation_sweep)

    p = add_parser("export", help="precompute an ordinary dense CNN")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def cmd_gen_data(args):
    from .data import SyntheticSpec, generate_synthetic_case, save_dataset

    warnings = []
    if args.size % 8:
        warnings.append(
            f"size {args.size} is not divisible by 8; the default 3-level "
            "network will not accept these volumes"
        )
    scale = args.size / 32.0  # defaults are tuned for 32^3
    spec = SyntheticSpec(
        grid=args.size,
        pairs=(2, 2) if args.size >= 24 else (1, 1),
        long_axis=4.6 * scale,
        short_axis=1.9 * scale,
        separation=7.5 * scale,
    )
    dataset = [
        generate_synthetic_case(args.seed + i, spec) for i in range(args.count)
    ]
    save_dataset(args.out, dataset)
    files = sorted(os.listdir(args.out))
    return 0, {
        "command": "gen-data",
        "out": args.out,
        "count": args.count,
        "files": files,
        "warnings": warnings,
    }


def _load_zscored(directory, n_classes):
    from .data import load_dataset, zscore

    return [(zscore(vol), lab) for vol, lab in load_dataset(directory, n_classes)]


def cmd_train(args):
    from .data import save_checkpoint
    from .net import build_unet, load_config
    from .train import TrainConfig, train, write_history_csv

    config = load_config(args.config)
    dataset = _load_zscored(args.data, config.n_classes)
    if args.val < 1 or args.val >= len(dataset):
        raise UsageError(
            f"--val {args.val} must leave at least one training case "
            f"(directory has {len(dataset)})"
        )
    train_set = dataset[: -args.val]
    val_set = dataset[-args.val :]
    network, params = build_unet(config)
    tconf = TrainConfig(
        max_epochs=args.epochs,
        patience=args.patience,
        batch_size=args.batch,
        patch_size=args.patch,
        seed=config.seed,
        checkpoint_path=args.out,
    )
    best, history = train(network, params, train_set, val_set, tconf)
    save_checkpoint(args.out, best, config)
    history_path = args.history or args.out + ".history.csv"
    write_history_csv(history_path, history, config.n_classes)
    best_row = next(row for row in history if row.get("best"))
    return 0, {
        "command": "train",
        "checkpoint": args.out,
        "history": history_path,
        "epochs_run": len(history),
        "best_epoch": best_row["epoch"],
        "best_val_loss": best_row["val_loss"],
        "best_val_dice": list(best_row["val_dice"]),
        "train_cases": len(train_set),
        "val_cases": len(val_set),
    }


def cmd_predict(args):
    from .data import load_checkpoint, read_volume, write_volume, zscore
    from .net import build_network
    from .train import predict_volume

    params, config = load_checkpoint(args.ckpt)
    network = build_network(config)
    volume = read_volume(args.infile)
    if volume.data.shape[0] != config.in_channels:
        raise UsageError(
            f"volume has {volume.data.shape[0]} channels, checkpoint expects "
            f"{config.in_channels}"
        )
    stride = args.stride or max(1, args.patch // 2)
    labels = predict_volume(network, params, zscore(volume), args.patch, stride)
    write_volume(args.out, labels)
    return 0, {
        "command": "predict",
        "out": args.out,
        "dims": list(labels.dims),
        "n_classes": config.n_classes,
    }


def cmd_equivariance_check(args):
    import numpy as np

    from .data import load_checkpoint
    from .field import VoxelField, rotate_field_exact
    from .net import UnetConfig, build_network, build_unet, forward
    from .so3 import cube_rotations, scalar_layout

    if args.random == (args.ckpt is not None):
        raise UsageError("give exactly one of --ckpt or --random")
    if args.random:
        network, params = build_unet(UnetConfig())
    else:
        params, config = load_checkpoint(args.ckpt)
        network = build_network(config)
    cfg = network.config
    rng = np.random.default_rng(args.seed)
    x = VoxelField(
        scalar_layout(cfg.in_channels),
        rng.normal(size=(cfg.in_channels, args.size, args.size, args.size)).astype(
            np.float32
        ),
    )
    base = forward(network, params, x)
    margin = (cfg.kernel_size - 1) // 2
    sl = (slice(None),) + (slice(margin, args.size - margin),) * 3
    scale = float(np.abs(base.data[sl]).max())
    rows = []
    worst = 0.0
    for index, rot in enumerate(cube_rotations()):
        lhs = forward(network, params, rotate_field_exact(x, rot))
        rhs = rotate_field_exact(base, rot)
        dev = float(np.abs(lhs.data[sl] - rhs.data[sl]).max() / scale)
        rows.append({"rotation_index": index, "max_rel_dev": dev})
        worst = max(worst, dev)
    ok = worst <= args.tol
    return (0 if ok else 1), {
        "command": "equivariance-check",
        "mode": cfg.mode,
        "tol": args.tol,
        "max_rel_dev": worst,
        "pass": ok,
        "rotations": rows,
    }


def cmd_rotation_sweep(args):
    import numpy as np

    from .data import load_checkpoint, load_dataset, zscore
    from .field import rotate_volume_interp
    from .net import build_network
    from .so3 import Rotation
    from .train import dice_score, predict_volume

    params, config = load_checkpoint(args.ckpt)
    network = build_network(config)
    dataset = load_dataset(args.data, config.n_classes)
    try:
        angles = [float(a) for a in args.angles.split(",") if a.strip() != ""]
    except ValueError as e:
        raise UsageError(f"bad --angles list {args.angles!r}: {e}") from e
    if not angles:
        raise UsageError("--angles is empty")
    axis = PLANE_AXES[args.plane]
    stride = args.stride or max(1, args.patch // 2)
    rows = []
    for angle in angles:
        rot = Rotation.from_axis_angle(axis, np.deg2rad(angle))
        dice_acc = np.zeros(config.n_classes - 1)
        for vol, lab in dataset:
            rvol = rotate_volume_interp(vol, rot)
            rlab = rotate_volume_interp(lab, rot)
            pred = predict_volume(network, params, zscore(rvol), args.patch, stride)
            for c in range(1, config.n_classes):
                dice_acc[c - 1] += dice_score(pred, rlab, c)
        dice_acc /= len(dataset)
        for c in range(1, config.n_classes):
            rows.append(
                {"angle_deg": angle, "class_id": c, "dice": float(dice_acc[c - 1])}
            )
    csv_text = _sweep_csv(rows)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            fh.write(csv_text)
    return 0, {
        "command": "rotation-sweep",
        "plane": args.plane,
        "rows": rows,
        "out": args.out,
        "_csv": None if args.out else csv_text,
    }


def _sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["angle_deg", "class_id", "dice"])
    for row in rows:
        writer.writerow([row["angle_deg"], row["class_id"], f"{row['dice']:.6f}"])
    return buf.getvalue()


def cmd_export(args):
    from .data import load_checkpoint, save_checkpoint
    from .net import build_network, export_network

    params, config = load_checkpoint(args.ckpt)
    network = build_network(config)
    exported_net, exported_params = export_network(network, params)
    save_checkpoint(args.out, exported_params, exported_net.config)
    return 0, {
        "command": "export",
        "out": args.out,
        "source_mode": config.mode,
        "mode": exported_net.config.mode,
    }


def _print_human(report):
    cmd = report.get("command")
    if cmd == "equivariance-check":
        print(f"{'rotation_index':>14s}  {'max_rel_dev':>12s}")
        for row in report["rotations"]:
            print(f"{row['rotation_index']:>14d}  {row['max_rel_dev']:>12.3e}")
        verdict = "PASS" if report["pass"] else "FAIL"
        print(f"{verdict}: max {report['max_rel_dev']:.3e} vs tol {report['tol']:.1e}")
    elif cmd == "rotation-sweep":
        if report["_csv"] is not None:
            sys.stdout.write(report["_csv"])
        else:
            print(f"wrote {report['out']}")
    elif cmd == "train":
        print(
            f"trained {report['epochs_run']} epochs; best epoch "
            f"{report['best_epoch']} (val loss {report['best_val_loss']:.4f}, "
            f"val dice {report['best_val_dice']}); checkpoint {report['checkpoint']}"
        )
    else:
        for key, value in report.items():
            if key.startswith("_") or key == "command":
                continue
            print(f"{key}: {value}")
    for warning in report.get("warnings", []):
        print(f"warning: {warning}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be positive")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
        try:
            import torch

            torch.set_num_threads(args.threads)
        except ImportError:
            pass
    try:
        code, report = args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        if args.json:
            print(json.dumps({"error": str(e), "exit_code": 2}))
        return 2
    except (ValueError, FileNotFoundError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        if args.json:
            print(json.dumps({"error": str(e), "exit_code": 1}))
        return 1
    if args.json:
        clean = {k: v for k, v in report.items() if not k.startswith("_")}
        print(json.dumps(clean, indent=2))
    else:
        _print_human(report)
    return code


if __name__ == "__main__":
    sys.exit(main())
