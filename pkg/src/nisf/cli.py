"""Command-line interface.

Subcommands: gen-data, train-prior, infer, eval, sample-plane, gradcheck.

Exit codes: 0 on success, 1 for contract or configuration errors, 2 for
numerical failures (non-finite values, gradient-check failures).

Every command that produces an output directory writes a
``run_manifest.json`` there before doing any real work, recording the
command line, the resolved configuration, and a timestamp.

Options can come from a JSON config file (``--config``); explicit flags
win over config-file values. The ``NISF_THREADS`` environment variable
supplies the default for ``--threads``.

Heavy imports happen inside the command handlers so that thread limits
can be applied to the BLAS before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; remap to 1 (config error)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _apply_thread_limit(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get("NISF_THREADS", "").strip()
        if not env:
            return
        try:
            threads = int(env)
        except ValueError:
            raise SystemExit(_fail(f"NISF_THREADS must be an integer, got {env!r}"))
    if threads < 1:
        raise SystemExit(_fail("--threads must be >= 1"))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)


def _fail(message: str, code: int = 1) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _parse_ints(text: str, n: int, what: str) -> tuple[int, ...]:
    parts = text.split(",")
    if len(parts) != n:
        raise SystemExit(_fail(f"{what} needs {n} comma-separated values, got {text!r}"))
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise SystemExit(_fail(f"{what} must be integers, got {text!r}"))


def _parse_floats(text: str, n: int, what: str) -> tuple[float, ...]:
    parts = text.split(",")
    if len(parts) != n:
        raise SystemExit(_fail(f"{what} needs {n} comma-separated values, got {text!r}"))
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise SystemExit(_fail(f"{what} must be numbers, got {text!r}"))


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise SystemExit(_fail(f"config file not found: {path}"))
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise SystemExit(_fail(f"config file is not valid JSON: {exc}"))
    if not isinstance(data, dict):
        raise SystemExit(_fail("config file must hold a JSON object"))
    return data


def _resolve(args: argparse.Namespace, config: dict, key: str, default):
    """Flag beats config file beats default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _write_manifest(out_dir: str, command: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"command": command,
                "argv": sys.argv[1:],
                "resolved_config": resolved,
                "created_unix": time.time(),
                "created": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args: argparse.Namespace) -> int:
    from .phantom import GENERATOR_VERSION, generate_subject, subject_seeds
    from .volume import save_volume, write_dataset_manifest

    config = _load_config_file(args.config)
    seed = int(_resolve(args, config, "seed", 0))
    subjects = int(_resolve(args, config, "subjects", 90))
    split = _resolve(args, config, "split", None)
    if isinstance(split, str):
        split = _parse_ints(split, 3, "--split")
    if split is None:
        split = (60, 10, 20)
    split = tuple(int(s) for s in split)
    if sum(split) != subjects:
        return _fail(f"split {split} does not sum to {subjects} subjects")
    grid = _resolve(args, config, "grid", None)
    grid = _parse_ints(grid, 4, "--grid") if isinstance(grid, str) else \
        tuple(grid) if grid else (32, 32, 8, 10)
    spacing = _resolve(args, config, "spacing", None)
    spacing = _parse_floats(spacing, 3, "--spacing") if isinstance(spacing, str) else \
        tuple(spacing) if spacing else (2.0, 2.0, 10.0)

    out_dir = args.out
    if os.path.exists(out_dir) and os.listdir(out_dir) and not args.force:
        return _fail(f"output directory {out_dir} is not empty (use --force)")
    resolved = {"seed": seed, "subjects": subjects, "split": list(split),
                "grid": list(grid), "spacing": list(spacing)}
    _write_manifest(out_dir, "gen-data", resolved)

    seeds = subject_seeds(seed, subjects)
    entries = []
    for i in range(subjects):
        if i < split[0]:
            part = "train"
        elif i < split[0] + split[1]:
            part = "val"
        else:
            part = "test"
        subject_id = f"s{i:04d}"
        _, vol = generate_subject(int(seeds[i]), grid_shape=grid, spacing=spacing,
                                  subject_id=subject_id)
        filename = f"{subject_id}.nvol"
        save_volume(vol, os.path.join(out_dir, filename))
        entries.append({"id": subject_id, "path": filename, "split": part,
                        "seed": int(seeds[i])})
        if not args.quiet:
            print(f"wrote {filename} ({part})")
    write_dataset_manifest(out_dir, entries, seed=seed,
                           generator_version=GENERATOR_VERSION)
    if not args.quiet:
        print(f"dataset of {subjects} subjects written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train-prior


def cmd_train_prior(args: argparse.Namespace) -> int:
    from .losses import LossWeights
    from .model import ModelConfig
    from .training import (TrainConfig, LogRow, latest_checkpoint, train_prior)
    from .volume import load_dataset_manifest, load_volume, manifest_subjects

    config = _load_config_file(args.config)
    epochs = int(_resolve(args, config, "epochs", 200))
    lr = float(_resolve(args, config, "lr", 1e-4))
    seed = int(_resolve(args, config, "seed", 0))
    alpha = float(_resolve(args, config, "alpha", 10.0))
    lambda_theta_phi = float(_resolve(args, config, "lambda_theta_phi", 1e-6))
    lambda_h = float(_resolve(args, config, "lambda_h", 1e-4))
    checkpoint_every = int(_resolve(args, config, "checkpoint_every", 0))
    log_every = int(_resolve(args, config, "log_every", 1))
    model_cfg = ModelConfig.from_dict(config["model"]) if "model" in config \
        else ModelConfig()

    manifest = load_dataset_manifest(args.dataset)
    pairs = manifest_subjects(manifest, args.dataset, "train")
    if not pairs:
        return _fail(f"dataset {args.dataset} has no training subjects")
    subjects = [load_volume(path) for _, path in pairs]

    tcfg = TrainConfig(model=model_cfg, epochs=epochs, lr_prior=lr,
                       weights=LossWeights(alpha=alpha,
                                           lambda_theta_phi=lambda_theta_phi,
                                           lambda_h=lambda_h),
                       seed=seed, checkpoint_every=checkpoint_every,
                       log_every=log_every)
    resolved = tcfg.to_dict()
    resolved["dataset"] = os.path.abspath(args.dataset)
    _write_manifest(args.out, "train-prior", resolved)

    resume_from = None
    if args.resume:
        resume_from = latest_checkpoint(args.out) if args.resume == "auto" else args.resume
        if resume_from is None:
            print("no checkpoint found, starting fresh", file=sys.stderr)

    log_path = os.path.join(args.out, "train_log.csv")
    fresh_log = not (resume_from and os.path.exists(log_path))
    with open(log_path, "w" if fresh_log else "a", encoding="utf-8") as lf:
        if fresh_log:
            lf.write(LogRow.csv_header() + "\n")
        result = train_prior(subjects, tcfg, out_dir=args.out,
                             resume_from=resume_from, log_file=lf)
    if not args.quiet and result.log:
        last = result.log[-1]
        print(f"trained {epochs} epochs, final loss {last.report.total:.6f}")
    print(f"checkpoint: {latest_checkpoint(args.out)}")
    return 0


# ---------------------------------------------------------------------------
# infer


def cmd_infer(args: argparse.Namespace) -> int:
    import numpy as np

    from .inference import InferConfig, full_observations, infer_latent, sample_volume
    from .serial import write_blob
    from .training import load_checkpoint
    from .volume import load_volume, save_volume

    config = _load_config_file(args.config)
    max_steps = int(_resolve(args, config, "max_steps", 1000))
    steps = _resolve(args, config, "steps", None)
    steps = int(steps) if steps is not None else None
    lr = float(_resolve(args, config, "lr", 1e-4))
    seed = int(_resolve(args, config, "seed", 0))
    cadence = int(_resolve(args, config, "cadence", 50))
    points = _resolve(args, config, "points_per_step", None)
    points = int(points) if points is not None else None
    lambda_h = float(_resolve(args, config, "lambda_h", 1e-4))

    model, _, _, _, _ = load_checkpoint(args.checkpoint)
    model.set_trainable(False)
    volume = load_volume(args.volume)
    icfg = InferConfig(max_steps=max_steps, selected_steps=steps, lr_infer=lr,
                       lambda_h=lambda_h, seed=seed, record_cadence=cadence,
                       points_per_step=points)
    resolved = {"checkpoint": os.path.abspath(args.checkpoint),
                "volume": os.path.abspath(args.volume),
                "max_steps": max_steps, "steps": steps, "lr": lr, "seed": seed,
                "cadence": cadence, "points_per_step": points, "lambda_h": lambda_h}
    _write_manifest(args.out, "infer", resolved)

    coords, intensities = full_observations(volume)
    h, trace = infer_latent(model, coords, intensities, icfg)

    with open(os.path.join(args.out, "latent.nlat"), "wb") as f:
        write_blob(f, "NISF-LATENT", 1,
                   {"subject_id": volume.subject_id,
                    "steps_run": icfg.steps_to_run,
                    "model_checksum": model.checksum(),
                    "seed": seed},
                   {"h": h.values.reshape(-1).astype(np.float64)})
    with open(os.path.join(args.out, "trace.csv"), "w", encoding="utf-8") as f:
        f.write(trace.csv_header() + "\n")
        for row in trace.csv_rows():
            f.write(row + "\n")
    pred = sample_volume(model, h, volume)
    save_volume(pred, os.path.join(args.out, "prediction.nvol"))
    if not args.quiet:
        print(f"fitted latent for {volume.subject_id} in {icfg.steps_to_run} steps, "
              f"final reconstruction loss {trace.recon_loss[-1]:.6f}")
        print(f"outputs in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args: argparse.Namespace) -> int:
    from .metrics import aggregate, dice_report
    from .volume import load_volume

    pairs: list[tuple[str, str]] = []
    if args.pred and args.true:
        pairs.append((args.pred, args.true))
    elif args.pred_dir and args.true_dir:
        names = sorted(n for n in os.listdir(args.pred_dir) if n.endswith(".nvol"))
        if not names:
            return _fail(f"no .nvol files in {args.pred_dir}")
        for name in names:
            true_path = os.path.join(args.true_dir, name)
            if not os.path.exists(true_path):
                return _fail(f"ground truth missing for {name}: {true_path}")
            pairs.append((os.path.join(args.pred_dir, name), true_path))
    else:
        return _fail("eval needs --pred and --true, or --pred-dir and --true-dir")

    reports = []
    for pred_path, true_path in pairs:
        if not os.path.exists(true_path):
            return _fail(f"ground truth missing: {true_path}")
        pred = load_volume(pred_path)
        true = load_volume(true_path)
        reports.append(dice_report(pred.labels, true.labels))
    combined = reports[0] if len(reports) == 1 else aggregate(reports)
    print(combined.table())
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(combined.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")
        print(f"report written to {args.report}")
    return 0


# ---------------------------------------------------------------------------
# sample-plane


def cmd_sample_plane(args: argparse.Namespace) -> int:
    import numpy as np

    from .autodiff import Tensor
    from .images import write_label_pgm, write_pgm8, write_pgm16, write_raw_f64
    from .metrics import dice_report
    from .phantom import PhantomSpec
    from .sampling import PlaneSpec, nearest_neighbor_resample, sample_plane
    from .serial import read_blob
    from .training import load_checkpoint
    from .volume import load_volume

    volume = load_volume(args.volume)
    model, _, _, _, _ = load_checkpoint(args.checkpoint)
    model.set_trainable(False)
    with open(args.latent, "rb") as f:
        _, header, arrays = read_blob(f, "NISF-LATENT", 1)
    if header.get("model_checksum") not in (None, model.checksum()):
        return _fail("latent was fitted against a different model checkpoint")
    h = Tensor(arrays["h"].reshape(-1), requires_grad=False, name="h")

    origin = _parse_floats(args.origin, 3, "--origin")
    dir1 = _parse_floats(args.dir1, 3, "--dir1")
    dir2 = _parse_floats(args.dir2, 3, "--dir2")
    extent = _parse_floats(args.extent, 2, "--extent")
    counts = _parse_ints(args.counts, 2, "--counts")
    span = tuple((volume.shape[a] - 1) * volume.spacing[a] for a in range(3))
    spec = PlaneSpec(origin_norm=origin, dir1_mm=dir1, dir2_mm=dir2,
                     extent_mm=extent, counts=counts, t=args.t, span_mm=span)

    resolved = {"checkpoint": os.path.abspath(args.checkpoint),
                "volume": os.path.abspath(args.volume),
                "latent": os.path.abspath(args.latent),
                "origin": list(origin), "dir1": list(dir1), "dir2": list(dir2),
                "extent": list(extent), "counts": list(counts), "t": args.t}
    _write_manifest(args.out, "sample-plane", resolved)

    sampled = sample_plane(model, h, spec)
    write_pgm8(os.path.join(args.out, "intensity8.pgm"), sampled.intensity)
    write_pgm16(os.path.join(args.out, "intensity16.pgm"), sampled.intensity)
    write_label_pgm(os.path.join(args.out, "labels.pgm"), sampled.labels,
                    model.config.num_classes)
    write_raw_f64(os.path.join(args.out, "intensity.nraw"), "intensity",
                  sampled.intensity, {"kind": "plane_intensity", "t": spec.t})
    write_raw_f64(os.path.join(args.out, "probs.nraw"), "probs",
                  sampled.probs, {"kind": "plane_probs", "t": spec.t})

    lines = [f"plane {counts[0]}x{counts[1]} pixels, "
             f"{int(sampled.out_of_volume.sum())} outside the volume"]
    if args.baseline:
        nn_int, nn_labels, inside = nearest_neighbor_resample(volume, spec)
        write_pgm8(os.path.join(args.out, "baseline_intensity8.pgm"), nn_int)
        write_label_pgm(os.path.join(args.out, "baseline_labels.pgm"), nn_labels,
                        model.config.num_classes)
        keep = inside.reshape(-1)
        if volume.phantom is not None and keep.any():
            oracle = PhantomSpec.from_dict(volume.phantom).label_at(
                spec.pixel_mm(), spec.t)
            model_rep = dice_report(sampled.labels.reshape(-1)[keep],
                                    oracle.reshape(-1)[keep])
            nn_rep = dice_report(nn_labels.reshape(-1)[keep],
                                 oracle.reshape(-1)[keep])
            lines.append(f"dice vs analytic truth: model {model_rep.mean:.4f}, "
                         f"nearest-neighbor {nn_rep.mean:.4f}")
            with open(os.path.join(args.out, "baseline_report.json"), "w",
                      encoding="utf-8") as f:
                json.dump({"model": model_rep.to_dict(), "baseline": nn_rep.to_dict()},
                          f, indent=1, sort_keys=True)
                f.write("\n")
    if not args.quiet:
        for line in lines:
            print(line)
        print(f"outputs in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .gradcheck import run_model_check, run_op_checks

    op_report = run_op_checks(seed=args.seed)
    model_report = run_model_check(seed=args.seed)
    for line in op_report.lines() + model_report.lines():
        print(line)
    if op_report.passed and model_report.passed:
        print("gradcheck: all checks passed")
        return 0
    print("gradcheck: FAILED", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nisf",
                     description="Coordinate-field segmentation engine.")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap (default: NISF_THREADS env var)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic heart dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--subjects", type=int, default=None)
    p.add_argument("--split", default=None, help="train,val,test counts")
    p.add_argument("--grid", default=None, help="X,Y,Z,T voxel counts")
    p.add_argument("--spacing", default=None, help="x,y,z spacing in mm")
    p.add_argument("--force", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-prior", help="train the shared field on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--lambda-theta-phi", type=float, default=None)
    p.add_argument("--lambda-h", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--log-every", type=int, default=None)
    p.add_argument("--resume", nargs="?", const="auto", default=None,
                   help="resume from a checkpoint path, or 'auto' for the latest")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("infer", help="fit a latent for an unseen volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--steps", type=int, default=None,
                   help="run exactly this many steps")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cadence", type=int, default=None)
    p.add_argument("--points-per-step", type=int, default=None)
    p.add_argument("--lambda-h", type=float, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Dice report for predicted label volumes")
    p.add_argument("--pred", default=None)
    p.add_argument("--true", default=None)
    p.add_argument("--pred-dir", default=None)
    p.add_argument("--true-dir", default=None)
    p.add_argument("--report", default=None, help="write the report as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample-plane", help="evaluate the field on an arbitrary plane")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--latent", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--origin", required=True, help="normalized x,y,z of plane center")
    p.add_argument("--dir1", required=True, help="first in-plane direction (mm units)")
    p.add_argument("--dir2", required=True, help="second in-plane direction (mm units)")
    p.add_argument("--extent", required=True, help="plane extent in mm: U,V")
    p.add_argument("--counts", required=True, help="pixel counts: NU,NV")
    p.add_argument("--t", type=float, default=0.0, help="normalized time in [0,1]")
    p.add_argument("--baseline", action="store_true",
                   help="also write the nearest-neighbor baseline and compare")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_sample_plane)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_thread_limit(args.threads)
    from .errors import ContractError, NumericalError, VolumeIOError
    try:
        return args.func(args)
    except (ContractError, VolumeIOError) as exc:
        return _fail(str(exc), 1)
    except NumericalError as exc:
        return _fail(str(exc), 2)
    except FileNotFoundError as exc:
        return _fail(str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
