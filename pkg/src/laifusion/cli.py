"""Command-line entry point: ``laifusion <command> ...``.

Exit codes: 0 success, 1 numerical/assertion failure, 2 usage error,
3 missing file, 4 config parse error, 5 checkpoint or pack format mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import train as T
from .dataio import SPLITS, load_tilepack, save_tilepack
from .errors import (
    CheckpointMismatch,
    DegenerateDataset,
    DegenerateFeatures,
    NumericalError,
    TilePackError,
    TrainingDivergence,
)
from .gradcheck import TOLERANCE, run_gradcheck
from .lossmetrics import MetricsReport, evaluate_split
from .model import InputFlags
from .synthgen import generate_packs

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5
RUN_MANIFEST = "run_manifest.json"

log = logging.getLogger("laifusion")


class ConfigError(Exception):
    pass


class UsageError(Exception):
    pass


def _tool_version() -> str:
    from . import __version__

    return __version__


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside [0, 1]")
    return v


def _non_negative(text: str) -> float:
    v = float(text)
    if not v >= 0.0:
        raise argparse.ArgumentTypeError(f"{text} must be >= 0")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return v


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(path)
    return p


def load_config(path: Optional[str], args: argparse.Namespace) -> T.TrainConfig:
    """TrainConfig from the preset, then the JSON config file, then flags."""
    base = T.DESK_CONFIG if getattr(args, "preset", "paper") == "desk" else T.TrainConfig()
    fields = base.to_dict()
    if path is not None:
        try:
            user = json.loads(_existing(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        if "model" in user:
            fields["model"] = {**fields["model"], **user.pop("model")}
        fields.update(user)
    for flag in ("epochs", "batch_size", "lr0", "seed", "max_steps"):
        value = getattr(args, flag, None)
        if value is not None:
            fields[flag] = value
    try:
        return T.TrainConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def write_run_manifest(dest: Path, command: str, argv: Sequence[str], config: dict, artifacts: dict) -> Path:
    dest.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "tool": "laifusion",
        "version": _tool_version(),
        "command": command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "seed": config.get("seed"),
        "config": config,
        "artifacts": artifacts,
    }
    dest.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return dest


def _manifest_path(out: Path) -> Path:
    return out / RUN_MANIFEST if out.is_dir() else out.with_name(out.name + ".run.json")


def _load_pack(data: str, split: str):
    path = Path(data) / split
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(str(path / "manifest.json"))
    return load_tilepack(path)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args, argv) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"{out} is not writable")
    packs = generate_packs(args.seed, args.tile_size, args.n_train, args.n_eval, args.cloud_fraction,
                           args.s1_noise, args.drift, args.s1_offset)
    for split, samples in packs.items():
        save_tilepack(samples, out / split, split=split, tile_size=args.tile_size)
        print(f"{split}: {len(samples)} samples -> {out / split}")
    cfg = {k: getattr(args, k) for k in ("seed", "tile_size", "n_train", "n_eval", "cloud_fraction", "s1_noise", "drift",
                                    "s1_offset")}
    write_run_manifest(out / RUN_MANIFEST, "gen-data", argv, cfg, {s: str(out / s) for s in packs})
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    results = run_gradcheck(seeds=args.seeds)
    failed = [name for name, err in results.items() if not err < TOLERANCE]
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:<24} max_rel_err={err:.3e} {status}")
    if failed:
        print("gradcheck failed: " + ", ".join(failed))
        return EXIT_FAILURE
    return EXIT_OK


def _logfile(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    return open(out / "train_log.jsonl", "w")


def cmd_pretrain(args, argv) -> int:
    cfg = load_config(args.config, args)
    which = f"enc{args.encoder}"
    train = _load_pack(args.data, "train")
    val = _load_pack(args.data, "non_cloudy") if (Path(args.data) / "non_cloudy").exists() else None
    flags = InputFlags(masks=not args.no_masks, season=not args.no_season)
    out = Path(args.out)
    with _logfile(out) as fh:
        ckpt, result = T.pretrain_encoder(which, train, cfg, flags, val, fh)
    T.save_checkpoint(ckpt, out)
    write_run_manifest(out / RUN_MANIFEST, "pretrain", argv, cfg.to_dict(), {"checkpoint": str(out)})
    print(f"{which}: {result.steps} steps, checkpoint -> {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    cfg = load_config(args.config, args)
    enc1 = T.load_checkpoint(_existing(args.enc1))
    enc2 = T.load_checkpoint(_existing(args.enc2))
    train = _load_pack(args.data, "train")
    val = _load_pack(args.data, "non_cloudy") if (Path(args.data) / "non_cloudy").exists() else None
    out = Path(args.out)
    with _logfile(out) as fh:
        ckpt, result = T.finetune_full(enc1, enc2, train, cfg, val, fh)
    T.save_checkpoint(ckpt, out)
    write_run_manifest(out / RUN_MANIFEST, "train", argv, cfg.to_dict(), {"checkpoint": str(out)})
    print(f"full model: {result.steps} steps, checkpoint -> {out}")
    return EXIT_OK


def _fmt(v: float) -> str:
    return f"{round(v, 6):g}"


def cmd_eval(args, argv) -> int:
    ckpt = T.load_checkpoint(_existing(args.ckpt))
    samples = _load_pack(args.data, args.split)
    row = evaluate_split(T.predictor(ckpt), samples, args.split, variant=ckpt.kind)
    print(f"n_valid_pixels={row.n_valid_pixels}")
    print(f"rmse={_fmt(row.rmse)} r2={_fmt(row.r2)}")
    return EXIT_OK


def _write_report(report: MetricsReport, out: Path) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())


def cmd_ablate(args, argv) -> int:
    cfg = load_config(args.config, args)
    packs = {s: _load_pack(args.data, s) for s in SPLITS}
    out = Path(args.out)
    report, ckpts = T.run_ablations(packs["train"], packs, cfg, val=packs["non_cloudy"],
                                    log_dir=out.with_name(out.name + ".logs"))
    _write_report(report, out)
    print(report.table())
    write_run_manifest(_manifest_path(out), "ablate", argv, cfg.to_dict(), {"report": str(out)})
    return EXIT_OK


def cmd_baseline(args, argv) -> int:
    packs = {s: _load_pack(args.data, s) for s in SPLITS}
    report, _ = T.mlr_baseline(packs["train"], packs)
    out = Path(args.out)
    _write_report(report, out)
    print(report.table())
    write_run_manifest(_manifest_path(out), "baseline", argv, {}, {"report": str(out)})
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    manifest = json.loads(_existing(args.manifest).read_text())
    os.chdir(manifest.get("cwd", "."))
    return main(manifest["argv"])


# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields (optional 'model' section)")
    p.add_argument("--preset", choices=("paper", "desk"), default="paper",
                   help="base recipe before the config file is applied (default: paper)")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=_positive_int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laifusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/eval TilePacks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile-size", dest="tile_size", type=_positive_int, default=32)
    p.add_argument("--n-train", dest="n_train", type=_positive_int, default=200)
    p.add_argument("--n-eval", dest="n_eval", type=_positive_int, default=32)
    p.add_argument("--cloud-fraction", dest="cloud_fraction", type=_fraction, default=0.2)
    p.add_argument("--s1-noise", dest="s1_noise", type=_non_negative, default=0.1)
    p.add_argument("--drift", type=_non_negative, default=0.1)
    p.add_argument("--s1-offset", dest="s1_offset", type=_non_negative, default=0.0,
                   help="std of the per-scene additive radar bias")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every op")
    p.add_argument("--seeds", type=_positive_int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pretrain", help="train one encoder with its pixel-wise head")
    p.add_argument("--encoder", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-masks", action="store_true")
    p.add_argument("--no-season", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune the full model from two encoder checkpoints")
    p.add_argument("--enc1", required=True)
    p.add_argument("--enc2", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE and R² of a checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="non_cloudy")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the six ablation variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baseline", help="per-pixel multi-linear regression baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("replay", help="re-run a command from its run manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointMismatch, TilePackError) as exc:
        print(f"format mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (TrainingDivergence, NumericalError, DegenerateDataset, DegenerateFeatures) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
