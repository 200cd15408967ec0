"""``mmcdet`` command line: synth, train, eval, corrupt, attack, report.

Exit status is 0 on success, 2 on usage or configuration errors and 1 on
runtime failures.  Every run directory gets a ``manifest.json`` describing
how it was produced, so ``eval`` can be re-run from the directory alone.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import VARIANTS, TrainConfig, apply_override, load_config, parse_config, validate
from .data import CLASS_NAMES, Dataset
from .nn import ConfigError
from .tensor import ContractError, NumericError, ParameterError, ShapeError

log = logging.getLogger("mmcdet")

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__
    return f"v{__version__}"


@dataclass
class RunManifest:
    run_id: str
    variant: str
    config: str
    config_sha256: str
    dataset: str
    dataset_hash: str
    checkpoint: str
    version: str
    started: str = ""
    wall_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, run_dir) -> None:
        Path(run_dir, MANIFEST).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def read(cls, run_dir) -> "RunManifest":
        path = Path(run_dir, MANIFEST)
        if not path.exists():
            raise OSError(f"no {MANIFEST} in {run_dir}; is it a train output directory?")
        return cls(**json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# argument parsing

def _global_flags(p: argparse.ArgumentParser, top: bool) -> None:
    # subparser copies use SUPPRESS so they do not clobber values given before the subcommand
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", default=d(None), help="config file ([train]/[loss]/[model]/[augment] sections)")
    p.add_argument("--seed", type=int, default=d(None), help="seed (dataset, training or corruption)")
    p.add_argument("--out", default=d(None), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False), help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="mmcdet", formatter_class=fmt,
                                description="Multimodal collaborative detection experiments on synthetic data.")
    _global_flags(p, top=True)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        _global_flags(sp, top=False)
        return sp

    sp = add("synth", "generate a paired visual/thermal dataset")
    sp.add_argument("--n-train", type=int, default=2000)
    sp.add_argument("--n-test", type=int, default=400)
    sp.add_argument("--day-fraction", type=float, default=0.6)

    sp = add("train", "train one variant; the run directory gets checkpoint, loss log, config and manifest")
    sp.add_argument("--data", required=True, help="dataset directory from synth")
    sp.add_argument("--variant", choices=VARIANTS, default=None, help="overrides the config file")
    sp.add_argument("--steps", type=int, default=None, help="overrides the config file")
    sp.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="e.g. lr=1e-3 loss.tau=4")

    sp = add("eval", "evaluate a trained run on the test split")
    sp.add_argument("--run", required=True, help="run directory from train")
    sp.add_argument("--data", default=None, help="dataset directory (default: the one in the manifest)")
    sp.add_argument("--split", choices=("all", "day", "night"), action="append",
                    help="repeatable; default all three")
    sp.add_argument("--network", choices=("rgb", "thm"), default=None,
                    help="which MMC network to evaluate (default: visual)")

    sp = add("corrupt", "evaluate a trained run on corrupted visual test images")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--severity", type=int, choices=range(1, 6), default=3)

    sp = add("attack", "targeted PGD that hides one class, swept over epsilon")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--hide", default="person", help="class name or id to hide")
    sp.add_argument("--eps-grid", default="0,1,2,4,8,16", help="comma-separated epsilons in 1/255 units")
    sp.add_argument("--iterations", type=int, default=10)
    sp.add_argument("--limit", type=int, default=None, help="attack only the first N test images")

    sp = add("report", "join eval/corrupt/attack CSVs into a variant x split table and figures")
    sp.add_argument("csvs", nargs="+", help="CSV files written by eval, corrupt or attack")
    sp.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    return p


# ---------------------------------------------------------------------------
# subcommands

def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    from .data import build_dataset

    if args.out is None:
        raise UsageError("synth needs --out <dir>")
    ds = build_dataset(args.out, args.n_train, args.n_test, args.day_fraction, seed=args.seed or 0)
    train = ds.split("train")
    n_day = sum(m.domain == "day" for m in train)
    print(f"wrote {len(ds.samples)} samples to {args.out}: train {len(train)} "
          f"({n_day} day / {len(train) - n_day} night), test {len(ds.split('all'))}")
    print(f"manifest sha256 {ds.manifest_hash()}")
    return 0


def effective_config(args) -> TrainConfig:
    """Defaults, then the config file, then flags and key=value overrides."""
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.variant is not None:
        cfg.variant = args.variant
    if args.steps is not None:
        cfg.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    for ov in args.overrides:
        apply_override(cfg, ov)
    return validate(cfg)


def cmd_train(args) -> int:
    from .config import dump_config
    from .train import train

    cfg = effective_config(args)
    ds = Dataset.load(args.data)
    run_dir = _out_dir(args, f"runs/{cfg.variant}-s{cfg.seed}")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    t0 = time.perf_counter()
    train(cfg, ds, run_dir,
          progress=lambda step, loss: log.info("step %d  loss %.4f", step, loss))
    text = dump_config(cfg)
    RunManifest(run_id=run_dir.resolve().name, variant=cfg.variant, config=text,
                config_sha256=hashlib.sha256(text.encode()).hexdigest(),
                dataset=str(Path(args.data).resolve()), dataset_hash=ds.manifest_hash(),
                checkpoint="checkpoint.mmck", version=version_string(), started=started,
                wall_seconds=round(time.perf_counter() - t0, 3)).write(run_dir)
    print(f"trained {cfg.variant} for {cfg.steps} steps -> {run_dir}")
    return 0


def _load_run(args):
    from .train import load_system

    run_dir = Path(args.run)
    man = RunManifest.read(run_dir)
    cfg = parse_config(man.config)
    ds = Dataset.load(args.data or man.dataset)
    if ds.manifest_hash() != man.dataset_hash:
        log.warning("dataset %s differs from the one this run was trained on", args.data or man.dataset)
    return man, ds, load_system(cfg, run_dir / man.checkpoint)


def cmd_eval(args) -> int:
    from .evaluate import SPLITS, evaluate

    man, ds, system = _load_run(args)
    splits = tuple(dict.fromkeys(args.split)) if args.split else SPLITS
    rep = evaluate(system, ds, splits, args.network)
    out = _out_dir(args, args.run)
    name = "eval.csv" if args.network in (None, "rgb") else f"eval_{args.network}.csv"
    label = man.variant if args.network in (None, "rgb") else f"{man.variant}[{args.network}]"
    rep.write_csv(out / name, man.run_id, label)
    for s in splits:
        print(f"{man.run_id} {s:5s} mAP {rep.mAP(s) * 100:6.2f}  F1 {rep.f1(s) * 100:6.2f}")
    return 0


def cmd_corrupt(args) -> int:
    from .corruptions import corruption_sweep, write_sweep_csv

    man, ds, system = _load_run(args)
    res = corruption_sweep(system, ds, args.severity, seed=args.seed or 0)
    out = _out_dir(args, args.run)
    write_sweep_csv(out / f"corrupt_s{args.severity}.csv", res, man.run_id, args.severity)
    for name, rep in res.items():
        print(f"{name:15s} mAP {rep.mAP('all') * 100:6.2f}")
    return 0


def _class_id(text: str) -> int:
    names = {v: k for k, v in CLASS_NAMES.items()}
    if text in names:
        return names[text]
    if text.isdigit() and int(text) in CLASS_NAMES:
        return int(text)
    raise UsageError(f"--hide must be one of {', '.join(names)} or an id in {sorted(CLASS_NAMES)}")


def cmd_attack(args) -> int:
    from .attack import attack_sweep, write_attack_csv

    hidden = _class_id(args.hide)
    try:
        grid = [float(e) / 255 for e in args.eps_grid.split(",") if e.strip()]
    except ValueError:
        raise UsageError(f"bad --eps-grid {args.eps_grid!r}") from None
    man, ds, system = _load_run(args)
    metas = ds.split("all")[:args.limit]
    res = attack_sweep(system, ds, hidden, grid, args.iterations, metas,
                       progress=lambda r: log.info("eps %.4f done", r.epsilon))
    out = _out_dir(args, args.run)
    write_attack_csv(out / "attack.csv", res, hidden, man.run_id)
    for r in res:
        print(f"eps {r.epsilon * 255:5.1f}/255  mAP {r.mAP * 100:6.2f}  recall({CLASS_NAMES[hidden]}) "
              f"{r.hidden_recall:.3f}")
    return 0


def cmd_report(args) -> int:
    from .report import build_report

    written = build_report(args.csvs, _out_dir(args, "report"), figures=not args.no_figures)
    if "summary" in written:
        sys.stdout.write(Path(written["summary"]).read_text())
    for role, path in written.items():
        log.info("wrote %s: %s", role, path)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "corrupt": cmd_corrupt,
            "attack": cmd_attack, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    if not hasattr(args, "overrides"):
        args.overrides = []
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"mmcdet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ParameterError, ShapeError, ContractError, NumericError) as exc:
        print(f"mmcdet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
