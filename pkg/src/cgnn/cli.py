"""``cgnn`` command line: generate, train, eval, gradcheck, splits, export-dot.

Exit status: 0 success, 1 usage or configuration error, 2 data or contract
error, 3 numeric failure.

Heavy modules are imported inside the command functions so that
``--deterministic`` can pin BLAS to one thread before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

log = logging.getLogger("cgnn")


class UsageError(Exception):
    pass


class DataProblem(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_paths: dict[str, str | None]
    seeds: dict[str, int]
    build: dict[str, str]
    output: str
    resolved: dict = field(default_factory=dict)
    started: str = ""
    finished: str | None = None
    status: str = "running"

    def write(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _build_id() -> dict[str, str]:
    build = {"cgnn": __version__, "python": sys.version.split()[0]}
    try:
        import numpy

        build["numpy"] = numpy.__version__
    except ImportError:  # pragma: no cover
        pass
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0:
            build["git"] = rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return build


def _start_manifest(args, output: Path, manifest_path: Path, resolved: dict, seeds: dict) -> RunManifest:
    paths = {k: getattr(args, k, None) for k in ("spec", "data", "config", "checkpoint", "resume")}
    manifest = RunManifest(
        command=args.command,
        argv=list(args.argv),
        config_paths={k: v for k, v in paths.items() if v is not None},
        seeds=seeds,
        build=_build_id(),
        output=str(output),
        resolved=resolved,
        started=_now(),
    )
    manifest.write(manifest_path)
    return manifest


def _finish_manifest(manifest: RunManifest, path: Path, status: str = "ok"):
    manifest.finished = _now()
    manifest.status = status
    manifest.write(path)


# --------------------------------------------------------------------------
# shared loaders


def _load_spec(ref: str | None):
    from .graph import GraphSpecError, load_graph_spec, preset_cvs, preset_pgs

    if ref is None:
        raise UsageError("--spec is required")
    presets = {"cvs": preset_cvs, "pgs": preset_pgs, "preset:cvs": preset_cvs, "preset:pgs": preset_pgs}
    if ref in presets and not Path(ref).exists():
        return presets[ref]()
    try:
        return load_graph_spec(ref)
    except FileNotFoundError:
        raise UsageError(f"graph spec not found: {ref}") from None
    except GraphSpecError as exc:
        raise UsageError(f"{ref}: {exc}") from None


def _load_data(path: str | None):
    from .worlds import load_dataset

    if path is None:
        raise UsageError("--data is required")
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DataProblem(f"dataset not found: {path}") from None
    except ValueError as exc:
        raise DataProblem(f"{path}: {exc}") from None


def _model_config(spec, precision: str):
    from .model import ModelConfig

    width = spec.nodes[0].state_dim
    return ModelConfig(embed_dim=width, lstm_input_dim=width, encoder_hidden=width, precision=precision)


def _train_config(args):
    from .learning import TrainConfig

    doc = {}
    if args.config:
        try:
            doc = TrainConfig.from_file(args.config).to_dict()
        except FileNotFoundError:
            raise UsageError(f"train config not found: {args.config}") from None
        except (ValueError, TypeError) as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    for key, value in (("epochs", args.epochs), ("learning_rate", args.lr), ("seed", args.seed), ("precision", args.precision)):
        if value is not None:
            doc[key] = value
    if args.deterministic and args.precision is None:
        doc["precision"] = "f64"
    try:
        return TrainConfig.from_dict(doc)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    import yaml

    from .worlds import WorldConfig, generate_world, save_dataset, world_header

    try:
        config = WorldConfig.from_file(args.config) if args.config else WorldConfig()
    except FileNotFoundError:
        raise UsageError(f"world config not found: {args.config}") from None
    except (ValueError, TypeError, yaml.YAMLError) as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    if args.seed is not None:
        config.seed = args.seed
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    manifest_path = out.with_name(out.name + ".manifest.json")
    manifest = _start_manifest(args, out, manifest_path, {"world": asdict(config)}, {"world": config.seed})
    records = generate_world(config)
    save_dataset(out, records, world_header(config))
    _finish_manifest(manifest, manifest_path)
    print(f"wrote {len(records)} {config.kind} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import learning
    from .checkpoint import CheckpointError
    from .graph import serialize_graph_spec
    from .model import init_model

    spec = _load_spec(args.spec)
    config = _train_config(args)
    records, header = _load_data(args.data)
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    try:
        learning.check_labels(spec, records)
    except learning.DataError as exc:
        raise DataProblem(str(exc)) from None

    ckpt = out / "model.cgnn"
    resolved = {"train": config.to_dict(), "spec": serialize_graph_spec(spec), "dataset_header": header}
    manifest = _start_manifest(args, out, out / "manifest.json", resolved, {"train": config.seed})

    if args.resume:
        try:
            model, optimizer, meta = learning.load_checkpoint(args.resume, spec)
        except FileNotFoundError:
            raise DataProblem(f"checkpoint not found: {args.resume}") from None
        except (learning.DataError, CheckpointError) as exc:
            raise DataProblem(f"{args.resume}: {exc}") from None
        start, history = meta["epoch"], meta["history"]
    else:
        model = init_model(spec, _model_config(spec, config.precision), seed=config.seed)
        optimizer, start, history = learning.make_optimizer(config), 0, []

    history_path = out / "history.jsonl"
    history_path.write_text("".join(json.dumps(h) + "\n" for h in history), encoding="utf-8")
    learning.save_checkpoint(ckpt, model, optimizer, config, history, start)
    # one epoch per call so that a checkpoint exists after every epoch; the
    # per-epoch RNG makes this identical to a single multi-epoch call
    for epoch in range(start, config.epochs):
        step = learning.TrainConfig.from_dict({**config.to_dict(), "epochs": epoch + 1})
        result = learning.train(model, records, step, optimizer, start_epoch=epoch, history=history)
        history = result.history
        learning.save_checkpoint(ckpt, model, optimizer, config, history, epoch + 1)
        with history_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(history[-1]) + "\n")
        print(f"epoch {history[-1]['epoch']:>3}  loss {history[-1]['loss']:.6f}", flush=True)
    _finish_manifest(manifest, out / "manifest.json")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import learning
    from .checkpoint import CheckpointError

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    spec = _load_spec(args.spec) if args.spec else None
    try:
        model, _, meta = learning.load_checkpoint(args.checkpoint, spec)
    except FileNotFoundError:
        raise DataProblem(f"checkpoint not found: {args.checkpoint}") from None
    except (learning.DataError, CheckpointError) as exc:
        raise DataProblem(f"{args.checkpoint}: {exc}") from None
    records, _ = _load_data(args.data)
    out = Path(args.out) if args.out else None
    manifest = None
    if out:
        resolved = {"checkpoint_spec_sha256": meta["spec_sha256"], "ordinal_rule": args.ordinal_rule, "sequence_reduction": args.reduction}
        manifest = _start_manifest(args, out, out / "manifest.json", resolved, {})
    try:
        report, rows = learning.evaluate(model, records, ordinal_rule=args.ordinal_rule, sequence_reduction=args.reduction)
    except learning.DataError as exc:
        raise DataProblem(str(exc)) from None
    print(learning.format_report(report), end="")
    if out:
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "predictions.jsonl").write_text(learning.dump_jsonl(rows), encoding="utf-8")
        _finish_manifest(manifest, out / "manifest.json")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck as gc

    spec = _load_spec(args.spec) if args.spec else None
    if args.dim > gc.MAX_DIM or args.frames > gc.MAX_FRAMES:
        raise UsageError(f"gradcheck refuses dim > {gc.MAX_DIM} or frames > {gc.MAX_FRAMES} (got {args.dim}, {args.frames})")
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out) if args.out else None
    manifest = None
    if out:
        resolved = {"dim": args.dim, "frames": args.frames, "epsilon": args.epsilon, "richardson": args.richardson}
        manifest = _start_manifest(args, out, out / "manifest.json", resolved, {"gradcheck": seed})
    report = gc.gradcheck(spec, dim=args.dim, frames=args.frames, seed=seed, epsilon=args.epsilon, richardson=args.richardson)
    print(report.format())
    if out:
        doc = {"groups": report.groups, "worst": report.worst, "passed": report.passed, "seconds": report.elapsed}
        (out / "gradcheck.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        _finish_manifest(manifest, out / "manifest.json", "ok" if report.passed else "failed")
    if not report.passed:
        raise NumericFailure("gradient check failed; worst: " + ", ".join(f"{n} ({e:.2e})" for n, e in report.worst))
    return EXIT_OK


def cmd_splits(args) -> int:
    from .learning import split_dataset

    records, _ = _load_data(args.data)
    if not args.out:
        raise UsageError("--out is required")
    if not 0 < args.ratio < 1 or args.n < 1:
        raise UsageError("--ratio must lie in (0, 1) and --n must be positive")
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    resolved = {"ratio": args.ratio, "n": args.n}
    manifest = _start_manifest(args, out, out / "manifest.json", resolved, {"splits": seed})
    ids = [r.id for r in records]
    for i, (tr, te) in enumerate(split_dataset(len(ids), args.ratio, args.n, seed)):
        (out / f"split{i}.train.txt").write_text("".join(ids[j] + "\n" for j in tr), encoding="utf-8")
        (out / f"split{i}.test.txt").write_text("".join(ids[j] + "\n" for j in te), encoding="utf-8")
    _finish_manifest(manifest, out / "manifest.json")
    print(f"wrote {args.n} splits to {out}")
    return EXIT_OK


def cmd_export_dot(args) -> int:
    from .graph import to_dot

    dot = to_dot(_load_spec(args.spec))
    if args.out:
        Path(args.out).write_text(dot, encoding="utf-8")
    else:
        sys.stdout.write(dot)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "splits": cmd_splits,
    "export-dot": cmd_export_dot,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--spec", help="graph spec file, or 'cvs' / 'pgs' for a preset")
    common.add_argument("--data", help="dataset file (JSON lines)")
    common.add_argument("--config", help="YAML config for the command")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float, help="learning rate")
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS, 64-bit unless --precision says otherwise")
    common.add_argument("--precision", choices=["f32", "f64"])

    parser = _Parser(prog="cgnn", description="Temporal concept hypergraph networks.")
    parser.add_argument("--version", action="version", version=f"cgnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write a synthetic CVS or PGS world")
    train = sub.add_parser("train", parents=[common], help="train a model; writes model.cgnn, history.jsonl")
    train.add_argument("--resume", help="continue from a checkpoint written by train")
    ev = sub.add_parser("eval", parents=[common], help="metrics table and prediction dump")
    ev.add_argument("--checkpoint")
    ev.add_argument("--ordinal-rule", choices=["count", "first_below"], default="count")
    ev.add_argument("--reduction", choices=["final", "majority"], default="final", help="sequence-level reduction")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every parameter group")
    gc.add_argument("--dim", type=int, default=4)
    gc.add_argument("--frames", type=int, default=2)
    gc.add_argument("--epsilon", type=float, default=1e-5)
    gc.add_argument("--richardson", action="store_true", help="extrapolate two step sizes (use with --epsilon 1e-3)")
    sp = sub.add_parser("splits", parents=[common], help="random train/test id lists")
    sp.add_argument("--ratio", type=float, default=0.9)
    sp.add_argument("--n", type=int, default=5)
    sub.add_parser("export-dot", parents=[common], help="Graphviz rendering of a graph spec")
    return parser


def _configure_logging():
    level = os.environ.get("CGNN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    if args.deterministic:
        for var in THREAD_VARS:
            os.environ[var] = "1"
        if "numpy" in sys.modules:
            log.debug("numpy already loaded; thread variables may not take effect")
    _configure_logging()

    from .autodiff import NumericError

    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cgnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataProblem as exc:
        print(f"cgnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NumericError) as exc:
        print(f"cgnn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"cgnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
