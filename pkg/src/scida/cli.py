"""Command line entry point: ``scida <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure (including
divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import MODES as RUN_MODES
from .config import RunConfig
from .datasets import EVAL_ANNOTATIONS_FILE, TARGET, generate_synthetic_pair, load_mai, write_dataset
from .errors import ConfigError, LoadError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("scida")


def _deltas(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --deltas {text!r}: {exc}") from exc
    if not values:
        raise ConfigError("--deltas is empty")
    return values


def cmd_gen_synth(args) -> int:
    cfg = RunConfig.load(args.config)
    if cfg.synthetic is None:
        raise ConfigError("gen-synth needs a config with a 'synthetic' block")
    source, target = generate_synthetic_pair(cfg.synthetic, cfg.seed)
    out = Path(args.out)
    write_dataset(source, out / "source")
    write_dataset(target, out / "target", eval_labels=True)
    print(json.dumps({"source": str(out / "source"), "target": str(out / "target"),
                      "num_source": len(source), "num_target": len(target)}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .report import emit_report
    from .trainer import train

    cfg = RunConfig.load(args.config)
    if args.mode:
        cfg = cfg.with_(mode=args.mode)
    _, train_log = train(cfg, out_dir=args.out, resume=args.resume)
    emit_report(train_log, args.out, cfg.to_dict())
    final = train_log.final.get("metrics") if len(train_log) else None
    print(json.dumps({"epochs": len(train_log), "stop_reason": train_log.stop_reason, "metrics": final}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .state import load_checkpoint
    from .trainer import evaluate_run

    state = load_checkpoint(args.ckpt)
    root = Path(args.data)
    split = "eval" if (root / EVAL_ANNOTATIONS_FILE).exists() else "train"
    data = load_mai(root, split, state.config.image_side, domain=TARGET)
    if list(data.categories) != list(state.categories):
        raise ConfigError("evaluation categories differ from the checkpoint's")
    if data.labels is None:
        raise ConfigError(f"{root} carries no labels to evaluate against")
    reports = evaluate_run(state, data)
    print(json.dumps([r.to_json() for r in reports]))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import ablate_delta, table_digest

    cfg = RunConfig.load(args.config)
    rows = ablate_delta(cfg, _deltas(args.deltas), out_dir=args.out)
    print(json.dumps({"rows": len(rows), "digest": table_digest(rows),
                      "failed": [r["delta"] for r in rows if "error" in r]}))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import emit_report
    from .trainer import TrainLog

    run = Path(args.run)
    path = run / "trainlog.json"
    if not path.exists():
        raise ConfigError(f"no trainlog.json in {run}")
    written = emit_report(TrainLog.load(path), run)
    print(json.dumps([str(p) for p in written]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scida", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write the synthetic source/target pair in MAI layout")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train one run and write its report")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=RUN_MODES)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled MAI-layout directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-delta", help="sweep delta and tabulate the results")
    p.add_argument("--config", required=True)
    p.add_argument("--deltas", default="0.10,0.15,0.20,0.25")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="re-render tables and figures from a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the config-error code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LoadError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
