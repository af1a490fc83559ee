"""Command-line entry point: ``vqc {train,eval,radiomap,gradcheck,baseline}``.

Exit codes: 0 success, 1 usage or input error (bad config, unreadable
checkpoint), 2 numeric failure (non-finite loss, failed gradient check).
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .checkpoint import CheckpointError, load_state, save_arrays, save_state
from .evaluation import (EvalReport, codebook_free_eval, emit_radio_maps, evaluate_rmse,
                         learned_nonadaptive_baseline, random_sensing_baseline)
from .gradcheck import commitment_sign_error, episode_gradcheck
from .training import NumericalError, train_loop

log = logging.getLogger("vqc")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2
THREADS_ENV = "VQC_THREADS"


class UsageError(Exception):
    pass


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return n


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which is reserved for numeric failure here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vqc", description="VQ-C active sensing: train, evaluate, inspect.")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def runtime(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help=f"episode-sampling worker threads (default ${THREADS_ENV} or 1)")
        sp.add_argument("--deterministic", action="store_true",
                        help="one sampling thread and one BLAS thread, for bit-identical reruns")

    def overrides(sp):
        sp.add_argument("--config", required=True, help="run configuration JSON")
        sp.add_argument("--out", help="output directory (default: config output.out_dir)")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--episodes", type=int, help="override train.episodes_total")
        sp.add_argument("--T", type=int, help="override model.T")
        sp.add_argument("--V", type=int, help="override model.V")

    sp = sub.add_parser("train", help="train a VQ-C model")
    overrides(sp)
    sp.add_argument("--codebook-free", action="store_true", help="bypass quantization")
    runtime(sp)

    sp = sub.add_parser("eval", help="held-out RMSE of one or more checkpoints")
    sp.add_argument("checkpoints", nargs="+")
    sp.add_argument("--config", help="evaluate under this run configuration (shapes must match)")
    sp.add_argument("--n-eval", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--json", help="also write the reports to this file")
    runtime(sp)

    sp = sub.add_parser("radiomap", help="RSS maps of the codewords chosen for one UE")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ue", type=float, nargs="+", required=True, metavar="COORD",
                    help="x y [z]; z defaults to the service-area height")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full episode gradient")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--episodes", type=int, default=2)
    sp.add_argument("--codebook-free", action="store_true")
    sp.add_argument("--self-test", action="store_true",
                    help="also confirm that a flipped commitment gradient is detected")

    sp = sub.add_parser("baseline", help="train and evaluate a comparison scheme")
    sp.add_argument("kind", choices=["random", "fixed", "codebook-free"])
    overrides(sp)
    runtime(sp)
    return p


@contextlib.contextmanager
def _blas_limit(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def _threads(args) -> int:
    if getattr(args, "deterministic", False):
        return 1
    n = args.threads if args.threads is not None else _default_threads()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _load_run(args) -> cfgmod.RunConfig:
    run = cfgmod.load(args.config)
    train_kw, model_kw = {"threads": _threads(args)}, {}
    if args.seed is not None:
        train_kw["seed"] = args.seed
    if args.episodes is not None:
        train_kw["episodes_total"] = args.episodes
    if getattr(args, "codebook_free", False):
        train_kw["codebook_free"] = True
    if args.T is not None:
        model_kw["T"] = args.T
    if args.V is not None:
        model_kw["V"] = args.V
    try:
        run.train = dataclasses.replace(run.train, **train_kw)
        run.model = dataclasses.replace(run.model, **model_kw)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.out:
        run.output = dataclasses.replace(run.output, out_dir=args.out)
    return run


def _write_report(out: Path, report: EvalReport) -> None:
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    for line in report.lines():
        print(line)


def cmd_train(args) -> int:
    run = _load_run(args)
    out = Path(run.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(run, out / "config.json")
    meta = {"run": run.to_dict(), "codebook_free": run.train.codebook_free}

    def on_ckpt(state, step):
        save_state(out / f"checkpoint_step{step}", state, meta)

    state, _ = train_loop(run.train, run.layout, run.model, run.pilot, metrics_path=out / "metrics.jsonl",
                          on_checkpoint=on_ckpt, checkpoint_every=run.output.checkpoint_every)
    save_state(out / "checkpoint", state, meta)
    ev = run.eval
    report = evaluate_rmse(state, run.layout, run.pilot, ev.n_eval, ev.seed, run.train.epsilon,
                           run.train.codebook_free, ev.batch_size, run.train.threads, run.to_dict(),
                           "codebook-free LSTM" if run.train.codebook_free else "VQ-C")
    _write_report(out, report)
    print(f"checkpoint: {out / 'checkpoint'}")
    return EXIT_OK


SHAPE_FIELDS = ("T", "K", "N", "M", "V", "B", "hidden", "dnn_width", "dnn_depth", "pos_head_widths")


def _check_shapes(have, want, path) -> None:
    bad = [f"{f}: checkpoint {getattr(have, f)} vs config {getattr(want, f)}"
           for f in SHAPE_FIELDS if getattr(have, f) != getattr(want, f)]
    if bad:
        raise CheckpointError(f"{path}: shape mismatch ({'; '.join(bad)})")


def cmd_eval(args) -> int:
    threads = _threads(args)
    reports = []
    for path in args.checkpoints:
        state, meta = load_state(path)
        run = cfgmod.load(args.config) if args.config else cfgmod.from_dict(meta["run"])
        _check_shapes(state.model_cfg, run.model, path)
        ev = run.eval
        n_eval = args.n_eval or ev.n_eval
        seed = ev.seed if args.seed is None else args.seed
        kw = dict(epsilon=run.train.epsilon, batch_size=args.batch_size or ev.batch_size, threads=threads,
                  config=meta["run"])
        if meta.get("codebook_free"):
            rep = codebook_free_eval(state, meta, run.layout, run.pilot, n_eval, seed, label=str(path), **kw)
        else:
            rep = evaluate_rmse(state, run.layout, run.pilot, n_eval, seed, label=str(path), **kw)
        reports.append((state.model_cfg.T, rep))
    for _, rep in reports:
        for line in rep.lines():
            print(line)
    if len(reports) > 1:
        print("per-T sweep (final-frame RMSE):")
        for T, rep in sorted(reports, key=lambda r: r[0]):
            print(f"  T={T}: {rep.rmse:.3f} m  ({rep.label})")
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_dict() for _, r in reports], indent=2) + "\n")
    return EXIT_OK


def cmd_radiomap(args) -> int:
    state, meta = load_state(args.checkpoint)
    run = cfgmod.from_dict(meta["run"])
    if len(args.ue) not in (2, 3):
        raise UsageError("--ue takes x y or x y z")
    ue = tuple(args.ue) if len(args.ue) == 3 else (*args.ue, run.layout.service_area.z)
    if not run.layout.service_area.contains(ue):
        log.warning("UE %s lies outside the service area; its cell is clamped to the grid edge", ue)
    maps = emit_radio_maps(state, ue, run.layout, run.pilot, args.out,
                           codebook_free=bool(meta.get("codebook_free")))
    for m in maps:
        print(f"frame {m.frame} ris {m.subset_label}: RSS at UE {m.value_at(ue[0], ue[1]):.3e}, "
              f"grid max {m.rss.max():.3e}")
    print(f"wrote {len(maps)} maps to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rep = episode_gradcheck(seed=args.seed, n_episodes=args.episodes, codebook_free=args.codebook_free)
    for line in rep.lines():
        print(line)
    ok = rep.passed
    if args.self_test:
        with commitment_sign_error():
            mutated = episode_gradcheck(seed=args.seed, n_episodes=args.episodes)
        caught = not mutated.passed
        print(f"self-test (flipped commitment gradient): {'detected' if caught else 'NOT detected'}")
        ok = ok and caught
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_baseline(args) -> int:
    run = _load_run(args)
    out = Path(run.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(run, out / "config.json")
    if args.kind == "codebook-free":
        args.codebook_free = True
        return cmd_train(args)
    fn = random_sensing_baseline if args.kind == "random" else learned_nonadaptive_baseline
    report, state = fn(run, out / "metrics.jsonl")
    save_arrays(out / "checkpoint", state.arrays(), {"kind": f"baseline-{state.kind}", "run": run.to_dict()})
    _write_report(out, report)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "radiomap": cmd_radiomap, "gradcheck": cmd_gradcheck,
            "baseline": cmd_baseline}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        with _blas_limit(getattr(args, "deterministic", False)):
            return COMMANDS[args.command](args)
    except (cfgmod.ConfigError, CheckpointError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
