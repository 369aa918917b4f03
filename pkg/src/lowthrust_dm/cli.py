"""Command-line entry point: ``lowthrust-dm <subcommand> ...``.

Exit status is 0 on success, 2 for invalid input (bad arguments, config,
dataset or model) and 3 when a run fails at runtime.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline as P
from .analysis import DatasetFormatError, atomic_write_text, costate_matrix, read_dataset, write_dataset
from .config import ConfigError, resolve_config

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
COSTATE_COLUMNS = ("lr1", "lr2", "lr3", "lv1", "lv2", "lv3")

log = logging.getLogger("lowthrust_dm")


class ValidationError(ValueError):
    pass


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _positive_int(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def _common(p, config_required=True, out_required=True):
    p.add_argument("--config", required=config_required,
                   help="built-in problem name (europa_dro, gto_halo) or path to an .ini file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive_int, default=None,
                   help=f"worker processes (default ${P.WORKERS_ENV} or 1)")
    p.add_argument("--out", required=out_required)
    p.add_argument("-v", "--verbose", action="count", default=0)


def _solver_args(p, default_mode="screen_only"):
    p.add_argument("--mode", choices=P.MODES, default=default_mode)
    p.add_argument("--delta", type=float, default=None, help="screening tolerance [NU]")
    p.add_argument("--tol", type=float, default=None, help="feasibility tolerance [NU]")
    p.add_argument("--free-times", action="store_true",
                   help="let refinement adjust the shooting and final coast times")
    p.add_argument("--max-seconds", type=float, default=30.0, help="refinement budget per guess")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--timing", choices=("on", "off"), default="on",
                   help="'off' writes zero wall times so outputs are reproducible byte for byte")
    p.add_argument("--chunk", type=_positive_int, default=P.DEFAULT_CHUNK,
                   help="samples per task")


def _settings(args) -> P.SolveSettings:
    return P.SolveSettings(mode=args.mode, delta=args.delta, refine_tol=args.tol,
                           free_times=args.free_times, max_seconds=args.max_seconds,
                           max_iters=args.max_iters, timing=args.timing == "on")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lowthrust-dm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample, screen and optionally refine initial costates")
    _common(g)
    g.add_argument("--alphas", type=_floats, required=True, help="comma-separated thrust levels")
    g.add_argument("--count", type=int, default=1000, help="initializations per level")
    g.add_argument("--min-feasible", type=int, default=None,
                   help="instead of --count, continue until this many feasible per level")
    g.add_argument("--max-count", type=int, default=None, help="sample cap with --min-feasible")
    _solver_args(g)

    t = sub.add_parser("train", help="fit the conditional diffusion model to feasible costates")
    _common(t)
    t.add_argument("--dataset", required=True, nargs="+")
    t.add_argument("--epochs", type=_positive_int, default=200)
    t.add_argument("--batch", type=_positive_int, default=256)
    t.add_argument("--lr", type=float, default=0.02)
    t.add_argument("--timesteps", type=_positive_int, default=1000)
    t.add_argument("--width", type=_positive_int, default=256)
    t.add_argument("--blocks", type=_positive_int, default=4)
    t.add_argument("--max-per-alpha", type=int, default=None,
                   help="keep at most this many feasible records per level")

    s = sub.add_parser("sample", help="draw costates from a trained model")
    _common(s)
    s.add_argument("--model", required=True)
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--w", type=float, default=None, help="guidance strength")

    e = sub.add_parser("evaluate", help="compare warm starts from the model and the baselines")
    _common(e)
    e.add_argument("--model", default=None)
    e.add_argument("--alpha", type=float, required=True)
    e.add_argument("--count", type=int, required=True, help="initializations per method")
    e.add_argument("--methods", default=",".join(P.METHODS))
    e.add_argument("--w", type=float, default=None)
    _solver_args(e)

    r = sub.add_parser("report", help="write Pareto, projection and summary files for a dataset")
    _common(r, config_required=False)
    r.add_argument("--dataset", required=True)
    r.add_argument("--components", type=_positive_int, default=3)

    f = sub.add_parser("refine", help="refine the records of a dataset to a tighter tolerance")
    _common(f)
    f.add_argument("--dataset", required=True)
    f.add_argument("--tol", type=float, default=None)
    f.add_argument("--free-times", action="store_true")
    f.add_argument("--max-seconds", type=float, default=30.0)
    f.add_argument("--max-iters", type=int, default=50)
    f.add_argument("--timing", choices=("on", "off"), default="on")
    f.add_argument("--only-infeasible", action="store_true",
                   help="drop records already within tolerance from the output")
    return parser


# --------------------------------------------------------------------- commands

def _manifest(args, config):
    m = P.RunManifest(command=args.command, config_hash=config.digest() if config else None,
                      seed=args.seed)
    if config is not None and config.source and Path(config.source).exists():
        m.add_input(config.source)
    return m


def cmd_generate(args, config, workers):
    if args.min_feasible is None and args.count < 1:
        raise ValidationError("--count must be at least 1")
    settings = _settings(args)
    manifest = _manifest(args, config)
    manifest.parameters = {"alphas": args.alphas, "count": args.count, "mode": args.mode,
                           "delta": args.delta, "tol": args.tol, "free_times": args.free_times,
                           "min_feasible": args.min_feasible, "max_count": args.max_count,
                           "chunk": args.chunk, "max_seconds": args.max_seconds,
                           "max_iters": args.max_iters, "timing": args.timing}
    t0 = time.perf_counter()
    result = P.generate(config, args.alphas, args.count, settings, seed=args.seed,
                        workers=workers, chunk_size=args.chunk, min_feasible=args.min_feasible,
                        max_count=args.max_count)
    manifest.stage("generate", time.perf_counter() - t0)
    out = Path(args.out)
    write_dataset(out, result.records)
    tallies = {repr(a): P.tally_dict(t, settings.timing) for a, t in result.tallies.items()}
    atomic_write_text(out.with_name(out.name + ".tally.json"), P.json_text(tallies))
    manifest.outputs = [str(out), str(out.with_name(out.name + ".tally.json"))]
    _finish_manifest(manifest, out, settings.timing)
    for a, t in result.tallies.items():
        log.info("alpha=%g sampled=%d accepted=%d feasible=%d failed_samples=%d failed_tasks=%d",
                 a, t.n_sampled, t.n_accepted, t.n_feasible, t.n_failed_samples, t.n_failed_tasks)
    return EXIT_RUNTIME if any(t.n_failed_tasks for t in result.tallies.values()) else EXIT_OK


def _finish_manifest(manifest, out, timing):
    # outputs are named relative to the manifest so identical runs compare equal
    where = P.manifest_path(out).parent
    manifest.outputs = [str(Path(o).resolve().relative_to(where.resolve())) for o in manifest.outputs]
    if not timing:
        manifest.stages = {k: None for k in manifest.stages}
    manifest.write(P.manifest_path(out))


def cmd_train(args, config, workers):
    import torch

    from .diffusion import DiffusionModel

    torch.set_num_threads(workers)
    manifest = _manifest(args, config)
    records = []
    for path in args.dataset:
        manifest.add_input(path)
        records.extend(r for r in read_dataset(path) if r.feasible)
    if args.max_per_alpha is not None:
        kept, seen = [], {}
        for r in records:
            if seen.get(r.alpha, 0) < args.max_per_alpha:
                kept.append(r)
                seen[r.alpha] = seen.get(r.alpha, 0) + 1
        records = kept
    if len(records) < 2:
        raise ValidationError("training needs at least two feasible records")
    X = costate_matrix(records)
    y = np.array([r.alpha for r in records])
    model = DiffusionModel(timesteps=args.timesteps, width=args.width, n_blocks=args.blocks,
                           epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
                           seed=args.seed, config_digest=config.digest())
    t0 = time.perf_counter()

    def progress(epoch, tr, va):
        if epoch % 10 == 0 or epoch == args.epochs - 1:
            log.info("epoch %d train %.5f val %.5f", epoch, tr, va)

    model.fit(X, y, log=progress)
    manifest.stage("train", time.perf_counter() - t0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    losses = out.with_name(out.name + ".loss.csv")
    atomic_write_text(losses, "epoch,train_loss,val_loss\n" + "".join(
        f"{i},{a!r},{b!r}\n" for i, (a, b) in enumerate(zip(model.train_loss_, model.val_loss_))))
    manifest.parameters = {"n_records": len(records), "levels": sorted(set(y.tolist())),
                           **model.get_params()}
    manifest.outputs = [str(out), str(losses)]
    _finish_manifest(manifest, out, True)
    return EXIT_OK


def _load_model(path, config):
    from .diffusion import DiffusionModel

    model = DiffusionModel.load(path)
    P.check_model(model, config)
    return model


def cmd_sample(args, config, workers):
    import torch

    torch.set_num_threads(workers)
    if args.count < 0:
        raise ValidationError("--count must be non-negative")
    model = _load_model(args.model, config)
    lam = model.sample(args.alpha, args.count, w=args.w, seed=args.seed)
    text = ",".join(COSTATE_COLUMNS) + "\n" + "".join(
        ",".join(repr(float(v)) for v in row) + "\n" for row in lam)
    atomic_write_text(args.out, text)
    manifest = _manifest(args, config)
    manifest.add_input(args.model)
    manifest.parameters = {"alpha": args.alpha, "count": args.count, "w": args.w}
    manifest.outputs = [str(args.out)]
    _finish_manifest(manifest, Path(args.out), True)
    return EXIT_OK


def cmd_evaluate(args, config, workers):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = set(methods) - set(P.METHODS)
    if bad:
        raise ValidationError(f"unknown methods: {', '.join(sorted(bad))}")
    if args.count < 0:
        raise ValidationError("--count must be non-negative")
    model = None
    if args.model is not None:
        model = _load_model(args.model, config)
    elif {"diffusion", "uniform"} & set(methods):
        raise ValidationError("--model is required for the diffusion and uniform methods")
    settings = _settings(args)
    manifest = _manifest(args, config)
    if args.model:
        manifest.add_input(args.model)
    manifest.parameters = {"alpha": args.alpha, "count": args.count, "methods": methods,
                           "w": args.w, "mode": args.mode, "delta": args.delta, "tol": args.tol}
    t0 = time.perf_counter()
    results = P.evaluate(config, model, args.alpha, args.count, methods, settings,
                         seed=args.seed, workers=workers, w=args.w, chunk_size=args.chunk)
    manifest.stage("evaluate", time.perf_counter() - t0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, res in results.items():
        write_dataset(out / f"{name}.csv", res.records)
        summary[name] = {"summary": res.summary.to_dict(),
                         "tally": P.tally_dict(res.tally, settings.timing)}
        manifest.outputs.append(str(out / f"{name}.csv"))
    atomic_write_text(out / "summary.json", P.json_text({"alpha": args.alpha, "methods": summary}))
    manifest.outputs.append(str(out / "summary.json"))
    _finish_manifest(manifest, out, settings.timing)
    for name, res in results.items():
        s = res.summary
        log.info("%s: sampled %d accepted %d feasible %d ratio %s%% per-min %s", name,
                 s.n_sampled, s.n_local, s.n_converged, s.feasibility_ratio, s.solutions_per_min)
    return EXIT_OK


def cmd_report(args, config, workers):
    written = P.report(args.dataset, args.out, n_components=args.components)
    for path in written.values():
        log.info("wrote %s", path)
    return EXIT_OK


def cmd_refine(args, config, workers):
    settings = P.SolveSettings(mode="screen_then_refine", refine_tol=args.tol,
                               free_times=args.free_times, max_seconds=args.max_seconds,
                               max_iters=args.max_iters, timing=args.timing == "on")
    manifest = _manifest(args, config)
    manifest.add_input(args.dataset)
    records = read_dataset(args.dataset)
    t0 = time.perf_counter()
    refined = P.refine_records(config, records, settings, workers=workers)
    manifest.stage("refine", time.perf_counter() - t0)
    if args.only_infeasible:
        tol = settings.refine_tol or config.tolerances.feasibility
        refined = [r for r, old in zip(refined, records) if old.delta_c > tol]
    write_dataset(args.out, refined)
    manifest.outputs = [str(args.out)]
    manifest.parameters = {"tol": args.tol, "free_times": args.free_times,
                           "max_seconds": args.max_seconds, "max_iters": args.max_iters}
    _finish_manifest(manifest, Path(args.out), settings.timing)
    log.info("%d of %d records feasible after refinement", sum(r.feasible for r in refined),
             len(refined))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "sample": cmd_sample,
            "evaluate": cmd_evaluate, "report": cmd_report, "refine": cmd_refine}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose == 0 else logging.DEBUG,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        workers = args.workers if args.workers is not None else P.default_workers()
        config = resolve_config(args.config) if args.config else None
        return COMMANDS[args.command](args, config, workers)
    except (ValidationError, ConfigError, DatasetFormatError, P.ModelMismatchError,
            FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:
        log.exception("run failed: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
