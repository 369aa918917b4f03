"""Dataset generation, warm-start evaluation, refinement and reporting.

Work is cut into indexed tasks whose random draws depend only on
``(seed, source, alpha index, task index)``.  Tasks run on a fixed-size
process pool and their results are committed in task order, so the output
bytes do not depend on the number of workers.  With timing disabled every
output is a pure function of the inputs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import multiprocessing as mp
import os
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .act import draw_costates
from .analysis import (CostatePCA, SolutionRecord, atomic_write_text, benchmark, costate_matrix,
                       lambda_prime, pareto_front, read_dataset, sample_uniform, uniform_envelope,
                       write_dataset)
from .config import NondimensionalProblem, ProblemConfig, nondimensionalize
from .indirect import propagate_extremal
from .refine import ResidualError, refine
from .rng import stream
from .screening import nearest, screen_problem, target_from_config

log = logging.getLogger(__name__)

MODES = ("screen_only", "screen_then_refine")
WORKERS_ENV = "LOWTHRUST_DM_WORKERS"
DEFAULT_CHUNK = 200
SOURCE_KEYS = {"act": 1, "uniform": 2, "diffusion": 3}


class ModelMismatchError(ValueError):
    """The model was trained for a different problem configuration."""


def default_workers() -> int:
    value = os.environ.get(WORKERS_ENV)
    if value is None:
        return 1
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {value!r}") from None
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be at least 1")
    return n


# --------------------------------------------------------------------- settings and tasks

@dataclass(frozen=True)
class SolveSettings:
    mode: str = "screen_only"
    delta: float | None = None  # screening tolerance, config value if None
    refine_tol: float | None = None  # feasibility tolerance, config value if None
    free_times: bool = False
    max_seconds: float = 30.0
    max_iters: int = 50
    timing: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.delta is not None and not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.refine_tol is not None and not self.refine_tol > 0:
            raise ValueError("refinement tolerance must be positive")


@dataclass(frozen=True)
class Task:
    index: int
    alpha_index: int
    alpha: float
    source: str
    count: int
    seed: tuple = ()
    costates: np.ndarray | None = field(default=None, repr=False)


@dataclass
class TaskResult:
    index: int
    alpha: float
    records: list
    n_sampled: int = 0
    n_failed: int = 0
    sampling_s: float = 0.0
    screening_s: float = 0.0
    solving_s: float = 0.0
    error: str | None = None


_STATE: dict = {}


def _init_worker(config: ProblemConfig, settings: SolveSettings):
    _STATE["config"] = config
    _STATE["settings"] = settings
    _STATE["target"] = target_from_config(config)


def _feasibility(config, settings):
    return settings.refine_tol if settings.refine_tol is not None else config.tolerances.feasibility


def _solve_one(lam, problem: NondimensionalProblem, config: ProblemConfig,
               settings: SolveSettings, alpha: float, source: str, res_times: list):
    """Screen (and refine) one costate guess; returns a record or None."""
    target = _STATE["target"]
    t0 = time.perf_counter()
    tau_s_max = config.tau_s_max_for(alpha)
    res = screen_problem(lam, problem, target, tau_s_max, config.tolerances, delta=settings.delta)
    t1 = time.perf_counter()
    res_times[0] += t1 - t0
    if not res.accepted:
        return None
    feas_tol = _feasibility(config, settings)
    if settings.mode == "screen_only":
        delta_c, decision, dv = res.delta_c_min, res.decision, res.dv_mps
    else:
        try:
            rep = refine(res.decision, problem, res.target_state, tol=feas_tol,
                         max_time=settings.max_seconds, max_iters=settings.max_iters,
                         free_times=settings.free_times, tau_s_bounds=(0.0, tau_s_max),
                         tau_f_bounds=config.boundary.tau_f_bounds)
            decision, delta_c = rep.decision, rep.residual_norm
            dv = propagate_extremal(decision, problem).dv_mps if rep.residual_norm < res.delta_c_min \
                else res.dv_mps
        except (ResidualError, ArithmeticError, RuntimeError) as exc:
            log.debug("refinement failed: %s", exc)
            decision, delta_c, dv = res.decision, res.delta_c_min, res.dv_mps
        res_times[1] += time.perf_counter() - t1
    wall = time.perf_counter() - t0 if settings.timing else 0.0
    return SolutionRecord(alpha=alpha, decision=decision, dv=float(dv), delta_c=float(delta_c),
                          feasible=bool(delta_c <= feas_tol), source=source, wall_time=wall)


def _run_task(task: Task) -> TaskResult:
    config, settings = _STATE["config"], _STATE["settings"]
    out = TaskResult(task.index, task.alpha, [])
    try:
        problem = nondimensionalize(config, task.alpha)
        t0 = time.perf_counter()
        if task.costates is None:
            lam, _, _ = draw_costates(problem, config.search, task.count, stream(*task.seed))
        else:
            lam = np.asarray(task.costates, dtype=float).reshape(-1, 6)
        out.sampling_s = time.perf_counter() - t0
        times = [0.0, 0.0]
        for row in lam:
            out.n_sampled += 1
            try:
                rec = _solve_one(row, problem, config, settings, task.alpha, task.source, times)
            except Exception as exc:  # one bad sample never sinks the task
                out.n_failed += 1
                log.debug("task %d sample failed: %s", task.index, exc)
                continue
            if rec is not None:
                out.records.append(rec)
        out.screening_s, out.solving_s = times
    except Exception:
        out.records = []
        out.error = traceback.format_exc(limit=3)
    if not settings.timing:
        out.sampling_s = out.screening_s = out.solving_s = 0.0
    return out


def run_tasks(tasks, config: ProblemConfig, settings: SolveSettings, workers: int = 1):
    """Yield task results in task order, using ``workers`` processes."""
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        _init_worker(config, settings)
        for t in tasks:
            yield _run_task(t)
        return
    target_from_config(config)  # build once so forked workers inherit the cache
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
    with ctx.Pool(workers, initializer=_init_worker, initargs=(config, settings)) as pool:
        yield from pool.imap(_run_task, tasks, chunksize=1)


# --------------------------------------------------------------------- tallies

@dataclass
class Tally:
    alpha: float
    n_sampled: int = 0
    n_accepted: int = 0
    n_feasible: int = 0
    n_failed_samples: int = 0
    n_failed_tasks: int = 0
    sampling_s: float = 0.0
    screening_s: float = 0.0
    solving_s: float = 0.0

    def add(self, res: TaskResult):
        self.n_sampled += res.n_sampled
        self.n_accepted += len(res.records)
        self.n_feasible += sum(r.feasible for r in res.records)
        self.n_failed_samples += res.n_failed
        self.n_failed_tasks += res.error is not None
        self.sampling_s += res.sampling_s
        self.screening_s += res.screening_s
        self.solving_s += res.solving_s

    def timings(self):
        return {"sampling": self.sampling_s, "screening": self.screening_s,
                "solving": self.solving_s}


def _collect(results, tallies, records, on_result=None):
    for res in results:
        if res.error:
            log.warning("task %d failed:\n%s", res.index, res.error)
        tallies[res.alpha].add(res)
        records.extend(res.records)
        if on_result is not None:
            on_result(res)


# --------------------------------------------------------------------- generate

@dataclass
class GenerateResult:
    records: list
    tallies: dict


def generate(config: ProblemConfig, alphas, count: int, settings: SolveSettings | None = None,
             seed: int = 0, workers: int = 1, chunk_size: int = DEFAULT_CHUNK,
             min_feasible: int | None = None, max_count: int | None = None) -> GenerateResult:
    """ACT sampling, screening and optional refinement for every thrust level.

    ``count`` initializations are drawn per level.  With ``min_feasible``
    the level instead keeps consuming whole tasks, in index order, until at
    least that many feasible records exist or ``max_count`` samples were
    used; the stopping point depends only on the ordered task results.
    """
    settings = settings or SolveSettings()
    alphas = [float(a) for a in alphas]
    if count < 1 and min_feasible is None:
        raise ValueError("count must be at least 1")
    if len(set(alphas)) != len(alphas):
        raise ValueError("thrust levels must be distinct")
    for a in alphas:
        config.alpha_to_thrust(a)  # domain check before any work is scheduled
    records, tallies = [], {a: Tally(a) for a in alphas}

    def tasks_for(ai, alpha, start, n_samples):
        k, left = start, n_samples
        while left > 0:
            n = min(chunk_size, left)
            yield Task(index=k, alpha_index=ai, alpha=alpha, source="act", count=n,
                       seed=(seed, SOURCE_KEYS["act"], ai, k))
            k += 1
            left -= n

    def progress(res):
        t = tallies[res.alpha]
        log.info("alpha=%g task %d: sampled %d accepted %d feasible %d", res.alpha, res.index,
                 t.n_sampled, t.n_accepted, t.n_feasible)

    for ai, alpha in enumerate(alphas):
        if min_feasible is None:
            _collect(run_tasks(tasks_for(ai, alpha, 0, count), config, settings, workers),
                     tallies, records, progress)
            continue
        limit = max_count if max_count is not None else math.inf
        wave = max(workers, 1) * 2
        k = 0
        while tallies[alpha].n_feasible < min_feasible and k * chunk_size < limit:
            n_wave = int(min(wave * chunk_size, limit - k * chunk_size))
            batch = list(tasks_for(ai, alpha, k, n_wave))
            for res in run_tasks(batch, config, settings, workers):
                if tallies[alpha].n_feasible >= min_feasible:
                    break  # results beyond the stopping task are discarded
                _collect([res], tallies, records, progress)
            k += len(batch)
    return GenerateResult(records, tallies)


# --------------------------------------------------------------------- evaluate

METHODS = ("diffusion", "act", "uniform")


@dataclass
class MethodResult:
    method: str
    records: list
    tally: Tally
    summary: object


def check_model(model, config: ProblemConfig):
    digest = getattr(model, "config_digest", None)
    if digest is None:
        raise ModelMismatchError("model does not record the configuration it was trained for")
    if digest != config.digest():
        raise ModelMismatchError(f"model was trained for configuration {digest}, "
                                 f"not {config.digest()}")


def evaluate(config: ProblemConfig, model, alpha: float, n_samples: int, methods=METHODS,
             settings: SolveSettings | None = None, seed: int = 0, workers: int = 1,
             w: float | None = None, chunk_size: int = DEFAULT_CHUNK) -> dict:
    """Run the same screening (and refinement) pipeline on each method's guesses."""
    settings = settings or SolveSettings()
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if model is not None:
        check_model(model, config)
    elif {"diffusion", "uniform"} & set(methods):
        raise ValueError("the diffusion and uniform methods need a trained model")
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    alpha = float(alpha)
    config.alpha_to_thrust(alpha)
    out = {}
    for method in methods:
        key = SOURCE_KEYS[method]
        tally = Tally(alpha)
        t0 = time.perf_counter()
        lam = None
        if method == "diffusion":
            lam = model.sample(alpha, n_samples, w=w, seed=(seed, key))
        elif method == "uniform":
            levels = {a: np.vstack(b) for a, b in model.levels_.items()}
            lo, hi = uniform_envelope(levels, alpha)
            lam = sample_uniform(lo, hi, n_samples, stream(seed, key))
        sampling = time.perf_counter() - t0 if settings.timing else 0.0
        tasks = []
        for k, start in enumerate(range(0, n_samples, chunk_size)):
            n = min(chunk_size, n_samples - start)
            tasks.append(Task(index=k, alpha_index=0, alpha=alpha, source=method, count=n,
                              seed=(seed, key, 0, k),
                              costates=None if lam is None else lam[start:start + n]))
        records = []
        _collect(run_tasks(tasks, config, settings, workers), {alpha: tally}, records)
        tally.sampling_s += sampling
        summary = benchmark(records, tally.n_sampled,
                            tally.timings() if settings.timing else None)
        out[method] = MethodResult(method, records, tally, summary)
        log.info("%s: %d sampled, %d accepted, %d feasible", method, tally.n_sampled,
                 summary.n_local, summary.n_converged)
    return out


# --------------------------------------------------------------------- refine existing records

def refine_records(config: ProblemConfig, records, settings: SolveSettings,
                   workers: int = 1) -> list:
    """Refine each record towards its nearest target point at ``tau_s``.

    Records already within the tolerance are kept as they are.  The
    feasibility flag is judged against the refinement tolerance.
    """
    records = list(records)
    tol = _feasibility(config, settings)
    tasks = [(i, r) for i, r in enumerate(records)]
    if workers <= 1 or len(tasks) <= 1:
        _init_worker(config, settings)
        return [_refine_one(t) for t in tasks]
    target_from_config(config)
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
    with ctx.Pool(workers, initializer=_init_worker, initargs=(config, settings)) as pool:
        out = list(pool.imap(_refine_one, tasks, chunksize=1))
    log.info("refined %d records, %d within %g", len(out), sum(r.feasible for r in out), tol)
    return out


def _refine_one(item):
    _, rec = item
    config, settings = _STATE["config"], _STATE["settings"]
    tol = _feasibility(config, settings)
    if rec.delta_c <= tol:
        return replace(rec, feasible=True)
    t0 = time.perf_counter()
    problem = nondimensionalize(config, rec.alpha)
    try:
        traj = propagate_extremal(rec.decision, problem)
        point, _, _ = nearest(_STATE["target"], traj.final[:6])
        rep = refine(rec.decision, problem, point, tol=tol, max_time=settings.max_seconds,
                     max_iters=settings.max_iters, free_times=settings.free_times,
                     tau_s_bounds=(0.0, config.tau_s_max_for(rec.alpha)),
                     tau_f_bounds=config.boundary.tau_f_bounds)
        dv = propagate_extremal(rep.decision, problem).dv_mps
        decision, delta_c = rep.decision, rep.residual_norm
    except Exception as exc:
        log.debug("refinement failed: %s", exc)
        decision, delta_c, dv = rec.decision, rec.delta_c, rec.dv
    wall = time.perf_counter() - t0 if settings.timing else 0.0
    return replace(rec, decision=decision, delta_c=float(delta_c), dv=float(dv),
                   feasible=bool(delta_c <= tol), wall_time=wall)


# --------------------------------------------------------------------- manifest

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str | None
    seed: int | None
    parameters: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # path -> sha256
    stages: dict = field(default_factory=dict)  # stage -> seconds
    outputs: list = field(default_factory=list)

    def add_input(self, path):
        self.inputs[str(path)] = file_digest(path)

    def stage(self, name, seconds):
        self.stages[name] = self.stages.get(name, 0.0) + float(seconds)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default)

    def write(self, path) -> str:
        """Write the manifest and return its content hash."""
        text = self.to_json()
        atomic_write_text(path, text + "\n")
        return hashlib.sha256((text + "\n").encode()).hexdigest()


def manifest_path(output) -> Path:
    p = Path(output)
    return p / "manifest.json" if p.suffix == "" else p.with_name(p.name + ".manifest.json")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=False) + "\n"


def tally_dict(t: Tally, timing: bool) -> dict:
    d = asdict(t)
    if not timing:
        for k in ("sampling_s", "screening_s", "solving_s"):
            d[k] = None
    return d


# --------------------------------------------------------------------- report

def _csv(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(v if isinstance(v, str) else repr(float(v)) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def report(dataset, out_dir, n_components: int = 3) -> dict:
    """Write the analysis bundle for ``dataset``; returns the written paths.

    Files: ``pareto.csv`` (feasible non-dominated points per thrust level),
    ``lambda_prime.csv``, ``pca.csv`` with ``pca.json`` and ``summary.json``.
    Everything is a pure function of the dataset bytes.
    """
    dataset = Path(dataset)
    records = read_dataset(dataset)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = file_digest(dataset)
    mpath = manifest_path(dataset)
    manifest_hash = file_digest(mpath) if mpath.exists() else None
    feasible = [r for r in records if r.feasible]
    alphas = sorted({r.alpha for r in records})

    pareto_rows = []
    for a in alphas:
        sub = [r for r in feasible if r.alpha == a]
        if not sub:
            continue
        pts = np.array([[r.dv, r.decision.tau_s] for r in sub])
        for i in pareto_front(pts, return_indices=True)[1]:
            pareto_rows.append((a, pts[i, 0], pts[i, 1]))

    lam = costate_matrix(feasible)
    lp = lambda_prime(lam[:, 0], lam[:, 4]) if len(feasible) else np.zeros(0)
    lp_rows = [(r.alpha, lam[i, 1], lam[i, 3], lp[i], r.decision.tau_s)
               for i, r in enumerate(feasible)]

    pca_info = {"n_components": n_components, "fitted": False}
    pca_rows = []
    if len(feasible) > n_components:
        pca = CostatePCA(n_components).fit(lam)
        proj = pca.transform(lam)
        pca_rows = [(r.alpha, *proj[i]) for i, r in enumerate(feasible)]
        pca_info.update(fitted=True, mean=pca.mean_, components=pca.components_,
                        explained_variance_ratio=pca.explained_variance_ratio_)

    levels = {}
    for a in alphas:
        sub = [r for r in records if r.alpha == a]
        feas = [r.dv for r in sub if r.feasible]
        levels[repr(a)] = {"n_records": len(sub), "n_feasible": len(feas),
                           "avg_dv_mps": float(np.mean(feas)) if feas else None,
                           "min_dv_mps": float(np.min(feas)) if feas else None}
    provenance = {"dataset_sha256": digest, "manifest_sha256": manifest_hash}
    files = {
        "pareto.csv": _csv(("alpha", "dv_mps", "tau_s"), pareto_rows),
        "lambda_prime.csv": _csv(("alpha", "lam_r0_2", "lam_v0_1", "lambda_prime", "tau_s"),
                                 lp_rows),
        "pca.csv": _csv(("alpha",) + tuple(f"pc{i + 1}" for i in range(n_components)), pca_rows),
        "pca.json": json_text({**pca_info, **provenance}),
        "summary.json": json_text({"levels": levels, "n_records": len(records),
                                   "n_feasible": len(feasible), **provenance}),
    }
    written = {}
    for name, text in files.items():
        atomic_write_text(out_dir / name, text)
        written[name] = out_dir / name
    return written


__all__ = ["MODES", "METHODS", "SolveSettings", "Task", "TaskResult", "Tally", "GenerateResult",
           "MethodResult", "RunManifest", "ModelMismatchError", "default_workers", "generate",
           "evaluate", "refine_records", "report", "run_tasks", "check_model", "write_dataset",
           "manifest_path", "file_digest", "json_text", "tally_dict"]
