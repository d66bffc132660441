"""Ensemble orchestration and result persistence.

Trajectories are split into fixed-size chunks (``cfg.chunk_size``) that are
processed independently, possibly on a thread pool, and then reduced in chunk
order. Chunk boundaries do not depend on the number of workers and every
trajectory draws its noise from ``SeedSequence(entropy=seed, spawn_key=(i,))``,
so CSV outputs are byte-identical for any worker count.

Each run directory receives its CSV series, ``summary.json`` and
``manifest.json``. Files are written to a temporary name and moved into place,
and an ``INCOMPLETE`` marker exists for the duration of the run, so an
interrupted run never leaves a truncated CSV behind.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .exact import exact_vs_filter
from .linalg import density_to_bloch, frobenius_norm, rtrace
from .projection import ProjState, projection_step
from .qubit import closed_loop_run
from .residuals import BoundIngredients, bound_rhs, brownian_paths, residual_series
from .rng import wiener_increments
from .sde import SimulationError, iterate_filter, variance_functional

logger = logging.getLogger(__name__)

MARKER = "INCOMPLETE"
SEEDING = "numpy SeedSequence(entropy=seed, spawn_key=(trajectory_index,)) -> PCG64; N(0, dt) increments"


# ---------------------------------------------------------------------------
# persistence


def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def csv_text(columns: dict[str, np.ndarray]) -> str:
    """Header row plus one row per index; floats use ``repr`` for exact round-trips."""
    names = list(columns)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in zip(*(np.asarray(columns[n]) for n in names)):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# ensemble mechanics


def chunks(n_traj: int, size: int) -> list[list[int]]:
    return [list(range(a, min(a + size, n_traj))) for a in range(0, n_traj, size)]


def map_chunks(fn: Callable[[list[int]], dict], cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """Apply ``fn`` to every chunk of trajectory indices; results come back in chunk order."""
    parts = chunks(cfg.n_traj, cfg.chunk_size)
    if workers <= 1 or len(parts) == 1:
        return [fn(p) for p in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, parts))


class Accumulator:
    """Ordered per-time sums for ensemble means and standard errors."""

    def __init__(self):
        self.n = 0
        self.s1: dict[str, np.ndarray] = {}
        self.s2: dict[str, np.ndarray] = {}

    def add(self, series: dict[str, np.ndarray]) -> None:
        first = next(iter(series.values()))
        self.n += first.shape[0]
        for k, a in series.items():
            self.s1[k] = self.s1.get(k, 0.0) + a.sum(axis=0)
            self.s2[k] = self.s2.get(k, 0.0) + (a**2).sum(axis=0)

    def mean(self, k: str) -> np.ndarray:
        return self.s1[k] / self.n

    def stderr(self, k: str) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(self.s1[k])
        m = self.mean(k)
        var = np.clip(self.s2[k] - self.n * m**2, 0.0, None) / (self.n - 1)
        return np.sqrt(var / self.n)


# ---------------------------------------------------------------------------
# experiments: each returns (csv outputs, summary)


def _closed_loop(cfg: ExperimentConfig, workers: int, feedback: bool):
    p = cfg.qubit_params()
    grid = cfg.grid
    rho0_bloch = tuple(density_to_bloch(cfg.build_rho0()))
    series = ("gap", "fidelity", "fidelity_true", "V_filter", "V_proj", "control")

    def work(idx):
        run = closed_loop_run(p, grid, feedback=feedback, rho0_bloch=rho0_bloch, indices=idx, scheme=cfg.scheme)
        return {
            "series": {k: getattr(run, k) for k in series},
            "z_final": run.z_true_final,
            "stats": (run.max_bloch_norm, run.min_eig, run.repairs, run.max_trace_error, run.saturated),
        }

    acc = Accumulator()
    z = []
    norm, lo, repairs, trace_err, saturated = 1.0, 0.0, 0, 0.0, 0
    for part in map_chunks(work, cfg, workers):
        acc.add(part["series"])
        z.append(part["z_final"])
        b, e, r, t, s = part["stats"]
        norm, lo, repairs, trace_err, saturated = max(norm, b), min(lo, e), repairs + r, max(trace_err, t), saturated + s
    z = np.concatenate(z)
    summary = {
        "n_traj": acc.n,
        "feedback": feedback,
        "final_mean_fidelity": float(acc.mean("fidelity")[-1]),
        "final_mean_fidelity_true": float(acc.mean("fidelity_true")[-1]),
        "max_mean_gap": float(acc.mean("gap").max()),
        "fraction_reduced_z_0.99": float(np.mean(np.abs(z) > 0.99)),
        "max_bloch_norm_pre_repair": norm,
        "min_eigenvalue_pre_repair": lo,
        "positivity_repairs": repairs,
        "max_trace_error": trace_err,
        "projection_saturated_steps": saturated,
    }
    return grid.times, acc, summary


def run_fig1(cfg: ExperimentConfig, workers: int = 1):
    t, acc, summary = _closed_loop(cfg, workers, feedback=False)
    cols = {
        "t": t,
        "gap_mean": acc.mean("gap"),
        "gap_stderr": acc.stderr("gap"),
        "V_filter_mean": acc.mean("V_filter"),
        "V_filter_stderr": acc.stderr("V_filter"),
        "V_proj_mean": acc.mean("V_proj"),
        "V_proj_stderr": acc.stderr("V_proj"),
    }
    return {"fig1.csv": cols}, summary


def run_fig2(cfg: ExperimentConfig, workers: int = 1):
    t, acc, summary = _closed_loop(cfg, workers, feedback=True)
    cols = {
        "t": t,
        "gap_mean": acc.mean("gap"),
        "gap_stderr": acc.stderr("gap"),
        "control_mean": acc.mean("control"),
    }
    return {"fig2.csv": cols}, summary


def run_fig3(cfg: ExperimentConfig, workers: int = 1):
    t, acc, summary = _closed_loop(cfg, workers, feedback=True)
    cols = {
        "t": t,
        "fidelity_mean": acc.mean("fidelity"),
        "fidelity_stderr": acc.stderr("fidelity"),
        "fidelity_true_mean": acc.mean("fidelity_true"),
        "V_filter_mean": acc.mean("V_filter"),
        "V_proj_mean": acc.mean("V_proj"),
    }
    return {"fig3.csv": cols}, summary


def run_bound(cfg: ExperimentConfig, workers: int = 1):
    model = cfg.build_model()
    fam = cfg.build_family(model)
    grid = cfg.grid
    idx_t = np.arange(0, grid.n_steps + 1, cfg.stride)
    times = grid.times[idx_t]

    def work(idx):
        Y = brownian_paths(grid.seed, idx, grid.n_steps, grid.dt)[:, idx_t]
        return residual_series(fam, model, times, Y)

    acc = Accumulator()
    worst = {"max_c2": 0.0, "max_c1_closed_gap": 0.0, "max_c1_block_gap": 0.0, "max_omega_gap": 0.0}
    for part in map_chunks(work, cfg, workers):
        acc.add({k: part[k] for k in ("total", "omega", "c1", "c2")})
        for k in worst:
            worst[k] = max(worst[k], part[k])
    bound = bound_rhs(BoundIngredients.from_family(fam, model))
    e, se = acc.mean("total"), acc.stderr("total")
    cols = {
        "t": times,
        "e_t": e,
        "stderr": se,
        "bound_rhs": np.full(len(times), bound),
        "omega_norm_mean": acc.mean("omega"),
        "c1_norm_mean": acc.mean("c1"),
        "c2_norm_mean": acc.mean("c2"),
    }
    summary = {
        "n_traj": acc.n,
        "bound_rhs": bound,
        "max_e_t": float(e.max()),
        "bound_dominates_with_3se": bool(np.all(e - 3 * se <= bound)),
        **worst,
    }
    return {"bound.csv": cols}, summary


def run_exact(cfg: ExperimentConfig, workers: int = 1):
    model = cfg.build_model()
    rho0 = cfg.build_rho0()
    grid = cfg.grid

    def work(idx):
        dW = wiener_increments(grid.seed, idx, grid.n_steps, grid.dt)
        cmp = exact_vs_filter(model, rho0, grid, dW=dW, scheme=cfg.scheme)
        return {"gap": cmp.gap, "min_eig": cmp.min_eig}

    acc = Accumulator()
    worst_gap = np.full(grid.n_steps + 1, 0.0)
    lo = 0.0
    for part in map_chunks(work, cfg, workers):
        acc.add({"gap": part["gap"]})
        worst_gap = np.maximum(worst_gap, part["gap"].max(axis=0))
        lo = min(lo, part["min_eig"])
    cols = {"t": grid.times, "gap_mean": acc.mean("gap"), "gap_stderr": acc.stderr("gap"), "gap_max": worst_gap}
    summary = {
        "n_traj": acc.n,
        "dt": grid.dt,
        "scheme": cfg.scheme,
        "max_gap": float(worst_gap.max()),
        "min_eigenvalue_pre_repair": lo,
    }
    return {"exact.csv": cols}, summary


def run_filter(cfg: ExperimentConfig, workers: int = 1):
    """Full filter (and optionally the projection filter) on a generic model."""
    model = cfg.build_model()
    rho0 = cfg.build_rho0()
    fam = cfg.build_family(model) if cfg.projection else None
    grid = cfg.grid
    dt = grid.dt

    def work(idx):
        inc = wiener_increments(grid.seed, idx, grid.n_steps, dt)
        n = len(idx)
        out = {k: np.zeros((n, grid.n_steps + 1)) for k in ("V_filter", "gap", "trace_proj")}
        out["V_filter"][:, 0] = variance_functional(rho0, model.L).real
        out["trace_proj"][:, 0] = 1.0
        proj = ProjState.initial(fam, (n,)) if fam is not None else None
        lo, repairs = 0.0, 0
        try:
            for rec in iterate_filter(model, rho0, dt, inc, cfg.measure, cfg.scheme, indices=idx):
                k = rec["k"]
                rho = rec["rho"]
                out["V_filter"][:, k] = variance_functional(rho, model.L).real
                lo = min(lo, float(rec["min_eig"].min()))
                repairs += int(rec["repaired"].sum())
                if proj is not None:
                    proj = projection_step(proj, fam, model, rec["dY"], dt)
                    tr = rtrace(proj.rho)
                    out["trace_proj"][:, k] = tr
                    out["gap"][:, k] = frobenius_norm(rho - proj.rho / tr[:, None, None])
        except SimulationError as exc:
            if exc.trajectory is None:
                exc.trajectory = idx[0]
            raise
        return {"series": out, "min_eig": lo, "repairs": repairs}

    acc = Accumulator()
    lo, repairs = 0.0, 0
    for part in map_chunks(work, cfg, workers):
        acc.add(part["series"])
        lo, repairs = min(lo, part["min_eig"]), repairs + part["repairs"]
    cols = {"t": grid.times, "V_filter_mean": acc.mean("V_filter"), "V_filter_stderr": acc.stderr("V_filter")}
    if fam is not None:
        cols.update(
            gap_mean=acc.mean("gap"), gap_stderr=acc.stderr("gap"),
            trace_proj_mean=acc.mean("trace_proj"), trace_proj_stderr=acc.stderr("trace_proj"),
        )
    summary = {
        "n_traj": acc.n,
        "measure": cfg.measure,
        "min_eigenvalue_pre_repair": lo,
        "positivity_repairs": repairs,
    }
    if fam is not None:
        summary["max_mean_gap"] = float(acc.mean("gap").max())
    return {"filter.csv": cols}, summary


RUNNERS = {
    "fig1": run_fig1,
    "fig2": run_fig2,
    "fig3": run_fig3,
    "bound": run_bound,
    "exact": run_exact,
    "filter": run_filter,
}


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int = 1) -> Path:
    """Run ``cfg`` and persist CSVs, ``summary.json`` and ``manifest.json``; returns the directory."""
    errors = cfg.validate()
    if errors:
        from .config import ConfigError

        raise ConfigError(errors)
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / MARKER
    atomic_write(marker, json.dumps({"experiment": cfg.experiment, "started": time.time()}) + "\n")
    start = time.perf_counter()

    tables, summary = RUNNERS[cfg.experiment](cfg, workers)

    digests = {}
    for name, cols in tables.items():
        text = csv_text(cols)
        atomic_write(out / name, text)
        digests[name] = hashlib.sha256(text.encode()).hexdigest()
    atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    manifest = {
        "config": cfg.to_dict(),
        "seeds": {"master": cfg.seed, "trajectories": [0, cfg.n_traj], "derivation": SEEDING},
        "software": {"qprojfilter": __version__, "numpy": np.__version__},
        "workers": workers,
        "wall_time_s": time.perf_counter() - start,
        "outputs": digests,
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    marker.unlink()
    logger.info("wrote %s in %.1fs", out, manifest["wall_time_s"])
    return out
