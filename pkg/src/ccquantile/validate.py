"""Experiment harnesses.

* :func:`replication_stats` -- tune epsilon and solve on independent
  training samples for several sample sizes; per sample size it reports
  min/avg/max out-of-sample probability, min/avg/max objective, avg/max
  wall time and the average tuned epsilon.
* :func:`feasibility_decay` -- for a point that violates the chance
  constraint, the fraction of fresh samples on which the smoothed empirical
  CDF still claims feasibility, ``F_eps(0; x) >= 1 - alpha``, as the sample
  size grows.
* :func:`flatness_profile` -- smoothed quantile and shifted smoothed
  probability along a grid of decisions (data for plots only).
* :func:`quantile_gap` -- sup-norm distance between the smoothed sample
  quantile and a closed-form quantile over a grid.
* :func:`timing_sweep` -- wall time of fixed-epsilon solves versus ``N``.

All results are plain tables (lists of dicts) that can be written as CSV
or JSON and are reproducible from the instance and the seed list.
"""

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ccquantile.exceptions import InvalidArgumentError
from ccquantile.kernel import QuarticKernel
from ccquantile.model import eval_scenario_values, sample
from ccquantile.quantile import QuantileConfig, empirical_quantile, solve_quantile
from ccquantile.rng import TRAIN, VALIDATION
from ccquantile.sl1qp import TrParams, solve
from ccquantile.tuner import TunerConfig, tune

REPLICATION_FIELDS = (
    "N", "reps", "p_min", "p_avg", "p_max", "obj_min", "obj_avg", "obj_max",
    "time_avg", "time_max", "eps_avg",
)
RUN_FIELDS = ("N", "seed", "epsilon", "p_oos", "objective", "wall_time", "status", "converged", "tuner_status")


@dataclass
class Table:
    """Rows of an experiment plus free-form metadata."""

    fields: tuple
    rows: list
    meta: dict = field(default_factory=dict)

    def column(self, name):
        return [row[name] for row in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=self.fields, extrasaction="ignore")
            wr.writeheader()
            for row in self.rows:
                wr.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})

    def to_json(self):
        return {"fields": list(self.fields), "rows": _jsonable(self.rows), "meta": _jsonable(self.meta)}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, allow_nan=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _map(fn, jobs, threads):
    """Run ``fn`` over ``jobs``; results come back in job order."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def _check_sizes(Ns, reps):
    if not Ns or any(int(N) < 2 for N in Ns):
        raise InvalidArgumentError("sample sizes must be at least 2")
    if int(reps) < 1:
        raise InvalidArgumentError("reps must be at least 1")


# ---------------------------------------------------------------------------


def replication_stats(instance, Ns, reps, seeds=None, oos_size=100_000, validation_seed=0,
                      tuner_cfg=None, tr=TrParams(), threads=1):
    """Tuned solves on ``reps`` independent training samples per ``N``.

    Training sample ``r`` uses ``seeds[r]`` (default ``0 .. reps-1``) on the
    training stream; every run shares one validation sample of ``oos_size``
    scenarios drawn from the validation stream with ``validation_seed``.
    Returns the summary :class:`Table` with the per-run table in
    ``meta["runs"]``.
    """
    _check_sizes(Ns, reps)
    seeds = list(range(reps)) if seeds is None else [int(s) for s in seeds]
    if len(seeds) != reps:
        raise InvalidArgumentError("need exactly one seed per replication")
    tuner_cfg = tuner_cfg or TunerConfig(oos_sample_size=oos_size)
    ps, gen, params = instance.problem, instance.generator_id, instance.params
    S_val = sample(gen, params, oos_size, validation_seed, stream=VALIDATION)

    def run(job):
        N, seed = job
        S = sample(gen, params, N, seed, stream=TRAIN)
        res = tune(ps, S, instance.alpha, S_val, tuner_cfg, tr, x0=instance.x0)
        rep = res.report
        return {
            "N": N, "seed": seed, "epsilon": res.epsilon, "p_oos": res.p_oos, "objective": rep.f,
            "wall_time": res.wall_time, "status": rep.status, "converged": rep.converged,
            "tuner_status": res.status, "x": rep.x, "trace": rep.trace,
        }

    jobs = [(int(N), seed) for N in Ns for seed in seeds]
    runs = _map(run, jobs, threads)
    rows = []
    for N in Ns:
        sub = [r for r in runs if r["N"] == int(N)]
        p = np.array([r["p_oos"] for r in sub])
        obj = np.array([r["objective"] for r in sub])
        wall = np.array([r["wall_time"] for r in sub])
        eps = np.array([r["epsilon"] for r in sub])
        rows.append({
            "N": int(N), "reps": len(sub),
            "p_min": float(p.min()), "p_avg": float(p.mean()), "p_max": float(p.max()),
            "obj_min": float(obj.min()), "obj_avg": float(obj.mean()), "obj_max": float(obj.max()),
            "time_avg": float(wall.mean()), "time_max": float(wall.max()), "eps_avg": float(eps.mean()),
        })
    meta = {"instance": instance.name, "alpha": instance.alpha, "seeds": seeds, "oos_size": oos_size,
            "validation_seed": validation_seed, "runs": runs}
    return Table(REPLICATION_FIELDS, rows, meta)


def runs_table(table):
    """Per-run rows of a :func:`replication_stats` result as a :class:`Table`."""
    return Table(RUN_FIELDS, table.meta["runs"])


# ---------------------------------------------------------------------------


def smoothed_cdf(values, kernel, y=0.0):
    """``F_eps(y) = (1/N) sum_i Gamma_eps(z_i - y)``."""
    z = np.asarray(values, dtype=float)
    return float(np.mean(kernel.gamma(z - y)))


def _fit_slope(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2 or np.ptp(x) == 0:
        return math.nan
    return float(np.polyfit(x, y, 1)[0])


def feasibility_decay(ps, x, generator_id, params, alpha, epsilon, Ns, reps, seed=0,
                      kernel_cls=QuarticKernel, threads=1):
    """Fraction of ``reps`` fresh samples with ``F_eps(0; x) >= 1 - alpha``.

    Samples for all ``(N, rep)`` pairs are disjoint row blocks of the
    training stream of ``seed``.  The table has columns ``N``, ``fraction``
    and ``log_fraction``; ``meta["slope"]`` is the least-squares slope of
    ``log_fraction`` against ``N`` over the entries with a positive fraction.
    """
    _check_sizes(Ns, reps)
    kernel = kernel_cls(epsilon)
    level = 1.0 - alpha
    x = np.asarray(x, dtype=float)
    offsets = np.concatenate([[0], np.cumsum([int(N) * reps for N in Ns])])

    def run(k):
        N = int(Ns[k])
        S = sample(generator_id, params, N * reps, seed, stream=TRAIN, start=int(offsets[k]))
        values = eval_scenario_values(ps, x, S).values.reshape(reps, N)
        F = np.array([smoothed_cdf(v, kernel) for v in values])
        return float(np.mean(F >= level))

    fractions = _map(run, list(range(len(Ns))), threads)
    rows = []
    for N, frac in zip(Ns, fractions):
        rows.append({"N": int(N), "fraction": frac, "log_fraction": math.log(frac) if frac > 0 else -math.inf})
    pos = [(r["N"], r["log_fraction"]) for r in rows if r["fraction"] > 0]
    slope = _fit_slope(*zip(*pos)) if len(pos) >= 2 else math.nan
    meta = {"alpha": alpha, "epsilon": epsilon, "reps": reps, "seed": seed, "slope": slope}
    return Table(("N", "fraction", "log_fraction"), rows, meta)


# ---------------------------------------------------------------------------


def flatness_profile(instance, grid, N, epsilon, seed=0, true_quantile=None, kernel_cls=QuarticKernel):
    """Smoothed quantile and shifted smoothed probability along ``grid``.

    ``grid`` is a sequence of decision vectors (scalars for one-dimensional
    instances).  Columns: ``x`` (index into the grid for vector decisions),
    ``quantile`` = ``Q_eps(C^N(x))``, ``empirical`` = sorted-sample quantile,
    ``shifted_prob`` = ``(1 - alpha) - F_eps(0; x)`` and, when
    ``true_quantile`` is given, ``true``.
    """
    ps, alpha = instance.problem, instance.alpha
    S = sample(instance.generator_id, instance.params, N, seed, stream=TRAIN)
    kernel = kernel_cls(epsilon)
    cfg = QuantileConfig(alpha)
    rows = []
    for k, xv in enumerate(grid):
        xv = np.atleast_1d(np.asarray(xv, dtype=float))
        z = eval_scenario_values(ps, xv, S).values
        row = {
            "x": float(xv[0]) if xv.size == 1 else k,
            "quantile": solve_quantile(z, cfg, kernel).value,
            "empirical": empirical_quantile(z, alpha),
            "shifted_prob": (1.0 - alpha) - smoothed_cdf(z, kernel),
        }
        if true_quantile is not None:
            row["true"] = float(true_quantile(xv))
        rows.append(row)
    fields = ("x", "quantile", "empirical", "shifted_prob") + (("true",) if true_quantile is not None else ())
    return Table(fields, rows, {"instance": instance.name, "N": N, "epsilon": epsilon, "seed": seed, "alpha": alpha})


def quantile_gap(instance, grid, N, epsilon, true_quantile, seed=0, kernel_cls=QuarticKernel):
    """``max over grid |Q_eps(C^N(x)) - Q_true(x)|``."""
    prof = flatness_profile(instance, grid, N, epsilon, seed, true_quantile, kernel_cls)
    return max(abs(r["quantile"] - r["true"]) for r in prof.rows)


# ---------------------------------------------------------------------------


def timing_sweep(instance, Ns, epsilon, seed=0, repeats=1, tr=TrParams(), x0=None, threads=1):
    """Wall time of one fixed-epsilon solve per ``N`` (median over ``repeats``).

    ``meta["slope"]`` is the log-log least-squares slope of time against N.
    """
    _check_sizes(Ns, repeats)
    ps = instance.problem
    x0 = instance.x0 if x0 is None else np.asarray(x0, dtype=float)
    cfg = QuantileConfig(instance.alpha)
    rows = []
    for N in Ns:
        S = sample(instance.generator_id, instance.params, int(N), seed, stream=TRAIN)
        times, rep = [], None
        for _ in range(repeats):
            t0 = time.perf_counter()
            rep = solve(ps, S, x0, cfg, QuarticKernel(epsilon), tr, threads=threads)
            times.append(time.perf_counter() - t0)
        rows.append({
            "N": int(N), "time_median": float(np.median(times)), "time_min": float(np.min(times)),
            "iterations": rep.iterations, "status": rep.status, "objective": rep.f,
        })
    slope = _fit_slope(np.log([r["N"] for r in rows]), np.log([r["time_median"] for r in rows]))
    meta = {"instance": instance.name, "epsilon": epsilon, "seed": seed, "repeats": repeats, "slope": slope}
    return Table(("N", "time_median", "time_min", "iterations", "status", "objective"), rows, meta)
