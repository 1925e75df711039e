"""Command-line front end.

Subcommands::

    ccquantile solve    --problem P --epsilon E [--sample-size N] [--seed S]
    ccquantile tune     --problem P [--sample-size N] [--oos-size N'] [--seed S]
    ccquantile validate --problem P --experiment {replication,decay,flatness}
    ccquantile bench    --problem P --epsilon E --sizes 200,500,2000
    ccquantile gen      --problem P --sample-size N --seed S

Settings are resolved as built-in defaults, then the ``--config`` file,
then explicit flags.  Randomness is derived from the single ``--seed``:
training scenarios use the training stream of ``seed`` (replication ``r``
uses ``seed + r``), validation scenarios the validation stream of ``seed``,
and instance data its own ``instance_seed``.

Every run writes ``manifest.txt`` (resolved settings, seeds and versions)
to ``--out``; solves also write ``trace.csv`` and ``summary.json``, tuning
adds ``tuner.csv``.

Exit status: 0 on success, 1 if a solver did not converge, 2 on usage or
configuration errors.
"""

import argparse
import json
import math
import os
import platform
import sys

import numpy as np
import scipy

from ccquantile import __version__
from ccquantile.exceptions import ConfigError, InvalidArgumentError, ScenarioFormatError
from ccquantile.instances import BUILTINS, get_instance, nonconvex1d_true_objective
from ccquantile.kernel import QuarticKernel
from ccquantile.model import load_config, load_scenarios, sample, save_scenarios
from ccquantile.quantile import QuantileConfig
from ccquantile.rng import TRAIN, VALIDATION
from ccquantile.sl1qp import TrParams, solve
from ccquantile.tuner import TunerConfig, tune
from ccquantile import validate

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_CONFIG = 0, 1, 2
PROBLEMS = ("nonconvex1d", "reinsurance", "knapsack", "file")
EXPERIMENTS = ("replication", "decay", "flatness")
_U64 = (1 << 64) - 1

DEFAULTS = {
    "problem": {"name": None, "alpha": 0.05, "scenario_file": None, "builtin": None},
    "generator": {"seed": 0, "sample_size": 1000, "oos_size": 100_000},
    "solver": {"epsilon": None, "threads": 1},
    "tuner": {},
}
_TR_KEYS = set(TrParams.__dataclass_fields__)
_TUNER_KEYS = set(TunerConfig.__dataclass_fields__) - {"oos_sample_size"}
_INSTANCE_KEYS = {"n", "m", "instance_seed", "q", "rel_std", "unit", "premium_fraction", "var1", "var2"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _u64(text):
    value = int(text, 0)
    if not 0 <= value <= _U64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return values


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="instance description file")
    common.add_argument("--problem", choices=PROBLEMS, help="built-in instance, or 'file' for a config-defined one")
    common.add_argument("--seed", type=_u64, metavar="U64", help="master seed")
    common.add_argument("--epsilon", type=float, metavar="F", help="smoothing parameter")
    common.add_argument("--alpha", type=float, metavar="F", help="risk level")
    common.add_argument("--sample-size", type=_positive_int, metavar="N", help="training scenarios")
    common.add_argument("--oos-size", type=_positive_int, metavar="N'", help="validation scenarios")
    common.add_argument("--out", metavar="DIR", default="ccquantile_out", help="output directory")
    common.add_argument("--replications", type=_positive_int, metavar="K", default=1, help="independent repeats")
    common.add_argument("--threads", type=_positive_int, metavar="T", help="worker threads")
    common.add_argument("--x0", type=_float_list, metavar="V,V,...", help="starting point")

    parser = _Parser(prog="ccquantile", description="Smoothed-quantile chance-constrained solver")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("solve", parents=[common], help="solve one instance at a fixed epsilon")
    sub.add_parser("tune", parents=[common], help="tune epsilon by bisection and solve")
    p_val = sub.add_parser("validate", parents=[common], help="replication, decay or flatness experiments")
    p_val.add_argument("--experiment", choices=EXPERIMENTS, default="replication")
    p_val.add_argument("--sizes", type=_int_list, metavar="N,N,...", help="sample sizes")
    p_bench = sub.add_parser("bench", parents=[common], help="fixed-epsilon timing versus N")
    p_bench.add_argument("--sizes", type=_int_list, metavar="N,N,...", default=[200, 500, 2000, 5000])
    sub.add_parser("gen", parents=[common], help="write a scenario CSV")
    return parser


# ---------------------------------------------------------------------------
# settings


def resolve_settings(args):
    """Merge defaults, the config file and command-line flags."""
    settings = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    base_dir = "."
    if args.config:
        base_dir = os.path.dirname(os.path.abspath(args.config))
        for sec, vals in load_config(args.config).items():
            settings[sec].update(vals)
    prob, gen, sol = settings["problem"], settings["generator"], settings["solver"]
    overrides = [
        (prob, "name", args.problem), (prob, "alpha", args.alpha), (gen, "seed", args.seed),
        (gen, "sample_size", args.sample_size), (gen, "oos_size", args.oos_size),
        (sol, "epsilon", args.epsilon), (sol, "threads", args.threads),
    ]
    for section, key, value in overrides:
        if value is not None:
            section[key] = value
    if prob["name"] is None:
        raise ConfigError("no problem given; use --problem or a [problem] name in --config")
    if prob["name"] not in PROBLEMS:
        raise ConfigError(f"unknown problem {prob['name']!r}; choose from {', '.join(PROBLEMS)}")
    if prob["name"] == "file":
        if not prob.get("builtin") or not prob.get("scenario_file"):
            raise ConfigError("--problem file needs [problem] builtin and scenario_file in --config")
        prob["scenario_file"] = os.path.join(base_dir, str(prob["scenario_file"]))
    for key in ("seed", "sample_size", "oos_size", "threads"):
        section = sol if key == "threads" else gen
        if not isinstance(section[key], int) or isinstance(section[key], bool) or section[key] < (0 if key == "seed" else 1):
            raise ConfigError(f"{key} must be a {'non-negative' if key == 'seed' else 'positive'} integer")
    if not (isinstance(prob["alpha"], (int, float)) and 0 < prob["alpha"] < 1):
        raise ConfigError("alpha must lie in (0, 1)")
    unknown = set(prob) - set(DEFAULTS["problem"]) - _INSTANCE_KEYS
    unknown |= {f"solver.{k}" for k in set(sol) - _TR_KEYS - {"epsilon", "threads"}}
    unknown |= {f"tuner.{k}" for k in set(settings["tuner"]) - _TUNER_KEYS}
    unknown |= {f"generator.{k}" for k in set(gen) - set(DEFAULTS["generator"]) - {"validation_seed"}}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return settings


def make_instance(settings):
    prob = settings["problem"]
    name = prob["builtin"] if prob["name"] == "file" else prob["name"]
    if name not in BUILTINS:
        raise ConfigError(f"unknown built-in problem {name!r}")
    kwargs = {("seed" if k == "instance_seed" else k): v for k, v in prob.items() if k in _INSTANCE_KEYS}
    kwargs["alpha"] = prob["alpha"]
    try:
        return get_instance(name, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from exc


def tr_params(settings):
    return TrParams(**{k: v for k, v in settings["solver"].items() if k in _TR_KEYS})


def training_sample(inst, settings, seed):
    prob, gen = settings["problem"], settings["generator"]
    if prob["name"] == "file":
        return load_scenarios(prob["scenario_file"], s=inst.problem.s)
    return sample(inst.generator_id, inst.params, gen["sample_size"], seed, stream=TRAIN)


def validation_sample(inst, settings):
    gen = settings["generator"]
    return sample(inst.generator_id, inst.params, gen["oos_size"], gen.get("validation_seed", gen["seed"]),
                  stream=VALIDATION)


def starting_point(inst, args):
    if args.x0 is None:
        return inst.x0.copy()
    if len(args.x0) != inst.problem.n:
        raise ConfigError(f"--x0 needs {inst.problem.n} values")
    return np.array(args.x0, dtype=float)


def require_epsilon(settings):
    eps = settings["solver"]["epsilon"]
    if not isinstance(eps, (int, float)) or not (eps > 0 and math.isfinite(eps)):
        raise ConfigError("a positive --epsilon is required for this command")
    return float(eps)


# ---------------------------------------------------------------------------
# outputs


def write_manifest(out, args, settings, argv, extra=None):
    lines = [
        f"command = {args.command}",
        f"argv = {' '.join(argv)}",
        f"ccquantile = {__version__}",
        f"python = {platform.python_version()}",
        f"numpy = {np.__version__}",
        f"scipy = {scipy.__version__}",
        f"replications = {args.replications}",
    ]
    if args.x0 is not None:
        lines.append(f"x0 = {','.join(repr(v) for v in args.x0)}")
    for section in ("problem", "generator", "solver", "tuner"):
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in sorted(settings[section].items()) if v is not None)
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    with open(os.path.join(out, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(validate._jsonable(payload), fh, indent=2)


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(args, settings, out):
    inst = make_instance(settings)
    eps = require_epsilon(settings)
    S = training_sample(inst, settings, settings["generator"]["seed"])
    rep = solve(inst.problem, S, starting_point(inst, args), QuantileConfig(inst.alpha), QuarticKernel(eps),
                tr_params(settings), threads=settings["solver"]["threads"])
    rep.write_trace(os.path.join(out, "trace.csv"))
    summary = rep.summary()
    summary["problem"] = inst.name
    if inst.name == "nonconvex1d":
        summary["true_objective_at_x"] = float(nonconvex1d_true_objective(rep.x[0]))
    write_json(os.path.join(out, "summary.json"), summary)
    print(f"{inst.name}: status={rep.status} iterations={rep.iterations} objective={rep.f:.10g}")
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def cmd_tune(args, settings, out):
    inst = make_instance(settings)
    tuner_cfg = TunerConfig(oos_sample_size=settings["generator"]["oos_size"], **settings["tuner"])
    S = training_sample(inst, settings, settings["generator"]["seed"])
    S_val = validation_sample(inst, settings)
    res = tune(inst.problem, S, inst.alpha, S_val, tuner_cfg, tr_params(settings), x0=starting_point(inst, args))
    rep = res.report
    rep.write_trace(os.path.join(out, "trace.csv"))
    res.write_trace(os.path.join(out, "tuner.csv"))
    summary = rep.summary()
    summary.update({"problem": inst.name, "tuned_epsilon": res.epsilon, "epsilon0": res.epsilon0,
                    "tuner_status": res.status, "probes": len(res.probes), "tune_wall_time_s": res.wall_time})
    write_json(os.path.join(out, "summary.json"), summary)
    print(f"{inst.name}: epsilon={res.epsilon:.6g} p_oos={res.p_oos:.6f} objective={rep.f:.10g} "
          f"status={rep.status} tuner={res.status} probes={len(res.probes)}")
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def cmd_validate(args, settings, out):
    inst = make_instance(settings)
    gen = settings["generator"]
    seed = gen["seed"]
    threads = settings["solver"]["threads"]
    status = EXIT_OK
    if args.experiment == "replication":
        Ns = args.sizes or [gen["sample_size"]]
        seeds = [(seed + r) & _U64 for r in range(args.replications)]
        tuner_cfg = TunerConfig(oos_sample_size=gen["oos_size"], **settings["tuner"])
        table = validate.replication_stats(inst, Ns, args.replications, seeds, gen["oos_size"],
                                           gen.get("validation_seed", seed), tuner_cfg, tr_params(settings), threads)
        table.write_csv(os.path.join(out, "replication.csv"))
        runs = validate.runs_table(table)
        runs.write_csv(os.path.join(out, "runs.csv"))
        if not all(runs.column("converged")):
            status = EXIT_NOT_CONVERGED
        meta = {k: v for k, v in table.meta.items() if k != "runs"}
        payload = {"experiment": "replication", "rows": table.rows, "meta": meta,
                   "runs": [{k: r[k] for k in validate.RUN_FIELDS} for r in table.meta["runs"]]}
    elif args.experiment == "decay":
        eps = require_epsilon(settings)
        x = starting_point(inst, args)
        Ns = args.sizes or [50, 100, 200, 400]
        table = validate.feasibility_decay(inst.problem, x, inst.generator_id, inst.params, inst.alpha, eps, Ns,
                                           max(args.replications, 1), seed, threads=threads)
        table.write_csv(os.path.join(out, "decay.csv"))
        payload = {"experiment": "decay", **table.to_json()}
    else:
        eps = require_epsilon(settings)
        if inst.problem.n != 1 and inst.name != "nonconvex1d":
            raise ConfigError("the flatness profile needs a problem with a scalar decision")
        grid = np.linspace(-2.0, 2.5, 91)
        if inst.name == "nonconvex1d":
            y = float(nonconvex1d_true_objective(1.8))
            grid = [np.array([t, y]) for t in grid]
        table = validate.flatness_profile(inst, grid, gen["sample_size"], eps, seed)
        if inst.name == "nonconvex1d":
            for row, xv in zip(table.rows, grid):
                row["x"] = float(xv[0])
        table.write_csv(os.path.join(out, "flatness.csv"))
        payload = {"experiment": "flatness", **table.to_json()}
    write_json(os.path.join(out, "summary.json"), payload)
    for row in payload["rows"]:
        print(", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return status


def cmd_bench(args, settings, out):
    inst = make_instance(settings)
    eps = require_epsilon(settings)
    table = validate.timing_sweep(inst, args.sizes, eps, settings["generator"]["seed"], args.replications,
                                  tr_params(settings), starting_point(inst, args), settings["solver"]["threads"])
    table.write_csv(os.path.join(out, "bench.csv"))
    write_json(os.path.join(out, "summary.json"), {"experiment": "bench", **table.to_json()})
    for row in table.rows:
        print(f"N={row['N']} time={row['time_median']:.4f}s iterations={row['iterations']} status={row['status']}")
    print(f"log-log slope: {table.meta['slope']:.3f}")
    return EXIT_OK if all(s == "converged" for s in table.column("status")) else EXIT_NOT_CONVERGED


def cmd_gen(args, settings, out):
    inst = make_instance(settings)
    if settings["problem"]["name"] == "file":
        raise ConfigError("gen needs a built-in problem")
    gen = settings["generator"]
    S = sample(inst.generator_id, inst.params, gen["sample_size"], gen["seed"], stream=TRAIN)
    path = os.path.join(out, "scenarios.csv")
    save_scenarios(S, path)
    print(f"wrote {S.N} scenarios of dimension {S.s} to {path}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "tune": cmd_tune, "validate": cmd_validate, "bench": cmd_bench, "gen": cmd_gen}


def run(argv=None):
    """Parse ``argv`` and execute; returns the exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        settings = resolve_settings(args)
        os.makedirs(args.out, exist_ok=True)
        write_manifest(args.out, args, settings, argv)
        return COMMANDS[args.command](args, settings, args.out)
    except (ConfigError, InvalidArgumentError, ScenarioFormatError, OSError) as exc:
        print(f"ccquantile: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main():
    sys.exit(run())
