"""Problem abstraction, scenario sets, sampling and file formats.

A problem is

    minimize f(x)  subject to  g(x) <= 0,
                               P( max_j c_j(x, xi) <= 0 ) >= 1 - alpha,

with ``x`` in R^n, ``p`` deterministic rows ``g`` (variable bounds are
encoded as ``g`` rows), ``m`` stochastic rows ``c`` and a random vector
``xi`` in R^s.  Evaluators of ``c`` are vectorized over scenarios.
"""

import configparser
import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ccquantile.exceptions import ConfigError, EvaluationError, InvalidArgumentError, ScenarioFormatError
from ccquantile.fd import fd_gradient, fd_jacobian
from ccquantile.rng import TRAIN, RowStreams


@dataclass
class ProblemSpec:
    """Evaluators of a chance-constrained program.

    Shapes (``N`` scenarios, ``xi`` of shape ``(N, s)``):

    * ``f(x) -> float``, ``grad_f(x) -> (n,)``, ``hess_f(x) -> (n, n)``
    * ``g(x) -> (p,)``, ``jac_g(x) -> (p, n)``,
      ``hess_g(x, nu) -> (n, n)`` = ``sum_j nu_j grad^2 g_j(x)``
    * ``c(x, xi) -> (N, m)``, ``jac_c(x, xi) -> (N, m, n)``,
      ``hess_c(x, xi, weights) -> (n, n)`` =
      ``sum_ij weights[i, j] grad^2 c_j(x, xi_i)``

    ``hess_g`` / ``hess_c`` may be ``None`` for functions linear in ``x``.
    """

    n: int
    p: int
    m: int
    s: int
    f: Callable
    grad_f: Callable
    hess_f: Callable
    g: Callable
    jac_g: Callable
    c: Callable
    jac_c: Callable
    hess_g: Callable | None = None
    hess_c: Callable | None = None
    name: str = "problem"

    def eval_g(self, x):
        if self.p == 0:
            return np.zeros(0)
        return np.asarray(self.g(x), dtype=float).reshape(self.p)

    def eval_jac_g(self, x):
        if self.p == 0:
            return np.zeros((0, self.n))
        return np.asarray(self.jac_g(x), dtype=float).reshape(self.p, self.n)

    def eval_hess_g(self, x, nu):
        if self.hess_g is None or self.p == 0:
            return np.zeros((self.n, self.n))
        return np.asarray(self.hess_g(x, nu), dtype=float)

    def eval_hess_c(self, x, xi, weights):
        if self.hess_c is None or self.m == 0:
            return np.zeros((self.n, self.n))
        return np.asarray(self.hess_c(x, xi, weights), dtype=float)

    def check_derivatives(self, x, xi, h=1e-6):
        """Largest relative finite-difference mismatch over all derivatives.

        Returns a dict keyed by derivative name.  ``xi`` is a small
        ``(N, s)`` scenario block; per-row Hessians are probed with one-hot
        weights.
        """
        x = np.asarray(x, dtype=float)
        xi = np.atleast_2d(np.asarray(xi, dtype=float))

        def rel(a, b):
            a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
            if a.size == 0:
                return 0.0
            return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))

        out = {
            "grad_f": rel(fd_gradient(self.f, x, h), self.grad_f(x)),
            "hess_f": rel(fd_jacobian(self.grad_f, x, h), self.hess_f(x)),
        }
        if self.p:
            out["jac_g"] = rel(fd_jacobian(self.eval_g, x, h), self.eval_jac_g(x))
            worst = 0.0
            for j in range(self.p):
                nu = np.zeros(self.p)
                nu[j] = 1.0
                fd = fd_jacobian(lambda v, j=j: self.eval_jac_g(v)[j], x, h)
                worst = max(worst, rel(fd, self.eval_hess_g(x, nu)))
            out["hess_g"] = worst
        if self.m:
            N = xi.shape[0]
            fd = fd_jacobian(lambda v: self.c(v, xi).reshape(-1), x, h).reshape(N, self.m, self.n)
            out["jac_c"] = rel(fd, self.jac_c(x, xi))
            worst = 0.0
            for i in range(N):
                for j in range(self.m):
                    w = np.zeros((N, self.m))
                    w[i, j] = 1.0
                    fdh = fd_jacobian(lambda v, i=i, j=j: self.jac_c(v, xi[i : i + 1])[0, j], x, h)
                    worst = max(worst, rel(fdh, self.eval_hess_c(x, xi, w)))
            out["hess_c"] = worst
        return out


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """Immutable ``N x s`` matrix of realizations plus the seed and stream they were drawn from."""

    data: np.ndarray
    seed: int | None = None
    generator_id: str = "file"
    stream: int = TRAIN
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=float, copy=True)
        if data.ndim == 1:
            data = data.reshape(-1, 1)
        if data.ndim != 2 or data.shape[0] < 1:
            raise InvalidArgumentError("empty scenario set")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("scenario entries must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def N(self):
        return self.data.shape[0]

    @property
    def s(self):
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class MaxReduction:
    """``values[i] = max_j c_j(x, xi_i)`` and the lowest achieving row index."""

    values: np.ndarray
    argmax_rows: np.ndarray
    rows: np.ndarray  # full (N, m) matrix of c_j(x, xi_i)


def eval_scenario_values(ps, x, S, threads=1, chunk=65536):
    """Evaluate all stochastic rows and their per-scenario maximum.

    With ``threads > 1`` scenario blocks are evaluated concurrently and
    concatenated in block order, so results do not depend on ``threads``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (ps.n,) or not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"x must be a finite vector of length {ps.n}")
    xi = S.data if isinstance(S, ScenarioSet) else np.atleast_2d(S)
    N = xi.shape[0]
    blocks = [(a, min(a + chunk, N)) for a in range(0, N, chunk)]

    def run(block):
        a, b = block
        return np.asarray(ps.c(x, xi[a:b]), dtype=float).reshape(b - a, ps.m)

    if threads > 1 and len(blocks) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(blk) for blk in blocks]
    rows = np.concatenate(parts, axis=0)
    bad = ~np.all(np.isfinite(rows), axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise EvaluationError(f"non-finite constraint value at scenario {i}", scenario=i)
    arg = np.argmax(rows, axis=1)  # first maximal index: lowest row wins ties
    values = rows[np.arange(N), arg]
    return MaxReduction(values=values, argmax_rows=arg, rows=rows)


# ---------------------------------------------------------------------------
# scenario generators


def _gen_constant(streams, params):
    return np.full((streams.rows, int(params.get("s", 1))), float(params.get("value", 0.0)))


def _gen_normal(streams, params):
    s = int(params.get("s", 1))
    mean = np.broadcast_to(np.asarray(params.get("mean", 0.0), dtype=float), (s,))
    var = np.broadcast_to(np.asarray(params.get("var", 1.0), dtype=float), (s,))
    if np.any(var < 0):
        raise InvalidArgumentError("normal generator needs var >= 0")
    return mean + np.sqrt(var) * streams.normal(s)


def _gen_reinsurance(streams, params):
    q = np.asarray(params["q"], dtype=float)
    mu = np.asarray(params["mu"], dtype=float)
    sigma = np.asarray(params["sigma"], dtype=float)
    scale = float(params.get("scale", 1.0))
    occurs = streams.uniform(q.size) < q
    severity = np.exp(mu + sigma * streams.normal(q.size)) * scale
    return np.where(occurs, severity, 0.0)


def _gen_knapsack(streams, params):
    mu = np.asarray(params["mu"], dtype=float)  # (m, n)
    q = float(params.get("q", 0.9))
    rel_std = float(params.get("rel_std", 0.1))
    m, n = mu.shape
    available = streams.uniform(n) < q  # one draw per item, shared by all rows
    w = mu[None, :, :] * (1.0 + rel_std * streams.normal(m * n).reshape(-1, m, n))
    w = w * available[:, None, :]
    return w.reshape(-1, m * n)


GENERATORS = {
    "constant": _gen_constant,
    "normal": _gen_normal,
    "reinsurance": _gen_reinsurance,
    "knapsack": _gen_knapsack,
}


def sample(generator_id, params, N, seed, stream=TRAIN, start=0, chunk=20000):
    """Draw rows ``start .. start+N-1`` of the ``(seed, stream)`` sample."""
    if generator_id not in GENERATORS:
        raise InvalidArgumentError(f"unknown generator {generator_id!r}; known: {sorted(GENERATORS)}")
    N = int(N)
    if N < 1:
        raise InvalidArgumentError("sample size must be at least 1")
    gen = GENERATORS[generator_id]
    parts = []
    for a in range(start, start + N, chunk):
        b = min(a + chunk, start + N)
        parts.append(gen(RowStreams(seed, stream, np.arange(a, b)), params))
    return ScenarioSet(np.concatenate(parts, axis=0), seed=int(seed), generator_id=generator_id, stream=stream, params=dict(params))


# ---------------------------------------------------------------------------
# CSV scenario files


def save_scenarios(S, path):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(f"xi_{j + 1}" for j in range(S.s)) + "\n")
        np.savetxt(fh, S.data, delimiter=",", fmt="%.17g")


def load_scenarios(path, s=None):
    """Read a scenario CSV (header ``xi_1,...,xi_s``)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ScenarioFormatError(f"{path}: missing header line") from None
        header = [h.strip() for h in header]
        expected = [f"xi_{j + 1}" for j in range(len(header))]
        if header != expected:
            raise ScenarioFormatError(f"{path}:1: malformed header {','.join(header)!r}; expected xi_1,...,xi_k")
        if s is not None and len(header) != s:
            raise ScenarioFormatError(f"{path}:1: header declares {len(header)} columns but the problem needs s={s}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ScenarioFormatError(f"{path}:{lineno}: expected {len(header)} cells, found {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ScenarioFormatError(f"{path}:{lineno}: non-numeric cell") from None
            if not all(math.isfinite(v) for v in vals):
                raise ScenarioFormatError(f"{path}:{lineno}: non-finite cell")
            rows.append(vals)
    if not rows:
        raise ScenarioFormatError(f"{path}: empty scenario set")
    return ScenarioSet(np.array(rows), generator_id="file")


# ---------------------------------------------------------------------------
# instance description files

CONFIG_SECTIONS = ("problem", "generator", "solver", "tuner")


def load_config(path):
    """Parse a sectioned ``key = value`` file into ``{section: {key: value}}``.

    Values are converted to int, float or bool when they look like one;
    everything else stays a string.  Unknown sections are rejected.
    """
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in CONFIG_SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]; allowed: {', '.join(CONFIG_SECTIONS)}")
        out[section] = {key: _convert(value) for key, value in parser.items(section)}
    return out


def _convert(text):
    low = text.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text.strip()
