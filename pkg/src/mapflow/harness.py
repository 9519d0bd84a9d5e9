"""Experiment plumbing: per-replica streams, estimators, suites and file output."""

import csv
import io
import json
import math
import os
import subprocess
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import flow_discrete as FD
from . import levy_flow as LF
from .errors import ConfigError, EmptySample
from .model import ModelParams, build_asymptotic_nu
from .peeling import geodesic_face_counts, limit_constant, normalization

SCHEMA_VERSION = 1
OUT_ENV = "MAPFLOW_OUT"
MIN_REPLICAS = 30


def fmt(x):
    """Floats with 17 significant digits, everything else via str."""
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


# ---------------------------------------------------------------------------
# random streams

def stream_id(experiment, replica):
    return (zlib.crc32(str(experiment).encode()), int(replica))


def replica_rng(seed, experiment, replica):
    """Philox stream keyed by (seed, experiment, replica); streams never share a key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=stream_id(experiment, replica))
    return np.random.Generator(np.random.Philox(ss))


def replica_rngs(seed, experiment, replicas, offset=0):
    return [replica_rng(seed, experiment, r) for r in range(offset, offset + replicas)]


# ---------------------------------------------------------------------------
# estimators

@dataclass
class Estimate:
    mean: float
    stderr: float
    n: int

    @property
    def low_power(self):
        return self.n < MIN_REPLICAS

    @classmethod
    def of(cls, x):
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            raise EmptySample("no replicas")
        se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.inf
        return cls(float(x.mean()), se, int(x.size))


def ks_distance(sample_a, sample_b):
    a, b = np.asarray(sample_a, float), np.asarray(sample_b, float)
    if a.size == 0 or b.size == 0:
        raise EmptySample("two-sample KS needs nonempty samples")
    return float(stats.ks_2samp(a, b).statistic)


def ks_critical(n, m, alpha):
    """Asymptotic one-sided critical value of the two-sample statistic."""
    return math.sqrt(-math.log(alpha) / 2) * math.sqrt((n + m) / (n * m))


def loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def nonincreasing_with_slack(values, stderrs, inversions=1):
    """True if values never increase except for at most ``inversions`` rises within one stderr."""
    used = 0
    for i in range(1, len(values)):
        rise = values[i] - values[i - 1]
        if rise > 0:
            slack = math.hypot(stderrs[i], stderrs[i - 1])
            if rise > slack or used >= inversions:
                return False
            used += 1
    return True


# ---------------------------------------------------------------------------
# specs and reports

@dataclass
class ExperimentSpec:
    kind: str
    a: float = 2.0
    p_q: float = 0.05
    ns: tuple = (1000, 10000, 100000, 1000000)
    ells: tuple = (256, 2048)
    T: float = 2.0
    replicas: int = 100
    seed: int = 0
    eps: float = LF.EPS_FLOW
    delta: float = LF.DELTA_XI
    depth: int = 50
    cutoff: float = 0.01
    x0: float = 0.0
    out: str = None
    fmt: str = "csv"

    def __post_init__(self):
        ModelParams(self.a, self.p_q)
        if not self.ns or not self.ells:
            raise ConfigError("grids must be nonempty")
        if self.replicas < 1:
            raise ConfigError("replicas must be positive")

    def echo(self):
        d = asdict(self)
        d["ns"], d["ells"] = list(self.ns), list(self.ells)
        return d


_FIELDS = {"kind": str, "a": float, "p_q": float, "T": float, "replicas": int, "seed": int,
           "eps": float, "delta": float, "depth": int, "cutoff": float, "x0": float, "out": str, "fmt": str}


def parse_config(text, base=None):
    """``key = value`` lines (``#`` comments); list keys ns/ells take comma lists."""
    vals = dict(base or {})
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            if k in ("ns", "ells"):
                vals[k] = tuple(int(float(x)) for x in v.split(",") if x.strip())
            elif k in _FIELDS:
                vals[k] = _FIELDS[k](float(v)) if _FIELDS[k] is int else _FIELDS[k](v)
            else:
                raise ConfigError(f"line {no}: unknown key {k!r}")
        except ValueError as e:
            raise ConfigError(f"line {no}: {e}") from None
    if "kind" not in vals:
        raise ConfigError("config needs a kind")
    return ExperimentSpec(**vals)


def git_hash():
    try:
        r = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                           cwd=os.path.dirname(__file__))
        return r.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


@dataclass
class Report:
    spec: dict
    rows: list = field(default_factory=list)        # per-replica records
    estimates: dict = field(default_factory=dict)   # name -> Estimate
    ks: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)      # (name, value, tolerance, passed)
    provenance: dict = field(default_factory=dict)

    def check(self, name, value, tol, passed):
        self.checks.append((name, value, tol, bool(passed)))
        return bool(passed)

    def to_json(self):
        def enc(x):
            if isinstance(x, Estimate):
                return {"mean": fmt(x.mean), "stderr": fmt(x.stderr), "n": x.n, "low_power": x.low_power}
            if isinstance(x, (float, np.floating)):
                return fmt(x)
            if isinstance(x, (np.integer,)):
                return int(x)
            if isinstance(x, dict):
                return {str(k): enc(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [enc(v) for v in x]
            return x
        doc = {"schema": SCHEMA_VERSION, "spec": self.spec, "provenance": self.provenance,
               "estimates": enc(self.estimates), "ks": enc(self.ks),
               "checks": [{"name": n, "value": enc(v), "tol": enc(t), "passed": p} for n, v, t, p in self.checks]}
        return json.dumps(doc, indent=1, sort_keys=True)

    def to_csv(self):
        if not self.rows:
            return ""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = list(self.rows[0])
        w.writerow(keys)
        for r in self.rows:
            w.writerow([fmt(r[k]) for k in keys])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# suites

def face_count_replicas(a, p_q, ns, seeds):
    """Per replica: counts and sums of theta at each n of ``ns`` on one infinite-map path."""
    nu = build_asymptotic_nu(a, p_q)
    ns = sorted(int(n) for n in ns)
    counts = np.empty((len(seeds), len(ns)), dtype=np.int64)
    sums = np.empty((len(seeds), len(ns)))
    for r, g in enumerate(seeds):
        counts[r], sums[r] = geodesic_face_counts(nu, ns, g)
    return ns, counts, sums


def face_count_suite(spec, experiment="face-count"):
    a = spec.a
    rngs = replica_rngs(spec.seed, experiment, spec.replicas)
    ns, counts, sums = face_count_replicas(a, spec.p_q, spec.ns, rngs)
    rep = Report(spec.echo(), provenance={"git": git_hash(), "experiment": experiment})
    norm = normalization(a, ns)
    stat = counts * norm
    for r in range(counts.shape[0]):
        for j, n in enumerate(ns):
            rep.rows.append({"replica": r, "n": n, "count": int(counts[r, j]), "sum_theta": float(sums[r, j]),
                             "normalized_stat": float(stat[r, j])})
    target = limit_constant(a)
    ests = [Estimate.of(stat[:, j]) for j in range(len(ns))]
    for n, e in zip(ns, ests):
        rep.estimates[f"n={n}"] = e
    if target is not None:
        errs = [abs(e.mean - target) for e in ests]
        rep.estimates["target"] = target
        rep.check("trend", errs, "nonincreasing, one inversion within 1 stderr",
                  nonincreasing_with_slack(errs, [e.stderr for e in ests]))
        rel = errs[-1] / target
        rep.check("relative_error_last_n", rel, 0.5, rel < 0.5)
    return rep


def dilute_stability(a, p_q, n_small, n_large, replicas, seed, experiment="face-count-dilute"):
    """KS between the normalized counts at two n, from independent replica sets."""
    ra = replica_rngs(seed, experiment + f"/n={n_small}", replicas)
    rb = replica_rngs(seed, experiment + f"/n={n_large}", replicas)
    _, ca, _ = face_count_replicas(a, p_q, [n_small], ra)
    _, cb, _ = face_count_replicas(a, p_q, [n_large], rb)
    sa = ca[:, 0] * normalization(a, n_small)
    sb = cb[:, 0] * normalization(a, n_large)
    return ks_distance(sa, sb), sa, sb


def flow_convergence_suite(spec, experiment="flow-convergence"):
    """KS between displacements of the rescaled discrete flow and the continuous flow."""
    T = spec.T
    grid = [T / 4, T / 2, T]
    nu = build_asymptotic_nu(spec.a, spec.p_q)
    cont = LF.flow_marginals(spec.a, spec.p_q, spec.eps, T, spec.x0, grid,
                             replica_rngs(spec.seed, experiment + "/continuous", spec.replicas))
    rep = Report(spec.echo(), provenance={"git": git_hash(), "experiment": experiment})
    ks_by_ell = {}
    for ell in spec.ells:
        pos, *_ = FD.run_replicas(nu, ell, T, 0.5, spec.x0, [0.0] + grid,
                                  replica_rngs(spec.seed, experiment + f"/l={ell}", spec.replicas))
        disp = pos[:, 1:] - pos[:, [0]]
        ks_by_ell[ell] = [ks_distance(disp[:, j], cont[:, j] - spec.x0) for j in range(len(grid))]
        for r in range(disp.shape[0]):
            for j, t in enumerate(grid):
                rep.rows.append({"ell": ell, "replica": r, "t": t, "discrete": disp[r, j],
                                 "continuous": cont[r, j] - spec.x0})
    rep.ks = {f"l={ell}": v for ell, v in ks_by_ell.items()}
    big = max(spec.ells)
    small = min(spec.ells)
    rep.check("ks_largest_l", ks_by_ell[big], 0.12, max(ks_by_ell[big]) < 0.12)
    crit = ks_critical(spec.replicas, spec.replicas, 0.01)
    rise = [b - s for b, s in zip(ks_by_ell[big], ks_by_ell[small])]
    rep.check("ks_not_increasing", rise, crit, all(x < crit for x in rise))
    return rep


SUITES = {"face-count": face_count_suite, "flow-convergence": flow_convergence_suite}


def default_out_dir():
    return os.environ.get(OUT_ENV, ".")


def run(spec):
    """Run the suite named by ``spec.kind`` and write its files; returns the report."""
    try:
        suite = SUITES[spec.kind]
    except KeyError:
        raise ConfigError(f"unknown experiment kind {spec.kind!r}") from None
    rep = suite(spec)
    if spec.out:
        base = spec.out if os.path.isabs(spec.out) else os.path.join(default_out_dir(), spec.out)
        os.makedirs(os.path.dirname(base) or ".", exist_ok=True)
        with open(base + ".json", "w") as f:
            f.write(rep.to_json())
        if spec.fmt == "csv":
            with open(base + ".csv", "w") as f:
                f.write(rep.to_csv())
    return rep
