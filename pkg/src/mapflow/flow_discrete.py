"""Discrete coalescing flow driven by the reversed peeling of a finite map.

Trajectories are boundary edges tracked by integer index; the real-valued
flow is an embedding recomputed from the indices and the running offsets.

Index convention (forward step k takes P(k) to P(k+1)). Replaying step k
backwards acts on the 2 P(k+1) edges of the later boundary:
  j = (i - v_k) mod 2P(k+1)
  glue (dP = d > 0): j <= 2d merges into index 0, otherwise j -> j - 2d
  insertion (dP < 0): j -> j, new edges occupy [2P(k+1), 2P(k))
Offsets E_k satisfy E_0 = 0, U_k = {E_{k+1} + v_k / 2P(k+1)} and
E_k = U_k + max_k / 2, so that edge i of level k sits at E_k + i / 2P(k).
Steps with dP = 0 move nothing and are skipped.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import StartOffGrid
from .perimeter import finite_step

CUT_TOL = 1e-12


def g_discrete(x, z, u, p_after):
    x, z, u = np.asarray(x, float), np.asarray(z, float), np.asarray(u, float)
    return _g_of_f(np.mod(x - u, 1.0), z, p_after)


def _g_of_f(f, z, p_after):
    shrink = np.maximum(f - np.maximum((z - 1) / z, 0.0), 0.0) * z - f
    return shrink + 0.5 * np.maximum(1 - 1 / z, (1 - 1 / (2.0 * p_after)) * (1 - z))


@njit(cache=True)
def _half_max(P0, P1):
    z = P1 / P0
    return 0.5 * max(1.0 - 1.0 / z, (1.0 - 0.5 / P1) * (1.0 - z))


@njit(cache=True)
def _offsets(vals, v):
    """E_k for k = 0..n with E_0 = 0 (Kahan-compensated before reduction)."""
    n = vals.shape[0] - 1
    E = np.zeros(n + 1)
    acc = 0.0
    comp = 0.0
    for k in range(n):
        P0, P1 = vals[k], vals[k + 1]
        if P1 == P0 or P1 == 0:
            E[k + 1] = E[k]
            continue
        inc = -(_half_max(float(P0), float(P1)) + v[k] / (2.0 * P1))
        y = inc - comp
        t = acc + y
        comp = (t - acc) - y
        acc = t
        acc -= math.floor(acc)
        E[k + 1] = acc
    return E


@njit(cache=True)
def _simulate(T, a, ell, tmax, gen, deterministic):
    """Finite-map chain with its continuous clock up to time tmax.

    Returns P(0..L), jump times t_0..t_{L-1} (all <= tmax), positions v, exps
    (one per step; the last one may belong to the unfinished holding time).
    """
    cap = 1024
    vals = np.empty(cap + 1, dtype=np.int64)
    times = np.empty(cap)
    vs = np.empty(cap, dtype=np.int64)
    exps = np.empty(cap + 1)
    vals[0] = ell
    p = ell
    t = 0.0
    n = 0
    while p > 0:
        e = 1.0 if deterministic else gen.standard_exponential()
        exps[n] = e
        t += e / (2.0 * p ** (a - 1.0))
        if t > tmax:
            break
        k = finite_step(T, p, a, gen)
        p += k
        if n + 1 >= cap:
            cap *= 2
            nv = np.empty(cap + 1, dtype=np.int64)
            nv[:n + 1] = vals[:n + 1]
            vals = nv
            nt = np.empty(cap)
            nt[:n] = times[:n]
            times = nt
            nvs = np.empty(cap, dtype=np.int64)
            nvs[:n] = vs[:n]
            vs = nvs
            ne = np.empty(cap + 1)
            ne[:n + 1] = exps[:n + 1]
            exps = ne
        times[n] = t
        vs[n] = int(gen.random() * 2 * p) if p > 0 else 0
        n += 1
        vals[n] = p
    return vals[:n + 1], times[:n], vs[:n], exps[:n + 1]


@dataclass
class ContinuousTimePerimeter:
    values: np.ndarray  # P(0..L)
    times: np.ndarray   # jump times t_0 < t_1 < ...
    a: float

    def value_at(self, t):
        i = int(np.searchsorted(self.times, t, side="right"))
        return int(self.values[i])

    def events(self):
        return list(zip(self.times.tolist(), self.values[:-1].tolist(), self.values[1:].tolist()))


def build_ptilde(path, a, rng=None, deterministic=False, exps=None):
    """Holding time at P(n) is E_n / (2 P(n)^(a-1)); one event per step before absorption."""
    vals = np.asarray(getattr(path, "values", path), dtype=np.int64)
    n = vals.size - 1
    if exps is None:
        exps = np.ones(n) if deterministic else rng.standard_exponential(n)
    hold = np.asarray(exps[:n], float) / (2.0 * vals[:n].astype(float) ** (a - 1))
    return ContinuousTimePerimeter(vals, np.cumsum(hold), a)


@dataclass
class ReversedDrivers:
    """Stored in forward exploration order; replayed backwards from any time T."""
    values: np.ndarray
    times: np.ndarray
    v: np.ndarray
    a: float
    E: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        self.v = np.asarray(self.v, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=float)
        self.E = _offsets(self.values, self.v)

    @property
    def z(self):
        return self.values[1:] / self.values[:-1]

    @property
    def U(self):
        P1 = np.maximum(self.values[1:], 1)
        return np.mod(self.E[1:] + self.v / (2.0 * P1), 1.0)

    def level(self, T):
        """Number of steps with jump time <= T."""
        return int(np.searchsorted(self.times, T, side="right"))

    def grid(self, T):
        L = self.level(T)
        P = int(self.values[L])
        return self.E[L] + np.arange(2 * P) / (2.0 * P) if P > 0 else np.empty(0)


def sample_drivers(nu, ell, T, rng, deterministic=False):
    vals, times, v, exps = _simulate(nu.tables, float(nu.neg_a), int(ell), float(T), rng, deterministic)
    return ReversedDrivers(vals, times, v, float(nu.neg_a))


def drivers_from_path(path, a, rng, exps=None, deterministic=False):
    pt = build_ptilde(path, a, rng, deterministic, exps)
    vals = pt.values
    v = np.floor(rng.random(vals.size - 1) * 2 * vals[1:]).astype(np.int64)
    return ReversedDrivers(vals, pt.times, v, a)


# ---------------------------------------------------------------------------

@njit(cache=True)
def _replay(vals, v, E, L, idx, pos, record):
    d = idx.shape[0]
    ne = 0
    for k in range(L):
        if vals[k + 1] != vals[k]:
            ne += 1
    hk = np.empty(ne if record else 0, dtype=np.int64)
    hidx = np.empty((ne if record else 0, d), dtype=np.int64)
    hpos = np.empty((ne if record else 0, d))
    e = 0
    for k in range(L - 1, -1, -1):
        P0 = vals[k]
        P1 = vals[k + 1]
        dP = P1 - P0
        if dP == 0:
            continue
        n1 = 2 * P1
        n0 = 2 * P0
        half = _half_max(float(P0), float(P1))
        for i in range(d):
            j = (idx[i] - v[k]) % n1
            if dP > 0:
                new = 0 if j <= 2 * dP else j - 2 * dP
            else:
                new = j
            pos[i] = pos[i] - j / n1 + half + new / n0
            idx[i] = new
        if record:
            hk[e] = k
            hidx[e] = idx
            hpos[e] = pos
        e += 1
    return hk, hidx, hpos


@dataclass
class FlowState:
    T: float
    starts: np.ndarray
    event_steps: np.ndarray   # forward step index of each replayed event
    flow_times: np.ndarray    # T - t_k
    perimeters: np.ndarray    # perimeter after each replayed event (P(k))
    indices: np.ndarray       # (events, trajectories)
    positions: np.ndarray
    merges: list              # (flow time, survivor, absorbed)
    start_positions: np.ndarray
    start_perimeter: int

    def final_indices(self):
        return self.indices[-1] if len(self.indices) else self.starts

    def position_at(self, s):
        """Embedded positions at flow time s (piecewise constant, right-continuous)."""
        i = int(np.searchsorted(self.flow_times, s, side="right"))
        if i == 0:
            return self.start_positions.copy()
        return self.positions[i - 1]


def _start_indices(drivers, L, starts, tol=1e-9):
    P = int(drivers.values[L])
    if P <= 0:
        raise StartOffGrid("boundary is empty at the requested time")
    n = 2 * P
    idx, pos = [], []
    for s in starts:
        if isinstance(s, (int, np.integer)):
            i = int(s)
            if not 0 <= i < n:
                raise StartOffGrid(f"index {i} outside [0, {n})")
            idx.append(i)
            pos.append(drivers.E[L] + i / n)
        else:
            x = float(s)
            r = (x - drivers.E[L]) * n
            i = int(round(r))
            if abs(r - i) > tol * n:
                raise StartOffGrid(f"position {x} not on the time-T grid")
            idx.append(i % n)
            pos.append(x)
    return np.array(idx, dtype=np.int64), np.array(pos, dtype=float)


def snap_to_grid(drivers, T, x):
    """Grid point of the time-T boundary closest to x (same lift as x)."""
    L = drivers.level(T)
    n = 2 * int(drivers.values[L])
    r = round((x - drivers.E[L]) * n)
    return drivers.E[L] + r / n


def evolve_flow(drivers, starts, T):
    L = drivers.level(T)
    idx, pos = _start_indices(drivers, L, starts)
    start_pos = pos.copy()
    hk, hidx, hpos = _replay(drivers.values, drivers.v, drivers.E, L, idx.copy(), pos, True)
    ftimes = T - drivers.times[hk] if hk.size else np.empty(0)
    perims = drivers.values[hk] if hk.size else np.empty(0, dtype=np.int64)
    merges = []
    cls = list(range(len(idx)))
    for e in range(hk.size):
        seen = {}
        for t in range(len(idx)):
            c = hidx[e, t]
            if c in seen:
                s = seen[c]
                if cls[t] != cls[s]:
                    old = cls[t]
                    merges.append((float(ftimes[e]), cls[s], old))
                    cls = [cls[s] if x == old else x for x in cls]
            else:
                seen[c] = t
    return FlowState(T, idx, hk, ftimes, perims, hidx, hpos, merges, start_pos, int(drivers.values[L]))


def evolve_real(drivers, x0, T):
    """Float-only evolution x <- x + g_discrete(x, z, U, P(k+1)), for cross-checks."""
    L = drivers.level(T)
    x = np.array(x0, dtype=float)
    U = drivers.U
    out = []
    for k in range(L - 1, -1, -1):
        P0, P1 = drivers.values[k], drivers.values[k + 1]
        if P0 == P1:
            continue
        f = np.mod(x - U[k], 1.0)
        f = np.where(f > 1 - CUT_TOL, 0.0, f)  # a grid point rounded just below the cut
        x = x + _g_of_f(f, P1 / P0, P1)
        out.append(x.copy())
    return np.array(out)


def export_point_measure(drivers, T, positive_only=True):
    """Atoms (T - t, z, U) of the reversed drivers on [0, T].

    Only jumps with dP > 0 by default; ``positive_only=False`` keeps all
    nonzero jumps, which is what the limiting Poisson measure charges.
    """
    L = drivers.level(T)
    d = np.diff(drivers.values[:L + 1])
    keep = d > 0 if positive_only else d != 0
    k = np.flatnonzero(keep)
    z = drivers.values[k + 1] / drivers.values[k]
    return np.column_stack([T - drivers.times[k], z, drivers.U[k]]) if k.size else np.empty((0, 3))


# ---------------------------------------------------------------------------
# diagnostics

@njit(cache=True)
def _single_run(T, a, ell, tmax, eps, x0, checkpoints, gen):
    """One replica: finite chain to tmax, then a single trajectory replayed from tmax.

    Returns embedded positions at flow times in ``checkpoints``, the band
    martingale, the band quadratic variation and the band energy.
    """
    vals, times, v, exps = _simulate(T, a, ell, tmax, gen, False)
    E = _offsets(vals, v)
    L = vals.shape[0] - 1
    P = vals[L]
    out = np.full(checkpoints.shape[0], np.nan)
    if P <= 0:
        return out, 0.0, 0.0, 0.0, False
    n = 2 * P
    i = int(round((x0 - E[L]) * n)) % n
    pos = x0 + ((E[L] + i / n) - x0 - round((E[L] + i / n) - x0))
    m = 0.0
    qv = 0.0
    energy = 0.0
    c = 0
    for k in range(L - 1, -1, -1):
        s = tmax - times[k]
        while c < checkpoints.shape[0] and checkpoints[c] < s:
            out[c] = pos
            c += 1
        P0 = vals[k]
        P1 = vals[k + 1]
        dP = P1 - P0
        if dP == 0:
            continue
        n1 = 2 * P1
        n0 = 2 * P0
        half = _half_max(float(P0), float(P1))
        j = (i - v[k]) % n1
        new = (0 if j <= 2 * dP else j - 2 * dP) if dP > 0 else j
        step = -j / n1 + half + new / n0
        z = P1 / P0
        if abs(z - 1.0) <= eps:
            m += step
            qv += (z - 1.0) ** 2
        pos += step
        i = new
    for k in range(L):
        z = vals[k + 1] / vals[k]
        if vals[k + 1] != vals[k] and abs(z - 1.0) <= eps:
            energy += (z - 1.0) ** 2
    while c < checkpoints.shape[0]:
        out[c] = pos
        c += 1
    return out, m, qv, energy, True


def run_replicas(nu, ell, T, eps, x0, checkpoints, seeds):
    cps = np.asarray(checkpoints, dtype=float)
    pos = np.empty((len(seeds), cps.size))
    mart = np.empty(len(seeds))
    qv = np.empty(len(seeds))
    en = np.empty(len(seeds))
    alive = np.empty(len(seeds), dtype=bool)
    a = float(nu.neg_a)
    for r, s in enumerate(seeds):
        gen = s if isinstance(s, np.random.Generator) else np.random.Generator(np.random.Philox(s))
        pos[r], mart[r], qv[r], en[r], alive[r] = _single_run(nu.tables, a, int(ell), float(T), float(eps),
                                                            float(x0), cps, gen)
    return pos, mart, qv, en, alive


def martingale_diagnostic(nu, ell, T, eps, v, seeds):
    """Mean, standard error and quadratic-variation bound of the band martingale."""
    _, m, qv, _, _ = run_replicas(nu, ell, T, eps, v, [T], seeds)
    n = m.size
    return {"mean": float(m.mean()), "stderr": float(m.std(ddof=1) / math.sqrt(n)),
            "var": float(m.var(ddof=1)), "qv_mean": float(qv.mean()), "replicas": n}


def small_jump_energy(nu, ell, T, eps, seeds):
    """E[sum over jumps with |z-1| <= eps of (z-1)^2] on [0, T]; eps = 0 gives 0."""
    if eps <= 0:
        return 0.0, 0.0
    _, _, _, en, _ = run_replicas(nu, ell, T, eps, 0.0, [T], seeds)
    return float(en.mean()), float(en.std(ddof=1) / math.sqrt(en.size))
