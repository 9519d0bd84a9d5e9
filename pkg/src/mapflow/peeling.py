"""Uniform peeling skeleton: fpp clocks, hull radii, geodesic marks, reversed events."""

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DivisionAtAbsorption
from .perimeter import infinite_step


@dataclass
class FppClock:
    times: np.ndarray  # T_0 = 0, T_n = sum_{i<n} E_i / (2 P(i))
    exps: np.ndarray

    def __len__(self):
        return self.times.size

    def at(self, n):
        if n >= self.times.size:
            raise DivisionAtAbsorption(f"clock undefined past index {self.times.size - 1}")
        return float(self.times[n])


def fpp_times(path, rng=None, deterministic=False, exps=None):
    """First-passage clock along a perimeter path (positive values only)."""
    vals = np.asarray(getattr(path, "values", path), dtype=np.int64)
    stop = vals.size
    nz = np.flatnonzero(vals <= 0)
    if nz.size:
        stop = int(nz[0]) + 1  # T_n needs P(i) > 0 for i < n only
    n = stop - 1
    if exps is None:
        exps = np.ones(n) if deterministic else rng.standard_exponential(n)
    exps = np.asarray(exps[:n], dtype=float)
    times = np.zeros(stop)
    np.cumsum(exps / (2.0 * vals[:n]), out=times[1:])
    return FppClock(times, exps)


def hull_index(clock, r):
    """Theta(r) = inf{n : T_n >= r}, saturated at the last index."""
    if r < 0:
        raise ValueError("radius must be nonnegative")
    i = int(np.searchsorted(clock.times, r, side="left"))
    return min(i, clock.times.size - 1)


def theta(path, i):
    vals = getattr(path, "values", path)
    d = int(vals[i + 1]) - int(vals[i])
    if d < 0:
        return 0.0
    return (2 * d + 1) / (2 * int(vals[i + 1]))


def thetas(path):
    vals = np.asarray(getattr(path, "values", path), dtype=np.int64)
    d = np.diff(vals)
    out = np.zeros(d.size)
    ok = d >= 0
    out[ok] = (2 * d[ok] + 1) / (2.0 * vals[1:][ok])
    return out


@dataclass
class GeodesicMarks:
    thetas: np.ndarray
    bernoullis: np.ndarray

    def count(self, n=None):
        n = self.bernoullis.size if n is None else n
        return int(self.bernoullis[:n].sum())

    def counts(self):
        return np.concatenate([[0], np.cumsum(self.bernoullis)])


def mark_and_count(path, n=None, rng=None, deterministic=False):
    """Mark step i with probability theta_i; the count is #Faces of the geodesic."""
    th = thetas(path)
    if n is not None:
        th = th[:n]
    if deterministic:
        x = th.copy()
    else:
        x = (rng.random(th.size) < th).astype(np.int64)
    return GeodesicMarks(th, x)


EVENT_DTYPE = np.dtype([("step", np.int64), ("dP", np.int64), ("glue", np.bool_),
                        ("edges", np.int64), ("position", np.int64), ("grid", np.int64)])


def reversed_event_stream(path, rng):
    """One reversed-exploration event per step, listed in forward order.

    Step k with dP >= 0 glues a face onto 2 dP + 1 consecutive edges; with
    dP < 0 it inserts -2 dP edges. Positions are uniform on the 2 P(k+1)
    edges of the boundary the reversed step acts on.
    """
    vals = np.asarray(getattr(path, "values", path), dtype=np.int64)
    d = np.diff(vals)
    n = d.size
    ev = np.zeros(n, dtype=EVENT_DTYPE)
    ev["step"] = np.arange(n)
    ev["dP"] = d
    ev["glue"] = d >= 0
    ev["edges"] = np.where(d >= 0, 2 * d + 1, -2 * d)
    grid = 2 * vals[1:]
    ev["grid"] = grid
    ev["position"] = np.floor(rng.random(n) * np.maximum(grid, 1)).astype(np.int64)
    return ev


@njit(cache=True)
def _face_counts(T, start, checkpoints, gen):
    m = checkpoints.shape[0]
    counts = np.zeros(m, dtype=np.int64)
    sums = np.zeros(m)
    p = start
    c = 0
    s = 0.0
    j = 0
    n = 0
    last = checkpoints[m - 1]
    while True:
        while j < m and checkpoints[j] == n:
            counts[j] = c
            sums[j] = s
            j += 1
        if n >= last:
            break
        k = infinite_step(T, p, gen)
        p += k
        if k >= 0:
            th = (2.0 * k + 1.0) / (2.0 * p)
            s += th
            if gen.random() < th:
                c += 1
        n += 1
    return counts, sums


def geodesic_face_counts(nu, checkpoints, rng, start=1):
    """#Faces(Gamma_n) and sum of theta_i at each n in ``checkpoints`` for one infinite-map path."""
    cp = np.asarray(sorted(int(c) for c in checkpoints), dtype=np.int64)
    return _face_counts(nu.tables, int(start), cp, rng)


def normalization(a, n):
    """Normalization of the face count at exploration step n."""
    n = np.asarray(n, dtype=float)
    if abs(a - 2.0) < 1e-12:
        return np.log(n) ** -2
    if a < 2:
        return 1.0 / np.log(n)
    return n ** (-(a - 2) / (a - 1))


def limit_constant(a):
    """Deterministic limit of the normalized count (None in the dilute regime)."""
    if abs(a - 2.0) < 1e-12:
        return 1.0 / np.pi**2
    if a < 2:
        return 2.0 / (np.pi * np.tan((2 - a) * np.pi))
    return None
