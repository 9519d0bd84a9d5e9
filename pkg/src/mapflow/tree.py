"""Cell systems, geodesic trajectories, nearest common ancestors and tree metrics.

Labels are tuples of positive integers (the empty tuple is the root). Label
w + (i,) names both the i-th largest positive jump of cell w (a face) and the
cell spawned by its i-th largest negative jump.
"""

import heapq
import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import BudgetExceeded, TruncatedAncestor
from .flow_discrete import _offsets
from .levy_flow import LevyMeasureSampler, truncated_drift
from .perimeter import Law, sample_path

MAX_CELLS = 20000
ROOT = ()


def is_prefix(v, w):
    return len(v) <= len(w) and w[:len(v)] == v


def common_prefix(v, w):
    n = 0
    for x, y in zip(v, w):
        if x != y:
            break
        n += 1
    return v[:n]


def _ranks(keys, mask):
    """1-based ranks of the masked entries by decreasing key (ties: earlier first)."""
    idx = np.flatnonzero(mask)
    order = idx[np.argsort(-keys[idx], kind="stable")]
    return {i + 1: int(k) for i, k in enumerate(order)}


# ---------------------------------------------------------------------------
# discrete cell system

@dataclass
class DiscreteCell:
    label: tuple
    start: int
    B: int           # birth step
    D: float         # fpp distance from the root face to the hole boundary
    values: np.ndarray
    exps: np.ndarray
    v: np.ndarray
    E: np.ndarray = field(repr=False)
    T: np.ndarray = field(repr=False)   # fpp clock T_n inside the cell
    pos: dict = field(default_factory=dict)   # rank -> step of positive jump
    neg: dict = field(default_factory=dict)   # rank -> step of negative jump
    expanded: bool = True

    def face_distance(self, rank):
        return self.D + float(self.T[self.pos[rank] + 1])

    def hole_distance(self, rank):
        return self.D + float(self.T[self.neg[rank] + 1])

    def face_size(self, rank):
        k = self.pos[rank]
        return int(self.values[k + 1] - self.values[k])


@dataclass
class DiscreteCellSystem:
    ell: int
    a: float
    depth: int
    cutoff: int
    cells: dict

    def faces(self):
        """All face labels with their dP, largest first."""
        out = []
        for lab, c in self.cells.items():
            for r in c.pos:
                out.append((c.face_size(r), lab + (r,)))
        out.sort(key=lambda t: (-t[0], len(t[1]), t[1]))
        return out

    def face_distance(self, f):
        if f == ROOT:
            return 0.0
        cell = self.cells.get(f[:-1])
        if cell is None:
            raise TruncatedAncestor(f"cell {f[:-1]} not expanded")
        return cell.face_distance(f[-1])


def _discrete_cell(nu, label, start, B, D, rng, a):
    path = sample_path(Law.FINITE, nu, start, 10**9, rng, a=a)
    vals = path.values
    n = vals.size - 1
    exps = rng.standard_exponential(n)
    T = np.zeros(n + 1)
    np.cumsum(exps / (2.0 * vals[:n]), out=T[1:])
    v = np.floor(rng.random(n) * 2 * vals[1:]).astype(np.int64)
    d = np.diff(vals)
    return DiscreteCell(label, int(start), int(B), float(D), vals, exps, v, _offsets(vals, v), T,
                        _ranks(d, d > 0), _ranks(-d, d < 0))


def branch_discrete(nu, ell, depth, cutoff, rng, max_cells=MAX_CELLS, a=None):
    """Branching peeling: children start at perimeter -dP - 1 at each negative jump."""
    a = nu.neg_a if a is None else a
    cutoff = max(1, int(cutoff))
    root = _discrete_cell(nu, ROOT, ell, 0, 0.0, rng, a)
    cells = {ROOT: root}
    queue = [root]
    while queue:
        w = queue.pop(0)
        if len(w.label) >= depth:
            continue
        for r, k in sorted(w.neg.items()):
            m = int(w.values[k] - w.values[k + 1])
            p = m - 1
            if p < cutoff:
                continue
            if len(cells) >= max_cells:
                raise BudgetExceeded(f"more than {max_cells} cells")
            child = _discrete_cell(nu, w.label + (r,), p, w.B + k + 1, w.hole_distance(r), rng, a)
            cells[child.label] = child
            queue.append(child)
    return DiscreteCellSystem(int(ell), float(a), int(depth), cutoff, cells)


def fpp_to_root(system, w, i):
    """(d(f_r, f_wi), d(f_r, boundary of hole wi)); None where the jump does not exist."""
    if w == ROOT and i == 0:
        return 0.0, 0.0
    c = system.cells[w]
    f = c.face_distance(i) if i in c.pos else None
    h = c.hole_distance(i) if i in c.neg else None
    return f, h


@njit(cache=True)
def _dstep(vals, v, k, i):
    P0 = vals[k]
    P1 = vals[k + 1]
    dP = P1 - P0
    if dP == 0:
        return i
    j = (i - v[k]) % (2 * P1)
    if dP > 0:
        return 0 if j <= 2 * dP else j - 2 * dP
    return j


@njit(cache=True)
def _devolve(vals, v, L_from, L_to, i):
    for k in range(L_from - 1, L_to - 1, -1):
        i = _dstep(vals, v, k, i)
    return i


@njit(cache=True)
def _djoint(vals, v, L, ia, ib):
    """Replay both from level L; first step after which they share an index (or -1)."""
    for k in range(L - 1, -1, -1):
        ia = _dstep(vals, v, k, ia)
        ib = _dstep(vals, v, k, ib)
        if ia == ib:
            return k, ia, ib
    return -1, ia, ib


def discrete_entries(system, f):
    """Per ancestor cell (deepest first): (cell label, level, index) where f's geodesic enters."""
    cell = system.cells.get(f[:-1])
    if cell is None:
        raise TruncatedAncestor(f"cell {f[:-1]} not expanded")
    k = cell.pos[f[-1]]
    out = [(cell.label, k, 0)]
    i = _devolve(cell.values, cell.v, k, 0, 0)
    while cell.label != ROOT:
        parent = system.cells[cell.label[:-1]]
        kp = parent.neg[cell.label[-1]]
        m = int(parent.values[kp] - parent.values[kp + 1])
        idx = 2 * int(parent.values[kp]) - 2 * m + 1 + i
        out.append((parent.label, kp, idx))
        i = _devolve(parent.values, parent.v, kp, 0, idx)
        cell = parent
    return out


def nca_discrete(system, f, g):
    """Face where the fpp geodesics of f and g to the root merge (root if they never do)."""
    if f == ROOT or g == ROOT:
        return ROOT
    if f == g:
        return f
    ef = {lab: (L, i) for lab, L, i in discrete_entries(system, f)}
    eg = {lab: (L, i) for lab, L, i in discrete_entries(system, g)}
    common = sorted(set(ef) & set(eg), key=len, reverse=True)
    for lab in common:
        c = system.cells[lab]
        (La, ia), (Lb, ib) = ef[lab], eg[lab]
        if La < Lb:
            (La, ia), (Lb, ib) = (Lb, ib), (La, ia)
        ia = _devolve(c.values, c.v, La, Lb, ia)
        if ia == ib:
            return lab + (_rank_of(c.pos, Lb),)
        k, _, _ = _djoint(c.values, c.v, Lb, ia, ib)
        if k >= 0:
            return lab + (_rank_of(c.pos, k),)
    return ROOT


def _rank_of(ranks, step):
    for r, k in ranks.items():
        if k == step:
            return r
    raise KeyError(step)


def tree_distance_discrete(system, f, g):
    c = nca_discrete(system, f, g)
    hf, hg, hc = system.face_distance(f), system.face_distance(g), system.face_distance(c)
    return (hf - hc) + (hg - hc), c


# ---------------------------------------------------------------------------
# continuous cell system

@dataclass
class ContinuousCell:
    label: tuple
    x0: float
    b: float         # birth time
    bt: float        # Lamperti birth time
    s: np.ndarray    # event times (cell clock, increasing)
    z: np.ndarray
    u: np.ndarray
    Xb: np.ndarray   # cell size just before each event
    tt: np.ndarray   # Lamperti time of each event
    pos: dict = field(default_factory=dict)
    neg: dict = field(default_factory=dict)

    def jump(self, e):
        return float(self.Xb[e] * (self.z[e] - 1))

    def R(self, e):
        z = self.z[e]
        return float(self.u[e] + 0.5 * (1 - min(z, 1 / z)))


@dataclass
class ContinuousCellSystem:
    a: float
    eps: float
    cutoff: float
    depth: int
    cells: dict
    _cache: dict = field(default_factory=dict, repr=False)

    def faces(self, min_size=0.0):
        out = []
        for lab, c in self.cells.items():
            for r, e in c.pos.items():
                d = c.jump(e)
                if d > min_size:
                    out.append((d, lab + (r,)))
        out.sort(key=lambda t: -t[0])
        return out

    def height(self, w):
        """d(root, w) = Lamperti time of the jump (0 for the root)."""
        if w == ROOT:
            return 0.0
        c = self.cells[w[:-1]]
        return float(c.tt[c.pos[w[-1]]])

    def size(self, w):
        if w == ROOT:
            return 1.0
        c = self.cells[w[:-1]]
        return c.jump(c.pos[w[-1]])


def _lamperti_cum(a, x0, s, xi_after, drift, ends):
    """int_0^{s_k} X^(a-2), X = x0 exp(xi), for every knot; xi linear between knots."""
    al = a - 2.0
    L = ends - s
    if al == 0:
        seg = L
    else:
        c = al * drift
        base = np.exp(al * xi_after)
        seg = base * (np.expm1(c * L) / c if c != 0 else L)
    return x0**al * np.concatenate([[0.0], np.cumsum(seg)])


def _continuous_cell(a, label, x0, b, bt, sampler, drift, stop, rng, chunk=1.0, max_time=1e4):
    """Events of one cell until its size falls below ``stop``."""
    ts, zs = [], []
    t0, xi0 = 0.0, 0.0
    while True:
        n = rng.poisson(sampler.mass * chunk)
        t = t0 + np.sort(rng.random(n) * chunk)
        zz = sampler.sample(n, rng)
        ts.append(t)
        zs.append(zz)
        xi_end = xi0 + drift * chunk + np.log(zz).sum()
        run = xi0 + drift * (t - t0) + np.concatenate([[0.0], np.cumsum(np.log(zz))[:-1]])
        low = np.log(stop / x0)
        hit = np.flatnonzero(run + np.log(zz) < low)
        if hit.size or xi_end < low and drift < 0:
            break
        t0 += chunk
        xi0 = xi_end
        if t0 > max_time:
            raise BudgetExceeded("cell did not die within the time cap")
    s = np.concatenate(ts)
    z = np.concatenate(zs)
    u = rng.random(s.size)
    lz = np.log(z)
    before = drift * s + np.concatenate([[0.0], np.cumsum(lz)[:-1]])
    after = before + lz
    Xb = x0 * np.exp(before)
    # Lamperti time at each event: segments [0, s_0], [s_0, s_1], ...
    starts = np.concatenate([[0.0], s[:-1]])
    xi_start = np.concatenate([[0.0], after[:-1]])
    tt = bt + _lamperti_cum(a, x0, starts, xi_start, drift, s)[1:]
    c = ContinuousCell(label, float(x0), float(b), float(bt), s, z, u, Xb, tt)
    c.pos = _ranks(Xb * (z - 1), z > 1)
    c.neg = _ranks(Xb * (1 - z), z < 1)
    return c


def branch_continuous(a, depth, cutoff, rng, eps=1e-3, stop_ratio=0.1, max_cells=MAX_CELLS):
    """Cell system driven by PPP(ds lambda(dz) du) off the band (1-eps, 1+eps).

    Children spawn from negative jumps with |x| >= cutoff (the root starts at 1).
    Each cell is followed until its size drops below stop_ratio * cutoff.
    """
    sampler = LevyMeasureSampler(a, eps=eps)
    drift = truncated_drift(a, 1 - eps, 1 + eps)
    stop = stop_ratio * cutoff
    root = _continuous_cell(a, ROOT, 1.0, 0.0, 0.0, sampler, drift, stop, rng)
    cells = {ROOT: root}
    queue = [root]
    while queue:
        w = queue.pop(0)
        if len(w.label) >= depth:
            continue
        for r, e in sorted(w.neg.items()):
            x = float(w.Xb[e] * (1 - w.z[e]))
            if x < cutoff:
                continue
            if len(cells) >= max_cells:
                raise BudgetExceeded(f"more than {max_cells} cells")
            child = _continuous_cell(a, w.label + (r,), x, w.b + w.s[e], float(w.tt[e]), sampler, drift,
                                     stop, rng)
            cells[child.label] = child
            queue.append(child)
    return ContinuousCellSystem(float(a), float(eps), float(cutoff), int(depth), cells)


@njit(cache=True)
def _cstep(z, u, x):
    f = (x - u) - math.floor(x - u)
    w = (z - 1.0) / z if z > 1.0 else 0.0
    return x + max(f - w, 0.0) * z - f + 0.5 * (1.0 - min(1.0 / z, z))


@njit(cache=True)
def _cevolve(zs, us, x, e_hi, e_lo, band):
    """Process events e_hi-1 down to e_lo (inclusive), skipping |z-1| < band."""
    for e in range(e_hi - 1, e_lo - 1, -1):
        if abs(zs[e] - 1.0) < band:
            continue
        x = _cstep(zs[e], us[e], x)
    return x


@njit(cache=True)
def _torus_close(x, y, tol):
    d = (x - y) - math.floor(x - y)
    return d < tol or 1.0 - d < tol


@njit(cache=True)
def _cjoint(zs, us, xa, xb, e_hi, band, tol):
    for e in range(e_hi - 1, -1, -1):
        if abs(zs[e] - 1.0) < band:
            continue
        xa = _cstep(zs[e], us[e], xa)
        xb = _cstep(zs[e], us[e], xb)
        if _torus_close(xa, xb, tol):
            return e, xa, xb
    return -1, xa, xb


@njit(cache=True)
def _first_big_window(zs, us, Xb, x, e_hi, band, eps):
    """Earliest (in flow time) event before e_hi whose window holds x and whose jump exceeds eps."""
    hit = -1
    for e in range(e_hi - 1, -1, -1):
        z = zs[e]
        if abs(z - 1.0) < band:
            continue
        if hit < 0 and z > 1.0 and Xb[e] * (z - 1.0) > eps:
            f = (x - us[e]) - math.floor(x - us[e])
            if f <= (z - 1.0) / z:
                hit = e
        x = _cstep(z, us[e], x)
    return hit, x


def trajectory_Y(system, w, band=None):
    """Segments of the trajectory attached to face w, deepest cell first.

    Each segment is (cell label, start event index, start position, end position);
    the start is R at the face's jump, then a point of the parent's gap chosen
    affinely from the fractional end position of the previous segment.
    """
    band = system.eps if band is None else band
    key = (w, band)
    if key in system._cache:
        return system._cache[key]
    cell = system.cells[w[:-1]]
    e = cell.pos[w[-1]]
    x = cell.R(e)
    segs = []
    while True:
        end = _cevolve(cell.z, cell.u, x, e, 0, band)
        segs.append((cell.label, e, x, end))
        if cell.label == ROOT:
            break
        parent = system.cells[cell.label[:-1]]
        e = parent.neg[cell.label[-1]]
        gap = 1 - parent.z[e]
        x = parent.R(e) - gap + gap * (end - math.floor(end))
        cell = parent
    system._cache[key] = segs
    return segs


@dataclass
class NCARecord:
    label: tuple
    kind: str          # "label", "limit", "root", "self"
    height: float
    event_z: float = float("nan")
    cell: tuple = None


def nca_continuous(system, v, w, band=None, tol=1e-12):
    """Nearest common ancestor through the per-cell flows, deepest common cell first.

    Coalescence is detected from positions (equal on the torus), independently
    of the window rule; the jump that caused it is reported in ``event_z``.
    For a >= 2 the detected jump approximates a limit of ever smaller jumps.
    """
    if v == ROOT or w == ROOT:
        return NCARecord(ROOT, "root", 0.0)
    if v == w:
        return NCARecord(v, "self", system.height(v))
    band = system.eps if band is None else band
    sv = {lab: (e, x) for lab, e, x, _ in trajectory_Y(system, v, band)}
    sw = {lab: (e, x) for lab, e, x, _ in trajectory_Y(system, w, band)}
    kind = "label" if system.a < 2 else "limit"
    for lab in sorted(set(sv) & set(sw), key=len, reverse=True):
        c = system.cells[lab]
        (ea, xa), (eb, xb) = sv[lab], sw[lab]
        if ea < eb:
            (ea, xa), (eb, xb) = (eb, xb), (ea, xa)
        xa = _cevolve(c.z, c.u, xa, ea, eb, band)
        e = -1
        if ea != eb and _torus_close(xa, xb, tol):
            e = eb
        elif ea == eb and _torus_close(xa, xb, tol):
            e = eb
        else:
            e, _, _ = _cjoint(c.z, c.u, xa, xb, eb, band, tol)
        if e >= 0:
            z = float(c.z[e])
            if z <= 1:
                return NCARecord(lab, "other", float(c.tt[e]), z, lab)
            return NCARecord(lab + (_rank_of(c.pos, e),), kind, float(c.tt[e]), z, lab)
    return NCARecord(ROOT, "root", 0.0)


def tree_distance(system, v, w, band=None):
    """d(v, w) = (h_v - h_c) + (h_w - h_c) with c the nearest common ancestor."""
    rec = nca_continuous(system, v, w, band)
    hv, hw = system.height(v), system.height(w)
    return (hv - rec.height) + (hw - rec.height), rec


def nca_cauchy(system, v, w, band):
    """Change of d(root, c(v, w)) when the flow band is halved (needs band/2 >= system eps)."""
    r1 = nca_continuous(system, v, w, band)
    r2 = nca_continuous(system, v, w, band / 2)
    return r2.height - r1.height, r1, r2


# ---------------------------------------------------------------------------
# shortcuts

@dataclass
class Shortcut:
    cell: tuple
    VL: tuple
    VR: tuple
    length: float


def _side_target(system, w, start_right, eps, band):
    """First eps-significant coalescence of the left/right gap trajectory of cell w."""
    cell = system.cells[w[:-1]]
    e = cell.neg[w[-1]]
    gap = 1 - cell.z[e]
    x = cell.R(e) - (0.0 if start_right else gap)
    while True:
        hit, end = _first_big_window(cell.z, cell.u, cell.Xb, x, e, band, eps)
        if hit >= 0:
            return cell.label + (_rank_of(cell.pos, hit),)
        if cell.label == ROOT:
            return ROOT
        parent = system.cells[cell.label[:-1]]
        e = parent.neg[cell.label[-1]]
        gap = 1 - parent.z[e]
        x = parent.R(e) - gap + gap * (end - math.floor(end))
        cell = parent


def shortcuts(system, eps, band=None):
    band = system.eps if band is None else band
    out = []
    for lab, c in system.cells.items():
        if lab == ROOT:
            continue
        VL = _side_target(system, lab, False, eps, band)
        VR = _side_target(system, lab, True, eps, band)
        L = (c.bt - system.height(VL)) + (c.bt - system.height(VR))
        out.append(Shortcut(lab, VL, VR, L))
    return out


class ShortcutMetric:
    """d_D^eps via shortest paths over shortcut endpoints with tree-distance edges.

    Path lengths are summed exactly (rationals built from the float heights)
    and rounded once, so order relations between distances survive rounding.
    """

    def __init__(self, system, eps, band=None):
        self.system, self.eps = system, eps
        self.band = system.eps if band is None else band
        self.cuts = shortcuts(system, eps, self.band)
        best = {}
        for sc in self.cuts:
            if sc.VL == sc.VR:
                continue
            bt = Fraction(system.cells[sc.cell].bt)
            L = (bt - Fraction(system.height(sc.VL))) + (bt - Fraction(system.height(sc.VR)))
            key = tuple(sorted((sc.VL, sc.VR)))
            best[key] = min(best.get(key, L), L)
        self.edges = best
        self.nodes = sorted({x for k in best for x in k})
        self._td = {}

    def members(self):
        return [ROOT] + [f for d, f in self.system.faces(self.eps)]

    def _td_exact(self, u, v):
        if u == v:
            return Fraction(0)
        key = (u, v) if u < v else (v, u)
        if key not in self._td:
            rec = nca_continuous(self.system, key[0], key[1], self.band)
            hc = Fraction(rec.height)
            self._td[key] = (Fraction(self.system.height(key[0])) - hc) + (Fraction(self.system.height(key[1])) - hc)
        return self._td[key]

    def td(self, u, v):
        return float(self._td_exact(u, v))

    def distance(self, v, w):
        nodes = list(dict.fromkeys([v, w] + self.nodes))
        adj = {}
        for (p, q), L in self.edges.items():
            adj.setdefault(p, []).append((q, L))
            adj.setdefault(q, []).append((p, L))
        dist = {v: Fraction(0)}
        heap = [(Fraction(0), 0, v)]
        seen = set()
        tie = 1
        while heap:
            d, _, x = heapq.heappop(heap)
            if x in seen:
                continue
            seen.add(x)
            if x == w:
                return float(d)
            cand = [(y, self._td_exact(x, y)) for y in nodes if y != x] + adj.get(x, [])
            for y, L in cand:
                nd = d + L
                if y not in dist or nd < dist[y]:
                    dist[y] = nd
                    heapq.heappush(heap, (nd, tie, y))
                    tie += 1
        return float(dist[w]) if w in dist else math.inf
