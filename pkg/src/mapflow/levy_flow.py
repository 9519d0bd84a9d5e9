"""Continuum objects: the Levy measure, the drift, xi, Lamperti time changes,
pssMp paths, the jump map g and the coalescing flow of pure-jump diffusions."""

import math
from dataclasses import dataclass
from functools import lru_cache

import mpmath as mp
import numpy as np
from numba import njit
from scipy import integrate

from .errors import EvaluationNearPole, TimeBeyondHorizon
from .model import check_exponent

POLE_DELTA = 1e-6
EPS_FLOW = 1e-3
DELTA_XI = 1e-3


def c_a(a):
    return math.pi / math.gamma(a)


def lambda_density(x, a):
    x = np.asarray(x, dtype=float)
    k = math.gamma(a) / math.pi
    out = np.zeros(x.shape)
    lo = (x > 0.5) & (x < 1)
    hi = x > 1
    out[lo] = k * (x[lo] * (1 - x[lo])) ** (-a)
    out[hi] = k * math.cos(a * math.pi) * (x[hi] * (x[hi] - 1)) ** (-a)
    return out if out.ndim else float(out)


def _quad_lower(f, a, y0, y1):
    """int f(y) y^-a (1-y)^-a dy over [y0, y1] with y = 1 - x, split on a log grid."""
    if y1 <= y0:
        return 0.0
    pts = np.geomspace(y0, y1, 12)
    g = lambda y: f(y) * (y * (1 - y)) ** (-a)
    return math.fsum(integrate.quad(g, pts[i], pts[i + 1], epsabs=0, epsrel=1e-13, limit=200)[0]
                     for i in range(pts.size - 1))


def _quad_upper(f, a, y0, m=0):
    """int f(y) y^-a (1+y)^-a dy over [y0, inf) with y = x - 1.

    Beyond y = 1e6 the integrand is replaced by y^(m - 2a), f being ~ y^m there.
    """
    g = lambda y: f(y) * (y * (1 + y)) ** (-a)
    top = max(1e6, 10 * y0)
    pts = np.geomspace(y0, top, 16)
    s = [integrate.quad(g, pts[i], pts[i + 1], epsabs=0, epsrel=1e-13, limit=200)[0] for i in range(pts.size - 1)]
    s.append(top ** (m + 1 - 2 * a) / (2 * a - m - 1))
    return math.fsum(s)


def _band_integral(a, y1, upper):
    """int_0^y1 (z - 1 - log z) y^-a (1 -/+ y)^-a dy with z = 1 + y or 1 - y."""
    sgn = 1.0 if upper else -1.0
    g = lambda y: _yminuslog(sgn * y) * (y * (1 + sgn * y)) ** (-a)
    c = min(1e-10, y1)
    head = c ** (3 - a) / (2 * (3 - a))  # integrand ~ y^(2-a)/2 near 0
    if y1 <= c:
        return head
    pts = np.geomspace(c, y1, 14)
    return head + math.fsum(integrate.quad(g, pts[i], pts[i + 1], epsabs=0, epsrel=1e-12, limit=200)[0]
                            for i in range(pts.size - 1))


class LevyMeasureSampler:
    """lambda restricted to z <= lo or z >= hi; exact Pareto-rejection draws.

    Lower side: y = 1 - z ~ y^-a on [1 - lo, 1/2], accepted w.p. (1-y)^-a 2^-a.
    Upper side: y = z - 1 ~ y^-a on [hi - 1, inf), accepted w.p. (1+y)^-a.
    """

    def __init__(self, a, lo=None, hi=None, eps=None):
        check_exponent(a)
        if eps is not None:
            lo, hi = 1 - eps, 1 + eps
        self.a = a
        self.lo = min(lo, 1.0)
        self.hi = max(hi, 1.0)
        self.k = math.gamma(a) / math.pi
        self.cos = max(math.cos(a * math.pi), 0.0)
        self.ylo = 1 - self.lo  # lower-side proposals start here
        self.yhi = self.hi - 1
        one = lambda y: 1.0
        self.mass_low = self.k * _quad_lower(one, a, max(self.ylo, 0.0), 0.5) if self.ylo < 0.5 else 0.0
        self.mass_up = self.k * self.cos * _quad_upper(one, a, self.yhi) if self.cos > 0 else 0.0

    @property
    def mass(self):
        return self.mass_low + self.mass_up

    @staticmethod
    def _pareto(rng, a, c, d, n):
        u = rng.random(n)
        e = 1 - a
        if math.isinf(d):
            return c * (1 - u) ** (1 / e)
        return (c**e - u * (c**e - d**e)) ** (1 / e)

    def sample(self, n, rng):
        n = int(n)
        out = np.empty(n)
        if n == 0:
            return out
        side = rng.random(n) * self.mass < self.mass_low
        for lower, idx in ((True, np.flatnonzero(side)), (False, np.flatnonzero(~side))):
            todo = idx
            while todo.size:
                m = todo.size
                if lower:
                    y = self._pareto(rng, self.a, self.ylo, 0.5, m)
                    acc = rng.random(m) * 2.0**self.a <= (1 - y) ** (-self.a)
                    z = 1 - y
                else:
                    y = self._pareto(rng, self.a, self.yhi, math.inf, m)
                    acc = rng.random(m) <= (1 + y) ** (-self.a)
                    z = 1 + y
                out[todo[acc]] = z[acc]
                todo = todo[~acc]
        return out


# ---------------------------------------------------------------------------
# drift

def incomplete_beta(x, p, q):
    """B_x(p, q) continued in p through x^p / p * 2F1(p, 1-q; p+1; x)."""
    with mp.workdps(30):
        x, p, q = mp.mpf(x), mp.mpf(p), mp.mpf(q)
        return float(x**p / p * mp.hyp2f1(p, 1 - q, p + 1, x))


def _drift_terms_mp(a):
    a = mp.mpf(a)
    t1 = mp.gamma(3 - a) * mp.rgamma(4 - 2 * a) / (2 * mp.sin(mp.pi * (a - 1)))
    p, q = 1 - a, 3 - a
    B = mp.mpf(0.5) ** p / p * mp.hyp2f1(p, 1 - q, p + 1, mp.mpf(0.5))
    return t1, mp.gamma(a) * B / mp.pi


def drift_terms(a, limit=True, delta=POLE_DELTA):
    """The two summands of the drift; symmetric Richardson limit at the a = 2 pole."""
    check_exponent(a)
    with mp.workdps(30):
        if abs(a - 2) < delta:
            if not limit:
                raise EvaluationNearPole(f"a={a} within {delta} of 2")
            def sym(h):
                lo, hi = _drift_terms_mp(mp.mpf(2) - h), _drift_terms_mp(mp.mpf(2) + h)
                return [(u + v) / 2 for u, v in zip(lo, hi)]
            h = mp.mpf("1e-4")
            A, B = sym(h), sym(h / 2)
            return tuple(float((4 * y - x) / 3) for x, y in zip(A, B))
        return tuple(float(t) for t in _drift_terms_mp(a))


@lru_cache(maxsize=None)
def drift_constant(a, limit=True, delta=POLE_DELTA):
    return math.fsum(drift_terms(a, limit, delta))


def _yminuslog(y):
    """(1+y) - 1 - log(1+y), accurate for small y."""
    y = float(y)
    if abs(y) < 1e-3:
        return y * y / 2 - y**3 / 3 + y**4 / 4 - y**5 / 5
    return y - math.log1p(y)


@lru_cache(maxsize=None)
def truncated_drift(a, lo, hi):
    """Drift of xi once jumps with log z in (log lo, log hi) are dropped.

    The Levy exponent is read as b q + int (x^q - 1 - q (x - 1)) lambda(dx);
    dropping the band moves its first moment into the drift.
    """
    b = drift_constant(a)
    k = math.gamma(a) / math.pi
    cs = max(math.cos(a * math.pi), 0.0)
    lo, hi = max(lo, 0.5), max(hi, 1.0)
    # off band: subtract int (z - 1) lambda
    off_low = -k * _quad_lower(lambda y: y, a, 1 - lo, 0.5) if 1 - lo < 0.5 else 0.0
    off_up = k * cs * _quad_upper(lambda y: y, a, hi - 1, m=1) if cs > 0 and hi < math.inf else 0.0
    # band: subtract int (z - 1 - log z) lambda
    band_low = k * _band_integral(a, min(1 - lo, 0.5), False) if lo < 1 else 0.0
    band_up = k * cs * _band_integral(a, hi - 1, True) if cs > 0 and hi > 1 else 0.0
    return b - (off_low + off_up) - (band_low + band_up)


# ---------------------------------------------------------------------------
# xi, Lamperti, pssMp

@dataclass
class XiPath:
    """xi(t) = drift * t + sum of jumps up to t, on [0, horizon]."""
    times: np.ndarray   # jump times
    jumps: np.ndarray   # log z
    drift: float
    horizon: float

    def __post_init__(self):
        self.cum = np.concatenate([[0.0], np.cumsum(self.jumps)])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        i = np.searchsorted(self.times, t, side="right")
        return self.drift * t + self.cum[i]

    def knots(self):
        """Segment starts (0 and jump times), xi just after each knot."""
        s = np.concatenate([[0.0], self.times])
        return s, self.drift * s + self.cum

    def exp_integral(self, alpha):
        """I(t_k) = int_0^{t_k} exp(-alpha xi) at each knot and at the horizon."""
        s, x = self.knots()
        ends = np.concatenate([s[1:], [self.horizon]])
        seg = _seg_integral(alpha, self.drift, x, ends - s)
        return s, x, np.concatenate([[0.0], np.cumsum(seg)])


def _seg_integral(alpha, b, x0, length):
    """int_0^L exp(-alpha (x0 + b s)) ds."""
    c = alpha * b
    base = np.exp(-alpha * np.asarray(x0))
    L = np.asarray(length, dtype=float)
    if c == 0:
        return base * L
    return base * (-np.expm1(-c * L)) / c


def xi_path(a, delta, T, rng, sampler=None):
    """Compound-Poisson approximation of xi keeping jumps with |log z| > delta."""
    lo, hi = math.exp(-delta), math.exp(delta)
    s = sampler or LevyMeasureSampler(a, lo, hi)
    n = rng.poisson(s.mass * T)
    times = np.sort(rng.random(n) * T)
    jumps = np.log(s.sample(n, rng))
    return XiPath(times, jumps, truncated_drift(a, lo, hi), float(T))


def lamperti_time(path, alpha, t):
    """tau_alpha(t) = inf{r : int_0^r exp(-alpha xi) >= t} (closed form on each segment)."""
    if alpha == 0:
        if t > path.horizon:
            raise TimeBeyondHorizon(f"t={t} beyond horizon {path.horizon}")
        return float(t)
    s, x, I = path.exp_integral(alpha)
    if t > I[-1]:
        raise TimeBeyondHorizon(f"time {t} needs xi beyond its horizon {path.horizon}")
    if t <= 0:
        return 0.0
    k = int(np.searchsorted(I, t, side="left")) - 1
    rem = t - I[k]
    c = alpha * path.drift
    w = rem * math.exp(alpha * x[k])
    if c == 0:
        r = w
    else:
        r = -math.log1p(-w * c) / c
    return float(min(s[k] + r, path.horizon))


def lamperti_integral(path, alpha, r):
    """int_0^r exp(-alpha xi(s)) ds."""
    s, x, I = path.exp_integral(alpha)
    k = int(np.searchsorted(s, r, side="right")) - 1
    return float(I[k] + _seg_integral(alpha, path.drift, x[k], r - s[k]))


@dataclass
class PssmpPath:
    x: float
    alpha: float
    xi: XiPath
    T: float

    def __call__(self, t):
        t = float(t)
        if self.alpha == 0:
            return self.x * math.exp(float(self.xi(t)))
        r = lamperti_time(self.xi, self.alpha, t * self.x**self.alpha)
        return self.x * math.exp(float(self.xi(r)))

    def grid(self, n=201):
        ts = np.linspace(0, self.T, n)
        return ts, np.array([self(t) for t in ts])


def pssmp(x, alpha, a, T, rng, delta=DELTA_XI, max_horizon=1e6):
    """X(t) = x exp(xi(tau_alpha(t x^alpha))) on [0, T]; xi is extended until it covers T."""
    if not x > 0:
        raise ValueError("x must be positive")
    target = T * x**alpha
    sampler = LevyMeasureSampler(a, math.exp(-delta), math.exp(delta))
    H = max(T, 1.0) if alpha == 0 else max(target, 1.0)
    path = xi_path(a, delta, H, rng, sampler)
    while alpha != 0 and path.exp_integral(alpha)[2][-1] < target:
        if H >= max_horizon:
            raise TimeBeyondHorizon("Lamperti clock does not reach T (process absorbed)")
        ext = xi_path(a, delta, H, rng, sampler)
        end = path(H)
        path = XiPath(np.concatenate([path.times, H + ext.times]),
                      np.concatenate([path.jumps, ext.jumps]), path.drift, 2 * H)
        assert abs(path(H) - end) < 1e-9 * max(1.0, abs(end))
        H *= 2
    return PssmpPath(float(x), float(alpha), path, float(T))


# ---------------------------------------------------------------------------
# jump map and flow

def g(x, z, u):
    x, z, u = np.asarray(x, float), np.asarray(z, float), np.asarray(u, float)
    f = np.mod(x - u, 1.0)
    return (np.maximum(f - np.maximum((z - 1) / z, 0.0), 0.0) * z - f
            + 0.5 * (1 - np.minimum(1 / z, z)))


FLOW_EVENT = np.dtype([("t", float), ("z", float), ("u", float)])


def sample_flow_events(a, p_q, eps, T, rng, sampler=None):
    """PPP of intensity 2 c_a p_q dt lambda(dz) du off the band (1-eps, 1+eps) on [0, T]."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    s = sampler or LevyMeasureSampler(a, eps=eps)
    rate = 2 * c_a(a) * p_q * s.mass
    n = rng.poisson(rate * T)
    ev = np.empty(n, dtype=FLOW_EVENT)
    ev["t"] = np.sort(rng.random(n) * T)
    ev["z"] = s.sample(n, rng)
    ev["u"] = rng.random(n)
    return ev


def flow_rate(a, p_q, eps):
    return 2 * c_a(a) * p_q * LevyMeasureSampler(a, eps=eps).mass


@dataclass
class ContinuousFlow:
    starts: np.ndarray
    times: np.ndarray        # event times
    positions: np.ndarray    # (events, trajectories), after each event
    classes: np.ndarray      # (events, trajectories) torus merge class after each event
    merges: list             # (t, survivor, absorbed)

    def at(self, t):
        i = int(np.searchsorted(self.times, t, side="right"))
        return self.starts.copy() if i == 0 else self.positions[i - 1]


def evolve_flow(events, starts, start_times=None):
    """x <- x + g(x, z, u) at each event; merge classes via the coalescence window.

    At an event with z > 1 every x with {x - u} <= (z-1)/z lands on u + g(u, z, u)
    modulo 1, so trajectories in the window share a class from then on.
    ``start_times`` lets trajectories enter the flow at later times.
    """
    x = np.array(starts, dtype=float)
    d = x.size
    st = np.zeros(d) if start_times is None else np.asarray(start_times, dtype=float)
    cls = np.arange(d)
    n = len(events)
    pos = np.empty((n, d))
    hist = np.empty((n, d), dtype=np.int64)
    merges = []
    for e in range(n):
        t, z, u = events["t"][e], events["z"][e], events["u"][e]
        live = st < t
        f = np.mod(x - u, 1.0)
        x = np.where(live, x + g(x, z, u), x)
        if z > 1:
            win = live & (f <= (z - 1) / z)
            ids = np.unique(cls[win])
            if win.any():
                k = np.flatnonzero(win)
                x[k] = x[k[0]] + np.round(x[k] - x[k[0]])  # identical mod 1
            if ids.size > 1:
                keep = ids.min()
                for c in ids[1:]:
                    merges.append((float(t), int(keep), int(c)))
                cls[np.isin(cls, ids)] = keep
        pos[e] = x
        hist[e] = cls
    return ContinuousFlow(np.array(starts, dtype=float), events["t"].copy(), pos, hist, merges)


@njit(cache=True)
def _single_trajectory(ts, zs, us, x0, checkpoints):
    out = np.empty(checkpoints.shape[0])
    x = x0
    c = 0
    for e in range(ts.shape[0]):
        while c < checkpoints.shape[0] and checkpoints[c] < ts[e]:
            out[c] = x
            c += 1
        z, u = zs[e], us[e]
        f = (x - u) - math.floor(x - u)
        w = (z - 1.0) / z if z > 1.0 else 0.0
        x += max(f - w, 0.0) * z - f + 0.5 * (1.0 - min(1.0 / z, z))
    while c < checkpoints.shape[0]:
        out[c] = x
        c += 1
    return out


def flow_marginals(a, p_q, eps, T, x0, checkpoints, seeds):
    """Position of one trajectory at each checkpoint, one row per seed."""
    s = LevyMeasureSampler(a, eps=eps)
    cps = np.asarray(checkpoints, dtype=float)
    out = np.empty((len(seeds), cps.size))
    for r, seed in enumerate(seeds):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
        ev = sample_flow_events(a, p_q, eps, T, rng, s)
        out[r] = _single_trajectory(ev["t"], ev["z"], ev["u"], float(x0), cps)
    return out
