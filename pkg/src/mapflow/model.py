"""Step law of the perimeter walk, harmonic functions and criticality checks."""

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit
from scipy import integrate, special

from .errors import DivergentExposure, InvalidExponent, MassDeficitNegative

A_LOW, A_HIGH = 1.5, 2.5
K_HEAD_DEFAULT = 4096
# int64 guard for absurdly deep tail draws (probability below 1e-18 per draw)
K_CLAMP = 2**62


def check_exponent(a):
    if not (A_LOW < a <= A_HIGH):
        raise InvalidExponent(f"exponent a={a} outside (3/2, 5/2]")


@dataclass(frozen=True)
class ModelParams:
    a: float
    p_q: float
    c_q: float = 1.0  # bookkeeping only, cancels in normalized kernels

    def __post_init__(self):
        check_exponent(self.a)
        if not self.p_q > 0:
            raise ValueError("p_q must be positive")
        if not self.c_q > 0:
            raise ValueError("c_q must be positive")

    @property
    def c_a(self):
        return math.pi / math.gamma(self.a)

    @property
    def time_scale(self):
        """Rate 2 c_a p_q linking perimeter clock and Levy time."""
        return 2.0 * self.c_a * self.p_q


# ---------------------------------------------------------------------------
# harmonic functions

@njit(cache=True)
def log_h_down(m):
    """log of C(2m, m) 4^-m for m >= 0 (series for m >= 30)."""
    if m < 30:
        return math.lgamma(2.0 * m + 1.0) - 2.0 * math.lgamma(m + 1.0) - 2.0 * m * math.log(2.0)
    x = float(m)
    ix = 1.0 / x
    ix2 = ix * ix
    corr = ix * (0.125 - ix2 * (1.0 / 192.0 - ix2 * (1.0 / 640.0 - ix2 * 17.0 / 14336.0)))
    return -0.5 * math.log(math.pi * x) - corr


@njit(cache=True)
def log_h_up(m):
    return math.log(2.0 * m) + log_h_down(m)


def h_down(ell):
    if ell < 0:
        raise ValueError("h_down needs ell >= 0")
    return math.exp(log_h_down(int(ell)))


def h_up(ell):
    """2 ell C(2 ell, ell) 4^-ell, extended by zero to ell <= 0."""
    if ell <= 0:
        return 0.0
    if ell < 30:
        return 2.0 * ell * math.comb(2 * ell, ell) / 4.0**ell
    return math.exp(log_h_up(int(ell)))


def h_down_p(ell, p):
    if p < 1:
        raise ValueError("p must be >= 1")
    if ell <= 0:
        return 1.0 if ell == -p else 0.0
    return h_down(ell) * h_down(p) * ell / (ell + p)


_log_h_down_vec = np.vectorize(lambda m: log_h_down(int(m)), otypes=[float])


def h_up_array(m):
    m = np.asarray(m, dtype=np.int64)
    out = np.zeros(m.shape)
    pos = m > 0
    if np.any(pos):
        mp_ = m[pos]
        out[pos] = np.exp(np.log(2.0 * mp_) + _log_h_down_vec(mp_))
    return out


def h_up_continuous(x):
    """Gamma-function extension of h_up to real x >= 1, used for tail integrals."""
    x = np.asarray(x, dtype=float)
    big = x >= 30
    out = np.empty_like(x)
    xs = x[~big]
    out[~big] = 2 * xs * np.exp(special.gammaln(2 * xs + 1) - 2 * special.gammaln(xs + 1) - 2 * xs * math.log(2))
    xb = x[big]
    ix = 1 / xb
    ix2 = ix * ix
    corr = ix * (0.125 - ix2 * (1 / 192 - ix2 * (1 / 640 - ix2 * 17 / 14336)))
    out[big] = 2 * xb * np.exp(-0.5 * np.log(math.pi * xb) - corr)
    return out


# ---------------------------------------------------------------------------
# tail sums

def tail_sum(F, start):
    """sum_{k >= start} F(k) for a smooth, slowly decaying F (Euler-Maclaurin)."""
    start = float(start)
    f = lambda x: float(F(np.array([x]))[0])
    # integrate in log scale so power-law tails are benign
    smax = 690.0 - math.log(start)
    val, _ = integrate.quad(lambda s: f(start * math.exp(s)) * start * math.exp(s), 0.0, smax,
                            limit=500, epsabs=0.0, epsrel=1e-13, points=[1.0, 5.0, 20.0])
    h = max(1e-3 * start, 1e-3)
    d1 = (f(start + h) - f(start - h)) / (2 * h) if start - h > 0 else (f(start + h) - f(start)) / h
    d3 = (f(start + 2 * h) - 2 * f(start + h) + 2 * f(start - h) - f(start - 2 * h)) / (2 * h**3) \
        if start - 2 * h > 0 else 0.0
    return val + 0.5 * f(start) - d1 / 12.0 + d3 / 720.0


# ---------------------------------------------------------------------------
# step law

@dataclass(frozen=True, eq=False)
class StepDistribution:
    """Law nu of a perimeter step: a head table on [-K, K] and power-law tails.

    Negative tail: nu(-k) = neg_p * k**(-neg_a) for k > K.
    Positive tail: nu([k, inf)) = pos_c * k**(-pos_s) for k > K.
    """
    a: float
    p: float
    K: int
    head: np.ndarray = field(repr=False)
    neg_a: float = None
    neg_p: float = None
    pos_c: float = 0.0
    pos_s: float = 1.0
    steep: bool = False

    def __post_init__(self):
        head = np.asarray(self.head, dtype=float)
        if head.shape != (2 * self.K + 1,):
            raise ValueError("head must have length 2K+1")
        if np.any(head < 0):
            raise MassDeficitNegative("negative mass in head")
        object.__setattr__(self, "head", head)
        head.setflags(write=False)
        if self.neg_a is None:
            object.__setattr__(self, "neg_a", self.a)
        if self.neg_p is None:
            object.__setattr__(self, "neg_p", self.p)

    # masses ---------------------------------------------------------------
    @cached_property
    def neg_tail_mass(self):
        if self.neg_p == 0:
            return 0.0
        return float(self.neg_p * special.zeta(self.neg_a, self.K + 1))

    @cached_property
    def pos_tail_mass(self):
        if self.pos_c == 0:
            return 0.0
        return float(self.pos_c * (self.K + 1.0) ** (-self.pos_s))

    def total_mass(self):
        return math.fsum(self.head) + self.neg_tail_mass + self.pos_tail_mass

    def mass(self, k):
        """nu(k), vectorized over integer k."""
        k = np.asarray(k, dtype=np.int64)
        out = np.zeros(k.shape)
        inside = np.abs(k) <= self.K
        out[inside] = self.head[k[inside] + self.K]
        neg = k < -self.K
        if np.any(neg):
            out[neg] = self.neg_p * (-k[neg].astype(float)) ** (-self.neg_a)
        pos = k > self.K
        if np.any(pos) and self.pos_c > 0:
            kk = k[pos].astype(float)
            out[pos] = self.pos_c * kk ** (-self.pos_s) * -np.expm1(-self.pos_s * np.log1p(1 / kk))
        return out

    def pos_tail_continuous(self, x):
        """Smooth extension of nu(k) for k > K (used by tail sums)."""
        x = np.asarray(x, dtype=float)
        return self.pos_c * x ** (-self.pos_s) * -np.expm1(-self.pos_s * np.log1p(1 / x))

    def neg_tail_continuous(self, x):
        return self.neg_p * np.asarray(x, dtype=float) ** (-self.neg_a)

    @cached_property
    def neg_is_powerlaw(self):
        """True when nu(-m) = neg_p m^-neg_a for every m >= 1."""
        m = np.arange(1, self.K + 1)
        return bool(np.array_equal(self.head[self.K - m], self.neg_p * m.astype(float) ** (-self.neg_a)))

    def support_bounds(self):
        lo = -np.inf if self.neg_p > 0 else -self.K
        hi = np.inf if self.pos_c > 0 else self.K
        return lo, hi

    # sampling tables -------------------------------------------------------
    @cached_property
    def tables(self):
        """Flat tuple consumed by the compiled samplers."""
        K = self.K
        ks = np.arange(-K, K + 1, dtype=np.int64)
        order = np.argsort(-self.head, kind="stable")
        keep = self.head[order] > 0
        head_k = ks[order][keep]
        head_cdf = np.cumsum(self.head[order][keep])
        # tilted positive part nu(k) sqrt(k)
        kp = np.arange(1, K + 1, dtype=np.int64)
        tw = self.head[K + 1:] * np.sqrt(kp)
        torder = np.argsort(-tw, kind="stable")
        tkeep = tw[torder] > 0
        tilt_k = kp[torder][tkeep]
        tilt_cdf = np.cumsum(tw[torder][tkeep])
        tilt_tail = 0.0
        bound = 0.0
        s = self.pos_s
        if self.pos_c > 0:
            tilt_tail = tail_sum(lambda x: self.pos_tail_continuous(x) * np.sqrt(x), K + 1)
            bound = (self.pos_c * s / ((s - 0.5) * (K + 1.0) ** (s - 0.5))) * (1 + 1.0 / (K + 1)) ** (s + 0.5)
        head_total = float(head_cdf[-1]) if head_cdf.size else 0.0
        tilt_head = float(tilt_cdf[-1]) if tilt_cdf.size else 0.0
        # negative part alone
        kn = -np.arange(1, K + 1, dtype=np.int64)
        nw = self.head[K + kn]
        norder = np.argsort(-nw, kind="stable")
        nkeep = nw[norder] > 0
        neg_k = kn[norder][nkeep]
        neg_cdf = np.cumsum(nw[norder][nkeep])
        neg_head = float(neg_cdf[-1]) if neg_cdf.size else 0.0
        if neg_k.size == 0:
            neg_k = np.array([-1], dtype=np.int64)
            neg_cdf = np.array([0.0])
        return (head_k, head_cdf, head_total, float(self.neg_tail_mass), float(self.pos_tail_mass), int(K),
                float(self.neg_a), float(self.neg_p), float(self.pos_c), float(s),
                tilt_k, tilt_cdf, tilt_head, float(tilt_tail), float(bound),
                neg_k, neg_cdf, neg_head)

    @cached_property
    def tilt_total(self):
        t = self.tables
        return t[12] + t[13]

    # file format -----------------------------------------------------------
    def to_text(self):
        lines = [f"{k}\t{m:.17g}" for k, m in zip(range(-self.K, self.K + 1), self.head)]
        lines.append(f"negtail {self.neg_a:.17g} {self.neg_p:.17g} {self.K}")
        pos = f"postail {self.a:.17g} {self.p:.17g} {self.K}"
        if self.steep:
            pos += " steep"
        elif self.pos_c == 0 and _pos_tail_constant(self.a, self.p, False)[0] != 0:
            pos += " none"
        lines.append(pos)
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def _pos_tail_constant(a, p, steep):
    """(constant, survival exponent) of the positive tail."""
    if abs(a - 2.5) < 1e-12 and steep:
        return p / a, a
    c = p * math.cos(a * math.pi) / (a - 1)
    if abs(c) < 1e-15:
        c = 0.0
    return c, a - 1


def from_text(text):
    head = {}
    neg = pos = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "negtail":
            neg = (float(parts[1]), float(parts[2]), int(parts[3]))
        elif parts[0] == "postail":
            pos = (float(parts[1]), float(parts[2]), int(parts[3]), parts[4] if len(parts) > 4 else "")
        else:
            head[int(parts[0])] = float(parts[1])
    if neg is None or pos is None:
        raise ValueError("missing negtail/postail footer")
    K = neg[2]
    arr = np.zeros(2 * K + 1)
    for k, m in head.items():
        if abs(k) > K:
            raise ValueError(f"head entry {k} beyond K_head={K}")
        arr[k + K] = m
    a, p, _, flag = pos
    if flag == "none":
        c, s = 0.0, a - 1
    else:
        c, s = _pos_tail_constant(a, p, flag == "steep")
    return StepDistribution(a=a, p=p, K=K, head=arr, neg_a=neg[0], neg_p=neg[1], pos_c=c, pos_s=s,
                            steep=flag == "steep")


def load_nu(path):
    with open(path) as fh:
        return from_text(fh.read())


def centering_shift(a, p, c, s):
    """Mass to add at k=+1 so that the (principal value) mean step vanishes."""
    if a < 2:
        return 0.0
    if abs(a - 2) < 1e-12:
        if s != 1.0 or abs(c - p) > 1e-12 * p:
            raise ValueError("principal-value mean diverges for unbalanced tails at a=2")
        return c
    pos_mean = c * float(special.zeta(s)) if c > 0 else 0.0
    return p * float(special.zeta(a - 1)) - pos_mean


def build_asymptotic_nu(a, p, K_head=K_HEAD_DEFAULT, center=True, steep_tail=False):
    """Step law with exact power-law tails and the deficit put at k=0.

    For a >= 2 and ``center`` the mean step (principal value at a=2) is
    cancelled by extra mass at k=+1, which removes the leading 1/ell
    defect in h_up-harmonicity.
    """
    check_exponent(a)
    if not p > 0:
        raise ValueError("tail constant must be positive")
    K = int(K_head)
    c, s = _pos_tail_constant(a, p, steep_tail)
    m = np.arange(1, K + 1, dtype=float)
    head = np.zeros(2 * K + 1)
    head[K - np.arange(1, K + 1)] = p * m ** (-a)
    if c > 0:
        head[K + 1:] = c * m ** (-s) * -np.expm1(-s * np.log1p(1 / m))
    shift = centering_shift(a, p, c, s) if center else 0.0
    if shift > 0:
        head[K + 1] += shift
    elif shift < 0:
        head[K - 1] -= shift
    zero = 1.0 - (p * float(special.zeta(a)) + c + abs(shift))
    if zero < 0:
        raise MassDeficitNegative(f"tail constant p={p} too large: nu(0)={zero:.3g}")
    head[K] = zero
    return StepDistribution(a=a, p=p, K=K, head=head, pos_c=c, pos_s=s, steep=steep_tail)


def point_mass_nu(k=0, K=None):
    """Degenerate law used in tests."""
    K = max(abs(k), 1) if K is None else K
    head = np.zeros(2 * K + 1)
    head[k + K] = 1.0
    return StepDistribution(a=2.0, p=0.0, K=K, head=head, neg_p=0.0, pos_c=0.0)


def finite_nu(masses):
    """Finitely supported law from a {k: mass} mapping."""
    K = max(max(abs(k) for k in masses), 1)
    head = np.zeros(2 * K + 1)
    for k, v in masses.items():
        head[k + K] = v
    return StepDistribution(a=2.0, p=0.0, K=K, head=head, neg_p=0.0, pos_c=0.0)


# ---------------------------------------------------------------------------
# diagnostics

def harmonic_sum(nu, ell):
    """sum_k nu(k) h_up(ell + k), tail beyond the head added analytically."""
    K = nu.K
    ks = np.arange(max(-K, 1 - ell), K + 1)
    total = math.fsum(nu.head[ks + K] * h_up_array(ell + ks))
    if nu.pos_c > 0:
        total += tail_sum(lambda x: nu.pos_tail_continuous(x) * h_up_continuous(ell + x), K + 1)
    if nu.neg_p > 0 and ell - 1 > K:
        m = np.arange(K + 1, ell)
        total += math.fsum(nu.neg_tail_continuous(m) * h_up_array(ell - m))
    return total


def criticality_residual(nu, ell_range):
    lo, hi = ell_range
    worst = 0.0
    for ell in range(int(lo), int(hi) + 1):
        worst = max(worst, abs(harmonic_sum(nu, ell) / h_up(ell) - 1.0))
    return worst


def harmonic_projection_nu(positive, K=None):
    """Law with a prescribed nonnegative side, negative side solved from harmonicity.

    ``positive`` maps k >= 0 to masses. The negative masses nu(-1), nu(-2), ...
    are solved one by one from sum_k nu(k) h_up(ell+k) = h_up(ell), ell = 1, 2, ...
    The result is exactly harmonic on ell in [1, K] up to rounding; leftover mass
    is rejected if it goes negative.
    """
    kmax = max(positive)
    K = K or max(kmax, 8)
    head = np.zeros(2 * K + 1)
    for k, v in positive.items():
        head[k + K] = v
    for ell in range(1, K + 2):
        # the unknown nu(-ell+1) multiplies h_up(1) = 1
        acc = 0.0
        for k in range(-(ell - 2) if ell > 1 else 0, K + 1):
            acc += head[k + K] * h_up(ell + k)
        val = h_up(ell) - acc
        if ell == 1:
            if abs(val) > 1e-12:
                raise ValueError("positive side must satisfy sum nu(k) h_up(1+k) = 1")
            continue
        if val < -1e-15:
            raise MassDeficitNegative(f"harmonic projection gives negative mass at k={-(ell - 1)}")
        head[K - (ell - 1)] = max(val, 0.0)
    # attach the k^-5/2 tail the recursion settles into (a finite positive side
    # forces the a = 5/2 regime); it only affects harmonicity for ell > K + 1
    neg_p = head[0] * K**2.5
    return StepDistribution(a=2.5, p=neg_p, K=K, head=head, neg_a=2.5, neg_p=neg_p, pos_c=0.0, pos_s=1.5)


def mean_exposure(nu):
    """e_q = sum_{k>=0} (2k+1) nu(k)."""
    if nu.pos_c > 0 and nu.pos_s <= 1:
        raise DivergentExposure("mean exposure infinite for a <= 2")
    K = nu.K
    k = np.arange(0, K + 1)
    total = math.fsum((2 * k + 1) * nu.head[K:])
    if nu.pos_c > 0:
        total += tail_sum(lambda x: (2 * x + 1) * nu.pos_tail_continuous(x), K + 1)
    return total


# ---------------------------------------------------------------------------
# compiled samplers

@njit(cache=True)
def _scan(keys, cdf, u):
    n = cdf.shape[0]
    lim = min(n, 48)
    for i in range(lim):
        if u < cdf[i]:
            return keys[i]
    if n == lim:
        return keys[n - 1]
    j = np.searchsorted(cdf[lim:], u, side="right") + lim
    if j >= n:
        j = n - 1
    return keys[j]


@njit(cache=True)
def _neg_tail_draw(K, a, gen):
    # discrete k^-a on k > K by rejection from a continuous Pareto on [K+1/2, inf)
    while True:
        x = (K + 0.5) * gen.random() ** (-1.0 / (a - 1.0))
        if x > 4e18:
            return K_CLAMP
        k = math.floor(x + 0.5)
        km = k - 0.5
        cell = km ** (1.0 - a) * -math.expm1((1.0 - a) * math.log1p(1.0 / km)) / (a - 1.0)
        if gen.random() * cell <= k ** (-a):
            return np.int64(k)


@njit(cache=True)
def _pos_tail_draw(K, s, gen):
    x = (K + 1.0) * (1.0 - gen.random()) ** (-1.0 / s)
    if x > 4e18:
        return K_CLAMP
    return np.int64(math.floor(x))


@njit(cache=True)
def sample_nu(T, gen):
    head_k, head_cdf, head_total, neg_mass, pos_mass, K = T[0], T[1], T[2], T[3], T[4], T[5]
    u = gen.random() * (head_total + neg_mass + pos_mass)
    if u < head_total:
        return _scan(head_k, head_cdf, u)
    if u < head_total + neg_mass:
        return -_neg_tail_draw(K, T[6], gen)
    return _pos_tail_draw(K, T[9], gen)


@njit(cache=True)
def sample_tilted(T, gen):
    """k >= 1 with probability proportional to nu(k) sqrt(k)."""
    tilt_k, tilt_cdf, tilt_head, tilt_tail, bound = T[10], T[11], T[12], T[13], T[14]
    K, c, s = T[5], T[8], T[9]
    u = gen.random() * (tilt_head + tilt_tail)
    if u < tilt_head:
        return _scan(tilt_k, tilt_cdf, u)
    q = s - 0.5
    while True:
        x = (K + 1.0) * (1.0 - gen.random()) ** (-1.0 / q)
        if x > 4e18:
            return K_CLAMP
        k = math.floor(x)
        kf = float(k)
        target = c * kf ** (-s) * -math.expm1(-s * math.log1p(1.0 / kf)) * math.sqrt(kf)
        prop = ((K + 1.0) / kf) ** q * -math.expm1(-q * math.log1p(1.0 / kf))
        if gen.random() * bound * prop <= target:
            return np.int64(k)


@njit(cache=True)
def sample_negative(T, gen):
    """k <= -1 with probability proportional to nu(k)."""
    neg_head, neg_tail = T[17], T[3]
    u = gen.random() * (neg_head + neg_tail)
    if u < neg_head:
        return _scan(T[15], T[16], u)
    return -_neg_tail_draw(T[5], T[6], gen)


@njit(cache=True)
def _draw_many(T, gen, n):
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = sample_nu(T, gen)
    return out


def sample_step(nu, rng, size=None):
    """Draw from nu with the caller's numpy Generator."""
    if size is None:
        return int(_draw_many(nu.tables, rng, 1)[0])
    return _draw_many(nu.tables, rng, int(size))
