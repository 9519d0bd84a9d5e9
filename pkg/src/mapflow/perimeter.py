"""Perimeter chains: infinite map (h_up transform), finite map, map with a target face."""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numba import njit

from .errors import StepCapExceeded
from .model import h_down, h_down_p, h_up, h_up_array, h_up_continuous, log_h_down, log_h_up, \
    sample_negative, sample_nu, sample_tilted, tail_sum

STEP_CAP = 10**8


class Law(str, Enum):
    INFINITE = "inf"
    FINITE = "fin"
    TARGET = "target"


@dataclass
class KernelRow:
    """Normalized transition row: explicit atoms plus the mass of k > k[-1]."""
    k: np.ndarray
    prob: np.ndarray
    tail_prob: float
    norm: float  # sum of unnormalized weights

    def total(self):
        return math.fsum(self.prob) + self.tail_prob

    def get(self, k):
        i = np.searchsorted(self.k, k)
        if i < self.k.size and self.k[i] == k:
            return float(self.prob[i])
        return 0.0


def _finish(ks, w, tail):
    norm = math.fsum(w) + tail
    return KernelRow(k=ks, prob=w / norm, tail_prob=tail / norm, norm=norm)


def kernel_row_infinite(nu, p):
    """Row proportional to nu(k) h_up(p+k) on p+k >= 1."""
    K = nu.K
    lo = 1 - p
    ks = np.arange(lo, K + 1, dtype=np.int64)
    w = nu.mass(ks) * h_up_array(p + ks)
    tail = 0.0
    if nu.pos_c > 0:
        tail = tail_sum(lambda x: nu.pos_tail_continuous(x) * h_up_continuous(p + x), K + 1)
    return _finish(ks, w, tail)


def _log_w_from_nu(nu):
    """log W(l) up to an additive constant, read off the negative side of nu.

    Uses W(l) c^(l+1) ... = nu(-1-l) / 2, so c_q drops out of every ratio.
    """
    return lambda ell: np.log(nu.mass(-1 - np.asarray(ell, dtype=np.int64)))


def _finite_weights(nu, p, ks, log_w=None, c_q=1.0):
    m = p + ks
    ok = (2 * m >= p - 1) & (m >= 0)
    w = np.zeros(ks.shape)
    kk, mm = ks[ok], m[ok]
    if log_w is None:
        ratio = nu.mass(-1 - mm) / nu.mass(np.array([-1 - p]))[0]
    else:
        ratio = np.exp(log_w(mm) - log_w(np.array([p]))[0] - kk * math.log(c_q))
    w[ok] = nu.mass(kk) * ratio * np.where(2 * mm == p - 1, 0.5, 1.0)
    return w


def kernel_row_finite(nu, p, log_w=None, c_q=1.0):
    """Row proportional to nu(k) c^-k W(p+k)/W(p) (1{p+k>(p-1)/2} + 1/2 1{p+k=(p-1)/2}).

    ``log_w`` lets a caller inject exact partition functions (with their c_q);
    by default W is derived from the negative side of nu.
    """
    K = nu.K
    lo = -p
    ks = np.arange(lo, K + 1, dtype=np.int64)
    w = _finite_weights(nu, p, ks, log_w, c_q)
    tail = 0.0
    if nu.pos_c > 0:
        if log_w is None:
            base = nu.mass(np.array([-1 - p]))[0]
            F = lambda x: nu.pos_tail_continuous(x) * nu.neg_tail_continuous(1 + p + x) / base
        else:
            lw0 = log_w(np.array([p]))[0]
            F = lambda x: nu.pos_tail_continuous(x) * np.exp(
                log_w(np.floor(p + x)) - lw0 - x * math.log(c_q))
        tail = tail_sum(F, K + 1)
    return _finish(ks, w, tail)


def _h_down_p_continuous(m, pt):
    m = np.asarray(m, dtype=float)
    return h_up_continuous(m) / (2 * m) * h_down(pt) * m / (m + pt)


def kernel_row_target(nu, p, ptarget):
    """Row proportional to nu(k) h_down_pt(p+k), including the death jump to -ptarget."""
    K = nu.K
    ks = np.concatenate([[-p - ptarget], np.arange(1 - p, K + 1)]).astype(np.int64)
    hv = np.array([h_down_p(int(p + k), ptarget) for k in ks])
    w = nu.mass(ks) * hv
    tail = 0.0
    if nu.pos_c > 0:
        tail = tail_sum(lambda x: nu.pos_tail_continuous(x) * _h_down_p_continuous(p + x, ptarget), K + 1)
    return _finish(ks, w, tail)


# ---------------------------------------------------------------------------
# compiled steps

@njit(cache=True)
def infinite_step(T, p, gen):
    """One step of the h_up transform by rejection from nu + tilted nu."""
    pf = float(p)
    cp = math.sqrt(1.0 + 0.5 / pf)
    mix = (T[12] + T[13]) / math.sqrt(pf)
    lhp = log_h_up(p)
    while True:
        if gen.random() * (1.0 + mix) < 1.0:
            k = sample_nu(T, gen)
        else:
            k = sample_tilted(T, gen)
        m = p + k
        if m <= 0:
            continue
        w = math.exp(log_h_up(m) - lhp)
        env = cp * (1.0 + math.sqrt(max(k, 0) / pf))
        if gen.random() * env <= w:
            return k


@njit(cache=True)
def finite_step(T, p, a, gen):
    """One step of the finite-map chain for a law whose negative side is m^-a."""
    # proposal nu + (cap-1) nu|_{k<0}; the envelope nu(k) (1 + (cap-1) 1{k<0})
    # dominates nu(k) ((p+1)/(p+k+1))^a on p+k >= (p-1)/2
    cap = 2.0**a
    extra = (cap - 1.0) * (T[17] + T[3])
    total = T[2] + T[3] + T[4]
    while True:
        if gen.random() * (total + extra) < total:
            k = sample_nu(T, gen)
        else:
            k = sample_negative(T, gen)
        m = p + k
        if m < 0 or 2 * m < p - 1:
            continue
        w = ((p + 1.0) / (m + 1.0)) ** a
        if 2 * m == p - 1:
            w *= 0.5
        env = cap if k < 0 else 1.0
        if gen.random() * env <= w:
            return k


@njit(cache=True)
def _infinite_path(T, start, horizon, gen):
    out = np.empty(horizon + 1, dtype=np.int64)
    out[0] = start
    p = start
    for n in range(horizon):
        p += infinite_step(T, p, gen)
        out[n + 1] = p
    return out


@njit(cache=True)
def _finite_path(T, a, start, horizon, cap, gen):
    size = min(horizon, 1024) + 1
    out = np.empty(size, dtype=np.int64)
    out[0] = start
    p = start
    n = 0
    while n < horizon and p > 0:
        if n >= cap:
            return out[:n + 1], True
        p += finite_step(T, p, a, gen)
        n += 1
        if n >= out.shape[0]:
            new = np.empty(2 * out.shape[0], dtype=np.int64)
            new[:out.shape[0]] = out
            out = new
        out[n] = p
    return out[:n + 1], False


# ---------------------------------------------------------------------------
# generic sampler over explicit rows (arbitrary nu, injected W, target law)

class _RowSampler:
    def __init__(self, nu, law, ptarget=None, log_w=None, c_q=1.0):
        self.nu, self.law, self.pt, self.log_w, self.c_q = nu, law, ptarget, log_w, c_q
        self.cache = {}

    def _row(self, p):
        row = self.cache.get(p)
        if row is not None:
            return row
        nu, K = self.nu, self.nu.K
        if self.law is Law.TARGET:
            ks = np.concatenate([[-p - self.pt], np.arange(1 - p, K + 1)]).astype(np.int64)
            w = nu.mass(ks) * np.array([h_down_p(int(p + k), self.pt) for k in ks])
            # h_down_pt(m) <= h_down(pt) / (2 sqrt(pi pt)) bounds the tail ratio
            bound = h_down(self.pt) / (2 * math.sqrt(math.pi * self.pt))
        elif self.law is Law.FINITE:
            ks = np.arange(-p, K + 1, dtype=np.int64)
            w = _finite_weights(nu, p, ks, self.log_w, self.c_q)
            # assumes l -> W(l) c^l nonincreasing, true for the derived W
            bound = 1.0
        else:
            raise ValueError("infinite law uses the compiled sampler")
        cdf = np.cumsum(w)
        A = float(cdf[-1])
        tail_env = bound * nu.pos_tail_mass if (bound is not None and nu.pos_c > 0) else 0.0
        row = (ks, cdf, A, bound, tail_env)
        self.cache[p] = row
        return row

    def _tail_weight(self, p, k):
        nu = self.nu
        nk = nu.mass(np.array([k]))[0]
        if self.law is Law.TARGET:
            return nk * h_down_p(p + k, self.pt)
        return _finite_weights(nu, p, np.array([k], dtype=np.int64), self.log_w, self.c_q)[0]

    def step(self, p, rng):
        ks, cdf, A, bound, tail_env = self._row(p)
        while True:
            u = rng.random() * (A + tail_env)
            if u < A:
                return int(ks[min(np.searchsorted(cdf, u, side="right"), ks.size - 1)])
            x = (self.nu.K + 1.0) * (1.0 - rng.random()) ** (-1.0 / self.nu.pos_s)
            k = int(math.floor(x))
            nk = self.nu.mass(np.array([k]))[0]
            if rng.random() * bound * nk <= self._tail_weight(p, k):
                return k


# ---------------------------------------------------------------------------

@dataclass
class PerimeterPath:
    law: Law
    start: int
    values: np.ndarray
    absorbed_at: int = None
    ptarget: int = None

    def __len__(self):
        return self.values.size

    @property
    def steps(self):
        return np.diff(self.values)


def sample_path(law, nu, start, horizon, rng, a=None, ptarget=None, log_w=None, c_q=1.0,
                step_cap=STEP_CAP):
    """Iterate the kernel of ``law`` from ``start`` for at most ``horizon`` steps.

    Finite paths stop at absorption in 0, target paths at the death jump to -ptarget.
    """
    law = Law(law)
    horizon = int(horizon)
    if start < 1:
        raise ValueError("start perimeter must be >= 1")
    if horizon > step_cap and law is not Law.INFINITE:
        horizon_eff = step_cap
    else:
        horizon_eff = horizon
    if law is Law.INFINITE:
        if horizon > step_cap:
            raise StepCapExceeded(f"horizon {horizon} above step cap {step_cap}")
        vals = _infinite_path(nu.tables, int(start), horizon, rng)
        return PerimeterPath(law, int(start), vals)
    if law is Law.FINITE and log_w is None and nu.neg_is_powerlaw and nu.neg_p > 0:
        a = nu.neg_a if a is None else a
        vals, capped = _finite_path(nu.tables, float(a), int(start), horizon_eff, step_cap, rng)
        if capped:
            raise StepCapExceeded(f"no absorption within {step_cap} steps")
        absorbed = int(vals.size - 1) if vals[-1] == 0 else None
        return PerimeterPath(law, int(start), vals, absorbed)
    sampler = _RowSampler(nu, law, ptarget, log_w, c_q)
    vals = [int(start)]
    p = int(start)
    stop = 0 if law is Law.FINITE else -ptarget
    n = 0
    while n < horizon_eff:
        if p == stop:
            break
        p += sampler.step(p, rng)
        vals.append(p)
        n += 1
    if n >= step_cap and p != stop:
        raise StepCapExceeded(f"no absorption within {step_cap} steps")
    vals = np.asarray(vals, dtype=np.int64)
    absorbed = int(vals.size - 1) if vals[-1] == stop else None
    return PerimeterPath(law, int(start), vals, absorbed, ptarget)
