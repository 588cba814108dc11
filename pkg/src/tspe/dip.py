"""Hartigan's dip statistic and its uniform-bootstrap unimodality test."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError, InsufficientDataError

MIN_SAMPLES = 4
MIN_BOOTSTRAP = 100


@dataclass(frozen=True)
class DipResult:
    dip: float
    p_value: float
    n: int
    bootstrap: int


def _dip_sorted(x: np.ndarray) -> float:
    """Dip of a sorted sample, following Hartigan & Hartigan's AS 217 cycling scheme.

    Arrays are 1-based to keep the index arithmetic of the reference algorithm.
    """
    n = x.size
    if x[0] == x[-1]:
        return 0.0
    x = np.concatenate([[0.0], x]).tolist()
    mn = [0] * (n + 1)
    mj = [0] * (n + 1)

    # convex minorant change points
    mn[1] = 1
    for j in range(2, n + 1):
        mn[j] = j - 1
        while True:
            a = mn[j]
            b = mn[a]
            if a == 1 or (x[j] - x[a]) * (a - b) < (x[a] - x[b]) * (j - a):
                break
            mn[j] = b
    # concave majorant change points
    mj[n] = n
    for k in range(n - 1, 0, -1):
        mj[k] = k + 1
        while True:
            a = mj[k]
            b = mj[a]
            if a == n or (x[k] - x[a]) * (a - b) < (x[a] - x[b]) * (k - a):
                break
            mj[k] = b

    low, high = 1, n
    dip = 1.0
    gcm = [0] * (n + 2)
    lcm = [0] * (n + 2)
    while True:
        gcm[1] = high
        i = 1
        while gcm[i] > low:
            gcm[i + 1] = mn[gcm[i]]
            i += 1
        ig = l_gcm = i
        ix = ig - 1

        lcm[1] = low
        i = 1
        while lcm[i] < high:
            lcm[i + 1] = mj[lcm[i]]
            i += 1
        ih = l_lcm = i
        iv = 2

        d = 0.0
        if l_gcm != 2 or l_lcm != 2:
            while True:
                gx, lv = gcm[ix], lcm[iv]
                if gx > lv:
                    g1 = gcm[ix + 1]
                    dx = (lv - g1 + 1) - (x[lv] - x[g1]) * (gx - g1) / (x[gx] - x[g1])
                    iv += 1
                    if dx >= d:
                        d, ig, ih = dx, ix + 1, iv - 1
                else:
                    l1 = lcm[iv - 1]
                    dx = (x[gx] - x[l1]) * (lv - l1) / (x[lv] - x[l1]) - (gx - l1 - 1)
                    ix -= 1
                    if dx >= d:
                        d, ig, ih = dx, ix + 1, iv
                ix = max(ix, 1)
                iv = min(iv, l_lcm)
                if gcm[ix] == lcm[iv]:
                    break
        else:
            d = 1.0
        if d < dip:
            break

        dip_l = 0.0
        for j in range(ig, l_gcm):
            top = 1.0
            lo_i, hi_i = gcm[j + 1], gcm[j]
            if hi_i - lo_i > 1 and x[hi_i] != x[lo_i]:
                c = (hi_i - lo_i) / (x[hi_i] - x[lo_i])
                for jj in range(lo_i, hi_i + 1):
                    top = max(top, (jj - lo_i + 1) - (x[jj] - x[lo_i]) * c)
            dip_l = max(dip_l, top)
        dip_u = 0.0
        for j in range(ih, l_lcm):
            top = 1.0
            lo_i, hi_i = lcm[j], lcm[j + 1]
            if hi_i - lo_i > 1 and x[hi_i] != x[lo_i]:
                c = (hi_i - lo_i) / (x[hi_i] - x[lo_i])
                for jj in range(lo_i, hi_i + 1):
                    top = max(top, (x[jj] - x[lo_i]) * c - (jj - lo_i - 1))
            dip_u = max(dip_u, top)
        dip = max(dip, dip_l, dip_u)

        if low == gcm[ig] and high == lcm[ih]:
            break
        low, high = gcm[ig], lcm[ih]
    return dip / (2 * n)


def dip_statistic(samples) -> float:
    x = np.asarray(samples, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    if x.size < MIN_SAMPLES:
        raise InsufficientDataError(f"dip needs at least {MIN_SAMPLES} samples, got {x.size}")
    return _dip_sorted(np.sort(x))


@lru_cache(maxsize=32)
def _null_dips(n: int, bootstrap: int, seed: int) -> np.ndarray:
    children = np.random.SeedSequence(seed).spawn(bootstrap)
    return np.array([_dip_sorted(np.sort(np.random.default_rng(c).random(n))) for c in children])


def dip_test(samples, bootstrap: int = 500, seed: int = 0) -> DipResult:
    """Dip with a p-value from ``bootstrap`` uniform samples of the same size.

    Replicate ``i`` draws from its own child of ``SeedSequence(seed)``, so the
    result does not depend on evaluation order.
    """
    if bootstrap < MIN_BOOTSTRAP:
        raise DomainError(f"bootstrap count must be at least {MIN_BOOTSTRAP}")
    x = np.asarray(samples, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    observed = dip_statistic(x)
    null = _null_dips(x.size, int(bootstrap), int(seed))
    return DipResult(observed, float(np.mean(null >= observed)), int(x.size), int(bootstrap))
