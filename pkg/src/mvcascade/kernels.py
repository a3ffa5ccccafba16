"""Hot loops with two interchangeable backends.

``MVCASCADE_BACKEND=numba`` (default when numba imports) compiles the loop
versions with ``@njit``; ``MVCASCADE_BACKEND=numpy`` selects vectorized numpy
equivalents. Both implement the same arithmetic; results agree to rounding.

Grid convention: ``row[j]`` is the average density on ``[j h, (j + 1) h)``.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_requested = os.environ.get("MVCASCADE_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"MVCASCADE_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


# ---------------------------------------------------------------------------
# shared helpers


def heat_kernel(sd: float, h: float) -> np.ndarray:
    """Discrete Gaussian weights on offsets j*h, cut at 8 sd and renormalized."""
    if sd <= 0.0:
        return np.ones(1)
    m = int(math.ceil(8.0 * sd / h))
    off = np.arange(-m, m + 1) * h
    k = np.exp(-0.5 * (off / sd) ** 2)
    return k / k.sum()


def _F_scalar(x, code, a, b):
    if code == 0:
        return x
    if code == 1:
        return math.log1p(a * x)
    return a * min(x, b)


def F_vec(x, code, a, b):
    x = np.asarray(x, dtype=float)
    if code == 0:
        return x.copy()
    if code == 1:
        return np.log1p(a * x)
    return a * np.minimum(x, b)


# ---------------------------------------------------------------------------
# numpy backend


def _np_diffuse(X, alive, drift, vol, rho, dB0, z, dt, bridge, ub, crossed):
    """Euler step for alive particles; marks endpoint or bridge crossers."""
    idx = np.flatnonzero(alive)
    x0 = X[idx]
    sq = math.sqrt(1.0 - rho * rho)
    x1 = x0 + drift[idx] * dt + vol[idx] * (rho * dB0 + sq * math.sqrt(dt) * z[idx])
    X[idx] = x1
    hit = x1 <= 0.0
    if bridge:
        var = vol[idx] ** 2 * dt
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            p = np.exp(-2.0 * np.maximum(x0, 0.0) * np.maximum(x1, 0.0) / var)
        hit |= ub[idx] < p
    crossed[:] = False
    crossed[idx[hit]] = True
    return int(hit.sum())


def _np_cascade(X, alive, crossed, U, V, g, I, code, a, b, inv_n, D, dL):
    """Iterated discrete cascade; fills D (mask) and dL, returns rounds."""
    D[:] = crossed | (alive & (X <= 0.0))
    dL[:] = 0.0
    if not D.any():
        return 0
    rounds = 0
    FI = F_vec(I, code, a, b)
    while True:
        dL[:] = inv_n * _ordered_colsum(U, D)
        rounds += 1
        cand = alive & ~D
        if not cand.any():
            break
        f = _ordered_dot(V[cand], dL)
        theta = F_vec(I[cand] + g[cand] * f, code, a, b) - FI[cand]
        new = X[cand] - theta <= 0.0
        if not new.any():
            break
        D[np.flatnonzero(cand)[new]] = True
    return rounds


def _ordered_colsum(U, D):
    # sequential sum in particle order so both backends round identically
    out = np.zeros(U.shape[1])
    for j in np.flatnonzero(D):
        out += U[j]
    return out


def _ordered_dot(V, w):
    # row-wise dot product accumulated over l in order, matching the compiled loop
    out = np.zeros(V.shape[0])
    for l in range(V.shape[1]):
        out += V[:, l] * w[l]
    return out


def _np_apply_cascade(X, alive, D, V, g, I, tau, t, code, a, b, dL):
    """Shift survivors by Theta, mark defaults, advance the Stieltjes sums."""
    f = _ordered_dot(V, dL)
    Inew = I + g * f
    theta = F_vec(Inew, code, a, b) - F_vec(I, code, a, b)
    surv = alive & ~D
    X[surv] -= theta[surv]
    dead = alive & D
    tau[dead] = t
    alive[dead] = False
    I[alive | dead] = Inew[alive | dead]


def _np_remap_shift(row, h, s, out):
    """Exact translation of a piecewise-constant row by s; returns (left, right) loss."""
    N = row.size
    cum = np.concatenate(([0.0], np.cumsum(row) * h))
    total = cum[-1]
    q = math.floor(s / h)
    r = s / h - q
    new = np.zeros(N)
    src = np.arange(N) - q
    ok = (src >= 0) & (src < N)
    new[ok] += (1.0 - r) * row[src[ok]]
    src1 = src - 1
    ok1 = (src1 >= 0) & (src1 < N)
    new[ok1] += r * row[src1[ok1]]
    nodes = np.arange(N + 1) * h
    left = float(np.interp(-s, nodes, cum)) if s < 0 else 0.0
    right = total - float(np.interp(N * h - s, nodes, cum)) if s > 0 else 0.0
    out[:] = new
    return left, right


def _np_convolve(row, k, images, out):
    """Heat-kernel step; returns (absorbed, right outflow) as density sums (times h = mass)."""
    N = row.size
    m = (k.size - 1) // 2
    full = np.convolve(row, k)
    new = full[m:m + N].copy()
    left = full[:m].sum()
    if images and m > 0:
        idx = m - 1 - np.arange(min(m, N))
        refl = full[idx]
        new[:refl.size] -= refl
        left += refl.sum()
    right = full[m + N:].sum()
    np.maximum(new, 0.0, out=new)
    out[:] = new
    return left, right


def _np_cum_mass(row, h, theta):
    """Mass on [0, theta] with linear interpolation inside the cut cell."""
    if theta <= 0.0:
        return 0.0
    N = row.size
    j = int(theta / h)
    if j >= N:
        return float(row.sum() * h)
    return float(row[:j].sum() * h + row[j] * (theta - j * h))


# ---------------------------------------------------------------------------
# numba backend


if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_F(x, code, a, b):
        if code == 0:
            return x
        if code == 1:
            return math.log1p(a * x)
        return a * min(x, b)

    @njit(cache=True)
    def _nb_diffuse(X, alive, drift, vol, rho, dB0, z, dt, bridge, ub, crossed):
        sq = math.sqrt(1.0 - rho * rho)
        sdt = math.sqrt(dt)
        count = 0
        for i in range(X.size):
            crossed[i] = False
            if not alive[i]:
                continue
            x0 = X[i]
            x1 = x0 + drift[i] * dt + vol[i] * (rho * dB0 + sq * sdt * z[i])
            X[i] = x1
            hit = x1 <= 0.0
            if bridge and not hit:
                var = vol[i] * vol[i] * dt
                p = math.exp(-2.0 * max(x0, 0.0) * max(x1, 0.0) / var)
                hit = ub[i] < p
            if hit:
                crossed[i] = True
                count += 1
        return count

    @njit(cache=True)
    def _nb_cascade(X, alive, crossed, U, V, g, I, code, a, b, inv_n, D, dL):
        n, k = U.shape
        any_d = False
        for j in range(n):
            D[j] = crossed[j] or (alive[j] and X[j] <= 0.0)
            any_d = any_d or D[j]
        for l in range(k):
            dL[l] = 0.0
        if not any_d:
            return 0
        rounds = 0
        while True:
            acc = np.zeros(k)
            for j in range(n):
                if D[j]:
                    for l in range(k):
                        acc[l] += U[j, l]
            for l in range(k):
                dL[l] = inv_n * acc[l]
            rounds += 1
            added = False
            cand = False
            for j in range(n):
                if alive[j] and not D[j]:
                    cand = True
                    f = 0.0
                    for l in range(k):
                        f += V[j, l] * dL[l]
                    th = _nb_F(I[j] + g[j] * f, code, a, b) - _nb_F(I[j], code, a, b)
                    if X[j] - th <= 0.0:
                        D[j] = True
                        added = True
            if not cand or not added:
                break
        return rounds

    @njit(cache=True)
    def _nb_apply_cascade(X, alive, D, V, g, I, tau, t, code, a, b, dL):
        n, k = V.shape
        for j in range(n):
            if not alive[j]:
                continue
            f = 0.0
            for l in range(k):
                f += V[j, l] * dL[l]
            inew = I[j] + g[j] * f
            if D[j]:
                tau[j] = t
                alive[j] = False
            else:
                X[j] -= _nb_F(inew, code, a, b) - _nb_F(I[j], code, a, b)
            I[j] = inew

    @njit(cache=True)
    def _nb_remap_shift(row, h, s, out):
        N = row.size
        q = math.floor(s / h)
        r = s / h - q
        qi = int(q)
        total = 0.0
        for j in range(N):
            total += row[j]
        for j in range(N):
            v = 0.0
            i0 = j - qi
            if 0 <= i0 < N:
                v += (1.0 - r) * row[i0]
            i1 = i0 - 1
            if 0 <= i1 < N:
                v += r * row[i1]
            out[j] = v
        left = 0.0
        right = 0.0
        if s < 0:
            left = _nb_cum(row, h, -s)
        if s > 0:
            right = total * h - _nb_cum(row, h, N * h - s)
        return left, right

    @njit(cache=True)
    def _nb_cum(row, h, theta):
        if theta <= 0.0:
            return 0.0
        N = row.size
        j = int(theta / h)
        acc = 0.0
        if j >= N:
            for i in range(N):
                acc += row[i]
            return acc * h
        for i in range(j):
            acc += row[i]
        return acc * h + row[j] * (theta - j * h)

    @njit(cache=True)
    def _nb_convolve(row, k, images, out):
        N = row.size
        K = k.size
        m = (K - 1) // 2
        L = N + K - 1
        full = np.zeros(L)
        for i in range(N):
            ri = row[i]
            if ri == 0.0:
                continue
            for q in range(K):
                full[i + q] += ri * k[q]
        left = 0.0
        for t in range(m):
            left += full[t]
        for i in range(N):
            out[i] = full[i + m]
        if images:
            for i in range(min(m, N)):
                rv = full[m - 1 - i]
                out[i] -= rv
                left += rv
        right = 0.0
        for t in range(m + N, L):
            right += full[t]
        for i in range(N):
            if out[i] < 0.0:
                out[i] = 0.0
        return left, right


# ---------------------------------------------------------------------------
# dispatch


def _pick(name):
    if BACKEND == "numba":
        return globals()["_nb_" + name]
    return globals()["_np_" + name]


diffuse = _pick("diffuse")
cascade_discrete = _pick("cascade")
apply_cascade = _pick("apply_cascade")
remap_shift = _pick("remap_shift")
convolve_heat = _pick("convolve")
cum_mass = _np_cum_mass if BACKEND == "numpy" else _nb_cum  # noqa: F821

NUMPY_IMPLS = {
    "diffuse": _np_diffuse, "cascade_discrete": _np_cascade, "apply_cascade": _np_apply_cascade,
    "remap_shift": _np_remap_shift, "convolve_heat": _np_convolve, "cum_mass": _np_cum_mass,
}
NUMBA_IMPLS = {} if not HAVE_NUMBA else {
    "diffuse": _nb_diffuse, "cascade_discrete": _nb_cascade, "apply_cascade": _nb_apply_cascade,
    "remap_shift": _nb_remap_shift, "convolve_heat": _nb_convolve, "cum_mass": _nb_cum,
}
