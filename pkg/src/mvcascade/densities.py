"""Initial-condition densities on the half-line (0, inf).

Each preset exposes pdf/cdf/ppf plus the constants the model checks rely on:
the sup bound, the mean, and the boundary-decay triple (beta, c1, x_star)
meaning ``pdf(x) <= c1 * x**beta`` on ``(0, x_star]``. ``beta`` is ``None``
when the density does not vanish at the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

EPS_MACHINE = float(np.finfo(float).eps)


class InitialDensity:
    """Base interface; ``beta``, ``c1`` and ``x_star`` come from subclasses."""

    kind = "abstract"

    def pdf(self, x):
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def ppf(self, q):
        raise NotImplementedError

    @property
    def sup(self) -> float:
        raise NotImplementedError

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def upper(self) -> float:
        """Right end of the support (finite proxy for unbounded tails)."""
        raise NotImplementedError

    def breakpoints(self) -> list[float]:
        """Points where the pdf is not smooth; used to split quadrature."""
        return []

    def total_mass(self) -> float:
        pts = sorted({0.0, *self.breakpoints(), self.upper})
        total = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            if b > a:
                val, _ = integrate.quad(lambda x: float(self.pdf(x)), a, b, limit=200,
                                        epsabs=1e-14, epsrel=1e-13)
                total += val
        return total

    def mass_between(self, a, b):
        return self.cdf(b) - self.cdf(a)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Uniform(InitialDensity):
    a: float
    b: float
    kind: str = field(default="uniform", init=False)

    def __post_init__(self):
        if not (0.0 <= self.a < self.b):
            raise ValueError(f"uniform density needs 0 <= a < b, got [{self.a}, {self.b}]")

    @property
    def height(self) -> float:
        return 1.0 / (self.b - self.a)

    @property
    def beta(self):
        # vanishes identically on (0, a) when a > 0
        return 1.0 if self.a > 0 else None

    @property
    def c1(self):
        return self.height / self.a if self.a > 0 else None

    @property
    def x_star(self):
        return self.a if self.a > 0 else None

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.a) & (x <= self.b) & (x > 0), self.height, 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.clip((x - self.a) * self.height, 0.0, 1.0)

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        return self.a + q * (self.b - self.a)

    @property
    def sup(self):
        return self.height

    @property
    def mean(self):
        return 0.5 * (self.a + self.b)

    @property
    def upper(self):
        return self.b

    def breakpoints(self):
        return [self.a, self.b]

    def to_dict(self):
        return {"kind": "uniform", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class PowerRamp(InitialDensity):
    """Density (beta+1) x^beta / cap^(beta+1) on (0, cap]."""

    beta: float
    cap: float
    kind: str = field(default="power", init=False)

    def __post_init__(self):
        if self.beta <= 0 or self.cap <= 0:
            raise ValueError("power ramp needs beta > 0 and cap > 0")

    @property
    def c1(self):
        return (self.beta + 1.0) / self.cap ** (self.beta + 1.0)

    @property
    def x_star(self):
        return self.cap

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x > 0) & (x <= self.cap)
        return np.where(inside, self.c1 * np.abs(x) ** self.beta, 0.0)

    def cdf(self, x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, self.cap)
        return (x / self.cap) ** (self.beta + 1.0)

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        return self.cap * q ** (1.0 / (self.beta + 1.0))

    @property
    def sup(self):
        return (self.beta + 1.0) / self.cap

    @property
    def mean(self):
        return self.cap * (self.beta + 1.0) / (self.beta + 2.0)

    @property
    def upper(self):
        return self.cap

    def breakpoints(self):
        return [self.cap]

    def to_dict(self):
        return {"kind": "power", "beta": self.beta, "cap": self.cap}


@dataclass(frozen=True)
class ShiftedGamma(InitialDensity):
    """shift + Gamma(shape, scale); boundary exponent shape - 1 when unshifted."""

    shape: float
    scale: float
    shift: float = 0.0
    kind: str = field(default="gamma", init=False)

    def __post_init__(self):
        if self.shape < 1.0 or self.scale <= 0 or self.shift < 0:
            raise ValueError("gamma density needs shape >= 1, scale > 0, shift >= 0")

    @property
    def beta(self):
        if self.shift > 0:
            return 1.0
        return self.shape - 1.0 if self.shape > 1.0 else None

    @property
    def c1(self):
        if self.beta is None:
            return None
        if self.shift > 0:
            return self.sup / self.shift
        return 1.0 / (math.gamma(self.shape) * self.scale ** self.shape)

    @property
    def x_star(self):
        if self.beta is None:
            return None
        return self.shift if self.shift > 0 else self.scale

    def pdf(self, x):
        y = (np.asarray(x, dtype=float) - self.shift) / self.scale
        out = np.zeros_like(y)
        pos = y > 0
        k = self.shape
        out[pos] = np.exp((k - 1) * np.log(y[pos]) - y[pos] - special.gammaln(k)) / self.scale
        return out

    def cdf(self, x):
        y = np.maximum((np.asarray(x, dtype=float) - self.shift) / self.scale, 0.0)
        return special.gammainc(self.shape, y)

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        return self.shift + self.scale * special.gammaincinv(self.shape, q)

    @property
    def sup(self):
        if self.shape == 1.0:
            return 1.0 / self.scale
        return float(self.pdf(np.array([self.shift + (self.shape - 1.0) * self.scale]))[0])

    @property
    def mean(self):
        return self.shift + self.shape * self.scale

    @property
    def upper(self):
        return float(self.ppf(1.0 - 1e-13))

    def breakpoints(self):
        return [self.shift, self.shift + (self.shape - 1.0) * self.scale]

    def to_dict(self):
        return {"kind": "gamma", "shape": self.shape, "scale": self.scale, "shift": self.shift}


@dataclass(frozen=True)
class PiecewiseConstant(InitialDensity):
    """Histogram density: ``values[i]`` on ``[edges[i], edges[i+1])``."""

    edges: tuple
    values: tuple
    kind: str = field(default="piecewise", init=False)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if e.ndim != 1 or len(e) != len(v) + 1:
            raise ValueError("piecewise density needs len(edges) == len(values) + 1")
        if e[0] < 0 or np.any(np.diff(e) <= 0):
            raise ValueError("piecewise edges must be non-negative and strictly increasing")
        if np.any(v < 0):
            raise ValueError("piecewise values must be non-negative")
        object.__setattr__(self, "edges", tuple(float(x) for x in e))
        object.__setattr__(self, "values", tuple(float(x) for x in v))

    @classmethod
    def normalized(cls, edges, values):
        e = np.asarray(edges, dtype=float)
        v = np.asarray(values, dtype=float)
        mass = float(np.sum(v * np.diff(e)))
        return cls(tuple(e), tuple(v / mass))

    @property
    def _first_positive(self) -> float:
        for x0, val in zip(self.edges, self.values):
            if val > 0:
                return x0
        return self.edges[-1]

    @property
    def beta(self):
        return 1.0 if self._first_positive > 0 else None

    @property
    def c1(self):
        return self.sup / self._first_positive if self.beta is not None else None

    @property
    def x_star(self):
        return self._first_positive if self.beta is not None else None

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        e = np.asarray(self.edges)
        idx = np.searchsorted(e, x, side="right") - 1
        ok = (idx >= 0) & (idx < len(self.values)) & (x > 0)
        vals = np.asarray(self.values)
        return np.where(ok, vals[np.clip(idx, 0, len(vals) - 1)], 0.0)

    def _cum(self):
        e = np.asarray(self.edges)
        return e, np.concatenate([[0.0], np.cumsum(np.asarray(self.values) * np.diff(e))])

    def cdf(self, x):
        e, cum = self._cum()
        return np.interp(np.asarray(x, dtype=float), e, cum, left=0.0, right=cum[-1])

    def ppf(self, q):
        # keep only edges bounding a positive-mass segment so the inverse is single valued
        e, cum = self._cum()
        rise = np.diff(cum) > 0
        keep = np.concatenate([rise, [False]]) | np.concatenate([[False], rise])
        return np.interp(np.asarray(q, dtype=float) * cum[-1], cum[keep], e[keep])

    @property
    def sup(self):
        return max(self.values)

    @property
    def mean(self):
        e = np.asarray(self.edges)
        v = np.asarray(self.values)
        return float(np.sum(v * 0.5 * (e[1:] ** 2 - e[:-1] ** 2)))

    @property
    def upper(self):
        return self.edges[-1]

    def breakpoints(self):
        return list(self.edges)

    def to_dict(self):
        return {"kind": "piecewise", "edges": list(self.edges), "values": list(self.values)}


def density_from_dict(d: dict) -> InitialDensity:
    kind = d.get("kind")
    if kind == "uniform":
        return Uniform(float(d["a"]), float(d["b"]))
    if kind == "power":
        return PowerRamp(float(d["beta"]), float(d.get("cap", 1.0)))
    if kind == "gamma":
        return ShiftedGamma(float(d["shape"]), float(d["scale"]), float(d.get("shift", 0.0)))
    if kind == "piecewise":
        if d.get("normalize", False):
            return PiecewiseConstant.normalized(d["edges"], d["values"])
        return PiecewiseConstant(tuple(d["edges"]), tuple(d["values"]))
    raise ValueError(f"unknown initial density kind {kind!r}")


def sample_initial(initial: InitialDensity, rng=None, size=None, uniforms=None):
    """Inverse-CDF sampling; a variate of 0 maps to the smallest positive offset.

    Pass ``uniforms`` to invert given variates instead of drawing from ``rng``.
    """
    if uniforms is None:
        if rng is None:
            raise ValueError("need either rng or uniforms")
        uniforms = rng.random(size)
    x = initial.ppf(uniforms)
    x = np.maximum(x, EPS_MACHINE)
    return float(x) if np.ndim(x) == 0 else x


def discretize_initial(initial: InitialDensity, h: float, x_max: float,
                       max_tail: float = 0.01) -> np.ndarray:
    """Cell averages on [0, h), [h, 2h), ..., up to x_max."""
    if h <= 0:
        raise ValueError("grid spacing must be positive")
    n_cells = int(round(x_max / h))
    if n_cells < 1 or abs(n_cells * h - x_max) > 1e-9 * max(1.0, x_max):
        raise ValueError(f"x_max={x_max} is not a multiple of h={h}")
    tail = 1.0 - float(initial.cdf(x_max))
    if tail > max_tail:
        raise ValueError(f"x_max={x_max} too small: truncated tail {tail:.6g}")
    nodes = np.arange(n_cells + 1) * h
    cum = initial.cdf(nodes)
    return np.diff(cum) / h
