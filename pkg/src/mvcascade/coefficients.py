"""Closed preset families for the model coefficients F, g, b, sigma.

Per-atom parameters are stored as tuples; a length-1 tuple broadcasts to
every atom. Evaluation helpers return one value per atom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# integer codes shared with the compiled kernels
F_IDENTITY, F_LOG1P, F_CAPPED = 0, 1, 2
_F_CODES = {"identity": F_IDENTITY, "log1p": F_LOG1P, "capped_linear": F_CAPPED}


def _as_tuple(x) -> tuple:
    if np.ndim(x) == 0:
        return (float(x),)
    return tuple(float(v) for v in x)


def per_atom(values: tuple, n_atoms: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.size == 1:
        return np.full(n_atoms, float(arr[0]))
    if arr.size != n_atoms:
        raise ValueError(f"per-atom parameter has {arr.size} entries, expected {n_atoms}")
    return arr.copy()


@dataclass(frozen=True)
class LossTransform:
    """F(x): identity, log1p(scale*x), or slope*min(x, cap)."""

    kind: str = "identity"
    scale: float = 1.0
    slope: float = 1.0
    cap: float = math.inf

    def __post_init__(self):
        if self.kind not in _F_CODES:
            raise ValueError(f"unknown loss transform {self.kind!r}")

    @property
    def code(self) -> int:
        return _F_CODES[self.kind]

    @property
    def params(self) -> tuple[float, float]:
        """(a, b) pair passed to the compiled kernels."""
        if self.kind == "log1p":
            return self.scale, 0.0
        if self.kind == "capped_linear":
            return self.slope, self.cap
        return 1.0, 0.0

    @property
    def lipschitz(self) -> float:
        if self.kind == "log1p":
            return abs(self.scale)
        if self.kind == "capped_linear":
            return abs(self.slope)
        return 1.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return x.copy() if x.ndim else float(x)
        if self.kind == "log1p":
            out = np.log1p(self.scale * x)
        else:
            out = self.slope * np.minimum(x, self.cap)
        return out if out.ndim else float(out)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "log1p":
            d["scale"] = self.scale
        elif self.kind == "capped_linear":
            d["slope"] = self.slope
            d["cap"] = self.cap
        return d


@dataclass(frozen=True)
class FeedbackWeight:
    """g(u, v, t) = c_atom * psi(t) with psi constant, (T - t)/T, or exp(-rate t)."""

    kind: str = "constant"
    c: tuple = (1.0,)
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear_decay", "exp_decay"):
            raise ValueError(f"unknown feedback weight {self.kind!r}")
        object.__setattr__(self, "c", _as_tuple(self.c))

    def psi(self, t, horizon: float):
        if self.kind == "constant":
            return np.ones_like(np.asarray(t, dtype=float))
        if self.kind == "linear_decay":
            return np.clip((horizon - np.asarray(t, dtype=float)) / horizon, 0.0, None)
        return np.exp(-self.rate * np.asarray(t, dtype=float))

    def values(self, t: float, n_atoms: int, horizon: float) -> np.ndarray:
        return per_atom(self.c, n_atoms) * float(self.psi(t, horizon))

    def to_dict(self):
        d = {"kind": self.kind, "c": list(self.c) if len(self.c) > 1 else self.c[0]}
        if self.kind == "exp_decay":
            d["rate"] = self.rate
        return d


@dataclass(frozen=True)
class AffineInTime:
    """a_atom + slope_atom * t; ``constant`` is the slope-free case."""

    kind: str = "constant"
    a: tuple = (0.0,)
    slope: tuple = (0.0,)

    def __post_init__(self):
        if self.kind not in ("constant", "affine"):
            raise ValueError(f"unknown time profile {self.kind!r}")
        object.__setattr__(self, "a", _as_tuple(self.a))
        object.__setattr__(self, "slope", _as_tuple(self.slope))

    def values(self, t: float, n_atoms: int) -> np.ndarray:
        out = per_atom(self.a, n_atoms)
        if self.kind == "affine":
            out = out + per_atom(self.slope, n_atoms) * t
        return out

    def to_dict(self):
        d = {"kind": self.kind, "a": list(self.a) if len(self.a) > 1 else self.a[0]}
        if self.kind == "affine":
            d["slope"] = list(self.slope) if len(self.slope) > 1 else self.slope[0]
        return d


@dataclass(frozen=True)
class CoefficientSet:
    F: LossTransform = LossTransform()
    g: FeedbackWeight = FeedbackWeight()
    b: AffineInTime = AffineInTime(a=(0.0,))
    sigma: AffineInTime = AffineInTime(a=(1.0,))
    sigma_lower: float = 1e-3
    sigma_upper: float = 1e3
    rho: float = 0.0

    def __post_init__(self):
        # rho in [0, 1) is a constructor-level requirement
        if not (0.0 <= self.rho < 1.0):
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if not (0.0 < self.sigma_lower <= self.sigma_upper):
            raise ValueError("volatility bounds need 0 < lower <= upper")

    def to_dict(self):
        return {
            "rho": self.rho,
            "F": self.F.to_dict(),
            "g": self.g.to_dict(),
            "b": self.b.to_dict(),
            "sigma": {**self.sigma.to_dict(), "lower": self.sigma_lower,
                      "upper": self.sigma_upper},
        }


def coefficients_from_dict(d: dict) -> CoefficientSet:
    Fd = dict(d.get("F", {"kind": "identity"}))
    F = LossTransform(kind=Fd.get("kind", "identity"), scale=float(Fd.get("scale", 1.0)),
                      slope=float(Fd.get("slope", 1.0)), cap=float(Fd.get("cap", math.inf)))
    gd = dict(d.get("g", {}))
    g = FeedbackWeight(kind=gd.get("kind", "constant"), c=gd.get("c", 1.0),
                       rate=float(gd.get("rate", 0.0)))
    bd = dict(d.get("b", {}))
    b = AffineInTime(kind=bd.get("kind", "constant"), a=bd.get("a", 0.0),
                     slope=bd.get("slope", 0.0))
    sd = dict(d.get("sigma", {}))
    sigma = AffineInTime(kind=sd.get("kind", "constant"), a=sd.get("a", 1.0),
                         slope=sd.get("slope", 0.0))
    return CoefficientSet(F=F, g=g, b=b, sigma=sigma,
                          sigma_lower=float(sd.get("lower", 1e-3)),
                          sigma_upper=float(sd.get("upper", 1e3)),
                          rho=float(d.get("rho", 0.0)))
