"""Named, versioned analytic families for the datum f and the boundary data g.

A config refers to a family as ``{"family": "profile", "version": 1, "params": {...}}``;
the version may be omitted and defaults to the current one.  Each builder
returns a callable of node coordinates with shape ``(..., n)``.

The ``profile`` family is the one-dimensional exact solution used as an oracle:
for f = c the equation reduces along x_axis to H_eps(u') = c s + k, where
H_eps(t) = sign(t) (|t| - 1)_+^(p-1) + eps t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .errors import InvalidArgument

__all__ = ["ProfileOracle", "build_f", "build_g", "FAMILY_VERSIONS"]


@dataclass(frozen=True)
class ProfileOracle:
    p: float
    c: float
    k: float
    eps: float = 0.0

    def __post_init__(self):
        if not self.p > 1:
            raise InvalidArgument("profile exponent must exceed 1")
        if self.eps < 0:
            raise InvalidArgument("profile eps must be nonnegative")

    def slope_of_level(self, y):
        """Inverse of H_eps: the slope t with H_eps(t) = y."""
        y = np.asarray(y, float)
        if self.p == 2.0:
            e = self.eps
            if e == 0.0:
                return np.where(y >= 0, 1.0 + y, y - 1.0)
            return np.where(np.abs(y) <= e, y / e, np.where(y > 0, (y + 1.0) / (1.0 + e), (y - 1.0) / (1.0 + e)))
        return np.vectorize(self._slope_scalar, otypes=[float])(y)

    def _slope_scalar(self, y: float) -> float:
        q = 1.0 / (self.p - 1.0)
        if self.eps == 0.0:
            return 1.0 + y**q if y >= 0 else -(1.0 + (-y) ** q)
        if y == 0.0:
            return 0.0
        s = 1.0 if y > 0 else -1.0
        a = abs(y)
        # H_eps is increasing; the root lies in [0, 1 + a^q + a/eps]
        hi = 1.0 + a**q + a / self.eps
        fun = lambda t: max(t - 1.0, 0.0) ** (self.p - 1.0) + self.eps * t - a
        return s * brentq(fun, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=500)

    def slope(self, s):
        """u'(s) = slope_of_level(c s + k)."""
        return self.slope_of_level(self.c * np.asarray(s, float) + self.k)

    def _level_antiderivative(self, y):
        y = np.abs(np.asarray(y, float))
        e = self.eps
        if e == 0.0:
            return y + 0.5 * y**2
        inner = 0.5 * y**2 / e
        outer = 0.5 * e + ((y + 1.0) ** 2 - (e + 1.0) ** 2) / (2.0 * (1.0 + e))
        return np.where(y <= e, inner, outer)

    def value(self, s):
        """u(s) = integral from 0 to s of u'."""
        s = np.asarray(s, float)
        if self.c == 0.0:
            return float(self.slope_of_level(self.k)) * s
        if self.p == 2.0:
            return (self._level_antiderivative(self.c * s + self.k) - self._level_antiderivative(self.k)) / self.c
        flat = np.atleast_1d(s).ravel()
        out = np.empty_like(flat)
        for i, si in enumerate(flat):
            out[i] = quad(lambda t: float(self.slope(t)), 0.0, si, limit=200, epsabs=1e-13, epsrel=1e-13, points=self._kinks(si))[0]
        return out.reshape(np.shape(s))

    def _kinks(self, upper):
        if self.c == 0.0:
            return None
        pts = [(-self.k + d) / self.c for d in (-self.eps, 0.0, self.eps)]
        lo, hi = min(0.0, upper), max(0.0, upper)
        pts = [p for p in pts if lo < p < hi]
        return pts or None


# ---------------------------------------------------------------------------
# registries


def _f_constant(params, dim):
    value = float(params.get("value", 0.0))
    return lambda x: np.full(np.shape(x)[:-1], value)


def _f_power_singular(params, dim):
    c = float(params.get("c", 1.0))
    gamma = float(params["gamma"])
    center = np.asarray(params.get("center", [0.5] * dim), float)

    def f(x):
        r = np.linalg.norm(np.asarray(x) - center, axis=-1)
        with np.errstate(divide="ignore"):
            return c * np.where(r > 0, r ** (-gamma), np.inf)

    return f


def _g_affine(params, dim):
    q = np.asarray(params["q"], float)
    if q.shape != (dim,):
        raise InvalidArgument(f"affine q must have {dim} components")
    c = float(params.get("c", 0.0))
    return lambda x: np.asarray(x, float) @ q + c


def _g_profile(params, dim):
    oracle = ProfileOracle(float(params.get("p", 2.0)), float(params["c"]), float(params["k"]), float(params.get("eps", 0.0)))
    axis = int(params.get("axis", 0))
    origin = float(params.get("origin", 0.0))
    return lambda x: oracle.value(np.asarray(x, float)[..., axis] - origin)


def _g_fourier(params, dim):
    rng = np.random.default_rng(int(params.get("seed", 0)))
    modes = int(params.get("modes", 4))
    amp = float(params.get("amplitude", 1.0))
    k = rng.integers(-modes, modes + 1, size=(modes, dim))
    phase = rng.uniform(0, 2 * np.pi, modes)
    weight = rng.standard_normal(modes) * amp / modes

    def g(x):
        x = np.asarray(x, float)
        return np.sum(weight * np.sin(x @ k.T * math.pi + phase), axis=-1)

    return g


F_FAMILIES = {"constant": (1, _f_constant), "power_singular": (1, _f_power_singular)}
G_FAMILIES = {"affine": (1, _g_affine), "profile": (1, _g_profile), "fourier": (1, _g_fourier)}
FAMILY_VERSIONS = {"f": {k: v[0] for k, v in F_FAMILIES.items()}, "g": {k: v[0] for k, v in G_FAMILIES.items()}}


def _build(registry, spec, dim, label) -> Callable:
    if not isinstance(spec, dict) or "family" not in spec:
        raise InvalidArgument(f"{label}: expected an object with a 'family' field")
    name = spec["family"]
    if name not in registry:
        raise InvalidArgument(f"{label}: unknown family {name!r}; known: {sorted(registry)}")
    version, builder = registry[name]
    if spec.get("version", version) != version:
        raise InvalidArgument(f"{label}: family {name!r} has version {version}, config asks for {spec['version']}")
    try:
        return builder(spec.get("params", {}), dim)
    except KeyError as exc:
        raise InvalidArgument(f"{label}: family {name!r} is missing parameter {exc}") from exc


def build_f(spec: dict, dim: int) -> Callable:
    return _build(F_FAMILIES, spec, dim, "f")


def build_g(spec: dict, dim: int) -> Callable:
    return _build(G_FAMILIES, spec, dim, "g")
