"""Degenerate integrands F(x, xi) that vanish on a convex set E.

The built-in prototype is F_p(x, xi) = a(x)/p * (|xi|_E - 1)_+^p for a smooth
body (ball or ellipsoid).  Vectorised evaluators ``_value``, ``_gradient`` and
``_hessian`` take broadcastable arrays ``x`` of shape ``(..., n)`` and ``xi`` of
shape ``(..., n)`` and skip validation; the public methods validate.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .convex_gauge import Ball, ConvexBody, Ellipsoid, _vectors, g_delta
from .errors import DomainError, InvalidArgument

__all__ = [
    "Box",
    "BallDomain",
    "ConstantCoefficient",
    "AffineCoefficient",
    "TrigCoefficient",
    "coefficient_from_dict",
    "Integrand",
    "PrototypeIntegrand",
    "CallableIntegrand",
    "EllipticityWindow",
    "ellipticity_window",
    "monotonicity_bracket",
    "monotonicity_gap",
    "coercivity_ratio",
]


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != hi.shape or lo.ndim != 1 or np.any(hi <= lo):
            raise InvalidArgument("box needs matching bounds with lo < hi")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def contains(self, x, slack: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, float)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        span = hi - lo
        return np.all((x >= lo - slack * span) & (x <= hi + slack * span), axis=-1)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(count, self.dim))

    def affine_range(self, c0: float, slope: np.ndarray) -> tuple[float, float]:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        low = c0 + np.sum(np.minimum(slope * lo, slope * hi))
        high = c0 + np.sum(np.maximum(slope * lo, slope * hi))
        return float(low), float(high)


@dataclass(frozen=True)
class BallDomain:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidArgument("domain radius must be positive")

    @property
    def dim(self) -> int:
        return len(self.center)

    def contains(self, x, slack: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, float)
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) <= self.radius * (1 + slack)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        d = rng.standard_normal((count, self.dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = self.radius * rng.random(count) ** (1.0 / self.dim)
        return np.asarray(self.center) + d * r[:, None]

    def affine_range(self, c0: float, slope: np.ndarray) -> tuple[float, float]:
        mid = c0 + float(np.dot(slope, self.center))
        spread = self.radius * float(np.linalg.norm(slope))
        return mid - spread, mid + spread


# ---------------------------------------------------------------------------
# coefficient fields a(x)


class ConstantCoefficient:
    kind = "constant"

    def __init__(self, value: float = 1.0):
        self.c = float(value)

    def __call__(self, x):
        return np.full(np.shape(x)[:-1], self.c)

    def grad(self, x):
        return np.zeros(np.shape(x))

    def bounds(self, domain) -> tuple[float, float]:
        return self.c, self.c

    def lipschitz(self) -> float:
        return 0.0


class AffineCoefficient:
    kind = "affine"

    def __init__(self, c0: float, slope):
        self.c0 = float(c0)
        self.slope = np.asarray(slope, float)

    def __call__(self, x):
        return self.c0 + np.asarray(x, float) @ self.slope

    def grad(self, x):
        return np.broadcast_to(self.slope, np.shape(x)).copy()

    def bounds(self, domain):
        return domain.affine_range(self.c0, self.slope)

    def lipschitz(self) -> float:
        return float(np.abs(self.slope).max())


class TrigCoefficient:
    """a(x) = c0 + amplitude * sin(<k, x>)."""

    kind = "trig"

    def __init__(self, c0: float, amplitude: float, wavevector):
        self.c0 = float(c0)
        self.amp = float(amplitude)
        self.k = np.asarray(wavevector, float)

    def __call__(self, x):
        return self.c0 + self.amp * np.sin(np.asarray(x, float) @ self.k)

    def grad(self, x):
        phase = np.asarray(x, float) @ self.k
        return (self.amp * np.cos(phase))[..., None] * self.k

    def bounds(self, domain):
        return self.c0 - abs(self.amp), self.c0 + abs(self.amp)

    def lipschitz(self) -> float:
        return abs(self.amp) * float(np.abs(self.k).max())


def coefficient_from_dict(spec: dict, dim: int):
    kind = spec.get("kind", "constant")
    params = spec.get("params", {})
    try:
        if kind == "constant":
            return ConstantCoefficient(params.get("value", 1.0))
        if kind == "affine":
            return AffineCoefficient(params["c0"], params.get("slope", [0.0] * dim))
        if kind == "trig":
            return TrigCoefficient(params["c0"], params["amplitude"], params["wavevector"])
    except KeyError as exc:
        raise InvalidArgument(f"coefficient {kind!r}: missing parameter {exc}") from exc
    raise InvalidArgument(f"unknown coefficient kind {kind!r}")


# ---------------------------------------------------------------------------
# integrands


class Integrand(ABC):
    body: ConvexBody
    domain: Box | BallDomain

    @abstractmethod
    def _value(self, x, xi) -> np.ndarray: ...

    @abstractmethod
    def _gradient(self, x, xi) -> np.ndarray: ...

    @abstractmethod
    def _hessian(self, x, xi) -> np.ndarray:
        """Hessian with the degenerate region filled by its interior limit (zero)."""

    def _gradient_x(self, x, xi) -> np.ndarray:
        raise NotImplementedError

    @property
    def dim(self) -> int:
        return self.body.dim

    def _check_x(self, x):
        x = _vectors(x, self.dim)
        if not np.all(self.domain.contains(x)):
            raise InvalidArgument("x outside the integrand's domain")
        return x

    def value(self, x, xi):
        x = self._check_x(x)
        xi = _vectors(xi, self.dim)
        out = self._value(x, xi)
        return float(out) if np.ndim(out) == 0 else out

    def gradient(self, x, xi):
        x = self._check_x(x)
        xi = _vectors(xi, self.dim)
        return self._gradient(x, xi)

    def hessian(self, x, xi):
        """Hessian in xi; raises :class:`DomainError` on or inside the degeneracy boundary."""
        x = self._check_x(x)
        xi = _vectors(xi, self.dim)
        if np.any(self.body._gauge(xi) <= 1.0):
            raise DomainError("Hessian requested on or inside the degeneracy boundary |xi|_E <= 1")
        return self._hessian(x, xi)

    def gradient_x(self, x, xi):
        """Mixed derivative d/dx_i of the xi-gradient, shape (..., n_x, n_xi)."""
        x = self._check_x(x)
        xi = _vectors(xi, self.dim)
        return self._gradient_x(x, xi)

    def sup_value(self, radius: float, samples: int = 4096, seed: int = 0) -> float:
        """sup of F over the domain and |xi| <= radius (attained on the sphere by convexity)."""
        rng = np.random.default_rng(seed)
        d = rng.standard_normal((samples, self.dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        x = self.domain.sample(rng, samples)
        return float(self._value(x, radius * d).max())

    def coefficient_bounds(self) -> tuple[float, float]:
        raise NotImplementedError


class PrototypeIntegrand(Integrand):
    """F_p(x, xi) = a(x)/p * (|xi|_E - 1)_+^p with E a ball or ellipsoid."""

    kind = "prototype"

    def __init__(self, p: float, coefficient=None, body: ConvexBody | None = None, domain=None):
        if not (np.isfinite(p) and p > 1):
            raise InvalidArgument("exponent p must exceed 1")
        body = Ball(1.0, 2) if body is None else body
        if not isinstance(body, Ellipsoid):
            raise InvalidArgument("the prototype needs a smooth body (ball or ellipsoid)")
        self.p = float(p)
        self.body = body
        self.coefficient = ConstantCoefficient(1.0) if coefficient is None else coefficient
        self.domain = Box((0.0,) * body.dim, (1.0,) * body.dim) if domain is None else domain
        if self.domain.dim != body.dim:
            raise InvalidArgument("domain and body dimensions differ")
        c1, c2 = self.coefficient.bounds(self.domain)
        if c1 <= 0:
            raise InvalidArgument(f"coefficient must be positive on the domain (lower bound {c1})")
        self.C1, self.C2 = c1, c2
        self.A = self.coefficient.lipschitz()
        self._unit_euclidean = isinstance(body, Ball) and body.radius == 1.0

    def coefficient_bounds(self):
        return self.C1, self.C2

    def _parts(self, xi):
        g = self.body._gauge(xi)
        t = np.maximum(g - 1.0, 0.0)
        safe_g = np.where(g > 0, g, 1.0)
        normal = (xi @ self.body.quadratic_form) / safe_g[..., None]
        return g, t, safe_g, normal

    def _value(self, x, xi):
        g = self.body._gauge(xi)
        t = np.maximum(g - 1.0, 0.0)
        return self.coefficient(x) / self.p * t**self.p

    def _gradient(self, x, xi):
        _, t, _, normal = self._parts(xi)
        scale = self.coefficient(x) * t ** (self.p - 1.0)
        return scale[..., None] * normal

    def _hessian(self, x, xi):
        g, t, safe_g, normal = self._parts(xi)
        a = self.coefficient(x)
        outside = t > 0
        safe_t = np.where(outside, t, 1.0)
        radial = np.where(outside, a * (self.p - 1.0) * safe_t ** (self.p - 2.0), 0.0)
        tangential = np.where(outside, a * safe_t ** (self.p - 1.0) / safe_g, 0.0)
        nn = normal[..., :, None] * normal[..., None, :]
        q = self.body.quadratic_form
        return radial[..., None, None] * nn + tangential[..., None, None] * (q - nn)

    def _gradient_x(self, x, xi):
        _, t, _, normal = self._parts(xi)
        da = self.coefficient.grad(x)
        return (t ** (self.p - 1.0))[..., None, None] * da[..., :, None] * normal[..., None, :]

    def sup_value(self, radius, samples=0, seed=0):
        r_in, _ = self.body.radii()
        return self.C2 / self.p * max(radius / r_in - 1.0, 0.0) ** self.p

    def level_radius(self, level: float) -> float:
        """Euclidean radius beyond which F >= level for every x in the domain."""
        _, r_out = self.body.radii()
        return r_out * (1.0 + (self.p * level / self.C1) ** (1.0 / self.p))


class CallableIntegrand(Integrand):
    """User-supplied vectorised evaluators ``value(x, xi)``, ``gradient`` and ``hessian``."""

    kind = "callable"

    def __init__(
        self,
        body: ConvexBody,
        value: Callable,
        gradient: Callable,
        hessian: Callable,
        gradient_x: Callable | None = None,
        domain=None,
        bounds: tuple[float, float] | None = None,
    ):
        self.body = body
        self.domain = Box((0.0,) * body.dim, (1.0,) * body.dim) if domain is None else domain
        self._f, self._df, self._d2f, self._dxf = value, gradient, hessian, gradient_x
        self._bounds = bounds

    def _value(self, x, xi):
        return np.asarray(self._f(x, xi), float)

    def _gradient(self, x, xi):
        return np.asarray(self._df(x, xi), float)

    def _hessian(self, x, xi):
        return np.asarray(self._d2f(x, xi), float)

    def _gradient_x(self, x, xi):
        if self._dxf is None:
            raise NotImplementedError("no x-derivative supplied")
        return np.asarray(self._dxf(x, xi), float)

    def coefficient_bounds(self):
        if self._bounds is None:
            raise NotImplementedError("no coefficient bounds supplied")
        return self._bounds

    def level_radius(self, level: float, samples: int = 512, seed: int = 0) -> float:
        # smallest sampled radius beyond which every sampled value exceeds the level
        _, r_out = self.body.radii()
        rng = np.random.default_rng(seed)
        d = rng.standard_normal((samples, self.dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        x = self.domain.sample(rng, samples)
        r = r_out
        while np.min(self._value(x, r * d)) < level:
            r *= 1.25
            if r > 1e8 * r_out:
                raise InvalidArgument("integrand does not reach the requested level")
        return r


# ---------------------------------------------------------------------------
# ellipticity and monotonicity


@dataclass(frozen=True)
class EllipticityWindow:
    delta: float
    lam: float
    Lam: float
    source: str  # "closed-form" or "empirical"
    samples: int = 0


def _annulus_samples(F: Integrand, delta: float, count: int, seed: int):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((count, F.dim))
    d /= F.body._gauge(d)[:, None]
    levels = np.linspace(1.0 + delta, 1.0 / delta, count)
    rng.shuffle(levels)
    return F.domain.sample(rng, count), d * levels[:, None]


def ellipticity_window(F: Integrand, delta: float, samples: int = 4000, seed: int = 0) -> EllipticityWindow:
    """Ellipticity bounds lambda(delta) <= eig(Hessian) <= Lambda(delta) on 1+delta <= |xi|_E <= 1/delta.

    Closed form for the prototype on the unit ball with p >= 2; otherwise
    estimated from eigenvalues sampled on the annulus and tagged "empirical".
    """
    if not (0.0 < delta < 1.0):
        raise InvalidArgument("delta must lie in (0, 1)")
    if isinstance(F, PrototypeIntegrand) and F._unit_euclidean and F.p >= 2:
        lam = F.C1 * delta**F.p
        Lam = F.C2 * (F.p - 1.0) * ((1.0 - delta) / delta) ** (F.p - 2.0)
        return EllipticityWindow(delta, lam, Lam, "closed-form")
    if 1.0 + delta > 1.0 / delta:
        raise InvalidArgument(f"annulus 1+delta <= |xi|_E <= 1/delta is empty for delta = {delta}")
    x, xi = _annulus_samples(F, delta, samples, seed)
    eig = np.linalg.eigvalsh(F._hessian(x, xi))
    return EllipticityWindow(delta, float(eig.min()), float(eig.max()), "empirical", samples)


def monotonicity_bracket(F: Integrand, eps: float, x, xi, xi2):
    """<H_eps(x, xi2) - H_eps(x, xi), xi2 - xi> with H_eps = grad F + eps * xi."""
    x = F._check_x(x)
    xi, xi2 = _vectors(xi, F.dim), _vectors(xi2, F.dim)
    diff = xi2 - xi
    dh = F._gradient(x, xi2) - F._gradient(x, xi) + eps * diff
    out = np.sum(dh * diff, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def monotonicity_gap(
    F: Integrand,
    eps: float,
    delta: float,
    x,
    xi,
    xi2,
    window: EllipticityWindow | None = None,
):
    """Bracket minus its quantitative lower bound (eps + C(delta) s) |xi2 - xi|^2.

    Here C(delta) = lambda(delta/2) and s = r_E (2|xi|_E - (2+delta)) / (2 |xi|_E (R_E + r_E)).
    Requires |xi|_E >= 1 + delta.
    """
    if not (0.0 <= eps <= 1.0):
        raise InvalidArgument("eps must lie in [0, 1]")
    if not delta > 0:
        raise InvalidArgument("delta must be positive")
    xi_arr = _vectors(xi, F.dim)
    g = F.body._gauge(xi_arr)
    if np.any(g < 1.0 + delta):
        raise InvalidArgument("precondition |xi|_E >= 1 + delta violated")
    if window is None:
        window = ellipticity_window(F, delta / 2.0)
    r_in, r_out = F.body.radii()
    s = r_in * (2.0 * g - (2.0 + delta)) / (2.0 * g * (r_out + r_in))
    bracket = monotonicity_bracket(F, eps, x, xi, xi2)
    dist2 = np.sum((np.asarray(xi2, float) - xi_arr) ** 2, axis=-1)
    out = bracket - (eps + window.lam * s) * dist2
    return float(out) if np.ndim(out) == 0 else out


def coercivity_ratio(F: Integrand, eps: float, delta: float, x, xi, xi2) -> dict:
    """Largest observed (eps|xi2-xi|^2 + |G_delta(xi2)-G_delta(xi)|^2) / bracket.

    Pairs with a vanishing bracket are only admissible when the numerator also
    vanishes; those are counted separately.
    """
    bracket = np.atleast_1d(monotonicity_bracket(F, eps, x, xi, xi2))
    xi, xi2 = np.atleast_2d(xi), np.atleast_2d(xi2)
    num = eps * np.sum((xi2 - xi) ** 2, axis=-1) + np.sum(
        (g_delta(F.body, delta, xi2) - g_delta(F.body, delta, xi)) ** 2, axis=-1
    )
    positive = bracket > 0
    ratio = np.where(positive, num / np.where(positive, bracket, 1.0), 0.0)
    return {
        "constant": float(ratio.max()) if ratio.size else 0.0,
        "pairs": int(ratio.size),
        "zero_bracket": int((~positive).sum()),
        "zero_bracket_nonzero_numerator": int(np.sum(~positive & (num > 0))),
    }
