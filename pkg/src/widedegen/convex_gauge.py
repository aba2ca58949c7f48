"""Convex bodies with 0 in the interior: Minkowski gauge, dual gauge, radii and the G_delta maps.

All evaluators are vectorised over the last axis: ``xi`` may have shape ``(n,)``
or ``(..., n)``.  A 1-D argument returns a Python float (or a 1-D vector for
:func:`g_delta`).
"""

from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError
from scipy.stats import norm, qmc

from .errors import InvalidArgument

__all__ = [
    "ConvexBody",
    "Ball",
    "Ellipsoid",
    "Polytope",
    "BodySpecError",
    "gauge",
    "dual_gauge",
    "dual_boundary_directions",
    "radii",
    "g_delta",
    "bisection_gauge",
    "body_from_dict",
    "load_body",
    "InequalityCheck",
    "inequality_suite",
]


def _vectors(xi, dim: int) -> np.ndarray:
    arr = np.asarray(xi, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] != dim:
        raise InvalidArgument(f"expected vectors with last axis {dim}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("non-finite vector component")
    return arr


def _out(values: np.ndarray, was_vector: bool):
    return float(values) if was_vector else values


class ConvexBody(ABC):
    """Bounded convex set E in R^n with 0 in its interior."""

    kind: str = "abstract"
    dim: int

    @abstractmethod
    def _gauge(self, xi: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _dual_gauge(self, xi: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def radii(self) -> tuple[float, float]:
        """(r_E, R_E): radii of the largest inscribed and smallest centred circumscribed ball."""

    @abstractmethod
    def contains(self, points) -> np.ndarray:
        """Membership test used as an independent oracle (does not go through the gauge)."""

    @abstractmethod
    def to_dict(self) -> dict: ...

    def gauge(self, xi):
        arr = _vectors(xi, self.dim)
        return _out(self._gauge(arr), arr.ndim == 1)

    def dual_gauge(self, xi):
        arr = _vectors(xi, self.dim)
        return _out(self._dual_gauge(arr), arr.ndim == 1)

    @property
    def is_smooth(self) -> bool:
        return False


def _quadratic_root(xi, matrix):
    """sqrt(xi^T M xi) (Euclidean norm when M is None), rescaled where squaring would under- or overflow."""
    xi = np.asarray(xi, float)

    def root(v):
        if matrix is None:
            return np.linalg.norm(v, axis=-1)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", v, matrix, v), 0.0))

    out = root(xi)
    scale = np.max(np.abs(xi), axis=-1) if xi.shape[-1] else np.zeros(xi.shape[:-1])
    extreme = (scale > 0) & ((scale < 1e-140) | (scale > 1e140))
    if np.any(extreme):
        s = np.where(extreme, scale, 1.0)
        out = np.where(extreme, s * root(xi / s[..., None]), out)
    return out


class Ellipsoid(ConvexBody):
    """E = {xi : xi^T Q xi <= 1} for a symmetric positive-definite Q."""

    kind = "ellipsoid"

    def __init__(self, matrix):
        q = np.array(matrix, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise InvalidArgument(f"matrix must be square, got shape {q.shape}")
        if q.shape[0] < 2:
            raise InvalidArgument("dimension must be at least 2")
        if not np.all(np.isfinite(q)):
            raise InvalidArgument("matrix has non-finite entries")
        if not np.allclose(q, q.T, rtol=1e-12, atol=1e-14 * np.abs(q).max()):
            raise InvalidArgument("matrix must be symmetric")
        q = 0.5 * (q + q.T)
        eig = np.linalg.eigvalsh(q)
        if eig[0] <= 0:
            raise InvalidArgument("matrix must be positive definite")
        self.dim = q.shape[0]
        self.matrix = q
        self._inverse = np.linalg.inv(q)
        self._eig = eig
        self.matrix.setflags(write=False)

    @classmethod
    def from_semi_axes(cls, axes: Sequence[float], rotation=None) -> "Ellipsoid":
        axes = np.asarray(axes, dtype=float)
        if np.any(axes <= 0):
            raise InvalidArgument("semi-axes must be positive")
        q = np.diag(1.0 / axes**2)
        if rotation is not None:
            rot = np.asarray(rotation, dtype=float)
            q = rot @ q @ rot.T
        return cls(q)

    @property
    def quadratic_form(self) -> np.ndarray:
        return self.matrix

    @property
    def is_smooth(self) -> bool:
        return True

    def _gauge(self, xi):
        return _quadratic_root(xi, self.matrix)

    def _dual_gauge(self, xi):
        return _quadratic_root(xi, self._inverse)

    def radii(self):
        return float(1.0 / math.sqrt(self._eig[-1])), float(1.0 / math.sqrt(self._eig[0]))

    def contains(self, points):
        pts = _vectors(points, self.dim)
        return np.einsum("...i,ij,...j->...", pts, self.matrix, pts) <= 1.0

    def to_dict(self):
        return {"type": "ellipsoid", "dimension": self.dim, "matrix": self.matrix.tolist()}


class Ball(Ellipsoid):
    """Euclidean ball of radius ``radius`` centred at the origin."""

    kind = "ball"

    def __init__(self, radius: float = 1.0, dim: int = 2):
        if not (np.isfinite(radius) and radius > 0):
            raise InvalidArgument("radius must be positive and finite")
        if int(dim) != dim or dim < 2:
            raise InvalidArgument("dimension must be an integer >= 2")
        super().__init__(np.eye(int(dim)) / radius**2)
        self.radius = float(radius)

    # closed forms avoid the quadratic form's extra rounding
    def _gauge(self, xi):
        return _quadratic_root(xi, None) / self.radius

    def _dual_gauge(self, xi):
        return self.radius * _quadratic_root(xi, None)

    def radii(self):
        return self.radius, self.radius

    def contains(self, points):
        pts = _vectors(points, self.dim)
        return np.linalg.norm(pts, axis=-1) <= self.radius

    def to_dict(self):
        return {"type": "ball", "dimension": self.dim, "radius": self.radius}


class Polytope(ConvexBody):
    """Convex hull of a vertex list; the origin must be strictly inside.

    The gauge is the ray-facet formula max_i <a_i, xi>/b_i over facet
    half-spaces <a_i, x> <= b_i, the dual gauge the maximum over vertices.
    """

    kind = "polytope"

    def __init__(self, vertices):
        pts = np.array(vertices, dtype=float)
        if pts.ndim != 2:
            raise InvalidArgument("vertices must be a list of points")
        n = pts.shape[1]
        if n not in (2, 3):
            raise InvalidArgument("polytopes are supported in dimension 2 and 3 only")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgument("vertices contain non-finite values")
        if pts.shape[0] < n + 1 or np.linalg.matrix_rank(pts[1:] - pts[0]) < n:
            raise InvalidArgument(f"need at least {n + 1} affinely independent vertices")
        try:
            hull = ConvexHull(pts)
        except QhullError as exc:
            raise InvalidArgument(f"convex hull failed: {exc}") from exc
        normals = hull.equations[:, :-1]
        offsets = -hull.equations[:, -1]
        scale = np.abs(pts).max()
        if np.any(offsets <= 1e-12 * scale):
            raise InvalidArgument("origin must lie strictly inside the polytope")
        self.dim = n
        self.vertices = pts[hull.vertices]
        # rows are the vertices of the polar body E*
        self.polar_vertices = normals / offsets[:, None]
        self._facet_distance = offsets / np.linalg.norm(normals, axis=1)
        self._triangulation = Delaunay(self.vertices)
        self.vertices.setflags(write=False)
        self.polar_vertices.setflags(write=False)

    def _gauge(self, xi):
        return np.maximum((xi @ self.polar_vertices.T).max(axis=-1), 0.0)

    def _dual_gauge(self, xi):
        return np.maximum((xi @ self.vertices.T).max(axis=-1), 0.0)

    def radii(self):
        return float(self._facet_distance.min()), float(np.linalg.norm(self.vertices, axis=1).max())

    def contains(self, points):
        pts = _vectors(points, self.dim)
        return self._triangulation.find_simplex(pts) >= 0

    def to_dict(self):
        return {"type": "polytope", "dimension": self.dim, "vertices": self.vertices.tolist()}


def gauge(body: ConvexBody, xi):
    """Minkowski gauge |xi|_E = inf{t > 0 : xi in tE}."""
    return body.gauge(xi)


def dual_gauge(body: ConvexBody, xi):
    """Dual gauge |xi|_E' = sup over e in E of <xi, e>."""
    return body.dual_gauge(xi)


def radii(body: ConvexBody) -> tuple[float, float]:
    return body.radii()


def _unit_directions(dim: int, count: int) -> np.ndarray:
    if dim == 2:
        angles = 2.0 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(angles), np.sin(angles)])
    if dim == 3:
        # Fibonacci lattice on the sphere
        k = np.arange(count) + 0.5
        z = 1.0 - 2.0 * k / count
        phi = np.pi * (3.0 - math.sqrt(5.0)) * np.arange(count)
        s = np.sqrt(1.0 - z**2)
        return np.column_stack([s * np.cos(phi), s * np.sin(phi), z])
    axes = np.vstack([np.eye(dim), -np.eye(dim)])
    extra = count - 2 * dim
    if extra <= 0:
        return axes
    u = qmc.Halton(d=dim, scramble=False).random(extra + 1)[1:]
    g = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return np.vstack([axes, g])


def dual_boundary_directions(body: ConvexBody, count: int) -> np.ndarray:
    """Points e* on the boundary of the dual ball E*, one per quasi-uniform direction.

    Returns an array of shape ``(count, n)``.  In two dimensions the directions
    are equally spaced in angle starting at (1, 0).
    """
    if int(count) != count or count < 2 * body.dim:
        raise InvalidArgument(f"count must be an integer >= {2 * body.dim}")
    d = _unit_directions(body.dim, int(count))
    e_star = d / body._dual_gauge(d)[:, None]
    err = np.abs(body._dual_gauge(e_star) - 1.0).max()
    if err > 1e-10:
        raise InvalidArgument(f"dual normalisation failed (error {err:.3e})")
    return e_star


def g_delta(body: ConvexBody, delta: float, xi):
    """G_delta(xi) = ((|xi|_E - (1+delta))_+ / |xi|_E) xi, zero at xi = 0."""
    if not (np.isfinite(delta) and delta >= 0):
        raise InvalidArgument("delta must be a nonnegative real")
    arr = _vectors(xi, body.dim)
    g = body._gauge(arr)
    excess = np.maximum(g - (1.0 + delta), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(excess > 0, excess / np.where(g > 0, g, 1.0), 0.0)
    return factor[..., None] * arr


def bisection_gauge(body: ConvexBody, xi, tol: float = 1e-13, t_max: float | None = None) -> np.ndarray:
    """Gauge by bisection on t using only ``body.contains``; an oracle for testing."""
    arr = _vectors(xi, body.dim)
    flat = arr.reshape(-1, body.dim)
    r_in, _ = body.radii()
    hi = np.full(len(flat), np.linalg.norm(flat, axis=1).max() / r_in * 2 + 1.0 if t_max is None else t_max)
    lo = np.zeros(len(flat))
    nonzero = np.linalg.norm(flat, axis=1) > 0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        safe = np.where(mid > 0, mid, 1.0)
        inside = body.contains(flat / safe[:, None])
        hi = np.where(inside, mid, hi)
        lo = np.where(inside, lo, mid)
        if np.all(hi - lo <= tol * np.maximum(hi, 1.0)):
            break
    out = np.where(nonzero, 0.5 * (lo + hi), 0.0)
    return out.reshape(arr.shape[:-1]) if arr.ndim > 1 else float(out[0])


# ---------------------------------------------------------------------------
# body description files


class BodySpecError(InvalidArgument):
    """A body description could not be parsed or violates an invariant."""


def body_from_dict(spec: dict, where: str = "body") -> ConvexBody:
    if not isinstance(spec, dict):
        raise BodySpecError(f"{where}: expected an object")
    kind = spec.get("type")
    if kind not in ("ball", "ellipsoid", "polytope"):
        raise BodySpecError(f"{where}.type: expected 'ball', 'ellipsoid' or 'polytope', got {kind!r}")
    dim = spec.get("dimension")
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 2:
        raise BodySpecError(f"{where}.dimension: expected an integer >= 2, got {dim!r}")
    try:
        if kind == "ball":
            if "radius" not in spec:
                raise BodySpecError(f"{where}.radius: missing")
            return Ball(float(spec["radius"]), dim)
        if kind == "ellipsoid":
            if "matrix" not in spec:
                raise BodySpecError(f"{where}.matrix: missing")
            body = Ellipsoid(spec["matrix"])
            field_name = "matrix"
        else:
            if "vertices" not in spec:
                raise BodySpecError(f"{where}.vertices: missing")
            body = Polytope(spec["vertices"])
            field_name = "vertices"
    except BodySpecError:
        raise
    except (InvalidArgument, TypeError, ValueError) as exc:
        fname = {"ball": "radius", "ellipsoid": "matrix", "polytope": "vertices"}[kind]
        raise BodySpecError(f"{where}.{fname}: {exc}") from exc
    if body.dim != dim:
        raise BodySpecError(f"{where}.{field_name}: dimension {body.dim} does not match declared {dim}")
    return body


def load_body(path) -> ConvexBody:
    """Read a JSON body description ``{type, dimension, radius|matrix|vertices}``."""
    path = Path(path)
    text = path.read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BodySpecError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return body_from_dict(spec, where=str(path))


# ---------------------------------------------------------------------------
# inequality suite


@dataclass
class InequalityCheck:
    name: str
    worst_violation: float
    worst_index: int
    tolerance: float
    samples: int
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.worst_violation <= self.tolerance


def _random_vectors(rng: np.random.Generator, count: int, dim: int, scale: float) -> np.ndarray:
    # directions uniform on the sphere, radii log-spread across inside and outside of E
    d = rng.standard_normal((count, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = scale * np.exp(rng.uniform(np.log(0.05), np.log(6.0), size=count))
    return d * r[:, None]


def _check(name, lhs, rhs, tol, **detail) -> InequalityCheck:
    viol = (lhs - rhs) / (1.0 + np.abs(rhs))
    idx = int(np.argmax(viol)) if viol.size else -1
    worst = float(viol[idx]) if viol.size else -np.inf
    return InequalityCheck(name, worst, idx, tol, int(viol.size), detail)


def inequality_suite(
    body: ConvexBody,
    samples: int = 10_000,
    seed: int = 0,
    tol: float = 1e-9,
) -> list[InequalityCheck]:
    """Check the gauge inequalities on ``samples`` random pairs.

    Violations are measured as (lhs - rhs) / (1 + |rhs|).  Covered: comparison
    with the Euclidean norm, triangle inequality, reverse triangle inequality in
    max-form, Lipschitz bound, normalised-difference bound, and both G_delta
    bounds.
    """
    rng = np.random.default_rng(seed)
    r_in, r_out = body.radii()
    xi = _random_vectors(rng, samples, body.dim, r_out)
    eta = _random_vectors(rng, samples, body.dim, r_out)
    # half of the pairs are close together, where the difference bounds are tight
    close = rng.random(samples) < 0.5
    eta[close] = xi[close] + _random_vectors(rng, int(close.sum()), body.dim, 1e-2 * r_out)

    g = body._gauge
    gx, ge, gd, gmd = g(xi), g(eta), g(xi - eta), g(eta - xi)
    eu = np.linalg.norm(xi, axis=1)
    diff = np.linalg.norm(xi - eta, axis=1)
    ratio = r_out / r_in
    checks = [
        _check("comparison lower |xi|/R_E <= |xi|_E", eu / r_out, gx, tol),
        _check("comparison upper |xi|_E <= |xi|/r_E", gx, eu / r_in, tol),
        _check("triangle", g(xi + eta), gx + ge, tol),
        _check("reverse triangle (max form)", np.abs(gx - ge), np.maximum(gd, gmd), tol),
        _check("lipschitz", np.abs(gx - ge), diff / r_in, tol),
    ]
    lhs = g(xi / gx[:, None] - eta / ge[:, None])
    checks.append(_check("normalised difference", lhs, ratio * (2.0 / gx) * gd, tol))

    delta = rng.uniform(0.0, 1.0, samples)
    gdx = _g_delta_rows(body, delta, xi)
    gde = _g_delta_rows(body, delta, eta)
    checks.append(
        _check(
            "g_delta lipschitz",
            np.linalg.norm(gdx - gde, axis=1),
            3.0 * ratio**2 * diff,
            tol,
        )
    )

    # inverse bound: rescale xi so that |xi|_E >= 1 + delta with delta > 0
    delta_pos = rng.uniform(0.01, 1.0, samples)
    target = (1.0 + delta_pos) * np.exp(rng.uniform(0.0, np.log(4.0), samples))
    xi2 = xi / gx[:, None] * target[:, None]
    eta2 = eta.copy()
    eta2[close] = xi2[close] + (eta[close] - xi[close])
    gx2 = _g_delta_rows(body, np.zeros(samples), xi2)
    ge2 = _g_delta_rows(body, np.zeros(samples), eta2)
    checks.append(
        _check(
            "g inverse bound",
            np.linalg.norm(xi2 - eta2, axis=1),
            3.0 * ratio**2 * (1.0 + 1.0 / delta_pos) * np.linalg.norm(gx2 - ge2, axis=1),
            tol,
        )
    )
    return checks


def _g_delta_rows(body: ConvexBody, delta: np.ndarray, xi: np.ndarray) -> np.ndarray:
    g = body._gauge(xi)
    excess = np.maximum(g - (1.0 + delta), 0.0)
    factor = np.where(excess > 0, excess / np.where(g > 0, g, 1.0), 0.0)
    return factor[:, None] * xi
