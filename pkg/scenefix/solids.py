"""
Analytic solids that make up the procedural primitives.

Each solid lives in its instance's local frame (base on z = 0) and supports
ray intersection, area-weighted surface sampling, distance to its surface and
an exact axis-aligned bound. Rays are ``o + t * d`` with unnormalized ``d``;
returned ``t`` values are in the caller's ray parameterization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_MIN = 1e-9


def _first_positive(*candidates: np.ndarray) -> np.ndarray:
    """Smallest candidate above T_MIN per ray, +inf when none."""
    stacked = np.stack(candidates, axis=0)
    stacked = np.where(np.isfinite(stacked) & (stacked > T_MIN), stacked, np.inf)
    return stacked.min(axis=0)


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c, h = np.asarray(self.center), np.asarray(self.half)
        return c - h, c + h

    def corners(self) -> np.ndarray:
        lo, hi = self.bounds()
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                         for z in (lo[2], hi[2])])

    def area(self) -> float:
        hx, hy, hz = self.half
        return 8.0 * (hx * hy + hy * hz + hx * hz)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.bounds()
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        parallel = d == 0.0
        inside_slab = (o >= lo) & (o <= hi)
        tmin = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        tmax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        hit = (t_near <= t_far) & (t_near > T_MIN)
        t = np.where(hit, t_near, np.inf)
        axis = tmin.argmax(axis=1)
        normals = np.zeros_like(d)
        rows = np.arange(len(d))
        normals[rows, axis] = -np.sign(d[rows, axis])
        return t, normals

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        hx, hy, hz = self.half
        face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.zeros((n, 3))
        axis = faces // 2
        sign = np.where(faces % 2 == 0, -1.0, 1.0)
        half = np.asarray(self.half)
        for a in range(3):
            sel = axis == a
            others = [k for k in range(3) if k != a]
            pts[sel, a] = sign[sel] * half[a]
            pts[sel, others[0]] = uv[sel, 0] * half[others[0]]
            pts[sel, others[1]] = uv[sel, 1] * half[others[1]]
        return pts + np.asarray(self.center)

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)


@dataclass(frozen=True)
class Cylinder:
    """Upright cylinder (axis along z)."""

    center: tuple
    radius: float
    half_height: float

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        h = np.array([self.radius, self.radius, self.half_height])
        return c - h, c + h

    def area(self) -> float:
        return 2.0 * np.pi * self.radius * (2.0 * self.half_height) + 2.0 * np.pi * self.radius ** 2

    def intersect(self, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        oc = o - c
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2.0 * (d[:, 0] * oc[:, 0] + d[:, 1] * oc[:, 1])
        cc = oc[:, 0] ** 2 + oc[:, 1] ** 2 - self.radius ** 2
        disc = b * b - 4.0 * a * cc
        with np.errstate(divide="ignore", invalid="ignore"):
            t_side = (-b - np.sqrt(np.where(disc >= 0, disc, np.nan))) / (2.0 * a)
            z_side = oc[:, 2] + t_side * d[:, 2]
            t_side = np.where(np.abs(z_side) <= self.half_height, t_side, np.inf)
            t_top = (self.half_height - oc[:, 2]) / d[:, 2]
            t_bot = (-self.half_height - oc[:, 2]) / d[:, 2]

            def _in_disc(t):
                x = oc[:, 0] + t * d[:, 0]
                y = oc[:, 1] + t * d[:, 1]
                return np.where(x * x + y * y <= self.radius ** 2, t, np.inf)

            t_top = _in_disc(t_top)
            t_bot = _in_disc(t_bot)
        t = _first_positive(t_side, t_top, t_bot)
        hit_p = oc + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        normals = np.zeros_like(d)
        on_top = np.isfinite(t) & (t == t_top)
        on_bot = np.isfinite(t) & (t == t_bot) & ~on_top
        on_side = np.isfinite(t) & ~on_top & ~on_bot
        normals[on_top] = [0.0, 0.0, 1.0]
        normals[on_bot] = [0.0, 0.0, -1.0]
        radial = hit_p[on_side, :2] / self.radius
        normals[on_side, 0] = radial[:, 0]
        normals[on_side, 1] = radial[:, 1]
        return t, normals

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        side = 2.0 * np.pi * self.radius * 2.0 * self.half_height
        cap = np.pi * self.radius ** 2
        part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        rad = np.where(part == 0, self.radius, self.radius * np.sqrt(rng.uniform(0.0, 1.0, size=n)))
        z = np.where(
            part == 0,
            rng.uniform(-self.half_height, self.half_height, size=n),
            np.where(part == 1, self.half_height, -self.half_height),
        )
        pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
        return pts + np.asarray(self.center)

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        dx = np.linalg.norm(q[:, :2], axis=1) - self.radius
        dz = np.abs(q[:, 2]) - self.half_height
        dd = np.stack([dx, dz], axis=1)
        outside = np.linalg.norm(np.maximum(dd, 0.0), axis=1)
        inside = np.minimum(dd.max(axis=1), 0.0)
        return np.abs(outside + inside)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def area(self) -> float:
        return 4.0 * np.pi * self.radius ** 2

    def intersect(self, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        oc = o - np.asarray(self.center)
        a = np.einsum("ij,ij->i", d, d)
        b = 2.0 * np.einsum("ij,ij->i", d, oc)
        cc = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - 4.0 * a * cc
        with np.errstate(invalid="ignore"):
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            t = _first_positive((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a))
        hit_p = oc + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        normals = hit_p / self.radius
        return t, normals

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * self.radius + np.asarray(self.center)

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(p - np.asarray(self.center), axis=1) - self.radius)


@dataclass(frozen=True)
class Plane:
    """
    Bounded one-sided rectangle (floor or wall).

    Rays arriving from behind (direction along the normal) pass through, so a
    camera outside the room sees past the walls between it and the objects.
    """

    center: tuple
    normal: tuple
    u_axis: tuple
    half_u: float
    half_v: float
    kind: str = "wall"

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(np.asarray(self.normal), np.asarray(self.u_axis))

    def intersect(self, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = np.asarray(self.normal, dtype=np.float64)
        c = np.asarray(self.center, dtype=np.float64)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - o) @ n) / denom
        front = denom < 0.0
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d - c
        inside = (np.abs(p @ np.asarray(self.u_axis)) <= self.half_u) & \
                 (np.abs(p @ self.v_axis) <= self.half_v)
        t = np.where(front & inside & (t > T_MIN), t, np.inf)
        normals = np.broadcast_to(n, d.shape).copy()
        return t, normals

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": [float(x) for x in self.center],
            "normal": [float(x) for x in self.normal],
            "u_axis": [float(x) for x in self.u_axis],
            "half_u": float(self.half_u),
            "half_v": float(self.half_v),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Plane":
        return cls(
            center=tuple(d["center"]),
            normal=tuple(d["normal"]),
            u_axis=tuple(d["u_axis"]),
            half_u=d["half_u"],
            half_v=d["half_v"],
            kind=d["kind"],
        )
