"""Synthetic shape families built from unions of analytic primitives.

Every shape is a dense surface sample with outward normals, normalized into
the ball of radius 0.5 around the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import TYPE_CHECKING, Protocol

import numpy as np

from .const import NORMALIZATION_RADIUS, SURFACE_SAMPLES
from .exceptions import ConfigError
from .geometry import euler_to_matrix
from .types import ShapeFamily

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

_THOMSEN_P = 1.6075


class Primitive(Protocol):
    """Closed analytic surface."""

    @property
    def area(self) -> float:
        """Surface area."""
        ...

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance (negative inside) of world points (M, 3)."""
        ...

    def sample(
        self, rng: np.random.Generator, n: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """`n` uniform surface points and their outward normals, in world frame."""
        ...


def _vec(values: Sequence[float]) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(3)


@dataclass(frozen=True, kw_only=True)
class Box:
    """Oriented box given by its center and half extents."""

    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def area(self) -> float:
        """Surface area."""
        hx, hy, hz = self.half_extents
        return float(8.0 * (hx * hy + hy * hz + hx * hz))

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Exact signed distance."""
        local = (points - self.center) @ self.rotation
        q = np.abs(local) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def sample(
        self, rng: np.random.Generator, n: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Uniform samples over the six faces."""
        h = self.half_extents
        face_areas = np.repeat([h[1] * h[2], h[0] * h[2], h[0] * h[1]], 2)
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        local = rng.uniform(-h, h, size=(n, 3))
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        rows = np.arange(n)
        local[rows, axis] = sign * h[axis]
        normals = np.zeros((n, 3))
        normals[rows, axis] = sign
        return local @ self.rotation.T + self.center, normals @ self.rotation.T


@dataclass(frozen=True, kw_only=True)
class Ellipsoid:
    """Oriented ellipsoid given by its center and semi-axes."""

    center: np.ndarray
    radii: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def area(self) -> float:
        """Surface area (Knud Thomsen's approximation, exact for spheres)."""
        a, b, c = self.radii**_THOMSEN_P
        return float(4.0 * math.pi * ((a * b + a * c + b * c) / 3.0) ** (1.0 / _THOMSEN_P))

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Approximate signed distance, exact on the surface and for spheres."""
        local = (points - self.center) @ self.rotation
        k0 = np.linalg.norm(local / self.radii, axis=-1)
        k1 = np.linalg.norm(local / self.radii**2, axis=-1)
        return np.where(k1 > 0, k0 * (k0 - 1.0) / np.maximum(k1, 1e-300), -self.radii.min())

    def sample(
        self, rng: np.random.Generator, n: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Area-uniform samples by rejection from the mapped unit sphere."""
        a, b, c = self.radii
        limit = max(b * c, a * c, a * b)
        chunks: list[np.ndarray] = []
        count = 0
        while count < n:
            u = rng.normal(size=(2 * n, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            stretch = np.sqrt(
                (b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2
            )
            kept = u[rng.uniform(size=2 * n) * limit < stretch]
            chunks.append(kept)
            count += kept.shape[0]
        u = np.concatenate(chunks)[:n]
        local = u * self.radii
        normals = local / self.radii**2
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return local @ self.rotation.T + self.center, normals @ self.rotation.T


@dataclass(frozen=True, kw_only=True)
class Cylinder:
    """Capped cylinder along the local z axis."""

    center: np.ndarray
    radius: float
    height: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def area(self) -> float:
        """Surface area including both caps."""
        return 2.0 * math.pi * self.radius * (self.height + self.radius)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Exact signed distance."""
        local = (points - self.center) @ self.rotation
        d = np.stack(
            [
                np.linalg.norm(local[:, :2], axis=-1) - self.radius,
                np.abs(local[:, 2]) - self.height / 2.0,
            ],
            axis=-1,
        )
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        return outside + np.minimum(d.max(axis=-1), 0.0)

    def sample(
        self, rng: np.random.Generator, n: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Uniform samples over the side and the caps."""
        side = 2.0 * math.pi * self.radius * self.height
        cap = math.pi * self.radius**2
        part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
        z = rng.uniform(-self.height / 2.0, self.height / 2.0, size=n)
        rho = self.radius * np.sqrt(rng.uniform(size=n))
        ring = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        on_side = part == 0
        radial = np.where(on_side, self.radius, rho)[:, None] * ring
        height = np.where(on_side, z, np.where(part == 1, 1.0, -1.0) * self.height / 2.0)
        local = np.column_stack([radial, height])
        normals = np.zeros((n, 3))
        normals[on_side, :2] = ring[on_side]
        normals[part == 1, 2] = 1.0
        normals[part == 2, 2] = -1.0  # noqa: PLR2004
        return local @ self.rotation.T + self.center, normals @ self.rotation.T


@dataclass(frozen=True, kw_only=True, eq=False)
class Shape:
    """Surface sample of a primitive union, normalized into the 0.5 ball.

    ``center`` and ``scale`` map the primitives' frame to the normalized
    frame: ``p_normalized = (p - center) * scale``.
    """

    points: np.ndarray
    normals: np.ndarray
    primitives: tuple[Primitive, ...]
    center: np.ndarray
    scale: float

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of the union, in normalized units."""
        original = np.atleast_2d(np.asarray(points, dtype=np.float64)) / self.scale + self.center
        return union_sdf(self.primitives, original) * self.scale

    @classmethod
    def from_primitives(
        cls,
        rng: np.random.Generator,
        primitives: Sequence[Primitive],
        num_points: int = SURFACE_SAMPLES,
    ) -> Shape:
        """Sample the surface of a union of primitives.

        Points of a primitive lying strictly inside another are dropped, so
        every kept point is on the union surface.
        """
        prims = tuple(primitives)
        areas = np.array([p.area for p in prims])
        chunks: list[tuple[np.ndarray, np.ndarray]] = []
        count = 0
        while count < num_points:
            per_primitive = rng.multinomial(2 * num_points, areas / areas.sum())
            for i, (prim, n) in enumerate(zip(prims, per_primitive, strict=True)):
                if n == 0:
                    continue
                pts, nrm = prim.sample(rng, int(n))
                others = [q for j, q in enumerate(prims) if j != i]
                keep = (
                    union_sdf(others, pts) >= 0.0
                    if others
                    else np.ones(pts.shape[0], dtype=bool)
                )
                chunks.append((pts[keep], nrm[keep]))
                count += int(keep.sum())
        points = np.concatenate([c[0] for c in chunks])[:num_points]
        normals = np.concatenate([c[1] for c in chunks])[:num_points]
        center = (points.min(axis=0) + points.max(axis=0)) / 2.0
        scale = NORMALIZATION_RADIUS / float(np.linalg.norm(points - center, axis=1).max())
        return cls(
            points=(points - center) * scale,
            normals=normals,
            primitives=prims,
            center=center,
            scale=scale,
        )


def union_sdf(primitives: Sequence[Primitive], points: np.ndarray) -> np.ndarray:
    """Signed distance of the union: minimum over the primitives."""
    return np.min(np.stack([p.sdf(points) for p in primitives]), axis=0)


def _leg_boxes(
    rng: np.random.Generator, half_x: float, half_y: float, top: float, width: float
) -> list[Primitive]:
    inset = rng.uniform(0.0, 0.1)
    return [
        Box(
            center=_vec([sx * (half_x - width - inset), sy * (half_y - width - inset), top / 2.0]),
            half_extents=_vec([width, width, top / 2.0]),
        )
        for sx in (-1.0, 1.0)
        for sy in (-1.0, 1.0)
    ]


def _box_union(rng: np.random.Generator) -> list[Primitive]:
    body = Box(center=np.zeros(3), half_extents=rng.uniform([0.3, 0.2, 0.4], [0.5, 0.35, 0.8]))
    prims: list[Primitive] = [body]
    for _ in range(int(rng.integers(1, 4))):
        half = rng.uniform(0.05, 0.25, size=3)
        offset = rng.uniform(-1.0, 1.0, size=3) * body.half_extents
        prims.append(Box(center=offset, half_extents=half))
    return prims


def _ellipsoid_union(rng: np.random.Generator) -> list[Primitive]:
    hull = Ellipsoid(center=np.zeros(3), radii=rng.uniform([0.6, 0.15, 0.1], [0.9, 0.25, 0.2]))
    prims: list[Primitive] = [hull]
    for _ in range(int(rng.integers(1, 3))):
        radii = rng.uniform([0.1, 0.08, 0.08], [0.3, 0.15, 0.2])
        x = rng.uniform(-0.5, 0.4) * hull.radii[0]
        prims.append(Ellipsoid(center=_vec([x, 0.0, hull.radii[2] * 0.8]), radii=radii))
    return prims


def _cylinder_lamp(rng: np.random.Generator) -> list[Primitive]:
    height = rng.uniform(0.8, 1.4)
    base_r = rng.uniform(0.15, 0.3)
    shade_r = rng.uniform(0.2, 0.4)
    shade_h = rng.uniform(0.2, 0.4)
    prims: list[Primitive] = [
        Cylinder(center=_vec([0, 0, 0.025]), radius=base_r, height=0.05),
        Cylinder(center=_vec([0, 0, height / 2]), radius=rng.uniform(0.02, 0.04), height=height),
    ]
    if rng.uniform() < 0.5:  # noqa: PLR2004
        prims.append(Cylinder(center=_vec([0, 0, height]), radius=shade_r, height=shade_h))
    else:
        prims.append(
            Ellipsoid(center=_vec([0, 0, height]), radii=_vec([shade_r, shade_r, shade_h]))
        )
    return prims


def _tabletop(rng: np.random.Generator) -> list[Primitive]:
    half_x, half_y = rng.uniform(0.4, 0.8), rng.uniform(0.3, 0.6)
    height = rng.uniform(0.5, 0.8)
    thickness = rng.uniform(0.02, 0.06)
    top = Box(
        center=_vec([0, 0, height + thickness]),
        half_extents=_vec([half_x, half_y, thickness]),
    )
    return [top, *_leg_boxes(rng, half_x, half_y, height, rng.uniform(0.02, 0.05))]


def _wing_body(rng: np.random.Generator) -> list[Primitive]:
    length = rng.uniform(0.7, 1.0)
    body_r = rng.uniform(0.07, 0.12)
    span = rng.uniform(0.6, 0.95)
    return [
        Ellipsoid(center=np.zeros(3), radii=_vec([length, body_r, body_r])),
        Box(
            center=_vec([rng.uniform(-0.1, 0.15), 0, 0]),
            half_extents=_vec([rng.uniform(0.1, 0.2), span, 0.015]),
        ),
        Box(
            center=_vec([-length * 0.85, 0, body_r]),
            half_extents=_vec([0.06, rng.uniform(0.15, 0.3), 0.01]),
        ),
        Box(
            center=_vec([-length * 0.85, 0, body_r + 0.1]),
            half_extents=_vec([0.06, 0.01, 0.1]),
        ),
    ]


def _chair(rng: np.random.Generator) -> list[Primitive]:
    half = rng.uniform(0.2, 0.3)
    seat_h = rng.uniform(0.4, 0.5)
    back_h = rng.uniform(0.35, 0.6)
    return [
        Box(center=_vec([0, 0, seat_h + 0.03]), half_extents=_vec([half, half, 0.03])),
        Box(
            center=_vec([-half + 0.03, 0, seat_h + 0.06 + back_h / 2]),
            half_extents=_vec([0.03, half, back_h / 2]),
        ),
        *_leg_boxes(rng, half, half, seat_h, rng.uniform(0.02, 0.035)),
    ]


def _couch(rng: np.random.Generator) -> list[Primitive]:
    half_x, half_y = rng.uniform(0.3, 0.4), rng.uniform(0.7, 1.0)
    seat_h = rng.uniform(0.2, 0.3)
    arm = rng.uniform(0.06, 0.12)
    back_t = rng.uniform(0.08, 0.15)
    return [
        Box(center=_vec([0, 0, seat_h / 2]), half_extents=_vec([half_x, half_y, seat_h / 2])),
        Box(
            center=_vec([-half_x + back_t, 0, seat_h + 0.2]),
            half_extents=_vec([back_t, half_y, 0.2]),
        ),
        *(
            Box(
                center=_vec([0, sy * (half_y - arm), seat_h + 0.1]),
                half_extents=_vec([half_x, arm, 0.1]),
            )
            for sy in (-1.0, 1.0)
        ),
    ]


def _car_body(rng: np.random.Generator) -> list[Primitive]:
    half_x, half_y = rng.uniform(0.8, 1.0), rng.uniform(0.35, 0.45)
    wheel_r = rng.uniform(0.12, 0.18)
    lower_h = rng.uniform(0.12, 0.2)
    wheel_axis = euler_to_matrix(np.array([math.pi / 2, 0.0, 0.0]))
    return [
        Box(
            center=_vec([0, 0, wheel_r + lower_h]),
            half_extents=_vec([half_x, half_y, lower_h]),
        ),
        Box(
            center=_vec([rng.uniform(-0.2, 0.1), 0, wheel_r + 2 * lower_h + 0.12]),
            half_extents=_vec([half_x * rng.uniform(0.4, 0.6), half_y * 0.9, 0.12]),
        ),
        *(
            Cylinder(
                center=_vec([sx * half_x * 0.65, sy * half_y, wheel_r]),
                radius=wheel_r,
                height=0.1,
                rotation=wheel_axis,
            )
            for sx in (-1.0, 1.0)
            for sy in (-1.0, 1.0)
        ),
    ]


FAMILY_BUILDERS: dict[ShapeFamily, Callable[[np.random.Generator], list[Primitive]]] = {
    ShapeFamily.BOX_UNION: _box_union,
    ShapeFamily.ELLIPSOID_UNION: _ellipsoid_union,
    ShapeFamily.CYLINDER_LAMP: _cylinder_lamp,
    ShapeFamily.TABLETOP: _tabletop,
    ShapeFamily.WING_BODY: _wing_body,
    ShapeFamily.CHAIR: _chair,
    ShapeFamily.COUCH: _couch,
    ShapeFamily.CAR_BODY: _car_body,
}


def generate_shape(
    rng: np.random.Generator,
    family: ShapeFamily | str,
    num_points: int = SURFACE_SAMPLES,
) -> Shape:
    """Draw a random shape of a family.

    Parameters
    ----------
    rng : numpy.random.Generator
        Source of all randomness; a fixed seed yields an identical shape.
    family : ShapeFamily or str
        One of the shape families.
    num_points : int, optional
        Surface sample size, by default 20000.

    Raises
    ------
    ConfigError
        If the family is unknown.
    """
    try:
        builder = FAMILY_BUILDERS[ShapeFamily(family)]
    except ValueError as e:
        msg = f"Unknown shape family {family!r}"
        raise ConfigError(msg) from e
    return Shape.from_primitives(rng, builder(rng), num_points)
