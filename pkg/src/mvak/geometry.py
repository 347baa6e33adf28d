"""Cameras, raymaps, procedural scenes, and the software rasterizer.

Coordinate convention (fixed once, enforced by tests): right-handed, y-up,
azimuth 0 looks along -z, azimuth grows toward +x. Scenes live inside the unit
sphere; the orthographic film is FILM_EXTENT world units wide so everything fits
with margin. Background pixels are white in RGB and zero in the geometry maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .numerics import DomainError, Rng

FILM_EXTENT = 2.2
CAMERA_DISTANCE = 2.0
AMBIENT = 0.2

ORTHOGRAPHIC = "orthographic"
PERSPECTIVE = "perspective"

CAMERA_GUIDED = "camera_guided"
GEOMETRY_GUIDED = "geometry_guided"
ANCHOR = "anchor"


@dataclass(frozen=True)
class CameraPose:
    elevation: float
    azimuth: float
    distance: float = CAMERA_DISTANCE
    projection: str = ORTHOGRAPHIC
    fov: float = 50.0
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward, position), orthonormal, right-handed."""
        e = math.radians(self.elevation)
        a = math.radians(self.azimuth)
        toward_cam = np.array([math.cos(e) * math.sin(a), math.sin(e), math.cos(e) * math.cos(a)])
        look = np.asarray(self.look_at, dtype=np.float64)
        position = look + self.distance * toward_cam
        forward = -toward_cam
        # Analytic right vector: cross(forward, world_up) normalized, continuous
        # through the elevation = +-90 poles.
        right = np.array([math.cos(a), 0.0, -math.sin(a)])
        up = np.cross(right, forward)
        return right, up, forward, position


def make_camera(elevation: float, azimuth: float, projection: str = ORTHOGRAPHIC,
                distance: float = CAMERA_DISTANCE, fov: float = 50.0) -> CameraPose:
    if not -90.0 <= elevation <= 90.0:
        raise DomainError(f"elevation {elevation} outside [-90, 90]")
    if projection not in (ORTHOGRAPHIC, PERSPECTIVE):
        raise DomainError(f"unknown projection {projection!r}")
    azimuth = azimuth % 360.0
    return CameraPose(elevation, azimuth, distance, projection, fov)


def camera_set(mode: str) -> list[CameraPose]:
    """Target-view cameras for each generation mode."""
    if mode == CAMERA_GUIDED:
        return [make_camera(0, az) for az in (0, 45, 90, 180, 270, 315)]
    if mode == GEOMETRY_GUIDED:
        views = [make_camera(0, az) for az in (0, 90, 180, 270)]
        views.append(make_camera(90, 0))
        views.append(make_camera(-90, 0))
        return views
    if mode == ANCHOR:
        # Two elevation rings (0 and 30 degrees), azimuth every 45, alternating.
        return [make_camera(0 if k % 2 == 0 else 30, 45 * k) for k in range(8)]
    raise DomainError(f"unknown camera set mode {mode!r}")


def _pixel_centers(h: int, w: int, film_extent: float) -> tuple[np.ndarray, np.ndarray]:
    us = ((np.arange(w) + 0.5) / w - 0.5) * film_extent
    vs = (0.5 - (np.arange(h) + 0.5) / h) * film_extent
    return us, vs


def _focal(cam: CameraPose, film_extent: float) -> float:
    return film_extent / (2.0 * math.tan(math.radians(cam.fov) / 2.0))


def camera_rays(cam: CameraPose, h: int, w: int,
                film_extent: float = FILM_EXTENT) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (origins, directions), each [h, w, 3], through pixel centers."""
    right, up, forward, position = cam.frame()
    us, vs = _pixel_centers(h, w, film_extent)
    uu = us[None, :, None]
    vv = vs[:, None, None]
    if cam.projection == ORTHOGRAPHIC:
        origins = position[None, None, :] + uu * right + vv * up
        dirs = np.broadcast_to(forward, (h, w, 3)).copy()
    else:
        origins = np.broadcast_to(position, (h, w, 3)).copy()
        dirs = uu * right + vv * up + _focal(cam, film_extent) * forward
        dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    return origins, dirs


def compute_raymap(cam: CameraPose, h: int, w: int, film_extent: float = FILM_EXTENT) -> np.ndarray:
    """Raymap [6, h, w]: channels 0-2 ray origin, 3-5 unit ray direction."""
    if h < 1 or w < 1:
        raise DomainError("raymap extents must be >= 1")
    if film_extent <= 0:
        raise DomainError("film_extent must be positive")
    origins, dirs = camera_rays(cam, h, w, film_extent)
    return np.concatenate([origins.transpose(2, 0, 1), dirs.transpose(2, 0, 1)], axis=0)


def project_point(cam: CameraPose, point: np.ndarray, h: int, w: int,
                  film_extent: float = FILM_EXTENT) -> tuple[float, float]:
    """Continuous (row, col) pixel coordinates of a world point."""
    right, up, forward, position = cam.frame()
    rel = np.asarray(point, dtype=np.float64) - position
    if cam.projection == ORTHOGRAPHIC:
        u = float(rel @ right)
        v = float(rel @ up)
    else:
        depth = float(rel @ forward)
        f = _focal(cam, film_extent)
        u = float(rel @ right) / depth * f
        v = float(rel @ up) / depth * f
    col = (u / film_extent + 0.5) * w - 0.5
    row = (0.5 - v / film_extent) * h - 0.5
    return row, col


def epipolar_row_property(cam_i: CameraPose, cam_j: CameraPose, point: np.ndarray,
                          h: int = 32, film_extent: float = FILM_EXTENT) -> bool:
    """True iff the point lands on the same pixel row in both views (+-0.5 px).

    Defined only for elevation-0 orthographic cameras sharing up vector and film
    extent; those are exactly the views whose epipolar lines are image rows.
    """
    for cam in (cam_i, cam_j):
        if cam.projection != ORTHOGRAPHIC:
            raise DomainError("epipolar_row_property requires orthographic cameras")
        if cam.elevation != 0.0:
            raise DomainError("epipolar_row_property requires elevation 0")
    row_i, _ = project_point(cam_i, point, h, 1, film_extent)
    row_j, _ = project_point(cam_j, point, h, 1, film_extent)
    return abs(row_i - row_j) <= 0.5


# --- procedural scenes -------------------------------------------------------

CUBE = "cube"
SPHERE = "sphere"
CYLINDER = "cylinder"

_FACE_SLOTS = {CUBE: 6, SPHERE: 4, CYLINDER: 6}
# Conservative bounding-sphere factor (exact for a cube's diagonal).
_BOUND_FACTOR = math.sqrt(3.0)


@dataclass
class Primitive:
    kind: str
    center: np.ndarray
    half_extent: float
    rotation: np.ndarray  # local -> world
    albedos: np.ndarray  # [slots, 3]
    color_names: tuple[str, ...]

    def bounding_radius(self) -> float:
        return self.half_extent * _BOUND_FACTOR


@dataclass
class Scene:
    primitives: list[Primitive]
    caption_tokens: list[int] = field(default_factory=list)


def _random_rotation(rng: Rng) -> np.ndarray:
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def generate_scene(rng: Rng) -> Scene:
    """1-3 primitives inside the unit sphere with distinct per-face albedos."""
    count = int(rng.integers(1, 4))
    prims = []
    descr = []
    for _ in range(count):
        kind = vocab.KINDS[int(rng.integers(0, len(vocab.KINDS)))]
        half_extent = float(rng.uniform(0.2, 0.45))
        margin = 1.0 - half_extent * _BOUND_FACTOR
        direction = rng.normal(size=3)
        direction = direction / np.linalg.norm(direction)
        radius = margin * float(rng.uniform(0.0, 1.0)) ** (1.0 / 3.0)
        center = direction * radius
        rotation = _random_rotation(rng)
        slots = _FACE_SLOTS[kind]
        idx = rng.choice(len(vocab.COLORS), size=slots, replace=False)
        names = tuple(vocab.COLORS[i] for i in idx)
        albedos = np.array([vocab.COLOR_RGB[n] for n in names])
        prims.append(Primitive(kind, center, half_extent, rotation, albedos, names))
        descr.append((names[0], kind))
    return Scene(prims, vocab.caption_for(descr))


# --- rasterization ------------------------------------------------------------

@dataclass
class RenderMaps:
    rgb: np.ndarray  # [3, h, w] in [0, 1]
    position: np.ndarray  # [3, h, w], zero outside mask
    normal: np.ndarray  # [3, h, w], unit inside mask
    mask: np.ndarray  # [1, h, w] binary
    depth: np.ndarray  # [1, h, w], +inf outside mask


_MISS = np.inf


def _finite(t):
    # Miss-lane t zeroed so products stay finite; those lanes are masked out.
    return np.where(np.isfinite(t), t, 0.0)


def _intersect_sphere(o, d, radius):
    a = np.sum(d * d, axis=-1)
    b = 2.0 * np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - 4.0 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = (-b - sq) / (2.0 * a)
    t = np.where(ok & (t > 1e-9), t, _MISS)
    p = o + _finite(t)[..., None] * d  # miss lanes are discarded later
    n = p / radius
    y = np.clip(p[..., 1] / radius, -1.0, 1.0)
    band = np.minimum(((y + 1.0) * 0.5 * 4).astype(np.int64), 3)
    return t, n, band


def _intersect_cube(o, d, half):
    safe_d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    t1 = (-half - o) / safe_d
    t2 = (half - o) / safe_d
    tmin = np.max(np.minimum(t1, t2), axis=-1)
    tmax = np.min(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    t = np.where(hit, tmin, _MISS)
    p = o + _finite(t)[..., None] * d
    axis = np.argmax(np.abs(p), axis=-1)
    sign = np.take_along_axis(p, axis[..., None], axis=-1)[..., 0] >= 0
    n = np.zeros_like(p)
    np.put_along_axis(n, axis[..., None], np.where(sign, 1.0, -1.0)[..., None], axis=-1)
    face = axis * 2 + np.where(sign, 0, 1)
    return t, n, face


def _intersect_cylinder(o, d, half):
    radius = 0.7 * half
    a = d[..., 0] ** 2 + d[..., 2] ** 2
    b = 2.0 * (o[..., 0] * d[..., 0] + o[..., 2] * d[..., 2])
    c = o[..., 0] ** 2 + o[..., 2] ** 2 - radius * radius
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-18)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    safe_a = np.where(a > 1e-18, a, 1.0)
    t_side = np.where(ok, (-b - sq) / (2 * safe_a), _MISS)
    y_side = o[..., 1] + t_side * d[..., 1]
    t_side = np.where((t_side > 1e-9) & (np.abs(y_side) <= half), t_side, _MISS)

    safe_dy = np.where(np.abs(d[..., 1]) < 1e-12, 1e-12, d[..., 1])
    best_cap = np.full(o.shape[:-1], _MISS)
    cap_sign = np.zeros(o.shape[:-1])
    for s in (1.0, -1.0):
        t_cap = (s * half - o[..., 1]) / safe_dy
        p = o + t_cap[..., None] * d
        inside = p[..., 0] ** 2 + p[..., 2] ** 2 <= radius * radius
        valid = (t_cap > 1e-9) & inside
        better = valid & (t_cap < best_cap)
        best_cap = np.where(better, t_cap, best_cap)
        cap_sign = np.where(better, s, cap_sign)

    t = np.minimum(t_side, best_cap)
    use_side = t_side <= best_cap
    p = o + _finite(t)[..., None] * d  # miss lanes are discarded later
    n_side = np.stack([p[..., 0], np.zeros_like(t), p[..., 2]], axis=-1)
    norm = np.linalg.norm(n_side, axis=-1, keepdims=True)
    n_side = n_side / np.where(norm > 0, norm, 1.0)
    n_cap = np.stack([np.zeros_like(t), cap_sign, np.zeros_like(t)], axis=-1)
    n = np.where(use_side[..., None], n_side, n_cap)
    quadrant = ((np.arctan2(p[..., 2], p[..., 0]) + math.pi) / (math.pi / 2)).astype(np.int64)
    quadrant = np.clip(quadrant, 0, 3)
    face = np.where(use_side, 2 + quadrant, np.where(cap_sign > 0, 0, 1))
    return t, n, face


_INTERSECTORS = {SPHERE: _intersect_sphere, CUBE: _intersect_cube, CYLINDER: _intersect_cylinder}


def rasterize(scene: Scene, cam: CameraPose, h: int, w: int,
              film_extent: float = FILM_EXTENT) -> RenderMaps:
    """Nearest-hit render with flat headlight shading and a white background."""
    if not scene.primitives:
        raise DomainError("cannot rasterize an empty scene")
    origins, dirs = camera_rays(cam, h, w, film_extent)

    depth = np.full((h, w), _MISS)
    normal = np.zeros((h, w, 3))
    position = np.zeros((h, w, 3))
    albedo = np.zeros((h, w, 3))

    for prim in scene.primitives:
        o_local = (origins - prim.center) @ prim.rotation
        d_local = dirs @ prim.rotation
        t, n_local, face = _INTERSECTORS[prim.kind](o_local, d_local, prim.half_extent)
        closer = t < depth
        if not closer.any():
            continue
        n_world = n_local @ prim.rotation.T
        p_world = origins + _finite(t)[..., None] * dirs
        face = np.clip(face, 0, prim.albedos.shape[0] - 1)
        depth = np.where(closer, t, depth)
        normal = np.where(closer[..., None], n_world, normal)
        position = np.where(closer[..., None], p_world, position)
        albedo = np.where(closer[..., None], prim.albedos[face], albedo)

    mask = np.isfinite(depth)
    shade = np.maximum(AMBIENT, np.sum(normal * -dirs, axis=-1))
    rgb = albedo * shade[..., None]
    rgb = np.where(mask[..., None], rgb, 1.0)
    rgb = np.clip(rgb, 0.0, 1.0)
    normal = np.where(mask[..., None], normal, 0.0)
    position = np.where(mask[..., None], position, 0.0)

    return RenderMaps(
        rgb=rgb.transpose(2, 0, 1),
        position=position.transpose(2, 0, 1),
        normal=normal.transpose(2, 0, 1),
        mask=mask[None].astype(np.float64),
        depth=depth[None],
    )


def geometry_cond_maps(maps: RenderMaps) -> np.ndarray:
    """Position and normal stacked as the 6-channel geometry conditioning."""
    return np.concatenate([maps.position, maps.normal], axis=0)
