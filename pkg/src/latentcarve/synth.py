"""Analytic synthetic scenes: exact ray-traced depth, masks, and textures.

This is the ground-truth oracle behind the benchmark suite. Primitives are
intersected analytically per pixel (no sampling error in depth), masks are
any-hit, and colors come from a procedural texture on object-frame surface
points. No neural components anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import ShapeMismatch
from .evalkit import ModelPoints
from .modeling import ObservedView

_T_MIN = 1e-9


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center) + self.radius)

    @property
    def area(self) -> float:
        return 4.0 * math.pi * self.radius**2

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - self.center
        a = (dirs * dirs).sum(axis=-1)
        b = 2.0 * (oc * dirs).sum(axis=-1)
        c = (oc * oc).sum(axis=-1) - self.radius**2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > _T_MIN, t0, t1)
        return np.where(hit & (t > _T_MIN), t, np.inf)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return ((points - self.center) ** 2).sum(axis=-1) <= self.radius**2

    def surface_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return geo.fibonacci_sphere(n) * self.radius + self.center


@dataclass(frozen=True, eq=False)
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "half_extents", np.asarray(self.half_extents, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", geo.quat_normalize(np.asarray(self.rotation, dtype=float)))

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center) + np.linalg.norm(self.half_extents))

    @property
    def area(self) -> float:
        a, b, c = self.half_extents * 2
        return 2.0 * (a * b + b * c + a * c)

    def _to_local(self, origins, dirs):
        qc = geo.quat_conj(self.rotation)
        return geo.quat_rotate(qc, origins - self.center), geo.quat_rotate(qc, dirs)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        o, d = self._to_local(origins, dirs)
        h = self.half_extents
        tiny = np.abs(d) < 1e-15
        d_safe = np.where(tiny, 1e-15, d)
        t1 = (-h - o) / d_safe
        t2 = (h - o) / d_safe
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        # parallel rays: inside the slab -> unbounded, outside -> miss
        inside_slab = np.abs(o) <= h
        lo = np.where(tiny, np.where(inside_slab, -np.inf, np.inf), lo)
        hi = np.where(tiny, np.where(inside_slab, np.inf, -np.inf), hi)
        tmin = lo.max(axis=-1)
        tmax = hi.min(axis=-1)
        t = np.where(tmin > _T_MIN, tmin, tmax)
        hit = (tmax >= tmin) & (t > _T_MIN)
        return np.where(hit, t, np.inf)

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = geo.quat_rotate(geo.quat_conj(self.rotation), points - self.center)
        return (np.abs(local) <= self.half_extents).all(axis=-1)

    def surface_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        hx, hy, hz = self.half_extents
        faces = [
            (np.array([1.0, 0, 0]), hy * hz), (np.array([-1.0, 0, 0]), hy * hz),
            (np.array([0, 1.0, 0]), hx * hz), (np.array([0, -1.0, 0]), hx * hz),
            (np.array([0, 0, 1.0]), hx * hy), (np.array([0, 0, -1.0]), hx * hy),
        ]
        areas = np.array([a for _, a in faces])
        counts = np.maximum(1, np.round(areas / areas.sum() * n).astype(int))
        pts = []
        for (normal, _), cnt in zip(faces, counts):
            axis = int(np.argmax(np.abs(normal)))
            others = [i for i in range(3) if i != axis]
            uv = rng.uniform(-1, 1, size=(cnt, 2))
            local = np.zeros((cnt, 3))
            local[:, axis] = normal[axis] * self.half_extents[axis]
            local[:, others[0]] = uv[:, 0] * self.half_extents[others[0]]
            local[:, others[1]] = uv[:, 1] * self.half_extents[others[1]]
            pts.append(local)
        local = np.concatenate(pts)
        return geo.quat_rotate(self.rotation, local) + self.center


@dataclass(frozen=True, eq=False)
class Cylinder:
    """Finite cylinder with axis along local z."""

    center: np.ndarray
    radius: float
    half_height: float
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", geo.quat_normalize(np.asarray(self.rotation, dtype=float)))

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center) + math.hypot(self.radius, self.half_height))

    @property
    def area(self) -> float:
        return 2 * math.pi * self.radius * (2 * self.half_height) + 2 * math.pi * self.radius**2

    def _to_local(self, origins, dirs):
        qc = geo.quat_conj(self.rotation)
        return geo.quat_rotate(qc, origins - self.center), geo.quat_rotate(qc, dirs)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        o, d = self._to_local(origins, dirs)
        best = np.full(o.shape[:-1], np.inf)
        # side surface
        a = d[..., 0] ** 2 + d[..., 1] ** 2
        b = 2 * (o[..., 0] * d[..., 0] + o[..., 1] * d[..., 1])
        c = o[..., 0] ** 2 + o[..., 1] ** 2 - self.radius**2
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > 1e-18)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        a_safe = np.where(a > 1e-18, a, 1.0)
        for sign in (-1.0, 1.0):
            t = (-b + sign * sq) / (2 * a_safe)
            z = o[..., 2] + t * d[..., 2]
            valid = ok & (t > _T_MIN) & (np.abs(z) <= self.half_height)
            best = np.where(valid & (t < best), t, best)
        # caps
        dz = d[..., 2]
        dz_safe = np.where(np.abs(dz) < 1e-15, 1e-15, dz)
        for zcap in (-self.half_height, self.half_height):
            t = (zcap - o[..., 2]) / dz_safe
            x = o[..., 0] + t * d[..., 0]
            y = o[..., 1] + t * d[..., 1]
            valid = (np.abs(dz) > 1e-15) & (t > _T_MIN) & (x * x + y * y <= self.radius**2)
            best = np.where(valid & (t < best), t, best)
        return best

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = geo.quat_rotate(geo.quat_conj(self.rotation), points - self.center)
        radial = local[..., 0] ** 2 + local[..., 1] ** 2 <= self.radius**2
        return radial & (np.abs(local[..., 2]) <= self.half_height)

    def surface_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        side_area = 2 * math.pi * self.radius * 2 * self.half_height
        n_side = max(1, int(round(n * side_area / self.area)))
        n_cap = max(1, (n - n_side) // 2)
        i = np.arange(n_side)
        phi = i * geo.GOLDEN_ANGLE
        z = -self.half_height + (i + 0.5) / n_side * 2 * self.half_height
        side = np.stack([self.radius * np.cos(phi), self.radius * np.sin(phi), z], axis=-1)
        caps = []
        for zcap in (-self.half_height, self.half_height):
            j = np.arange(n_cap)
            r = self.radius * np.sqrt((j + 0.5) / n_cap)
            th = j * geo.GOLDEN_ANGLE
            caps.append(np.stack([r * np.cos(th), r * np.sin(th), np.full(n_cap, zcap)], axis=-1))
        local = np.concatenate([side, *caps])
        return geo.quat_rotate(self.rotation, local) + self.center


# ---------------------------------------------------------------------------
# textures


def sinusoid_texture(frequency: float = 9.0, phase: float = 0.0):
    """Smooth RGB texture of object-frame position; good for PSNR tests."""
    freqs = frequency * np.array([[1.0, 0.3, 0.7], [0.2, 1.0, 0.5], [0.6, 0.8, 1.0]])
    phases = phase + np.array([0.0, 2.1, 4.2])

    def tex(points: np.ndarray) -> np.ndarray:
        arg = points @ freqs.T + phases
        return 0.5 + 0.5 * np.sin(2 * math.pi * arg) * 0.9

    return tex


def checker_texture(scale: float = 20.0):
    def tex(points: np.ndarray) -> np.ndarray:
        parity = np.floor(points * scale).sum(axis=-1) % 2
        base = np.where(parity[..., None] > 0.5, 0.85, 0.2)
        return np.broadcast_to(base, points.shape[:-1] + (3,)).copy()

    return tex


def make_texture(spec: dict | None):
    spec = spec or {"kind": "sinusoid"}
    kind = spec.get("kind", "sinusoid")
    if kind == "sinusoid":
        return sinusoid_texture(spec.get("frequency", 9.0), spec.get("phase", 0.0))
    if kind == "checker":
        return checker_texture(spec.get("scale", 20.0))
    raise ValueError("unknown texture kind %r" % kind)


# ---------------------------------------------------------------------------
# scene


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    primitives: list
    texture: dict | None = None

    @property
    def bounding_radius(self) -> float:
        return max(p.bounding_radius for p in self.primitives)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        best = np.full(origins.shape[:-1], np.inf)
        for prim in self.primitives:
            best = np.minimum(best, prim.intersect(origins, dirs))
        return best

    def contains(self, points: np.ndarray) -> np.ndarray:
        inside = np.zeros(points.shape[:-1], dtype=bool)
        for prim in self.primitives:
            inside |= prim.contains(points)
        return inside


def render_view(
    scene: SyntheticScene,
    intrinsics: geo.CameraIntrinsics,
    extrinsics: geo.RigidTransform,
    viewport: geo.Viewport | None = None,
) -> ObservedView:
    """Exact per-pixel depth/mask/color for one camera."""
    h, w = intrinsics.height, intrinsics.width
    u = np.arange(w) + 0.5
    v = np.arange(h) + 0.5
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack(
        [(uu - intrinsics.u0) / intrinsics.fu, (vv - intrinsics.v0) / intrinsics.fv, np.ones_like(uu)],
        axis=-1,
    )
    inv = extrinsics.inverse()
    origin_obj = inv.translation
    dirs_obj = geo.quat_rotate(inv.rotation, dirs_cam)
    t = scene.intersect(np.broadcast_to(origin_obj, dirs_obj.shape), dirs_obj)
    mask = np.isfinite(t)
    depth = np.where(mask, t, 0.0)  # dirs have unit z, so t is z-depth
    tex = make_texture(scene.texture)
    hits = origin_obj + np.where(mask, t, 1.0)[..., None] * dirs_obj
    color = np.where(mask[..., None], np.clip(tex(hits), 0.0, 1.0), 0.0)
    camera = geo.CameraParams(intrinsics, extrinsics, viewport or geo.Viewport.full(intrinsics))
    return ObservedView(color, mask.astype(float), depth, camera)


def model_points(scene: SyntheticScene, count: int = 2048, seed: int = 0) -> ModelPoints:
    """Surface samples (Fibonacci lattices, area-weighted) plus exact diameter."""
    rng = np.random.default_rng(seed)
    areas = np.array([p.area for p in scene.primitives])
    counts = np.maximum(8, np.round(areas / areas.sum() * count).astype(int))
    pts = np.concatenate([p.surface_points(c, rng) for p, c in zip(scene.primitives, counts)])
    diameter = 0.0
    chunk = 512
    for i in range(0, len(pts), chunk):
        d2 = ((pts[i : i + chunk, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        diameter = max(diameter, float(np.sqrt(d2.max())))
    return ModelPoints(pts, diameter)


# ---------------------------------------------------------------------------
# cameras and benchmark scenes


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> geo.RigidTransform:
    """Object-to-camera extrinsics for a camera at `eye` looking at `target`.

    Camera frame: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=float)
    f = np.asarray(target, dtype=float) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=float)
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(f, [1.0, 0.0, 0.0])
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(f, [0.0, 1.0, 0.0])
    right = right / np.linalg.norm(right)
    down = np.cross(f, right)
    r = np.stack([right, down, f])
    return geo.RigidTransform(geo.matrix_to_quat(r), -r @ eye)


def orbit_poses(n: int, distance: float, elevations=(0.35, -0.25), target=(0.0, 0.0, 0.0)) -> list:
    """Cameras on rings around the object, looking at the target."""
    target = np.asarray(target, dtype=float)
    poses = []
    per_ring = max(1, n // len(elevations))
    i = 0
    while len(poses) < n:
        elev = elevations[(i // per_ring) % len(elevations)]
        azim = 2 * math.pi * (i % per_ring) / per_ring + 0.35 * (i // per_ring)
        eye = target + distance * np.array(
            [math.cos(elev) * math.cos(azim), math.cos(elev) * math.sin(azim), math.sin(elev)]
        )
        poses.append(look_at(eye, target))
        i += 1
    return poses


def sphere_view_poses(n: int, distance: float, target=(0.0, 0.0, 0.0)) -> list:
    """Cameras on a full Fibonacci sphere (good coverage for carving)."""
    target = np.asarray(target, dtype=float)
    dirs = geo.fibonacci_sphere(n)
    return [look_at(target + distance * d, target) for d in dirs]


def random_asymmetric_scene(rng: np.random.Generator, scale: float = 0.1) -> SyntheticScene:
    """A composite primitive object with strongly chiral shape, radius ~scale.

    The pose objective sees geometry only (depth, mask, latent occupancy), so
    benchmark objects must break every approximate rotational symmetry in
    shape: attachments of clearly different sizes sit on adjacent (never
    opposite) sides of an uneven core box.
    """
    core = Box(
        center=np.zeros(3),
        half_extents=np.array(
            [rng.uniform(0.62, 0.78), rng.uniform(0.4, 0.5), rng.uniform(0.24, 0.32)]
        )
        * scale,
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
    )
    hx, hy, hz = core.half_extents
    # big blob on the +x end
    sphere = Sphere(center=np.array([hx, 0.2 * hy, 0.1 * hz]), radius=rng.uniform(0.42, 0.52) * scale)
    # long thin spar out of the +y face, leaning toward +z
    lean = rng.uniform(0.3, 0.5)
    axis = np.array([0.0, 1.0, lean])
    axis = axis / np.linalg.norm(axis)
    spar = Cylinder(
        center=np.array([-0.4 * hx, hy, 0.4 * hz]),
        radius=rng.uniform(0.12, 0.17) * scale,
        half_height=rng.uniform(0.55, 0.7) * scale,
        rotation=geo.quat_from_two_vectors(np.array([0.0, 0.0, 1.0]), axis),
    )
    # small cube on the -x top corner
    nub = Box(
        center=np.array([-hx, -0.5 * hy, hz]),
        half_extents=np.full(3, rng.uniform(0.16, 0.22)) * scale,
        rotation=geo.quat_exp(rng.uniform(-0.3, 0.3, 3)),
    )
    phase = float(rng.uniform(0, 2 * math.pi))
    return SyntheticScene([core, sphere, spar, nub], texture={"kind": "sinusoid", "phase": phase})


# ---------------------------------------------------------------------------
# scene-spec parsing (cmd_synth)


def scene_from_spec(spec: dict) -> SyntheticScene:
    prims = []
    for p in spec["primitives"]:
        kind = p["kind"]
        if kind == "sphere":
            prims.append(Sphere(np.array(p["center"]), float(p["radius"])))
        elif kind == "box":
            prims.append(
                Box(
                    np.array(p["center"]),
                    np.array(p["half_extents"]),
                    np.array(p.get("rotation", [1.0, 0, 0, 0])),
                )
            )
        elif kind == "cylinder":
            prims.append(
                Cylinder(
                    np.array(p["center"]),
                    float(p["radius"]),
                    float(p["half_height"]),
                    np.array(p.get("rotation", [1.0, 0, 0, 0])),
                )
            )
        else:
            raise ShapeMismatch("unknown primitive kind %r" % kind)
    return SyntheticScene(prims, texture=spec.get("texture"))
