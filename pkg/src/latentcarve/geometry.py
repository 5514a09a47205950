"""Pinhole camera model, quaternion pose algebra, viewport crops, and sampling lattices.

Conventions used throughout the package:

- quaternions are scalar-first ``[w, x, y, z]`` and unit norm unless noted;
- images are row-major ``(H, W[, C])``; continuous pixel coordinates ``(u, v)``
  run along columns / rows respectively and the center of pixel ``(i, j)`` is
  at ``(i + 0.5, j + 0.5)``;
- camera frame: x right, y down, z forward (depth); depth maps store z in
  meters with 0 meaning "no measurement";
- rotations are parameterized for optimization by the log quaternion
  ``omega`` with ``q = (cos|w|, sin|w| * w/|w|)``, i.e. rotation angle
  ``2 * |omega|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyViewport, NonPositiveDepth

MIN_DEPTH = 1e-9
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


# ---------------------------------------------------------------------------
# quaternions


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b; broadcasts over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Pick the double-cover representative with w >= 0.

    Ties at w == 0 take the sign making the first nonzero vector component
    positive, so canonicalization is deterministic.
    """
    q = np.asarray(q, dtype=float)
    sign = np.sign(q[..., 0])
    for axis in (1, 2, 3):
        sign = np.where(sign == 0.0, np.sign(q[..., axis]), sign)
    sign = np.where(sign == 0.0, 1.0, sign)
    return q * sign[..., None]


def quat_rotate(q: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Rotate points (...,3) by unit quaternions (...,4)."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(points, dtype=float)
    w = q[..., 0:1]
    v = q[..., 1:4]
    # q p q* expanded: p + 2w (v x p) + 2 v x (v x p)
    vxp = np.cross(v, p)
    return p + 2.0 * w * vxp + 2.0 * np.cross(v, vxp)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (...,3,3) for unit quaternions (...,4)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_exp(omega: np.ndarray) -> np.ndarray:
    """Exponential map: q = (cos|w|, sin|w| * w/|w|), series limit near zero."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    small = theta < 1e-8
    # sin(theta)/theta with the small-angle limit 1
    k = np.where(small, 1.0, np.sin(theta) / np.where(small, 1.0, theta))
    q = np.concatenate([np.cos(theta), k * omega], axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_log(q: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Inverse of quat_exp on the principal branch (|omega| <= pi/2).

    The input is canonicalized to w >= 0 first, so the same rotation always
    maps to the same omega. Non-unit input outside `tol` is rejected.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norm - 1.0) > tol):
        raise ValueError("quat_log requires unit quaternions (|norm - 1| <= %g)" % tol)
    q = quat_canonical(q / norm[..., None])
    vec = q[..., 1:4]
    s = np.linalg.norm(vec, axis=-1, keepdims=True)
    theta = np.arctan2(s, q[..., 0:1])
    factor = np.where(s < 1e-12, 1.0, theta / np.where(s < 1e-12, 1.0, s))
    return factor * vec


def quat_jacobian(omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """q = exp(omega) together with dq/domega of shape (4, 3)."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    q = quat_exp(omega)
    if theta < 1e-6:
        a = 1.0 - theta * theta / 6.0  # sin(t)/t
        b = -1.0 / 3.0 + theta * theta / 30.0  # (t cos t - sin t)/t^3
    else:
        a = math.sin(theta) / theta
        b = (theta * math.cos(theta) - math.sin(theta)) / theta**3
    dq = np.empty((4, 3))
    dq[0] = -a * omega
    dq[1:] = a * np.eye(3) + b * np.outer(omega, omega)
    return q, dq


_DR_DQ = None


def _rotmat_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/dq as a (4, 3, 3) stack of partials."""
    w, x, y, z = q
    return 2.0 * np.array(
        [
            [[0, -z, y], [z, 0, -x], [-y, x, 0]],
            [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
            [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
            [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
        ]
    )


def rotation_jacobian(omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix R(exp(omega)) and dR/domega as a (3, 3, 3) stack.

    Index convention: result[a] is the partial of R with respect to omega_a.
    """
    q, dq = quat_jacobian(omega)
    r = quat_to_matrix(q)
    dr_dq = _rotmat_quat_jacobian(q)
    dr = np.einsum("cij,ca->aij", dr_dq, dq)
    return r, dr


def quat_from_two_vectors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shortest-arc rotation taking unit vector a to unit vector b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w = 1.0 + float(a @ b)
    if w < 1e-12:
        # antipodal: rotate pi about any axis perpendicular to a
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis = axis / np.linalg.norm(axis)
        return np.array([0.0, *axis])
    return quat_normalize(np.array([w, *np.cross(a, b)]))


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random unit quaternions, shape (n, 4)."""
    q = rng.normal(size=(n, 4))
    return quat_canonical(quat_normalize(q))


# ---------------------------------------------------------------------------
# camera model


@dataclass(frozen=True)
class CameraIntrinsics:
    fu: float
    fv: float
    u0: float
    v0: float
    width: int
    height: int

    def __post_init__(self):
        if self.fu <= 0 or self.fv <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.u0 <= self.width and 0 <= self.v0 <= self.height):
            raise ValueError("principal point outside sensor")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fu, 0, self.u0], [0, self.fv, self.v0], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "fu": self.fu,
            "fv": self.fv,
            "u0": self.u0,
            "v0": self.v0,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(d["fu"], d["fv"], d["u0"], d["v0"], int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation (unit quaternion) plus translation; maps x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(4))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        norm = np.linalg.norm(self.rotation)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must be unit norm")
        object.__setattr__(self, "rotation", self.rotation / norm)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray, tol: float = 1e-5) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        r = m[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > tol or np.linalg.det(r) < 0:
            raise ValueError("matrix is not a rigid transform")
        return cls(matrix_to_quat(r), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self o other)(x) = self(other(x))."""
        return RigidTransform(
            quat_mul(self.rotation, other.rotation),
            quat_rotate(self.rotation, other.translation) + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        qc = quat_conj(self.rotation)
        return RigidTransform(qc, -quat_rotate(qc, self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, points) + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    return quat_canonical(quat_normalize(q))


@dataclass(frozen=True)
class Viewport:
    """Crop bounds (u_minus, v_minus, u_plus, v_plus) in pixels."""

    u_minus: float
    v_minus: float
    u_plus: float
    v_plus: float

    def __post_init__(self):
        if not (self.u_plus > self.u_minus and self.v_plus > self.v_minus):
            raise ValueError("viewport must have positive extent")

    @property
    def width(self) -> float:
        return self.u_plus - self.u_minus

    @property
    def height(self) -> float:
        return self.v_plus - self.v_minus

    def as_array(self) -> np.ndarray:
        return np.array([self.u_minus, self.v_minus, self.u_plus, self.v_plus])

    @classmethod
    def from_array(cls, c: np.ndarray) -> "Viewport":
        return cls(float(c[0]), float(c[1]), float(c[2]), float(c[3]))

    @classmethod
    def full(cls, intrinsics: CameraIntrinsics) -> "Viewport":
        return cls(0.0, 0.0, float(intrinsics.width), float(intrinsics.height))


@dataclass(frozen=True, eq=False)
class CameraParams:
    """Intrinsics, object-to-camera extrinsics, and viewport crop."""

    intrinsics: CameraIntrinsics
    extrinsics: RigidTransform
    viewport: Viewport

    def replace_extrinsics(self, extrinsics: RigidTransform) -> "CameraParams":
        return CameraParams(self.intrinsics, extrinsics, self.viewport)

    def replace_viewport(self, viewport: Viewport) -> "CameraParams":
        return CameraParams(self.intrinsics, self.extrinsics, viewport)

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "extrinsics": self.extrinsics.to_dict(),
            "viewport": self.viewport.as_array().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(
            CameraIntrinsics.from_dict(d["intrinsics"]),
            RigidTransform.from_dict(d["extrinsics"]),
            Viewport.from_array(np.array(d["viewport"])),
        )


def project(intrinsics: CameraIntrinsics, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Perspective projection of camera-frame points to (uv, depth)."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth("cannot project points with z <= %g" % MIN_DEPTH)
    u = intrinsics.fu * p[..., 0] / z + intrinsics.u0
    v = intrinsics.fv * p[..., 1] / z + intrinsics.v0
    return np.stack([u, v], axis=-1), z


def unproject(intrinsics: CameraIntrinsics, uv: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Inverse of project at the given depths."""
    uv = np.asarray(uv, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth("cannot unproject at z <= %g" % MIN_DEPTH)
    x = (uv[..., 0] - intrinsics.u0) / intrinsics.fu * z
    y = (uv[..., 1] - intrinsics.v0) / intrinsics.fv * z
    return np.stack([x, y, z], axis=-1)


def zoom_viewport(
    intrinsics: CameraIntrinsics,
    object_center_camera: np.ndarray,
    object_diameter: float,
    target_distance: float = 2.0,
) -> Viewport:
    """Crop that normalizes apparent object scale.

    The crop is centered on the projected object centroid with size
    ``w_b = fu * target_distance * diameter / z``; resampling it to a square
    output makes the object appear as if viewed from `target_distance`
    object diameters away, regardless of its true distance.
    """
    center = np.asarray(object_center_camera, dtype=float)
    uv, z = project(intrinsics, center.reshape(1, 3))
    cu, cv = uv[0]
    wb = intrinsics.fu * target_distance * object_diameter / z[0]
    hb = intrinsics.fv * target_distance * object_diameter / z[0]
    return Viewport(cu - wb / 2, cv - hb / 2, cu + wb / 2, cv + hb / 2)


# ---------------------------------------------------------------------------
# image sampling


def bilinear_sample(
    image: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    pad: float = 0.0,
    with_gradient: bool = False,
):
    """Bilinear lookup at continuous pixel coordinates; zero-order pad outside.

    `image` is (H, W) or (H, W, C). Returns values with the broadcast shape of
    (u, v) (plus a channel axis for multi-channel input) and, when requested,
    the partials with respect to u and v.
    """
    img = np.asarray(image, dtype=float)
    scalar_field = img.ndim == 2
    if scalar_field:
        img = img[..., None]
    h, w = img.shape[:2]
    u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    s = u - 0.5
    t = v - 0.5
    i0 = np.floor(s).astype(np.int64)
    j0 = np.floor(t).astype(np.int64)
    fx = (s - i0)[..., None]
    fy = (t - j0)[..., None]

    def tap(ii, jj):
        inside = (ii >= 0) & (ii < w) & (jj >= 0) & (jj < h)
        vals = img[np.clip(jj, 0, h - 1), np.clip(ii, 0, w - 1)]
        return np.where(inside[..., None], vals, pad)

    v00 = tap(i0, j0)
    v10 = tap(i0 + 1, j0)
    v01 = tap(i0, j0 + 1)
    v11 = tap(i0 + 1, j0 + 1)
    top = v00 + fx * (v10 - v00)
    bottom = v01 + fx * (v11 - v01)
    out = top + fy * (bottom - top)
    if not with_gradient:
        return out[..., 0] if scalar_field else out
    du = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
    dv = bottom - top
    if scalar_field:
        return out[..., 0], du[..., 0], dv[..., 0]
    return out, du, dv


def nearest_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray, pad: float = 0.0) -> np.ndarray:
    """Nearest-neighbor lookup (the pixel containing the point)."""
    img = np.asarray(image, dtype=float)
    h, w = img.shape[:2]
    i = np.floor(np.asarray(u, dtype=float)).astype(np.int64)
    j = np.floor(np.asarray(v, dtype=float)).astype(np.int64)
    i, j = np.broadcast_arrays(i, j)
    inside = (i >= 0) & (i < w) & (j >= 0) & (j < h)
    vals = img[np.clip(j, 0, h - 1), np.clip(i, 0, w - 1)]
    if img.ndim == 3:
        return np.where(inside[..., None], vals, pad)
    return np.where(inside, vals, pad)


def depth_sample(
    depth: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    with_gradient: bool = False,
):
    """Bilinear depth lookup excluding invalid (<= 0) and out-of-bounds taps.

    Tap weights of invalid samples are renormalized away; a point with no
    valid support returns 0 (and zero gradient).
    """
    img = np.asarray(depth, dtype=float)
    h, w = img.shape
    u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    s = u - 0.5
    t = v - 0.5
    i0 = np.floor(s).astype(np.int64)
    j0 = np.floor(t).astype(np.int64)
    fx = s - i0
    fy = t - j0

    num = np.zeros_like(u)
    den = np.zeros_like(u)
    dnum = [np.zeros_like(u), np.zeros_like(u)]
    dden = [np.zeros_like(u), np.zeros_like(u)]
    taps = (
        (i0, j0, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx)),
        (i0 + 1, j0, fx * (1 - fy), (1 - fy), -fx),
        (i0, j0 + 1, (1 - fx) * fy, -fy, (1 - fx)),
        (i0 + 1, j0 + 1, fx * fy, fy, fx),
    )
    for ii, jj, wgt, dwu, dwv in taps:
        inside = (ii >= 0) & (ii < w) & (jj >= 0) & (jj < h)
        d = img[np.clip(jj, 0, h - 1), np.clip(ii, 0, w - 1)]
        m = inside & (d > 0)
        d = np.where(m, d, 0.0)
        num += wgt * d
        den += wgt * m
        if with_gradient:
            dnum[0] += dwu * d
            dnum[1] += dwv * d
            dden[0] += dwu * m
            dden[1] += dwv * m
    ok = den > 1e-12
    safe = np.where(ok, den, 1.0)
    out = np.where(ok, num / safe, 0.0)
    if not with_gradient:
        return out
    du = np.where(ok, (dnum[0] - out * dden[0]) / safe, 0.0)
    dv = np.where(ok, (dnum[1] - out * dden[1]) / safe, 0.0)
    return out, du, dv


def viewport_grid(viewport: Viewport, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (u, v) coordinates of an size x size resampling grid."""
    frac = (np.arange(size) + 0.5) / size
    u = viewport.u_minus + frac * viewport.width
    v = viewport.v_minus + frac * viewport.height
    return u, v


def crop_resample(
    data: np.ndarray,
    viewport: Viewport,
    out_size: int,
    method: str = "bilinear",
    pad: float = 0.0,
) -> np.ndarray:
    """Extract a viewport crop resampled to out_size x out_size.

    method: "bilinear" for color/feature images, "nearest" for masks (keeps
    them binary), "depth" for depth maps (bilinear with invalid-pixel
    exclusion). Out-of-bounds reads return `pad`.
    """
    if min(viewport.width, viewport.height) < 1.0:
        raise EmptyViewport("viewport smaller than one pixel")
    u, v = viewport_grid(viewport, out_size)
    uu, vv = np.meshgrid(u, v)
    if method == "bilinear":
        return bilinear_sample(data, uu, vv, pad=pad)
    if method == "nearest":
        return nearest_sample(data, uu, vv, pad=pad)
    if method == "depth":
        return depth_sample(data, uu, vv)
    raise ValueError("unknown resampling method %r" % method)


# ---------------------------------------------------------------------------
# sampling lattices


def fibonacci_sphere(n: int) -> np.ndarray:
    """n quasi-uniform unit directions from the spherical Fibonacci lattice."""
    i = np.arange(n)
    z = 1.0 - 2.0 * (i + 0.5) / n
    phi = i * GOLDEN_ANGLE
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def fibonacci_orientations(k: int, seed: int = 0) -> np.ndarray:
    """k orientations: Fibonacci-lattice viewing directions x random roll.

    Each lattice direction d is aligned with the camera optical axis by the
    shortest arc, then composed with a roll about the viewing axis drawn
    uniformly from the seeded RNG. Deterministic given (k, seed).
    """
    if k < 1:
        raise ValueError("need at least one orientation")
    rng = np.random.default_rng(seed)
    rolls = rng.uniform(0.0, 2.0 * math.pi, size=k)
    dirs = fibonacci_sphere(k)
    zhat = np.array([0.0, 0.0, 1.0])
    quats = np.empty((k, 4))
    for i in range(k):
        align = quat_from_two_vectors(dirs[i], zhat)
        roll = np.array([math.cos(rolls[i] / 2), 0.0, 0.0, math.sin(rolls[i] / 2)])
        quats[i] = quat_canonical(quat_mul(roll, align))
    return quats


def frustum_grid(camera: CameraParams, z_center: float, radius: float, resolution: int) -> np.ndarray:
    """Camera-frame 3D points of the depth-bounded viewport frustum lattice.

    Returns shape (M, M, M, 3) indexed [k, j, i]: i maps to the viewport u
    axis, j to v, and k to depth z in [z_center - radius, z_center + radius].
    All grid points are strictly inside the frustum (half-voxel inset).
    """
    if z_center - radius <= MIN_DEPTH:
        raise NonPositiveDepth("frustum extends behind the camera")
    m = resolution
    u, v = viewport_grid(camera.viewport, m)
    z = z_center - radius + (np.arange(m) + 0.5) / m * (2.0 * radius)
    a = (u - camera.intrinsics.u0) / camera.intrinsics.fu
    b = (v - camera.intrinsics.v0) / camera.intrinsics.fv
    zz = z[:, None, None]
    grid = np.empty((m, m, m, 3))
    grid[..., 0] = a[None, None, :] * zz
    grid[..., 1] = b[None, :, None] * zz
    grid[..., 2] = np.broadcast_to(zz, (m, m, m))
    return grid


def frustum_depths(z_center: float, radius: float, resolution: int) -> np.ndarray:
    """The depth-slice z values used by frustum_grid."""
    return z_center - radius + (np.arange(resolution) + 0.5) / resolution * (2.0 * radius)
