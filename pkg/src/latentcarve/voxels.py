"""Voxel feature volumes: spatial frames, trilinear sampling, rigid resampling.

A FeatureVolume couples a (C, D, H, W) array of per-voxel features with a
spatial frame that maps world points to fractional grid coordinates. Two
frames exist: the canonical object cube and the depth-bounded camera
frustum. Trilinear sampling is edge-padded (clamped) and exposes exact
piecewise-linear partials, which is what makes the downstream rendering and
pose objective differentiable. Volumes hold double precision throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import IndivisibleChannels, ShapeMismatch

_EPS_Z = geo.MIN_DEPTH


# ---------------------------------------------------------------------------
# spatial frames


@dataclass(frozen=True, eq=False)
class CanonicalCube:
    """Axis-aligned cube of half-extent `radius` centered in object frame."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))

    def voxel_centers(self, shape: tuple[int, int, int]) -> np.ndarray:
        nz, ny, nx = shape
        axes = []
        for n in (nx, ny, nz):
            frac = (np.arange(n) + 0.5) / n
            axes.append(-self.radius + frac * 2.0 * self.radius)
        x, y, z = axes
        grid = np.empty((nz, ny, nx, 3))
        grid[..., 0] = x[None, None, :] + self.center[0]
        grid[..., 1] = y[None, :, None] + self.center[1]
        grid[..., 2] = z[:, None, None] + self.center[2]
        return grid

    def world_to_grid(self, points: np.ndarray, shape, with_jacobian: bool = False):
        """Fractional (gx, gy, gz) grid coordinates of object-frame points."""
        nz, ny, nx = shape
        p = np.asarray(points, dtype=float) - self.center
        scale = np.array([nx, ny, nz]) / (2.0 * self.radius)
        g = (p + self.radius) * scale - 0.5
        if not with_jacobian:
            return g
        jac = np.zeros(p.shape[:-1] + (3, 3))
        jac[..., 0, 0] = scale[0]
        jac[..., 1, 1] = scale[1]
        jac[..., 2, 2] = scale[2]
        return g, jac

    def to_dict(self) -> dict:
        return {"type": "canonical_cube", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class CameraFrustum:
    """Viewport frustum bounded depth-wise by [z_center - radius, z_center + radius]."""

    camera: geo.CameraParams
    z_center: float
    radius: float

    def voxel_centers(self, shape: tuple[int, int, int]) -> np.ndarray:
        nz, ny, nx = shape
        if nz == ny == nx:
            return geo.frustum_grid(self.camera, self.z_center, self.radius, nx)
        raise ShapeMismatch("camera frustum grids must be cubic")

    def world_to_grid(self, points: np.ndarray, shape, with_jacobian: bool = False):
        """Fractional grid coordinates of camera-frame points.

        Lateral coordinates go through the perspective projection and the
        viewport mapping; depth is linear in z. Points with z <= 0 are
        clamped to a tiny positive depth (they land outside the grid and pick
        up edge padding downstream; their jacobian is zeroed).
        """
        nz, ny, nx = shape
        intr = self.camera.intrinsics
        vp = self.camera.viewport
        p = np.asarray(points, dtype=float)
        z = p[..., 2]
        ok = z > _EPS_Z
        zs = np.where(ok, z, _EPS_Z)
        u = intr.fu * p[..., 0] / zs + intr.u0
        v = intr.fv * p[..., 1] / zs + intr.v0
        gx = (u - vp.u_minus) / vp.width * nx - 0.5
        gy = (v - vp.v_minus) / vp.height * ny - 0.5
        gz = (z - (self.z_center - self.radius)) / (2.0 * self.radius) * nz - 0.5
        g = np.stack([gx, gy, gz], axis=-1)
        if not with_jacobian:
            return g
        jac = np.zeros(p.shape[:-1] + (3, 3))
        su = nx / vp.width
        sv = ny / vp.height
        jac[..., 0, 0] = su * intr.fu / zs
        jac[..., 0, 2] = -su * intr.fu * p[..., 0] / zs**2
        jac[..., 1, 1] = sv * intr.fv / zs
        jac[..., 1, 2] = -sv * intr.fv * p[..., 1] / zs**2
        jac[..., 2, 2] = nz / (2.0 * self.radius)
        jac = np.where(ok[..., None, None], jac, 0.0)
        return g, jac

    def depths(self, resolution: int) -> np.ndarray:
        return geo.frustum_depths(self.z_center, self.radius, resolution)

    def to_dict(self) -> dict:
        return {
            "type": "camera_frustum",
            "z_center": self.z_center,
            "radius": self.radius,
            "camera": self.camera.to_dict(),
        }


def frame_from_dict(d: dict):
    if d["type"] == "canonical_cube":
        return CanonicalCube(np.array(d["center"]), float(d["radius"]))
    if d["type"] == "camera_frustum":
        return CameraFrustum(geo.CameraParams.from_dict(d["camera"]), float(d["z_center"]), float(d["radius"]))
    raise ValueError("unknown frame type %r" % d["type"])


def frames_equal(a, b, tol: float = 1e-12) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, CanonicalCube):
        return bool(np.abs(a.center - b.center).max() <= tol and abs(a.radius - b.radius) <= tol)
    ca, cb = a.camera, b.camera
    return bool(
        abs(a.z_center - b.z_center) <= tol
        and abs(a.radius - b.radius) <= tol
        and ca.intrinsics == cb.intrinsics
        and np.abs(ca.viewport.as_array() - cb.viewport.as_array()).max() <= tol
        and np.abs(ca.extrinsics.matrix() - cb.extrinsics.matrix()).max() <= tol
    )


# ---------------------------------------------------------------------------
# feature volume container


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    """(C, D, H, W) array of per-voxel features with an attached frame."""

    data: np.ndarray
    frame: object

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 4:
            raise ShapeMismatch("volume data must be (C, D, H, W)")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume entries must be finite")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def resolution(self) -> int:
        d, h, w = self.grid_shape
        if not (d == h == w):
            raise ShapeMismatch("volume is not cubic")
        return w


# ---------------------------------------------------------------------------
# projection / deprojection units


def deproject(image: np.ndarray, depth_bins: int, frame) -> FeatureVolume:
    """Lift (C, H, W) features to a ((C/D), D, H, W) volume by reshaping.

    Input channel c maps to (c // D, depth c % D); no arithmetic on values.
    """
    image = np.asarray(image, dtype=float)
    c, h, w = image.shape
    if c % depth_bins != 0:
        raise IndivisibleChannels("channels %d not divisible by depth bins %d" % (c, depth_bins))
    return FeatureVolume(image.reshape(c // depth_bins, depth_bins, h, w), frame)


def project_unit(volume: FeatureVolume, mixing: np.ndarray | None = None) -> np.ndarray:
    """Collapse depth into channels, then apply a per-pixel linear mixing.

    With identity mixing (the default) this is the exact reshape inverse of
    deproject. `mixing` has shape (C_out, C' * D).
    """
    c, d, h, w = volume.data.shape
    flat = volume.data.reshape(c * d, h, w)
    if mixing is None:
        return flat.copy()
    mixing = np.asarray(mixing, dtype=float)
    if mixing.ndim != 2 or mixing.shape[1] != c * d:
        raise ShapeMismatch("mixing must be (C_out, %d)" % (c * d))
    return np.einsum("oc,chw->ohw", mixing, flat)


# ---------------------------------------------------------------------------
# trilinear sampling


def trilinear_gather(
    data: np.ndarray,
    coords: np.ndarray,
    with_gradient: bool = False,
    aux: np.ndarray | None = None,
):
    """Edge-clamped trilinear interpolation of (C, D, H, W) data.

    coords (..., 3) holds fractional (gx, gy, gz) grid coordinates. Returns
    values (..., C); with_gradient adds d(value)/d(coords) of shape
    (..., C, 3) -- one-sided at cell boundaries and zero in clamped regions.
    `aux` (C, D, H, W, K) is gathered with the same interpolation weights and
    returned as (..., C, K); it carries per-voxel jacobians through resampling
    chains.
    """
    c, nz, ny, nx = data.shape
    coords = np.asarray(coords, dtype=float)
    lead = coords.shape[:-1]
    g = coords.reshape(-1, 3)
    n = g.shape[0]

    out_vals = np.empty((n, c))
    out_grad = np.empty((n, c, 3)) if with_gradient else None
    out_aux = np.empty((n, c, aux.shape[-1])) if aux is not None else None

    dims = np.array([nx, ny, nz], dtype=float)
    inside = (g >= 0.0) & (g <= dims - 1.0)  # gradient gate per axis
    gc = np.clip(g, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(gc).astype(np.int64), np.maximum(dims.astype(np.int64) - 2, 0))
    f = gc - i0
    ix0, iy0, iz0 = i0[:, 0], i0[:, 1], i0[:, 2]
    ix1 = np.minimum(ix0 + 1, nx - 1)
    iy1 = np.minimum(iy0 + 1, ny - 1)
    iz1 = np.minimum(iz0 + 1, nz - 1)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    flat = data.reshape(c, -1)
    flat_aux = aux.reshape(c, nz * ny * nx, -1) if aux is not None else None

    def corner(iz, iy, ix):
        lin = (iz * ny + iy) * nx + ix
        v = flat[:, lin].T  # (n, C)
        a = flat_aux[:, lin].transpose(1, 0, 2) if aux is not None else None
        return v, a

    v000, a000 = corner(iz0, iy0, ix0)
    v001, a001 = corner(iz0, iy0, ix1)
    v010, a010 = corner(iz0, iy1, ix0)
    v011, a011 = corner(iz0, iy1, ix1)
    v100, a100 = corner(iz1, iy0, ix0)
    v101, a101 = corner(iz1, iy0, ix1)
    v110, a110 = corner(iz1, iy1, ix0)
    v111, a111 = corner(iz1, iy1, ix1)

    wx = fx[:, None]
    wy = fy[:, None]
    wz = fz[:, None]

    c00 = v000 + wx * (v001 - v000)
    c01 = v010 + wx * (v011 - v010)
    c10 = v100 + wx * (v101 - v100)
    c11 = v110 + wx * (v111 - v110)
    c0 = c00 + wy * (c01 - c00)
    c1 = c10 + wy * (c11 - c10)
    out_vals[:] = c0 + wz * (c1 - c0)

    if aux is not None:
        wxa, wya, wza = wx[..., None], wy[..., None], wz[..., None]
        b00 = a000 + wxa * (a001 - a000)
        b01 = a010 + wxa * (a011 - a010)
        b10 = a100 + wxa * (a101 - a100)
        b11 = a110 + wxa * (a111 - a110)
        b0 = b00 + wya * (b01 - b00)
        b1 = b10 + wya * (b11 - b10)
        out_aux[:] = b0 + wza * (b1 - b0)

    if with_gradient:
        gate = inside.astype(float)
        dx00 = v001 - v000
        dx01 = v011 - v010
        dx10 = v101 - v100
        dx11 = v111 - v110
        ddx = (dx00 + wy * (dx01 - dx00)) * (1 - wz) + (dx10 + wy * (dx11 - dx10)) * wz
        ddy = (c01 - c00) * (1 - wz) + (c11 - c10) * wz
        ddz = c1 - c0
        out_grad[..., 0] = ddx * gate[:, 0:1]
        out_grad[..., 1] = ddy * gate[:, 1:2]
        out_grad[..., 2] = ddz * gate[:, 2:3]

    vals = out_vals.reshape(lead + (c,))
    result = [vals]
    if with_gradient:
        result.append(out_grad.reshape(lead + (c, 3)))
    if aux is not None:
        result.append(out_aux.reshape(lead + (c, aux.shape[-1])))
    return result[0] if len(result) == 1 else tuple(result)


def trilinear_gather_batch(data: np.ndarray, coords: np.ndarray, with_gradient: bool = False):
    """Per-batch trilinear gather: data (B, C, D, H, W), coords (B, ..., 3)."""
    b, c, nz, ny, nx = data.shape
    lead = coords.shape[1:-1]
    g = coords.reshape(b, -1, 3)
    n = g.shape[1]
    dims = np.array([nx, ny, nz], dtype=float)
    inside = (g >= 0.0) & (g <= dims - 1.0)
    gc = np.clip(g, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(gc).astype(np.int64), np.maximum(dims.astype(np.int64) - 2, 0))
    f = gc - i0
    ix0, iy0, iz0 = i0[..., 0], i0[..., 1], i0[..., 2]
    ix1 = np.minimum(ix0 + 1, nx - 1)
    iy1 = np.minimum(iy0 + 1, ny - 1)
    iz1 = np.minimum(iz0 + 1, nz - 1)
    flat = data.reshape(b, c, -1)

    def corner(iz, iy, ix):
        lin = (iz * ny + iy) * nx + ix  # (B, N)
        return np.take_along_axis(flat, lin[:, None, :], axis=2)  # (B, C, N)

    v000 = corner(iz0, iy0, ix0)
    v001 = corner(iz0, iy0, ix1)
    v010 = corner(iz0, iy1, ix0)
    v011 = corner(iz0, iy1, ix1)
    v100 = corner(iz1, iy0, ix0)
    v101 = corner(iz1, iy0, ix1)
    v110 = corner(iz1, iy1, ix0)
    v111 = corner(iz1, iy1, ix1)

    wx = f[..., 0][:, None, :]
    wy = f[..., 1][:, None, :]
    wz = f[..., 2][:, None, :]
    c00 = v000 + wx * (v001 - v000)
    c01 = v010 + wx * (v011 - v010)
    c10 = v100 + wx * (v101 - v100)
    c11 = v110 + wx * (v111 - v110)
    c0 = c00 + wy * (c01 - c00)
    c1 = c10 + wy * (c11 - c10)
    vals = (c0 + wz * (c1 - c0)).reshape((b,) + (c,) + (n,))
    vals = np.moveaxis(vals, 1, -1).reshape((b,) + lead + (c,))
    if not with_gradient:
        return vals
    gate = inside.astype(float)
    dx00 = v001 - v000
    dx01 = v011 - v010
    dx10 = v101 - v100
    dx11 = v111 - v110
    ddx = (dx00 + wy * (dx01 - dx00)) * (1 - wz) + (dx10 + wy * (dx11 - dx10)) * wz
    ddy = (c01 - c00) * (1 - wz) + (c11 - c10) * wz
    ddz = c1 - c0
    grad = np.stack([ddx, ddy, ddz], axis=-1)  # (B, C, N, 3)
    grad = grad * gate[:, None, :, :]
    grad = np.moveaxis(grad, 1, -2).reshape((b,) + lead + (c, 3))
    return vals, grad


def sample_trilinear(volume: FeatureVolume, points: np.ndarray, with_gradient: bool = False):
    """Sample a volume at world points of its frame; optionally with partials.

    Returns values (..., C) and, when requested, d(value)/d(point) of shape
    (..., C, 3) obtained by chaining the grid-space interpolation gradient
    through the frame's world-to-grid jacobian.
    """
    if not with_gradient:
        g = volume.frame.world_to_grid(points, volume.grid_shape)
        return trilinear_gather(volume.data, g)
    g, jac = volume.frame.world_to_grid(points, volume.grid_shape, with_jacobian=True)
    vals, dvdg = trilinear_gather(volume.data, g, with_gradient=True)
    grad = np.einsum("...cg,...gp->...cp", dvdg, jac)
    return vals, grad


# ---------------------------------------------------------------------------
# rigid resampling


def resample_rigid(
    src: FeatureVolume,
    src_to_dst: geo.RigidTransform,
    dst_frame,
    dst_shape: tuple[int, int, int] | None = None,
    with_jacobian: bool = False,
):
    """Resample a volume into another frame related by a rigid transform.

    For every destination voxel center x' (in dst_frame world coordinates)
    the output is src sampled at src_to_dst^-1(x'). With dst = canonical cube
    and src_to_dst = camera-to-object this is the camera-to-object transform
    of the modeling stage; with dst = camera frustum and src_to_dst =
    object-to-camera it is the rendering-side inverse.

    with_jacobian adds the derivative of every output voxel with respect to
    the six pose parameters (omega, t) of src_to_dst, the log-quaternion
    chart evaluated at omega = quat_log(src_to_dst.rotation) and dst_frame
    held fixed. Shape (C, D, H, W, 6).
    """
    dst_shape = dst_shape or src.grid_shape
    centers = dst_frame.voxel_centers(dst_shape)
    t = src_to_dst.translation
    if not with_jacobian:
        rot = geo.quat_to_matrix(src_to_dst.rotation)
        x_src = (centers - t) @ rot  # R^T (x - t), row-vector form
        vals = sample_trilinear(src, x_src)
        data = np.moveaxis(vals, -1, 0)
        return FeatureVolume(np.ascontiguousarray(data), dst_frame)

    omega = geo.quat_log(src_to_dst.rotation)
    rot, drot = geo.rotation_jacobian(omega)
    d = centers - t
    x_src = d @ rot
    vals, dval_dx = sample_trilinear(src, x_src, with_gradient=True)
    # dx_src/domega_a = dR[a]^T d ; dx_src/dt = -R^T
    dx_dw = np.einsum("aij,...i->...aj", drot, d)  # (..., 3param, 3coord)
    jac_w = np.einsum("...cx,...ax->...ca", dval_dx, dx_dw)
    jac_t = -np.einsum("...cx,bx->...cb", dval_dx, rot)  # dx_src_j/dt_b = -R[b, j]
    jac = np.concatenate([jac_w, jac_t], axis=-1)  # (..., C, 6)
    data = np.moveaxis(vals, -1, 0)
    jac = np.moveaxis(jac, -2, 0)
    return FeatureVolume(np.ascontiguousarray(data), dst_frame), np.ascontiguousarray(jac)


# ---------------------------------------------------------------------------
# debug dump


def save_volume(path: str | Path, volume: FeatureVolume) -> None:
    """Write a flat little-endian float64 dump in (c, z, y, x) order + JSON sidecar."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(volume.data, dtype="<f8").tobytes())
    sidecar = {
        "channels": volume.channels,
        "resolution": list(volume.grid_shape),
        "frame": volume.frame.to_dict(),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_volume(path: str | Path) -> FeatureVolume:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    shape = (sidecar["channels"], *sidecar["resolution"])
    data = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(shape)
    return FeatureVolume(data.astype(float), frame_from_dict(sidecar["frame"]))
