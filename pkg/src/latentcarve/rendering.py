"""Render depth and mask from a latent object; color via image-based rendering.

The reference decoder is a smooth transmittance compositor: per pixel ray the
camera-frustum occupancies are composited front to back, giving a soft mask
and an expected depth that are differentiable in both the occupancies and the
pose. `render` exposes analytic per-pixel partials with respect to the ten
pose parameters (log-quaternion omega, translation, viewport), which the pose
objective consumes. Color is produced by reprojecting reference views through
the rendered depth and blending by angular view similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import voxels as vox
from .errors import ObjectBehindCamera, ShapeMismatch

# gradient layout used across rendering/objective/pose:
# [omega_x, omega_y, omega_z, t_x, t_y, t_z, u_minus, v_minus, u_plus, v_plus]
POSE_PARAMS = 10
_OCC_CEILING = 1.0 - 1e-9


@dataclass(frozen=True, eq=False)
class RenderOutput:
    """Rendered maps plus the pre-projection camera volume kept for the latent loss."""

    depth: np.ndarray
    mask: np.ndarray
    camera_volume: vox.FeatureVolume
    depth_jacobian: np.ndarray | None = None  # (H, W, 10)
    mask_jacobian: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class BlendConfig:
    """Angular-similarity blending: weight = validity * max(0, s)^power."""

    power: float = 8.0
    tau_reproj: float = 0.01

    def __post_init__(self):
        if self.power < 0 or self.tau_reproj <= 0:
            raise ValueError("power must be >= 0 and tau_reproj > 0")


# ---------------------------------------------------------------------------
# transmittance compositing


def composite_transmittance(occ: np.ndarray, z: np.ndarray, eps_vis: float = 1e-4, with_partials: bool = False):
    """Front-to-back compositing of occupancies along the depth axis (-3).

    Per ray with samples o_k at depths z_k: visibility weights
    w_k = o_k * prod_{j<k}(1 - o_j), mask = sum_k w_k (equivalently
    1 - prod_k(1 - o_k)), and depth = sum_k w_k z_k / sum_k w_k where the
    total weight exceeds eps_vis, else 0. Occupancies are clamped to
    [0, 1); partials are exact on the clamp interior and zero outside.

    occ has shape (..., D, H, W); z is (D,) or (..., D). Returns
    (depth, mask) and, with partials, (d_depth/d_occ, d_mask/d_occ,
    d_depth/d_z) with the same (..., D, H, W) layout.
    """
    occ = np.asarray(occ, dtype=float)
    o = np.clip(occ, 0.0, _OCC_CEILING)
    one_minus = 1.0 - o
    trans = np.cumprod(one_minus, axis=-3)
    trans = np.roll(trans, 1, axis=-3)
    trans[..., 0, :, :] = 1.0  # exclusive product
    w = o * trans
    z = np.asarray(z, dtype=float)
    zb = np.broadcast_to(np.expand_dims(np.expand_dims(z, -1), -1), w.shape)
    sw = w.sum(axis=-3)
    swz = (w * zb).sum(axis=-3)
    mask = sw
    valid = sw > eps_vis
    depth = np.where(valid, swz / np.where(valid, sw, 1.0), 0.0)
    if not with_partials:
        return depth, mask
    gate = ((occ >= 0.0) & (occ <= _OCC_CEILING)).astype(float)
    wz = w * zb
    tail = np.flip(np.cumsum(np.flip(w, axis=-3), axis=-3), axis=-3) - w
    tailz = np.flip(np.cumsum(np.flip(wz, axis=-3), axis=-3), axis=-3) - wz
    inv = 1.0 / one_minus
    d_mask = (trans - tail * inv) * gate
    d_swz = (zb * trans - tailz * inv) * gate
    valid_b = valid[..., None, :, :]
    sw_b = np.where(valid_b, sw[..., None, :, :], 1.0)
    depth_b = depth[..., None, :, :]
    d_depth = np.where(valid_b, (d_swz - depth_b * d_mask) / sw_b, 0.0)
    d_depth_d_z = np.where(valid_b, w / sw_b, 0.0)
    return depth, mask, d_depth, d_mask, d_depth_d_z


@dataclass(frozen=True, eq=False)
class DecodedMaps:
    depth: np.ndarray
    mask: np.ndarray
    d_depth_d_occ: np.ndarray | None = None
    d_mask_d_occ: np.ndarray | None = None
    d_depth_d_z: np.ndarray | None = None


class TransmittanceDecoder:
    """Reference VolumeDecoder: transmittance compositing of one occupancy channel."""

    def __init__(self, occupancy_channel: int = 0, eps_vis: float = 1e-4):
        self.occupancy_channel = occupancy_channel
        self.eps_vis = eps_vis

    def decode(self, volume: vox.FeatureVolume, with_partials: bool = False) -> DecodedMaps:
        if not isinstance(volume.frame, vox.CameraFrustum):
            raise ShapeMismatch("transmittance decoding requires a camera-frustum volume")
        occ = volume.data[self.occupancy_channel]
        z = volume.frame.depths(occ.shape[0])
        out = composite_transmittance(occ, z, self.eps_vis, with_partials)
        if with_partials:
            return DecodedMaps(*out)
        return DecodedMaps(out[0], out[1])


# ---------------------------------------------------------------------------
# pose-differentiable frustum chain


def frustum_object_coords(
    intrinsics: geo.CameraIntrinsics,
    rotation: np.ndarray,
    translation: np.ndarray,
    viewport: geo.Viewport,
    radius: float,
    resolution: int,
    with_jacobian: bool = False,
    omega: np.ndarray | None = None,
):
    """Object-frame positions of the query frustum lattice, flattened [k, j, i].

    The frustum is bounded laterally by the viewport and in depth by
    [t_z - radius, t_z + radius]. With jacobian, also returns d(position)/d
    of the ten pose parameters: the lattice itself moves with t_z (depth
    window) and with the viewport bounds, and the object-frame pullback
    rotates with omega. `omega` fixes the log-quaternion chart point for the
    jacobian (defaults to the principal branch of `rotation`).
    """
    s = resolution
    zc = float(translation[2])
    u, v = geo.viewport_grid(viewport, s)
    z = geo.frustum_depths(zc, radius, s)
    a = (u - intrinsics.u0) / intrinsics.fu  # x/z ray slope per column
    b = (v - intrinsics.v0) / intrinsics.fv
    aa = np.broadcast_to(a[None, None, :], (s, s, s))
    bb = np.broadcast_to(b[None, :, None], (s, s, s))
    zz = np.broadcast_to(z[:, None, None], (s, s, s))
    p = np.stack([aa * zz, bb * zz, zz], axis=-1).reshape(-1, 3)

    if not with_jacobian:
        rot = geo.quat_to_matrix(rotation)
        return (p - translation) @ rot

    omega = geo.quat_log(rotation) if omega is None else np.asarray(omega, dtype=float)
    rot, drot = geo.rotation_jacobian(omega)
    d = p - translation
    x_obj = d @ rot

    n = p.shape[0]
    dx = np.zeros((n, 3, POSE_PARAMS))
    # rotation: dX/domega_a = dR[a]^T d
    dx[:, :, 0:3] = np.einsum("aij,ni->nja", drot, d)
    # translation: dX/dt_b = R^T (dP/dt_b - e_b); only t_z moves the lattice
    dp_dzc = np.stack([aa, bb, np.ones_like(zz)], axis=-1).reshape(-1, 3)
    dx[:, :, 3] = -rot[0]
    dx[:, :, 4] = -rot[1]
    dx[:, :, 5] = (dp_dzc - np.array([0.0, 0.0, 1.0])) @ rot
    # viewport: lattice pixel centers interpolate the crop bounds
    wi = np.broadcast_to(((np.arange(s) + 0.5) / s)[None, None, :], (s, s, s)).reshape(-1)
    wj = np.broadcast_to(((np.arange(s) + 0.5) / s)[None, :, None], (s, s, s)).reshape(-1)
    zf = zz.reshape(-1)
    du = np.zeros((n, 3))
    du[:, 0] = zf / intrinsics.fu
    dv = np.zeros((n, 3))
    dv[:, 1] = zf / intrinsics.fv
    dx[:, :, 6] = ((1.0 - wi)[:, None] * du) @ rot
    dx[:, :, 8] = (wi[:, None] * du) @ rot
    dx[:, :, 7] = ((1.0 - wj)[:, None] * dv) @ rot
    dx[:, :, 9] = (wj[:, None] * dv) @ rot
    return x_obj, dx


def object_frustum_coords(
    frustum: vox.CameraFrustum,
    rotation: np.ndarray,
    translation: np.ndarray,
    points_obj: np.ndarray,
    grid_shape: tuple[int, int, int],
    with_jacobian: bool = False,
    omega: np.ndarray | None = None,
):
    """Frustum grid coordinates of fixed object-frame points under a pose.

    This is the modeling-direction map (object -> camera -> frustum indices)
    used by the latent loss; the jacobian covers the ten pose parameters,
    including the frustum's own dependence on t_z (depth window) and the
    viewport bounds.
    """
    if not with_jacobian:
        cam = points_obj @ geo.quat_to_matrix(rotation).T + translation
        return frustum.world_to_grid(cam, grid_shape)

    omega = geo.quat_log(rotation) if omega is None else np.asarray(omega, dtype=float)
    rot, drot = geo.rotation_jacobian(omega)
    cam = points_obj @ rot.T + translation
    g, jac_pt = frustum.world_to_grid(cam, grid_shape, with_jacobian=True)

    nz, ny, nx = grid_shape
    vp = frustum.camera.viewport
    n = points_obj.shape[0]
    dg = np.zeros((n, 3, POSE_PARAMS))
    dcam_dw = np.einsum("aij,nj->nia", drot, points_obj)  # (n, 3cam, 3omega)
    dg[:, :, 0:3] = np.einsum("ngc,nca->nga", jac_pt, dcam_dw)
    dg[:, :, 3:6] = jac_pt  # dcam/dt = I
    # frustum depth window rides on zc = t_z
    dg[:, 2, 5] += -nz / (2.0 * frustum.radius)
    # viewport bounds move the lateral index mapping
    intr = frustum.camera.intrinsics
    zs = np.maximum(cam[:, 2], geo.MIN_DEPTH)
    u = intr.fu * cam[:, 0] / zs + intr.u0
    v = intr.fv * cam[:, 1] / zs + intr.v0
    dg[:, 0, 6] = nx * (u - vp.u_plus) / vp.width**2
    dg[:, 0, 8] = -nx * (u - vp.u_minus) / vp.width**2
    dg[:, 1, 7] = ny * (v - vp.v_plus) / vp.height**2
    dg[:, 1, 9] = -ny * (v - vp.v_minus) / vp.height**2
    return g, dg


# ---------------------------------------------------------------------------
# rendering


def render(
    latent,
    camera: geo.CameraParams,
    decoder: TransmittanceDecoder | None = None,
    resolution: int | None = None,
    with_jacobian: bool = False,
    object_transform=None,
    camera_transform=None,
    jacobian_omega: np.ndarray | None = None,
) -> RenderOutput:
    """Resample the latent into the query camera frustum and decode depth/mask.

    `object_transform` / `camera_transform` are optional volume-to-volume
    hooks standing in for learned networks applied before and after the
    rigid transform; they default to identity and are forward-only (the
    analytic pose jacobian is implemented for the identity configuration).
    `jacobian_omega` selects the log-quaternion chart point the jacobian is
    expressed in (the optimizer's own parameter vector).
    """
    decoder = decoder or TransmittanceDecoder()
    r = latent.radius
    extr = camera.extrinsics
    zc = float(extr.translation[2])
    if zc - r <= geo.MIN_DEPTH:
        raise ObjectBehindCamera("frustum depth window reaches behind the camera")
    s = resolution or latent.resolution
    frame = vox.CameraFrustum(camera, zc, r)

    volume = latent.volume
    if object_transform is not None:
        volume = object_transform(volume)
    if with_jacobian and (object_transform is not None or camera_transform is not None):
        raise NotImplementedError("pose jacobians require identity volume transforms")

    if not with_jacobian:
        x_obj = frustum_object_coords(
            camera.intrinsics, extr.rotation, extr.translation, camera.viewport, r, s
        )
        vals = vox.sample_trilinear(volume, x_obj)
        cam_vol = vox.FeatureVolume(
            np.ascontiguousarray(np.moveaxis(vals.reshape(s, s, s, -1), -1, 0)), frame
        )
        if camera_transform is not None:
            cam_vol = camera_transform(cam_vol)
        maps = decoder.decode(cam_vol)
        return RenderOutput(maps.depth, maps.mask, cam_vol)

    x_obj, dx = frustum_object_coords(
        camera.intrinsics,
        extr.rotation,
        extr.translation,
        camera.viewport,
        r,
        s,
        with_jacobian=True,
        omega=jacobian_omega,
    )
    vals, dval_dx = vox.sample_trilinear(volume, x_obj, with_gradient=True)
    cam_vol = vox.FeatureVolume(
        np.ascontiguousarray(np.moveaxis(vals.reshape(s, s, s, -1), -1, 0)), frame
    )
    maps = decoder.decode(cam_vol, with_partials=True)
    ch = decoder.occupancy_channel
    docc = np.einsum("ncx,nxp->ncp", dval_dx, dx)[:, ch, :].reshape(s, s, s, POSE_PARAMS)
    depth_jac = (maps.d_depth_d_occ[..., None] * docc).sum(axis=0)
    mask_jac = (maps.d_mask_d_occ[..., None] * docc).sum(axis=0)
    # depth samples ride on the frustum window: dz_k/dt_z = 1
    depth_jac[..., 5] += maps.d_depth_d_z.sum(axis=0)
    return RenderOutput(maps.depth, maps.mask, cam_vol, depth_jac, mask_jac)


# ---------------------------------------------------------------------------
# image-based rendering


def view_similarity(reference: geo.RigidTransform, query: geo.RigidTransform) -> float:
    """Cosine of the angle between the two optical axes in the object frame."""
    zhat = np.array([0.0, 0.0, 1.0])
    d_ref = geo.quat_rotate(geo.quat_conj(reference.rotation), zhat)
    d_qry = geo.quat_rotate(geo.quat_conj(query.rotation), zhat)
    return float(d_ref @ d_qry)


def reproject_color(
    output_camera: geo.CameraParams,
    depth: np.ndarray,
    reference,
    tau_reproj: float = 0.01,
) -> tuple[np.ndarray, np.ndarray]:
    """Reproject a reference view's color through a rendered depth map.

    `depth` lives on the output camera's viewport grid. A pixel is valid iff
    it has depth, its reprojection lands inside the reference image and mask,
    and the reprojected depth agrees with the reference depth within
    tau_reproj (the test is skipped where the reference depth is invalid).
    """
    s = depth.shape[0]
    u, v = geo.viewport_grid(output_camera.viewport, s)
    uu, vv = np.meshgrid(u, v)
    has_depth = depth > 0
    z = np.where(has_depth, depth, 1.0)
    x_cam = geo.unproject(output_camera.intrinsics, np.stack([uu, vv], axis=-1), z)
    x_obj = output_camera.extrinsics.inverse().apply(x_cam)
    x_ref = reference.camera.extrinsics.apply(x_obj)
    z_ref = x_ref[..., 2]
    front = z_ref > geo.MIN_DEPTH
    z_safe = np.where(front, z_ref, 1.0)
    intr = reference.camera.intrinsics
    ur = intr.fu * x_ref[..., 0] / z_safe + intr.u0
    vr = intr.fv * x_ref[..., 1] / z_safe + intr.v0
    inside = (ur >= 0) & (ur < intr.width) & (vr >= 0) & (vr < intr.height)
    color = geo.bilinear_sample(reference.image, ur, vr)
    in_mask = geo.nearest_sample(reference.mask, ur, vr) > 0.5
    d_ref = geo.nearest_sample(reference.depth, ur, vr)
    depth_ok = (d_ref <= 0) | (np.abs(z_ref - d_ref) <= tau_reproj)
    valid = has_depth & front & inside & in_mask & depth_ok
    color = np.where(valid[..., None], color, 0.0)
    return color, valid


def blend_views(
    reprojections: list[tuple[np.ndarray, np.ndarray]],
    similarities: list[float],
    config: BlendConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Blend reprojected views with validity-gated angular-similarity weights.

    Per-pixel weights w_i = validity_i * max(0, s_i)^power are normalized to
    sum 1 where any view contributes; pixels with no contribution are flagged
    in the returned coverage mask and left at 0.
    """
    if not reprojections:
        raise ShapeMismatch("need at least one reprojection")
    config = config or BlendConfig()
    acc = np.zeros_like(reprojections[0][0])
    total = np.zeros(acc.shape[:2])
    for (color, valid), s in zip(reprojections, similarities):
        w = valid.astype(float) * max(0.0, float(s)) ** config.power
        acc += w[..., None] * color
        total += w
    covered = total > 0
    out = np.where(covered[..., None], acc / np.where(covered, total, 1.0)[..., None], 0.0)
    return out, covered


def render_color(
    latent,
    camera: geo.CameraParams,
    depth: np.ndarray,
    config: BlendConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """IBR color for a rendered depth map using the latent's retained views."""
    config = config or BlendConfig()
    reprojections = [
        reproject_color(camera, depth, view, config.tau_reproj) for view in latent.views
    ]
    sims = [view_similarity(view.camera.extrinsics, camera.extrinsics) for view in latent.views]
    return blend_views(reprojections, sims, config)
