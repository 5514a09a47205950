"""Pose-estimation objective: depth, mask, IoU and latent losses.

The total objective is L_depth + lambda * L_latent + gamma * L_mask +
eta * L_iou, rendered at the pose theta = (exp(omega), t, viewport) and
compared against the observed view resampled onto the same viewport grid.
The analytic gradient covers all ten pose parameters and flows through both
the rendered prediction and the pose-dependent resampling of the
observation (and, for the latent loss, through both volume resampling
paths).

Gradient layout everywhere: [omega (3), t (3), u-, v-, u+, v+].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import modeling as mdl
from . import rendering as rnd
from . import voxels as vox
from .errors import NoValidPixels, ObjectBehindCamera, ShapeMismatch

LOG_CLAMP = 1e-7
POSE_PARAMS = rnd.POSE_PARAMS


@dataclass(frozen=True)
class LossWeights:
    """Weights of the latent, mask and IoU terms (depth has weight 1)."""

    lambda_latent: float = 0.1
    gamma_mask: float = 1.0
    eta_iou: float = 1.0

    def __post_init__(self):
        if min(self.lambda_latent, self.gamma_mask, self.eta_iou) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    depth: float
    mask: float
    iou: float
    latent: float
    total: float
    gradient: np.ndarray | None = None


# ---------------------------------------------------------------------------
# individual losses (value + gradient w.r.t. the prediction)


def loss_depth(predicted: np.ndarray, observed: np.ndarray, observed_mask: np.ndarray):
    """Mean L1 depth error over pixels with valid observed depth inside the mask.

    The subgradient of |x| at 0 is taken as 0.
    """
    if predicted.shape != observed.shape:
        raise ShapeMismatch("depth maps must share a shape")
    valid = (observed > 0) & (observed_mask >= 0.5)
    n = int(valid.sum())
    if n == 0:
        raise NoValidPixels("no valid observed depth inside the mask")
    diff = np.where(valid, predicted - observed, 0.0)
    value = float(np.abs(diff).sum() / n)
    grad = np.sign(diff) / n
    return value, grad


def loss_mask(predicted: np.ndarray, observed: np.ndarray):
    """Mean binary cross entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    if predicted.shape != observed.shape:
        raise ShapeMismatch("masks must share a shape")
    p = np.clip(predicted, LOG_CLAMP, 1.0 - LOG_CLAMP)
    m = observed
    n = predicted.size
    value = float(np.mean(-(m * np.log(p) + (1 - m) * np.log1p(-p))))
    gate = (predicted > LOG_CLAMP) & (predicted < 1.0 - LOG_CLAMP)
    grad = np.where(gate, (-m / p + (1 - m) / (1 - p)) / n, 0.0)
    return value, grad


def loss_iou(predicted: np.ndarray, observed: np.ndarray):
    """log(U) - log(I) with the soft (product t-norm) union and intersection.

    Equals -log(soft IoU); recovers the counting form exactly on binary
    masks. Both sums are floored at 1e-7.
    """
    if predicted.shape != observed.shape:
        raise ShapeMismatch("masks must share a shape")
    p = predicted
    m = observed
    inter = float((p * m).sum())
    union = float((p + m - p * m).sum())
    inter_f = max(inter, LOG_CLAMP)
    union_f = max(union, LOG_CLAMP)
    value = float(np.log(union_f) - np.log(inter_f))
    grad = np.zeros_like(p)
    if union > LOG_CLAMP:
        grad += (1 - m) / union_f
    if inter > LOG_CLAMP:
        grad -= m / inter_f
    return value, grad


# ---------------------------------------------------------------------------
# observed-side resampling (pose-dependent targets)


def _viewport_weights(size: int):
    return (np.arange(size) + 0.5) / size


def observed_maps(query: mdl.ObservedView, viewport: geo.Viewport, size: int, with_gradient: bool = False):
    """Observed depth and mask resampled onto the viewport grid.

    The loss path samples the mask bilinearly (soft target) so the
    dependence on the viewport stays differentiable; binarization is only a
    matter for data preparation, not for the objective. With gradient, also
    returns d(depth)/d(viewport) and d(mask)/d(viewport), shape (S, S, 4).
    """
    u, v = geo.viewport_grid(viewport, size)
    uu, vv = np.meshgrid(u, v)
    if not with_gradient:
        d = geo.depth_sample(query.depth, uu, vv)
        m = geo.bilinear_sample(query.mask, uu, vv)
        return d, m
    d, ddu, ddv = geo.depth_sample(query.depth, uu, vv, with_gradient=True)
    m, mdu, mdv = geo.bilinear_sample(query.mask, uu, vv, with_gradient=True)
    wi = _viewport_weights(size)[None, :]
    wj = _viewport_weights(size)[:, None]
    d_dc = np.stack([ddu * (1 - wi), ddv * (1 - wj), ddu * wi, ddv * wj], axis=-1)
    m_dc = np.stack([mdu * (1 - wi), mdv * (1 - wj), mdu * wi, mdv * wj], axis=-1)
    return d, m, d_dc, m_dc


# ---------------------------------------------------------------------------
# latent loss


def loss_latent(
    query: mdl.ObservedView,
    omega: np.ndarray,
    translation: np.ndarray,
    viewport: geo.Viewport,
    latent: mdl.LatentObject,
    encoder=None,
    with_gradient: bool = True,
    freeze_query_volume: bool = False,
    resolution: int | None = None,
):
    """L1 distance between the query's single-view latent and the fused latent,
    both carried into the query camera frustum.

    The query volume (modeling path) and the fused latent are resampled into
    the frustum of theta = (exp(omega), t, viewport); the loss is the mean
    absolute difference over all voxel-channels. The gradient flows through
    both resampling paths; `freeze_query_volume` cuts the query-volume path.
    """
    omega = np.asarray(omega, dtype=float)
    translation = np.asarray(translation, dtype=float)
    rotation = geo.quat_exp(omega)
    r = latent.radius
    mc = latent.resolution
    s = resolution or mc
    zc = float(translation[2])
    if zc - r <= geo.MIN_DEPTH:
        raise ObjectBehindCamera("latent loss pose reaches behind the camera")
    intr = query.camera.intrinsics
    camera = geo.CameraParams(intr, geo.RigidTransform(rotation, translation), viewport)
    frustum = vox.CameraFrustum(camera, zc, r)

    encoder = encoder or mdl.OccupancyEncoder(depth_tolerance=2.0 * (2.0 * r / mc))
    stack = encoder.encode(query, frustum, mc)
    v_q = vox.deproject(stack, encoder.depth_bins(mc), frustum)

    cube = vox.CanonicalCube(np.zeros(3), r)
    x_canon = cube.voxel_centers((mc, mc, mc)).reshape(-1, 3)

    if not with_gradient:
        g_in = rnd.object_frustum_coords(frustum, rotation, translation, x_canon, v_q.grid_shape)
        l_q = vox.trilinear_gather(v_q.data, g_in)  # (Nc, C)
        lq_data = np.moveaxis(l_q.reshape(mc, mc, mc, -1), -1, 0)
        x_obj = rnd.frustum_object_coords(intr, rotation, translation, viewport, r, s)
        g_out = cube.world_to_grid(x_obj, (mc, mc, mc))
        a = vox.trilinear_gather(np.ascontiguousarray(lq_data), g_out)
        b = vox.trilinear_gather(latent.volume.data, g_out)
        return float(np.abs(a - b).mean()), None

    # inner resample: query frustum volume -> canonical, with pose jacobian
    g_in, dg_in = rnd.object_frustum_coords(
        frustum, rotation, translation, x_canon, v_q.grid_shape, with_jacobian=True, omega=omega
    )
    l_q, dlq_dg = vox.trilinear_gather(v_q.data, g_in, with_gradient=True)
    dlq = np.einsum("ncg,ngp->ncp", dlq_dg, dg_in)
    if freeze_query_volume:
        dlq = np.zeros_like(dlq)
    c = l_q.shape[-1]
    lq_data = np.ascontiguousarray(np.moveaxis(l_q.reshape(mc, mc, mc, c), -1, 0))
    lq_jac = np.ascontiguousarray(np.moveaxis(dlq.reshape(mc, mc, mc, c, POSE_PARAMS), -2, 0))

    # outer resample: canonical -> query frustum, for both volumes
    x_obj, dx_obj = rnd.frustum_object_coords(
        intr, rotation, translation, viewport, r, s, with_jacobian=True, omega=omega
    )
    scale = mc / (2.0 * r)
    g_out = cube.world_to_grid(x_obj, (mc, mc, mc))
    dg_out = scale * dx_obj  # cube frame is axis-aligned and isotropic

    a, da_dg, a_inner = vox.trilinear_gather(lq_data, g_out, with_gradient=True, aux=lq_jac)
    da = np.einsum("ncg,ngp->ncp", da_dg, dg_out) + a_inner
    b, db_dg = vox.trilinear_gather(latent.volume.data, g_out, with_gradient=True)
    db = np.einsum("ncg,ngp->ncp", db_dg, dg_out)

    diff = a - b
    value = float(np.abs(diff).mean())
    grad = (np.sign(diff)[..., None] * (da - db)).sum(axis=(0, 1)) / diff.size
    return value, grad


# ---------------------------------------------------------------------------
# total objective


def total_loss(
    query: mdl.ObservedView,
    omega: np.ndarray,
    translation: np.ndarray,
    viewport: geo.Viewport,
    latent: mdl.LatentObject,
    weights: LossWeights | None = None,
    encoder=None,
    decoder=None,
    resolution: int | None = None,
    with_gradient: bool = True,
    freeze_query_volume: bool = False,
) -> LossBreakdown:
    """Render at theta = (exp(omega), t, viewport) and assemble the objective.

    Returns the weighted sum and, when requested, its analytic gradient over
    the ten pose parameters. The latent term is only evaluated when its
    weight is positive.
    """
    weights = weights or LossWeights()
    omega = np.asarray(omega, dtype=float)
    translation = np.asarray(translation, dtype=float)
    rotation = geo.quat_exp(omega)
    camera = geo.CameraParams(query.camera.intrinsics, geo.RigidTransform(rotation, translation), viewport)
    s = resolution or latent.resolution

    out = rnd.render(latent, camera, decoder, resolution=s, with_jacobian=with_gradient, jacobian_omega=omega)

    if with_gradient:
        d_obs, m_obs, d_obs_dc, m_obs_dc = observed_maps(query, viewport, s, with_gradient=True)
    else:
        d_obs, m_obs = observed_maps(query, viewport, s)

    l_d, g_depth_pred = loss_depth(out.depth, d_obs, m_obs)
    l_m, g_mask_pred = loss_mask(out.mask, m_obs)
    l_i, g_iou_pred = loss_iou(out.mask, m_obs)

    if weights.lambda_latent > 0:
        l_l, g_latent = loss_latent(
            query,
            omega,
            translation,
            viewport,
            latent,
            encoder=encoder,
            with_gradient=with_gradient,
            freeze_query_volume=freeze_query_volume,
            resolution=s,
        )
    else:
        l_l, g_latent = 0.0, np.zeros(POSE_PARAMS)

    total = l_d + weights.lambda_latent * l_l + weights.gamma_mask * l_m + weights.eta_iou * l_i
    if not with_gradient:
        return LossBreakdown(l_d, l_m, l_i, l_l, total)

    # chain each loss through the prediction and the observed-side resampling
    grad = np.zeros(POSE_PARAMS)
    grad += (g_depth_pred[..., None] * out.depth_jacobian).sum(axis=(0, 1))
    grad[6:] += (-g_depth_pred[..., None] * d_obs_dc).sum(axis=(0, 1))

    p = np.clip(out.mask, LOG_CLAMP, 1.0 - LOG_CLAMP)
    g_mask_obs = -(np.log(p) - np.log1p(-p)) / out.mask.size
    mask_chain = weights.gamma_mask * g_mask_pred + weights.eta_iou * g_iou_pred
    grad += (mask_chain[..., None] * out.mask_jacobian).sum(axis=(0, 1))
    inter = max(float((out.mask * m_obs).sum()), LOG_CLAMP)
    union = max(float((out.mask + m_obs - out.mask * m_obs).sum()), LOG_CLAMP)
    g_iou_obs = (1 - out.mask) / union - out.mask / inter
    obs_chain = weights.gamma_mask * g_mask_obs + weights.eta_iou * g_iou_obs
    grad[6:] += (obs_chain[..., None] * m_obs_dc).sum(axis=(0, 1))

    grad += weights.lambda_latent * g_latent
    return LossBreakdown(l_d, l_m, l_i, l_l, total, grad)


# ---------------------------------------------------------------------------
# batched forward evaluation (CEM candidates)


def total_loss_batch(
    query: mdl.ObservedView,
    omegas: np.ndarray,
    translations: np.ndarray,
    viewports: np.ndarray,
    latent: mdl.LatentObject,
    weights: LossWeights | None = None,
    encoder=None,
    resolution: int | None = None,
) -> dict:
    """Forward-only objective for a batch of candidate poses.

    omegas (B, 3), translations (B, 3), viewports (B, 4). Candidates whose
    frustum reaches behind the camera or whose valid-pixel set is empty get
    an infinite total instead of raising. Returns arrays of shape (B,).
    """
    weights = weights or LossWeights()
    omegas = np.asarray(omegas, dtype=float)
    translations = np.asarray(translations, dtype=float)
    viewports = np.asarray(viewports, dtype=float)
    b = omegas.shape[0]
    r = latent.radius
    mc = latent.resolution
    s = resolution or mc
    intr = query.camera.intrinsics

    zc = translations[:, 2]
    renderable = zc - r > geo.MIN_DEPTH
    zc_safe = np.where(renderable, zc, r + 1.0)

    quats = geo.quat_exp(omegas)
    rot = geo.quat_to_matrix(quats)  # (B, 3, 3)

    frac = (np.arange(s) + 0.5) / s
    u = viewports[:, 0:1] + frac[None, :] * (viewports[:, 2:3] - viewports[:, 0:1])  # (B, S)
    v = viewports[:, 1:2] + frac[None, :] * (viewports[:, 3:4] - viewports[:, 1:2])
    z = (zc_safe[:, None] - r) + frac[None, :] * (2.0 * r)  # (B, S)
    a = (u - intr.u0) / intr.fu
    bb = (v - intr.v0) / intr.fv

    shape = (b, s, s, s)
    px = np.broadcast_to(a[:, None, None, :] * z[:, :, None, None], shape)
    py = np.broadcast_to(bb[:, None, :, None] * z[:, :, None, None], shape)
    pz = np.broadcast_to(z[:, :, None, None], shape)
    p = np.stack([px, py, pz], axis=-1).reshape(b, -1, 3)

    x_obj = np.einsum("bni,bij->bnj", p - translations[:, None, :], rot)
    g = (x_obj + r) * (mc / (2.0 * r)) - 0.5
    occ = vox.trilinear_gather(latent.volume.data, g.reshape(-1, 3))[:, 0].reshape(b, s, s, s)
    depth, mask = rnd.composite_transmittance(occ, z)

    uu = np.broadcast_to(u[:, None, :], (b, s, s))
    vv = np.broadcast_to(v[:, :, None], (b, s, s))
    d_obs = geo.depth_sample(query.depth, uu, vv)
    m_obs = geo.bilinear_sample(query.mask, uu, vv)

    valid = (d_obs > 0) & (m_obs >= 0.5)
    nvalid = valid.sum(axis=(1, 2))
    ok = renderable & (nvalid > 0)
    nv = np.where(nvalid > 0, nvalid, 1)
    l_d = np.where(ok, np.abs(np.where(valid, depth - d_obs, 0.0)).sum(axis=(1, 2)) / nv, np.inf)

    pm = np.clip(mask, LOG_CLAMP, 1.0 - LOG_CLAMP)
    l_m = -(m_obs * np.log(pm) + (1 - m_obs) * np.log1p(-pm)).mean(axis=(1, 2))
    inter = np.maximum((mask * m_obs).sum(axis=(1, 2)), LOG_CLAMP)
    union = np.maximum((mask + m_obs - mask * m_obs).sum(axis=(1, 2)), LOG_CLAMP)
    l_i = np.log(union) - np.log(inter)

    if weights.lambda_latent > 0:
        l_l = _latent_batch(query, omegas, translations, viewports, latent, encoder, g, renderable, s)
    else:
        l_l = np.zeros(b)

    total = np.where(ok, l_d + weights.lambda_latent * l_l + weights.gamma_mask * l_m + weights.eta_iou * l_i, np.inf)
    return {"depth": l_d, "mask": l_m, "iou": l_i, "latent": l_l, "total": total}


def _latent_batch(query, omegas, translations, viewports, latent, encoder, g_out, renderable, s):
    """Batched latent term; falls back to per-candidate evaluation for
    encoders without a batch implementation."""
    b = omegas.shape[0]
    r = latent.radius
    mc = latent.resolution
    intr = query.camera.intrinsics
    if encoder is not None and not isinstance(encoder, mdl.OccupancyEncoder):
        out = np.empty(b)
        for i in range(b):
            if not renderable[i]:
                out[i] = np.inf
                continue
            out[i] = loss_latent(
                query,
                omegas[i],
                translations[i],
                geo.Viewport.from_array(viewports[i]),
                latent,
                encoder=encoder,
                with_gradient=False,
                resolution=s,
            )[0]
        return out

    tol = (
        encoder.depth_tolerance
        if isinstance(encoder, mdl.OccupancyEncoder) and encoder.depth_tolerance is not None
        else 2.0 * (2.0 * r / mc)
    )
    zc = np.where(renderable, translations[:, 2], r + 1.0)
    frac = (np.arange(mc) + 0.5) / mc
    u = viewports[:, 0:1] + frac[None, :] * (viewports[:, 2:3] - viewports[:, 0:1])
    v = viewports[:, 1:2] + frac[None, :] * (viewports[:, 3:4] - viewports[:, 1:2])
    z = (zc[:, None] - r) + frac[None, :] * (2.0 * r)
    uu = np.broadcast_to(u[:, None, :], (b, mc, mc))
    vv = np.broadcast_to(v[:, :, None], (b, mc, mc))
    mask_crop = geo.nearest_sample(query.mask, uu, vv)
    depth_crop = geo.depth_sample(query.depth, uu, vv)
    inside = mask_crop > 0.5
    free = (depth_crop > 0)[:, None] & (z[:, :, None, None] < depth_crop[:, None] - tol)
    v_q = (inside[:, None] & ~free).astype(float)  # (B, D, H, W)

    # canonical centers -> per-candidate frustum coordinates
    cube = vox.CanonicalCube(np.zeros(3), r)
    xc = cube.voxel_centers((mc, mc, mc)).reshape(-1, 3)
    quats = geo.quat_exp(omegas)
    rot = geo.quat_to_matrix(quats)
    cam = np.einsum("bij,nj->bni", rot, xc) + translations[:, None, :]
    zs = np.maximum(cam[..., 2], geo.MIN_DEPTH)
    pu = intr.fu * cam[..., 0] / zs + intr.u0
    pv = intr.fv * cam[..., 1] / zs + intr.v0
    widths = (viewports[:, 2] - viewports[:, 0])[:, None]
    heights = (viewports[:, 3] - viewports[:, 1])[:, None]
    gx = (pu - viewports[:, 0:1]) / widths * mc - 0.5
    gy = (pv - viewports[:, 1:2]) / heights * mc - 0.5
    gz = (cam[..., 2] - (zc[:, None] - r)) / (2.0 * r) * mc - 0.5
    g_in = np.stack([gx, gy, gz], axis=-1)

    l_q = vox.trilinear_gather_batch(v_q[:, None], g_in)  # (B, Nc, 1)
    lq_vol = np.ascontiguousarray(l_q[..., 0].reshape(b, 1, mc, mc, mc))
    a = vox.trilinear_gather_batch(lq_vol, g_out)[..., 0]  # (B, N)
    bvals = vox.trilinear_gather(latent.volume.data, g_out.reshape(-1, 3))[:, 0].reshape(b, -1)
    return np.where(renderable, np.abs(a - bvals).mean(axis=1), np.inf)
