"""Shared builders for the differentiable-objective test configurations."""

import numpy as np

from latentcarve import geometry as geo
from latentcarve import modeling as mdl
from latentcarve import voxels as vox


def _interior_window(resolution, margin=2.0):
    """Smooth bump that is 1 in the volume interior and 0 at the faces.

    Frustum samples outside the canonical cube are edge-clamped; flattening
    the volume near its faces makes that clamp transition seamless, so
    finite differences are not polluted by one-sided-derivative jumps at the
    clamp boundary.
    """
    i = np.arange(resolution)
    edge = np.minimum(i, resolution - 1 - i) / margin
    w1 = np.clip(edge, 0.0, 1.0)
    w1 = w1 * w1 * (3 - 2 * w1)  # smoothstep
    return w1[:, None, None] * w1[None, :, None] * w1[None, None, :]


def smooth_latent(rng, radius=1.2, resolution=12, floor=0.03, peak=0.4):
    """Latent volume made of random Gaussian blobs; values in (floor, peak).

    Smoothness keeps trilinear kinks negligible, moderate occupancies keep
    the composited mask away from the BCE clamp where its gradient is steep,
    and the interior window keeps edge-clamped samples noise-free -- all
    three matter for clean finite-difference gradient checks.
    """
    frame = vox.CanonicalCube(np.zeros(3), radius)
    centers = frame.voxel_centers((resolution,) * 3)
    data = np.zeros(centers.shape[:-1])
    for _ in range(3):
        mu = rng.uniform(-0.35, 0.35, 3) * radius
        sigma = rng.uniform(0.35, 0.55) * radius
        amp = rng.uniform(0.4, 0.9)
        data += amp * np.exp(-((centers - mu) ** 2).sum(axis=-1) / (2 * sigma**2))
    data = data * _interior_window(resolution)
    data = floor + (peak - floor) * data / max(data.max(), 1e-9)
    return mdl.LatentObject(vox.FeatureVolume(data[None], frame), radius, [])


def smooth_view(rng, intrinsics=None):
    """Observed view with smooth positive depth and a smooth mask in [0.6, 0.9].

    Every pixel is valid and away from the 0.5 mask threshold, so the
    valid-pixel set is constant under small pose perturbations. The depth
    band (1.28+) is disjoint from any rendered depth window at the suite's
    pose distances, so the L1 depth sign never flips inside an FD step.
    """
    intrinsics = intrinsics or geo.CameraIntrinsics(140.0, 140.0, 64.0, 64.0, 128, 128)
    h, w = intrinsics.height, intrinsics.width
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    fx = rng.uniform(0.5, 2.0, 4)
    ph = rng.uniform(0, 2 * np.pi, 4)
    depth = 14.0 + 1.2 * np.sin(2 * np.pi * fx[0] * uu / w + ph[0]) * np.cos(
        2 * np.pi * fx[1] * vv / h + ph[1]
    )
    mask = 0.75 + 0.14 * np.sin(2 * np.pi * fx[2] * uu / w + ph[2]) * np.cos(
        2 * np.pi * fx[3] * vv / h + ph[3]
    )
    image = np.zeros((h, w, 3))
    cam = geo.CameraParams(intrinsics, geo.RigidTransform.identity(), geo.Viewport.full(intrinsics))
    view = mdl.ObservedView.__new__(mdl.ObservedView)
    object.__setattr__(view, "image", image)
    object.__setattr__(view, "mask", mask)
    object.__setattr__(view, "depth", depth)
    object.__setattr__(view, "camera", cam)
    return view


def smooth_encoder(rng, resolution=12, floor=0.55, peak=0.95):
    # blob-built stack: slope changes across voxel cells stay O(pitch/sigma^2)
    # so finite differences are not polluted by interpolation kinks; windowed
    # to the interior for the same clamp-boundary reason as smooth_latent.
    # The value band sits strictly above the latent's, so the latent-loss L1
    # sign is constant and FD-clean.
    idx = np.stack(np.meshgrid(*[np.arange(resolution)] * 3, indexing="ij"), axis=-1)
    stack = np.zeros((resolution,) * 3)
    for _ in range(3):
        mu = rng.uniform(0.2, 0.8, 3) * resolution
        sigma = rng.uniform(0.25, 0.45) * resolution
        stack += rng.uniform(0.3, 0.8) * np.exp(-((idx - mu) ** 2).sum(axis=-1) / (2 * sigma**2))
    stack = stack * _interior_window(resolution)
    stack = floor + (peak - floor) * stack / max(stack.max(), 1e-9)
    return mdl.FixedVolumeEncoder(stack)


def random_pose(rng, distance=(6.0, 9.0), lateral=0.5):
    q = geo.random_rotations(1, rng)[0]
    t = np.array(
        [rng.uniform(-lateral, lateral), rng.uniform(-lateral, lateral), rng.uniform(*distance)]
    )
    return geo.RigidTransform(q, t)


def smooth_config(seed):
    """One randomized configuration for the gradient suite."""
    rng = np.random.default_rng(seed)
    latent = smooth_latent(rng)
    view = smooth_view(rng)
    pose = random_pose(rng)
    omega = geo.quat_log(pose.rotation)
    vp = geo.zoom_viewport(view.camera.intrinsics, pose.translation, 2 * latent.radius, 1.2)
    jitter = rng.uniform(-2.0, 2.0, 4) + rng.uniform(0.05, 0.45, 4)  # break pixel alignment
    vp = geo.Viewport.from_array(vp.as_array() + jitter * np.array([-1, -1, 1, 1]))
    encoder = smooth_encoder(rng, latent.resolution)
    return view, latent, omega, pose.translation, vp, encoder
