"""Build per-view feature volumes and fuse them into a canonical latent object.

The reference view encoder is a deterministic occupancy carver: each frustum
voxel is 1 when its projection falls inside the view's object mask and is
not in observed free space, 0 otherwise. Fusing such volumes with the
`carve` strategy (per-voxel minimum) computes a latent-space visual hull,
which is what the rendering and pose stages consume. Learned encoders can be
substituted through the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import voxels as vox
from .errors import EmptyMask, NoViews, ShapeMismatch


@dataclass(frozen=True, eq=False)
class ObservedView:
    """One posed RGB-D observation: image, binary mask, depth, camera."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    camera: geo.CameraParams

    def __post_init__(self):
        image = np.asarray(self.image, dtype=float)
        mask = np.asarray(self.mask, dtype=float)
        depth = np.asarray(self.depth, dtype=float)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeMismatch("image must be (H, W, 3)")
        if mask.shape != image.shape[:2] or depth.shape != image.shape[:2]:
            raise ShapeMismatch("image, mask and depth must share H x W")
        if not np.isin(np.unique(mask), (0.0, 1.0)).all():
            raise ValueError("mask must be binary")
        if depth.min() < 0 or not np.all(np.isfinite(depth)):
            raise ValueError("depth must be finite and >= 0")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "depth", depth)


@dataclass(frozen=True, eq=False)
class LatentObject:
    """Fused canonical-frame feature volume plus the view registry kept for IBR."""

    volume: vox.FeatureVolume
    radius: float
    views: list = field(default_factory=list)

    @property
    def resolution(self) -> int:
        return self.volume.resolution

    @property
    def center(self) -> np.ndarray:
        return self.volume.frame.center


class OccupancyEncoder:
    """Reference encoder: one occupancy scalar per frustum voxel.

    A voxel is occupied when its projection lies inside the cropped,
    resampled mask and depth consistency holds: the observed depth at that
    pixel is invalid, or the voxel is no more than `depth_tolerance` in
    front of the observed surface. With depth this is a visual hull plus
    free-space carving; with mask only, silhouette carving.

    depth_tolerance defaults to 2 voxel pitches of the frustum.
    """

    def __init__(self, depth_tolerance: float | None = None):
        self.depth_tolerance = depth_tolerance

    def depth_bins(self, resolution: int) -> int:
        return resolution

    def encode(self, view: ObservedView, frustum: vox.CameraFrustum, resolution: int) -> np.ndarray:
        if view.mask.sum() == 0:
            raise EmptyMask("view mask has no positive pixels")
        m = resolution
        vp = frustum.camera.viewport
        mask_crop = geo.crop_resample(view.mask, vp, m, method="nearest")
        depth_crop = geo.crop_resample(view.depth, vp, m, method="depth")
        z = frustum.depths(m)
        pitch = 2.0 * frustum.radius / m
        tol = self.depth_tolerance if self.depth_tolerance is not None else 2.0 * pitch
        inside = mask_crop > 0.5
        free = (depth_crop > 0) & (z[:, None, None] < depth_crop[None] - tol)
        occ = inside[None] & ~free
        return occ.astype(float)  # (D=m, m, m) channel-stacked occupancy


class FixedVolumeEncoder:
    """Test/plug-in encoder returning a fixed occupancy stack for any view."""

    def __init__(self, stack: np.ndarray):
        self.stack = np.asarray(stack, dtype=float)

    def depth_bins(self, resolution: int) -> int:
        return self.stack.shape[0]

    def encode(self, view, frustum, resolution) -> np.ndarray:
        return self.stack


def encode_view_reference(
    view: ObservedView,
    frustum: vox.CameraFrustum,
    resolution: int,
    depth_tolerance: float | None = None,
) -> vox.FeatureVolume:
    """Occupancy frustum volume for one view (reference encoder pipeline)."""
    encoder = OccupancyEncoder(depth_tolerance)
    stack = encoder.encode(view, frustum, resolution)
    return vox.deproject(stack, encoder.depth_bins(resolution), frustum)


# ---------------------------------------------------------------------------
# view fusion


class EmaRecurrentFusion:
    """Non-learned recurrent fusion reference: exponential moving average.

    Stands in for a trained recurrent unit. Order-dependent by design; the
    caller owns the view ordering.
    """

    def __init__(self, decay: float = 0.5):
        self.decay = decay

    def init_state(self, first: np.ndarray) -> np.ndarray:
        return first.copy()

    def update(self, state: np.ndarray, volume: np.ndarray) -> np.ndarray:
        return self.decay * state + (1.0 - self.decay) * volume

    def finalize(self, state: np.ndarray) -> np.ndarray:
        return state


def fuse(volumes: list[vox.FeatureVolume], strategy="carve") -> vox.FeatureVolume:
    """Reduce same-frame volumes: "average", "carve" (min), or a recurrent object.

    Average and carve are order-independent; a recurrent strategy (anything
    with init_state/update/finalize) folds volumes in the given order.
    """
    if not volumes:
        raise NoViews("cannot fuse zero volumes")
    first = volumes[0]
    for v in volumes[1:]:
        if v.data.shape != first.data.shape or not vox.frames_equal(v.frame, first.frame, tol=1e-9):
            raise ShapeMismatch("fusion requires identical shapes and frames")
    if strategy == "average":
        data = np.mean([v.data for v in volumes], axis=0)
    elif strategy == "carve":
        data = np.minimum.reduce([v.data for v in volumes])
    elif hasattr(strategy, "update"):
        state = strategy.init_state(first.data)
        for v in volumes[1:]:
            state = strategy.update(state, v.data)
        data = strategy.finalize(state)
    else:
        raise ValueError("unknown fusion strategy %r" % (strategy,))
    return vox.FeatureVolume(data, first.frame)


# ---------------------------------------------------------------------------
# latent construction


def view_frustum(view: ObservedView, radius: float, zoom: float = 1.2) -> vox.CameraFrustum:
    """The view's object frustum: viewport from the registered object center.

    zoom is the crop distance in object diameters; 1.0 bounds the object
    exactly, the default leaves a small margin so silhouettes never touch
    the crop edge.
    """
    t = view.camera.extrinsics.translation
    viewport = geo.zoom_viewport(view.camera.intrinsics, t, 2.0 * radius, target_distance=zoom)
    camera = view.camera.replace_viewport(viewport)
    return vox.CameraFrustum(camera, float(t[2]), radius)


def build_latent(
    views: list[ObservedView],
    radius: float,
    resolution: int = 16,
    encoder=None,
    fusion="carve",
    zoom: float = 1.2,
    encode_resolution: int | None = None,
) -> LatentObject:
    """Encode every view into its frustum, resample to the canonical cube, fuse.

    Each view is encoded (encode -> deproject), carried into the canonical
    object cube by the camera-to-object resample, and the per-view volumes
    are reduced with the chosen fusion strategy.

    encode_resolution sets the frustum grid the encoder carves on; the
    default of twice the canonical resolution keeps boundary localization
    well below one latent voxel at negligible cost. The carving depth
    tolerance of the default encoder is two canonical voxel pitches.
    """
    if not views:
        raise NoViews("need at least one view")
    enc_res = encode_resolution or 2 * resolution
    pitch = 2.0 * radius / resolution
    encoder = encoder or OccupancyEncoder(depth_tolerance=2.0 * pitch)
    canonical = vox.CanonicalCube(np.zeros(3), radius)
    resampled = []
    for view in views:
        frustum = view_frustum(view, radius, zoom)
        stack = encoder.encode(view, frustum, enc_res)
        frustum_vol = vox.deproject(stack, encoder.depth_bins(enc_res), frustum)
        cam_to_obj = view.camera.extrinsics.inverse()
        resampled.append(
            vox.resample_rigid(frustum_vol, cam_to_obj, canonical, (resolution,) * 3)
        )
    fused = fuse(resampled, fusion)
    return LatentObject(fused, radius, list(views))
