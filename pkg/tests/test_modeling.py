import numpy as np
import pytest

from latentcarve import geometry as geo
from latentcarve import modeling as mdl
from latentcarve import synth
from latentcarve import voxels as vox
from latentcarve.errors import EmptyMask, NoViews, ShapeMismatch


def intr():
    return geo.CameraIntrinsics(140.0, 140.0, 64.0, 64.0, 128, 128)


def sphere_scene(radius=0.08):
    return synth.SyntheticScene([synth.Sphere(np.zeros(3), radius)])


def make_views(scene, n=8, distance=0.8):
    poses = synth.sphere_view_poses(n, distance)
    return [synth.render_view(scene, intr(), p) for p in poses]


def carve_oracle(scene_views, radius, resolution, tol):
    """Brute force: project each canonical voxel into every view, test mask
    membership and depth consistency on the full-resolution inputs."""
    cube = vox.CanonicalCube(np.zeros(3), radius)
    centers = cube.voxel_centers((resolution,) * 3).reshape(-1, 3)
    occupied = np.ones(len(centers), dtype=bool)
    for view in scene_views:
        cam_pts = view.camera.extrinsics.apply(centers)
        uv, z = geo.project(view.camera.intrinsics, cam_pts)
        inside = geo.nearest_sample(view.mask, uv[:, 0], uv[:, 1]) > 0.5
        d = geo.nearest_sample(view.depth, uv[:, 0], uv[:, 1])
        consistent = (d <= 0) | (z >= d - tol)
        occupied &= inside & consistent
    return occupied.reshape(resolution, resolution, resolution)


# ---------------------------------------------------------------------------
# reference encoder


def full_mask_view():
    h = w = 64
    image = np.zeros((h, w, 3))
    mask = np.ones((h, w))
    depth = np.zeros((h, w))
    cam = geo.CameraParams(
        geo.CameraIntrinsics(80.0, 80.0, 32.0, 32.0, w, h),
        geo.RigidTransform(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 1.0])),
        geo.Viewport(0.0, 0.0, float(w), float(h)),
    )
    return mdl.ObservedView(image, mask, depth, cam)


def test_full_mask_no_depth_gives_all_ones():
    view = full_mask_view()
    frustum = mdl.view_frustum(view, radius=0.2)
    vol = mdl.encode_view_reference(view, frustum, 8)
    assert np.array_equal(vol.data, np.ones((1, 8, 8, 8)))


def test_empty_mask_region_gives_zero_columns():
    view = full_mask_view()
    mask = view.mask.copy()
    mask[:, :32] = 0.0  # left half empty
    view = mdl.ObservedView(view.image, mask, view.depth, view.camera)
    frustum = mdl.view_frustum(view, radius=0.2)
    vol = mdl.encode_view_reference(view, frustum, 8)
    crop = geo.crop_resample(mask, frustum.camera.viewport, 8, method="nearest")
    expected = np.broadcast_to(crop > 0.5, (8, 8, 8))
    assert np.array_equal(vol.data[0] > 0.5, expected)


def test_encoder_output_is_binary():
    scene = sphere_scene()
    view = make_views(scene, n=1)[0]
    frustum = mdl.view_frustum(view, scene.bounding_radius)
    vol = mdl.encode_view_reference(view, frustum, 16)
    assert set(np.unique(vol.data)) <= {0.0, 1.0}


def test_encoder_rejects_empty_mask():
    view = full_mask_view()
    empty = mdl.ObservedView(view.image, np.zeros_like(view.mask), view.depth, view.camera)
    frustum = mdl.view_frustum(view, radius=0.2)
    with pytest.raises(EmptyMask):
        mdl.encode_view_reference(empty, frustum, 8)


# ---------------------------------------------------------------------------
# fusion


def const_volume(value, m=4):
    frame = vox.CanonicalCube(np.zeros(3), 0.5)
    return vox.FeatureVolume(np.full((1, m, m, m), float(value)), frame)


def test_fuse_average_of_zero_and_one():
    out = mdl.fuse([const_volume(0.0), const_volume(1.0)], "average")
    assert np.allclose(out.data, 0.5)


def test_fuse_carve_takes_minimum():
    out = mdl.fuse([const_volume(0.3), const_volume(0.8)], "carve")
    assert np.allclose(out.data, 0.3)


def test_fuse_average_matches_mean_oracle():
    rng = np.random.default_rng(0)
    frame = vox.CanonicalCube(np.zeros(3), 0.5)
    vols = [vox.FeatureVolume(rng.uniform(size=(2, 4, 4, 4)), frame) for _ in range(5)]
    out = mdl.fuse(vols, "average")
    oracle = sum(v.data for v in vols) / 5
    assert np.abs(out.data - oracle).max() < 1e-12


def test_fuse_permutation_invariance_bit_exact():
    rng = np.random.default_rng(1)
    frame = vox.CanonicalCube(np.zeros(3), 0.5)
    vols = [vox.FeatureVolume(rng.uniform(size=(1, 4, 4, 4)), frame) for _ in range(4)]
    perm = [vols[i] for i in (2, 0, 3, 1)]
    assert np.array_equal(mdl.fuse(vols, "carve").data, mdl.fuse(perm, "carve").data)
    # average over a permutation-invariant reduction (np.mean over stacked
    # axis) is bit-exact under reordering of identical summands only if the
    # reduction order is fixed -- np.mean stacks then reduces pairwise, so
    # verify numerically at strict tolerance
    assert np.abs(mdl.fuse(vols, "average").data - mdl.fuse(perm, "average").data).max() < 1e-15


def test_fuse_idempotent_on_identical_views():
    v = const_volume(0.7)
    assert np.array_equal(mdl.fuse([v, v, v], "carve").data, v.data)
    assert np.abs(mdl.fuse([v, v, v], "average").data - v.data).max() < 1e-15


def test_fuse_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        mdl.fuse([const_volume(0.0, 4), const_volume(1.0, 8)], "carve")


def test_recurrent_fusion_order_dependent():
    a, b = const_volume(0.0), const_volume(1.0)
    ema = mdl.EmaRecurrentFusion(decay=0.5)
    ab = mdl.fuse([a, b], ema)
    ba = mdl.fuse([b, a], ema)
    assert np.allclose(ab.data, 0.5)
    assert not np.array_equal(ab.data, ba.data) or True  # same here by symmetry
    c = const_volume(0.25)
    abc = mdl.fuse([a, b, c], ema)
    cba = mdl.fuse([c, b, a], ema)
    assert not np.array_equal(abc.data, cba.data)


def test_carve_monotonicity():
    scene = sphere_scene()
    views = make_views(scene, n=6)
    r = scene.bounding_radius
    small = mdl.build_latent(views[:3], r, resolution=12)
    large = mdl.build_latent(views, r, resolution=12)
    assert np.all(large.volume.data <= small.volume.data + 1e-12)


# ---------------------------------------------------------------------------
# latent construction vs carving oracle


def test_single_view_average_equals_resampled_view():
    scene = sphere_scene()
    view = make_views(scene, n=1)[0]
    r = scene.bounding_radius
    latent = mdl.build_latent([view], r, resolution=12, fusion="average")
    latent2 = mdl.build_latent([view], r, resolution=12, fusion="carve")
    assert np.array_equal(latent.volume.data, latent2.volume.data)


def test_build_latent_requires_views():
    with pytest.raises(NoViews):
        mdl.build_latent([], 0.1)


def test_ground_truth_containment_and_oracle_iou():
    # visual hull is a superset of the object; fused volume tracks the
    # brute-force carving oracle closely on convex shapes
    hi = geo.CameraIntrinsics(280.0, 280.0, 128.0, 128.0, 256, 256)
    for scene in (
        sphere_scene(0.08),
        synth.SyntheticScene([synth.Box(np.zeros(3), np.array([0.07, 0.05, 0.06]))]),
    ):
        r = scene.bounding_radius
        poses = synth.sphere_view_poses(16, 0.8)
        views = [synth.render_view(scene, hi, p) for p in poses]
        m = 24
        latent = mdl.build_latent(views, r, resolution=m)
        occupied = latent.volume.data[0] >= 0.5

        pitch = 2 * r / m
        oracle = carve_oracle(views, r, m, tol=2 * pitch)
        inter = np.logical_and(occupied, oracle).sum()
        union = np.logical_or(occupied, oracle).sum()
        assert inter / union >= 0.95

        cube = vox.CanonicalCube(np.zeros(3), r)
        centers = cube.voxel_centers((m,) * 3)
        # strict interior: voxels whose full extent is inside the object
        inside = scene.contains(centers.reshape(-1, 3)).reshape(m, m, m)
        eroded = inside.copy()
        for ax in range(3):
            eroded &= np.roll(inside, 1, axis=ax) & np.roll(inside, -1, axis=ax)
        assert occupied[eroded].all()
