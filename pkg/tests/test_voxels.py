import numpy as np
import pytest

from latentcarve import geometry as geo
from latentcarve import voxels as vox
from latentcarve.errors import IndivisibleChannels, ShapeMismatch


def cube(radius=0.5, center=(0.0, 0.0, 0.0)):
    return vox.CanonicalCube(np.array(center), radius)


def gaussian_volume(m=16, channels=1, radius=0.5, sigma=0.18, offset=(0.05, -0.03, 0.08)):
    frame = cube(radius)
    centers = frame.voxel_centers((m, m, m))
    d2 = ((centers - np.array(offset)) ** 2).sum(axis=-1)
    data = np.exp(-d2 / (2 * sigma**2))[None].repeat(channels, axis=0)
    return vox.FeatureVolume(data, frame)


# ---------------------------------------------------------------------------
# deproject / project_unit


def test_deproject_index_bookkeeping():
    img = np.zeros((4, 2, 2))
    img[3, 0, 1] = 7.0
    v = vox.deproject(img, 4, cube())
    assert v.data.shape == (1, 4, 2, 2)
    assert v.data[0, 3, 0, 1] == 7.0
    assert v.data.sum() == 7.0


def test_deproject_project_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(12, 4, 4))
    v = vox.deproject(img, 4, cube())
    back = vox.project_unit(v)
    assert np.array_equal(back, img)


def test_deproject_rejects_indivisible():
    with pytest.raises(IndivisibleChannels):
        vox.deproject(np.zeros((5, 2, 2)), 4, cube())


def test_project_unit_all_ones_row():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(2, 3, 4, 4))
    v = vox.FeatureVolume(data, cube())
    out = vox.project_unit(v, np.ones((1, 6)))
    assert np.allclose(out[0], data.sum(axis=(0, 1)))


def test_project_unit_matches_dense_matmul_oracle():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(3, 2, 5, 5))
    v = vox.FeatureVolume(data, cube())
    mixing = rng.normal(size=(4, 6))
    out = vox.project_unit(v, mixing)
    flat = data.reshape(6, -1)
    oracle = (mixing @ flat).reshape(4, 5, 5)
    assert np.abs(out - oracle).max() < 1e-10


# ---------------------------------------------------------------------------
# trilinear sampling


def test_sample_at_voxel_center():
    v = gaussian_volume(8)
    centers = v.frame.voxel_centers((8, 8, 8))
    pt = centers[3, 5, 2]
    val = vox.sample_trilinear(v, pt.reshape(1, 3))
    assert np.isclose(val[0, 0], v.data[0, 3, 5, 2])


def test_sample_midpoint_average():
    v = gaussian_volume(8)
    centers = v.frame.voxel_centers((8, 8, 8))
    mid = 0.5 * (centers[3, 5, 2] + centers[3, 5, 3])
    val = vox.sample_trilinear(v, mid.reshape(1, 3))
    assert np.isclose(val[0, 0], 0.5 * (v.data[0, 3, 5, 2] + v.data[0, 3, 5, 3]))


def test_affine_function_reproduced_exactly():
    # trilinear interpolation is exact on affine functions
    frame = cube(0.5)
    a = np.array([0.7, -1.3, 2.1])
    b = 0.4
    centers = frame.voxel_centers((8, 8, 8))
    data = (centers @ a + b)[None]
    v = vox.FeatureVolume(data, frame)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.4, 0.4, size=(100, 3))
    vals, grads = vox.sample_trilinear(v, pts, with_gradient=True)
    assert np.abs(vals[:, 0] - (pts @ a + b)).max() < 1e-12
    scale = 1.0  # world units
    assert np.abs(grads[:, 0, :] - a * scale).max() < 1e-9


def test_sample_convex_combination_property():
    v = gaussian_volume(12)
    rng = np.random.default_rng(4)
    pts = rng.uniform(-0.7, 0.7, size=(300, 3))  # includes clamped region
    vals = vox.sample_trilinear(v, pts)
    assert vals.min() >= v.data.min() - 1e-12
    assert vals.max() <= v.data.max() + 1e-12


def test_edge_clamp_outside_grid():
    v = gaussian_volume(8)
    far = np.array([[5.0, 5.0, 5.0]])
    val, grad = vox.sample_trilinear(v, far, with_gradient=True)
    assert np.isclose(val[0, 0], v.data[0, -1, -1, -1])
    assert np.allclose(grad, 0.0)


def test_trilinear_gradient_matches_fd():
    v = gaussian_volume(16)
    rng = np.random.default_rng(5)
    pts = rng.uniform(-0.35, 0.35, size=(200, 3))
    vals, grads = vox.sample_trilinear(v, pts, with_gradient=True)
    h = 1e-7
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        fd = (vox.sample_trilinear(v, pts + e) - vox.sample_trilinear(v, pts - e)) / (2 * h)
        # skip points whose step crosses a cell boundary
        g = v.frame.world_to_grid(pts, (16, 16, 16))
        safe = np.abs(g[:, axis] - np.round(g[:, axis])) > 1e-5
        assert np.abs(fd[safe, 0] - grads[safe, 0, axis]).max() < 1e-5


# ---------------------------------------------------------------------------
# rigid resampling


def test_resample_identity_exact():
    v = gaussian_volume(12)
    out = vox.resample_rigid(v, geo.RigidTransform.identity(), v.frame)
    assert np.abs(out.data - v.data).max() < 1e-12


def test_resample_translation_by_one_voxel():
    m = 8
    frame = cube(0.5)
    rng = np.random.default_rng(6)
    data = rng.uniform(size=(1, m, m, m))
    v = vox.FeatureVolume(data, frame)
    pitch = 1.0 / m
    # src_to_dst shifts src content by +pitch along x
    out = vox.resample_rigid(v, geo.RigidTransform(np.array([1.0, 0, 0, 0]), np.array([pitch, 0, 0])), frame)
    assert np.abs(out.data[0, :, :, 1:] - data[0, :, :, :-1]).max() < 1e-12
    assert np.abs(out.data[0, :, :, 0] - data[0, :, :, 0]).max() < 1e-12  # edge padded


ROUNDTRIP_LINF_BOUND = 0.05  # regression bound: 5% of peak at M=32


def test_resample_rotation_round_trip_regression():
    m = 32
    v = gaussian_volume(m, sigma=0.15, offset=(0.08, -0.05, 0.03))
    rng = np.random.default_rng(7)
    q = geo.random_rotations(1, rng)[0]
    fwd = geo.RigidTransform(q, np.zeros(3))
    mid = vox.resample_rigid(v, fwd, v.frame)
    back = vox.resample_rigid(mid, fwd.inverse(), v.frame)
    err = np.abs(back.data - v.data).max()
    assert err < ROUNDTRIP_LINF_BOUND * v.data.max()


def test_resample_equivariance_regression():
    m = 32
    frame = cube(0.5)
    v = gaussian_volume(m, sigma=0.16)
    rng = np.random.default_rng(8)
    qa, qb = geo.random_rotations(2, rng)
    a = geo.RigidTransform(qa, rng.normal(size=3) * 0.02)
    b = geo.RigidTransform(qb, rng.normal(size=3) * 0.02)
    one_shot = vox.resample_rigid(v, a.compose(b), frame)
    two_step = vox.resample_rigid(vox.resample_rigid(v, b, frame), a, frame)

    # analytic reference: the volume is a sampled Gaussian, so the exact
    # resample is the Gaussian evaluated at pulled-back voxel centers
    centers = frame.voxel_centers((m, m, m))
    inv = a.compose(b).inverse()
    pulled = inv.apply(centers.reshape(-1, 3)).reshape(m, m, m, 3)
    exact = np.exp(-(((pulled - np.array([0.05, -0.03, 0.08])) ** 2).sum(axis=-1)) / (2 * 0.16**2))
    interior = slice(4, m - 4)
    region = (slice(0, 1), interior, interior, interior)
    single_err = np.sqrt(np.mean((one_shot.data[region] - exact[None][region]) ** 2))
    pair_err = np.sqrt(np.mean((one_shot.data[region] - two_step.data[region]) ** 2))
    assert pair_err < 2.0 * single_err


def test_resample_jacobian_matches_fd():
    m = 12
    v = gaussian_volume(m, sigma=0.2)
    rng = np.random.default_rng(9)
    q = geo.quat_exp(rng.normal(size=3) * 0.3)
    t = rng.normal(size=3) * 0.05
    transform = geo.RigidTransform(q, t)
    out, jac = vox.resample_rigid(v, transform, v.frame, with_jacobian=True)
    omega0 = geo.quat_log(q)
    h = 1e-5

    params = np.concatenate([omega0, t])
    centers = v.frame.voxel_centers((m, m, m))

    def forward(p):
        tr = geo.RigidTransform(geo.quat_exp(p[:3]), p[3:])
        return vox.resample_rigid(v, tr, v.frame).data

    # gate out voxels whose pulled-back coords sit near cell boundaries
    rot = geo.quat_to_matrix(q)
    g = v.frame.world_to_grid((centers - t) @ rot, (m, m, m))
    frac = np.abs(g - np.round(g))
    interior = (g > 0.02).all(axis=-1) & (g < m - 1.02).all(axis=-1)
    safe = (frac > 5e-4).all(axis=-1) & interior

    worst = 0.0
    for a in range(6):
        e = np.zeros(6)
        e[a] = h
        fd = (forward(params + e) - forward(params - e)) / (2 * h)
        ana = jac[0, ..., a]
        denom = np.maximum(np.abs(fd[0]), 1e-3 * np.abs(fd[0]).max() + 1e-12)
        rel = np.abs(ana - fd[0]) / denom
        worst = max(worst, rel[safe].max())
    assert worst < 1e-4


def test_volume_dump_round_trip(tmp_path):
    v = gaussian_volume(8, channels=2)
    path = tmp_path / "vol.bin"
    vox.save_volume(path, v)
    back = vox.load_volume(path)
    assert np.array_equal(back.data, v.data)
    assert vox.frames_equal(back.frame, v.frame)


def test_frustum_frame_dump_round_trip(tmp_path):
    intr = geo.CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
    cam = geo.CameraParams(
        intr,
        geo.RigidTransform(geo.quat_exp(np.array([0.1, 0.2, 0.3])), np.array([0.0, 0.0, 1.0])),
        geo.Viewport(30.0, 30.0, 98.0, 98.0),
    )
    frame = vox.CameraFrustum(cam, 1.0, 0.2)
    v = vox.FeatureVolume(np.random.default_rng(0).uniform(size=(1, 4, 4, 4)), frame)
    path = tmp_path / "frustum.bin"
    vox.save_volume(path, v)
    back = vox.load_volume(path)
    assert vox.frames_equal(back.frame, frame, tol=1e-9)


def test_frustum_world_to_grid_inverts_voxel_centers():
    intr = geo.CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
    cam = geo.CameraParams(
        intr,
        geo.RigidTransform.identity(),
        geo.Viewport(30.0, 40.0, 90.0, 100.0),
    )
    frame = vox.CameraFrustum(cam, 1.0, 0.25)
    m = 8
    centers = frame.voxel_centers((m, m, m))
    g = frame.world_to_grid(centers, (m, m, m))
    k, j, i = np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij")
    assert np.abs(g[..., 0] - i).max() < 1e-9
    assert np.abs(g[..., 1] - j).max() < 1e-9
    assert np.abs(g[..., 2] - k).max() < 1e-9


def test_frustum_grid_jacobian_matches_fd():
    intr = geo.CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
    cam = geo.CameraParams(intr, geo.RigidTransform.identity(), geo.Viewport(30.0, 40.0, 90.0, 100.0))
    frame = vox.CameraFrustum(cam, 1.0, 0.25)
    rng = np.random.default_rng(11)
    pts = rng.uniform(-0.2, 0.2, size=(50, 3)) + np.array([0, 0, 1.0])
    g, jac = frame.world_to_grid(pts, (8, 8, 8), with_jacobian=True)
    h = 1e-7
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        fd = (frame.world_to_grid(pts + e, (8, 8, 8)) - frame.world_to_grid(pts - e, (8, 8, 8))) / (2 * h)
        assert np.abs(fd - jac[:, :, axis]).max() < 1e-5


def test_batched_gather_matches_single():
    rng = np.random.default_rng(12)
    data = rng.uniform(size=(3, 1, 6, 6, 6))
    coords = rng.uniform(-1, 7, size=(3, 40, 3))
    batched = vox.trilinear_gather_batch(data, coords)
    for b in range(3):
        single = vox.trilinear_gather(data[b], coords[b])
        assert np.abs(batched[b] - single).max() < 1e-14
