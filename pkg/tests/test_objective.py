import numpy as np
import pytest

from latentcarve import geometry as geo
from latentcarve import modeling as mdl
from latentcarve import objective as obj
from latentcarve import synth
from latentcarve import voxels as vox
from latentcarve.errors import NoValidPixels
from conftest import smooth_config, smooth_latent, smooth_view


# ---------------------------------------------------------------------------
# loss_depth


def test_loss_depth_identical():
    d = np.full((10, 10), 1.3)
    m = np.ones((10, 10))
    value, grad = obj.loss_depth(d, d, m)
    assert value == 0.0
    assert np.all(grad == 0)


def test_loss_depth_constant_offset():
    obs = np.full((10, 10), 1.0)
    value, _ = obj.loss_depth(obs + 0.01, obs, np.ones_like(obs))
    assert np.isclose(value, 0.01)


def test_loss_depth_matches_direct_oracle():
    rng = np.random.default_rng(0)
    pred = rng.uniform(0.5, 1.5, (12, 12))
    obs = rng.uniform(0.5, 1.5, (12, 12))
    obs[rng.uniform(size=obs.shape) < 0.2] = 0.0
    mask = (rng.uniform(size=obs.shape) > 0.3).astype(float)
    value, grad = obj.loss_depth(pred, obs, mask)
    sel = (obs > 0) & (mask >= 0.5)
    oracle = sum(abs(pred[j, i] - obs[j, i]) for j, i in zip(*np.nonzero(sel))) / sel.sum()
    assert abs(value - oracle) < 1e-12
    # gradient direction: increasing a positive-diff pixel increases the loss
    h = 1e-8
    j, i = next(zip(*np.nonzero(sel)))
    bumped = pred.copy()
    bumped[j, i] += h
    v2, _ = obj.loss_depth(bumped, obs, mask)
    assert abs((v2 - value) / h - grad[j, i]) < 1e-4


def test_loss_depth_no_valid_pixels():
    with pytest.raises(NoValidPixels):
        obj.loss_depth(np.ones((4, 4)), np.zeros((4, 4)), np.ones((4, 4)))


# ---------------------------------------------------------------------------
# loss_mask


def test_loss_mask_perfect_prediction():
    m = (np.arange(64).reshape(8, 8) % 2).astype(float)
    value, _ = obj.loss_mask(m, m)
    assert value < 1e-6


def test_loss_mask_uniform_half():
    m = (np.arange(64).reshape(8, 8) % 2).astype(float)
    value, _ = obj.loss_mask(np.full_like(m, 0.5), m)
    assert np.isclose(value, np.log(2), atol=1e-12)


def test_loss_mask_matches_oracle():
    rng = np.random.default_rng(1)
    pred = rng.uniform(0.01, 0.99, (9, 9))
    m = (rng.uniform(size=(9, 9)) > 0.5).astype(float)
    value, grad = obj.loss_mask(pred, m)
    oracle = np.mean(
        [
            -(m[j, i] * np.log(pred[j, i]) + (1 - m[j, i]) * np.log(1 - pred[j, i]))
            for j in range(9)
            for i in range(9)
        ]
    )
    assert abs(value - oracle) < 1e-12
    h = 1e-7
    bumped = pred.copy()
    bumped[3, 4] += h
    v2, _ = obj.loss_mask(bumped, m)
    assert abs((v2 - value) / h - grad[3, 4]) < 1e-5


# ---------------------------------------------------------------------------
# loss_iou


def test_loss_iou_perfect_overlap():
    m = (np.arange(64).reshape(8, 8) % 3 == 0).astype(float)
    value, _ = obj.loss_iou(m, m)
    assert abs(value) < 1e-12


def test_loss_iou_double_union():
    m = np.zeros((8, 8))
    m[:4] = 1.0
    pred = np.zeros((8, 8))
    pred[:4] = 1.0
    pred[4:6] = 1.0  # equal-area disjoint extra: U = 48, I = 32... adjust
    pred2 = np.zeros((8, 8))
    pred2[:4] = 1.0
    pred2[4:8] = 1.0  # covers observed plus equal-area disjoint region
    value, _ = obj.loss_iou(pred2, m)
    assert np.isclose(value, np.log(2), atol=1e-12)


def test_loss_iou_matches_formula_oracle():
    rng = np.random.default_rng(2)
    pred = rng.uniform(size=(7, 7))
    m = rng.uniform(size=(7, 7))
    value, grad = obj.loss_iou(pred, m)
    inter = (pred * m).sum()
    union = (pred + m - pred * m).sum()
    assert abs(value - (np.log(union) - np.log(inter))) < 1e-10
    h = 1e-7
    bumped = pred.copy()
    bumped[2, 5] += h
    v2, _ = obj.loss_iou(bumped, m)
    assert abs((v2 - value) / h - grad[2, 5]) < 1e-5


def test_loss_iou_equals_neg_log_iou_on_binary():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pred = (rng.uniform(size=(10, 10)) > 0.5).astype(float)
        m = (rng.uniform(size=(10, 10)) > 0.5).astype(float)
        inter = np.logical_and(pred > 0, m > 0).sum()
        union = np.logical_or(pred > 0, m > 0).sum()
        if inter == 0 or union == 0:
            continue
        value, _ = obj.loss_iou(pred, m)
        assert abs(value - (-np.log(inter / union))) < 1e-10


# ---------------------------------------------------------------------------
# latent loss


def test_loss_latent_zero_when_latent_equals_query_volume():
    # a single-view latent compared against itself at the same pose is 0
    rng = np.random.default_rng(4)
    view, latent, omega, t, vp, encoder = smooth_config(4)
    single = mdl.build_latent  # noqa: F841 (the property is exercised below)
    # build the query volume exactly as loss_latent does, fuse it as the latent
    from latentcarve import rendering as rnd

    rotation = geo.quat_exp(omega)
    cam = geo.CameraParams(view.camera.intrinsics, geo.RigidTransform(rotation, t), vp)
    frustum = vox.CameraFrustum(cam, float(t[2]), latent.radius)
    mc = latent.resolution
    stack = encoder.encode(view, frustum, mc)
    v_q = vox.deproject(stack, encoder.depth_bins(mc), frustum)
    cube = vox.CanonicalCube(np.zeros(3), latent.radius)
    l_q = vox.resample_rigid(v_q, geo.RigidTransform(rotation, t).inverse(), cube, (mc,) * 3)
    same_latent = mdl.LatentObject(l_q, latent.radius, [])
    value, _ = obj.loss_latent(view, omega, t, vp, same_latent, encoder=encoder, with_gradient=False)
    assert value < 1e-10


def test_loss_latent_gradient_matches_fd():
    view, latent, omega, t, vp, encoder = smooth_config(11)
    value, grad = obj.loss_latent(view, omega, t, vp, latent, encoder=encoder)
    params = np.concatenate([omega, t, vp.as_array()])
    steps = [1e-5] * 6 + [1e-3] * 4
    fd = np.zeros(10)
    for a in range(10):
        e = np.zeros(10)
        e[a] = steps[a]
        vp_p = geo.Viewport.from_array((params + e)[6:10])
        vp_m = geo.Viewport.from_array((params - e)[6:10])
        f_p, _ = obj.loss_latent(
            view, (params + e)[0:3], (params + e)[3:6], vp_p, latent, encoder=encoder, with_gradient=False
        )
        f_m, _ = obj.loss_latent(
            view, (params - e)[0:3], (params - e)[3:6], vp_m, latent, encoder=encoder, with_gradient=False
        )
        fd[a] = (f_p - f_m) / (2 * steps[a])
    # error measured against the gradient scale: per-component relative error
    # is ill-posed at near-zero components, where central differences of a
    # trilinear interpolant cannot converge when a sample sits on a cell edge
    assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-3


def test_loss_latent_monotone_probe():
    # with identity reference networks H(G(x)) nearly cancels the round trip,
    # so the latent term's pose sensitivity lives in the front-surface shell
    # only; frozen measurement: 81% of 20-degree perturbations increase it
    # (small-angle monotonicity requires learned feature encoders)
    intr = geo.CameraIntrinsics(140.0, 140.0, 64.0, 64.0, 128, 128)
    wins = 0
    trials = 0
    for scene_seed in (6, 7, 8):
        rng = np.random.default_rng(scene_seed)
        scene = synth.random_asymmetric_scene(rng)
        r = scene.bounding_radius
        views = [synth.render_view(scene, intr, p) for p in synth.sphere_view_poses(16, 0.8)]
        latent = mdl.build_latent(views, r, resolution=16)
        query = views[0]
        extr = query.camera.extrinsics
        omega = geo.quat_log(extr.rotation)
        vp = geo.zoom_viewport(intr, extr.translation, 2 * r, 1.2)
        base, _ = obj.loss_latent(query, omega, extr.translation, vp, latent, with_gradient=False)
        for _ in range(25):
            d_omega = rng.normal(size=3)
            d_omega = d_omega / np.linalg.norm(d_omega) * np.radians(20) / 2
            perturbed, _ = obj.loss_latent(
                query, omega + d_omega, extr.translation, vp, latent, with_gradient=False
            )
            wins += perturbed > base
            trials += 1
    assert wins / trials >= 0.75


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_depth_only_weights():
    view, latent, omega, t, vp, encoder = smooth_config(7)
    w0 = obj.LossWeights(0.0, 0.0, 0.0)
    lb = obj.total_loss(view, omega, t, vp, latent, w0, encoder=encoder, with_gradient=False)
    assert lb.total == lb.depth
    assert lb.latent == 0.0


def test_total_loss_recomposition_identity():
    view, latent, omega, t, vp, encoder = smooth_config(8)
    w = obj.LossWeights(0.3, 1.2, 0.7)
    lb = obj.total_loss(view, omega, t, vp, latent, w, encoder=encoder, with_gradient=False)
    recomposed = lb.depth + 0.3 * lb.latent + 1.2 * lb.mask + 0.7 * lb.iou
    assert abs(lb.total - recomposed) < 1e-12
    assert lb.depth >= 0 and lb.mask >= 0 and lb.iou >= 0 and lb.latent >= 0


def test_total_loss_gradient_matches_fd():
    worst = 0.0
    for seed in (21, 22, 23):
        view, latent, omega, t, vp, encoder = smooth_config(seed)
        w = obj.LossWeights(0.1, 1.0, 1.0)
        lb = obj.total_loss(view, omega, t, vp, latent, w, encoder=encoder)
        params = np.concatenate([omega, t, vp.as_array()])
        steps = [1e-5] * 6 + [1e-3] * 4
        fd = np.zeros(10)
        for a in range(10):
            e = np.zeros(10)
            e[a] = steps[a]
            up = obj.total_loss(
                view,
                (params + e)[0:3],
                (params + e)[3:6],
                geo.Viewport.from_array((params + e)[6:10]),
                latent,
                w,
                encoder=encoder,
                with_gradient=False,
            )
            dn = obj.total_loss(
                view,
                (params - e)[0:3],
                (params - e)[3:6],
                geo.Viewport.from_array((params - e)[6:10]),
                latent,
                w,
                encoder=encoder,
                with_gradient=False,
            )
            fd[a] = (up.total - dn.total) / (2 * steps[a])
        worst = max(worst, np.abs(lb.gradient - fd).max() / np.abs(fd).max())
    assert worst < 1e-3


def test_total_loss_batch_matches_single():
    view, latent, omega, t, vp, encoder = smooth_config(9)
    rng = np.random.default_rng(10)
    omegas = omega[None] + rng.normal(scale=0.05, size=(5, 3))
    ts = t[None] + rng.normal(scale=0.01, size=(5, 3))
    vps = np.tile(vp.as_array(), (5, 1)) + rng.uniform(-1, 1, (5, 4))
    w = obj.LossWeights(0.1, 1.0, 1.0)
    batch = obj.total_loss_batch(view, omegas, ts, vps, latent, w)
    for i in range(5):
        single = obj.total_loss(
            view, omegas[i], ts[i], geo.Viewport.from_array(vps[i]), latent, w, with_gradient=False
        )
        assert abs(batch["total"][i] - single.total) < 1e-9
        assert abs(batch["latent"][i] - single.latent) < 1e-9


def test_total_loss_batch_flags_behind_camera():
    view, latent, omega, t, vp, encoder = smooth_config(12)
    omegas = np.stack([omega, omega])
    ts = np.stack([t, np.array([0.0, 0.0, 0.05])])  # second is behind
    vps = np.tile(vp.as_array(), (2, 1))
    batch = obj.total_loss_batch(view, omegas, ts, vps, latent)
    assert np.isfinite(batch["total"][0])
    assert np.isinf(batch["total"][1])
