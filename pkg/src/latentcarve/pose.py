"""Two-stage 6D pose estimation on a latent object.

Coarse stage: translation from the mask/depth bounding cube, orientations
from a Fibonacci lattice, then the cross-entropy method with a diagonal
Gaussian mixture fit to the elite candidates in (omega, t) space --
forward-only loss evaluations, batched. Refinement stage: Adam on the ten
parameters (omega, t, viewport) driven by the analytic gradients of the
total objective. Both stages are deterministic given their seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import objective as obj
from .errors import DegenerateElites, EmptyMask, NoValidDepth, NoValidPixels, ObjectBehindCamera

PARAM_NAMES = ["omega_x", "omega_y", "omega_z", "t_x", "t_y", "t_z", "u_minus", "v_minus", "u_plus", "v_plus"]


@dataclass(frozen=True)
class CoarseConfig:
    """Coarse-search budget and the CEM exploration schedule.

    exploration_rotation (radians of log-quaternion), exploration_translation
    (fractions of the object diameter) and exploration_decay set a decaying
    variance floor for the GMM sampler: with the default 8 elites and 8
    components, the per-component EM variances collapse to singletons, and
    without the floor the method would re-evaluate frozen points instead of
    searching.
    """

    num_orientations: int = 64
    num_rolls: int = 4
    cem_population: int = 64
    cem_elite_frac: float = 0.125
    cem_iterations: int = 30
    gmm_components: int = 8
    exploration_rotation: float = 0.25
    exploration_translation: float = 0.10
    exploration_decay: float = 0.8
    rerank_top: int = 16
    rerank_resolution: int | None = 32
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.cem_elite_frac < 1:
            raise ValueError("elite fraction must be in (0, 1)")
        if self.cem_population < self.gmm_components:
            raise ValueError("population must be >= number of GMM components")


@dataclass(frozen=True)
class RefineConfig:
    max_iterations: int = 200
    lr_rotation: float = 3e-3
    lr_translation: float = 1e-3
    lr_viewport: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    plateau_patience: int = 20
    plateau_tol: float = 1e-4

    def __post_init__(self):
        if min(self.lr_rotation, self.lr_translation, self.lr_viewport) < 0:
            raise ValueError("learning rates must be >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("betas must be in (0, 1)")


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    omega: np.ndarray
    translation: np.ndarray
    viewport: geo.Viewport
    loss: obj.LossBreakdown
    trace: list = field(default_factory=list)

    @property
    def rotation(self) -> np.ndarray:
        return geo.quat_exp(self.omega)

    def extrinsics(self) -> geo.RigidTransform:
        return geo.RigidTransform(self.rotation, self.translation)


# ---------------------------------------------------------------------------
# translation initialization


def init_translation(query) -> np.ndarray:
    """Centroid of the bounding cube spanned by the mask bbox and its depths.

    The cube's lateral extent comes from the mask bounding box; its depth
    extent is the larger of that metric extent and the observed depth span,
    anchored at the nearest valid masked depth. Only the front surface is
    observable, so averaging the raw depth extremes would bias the center
    toward the camera.
    """
    mask = query.mask > 0.5
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyMask("query mask is empty")
    depths = query.depth[mask & (query.depth > 0)]
    if depths.size == 0:
        raise NoValidDepth("no valid depth inside the query mask")
    intr = query.camera.intrinsics
    u = (xs.min() + xs.max() + 1) / 2.0
    v = (ys.min() + ys.max() + 1) / 2.0
    z_front = float(depths.min())
    width_m = (xs.max() + 1 - xs.min()) * z_front / intr.fu
    height_m = (ys.max() + 1 - ys.min()) * z_front / intr.fv
    extent = 0.5 * (width_m + height_m)
    z_back = max(float(depths.max()), z_front + extent)
    z = 0.5 * (z_front + z_back)
    return geo.unproject(intr, np.array([u, v]), np.array(z))


# ---------------------------------------------------------------------------
# diagonal Gaussian mixture for CEM


class _DiagGMM:
    def __init__(self, weights, means, variances):
        self.weights = weights
        self.means = means
        self.variances = variances

    @classmethod
    def fit(
        cls,
        x: np.ndarray,
        k: int,
        rng: np.random.Generator,
        n_iter: int = 10,
        var_floor: float = 1e-6,
        extra_floor: np.ndarray | None = None,
    ):
        """k-means++ seeding followed by n_iter EM steps, diagonal covariance.

        extra_floor (D,) is an elementwise variance floor applied on top of
        the scalar one; the CEM driver uses it as its exploration schedule.
        """
        n, d = x.shape
        k = min(k, n)
        centers = [x[rng.integers(n)]]
        for _ in range(1, k):
            d2 = np.min([((x - c) ** 2).sum(axis=1) for c in centers], axis=0)
            total = d2.sum()
            if total <= 0:
                centers.append(x[rng.integers(n)])
                continue
            centers.append(x[rng.choice(n, p=d2 / total)])
        means = np.array(centers)
        floor = np.full(d, var_floor)
        if extra_floor is not None:
            floor = np.maximum(floor, extra_floor)
        variances = np.maximum(np.full((k, d), max(float(x.var(axis=0).mean()), var_floor)), floor)
        weights = np.full(k, 1.0 / k)
        for _ in range(n_iter):
            # E step in log space
            log_prob = -0.5 * (
                ((x[:, None, :] - means[None]) ** 2 / variances[None]).sum(axis=2)
                + np.log(2 * np.pi * variances).sum(axis=1)[None]
            ) + np.log(weights)[None]
            log_norm = np.logaddexp.reduce(log_prob, axis=1, keepdims=True)
            resp = np.exp(log_prob - log_norm)
            nk = resp.sum(axis=0) + 1e-12
            weights = nk / n
            means = (resp.T @ x) / nk[:, None]
            variances = np.maximum(
                np.einsum("nk,nkd->kd", resp, (x[:, None, :] - means[None]) ** 2) / nk[:, None],
                floor,
            )
        return cls(weights, means, variances)

    def reseed_degenerate(self, anchor: np.ndarray, min_weight: float, fallback_var: np.ndarray):
        """Re-seed components whose weight collapsed below min_weight."""
        bad = self.weights < min_weight
        if bad.any():
            self.means[bad] = anchor
            self.variances[bad] = np.maximum(fallback_var, 1e-6)
            self.weights[bad] = min_weight
            self.weights = self.weights / self.weights.sum()

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.normal(size=(n, self.means.shape[1]))
        return self.means[comp] + noise * np.sqrt(self.variances[comp])


# ---------------------------------------------------------------------------
# coarse stage


def _viewports_for(translations: np.ndarray, intr: geo.CameraIntrinsics, diameter: float, zoom: float) -> np.ndarray:
    z = translations[:, 2]
    cu = intr.fu * translations[:, 0] / z + intr.u0
    cv = intr.fv * translations[:, 1] / z + intr.v0
    wb = intr.fu * zoom * diameter / z
    hb = intr.fv * zoom * diameter / z
    return np.stack([cu - wb / 2, cv - hb / 2, cu + wb / 2, cv + hb / 2], axis=-1)


def coarse_estimate(
    query,
    latent,
    weights: obj.LossWeights | None = None,
    cfg: CoarseConfig | None = None,
    encoder=None,
    resolution: int | None = None,
    viewport_zoom: float = 1.2,
) -> PoseEstimate:
    """Lattice initialization + cross-entropy method over (omega, t).

    The viewport is not a CEM variable: it is recomputed from each
    candidate's translation (it is determined by t up to crop jitter; the
    refinement stage frees it). The best-so-far candidate is kept across
    iterations, so the returned loss is non-increasing in the iteration
    index.
    """
    weights = weights or obj.LossWeights()
    cfg = cfg or CoarseConfig()
    rng = np.random.default_rng([cfg.seed, 1])
    intr = query.camera.intrinsics
    diameter = 2.0 * latent.radius

    t0 = init_translation(query)
    quats = geo.fibonacci_orientations(cfg.num_orientations, cfg.seed)
    # a single roll sample per direction leaves the roll circle essentially
    # unsampled; augment each lattice direction with evenly offset rolls
    if cfg.num_rolls > 1:
        rolled = []
        for j in range(cfg.num_rolls):
            half = np.pi * j / cfg.num_rolls
            rz = np.array([np.cos(half), 0.0, 0.0, np.sin(half)])
            rolled.append(geo.quat_mul(rz, quats))
        quats = np.concatenate(rolled)
    lattice_omegas = np.array([geo.quat_log(q) for q in quats])
    # the bounding-cube depth estimate carries a shape-dependent bias, so the
    # lattice is seeded at three depth offsets around it
    z_offsets = np.array([0.0, -0.15, 0.15]) * diameter
    n_lattice = len(lattice_omegas)
    omegas = np.tile(lattice_omegas, (len(z_offsets), 1))
    ts = np.concatenate([np.tile(t0 + np.array([0, 0, dz]), (n_lattice, 1)) for dz in z_offsets])

    def evaluate(omegas_, ts_):
        vps = _viewports_for(ts_, intr, diameter, viewport_zoom)
        batch = obj.total_loss_batch(
            query, omegas_, ts_, vps, latent, weights, encoder=encoder, resolution=resolution
        )
        return batch, vps

    batch, vps = evaluate(omegas, ts)
    order = np.lexsort((np.arange(len(omegas)), batch["total"]))
    best_idx = order[0]
    best = {
        "omega": omegas[best_idx].copy(),
        "t": ts[best_idx].copy(),
        "viewport": vps[best_idx].copy(),
        "total": float(batch["total"][best_idx]),
        "parts": {k: float(batch[k][best_idx]) for k in ("depth", "mask", "iou", "latent")},
    }
    if not np.isfinite(best["total"]):
        raise DegenerateElites("no renderable candidate in the initial lattice")

    n_elite = max(1, int(round(cfg.cem_elite_frac * cfg.cem_population)))
    trace = [_trace_row("coarse", 0, best)]

    elite_omegas = omegas[order[:n_elite]]
    elite_ts = ts[order[:n_elite]]
    elite_losses = batch["total"][order[:n_elite]]
    archive_omegas = [elite_omegas.copy()]
    archive_ts = [elite_ts.copy()]

    explore0 = np.array(
        [cfg.exploration_rotation**2] * 3 + [(cfg.exploration_translation * diameter) ** 2] * 3
    )

    for it in range(cfg.cem_iterations):
        if not np.isfinite(elite_losses).any():
            raise DegenerateElites("all elite losses non-finite at iteration %d" % it)
        keep = np.isfinite(elite_losses)
        base_q = geo.quat_exp(best["omega"])
        # chart recentering: express elite rotations about the incumbent best
        rel = np.array(
            [geo.quat_log(geo.quat_mul(geo.quat_conj(base_q), geo.quat_exp(w))) for w in elite_omegas[keep]]
        )
        x = np.concatenate([rel, elite_ts[keep]], axis=1)
        floor = np.maximum(0.25 * x.var(axis=0), explore0 * cfg.exploration_decay ** (2 * it))
        gmm = _DiagGMM.fit(x, cfg.gmm_components, rng, extra_floor=floor)
        anchor = np.concatenate([np.zeros(3), best["t"]])
        gmm.reseed_degenerate(anchor, 1.0 / cfg.cem_population**2, np.maximum(x.var(axis=0), floor))
        samples = gmm.sample(cfg.cem_population, rng)
        cand_q = np.array([geo.quat_mul(base_q, geo.quat_exp(s[:3])) for s in samples])
        cand_omegas = np.array([geo.quat_log(q) for q in cand_q])
        cand_ts = samples[:, 3:]

        batch, vps = evaluate(cand_omegas, cand_ts)
        order = np.lexsort((np.arange(len(cand_omegas)), batch["total"]))
        if batch["total"][order[0]] < best["total"]:
            i = order[0]
            best = {
                "omega": cand_omegas[i].copy(),
                "t": cand_ts[i].copy(),
                "viewport": vps[i].copy(),
                "total": float(batch["total"][i]),
                "parts": {k: float(batch[k][i]) for k in ("depth", "mask", "iou", "latent")},
            }
        # select elites from the new population plus the previous elites, so
        # an unlucky batch cannot drop a good basin from the search
        pool_omegas = np.concatenate([cand_omegas, elite_omegas])
        pool_ts = np.concatenate([cand_ts, elite_ts])
        pool_losses = np.concatenate([batch["total"], elite_losses])
        order = np.lexsort((np.arange(len(pool_losses)), pool_losses))
        elite_omegas = pool_omegas[order[:n_elite]]
        elite_ts = pool_ts[order[:n_elite]]
        elite_losses = pool_losses[order[:n_elite]]
        archive_omegas.append(elite_omegas.copy())
        archive_ts.append(elite_ts.copy())
        trace.append(_trace_row("coarse", it + 1, best))

    if cfg.rerank_resolution and cfg.rerank_top > 0:
        # forward-only re-ranking of the elite archive at a finer grid: the
        # coarse grid can mis-rank near-symmetric basins whose losses differ
        # by less than its discretization error, and the archive keeps every
        # basin that was ever competitive
        cand_omegas = np.concatenate(archive_omegas + [best["omega"][None]])
        cand_ts = np.concatenate(archive_ts + [best["t"][None]])
        cand = np.concatenate([cand_omegas, cand_ts], axis=1)
        _, unique_idx = np.unique(np.round(cand, 3), axis=0, return_index=True)
        sel = np.sort(unique_idx)
        cand_omegas = cand_omegas[sel]
        cand_ts = cand_ts[sel]
        vps = _viewports_for(cand_ts, intr, diameter, viewport_zoom)
        fine = obj.total_loss_batch(
            query,
            cand_omegas,
            cand_ts,
            vps,
            latent,
            weights,
            encoder=encoder,
            resolution=cfg.rerank_resolution,
        )
        forder = np.lexsort((np.arange(len(cand_omegas)), fine["total"]))
        i = forder[0]
        if np.isfinite(fine["total"][i]):
            best = {
                "omega": cand_omegas[i].copy(),
                "t": cand_ts[i].copy(),
                "viewport": vps[i].copy(),
                "total": float(fine["total"][i]),
                "parts": {k: float(fine[k][i]) for k in ("depth", "mask", "iou", "latent")},
            }
            trace.append(_trace_row("coarse", cfg.cem_iterations + 1, best))

    loss = obj.LossBreakdown(
        best["parts"]["depth"],
        best["parts"]["mask"],
        best["parts"]["iou"],
        best["parts"]["latent"],
        best["total"],
    )
    return PoseEstimate(best["omega"], best["t"], geo.Viewport.from_array(best["viewport"]), loss, trace)


def _trace_row(phase: str, iteration: int, best: dict) -> dict:
    row = {"phase": phase, "iteration": iteration, "total": best["total"]}
    row.update(best["parts"])
    for name, value in zip(PARAM_NAMES, np.concatenate([best["omega"], best["t"], best["viewport"]])):
        row[name] = float(value)
    return row


# ---------------------------------------------------------------------------
# refinement


def refine(
    query,
    latent,
    start: PoseEstimate,
    weights: obj.LossWeights | None = None,
    cfg: RefineConfig | None = None,
    encoder=None,
    resolution: int | None = None,
) -> PoseEstimate:
    """Adam on (omega, t, viewport) with per-group learning rates.

    Stops at max_iterations or when the relative total-loss improvement
    stays below plateau_tol for plateau_patience consecutive iterations;
    returns the lowest-loss iterate seen. Non-finite loss or gradient aborts
    with the best iterate so far. Image-based color rendering is never
    touched here.
    """
    weights = weights or obj.LossWeights()
    cfg = cfg or RefineConfig()
    x = np.concatenate([start.omega, start.translation, start.viewport.as_array()])
    lr = np.array([cfg.lr_rotation] * 3 + [cfg.lr_translation] * 3 + [cfg.lr_viewport] * 4)
    m = np.zeros(10)
    v = np.zeros(10)
    best_x = x.copy()
    best_loss = None
    prev_total = None
    stall = 0
    trace = list(start.trace)

    for it in range(cfg.max_iterations):
        try:
            lb = obj.total_loss(
                query,
                x[0:3],
                x[3:6],
                geo.Viewport.from_array(x[6:10]),
                latent,
                weights,
                encoder=encoder,
                resolution=resolution,
            )
        except (ObjectBehindCamera, NoValidPixels):
            break  # NonFiniteGradient semantics: abort with the best iterate
        if not (np.isfinite(lb.total) and np.all(np.isfinite(lb.gradient))):
            break
        if best_loss is None or lb.total < best_loss.total:
            best_loss = lb
            best_x = x.copy()
        trace.append(
            _trace_row(
                "refine",
                it,
                {
                    "omega": x[0:3],
                    "t": x[3:6],
                    "viewport": x[6:10],
                    "total": lb.total,
                    "parts": {"depth": lb.depth, "mask": lb.mask, "iou": lb.iou, "latent": lb.latent},
                },
            )
        )
        if prev_total is not None:
            rel = abs(prev_total - lb.total) / max(abs(prev_total), 1e-12)
            stall = stall + 1 if rel < cfg.plateau_tol else 0
            if stall >= cfg.plateau_patience:
                break
        prev_total = lb.total

        g = lb.gradient
        m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g
        m_hat = m / (1 - cfg.adam_beta1 ** (it + 1))
        v_hat = v / (1 - cfg.adam_beta2 ** (it + 1))
        x = x - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
        if (it + 1) % 50 == 0:
            # fold omega back to the principal branch: exp is unchanged, the
            # chart stays clear of the |omega| -> pi singularity
            x[0:3] = geo.quat_log(geo.quat_exp(x[0:3]))

    if best_loss is None:
        best_loss = start.loss
        best_x = np.concatenate([start.omega, start.translation, start.viewport.as_array()])
    return PoseEstimate(best_x[0:3], best_x[3:6], geo.Viewport.from_array(best_x[6:10]), best_loss, trace)


def estimate(
    query,
    latent,
    weights: obj.LossWeights | None = None,
    coarse_cfg: CoarseConfig | None = None,
    refine_cfg: RefineConfig | None = None,
    encoder=None,
    resolution: int | None = None,
    viewport_zoom: float = 1.2,
) -> PoseEstimate:
    """Coarse search then gradient refinement; deterministic given seeds."""
    coarse = coarse_estimate(
        query,
        latent,
        weights,
        coarse_cfg,
        encoder=encoder,
        resolution=resolution,
        viewport_zoom=viewport_zoom,
    )
    return refine(query, latent, coarse, weights, refine_cfg, encoder=encoder, resolution=resolution)


def trace_to_csv(trace: list, path: str | Path) -> None:
    """Write a per-iteration optimization trace as CSV."""
    path = Path(path)
    fields = ["phase", "iteration", "depth", "mask", "iou", "latent", "total", *PARAM_NAMES]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row.get(k, "") for k in fields})
