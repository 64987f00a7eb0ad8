"""Scene fitting: depth-seeded initialization, masked color + Huber depth
objective, Adam-style optimization with densification and anisotropy pruning.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .config import OptimConfig, RenderConfig
from .renderer import (RenderOutput, project_factored, rasterize_backward_factored,
                       rasterize_factored)
from .scene import Frame, MaterialParams, Scene, logit, sigmoid


class ReconstructionError(RuntimeError):
    pass


class FitDivergence(ReconstructionError):
    """Loss became non-finite; carries the offending iteration."""

    def __init__(self, iteration: int):
        super().__init__(f"loss diverged (non-finite) at iteration {iteration}")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# loss

@dataclass(frozen=True)
class LossResult:
    total: float
    color: float
    depth: float
    grad_color: np.ndarray   # dL/dC(p), (H, W, 3)
    grad_depth: np.ndarray   # dL/dD_rendered(p), (H, W)


def masked_loss(render: RenderOutput, frame: Frame, cfg: OptimConfig) -> LossResult:
    """Mean over unmasked pixels of per-channel L1 color error plus
    eta-weighted Huber depth error; the tool mask gates both terms (the depth
    gate can be lifted with cfg.mask_depth=False)."""
    if render.color.shape[:2] != frame.image.shape[:2]:
        raise ValueError("render resolution must equal frame resolution")
    vis = frame.visible
    n = int(vis.sum())
    h, w = vis.shape
    if n == 0:
        return LossResult(0.0, 0.0, 0.0, np.zeros((h, w, 3)), np.zeros((h, w)))

    cdiff = render.color - frame.image.astype(np.float64)
    color_map = np.abs(cdiff).sum(axis=2) * vis
    grad_color = np.sign(cdiff) * vis[:, :, None] / n

    delta = cfg.huber_delta
    r = frame.depth.astype(np.float64) - render.depth
    small = np.abs(r) <= delta
    huber = np.where(small, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    dhuber = np.where(small, r, delta * np.sign(r))
    gate = vis if cfg.mask_depth else np.ones_like(vis)
    depth_map = cfg.eta * gate * huber
    grad_depth = -cfg.eta * gate * dhuber / n

    color_loss = float(color_map.sum()) / n
    depth_loss = float(depth_map.sum()) / n
    return LossResult(color_loss + depth_loss, color_loss, depth_loss, grad_color, grad_depth)


def psnr(render_color: np.ndarray, image: np.ndarray, vis: np.ndarray | None = None) -> float:
    a = np.asarray(render_color, dtype=np.float64)
    b = np.asarray(image, dtype=np.float64)
    if vis is not None:
        a, b = a[vis], b[vis]
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return float("inf")
    return -10.0 * float(np.log10(mse))


# ---------------------------------------------------------------------------
# initialization

def select_seed_frames(frames: Sequence[Frame], coverage_gain: float) -> list[int]:
    """First frame plus any frame whose unmasked pixels add at least
    coverage_gain of the raster as new coverage."""
    chosen = [0]
    union = frames[0].visible.copy()
    total = union.size
    for k in range(1, len(frames)):
        new = frames[k].visible & ~union
        if int(new.sum()) >= coverage_gain * total:
            chosen.append(k)
            union |= frames[k].visible
    return chosen


def initialize_from_depth(frames: Sequence[Frame],
                          cfg: OptimConfig | None = None,
                          material: MaterialParams | None = None) -> Scene:
    """Back-project unmasked depth pixels of the seed frames into one Gaussian
    each: image color, isotropic scale from local neighbor spacing, identity
    rotation, opacity 0.5 (logit 0)."""
    if not frames:
        raise ReconstructionError("at least one frame is required")
    cfg = cfg or OptimConfig()
    chosen = select_seed_frames(frames, cfg.init_coverage_gain)

    total_visible = sum(int(frames[k].visible.sum()) for k in chosen)
    if total_visible == 0:
        raise ReconstructionError("no visible tissue")
    stride = max(1, int(np.sqrt(total_visible / max(cfg.init_target_points, 1))))

    points, colors = [], []
    for k in chosen:
        fr = frames[k]
        rows = np.arange(0, fr.camera.height, stride)
        cols = np.arange(0, fr.camera.width, stride)
        cc, rr = np.meshgrid(cols, rows)
        keep = fr.visible[rr, cc]
        rr, cc = rr[keep], cc[keep]
        if rr.size == 0:
            continue
        z = fr.depth[rr, cc].astype(np.float64)
        points.append(fr.camera.backproject(cc.astype(np.float64), rr.astype(np.float64), z))
        colors.append(fr.image[rr, cc].astype(np.float64))
    if not points:
        raise ReconstructionError("no visible tissue")
    pts = np.concatenate(points)
    cols = np.concatenate(colors)

    n = len(pts)
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(pts).query(pts, k=k)
        spacing = dist[:, 1:].mean(axis=1)
        spacing = np.maximum(spacing, 1e-6)
    else:
        spacing = np.full(n, 1e-2)

    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return Scene(pts, quats, np.log(spacing)[:, None].repeat(3, axis=1),
                 np.clip(cols, 0.0, 1.0), np.zeros(n), material=material)


# ---------------------------------------------------------------------------
# pruning

def prune_anisotropic(scene: Scene, gamma: float) -> Scene:
    """Drop every Gaussian whose max/min linear-scale ratio strictly exceeds
    gamma; idempotent, order preserving."""
    if gamma <= 1:
        raise ValueError("gamma must be > 1")
    if len(scene) == 0:
        return scene
    s = scene.scales
    ratio = s.max(axis=1) / s.min(axis=1)
    return scene.select(ratio <= gamma)


# ---------------------------------------------------------------------------
# optimizer

class _Adam:
    """Per-group Adam whose state survives row insertion/removal."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= lrs[k] * (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + self.eps)

    def keep(self, mask: np.ndarray) -> None:
        for k in self.m:
            self.m[k] = self.m[k][mask]
            self.v[k] = self.v[k][mask]

    def extend(self, counts: dict[str, tuple]) -> None:
        for k, shape in counts.items():
            self.m[k] = np.concatenate([self.m[k], np.zeros(shape)])
            self.v[k] = np.concatenate([self.v[k], np.zeros(shape)])


@dataclass
class IterationMetrics:
    iteration: int
    loss: float
    color_loss: float
    depth_loss: float
    psnr: float            # NaN when not evaluated this iteration
    gaussian_count: int
    wall_ms: float


# ---------------------------------------------------------------------------
# fit

def _scene_from_params(p, material) -> Scene:
    quats = p["quat"] / np.linalg.norm(p["quat"], axis=1, keepdims=True)
    return Scene(p["pos"], quats, p["log_scale"], np.clip(p["color"], 0.0, 1.0),
                 p["logit_op"], material=material)


def fit(frames: Sequence[Frame],
        cfg: OptimConfig | None = None,
        render_cfg: RenderConfig | None = None,
        material: MaterialParams | None = None,
        seed: int = 0,
        progress: Callable[[IterationMetrics], None] | None = None,
        ) -> tuple[Scene, list[IterationMetrics]]:
    """Optimize a Gaussian scene against the frames; returns the fitted scene
    and a per-iteration metrics trace. Deterministic for a fixed seed."""
    cfg = cfg or OptimConfig()
    render_cfg = render_cfg or RenderConfig()
    init = initialize_from_depth(frames, cfg, material)
    if cfg.iterations == 0:
        return init, []

    rng = np.random.default_rng(seed)
    p = {
        "pos": init.positions.astype(np.float64),
        "quat": init.rotations.astype(np.float64),
        "log_scale": init.log_scales.astype(np.float64),
        "color": init.colors.astype(np.float64),
        "logit_op": init.opacity_logits.astype(np.float64),
    }
    adam = _Adam(p)
    extent = float(np.max(init.bounds.extent))
    accum_grad = np.zeros(len(init))
    accum_cnt = np.zeros(len(init))
    metrics: list[IterationMetrics] = []

    def lr_pos(it):
        if cfg.iterations <= 1:
            return cfg.lr_position
        frac = it / (cfg.iterations - 1)
        return cfg.lr_position * (cfg.lr_position_final / cfg.lr_position) ** frac

    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        frame = frames[int(rng.integers(len(frames)))]
        scales = np.exp(p["log_scale"])
        opac = sigmoid(p["logit_op"])
        proj = project_factored(p["pos"], p["quat"], scales, p["color"], opac,
                                frame.camera, render_cfg)
        render = rasterize_factored(p["pos"], p["quat"], scales, p["color"], opac,
                                    frame.camera, render_cfg, projection=proj)
        loss = masked_loss(render, frame, cfg)
        if not np.isfinite(loss.total):
            raise FitDivergence(it)
        grads = rasterize_backward_factored(p["pos"], p["quat"], scales, p["color"], opac,
                                            frame.camera, loss.grad_color, loss.grad_depth,
                                            render_cfg, projection=proj)
        gdict = {
            "pos": grads.position,
            "quat": grads.rotation,
            "log_scale": grads.scale * scales,
            "color": grads.color,
            "logit_op": grads.opacity * opac * (1.0 - opac),
        }
        adam.step(p, gdict, {
            "pos": lr_pos(it), "quat": cfg.lr_rotation, "log_scale": cfg.lr_log_scale,
            "color": cfg.lr_color, "logit_op": cfg.lr_opacity,
        })
        p["quat"] /= np.linalg.norm(p["quat"], axis=1, keepdims=True)
        np.clip(p["color"], 0.0, 1.0, out=p["color"])
        np.clip(p["log_scale"], -18.0, 6.0, out=p["log_scale"])

        # densification pressure: screen-center gradient in NDC units
        gnorm = np.linalg.norm(grads.screen, axis=1) * (frame.camera.width * 0.5)
        seen = (np.abs(grads.screen).max(axis=1) > 0) | (np.abs(grads.position).max(axis=1) > 0)
        accum_grad[seen] += gnorm[seen]
        accum_cnt[seen] += 1

        in_window = cfg.densify_start <= it < cfg.densify_end
        if in_window and (it + 1) % cfg.densify_interval == 0:
            p, accum_grad, accum_cnt = _densify_and_prune(
                p, adam, accum_grad, accum_cnt, cfg, extent, rng)

        wall = (time.perf_counter() - t0) * 1e3
        snr = float("nan")
        if cfg.psnr_interval and ((it + 1) % cfg.psnr_interval == 0 or it == cfg.iterations - 1):
            snr = evaluate_psnr(p, frames, render_cfg)
        m = IterationMetrics(it, loss.total, loss.color, loss.depth, snr, len(p["pos"]), wall)
        metrics.append(m)
        if progress is not None:
            progress(m)

    scene = prune_anisotropic(_scene_from_params(p, material), cfg.gamma)
    return scene, metrics


def evaluate_psnr(p: dict[str, np.ndarray], frames: Sequence[Frame],
                  render_cfg: RenderConfig) -> float:
    vals = []
    scales = np.exp(p["log_scale"])
    opac = sigmoid(p["logit_op"])
    for fr in frames:
        out = rasterize_factored(p["pos"], p["quat"], scales, p["color"], opac,
                                 fr.camera, render_cfg)
        vals.append(psnr(out.color, fr.image, fr.visible))
    return float(np.mean(vals))


def _densify_and_prune(p, adam: _Adam, accum_grad, accum_cnt, cfg: OptimConfig,
                       extent: float, rng: np.random.Generator):
    """Clone/split high-gradient Gaussians, drop near-transparent and overly
    anisotropic ones; Adam state rows follow."""
    scales = np.exp(p["log_scale"])
    mean_grad = accum_grad / np.maximum(accum_cnt, 1.0)
    dense = mean_grad > cfg.densify_grad_threshold

    big = scales.max(axis=1) > cfg.densify_split_fraction * extent
    split = dense & big
    clone = dense & ~big

    from .scene import quats_to_rotations

    new = {k: [] for k in p}
    if clone.any():
        idx = np.flatnonzero(clone)
        r = quats_to_rotations(p["quat"][idx])
        jitter = np.einsum("nij,nj->ni", r, rng.normal(size=(len(idx), 3)) * 0.3 * scales[idx])
        new["pos"].append(p["pos"][idx] + jitter)
        new["quat"].append(p["quat"][idx])
        new["log_scale"].append(p["log_scale"][idx])
        new["color"].append(p["color"][idx])
        new["logit_op"].append(p["logit_op"][idx])
    if split.any():
        idx = np.flatnonzero(split)
        r = quats_to_rotations(p["quat"][idx])
        offset = np.einsum("nij,nj->ni", r, rng.normal(size=(len(idx), 3)) * 0.6 * scales[idx])
        new["pos"].append(p["pos"][idx] + offset)
        new["quat"].append(p["quat"][idx])
        new["log_scale"].append(p["log_scale"][idx] - np.log(1.6))
        new["color"].append(p["color"][idx])
        new["logit_op"].append(p["logit_op"][idx])
        p["pos"][idx] -= offset
        p["log_scale"][idx] -= np.log(1.6)

    n_new = sum(len(a) for a in new["pos"])
    if n_new:
        for k in p:
            p[k] = np.concatenate([p[k]] + new[k])
        adam.extend({k: (n_new,) + p[k].shape[1:] for k in p})

    scales = np.exp(p["log_scale"])
    opac = sigmoid(p["logit_op"])
    ratio = scales.max(axis=1) / scales.min(axis=1)
    keep = (opac >= cfg.opacity_prune_threshold) & (ratio <= cfg.gamma)
    if not keep.all():
        for k in p:
            p[k] = p[k][keep]
        adam.keep(keep)

    n = len(p["pos"])
    return p, np.zeros(n), np.zeros(n)
