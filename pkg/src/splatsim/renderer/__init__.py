"""Forward splat rasterization and its analytic backward pass.

Per pixel p the color is C(p) = sum_i c_i a_i prod_{j<i} (1 - a_j) with
a_i = opacity_i * exp(-0.5 d^T cov2d^-1 d), Gaussians visited in ascending
camera depth (ties broken by source index). Rendered depth uses the same
weights with the Gaussian center depth in place of the color.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import RenderConfig
from ..scene import Camera, Scene, covariance as gaussian_covariance, Gaussian
from . import _kernels

_DEFAULT = RenderConfig()


@dataclass(frozen=True)
class ProjectedGaussian:
    pixel_center: np.ndarray   # (2,) pixels
    cov2d: np.ndarray          # (2, 2) pixels^2, before the low-pass floor
    depth: float               # camera-z of the center
    color: np.ndarray
    opacity: float
    source_index: int


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray          # (H, W, 3)
    depth: np.ndarray          # (H, W)
    alpha: np.ndarray          # (H, W)


@dataclass(frozen=True)
class GaussianGradients:
    position: np.ndarray       # (N, 3)
    rotation: np.ndarray       # (N, 4), tangent to the unit-quaternion sphere
    scale: np.ndarray          # (N, 3), w.r.t. linear scale
    color: np.ndarray          # (N, 3)
    opacity: np.ndarray        # (N,), w.r.t. linear opacity
    screen: np.ndarray         # (N, 2), w.r.t. the projected pixel center
                               # (densification pressure statistic)

    @classmethod
    def zeros(cls, n: int) -> "GaussianGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros((n, 3)), np.zeros(n), np.zeros((n, 2)))


class _Projection:
    """Batch projection of every non-culled Gaussian plus its tile lists."""

    __slots__ = ("source", "means2d", "cov2d", "conics", "depths", "colors",
                 "opacities", "power_floor", "t_cam", "radius", "tile_offsets",
                 "tile_items", "tiles_x", "tiles_y", "n")

    def __init__(self, positions, cov3d, colors, opacities, cam: Camera, cfg: RenderConfig):
        w_mat = cam.rotation
        t_cam = positions @ w_mat.T + cam.translation
        keep = t_cam[:, 2] > cfg.near_plane
        idx = np.flatnonzero(keep)
        t = t_cam[idx]
        v = np.einsum("ij,njk,lk->nil", w_mat, cov3d[idx], w_mat)

        tz = t[:, 2]
        j00 = cam.fx / tz
        j02 = -cam.fx * t[:, 0] / tz ** 2
        j11 = cam.fy / tz
        j12 = -cam.fy * t[:, 1] / tz ** 2
        a = j00 ** 2 * v[:, 0, 0] + 2 * j00 * j02 * v[:, 0, 2] + j02 ** 2 * v[:, 2, 2]
        b = (j00 * v[:, 0, 1] + j02 * v[:, 1, 2]) * j11 + (j00 * v[:, 0, 2] + j02 * v[:, 2, 2]) * j12
        c = j11 ** 2 * v[:, 1, 1] + 2 * j11 * j12 * v[:, 1, 2] + j12 ** 2 * v[:, 2, 2]
        means2d = np.stack([cam.fx * t[:, 0] / tz + cam.cx,
                            cam.fy * t[:, 1] / tz + cam.cy], axis=1)

        a_lp = a + cfg.low_pass
        c_lp = c + cfg.low_pass
        det = a_lp * c_lp - b ** 2
        mid = 0.5 * (a_lp + c_lp)
        lam_max = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.0))
        radius = cfg.footprint_sigmas * np.sqrt(np.maximum(lam_max, 0.0))

        visible = ((det > 0)
                   & (means2d[:, 0] + radius >= 0) & (means2d[:, 0] - radius <= cam.width - 1)
                   & (means2d[:, 1] + radius >= 0) & (means2d[:, 1] - radius <= cam.height - 1))
        sel = np.flatnonzero(visible)

        self.source = idx[sel].astype(np.int64)
        self.means2d = np.ascontiguousarray(means2d[sel])
        self.cov2d = np.ascontiguousarray(np.stack([a[sel], b[sel], c[sel]], axis=1))
        inv_det = 1.0 / det[sel]
        self.conics = np.ascontiguousarray(
            np.stack([c_lp[sel] * inv_det, -b[sel] * inv_det, a_lp[sel] * inv_det], axis=1))
        self.depths = np.ascontiguousarray(tz[sel])
        self.colors = np.ascontiguousarray(colors[idx[sel]])
        self.opacities = np.ascontiguousarray(opacities[idx[sel]])
        with np.errstate(divide="ignore"):
            self.power_floor = np.log(np.maximum(cfg.alpha_min, 1e-300)) \
                - np.log(self.opacities)
        self.t_cam = np.ascontiguousarray(t[sel])
        self.radius = radius[sel]
        self.n = len(sel)

        self.tiles_x = (cam.width + cfg.tile_size - 1) // cfg.tile_size
        self.tiles_y = (cam.height + cfg.tile_size - 1) // cfg.tile_size
        self._build_tiles(cam, cfg)

    def _build_tiles(self, cam: Camera, cfg: RenderConfig) -> None:
        ts = cfg.tile_size
        n_tiles = self.tiles_x * self.tiles_y
        if self.n == 0:
            self.tile_offsets = np.zeros(n_tiles + 1, dtype=np.int64)
            self.tile_items = np.zeros(0, dtype=np.int32)
            return
        x0 = np.clip(np.floor((self.means2d[:, 0] - self.radius) / ts), 0, self.tiles_x - 1).astype(np.int64)
        x1 = np.clip(np.floor((self.means2d[:, 0] + self.radius) / ts), 0, self.tiles_x - 1).astype(np.int64)
        y0 = np.clip(np.floor((self.means2d[:, 1] - self.radius) / ts), 0, self.tiles_y - 1).astype(np.int64)
        y1 = np.clip(np.floor((self.means2d[:, 1] + self.radius) / ts), 0, self.tiles_y - 1).astype(np.int64)
        widths = x1 - x0 + 1
        counts = widths * (y1 - y0 + 1)
        total = int(counts.sum())
        gauss_of = np.repeat(np.arange(self.n, dtype=np.int64), counts)
        # local footprint index -> (tile column, tile row), fully vectorized
        local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
        w_of = widths[gauss_of]
        tile_of = (y0[gauss_of] + local // w_of) * self.tiles_x + x0[gauss_of] + local % w_of
        order = np.lexsort((self.source[gauss_of], self.depths[gauss_of], tile_of))
        tile_sorted = tile_of[order]
        self.tile_items = gauss_of[order].astype(np.int32)
        self.tile_offsets = np.zeros(n_tiles + 1, dtype=np.int64)
        np.cumsum(np.bincount(tile_sorted, minlength=n_tiles), out=self.tile_offsets[1:])


def _scene_arrays(scene: Scene):
    return (scene.positions.astype(np.float64), scene.covariances(),
            scene.colors.astype(np.float64), scene.opacities)


def _factored_cov(quats: np.ndarray, scales: np.ndarray) -> np.ndarray:
    from ..scene import quats_to_rotations
    r = quats_to_rotations(quats)
    return np.einsum("nij,nj,nkj->nik", r, np.asarray(scales, dtype=np.float64) ** 2, r)


def project(g: Gaussian, cam: Camera, cfg: RenderConfig | None = None) -> ProjectedGaussian | None:
    """Project one Gaussian; returns None when culled (behind the near plane
    or with its 3-sigma footprint outside the viewport)."""
    cfg = cfg or _DEFAULT
    proj = _Projection(g.position[None, :], gaussian_covariance(g)[None, :, :],
                       g.color[None, :], np.array([g.opacity]), cam, cfg)
    if proj.n == 0:
        return None
    a, b, c = proj.cov2d[0]
    return ProjectedGaussian(
        pixel_center=proj.means2d[0],
        cov2d=np.array([[a, b], [b, c]]),
        depth=float(proj.depths[0]),
        color=proj.colors[0],
        opacity=float(proj.opacities[0]),
        source_index=0,
    )


def rasterize_arrays(positions, cov3d, colors, opacities, cam: Camera,
                     cfg: RenderConfig | None = None,
                     projection: "_Projection | None" = None) -> RenderOutput:
    """Rasterize raw Gaussian arrays (used by the simulator, which carries
    deformed full covariances rather than factored scales)."""
    cfg = cfg or _DEFAULT
    h, w = cam.height, cam.width
    out_color = np.zeros((h, w, 3))
    out_depth = np.zeros((h, w))
    out_alpha = np.zeros((h, w))
    if len(positions):
        proj = projection if projection is not None else _Projection(
            np.asarray(positions, dtype=np.float64),
            np.asarray(cov3d, dtype=np.float64),
            np.asarray(colors, dtype=np.float64), np.asarray(opacities, dtype=np.float64),
            cam, cfg)
        if proj.n:
            _kernels.forward_kernel(h, w, cfg.tile_size, proj.tiles_x,
                                    proj.tiles_x * proj.tiles_y,
                                    proj.tile_offsets, proj.tile_items,
                                    proj.means2d, proj.conics, proj.colors,
                                    proj.opacities, proj.depths, proj.power_floor,
                                    cfg.alpha_min, cfg.alpha_max, cfg.transmittance_min,
                                    out_color, out_depth, out_alpha)
    if cfg.normalize_depth:
        out_depth = np.where(out_alpha > 1e-8, out_depth / np.maximum(out_alpha, 1e-8), 0.0)
    return RenderOutput(color=out_color, depth=out_depth, alpha=out_alpha)


def project_factored(positions, quats, scales, colors, opacities, cam: Camera,
                     cfg: RenderConfig | None = None) -> "_Projection":
    """Precompute the projection/tiling shared by a forward+backward pair."""
    return _Projection(np.asarray(positions, dtype=np.float64),
                       _factored_cov(quats, scales),
                       np.asarray(colors, dtype=np.float64),
                       np.asarray(opacities, dtype=np.float64), cam, cfg or _DEFAULT)


def rasterize_factored(positions, quats, scales, colors, opacities, cam: Camera,
                       cfg: RenderConfig | None = None,
                       projection: "_Projection | None" = None) -> RenderOutput:
    """Rasterize factored float64 parameter arrays (the optimizer's hot path)."""
    return rasterize_arrays(np.asarray(positions, dtype=np.float64),
                            None if projection is not None else _factored_cov(quats, scales),
                            np.asarray(colors, dtype=np.float64),
                            np.asarray(opacities, dtype=np.float64), cam, cfg,
                            projection=projection)


def rasterize(scene: Scene, cam: Camera, cfg: RenderConfig | None = None) -> RenderOutput:
    return rasterize_arrays(*_scene_arrays(scene), cam, cfg)


def rasterize_backward_factored(positions, quats, scales, colors, opacities,
                                cam: Camera, grad_color: np.ndarray, grad_depth: np.ndarray,
                                cfg: RenderConfig | None = None,
                                projection: "_Projection | None" = None) -> GaussianGradients:
    cfg = cfg or _DEFAULT
    if cfg.normalize_depth:
        raise NotImplementedError("backward pass expects unnormalized depth compositing")
    h, w = cam.height, cam.width
    if grad_color.shape != (h, w, 3) or grad_depth.shape != (h, w):
        raise ValueError("gradient resolution must match the camera")
    positions = np.asarray(positions, dtype=np.float64)
    quats = np.asarray(quats, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    opacities = np.asarray(opacities, dtype=np.float64)
    n = len(positions)
    grads = GaussianGradients.zeros(n)
    if n == 0:
        return grads

    proj = projection if projection is not None else _Projection(
        positions, _factored_cov(quats, scales), colors, opacities, cam, cfg)
    if proj.n == 0:
        return grads

    n_chunks = min(cfg.backward_chunks, proj.tiles_x * proj.tiles_y)
    longest = int(np.max(proj.tile_offsets[1:] - proj.tile_offsets[:-1]))
    rec_idx = np.zeros((n_chunks, max(longest, 1)), dtype=np.int64)
    rec_alpha = np.zeros((n_chunks, max(longest, 1)))
    rec_trans = np.zeros((n_chunks, max(longest, 1)))
    rec_g = np.zeros((n_chunks, max(longest, 1)))
    buf = np.zeros((n_chunks, proj.n, 10))

    _kernels.backward_pixel_kernel(h, w, cfg.tile_size, proj.tiles_x,
                                   proj.tiles_x * proj.tiles_y, n_chunks,
                                   proj.tile_offsets, proj.tile_items,
                                   proj.means2d, proj.conics, proj.colors,
                                   proj.opacities, proj.depths, proj.power_floor,
                                   cfg.alpha_min, cfg.alpha_max, cfg.transmittance_min,
                                   np.ascontiguousarray(grad_color, dtype=np.float64),
                                   np.ascontiguousarray(grad_depth, dtype=np.float64),
                                   rec_idx, rec_alpha, rec_trans, rec_g, buf)
    grads2d = buf.sum(axis=0)

    quat_norms = np.linalg.norm(quats, axis=1)
    quats_unit = quats / quat_norms[:, None]
    _kernels.chain_kernel(proj.source, proj.t_cam, proj.cov2d, grads2d,
                          quats_unit, scales, quat_norms,
                          cam.rotation, cam.fx, cam.fy, cfg.low_pass,
                          grads.position, grads.rotation, grads.scale,
                          grads.color, grads.opacity, grads.screen)
    return grads


def rasterize_backward(scene: Scene, cam: Camera, output: RenderOutput,
                       grad_color: np.ndarray, grad_depth: np.ndarray,
                       cfg: RenderConfig | None = None) -> GaussianGradients:
    """Gradients of L = sum_p grad_color(p) . C(p) + grad_depth(p) D(p) with
    respect to every Gaussian parameter."""
    h, w = cam.height, cam.width
    if output.color.shape != (h, w, 3):
        raise ValueError("output resolution must match the camera")
    return rasterize_backward_factored(
        scene.positions.astype(np.float64), scene.rotations.astype(np.float64),
        scene.scales, scene.colors.astype(np.float64), scene.opacities,
        cam, grad_color, grad_depth, cfg)
