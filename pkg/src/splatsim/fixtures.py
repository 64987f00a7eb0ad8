"""Synthetic ground-truth scenes and rendered RGB-D fixtures.

These generators stand in for surgical datasets: every test and demo that
needs posed frames with depth and masks builds them from a known Gaussian
scene, so the scene itself is the oracle.
"""
from __future__ import annotations

import numpy as np

from .config import RenderConfig
from .renderer import rasterize
from .scene import AABB, Camera, Frame, MaterialParams, Scene, logit


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera 4x4 with +z pointing from position toward target."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    w2c = np.eye(4)
    w2c[:3, :3] = r
    w2c[:3, 3] = -r @ position
    return w2c


def surface_scene(n: int = 500, seed: int = 0,
                  material: MaterialParams | None = None) -> Scene:
    """Bumpy tissue-like surface patch around z = 2, facing the origin."""
    rng = np.random.default_rng(seed)
    nx = int(np.ceil(np.sqrt(n * 1.25)))
    ny = int(np.ceil(n / nx))
    xs = np.linspace(-1.0, 1.0, nx)
    ys = np.linspace(-0.8, 0.8, ny)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n]
    spacing = xs[1] - xs[0] if nx > 1 else 0.1
    pts += rng.uniform(-0.3, 0.3, pts.shape) * spacing

    x, y = pts[:, 0], pts[:, 1]
    z = (2.0 + 0.18 * np.sin(2.4 * x) * np.cos(2.1 * y)
         + 0.08 * np.sin(5.1 * x + 1.0) * np.sin(4.7 * y + 0.5))
    positions = np.stack([x, y, z], axis=1)

    colors = np.stack([
        0.55 + 0.30 * np.sin(2.3 * x + 0.7) * np.cos(1.1 * y),
        0.45 + 0.25 * np.sin(1.7 * y - 0.4) * np.cos(0.9 * x),
        0.50 + 0.28 * np.sin(1.3 * (x + y)),
    ], axis=1) + rng.normal(0.0, 0.02, (n, 3))
    colors = np.clip(colors, 0.05, 0.95)

    base = spacing * 1.2
    scales = base * rng.uniform(0.8, 1.3, (n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opac = rng.uniform(0.75, 0.95, n)
    return Scene(positions, quats, np.log(scales), colors, logit(opac),
                 material=material)


def surface_cameras(width: int = 160, height: int = 128, n_views: int = 3) -> list[Camera]:
    """Small-baseline endoscope-like views of the surface patch."""
    f = 1.25 * width
    target = np.array([0.0, 0.0, 2.0])
    offsets = [np.zeros(3), np.array([0.14, 0.05, -0.04]), np.array([-0.11, -0.07, 0.03])]
    cams = []
    for off in offsets[:n_views]:
        cams.append(Camera(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
                           width=width, height=height,
                           world_to_camera=look_at(off, target)))
    return cams


def render_frames(scene: Scene, cameras, render_cfg: RenderConfig | None = None,
                  coverage_threshold: float = 0.995) -> list[Frame]:
    """Render ground-truth frames; depth is the alpha-normalized rendered
    depth and poorly covered pixels are flagged in the mask (the fixture's
    stand-in for tool occlusion)."""
    render_cfg = render_cfg or RenderConfig()
    frames = []
    for cam in cameras:
        out = rasterize(scene, cam, render_cfg)
        alpha = out.alpha
        mask = alpha < coverage_threshold
        depth = np.where(mask, 1.0, out.depth / np.maximum(alpha, 1e-9))
        frames.append(Frame(image=np.clip(out.color, 0.0, 1.0).astype(np.float32),
                            depth=depth.astype(np.float32),
                            mask=mask, camera=cam))
    return frames


def hemisphere_scene(n: int = 1500, radius: float = 0.5,
                     center=(0.0, 0.0, 0.0), seed: int = 0,
                     shell_scale: float = 0.02, regular: bool = False,
                     material: MaterialParams | None = None) -> Scene:
    """Hollow upper-hemisphere shell (dome) of Gaussians; used to exercise
    interior padding and the surface-crash comparison. regular=True uses a
    Fibonacci lattice (near-uniform spacing, so shell tears show up directly
    in nearest-neighbor distances)."""
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=np.float64)
    if regular:
        i = np.arange(n)
        zu = (i + 0.5) / n
        phi = i * np.pi * (3.0 - np.sqrt(5.0))
    else:
        zu = rng.uniform(0.0, 1.0, n)
        phi = rng.uniform(0.0, 2.0 * np.pi, n)
    r_xy = np.sqrt(1.0 - zu ** 2)
    dirs = np.stack([r_xy * np.cos(phi), r_xy * np.sin(phi), zu], axis=1)
    positions = center + radius * dirs

    nq = np.zeros((n, 4))
    nq[:, 0] = 1.0
    scales = np.full((n, 3), radius * shell_scale)
    colors = np.tile(np.array([0.7, 0.45, 0.4]), (n, 1)) + rng.normal(0, 0.02, (n, 3))
    return Scene(positions, nq, np.log(scales), np.clip(colors, 0, 1),
                 logit(np.full(n, 0.9)), material=material)


def hemisphere_camera(radius: float = 0.5, center=(0.0, 0.0, 0.0),
                      height_factor: float = 6.0) -> Camera:
    center = np.asarray(center, dtype=np.float64)
    eye = center + np.array([0.0, 0.0, height_factor * radius])
    return Camera(fx=300.0, fy=300.0, cx=63.5, cy=63.5, width=128, height=128,
                  world_to_camera=look_at(eye, center))


def block_scene(n_side: int = 8, spacing: float = 0.02, center=(0.0, 0.0, 0.0),
                scale_factor: float = 0.6, color=(0.5, 0.5, 0.5),
                material: MaterialParams | None = None) -> Scene:
    """Cubic lattice of isotropic Gaussians, the MPM workhorse fixture."""
    g = np.arange(n_side) * spacing
    g = g - g.mean()
    gx, gy, gz = np.meshgrid(g, g, g, indexing="ij")
    positions = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) + np.asarray(center)
    n = len(positions)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    log_scales = np.full((n, 3), np.log(spacing * scale_factor))
    colors = np.tile(np.asarray(color, dtype=np.float64), (n, 1))
    return Scene(positions, quats, log_scales, colors, logit(np.full(n, 0.8)),
                 material=material)


def bench_grid_bounds(scene: Scene, factor: float = 2.1) -> AABB:
    """Loose grid bounds giving a production-like particle density (about
    four particles per cell on a 64-node grid)."""
    b = scene.bounds
    half = 0.5 * float(np.max(b.extent)) * factor
    return AABB(b.center - half, b.center + half)
