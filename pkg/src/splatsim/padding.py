"""Interior padding: fill the occluded volume behind the reconstructed surface
with invisible Gaussians so the simulated body has volumetric support.
"""
from __future__ import annotations

from dataclasses import dataclass

import math
import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

from .scene import AABB, Camera, Scene


@dataclass(frozen=True)
class OpacityField:
    """Scalar opacity-density lattice over the scene bounds; values[i, j, k]
    is sampled at the center of cell (i, j, k)."""

    values: np.ndarray       # (R, R, R)
    origin: np.ndarray       # (3,) world position of the lattice corner
    cell_size: np.ndarray    # (3,)

    def node_positions(self) -> np.ndarray:
        r = self.values.shape
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in r], indexing="ij"), axis=-1)
        return self.origin + (idx + 0.5) * self.cell_size

    def node_position(self, i: int, j: int, k: int) -> np.ndarray:
        return self.origin + (np.array([i, j, k]) + 0.5) * self.cell_size


@njit(cache=True)
def _splat_field(positions, inv_covs, opacities, radii, origin, cell, dims, out):
    n = positions.shape[0]
    for g in range(n):
        px, py, pz = positions[g, 0], positions[g, 1], positions[g, 2]
        r = radii[g]
        i0 = max(int(math.floor((px - r - origin[0]) / cell[0] - 0.5)), 0)
        j0 = max(int(math.floor((py - r - origin[1]) / cell[1] - 0.5)), 0)
        k0 = max(int(math.floor((pz - r - origin[2]) / cell[2] - 0.5)), 0)
        i1 = min(int(math.ceil((px + r - origin[0]) / cell[0] - 0.5)), dims[0] - 1)
        j1 = min(int(math.ceil((py + r - origin[1]) / cell[1] - 0.5)), dims[1] - 1)
        k1 = min(int(math.ceil((pz + r - origin[2]) / cell[2] - 0.5)), dims[2] - 1)
        m = inv_covs[g]
        op = opacities[g]
        for i in range(i0, i1 + 1):
            dx = origin[0] + (i + 0.5) * cell[0] - px
            for j in range(j0, j1 + 1):
                dy = origin[1] + (j + 0.5) * cell[1] - py
                for k in range(k0, k1 + 1):
                    dz = origin[2] + (k + 0.5) * cell[2] - pz
                    q = (m[0, 0] * dx * dx + m[1, 1] * dy * dy + m[2, 2] * dz * dz
                         + 2.0 * (m[0, 1] * dx * dy + m[0, 2] * dx * dz + m[1, 2] * dy * dz))
                    out[i, j, k] += op * math.exp(-0.5 * q)


@njit(cache=True, parallel=True)
def _mark_interior(field, origin, cell, dims, cam_pos, tau, out):
    step = min(cell[0], min(cell[1], cell[2]))
    total = dims[0] * dims[1] * dims[2]
    for node in prange(total):
        i = node // (dims[1] * dims[2])
        rem = node - i * dims[1] * dims[2]
        j = rem // dims[2]
        k = rem - j * dims[2]
        px = origin[0] + (i + 0.5) * cell[0]
        py = origin[1] + (j + 0.5) * cell[1]
        pz = origin[2] + (k + 0.5) * cell[2]
        dx = cam_pos[0] - px
        dy = cam_pos[1] - py
        dz = cam_pos[2] - pz
        dist = math.sqrt(dx * dx + dy * dy + dz * dz)
        if dist <= 0:
            continue
        inv = 1.0 / dist
        dx *= inv
        dy *= inv
        dz *= inv
        here = field[i, j, k]
        n_steps = int(dist / step)
        for s in range(1, n_steps + 1):
            qx = px + dx * s * step
            qy = py + dy * s * step
            qz = pz + dz * s * step
            ii = int(round((qx - origin[0]) / cell[0] - 0.5))
            jj = int(round((qy - origin[1]) / cell[1] - 0.5))
            kk = int(round((qz - origin[2]) / cell[2] - 0.5))
            if ii < 0 or jj < 0 or kk < 0 or ii >= dims[0] or jj >= dims[1] or kk >= dims[2]:
                break
            v = field[ii, jj, kk]
            if v > tau and v > here:
                out[i, j, k] = True
                break


def compute_opacity_field(scene: Scene, resolution: int = 100,
                          bounds: AABB | None = None) -> OpacityField:
    """Sum of opacity-weighted Gaussian densities at each lattice node; each
    Gaussian contributes within 3 sigma of its center."""
    bounds = bounds or scene.bounds
    dims = np.array([resolution] * 3, dtype=np.int64)
    cell = bounds.extent / dims
    cell = np.where(cell <= 0, 1e-6, cell)
    out = np.zeros(tuple(dims))
    if len(scene):
        covs = scene.covariances()
        inv_covs = np.linalg.inv(covs)
        radii = 3.0 * scene.scales.max(axis=1)
        _splat_field(scene.positions.astype(np.float64), inv_covs,
                     scene.opacities, radii,
                     bounds.lo, cell, dims, out)
    return OpacityField(values=out, origin=bounds.lo.copy(), cell_size=cell)


def interior_mask(field: OpacityField, cam: Camera, tau: float = 0.1) -> np.ndarray:
    """Nodes whose camera ray passes a strictly denser node above tau before
    reaching them (the operational reading of 'behind the tissue surface')."""
    dims = np.array(field.values.shape, dtype=np.int64)
    out = np.zeros(tuple(dims), dtype=np.bool_)
    _mark_interior(field.values, field.origin, field.cell_size, dims,
                   cam.position.astype(np.float64), tau, out)
    return out


def occupancy_mask(scene: Scene, field: OpacityField) -> np.ndarray:
    """Nodes whose cell already contains some Gaussian center."""
    dims = field.values.shape
    occ = np.zeros(dims, dtype=bool)
    if len(scene):
        idx = np.floor((scene.positions.astype(np.float64) - field.origin)
                       / field.cell_size).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.array(dims)), axis=1)
        idx = idx[ok]
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return occ


def pad_interior(scene: Scene, field: OpacityField, cam: Camera,
                 tau: float = 0.1) -> Scene:
    """Append one invisible Gaussian (opacity 0, flagged is_padded) at the
    center of every unoccupied interior node. Original Gaussians are untouched
    and re-running with the same field adds nothing new."""
    if len(scene) == 0:
        return scene
    nodes = interior_mask(field, cam, tau) & ~occupancy_mask(scene, field)
    idx = np.argwhere(nodes)  # lexicographic order, deterministic
    if len(idx) == 0:
        return scene
    centers = field.origin + (idx + 0.5) * field.cell_size

    originals = ~scene.is_padded
    ref_positions = scene.positions[originals].astype(np.float64)
    ref_colors = scene.colors[originals]
    if len(ref_positions) == 0:
        ref_positions = scene.positions.astype(np.float64)
        ref_colors = scene.colors
    _, nearest = cKDTree(ref_positions).query(centers)

    n = len(centers)
    quats = np.zeros((n, 4), dtype=np.float32)
    quats[:, 0] = 1.0
    log_scale = np.log(0.5 * field.cell_size)[None, :].repeat(n, axis=0)
    pad = Scene(centers, quats, log_scale, ref_colors[nearest],
                np.full(n, -np.inf, dtype=np.float32),
                np.ones(n, dtype=bool), material=scene.material)
    return scene.append(pad)
