"""MLS-MPM soft-body solver treating Gaussians as Neo-Hookean particles.

Each Gaussian supplies a Lagrangian particle; after every frame-level step the
deformed covariance F Sigma0 F^T is written back so the scene stays renderable
while it deforms.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..config import SimConfig
from ..scene import (Camera, MaterialParams, Scene, lame_parameters, rotation_to_quat)
from . import _kernels

log = logging.getLogger(__name__)

lame = lame_parameters


class SimulationError(RuntimeError):
    pass


def pk1_stress(F: np.ndarray, mu_lame: float, lambda_lame: float) -> np.ndarray:
    """Neo-Hookean first Piola-Kirchhoff stress mu (F - F^-T) + lambda log(J) F^-T."""
    F = np.asarray(F, dtype=np.float64)
    J = np.linalg.det(F)
    if J <= 0:
        raise SimulationError(f"deformation gradient inverted (det F = {J:.3g})")
    f_inv_t = np.linalg.inv(F).T
    return mu_lame * (F - f_inv_t) + lambda_lame * math.log(J) * f_inv_t


def strain_energy_density(F: np.ndarray, mu_lame: float, lambda_lame: float) -> float:
    """Energy density whose F-derivative is pk1_stress."""
    F = np.asarray(F, dtype=np.float64)
    J = np.linalg.det(F)
    if J <= 0:
        raise SimulationError(f"deformation gradient inverted (det F = {J:.3g})")
    log_j = math.log(J)
    return (0.5 * mu_lame * (np.trace(F.T @ F) - 3.0)
            - mu_lame * log_j + 0.5 * lambda_lame * log_j * log_j)


@dataclass(frozen=True)
class ForceEvent:
    """Spherical force region active over [start, end) substep indices."""

    center: tuple[float, float, float]
    radius: float
    force: tuple[float, float, float]
    start_substep: int = 0
    end_substep: int = 1 << 62

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if not all(math.isfinite(c) for c in self.force):
            raise ValueError("force components must be finite")

    @classmethod
    def for_steps(cls, center, radius, force, start_step: int, duration_steps: int,
                  substeps_per_step: int = 80) -> "ForceEvent":
        s0 = start_step * substeps_per_step
        return cls(tuple(center), float(radius), tuple(force),
                   s0, s0 + duration_steps * substeps_per_step)


@dataclass
class SimGrid:
    origin: np.ndarray          # (3,) world position of node (0,0,0)
    dx: float
    dims: tuple[int, int, int]  # node counts
    data: np.ndarray            # (nx, ny, nz, 4): mass + momentum per node;
                                # momentum slots hold velocity after the grid pass
    sticky: np.ndarray          # (6,) bool: -x +x -y +y -z +z

    @property
    def mass(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def velocity(self) -> np.ndarray:
        return self.data[..., 1:]


def _quats_from_rotations(mats: np.ndarray) -> np.ndarray:
    out = np.empty((len(mats), 4))
    for i, m in enumerate(mats):
        out[i] = rotation_to_quat(m)
    return out


class Simulation:
    """Owns particle and grid state for one scene; not thread-safe by design
    (a single loop mutates it, snapshots are taken between steps)."""

    def __init__(self, scene: Scene, config: SimConfig | None = None,
                 material: MaterialParams | None = None,
                 camera: Camera | None = None,
                 grid_bounds=None):
        if len(scene) == 0:
            raise SimulationError("cannot simulate an empty scene")
        self.config = config or SimConfig()
        self.material = material or scene.material
        self.mu_lame, self.lambda_lame = lame_parameters(self.material)

        bounds = grid_bounds if grid_bounds is not None else scene.bounds
        res = int(self.config.grid_resolution)
        margin = max(self.config.boundary_width + 1, 3)
        interior = res - 2 * margin - 1
        if interior < 4:
            raise SimulationError("grid_resolution too small for the boundary margin")
        self.dx = float(np.max(bounds.extent)) / interior
        # node counts hug the bounds per axis (res on the longest axis)
        dims = np.minimum(res, np.ceil(bounds.extent / self.dx).astype(int) + 2 * margin + 1)
        self.origin = bounds.center - 0.5 * dims * self.dx
        self.dims = tuple(int(d) for d in dims)

        sticky = np.zeros(6, dtype=np.bool_)
        if self.config.boundary == "sticky":
            sticky[:] = True
        if camera is not None:
            # the face farthest along the viewing direction anchors the tissue
            view = camera.rotation.T @ np.array([0.0, 0.0, 1.0])
            axis = int(np.argmax(np.abs(view)))
            sticky[2 * axis + (1 if view[axis] > 0 else 0)] = True
        self.grid = SimGrid(
            origin=self.origin, dx=self.dx, dims=self.dims,
            data=np.zeros(self.dims + (4,)), sticky=sticky)

        # particle state from the scene
        n = len(scene)
        self.n = n
        self.x = scene.positions.astype(np.float64)
        self.v = np.zeros((n, 3))
        self.F = np.tile(np.eye(3), (n, 1, 1))
        self.C = np.zeros((n, 3, 3))
        self.cov0 = scene.covariances()
        self.cov = self.cov0.copy()
        scales = scene.scales
        cell_vol = self.dx ** 3
        self.volume0 = np.minimum(4.0 / 3.0 * np.pi * scales.prod(axis=1), cell_vol)
        self.mass = self.material.density * self.volume0
        self.colors = scene.colors.astype(np.float64)
        self.opacities = scene.opacities
        self.is_padded = scene.is_padded.copy()

        self.substep_index = 0
        self.step_index = 0
        self.events: list[ForceEvent] = []
        nb = [max(1, -(-d // _kernels.BLOCK)) for d in self.dims]
        self._nb = nb
        self._block_of = np.zeros(n, dtype=np.int64)
        self._counts = np.zeros(nb[0] * nb[1] * nb[2], dtype=np.int64)
        self._offsets = np.zeros(nb[0] * nb[1] * nb[2] + 1, dtype=np.int64)
        self._cursor = np.zeros(nb[0] * nb[1] * nb[2], dtype=np.int64)
        self._order = np.zeros(n, dtype=np.int64)
        self._occupied = np.zeros(nb[0] * nb[1] * nb[2], dtype=np.int64)
        self._color_offsets = np.zeros(9, dtype=np.int64)
        self._p2g_buf = np.zeros((64, 864))
        self._box = np.zeros(6, dtype=np.int64)
        self._cfl_warned = False

        self._initial = (self.x.copy(), self.v.copy(), self.F.copy(), self.C.copy(),
                         self.cov.copy())

    # -- control -----------------------------------------------------------

    def set_material(self, youngs_modulus: float, poisson_ratio: float) -> None:
        self.material = MaterialParams(youngs_modulus, poisson_ratio, self.material.density)
        self.mu_lame, self.lambda_lame = lame_parameters(self.material)

    def add_event(self, event: ForceEvent) -> None:
        self.events.append(event)

    def queue_force(self, center, radius, force, duration_steps: int) -> ForceEvent:
        """Enqueue a force starting at the next step, lasting duration_steps."""
        ev = ForceEvent.for_steps(center, radius, force, self.step_index,
                                  duration_steps, self.config.substeps)
        self.events.append(ev)
        return ev

    def region_has_mass(self, center, radius: float) -> bool:
        d = np.linalg.norm(self.x - np.asarray(center, dtype=np.float64), axis=1)
        return bool((d < radius).any())

    def reset(self) -> None:
        """Restore the exact initial particle state and clear pending forces."""
        x0, v0, f0, c0, cov0 = self._initial
        self.x[:] = x0
        self.v[:] = v0
        self.F[:] = f0
        self.C[:] = c0
        self.cov[:] = cov0
        self.substep_index = 0
        self.step_index = 0
        self.events.clear()
        self._cfl_warned = False

    # -- stepping ----------------------------------------------------------

    def _event_arrays(self):
        live = [e for e in self.events if e.end_substep > self.substep_index]
        if len(live) != len(self.events):
            self.events = live
        if not live:
            return np.zeros((0, 9)), 0
        arr = np.zeros((len(live), 9))
        for i, e in enumerate(live):
            arr[i, 0:3] = e.center
            arr[i, 3] = e.radius
            arr[i, 4:7] = e.force
            arr[i, 7] = e.start_substep
            arr[i, 8] = e.end_substep
        return arr, len(live)

    def substep(self, dt: float | None = None) -> None:
        """One P2G -> grid -> G2P cycle."""
        cfg = self.config
        dt = cfg.dt if dt is None else float(dt)
        if dt <= 0:
            raise SimulationError("dt must be > 0")
        nx, ny, nz = self.dims
        inv_dx = 1.0 / self.dx

        if not self._cfl_warned and self.substep_index % 16 == 0:
            vmax = float(np.abs(self.v).max()) if self.n else 0.0
            if vmax * dt >= self.dx:
                log.warning("CFL violated: max|v| dt = %.3g >= dx = %.3g", vmax * dt, self.dx)
                self._cfl_warned = True

        nbx, nby, nbz = self._nb
        _kernels.compute_blocks(self.x, self.origin[0], self.origin[1], self.origin[2],
                                inv_dx, nx, ny, nz, nbx, nby, nbz,
                                self._block_of, self._counts, self._box)
        _kernels.build_schedule(self._counts, self._block_of, nby, nbz,
                                self._offsets, self._cursor, self._order,
                                self._occupied, self._color_offsets)
        occupied = self._occupied
        color_offsets = self._color_offsets
        n_occ = int(color_offsets[8])
        if self._p2g_buf.shape[0] < n_occ:
            self._p2g_buf = np.zeros((n_occ, 864))

        b0, b1, b2 = int(self._box[0]), int(self._box[1]), int(self._box[2])
        e0 = min(int(self._box[3]) + 3, nx)
        e1 = min(int(self._box[4]) + 3, ny)
        e2 = min(int(self._box[5]) + 3, nz)
        self.grid.data[b0:e0, b1:e1, b2:e2] = 0.0

        _kernels.p2g(self.x, self.v, self.F, self.C, self.volume0, self.mass,
                     self.mu_lame, self.lambda_lame, dt,
                     cfg.det_floor, cfg.sig_clamp[0], cfg.sig_clamp[1],
                     self.origin[0], self.origin[1], self.origin[2], inv_dx, self.dx,
                     self._order, self._offsets, occupied, color_offsets, self._p2g_buf,
                     nby, nbz, nx, ny, nz, self.grid.data)

        if self.substep_index % 16 == 0 and not math.isfinite(
                float(np.sum(self.grid.data[b0:e0, b1:e1, b2:e2]))):
            raise SimulationError(f"NaN on the grid at substep {self.substep_index}")

        events, n_events = self._event_arrays()
        ev_mass = np.zeros(max(n_events, 1))
        for i in range(n_events):
            if events[i, 7] <= self.substep_index < events[i, 8]:
                ev_mass[i] = _kernels.region_mass(
                    self.grid.data, self.origin[0], self.origin[1], self.origin[2],
                    self.dx, nx, ny, nz, events[i, 0], events[i, 1], events[i, 2],
                    events[i, 3])
                if ev_mass[i] <= 0.0:
                    log.warning("force event at %s has no material in range; skipped",
                                events[i, 0:3])

        damp = math.exp(-cfg.damping * dt) if cfg.damping > 0 else 1.0
        st = self.grid.sticky
        _kernels.grid_update(
            self.grid.data, b0, b1, b2, e0, e1, e2,
            dt, cfg.gravity[0], cfg.gravity[1], cfg.gravity[2], damp,
            st[0], st[1], st[2], st[3], st[4], st[5], cfg.boundary_width,
            nx, ny, nz, self.origin[0], self.origin[1], self.origin[2], self.dx,
            events, ev_mass, n_events, self.substep_index)

        lo = self.origin + 1.51 * self.dx
        hi = self.origin + (np.array(self.dims) - 3.51) * self.dx
        _kernels.g2p(self.x, self.v, self.F, self.C, self.grid.data,
                     self.origin[0], self.origin[1], self.origin[2], inv_dx, self.dx, dt,
                     nx, ny, nz, lo[0], lo[1], lo[2], hi[0], hi[1], hi[2],
                     cfg.det_floor, cfg.sig_clamp[0], cfg.sig_clamp[1])
        if not math.isfinite(float(np.sum(self.v))):
            raise SimulationError(f"NaN on the grid at substep {self.substep_index}")
        self.substep_index += 1

    def step(self, n_substeps: int | None = None, dt: float | None = None) -> None:
        """Advance one frame (default 80 substeps of 0.5 ms) and refresh the
        renderable covariances Sigma' = F Sigma0 F^T."""
        n = self.config.substeps if n_substeps is None else int(n_substeps)
        for _ in range(n):
            self.substep(dt)
        self.update_covariances()
        self.step_index += 1
        self._cfl_warned = False

    def update_covariances(self) -> None:
        self.cov = np.einsum("nij,njk,nlk->nil", self.F, self.cov0, self.F)

    # -- observation -------------------------------------------------------

    def render_arrays(self):
        """Snapshot arrays for rasterize_arrays (positions, covariances,
        colors, opacities)."""
        return self.x.copy(), self.cov.copy(), self.colors, self.opacities

    def to_scene(self) -> Scene:
        """Re-factor deformed covariances into (rotation, scale) and rebuild a
        Scene; padded flags and appearance are preserved."""
        w, vecs = np.linalg.eigh(self.cov)
        w = np.maximum(w, 1e-18)
        flip = np.linalg.det(vecs) < 0
        vecs[flip, :, 0] *= -1.0
        quats = _quats_from_rotations(vecs)
        from ..scene import logit
        return Scene(self.x, quats, 0.5 * np.log(w), self.colors,
                     logit(self.opacities), self.is_padded, material=self.material)

    def energies(self) -> dict[str, float]:
        kinetic = 0.5 * float(np.sum(self.mass * np.sum(self.v ** 2, axis=1)))
        strain = 0.0
        for p in range(self.n):
            strain += self.volume0[p] * strain_energy_density(
                self.F[p], self.mu_lame, self.lambda_lame)
        g = np.asarray(self.config.gravity)
        potential = -float(np.sum(self.mass * (self.x @ g)))
        return {"kinetic": kinetic, "strain": strain, "potential": potential,
                "total": kinetic + strain + potential}
