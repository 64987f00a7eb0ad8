"""Numba kernels for the MLS-MPM solver (quadratic B-splines, APIC transfer).

Determinism: the P2G scatter runs over 2x2x2-colored particle blocks; blocks
of one color are at least four cells apart, so their 3x3x3 scatter stencils
never overlap and each grid node receives its contributions in a fixed order
(color-major, then block, then particle index) for any thread count. The grid
and G2P passes write each node/particle exactly once.

The grid is a single (nx, ny, nz, 4) array holding [mass, mom_x, mom_y, mom_z]
so one particle-node update touches one cache line; after grid_update the
momentum slots hold velocities.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

BLOCK = 4  # cells per particle block along each axis


@njit(cache=True, inline="always")
def _svd_clamp(f, smin, smax):
    u, s, vt = np.linalg.svd(f)
    for d in range(3):
        if s[d] < smin:
            s[d] = smin
        elif s[d] > smax:
            s[d] = smax
    return u @ np.diag(s) @ vt


@njit(cache=True)
def compute_blocks(x, ox, oy, oz, inv_dx, nx, ny, nz, nbx, nby, nbz,
                   block_of, counts, box):
    """Scatter block id per particle plus per-block counts and the active
    node bounding box (min base, max base per axis)."""
    n = x.shape[0]
    nb = nbx * nby * nbz
    for b in range(nb):
        counts[b] = 0
    box[0] = nx
    box[1] = ny
    box[2] = nz
    box[3] = 0
    box[4] = 0
    box[5] = 0
    for p in range(n):
        bx = int(math.floor((x[p, 0] - ox) * inv_dx - 0.5))
        by = int(math.floor((x[p, 1] - oy) * inv_dx - 0.5))
        bz = int(math.floor((x[p, 2] - oz) * inv_dx - 0.5))
        if bx < 0:
            bx = 0
        elif bx > nx - 3:
            bx = nx - 3
        if by < 0:
            by = 0
        elif by > ny - 3:
            by = ny - 3
        if bz < 0:
            bz = 0
        elif bz > nz - 3:
            bz = nz - 3
        if bx < box[0]:
            box[0] = bx
        if by < box[1]:
            box[1] = by
        if bz < box[2]:
            box[2] = bz
        if bx > box[3]:
            box[3] = bx
        if by > box[4]:
            box[4] = by
        if bz > box[5]:
            box[5] = bz
        blk = (bx // BLOCK) * nby * nbz + (by // BLOCK) * nbz + (bz // BLOCK)
        block_of[p] = blk
        counts[blk] += 1


@njit(cache=True)
def build_schedule(counts, block_of, nby, nbz, offsets, cursor, order,
                   occupied, color_offsets):
    """Prefix-sum the block counts, place particle indices per block, and
    group the occupied block ids by scatter color (ascending id per color)."""
    nb = counts.shape[0]
    n = block_of.shape[0]
    offsets[0] = 0
    for b in range(nb):
        offsets[b + 1] = offsets[b] + counts[b]
        cursor[b] = offsets[b]
    for p in range(n):
        blk = block_of[p]
        order[cursor[blk]] = p
        cursor[blk] += 1
    color_counts = np.zeros(8, dtype=np.int64)
    for b in range(nb):
        if counts[b] > 0:
            tmp = b // nbz
            bbz = b - tmp * nbz
            bbx = tmp // nby
            bby = tmp - bbx * nby
            color_counts[(bbx & 1) | ((bby & 1) << 1) | ((bbz & 1) << 2)] += 1
    color_offsets[0] = 0
    color_cursor = np.zeros(8, dtype=np.int64)
    for c in range(8):
        color_offsets[c + 1] = color_offsets[c] + color_counts[c]
        color_cursor[c] = color_offsets[c]
    for b in range(nb):
        if counts[b] > 0:
            tmp = b // nbz
            bbz = b - tmp * nbz
            bbx = tmp // nby
            bby = tmp - bbx * nby
            c = (bbx & 1) | ((bby & 1) << 1) | ((bbz & 1) << 2)
            occupied[color_cursor[c]] = b
            color_cursor[c] += 1


@njit(cache=True, parallel=True, fastmath=True)
def p2g(x, v, F, C, volume0, mass, mu, lam, dt, det_floor, smin, smax,
        ox, oy, oz, inv_dx, dx,
        order, offsets, occupied, color_offsets, buf,
        nby, nbz, nx, ny, nz, grid):
    """Fused stress evaluation + colored APIC scatter.

    occupied lists the non-empty block ids grouped by color; blocks of one
    color scatter in parallel without overlap. Each block accumulates into
    its own 6x6x6 node buffer (buf row) and flushes once, in particle order,
    so results stay bitwise deterministic for any thread count.
    """
    coeff = -dt * 4.0 * inv_dx * inv_dx
    for color in range(8):
        c_lo = color_offsets[color]
        c_hi = color_offsets[color + 1]
        for oi in prange(c_lo, c_hi):
            blk = occupied[oi]
            local = buf[oi]
            for q in range(864):
                local[q] = 0.0
            tmp = blk // nbz
            blk_z = blk - tmp * nbz
            blk_x = tmp // nby
            blk_y = tmp - blk_x * nby
            node0_x = blk_x * BLOCK
            node0_y = blk_y * BLOCK
            node0_z = blk_z * BLOCK
            for t in range(offsets[blk], offsets[blk + 1]):
                p = order[t]
                f00 = F[p, 0, 0]
                f01 = F[p, 0, 1]
                f02 = F[p, 0, 2]
                f10 = F[p, 1, 0]
                f11 = F[p, 1, 1]
                f12 = F[p, 1, 2]
                f20 = F[p, 2, 0]
                f21 = F[p, 2, 1]
                f22 = F[p, 2, 2]
                det = (f00 * (f11 * f22 - f12 * f21)
                       - f01 * (f10 * f22 - f12 * f20)
                       + f02 * (f10 * f21 - f11 * f20))
                if det < det_floor:
                    F[p] = _svd_clamp(F[p], smin, smax)
                    f00 = F[p, 0, 0]
                    f01 = F[p, 0, 1]
                    f02 = F[p, 0, 2]
                    f10 = F[p, 1, 0]
                    f11 = F[p, 1, 1]
                    f12 = F[p, 1, 2]
                    f20 = F[p, 2, 0]
                    f21 = F[p, 2, 1]
                    f22 = F[p, 2, 2]
                    det = (f00 * (f11 * f22 - f12 * f21)
                           - f01 * (f10 * f22 - f12 * f20)
                           + f02 * (f10 * f21 - f11 * f20))
                inv_det = 1.0 / det
                t00 = (f11 * f22 - f12 * f21) * inv_det
                t01 = (f12 * f20 - f10 * f22) * inv_det
                t02 = (f10 * f21 - f11 * f20) * inv_det
                t10 = (f02 * f21 - f01 * f22) * inv_det
                t11 = (f00 * f22 - f02 * f20) * inv_det
                t12 = (f01 * f20 - f00 * f21) * inv_det
                t20 = (f01 * f12 - f02 * f11) * inv_det
                t21 = (f02 * f10 - f00 * f12) * inv_det
                t22 = (f00 * f11 - f01 * f10) * inv_det
                lj = lam * math.log(det)
                p00 = mu * (f00 - t00) + lj * t00
                p01 = mu * (f01 - t01) + lj * t01
                p02 = mu * (f02 - t02) + lj * t02
                p10 = mu * (f10 - t10) + lj * t10
                p11 = mu * (f11 - t11) + lj * t11
                p12 = mu * (f12 - t12) + lj * t12
                p20 = mu * (f20 - t20) + lj * t20
                p21 = mu * (f21 - t21) + lj * t21
                p22 = mu * (f22 - t22) + lj * t22
                cc = coeff * volume0[p]
                m = mass[p]
                # A = m*C + cc * P @ F^T
                a00 = m * C[p, 0, 0] + cc * (p00 * f00 + p01 * f01 + p02 * f02)
                a01 = m * C[p, 0, 1] + cc * (p00 * f10 + p01 * f11 + p02 * f12)
                a02 = m * C[p, 0, 2] + cc * (p00 * f20 + p01 * f21 + p02 * f22)
                a10 = m * C[p, 1, 0] + cc * (p10 * f00 + p11 * f01 + p12 * f02)
                a11 = m * C[p, 1, 1] + cc * (p10 * f10 + p11 * f11 + p12 * f12)
                a12 = m * C[p, 1, 2] + cc * (p10 * f20 + p11 * f21 + p12 * f22)
                a20 = m * C[p, 2, 0] + cc * (p20 * f00 + p21 * f01 + p22 * f02)
                a21 = m * C[p, 2, 1] + cc * (p20 * f10 + p21 * f11 + p22 * f12)
                a22 = m * C[p, 2, 2] + cc * (p20 * f20 + p21 * f21 + p22 * f22)

                xp = (x[p, 0] - ox) * inv_dx
                yp = (x[p, 1] - oy) * inv_dx
                zp = (x[p, 2] - oz) * inv_dx
                bx = int(math.floor(xp - 0.5))
                by = int(math.floor(yp - 0.5))
                bz = int(math.floor(zp - 0.5))
                if bx < 0:
                    bx = 0
                elif bx > nx - 3:
                    bx = nx - 3
                if by < 0:
                    by = 0
                elif by > ny - 3:
                    by = ny - 3
                if bz < 0:
                    bz = 0
                elif bz > nz - 3:
                    bz = nz - 3
                fx = xp - bx
                fy = yp - by
                fz = zp - bz
                wx0 = 0.5 * (1.5 - fx) ** 2
                wx1 = 0.75 - (fx - 1.0) ** 2
                wx2 = 0.5 * (fx - 0.5) ** 2
                wy0 = 0.5 * (1.5 - fy) ** 2
                wy1 = 0.75 - (fy - 1.0) ** 2
                wy2 = 0.5 * (fy - 0.5) ** 2
                wz0 = 0.5 * (1.5 - fz) ** 2
                wz1 = 0.75 - (fz - 1.0) ** 2
                wz2 = 0.5 * (fz - 0.5) ** 2
                mvx = m * v[p, 0]
                mvy = m * v[p, 1]
                mvz = m * v[p, 2]
                dpz0 = (0.0 - fz) * dx
                dpz1 = (1.0 - fz) * dx
                dpz2 = (2.0 - fz) * dx
                li = bx - node0_x
                lj = by - node0_y
                lk = bz - node0_z
                for di in range(3):
                    wxd = wx0 if di == 0 else (wx1 if di == 1 else wx2)
                    dpx = (di - fx) * dx
                    row_i = (li + di) * 144
                    for dj in range(3):
                        wxy = wxd * (wy0 if dj == 0 else (wy1 if dj == 1 else wy2))
                        dpy = (dj - fy) * dx
                        bvx = mvx + a00 * dpx + a01 * dpy
                        bvy = mvy + a10 * dpx + a11 * dpy
                        bvz = mvz + a20 * dpx + a21 * dpy
                        w0 = wxy * wz0
                        w1 = wxy * wz1
                        w2 = wxy * wz2
                        base = row_i + (lj + dj) * 24 + lk * 4
                        local[base + 0] += w0 * m
                        local[base + 1] += w0 * (bvx + a02 * dpz0)
                        local[base + 2] += w0 * (bvy + a12 * dpz0)
                        local[base + 3] += w0 * (bvz + a22 * dpz0)
                        local[base + 4] += w1 * m
                        local[base + 5] += w1 * (bvx + a02 * dpz1)
                        local[base + 6] += w1 * (bvy + a12 * dpz1)
                        local[base + 7] += w1 * (bvz + a22 * dpz1)
                        local[base + 8] += w2 * m
                        local[base + 9] += w2 * (bvx + a02 * dpz2)
                        local[base + 10] += w2 * (bvy + a12 * dpz2)
                        local[base + 11] += w2 * (bvz + a22 * dpz2)
            # flush the 6x6x6 block buffer into the global grid
            i_hi = min(6, nx - node0_x)
            j_hi = min(6, ny - node0_y)
            k_hi = min(6, nz - node0_z)
            for i in range(i_hi):
                for j in range(j_hi):
                    src = i * 144 + j * 24
                    for k in range(k_hi):
                        for c in range(4):
                            grid[node0_x + i, node0_y + j, node0_z + k, c] += \
                                local[src + k * 4 + c]


@njit(cache=True)
def region_mass(grid, ox, oy, oz, dx, nx, ny, nz, cx, cy, cz, radius):
    i0 = max(int((cx - radius - ox) / dx), 0)
    j0 = max(int((cy - radius - oy) / dx), 0)
    k0 = max(int((cz - radius - oz) / dx), 0)
    i1 = min(int((cx + radius - ox) / dx) + 1, nx - 1)
    j1 = min(int((cy + radius - oy) / dx) + 1, ny - 1)
    k1 = min(int((cz + radius - oz) / dx) + 1, nz - 1)
    total = 0.0
    r2 = radius * radius
    for i in range(i0, i1 + 1):
        px = ox + i * dx - cx
        for j in range(j0, j1 + 1):
            py = oy + j * dx - cy
            for k in range(k0, k1 + 1):
                pz = oz + k * dx - cz
                if px * px + py * py + pz * pz < r2:
                    total += grid[i, j, k, 0]
    return total


@njit(cache=True, parallel=True, fastmath=True)
def grid_update(grid, b0, b1, b2, e0, e1, e2,
                dt, gx, gy, gz, damp_factor,
                st_x0, st_x1, st_y0, st_y1, st_z0, st_z1, bw,
                nx, ny, nz, ox, oy, oz, dx,
                events, ev_mass, n_events, substep_idx):
    """Momentum -> velocity plus gravity, user forces, damping, boundaries.
    Only the active node box [b, e) is touched."""
    for i in prange(b0, e0):
        x_sticky = (st_x0 and i < bw) or (st_x1 and i >= nx - bw)
        for j in range(b1, e1):
            xy_sticky = x_sticky or (st_y0 and j < bw) or (st_y1 and j >= ny - bw)
            for k in range(b2, e2):
                m = grid[i, j, k, 0]
                if m <= 0.0:
                    continue
                inv_m = 1.0 / m
                vx = grid[i, j, k, 1] * inv_m + dt * gx
                vy = grid[i, j, k, 2] * inv_m + dt * gy
                vz = grid[i, j, k, 3] * inv_m + dt * gz
                for e in range(n_events):
                    if events[e, 7] <= substep_idx < events[e, 8] and ev_mass[e] > 0.0:
                        px = ox + i * dx - events[e, 0]
                        py = oy + j * dx - events[e, 1]
                        pz = oz + k * dx - events[e, 2]
                        if px * px + py * py + pz * pz < events[e, 3] * events[e, 3]:
                            inv_rm = dt / ev_mass[e]
                            vx += events[e, 4] * inv_rm
                            vy += events[e, 5] * inv_rm
                            vz += events[e, 6] * inv_rm
                if damp_factor != 1.0:
                    vx *= damp_factor
                    vy *= damp_factor
                    vz *= damp_factor
                if xy_sticky or (st_z0 and k < bw) or (st_z1 and k >= nz - bw):
                    vx = 0.0
                    vy = 0.0
                    vz = 0.0
                grid[i, j, k, 1] = vx
                grid[i, j, k, 2] = vy
                grid[i, j, k, 3] = vz


@njit(cache=True, parallel=True, fastmath=True)
def g2p(x, v, F, C, grid, ox, oy, oz, inv_dx, dx, dt, nx, ny, nz,
        lo0, lo1, lo2, hi0, hi1, hi2, det_floor, smin, smax):
    n = x.shape[0]
    four_inv_dx2 = 4.0 * inv_dx * inv_dx
    for p in prange(n):
        xp = (x[p, 0] - ox) * inv_dx
        yp = (x[p, 1] - oy) * inv_dx
        zp = (x[p, 2] - oz) * inv_dx
        bx = int(math.floor(xp - 0.5))
        by = int(math.floor(yp - 0.5))
        bz = int(math.floor(zp - 0.5))
        if bx < 0:
            bx = 0
        elif bx > nx - 3:
            bx = nx - 3
        if by < 0:
            by = 0
        elif by > ny - 3:
            by = ny - 3
        if bz < 0:
            bz = 0
        elif bz > nz - 3:
            bz = nz - 3
        fx = xp - bx
        fy = yp - by
        fz = zp - bz
        wx0 = 0.5 * (1.5 - fx) ** 2
        wx1 = 0.75 - (fx - 1.0) ** 2
        wx2 = 0.5 * (fx - 0.5) ** 2
        wy0 = 0.5 * (1.5 - fy) ** 2
        wy1 = 0.75 - (fy - 1.0) ** 2
        wy2 = 0.5 * (fy - 0.5) ** 2
        wz0 = 0.5 * (1.5 - fz) ** 2
        wz1 = 0.75 - (fz - 1.0) ** 2
        wz2 = 0.5 * (fz - 0.5) ** 2
        dpz0 = (0.0 - fz) * dx
        dpz1 = (1.0 - fz) * dx
        dpz2 = (2.0 - fz) * dx
        nvx = 0.0
        nvy = 0.0
        nvz = 0.0
        c00 = 0.0
        c01 = 0.0
        c02 = 0.0
        c10 = 0.0
        c11 = 0.0
        c12 = 0.0
        c20 = 0.0
        c21 = 0.0
        c22 = 0.0
        for di in range(3):
            wxd = wx0 if di == 0 else (wx1 if di == 1 else wx2)
            dpx = (di - fx) * dx
            gi = bx + di
            for dj in range(3):
                w = wxd * (wy0 if dj == 0 else (wy1 if dj == 1 else wy2))
                dpy = (dj - fy) * dx
                gj = by + dj
                w0 = w * wz0
                w1 = w * wz1
                w2 = w * wz2
                g0x = grid[gi, gj, bz, 1]
                g0y = grid[gi, gj, bz, 2]
                g0z = grid[gi, gj, bz, 3]
                g1x = grid[gi, gj, bz + 1, 1]
                g1y = grid[gi, gj, bz + 1, 2]
                g1z = grid[gi, gj, bz + 1, 3]
                g2x = grid[gi, gj, bz + 2, 1]
                g2y = grid[gi, gj, bz + 2, 2]
                g2z = grid[gi, gj, bz + 2, 3]
                sx = w0 * g0x + w1 * g1x + w2 * g2x
                sy = w0 * g0y + w1 * g1y + w2 * g2y
                sz = w0 * g0z + w1 * g1z + w2 * g2z
                nvx += sx
                nvy += sy
                nvz += sz
                c00 += sx * dpx
                c01 += sx * dpy
                c02 += w0 * g0x * dpz0 + w1 * g1x * dpz1 + w2 * g2x * dpz2
                c10 += sy * dpx
                c11 += sy * dpy
                c12 += w0 * g0y * dpz0 + w1 * g1y * dpz1 + w2 * g2y * dpz2
                c20 += sz * dpx
                c21 += sz * dpy
                c22 += w0 * g0z * dpz0 + w1 * g1z * dpz1 + w2 * g2z * dpz2
        c00 *= four_inv_dx2
        c01 *= four_inv_dx2
        c02 *= four_inv_dx2
        c10 *= four_inv_dx2
        c11 *= four_inv_dx2
        c12 *= four_inv_dx2
        c20 *= four_inv_dx2
        c21 *= four_inv_dx2
        c22 *= four_inv_dx2
        C[p, 0, 0] = c00
        C[p, 0, 1] = c01
        C[p, 0, 2] = c02
        C[p, 1, 0] = c10
        C[p, 1, 1] = c11
        C[p, 1, 2] = c12
        C[p, 2, 0] = c20
        C[p, 2, 1] = c21
        C[p, 2, 2] = c22
        v[p, 0] = nvx
        v[p, 1] = nvy
        v[p, 2] = nvz
        # F <- (I + dt C) F
        g00 = 1.0 + dt * c00
        g01 = dt * c01
        g02 = dt * c02
        g10 = dt * c10
        g11 = 1.0 + dt * c11
        g12 = dt * c12
        g20 = dt * c20
        g21 = dt * c21
        g22 = 1.0 + dt * c22
        f00 = F[p, 0, 0]
        f01 = F[p, 0, 1]
        f02 = F[p, 0, 2]
        f10 = F[p, 1, 0]
        f11 = F[p, 1, 1]
        f12 = F[p, 1, 2]
        f20 = F[p, 2, 0]
        f21 = F[p, 2, 1]
        f22 = F[p, 2, 2]
        n00 = g00 * f00 + g01 * f10 + g02 * f20
        n01 = g00 * f01 + g01 * f11 + g02 * f21
        n02 = g00 * f02 + g01 * f12 + g02 * f22
        n10 = g10 * f00 + g11 * f10 + g12 * f20
        n11 = g10 * f01 + g11 * f11 + g12 * f21
        n12 = g10 * f02 + g11 * f12 + g12 * f22
        n20 = g20 * f00 + g21 * f10 + g22 * f20
        n21 = g20 * f01 + g21 * f11 + g22 * f21
        n22 = g20 * f02 + g21 * f12 + g22 * f22
        det = (n00 * (n11 * n22 - n12 * n21)
               - n01 * (n10 * n22 - n12 * n20)
               + n02 * (n10 * n21 - n11 * n20))
        F[p, 0, 0] = n00
        F[p, 0, 1] = n01
        F[p, 0, 2] = n02
        F[p, 1, 0] = n10
        F[p, 1, 1] = n11
        F[p, 1, 2] = n12
        F[p, 2, 0] = n20
        F[p, 2, 1] = n21
        F[p, 2, 2] = n22
        if det < det_floor:
            F[p] = _svd_clamp(F[p], smin, smax)
        px = x[p, 0] + dt * nvx
        py = x[p, 1] + dt * nvy
        pz = x[p, 2] + dt * nvz
        if px < lo0:
            px = lo0
        elif px > hi0:
            px = hi0
        if py < lo1:
            py = lo1
        elif py > hi1:
            py = hi1
        if pz < lo2:
            pz = lo2
        elif pz > hi2:
            pz = hi2
        x[p, 0] = px
        x[p, 1] = py
        x[p, 2] = pz
