"""Numba kernels for the tile-based splat rasterizer (forward and backward).

Determinism contract: the forward pass parallelizes over tiles, each pixel is
written by exactly one thread, and the per-pixel traversal order is fixed by
the sorted tile lists, so output is bitwise reproducible for any thread count.
The backward pass accumulates per-Gaussian gradients into a fixed number of
chunk buffers (tiles are assigned round-robin by tile index, not by thread)
which are then reduced in chunk order, so gradients are also reproducible
independently of the thread count.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def forward_kernel(height, width, tile_size, tiles_x, n_tiles,
                   tile_offsets, tile_items,
                   means2d, conics, colors, opacities, depths, power_floor,
                   alpha_min, alpha_max, t_min,
                   out_color, out_depth, out_alpha):
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                trans = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                dsum = 0.0
                asum = 0.0
                for k in range(lo, hi):
                    gi = tile_items[k]
                    dx = px - means2d[gi, 0]
                    dy = py - means2d[gi, 1]
                    power = -0.5 * (conics[gi, 0] * dx * dx + conics[gi, 2] * dy * dy) \
                        - conics[gi, 1] * dx * dy
                    # power < floor means alpha < alpha_min; skip before the exp
                    if power > 0.0 or power < power_floor[gi]:
                        continue
                    alpha = opacities[gi] * math.exp(power)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < alpha_min:
                        continue
                    w = alpha * trans
                    cr += colors[gi, 0] * w
                    cg += colors[gi, 1] * w
                    cb += colors[gi, 2] * w
                    dsum += depths[gi] * w
                    asum += w
                    trans *= 1.0 - alpha
                    if trans < t_min:
                        break
                out_color[py, px, 0] = cr
                out_color[py, px, 1] = cg
                out_color[py, px, 2] = cb
                out_depth[py, px] = dsum
                out_alpha[py, px] = asum


@njit(cache=True, parallel=True)
def backward_pixel_kernel(height, width, tile_size, tiles_x, n_tiles, n_chunks,
                          tile_offsets, tile_items,
                          means2d, conics, colors, opacities, depths, power_floor,
                          alpha_min, alpha_max, t_min,
                          grad_color, grad_depth,
                          rec_idx, rec_alpha, rec_trans, rec_g,
                          buf):
    # buf layout per Gaussian: 0..2 color, 3 opacity, 4..5 mean2d, 6..8 conic, 9 cam depth
    for chunk in prange(n_chunks):
        for t in range(chunk, n_tiles, n_chunks):
            ty = t // tiles_x
            tx = t - ty * tiles_x
            y0 = ty * tile_size
            x0 = tx * tile_size
            y1 = min(y0 + tile_size, height)
            x1 = min(x0 + tile_size, width)
            lo = tile_offsets[t]
            hi = tile_offsets[t + 1]
            if hi == lo:
                continue
            for py in range(y0, y1):
                for px in range(x0, x1):
                    gcr = grad_color[py, px, 0]
                    gcg = grad_color[py, px, 1]
                    gcb = grad_color[py, px, 2]
                    gd = grad_depth[py, px]
                    if gcr == 0.0 and gcg == 0.0 and gcb == 0.0 and gd == 0.0:
                        continue
                    # replay the forward traversal, recording contributors
                    trans = 1.0
                    count = 0
                    for k in range(lo, hi):
                        gi = tile_items[k]
                        dx = px - means2d[gi, 0]
                        dy = py - means2d[gi, 1]
                        power = -0.5 * (conics[gi, 0] * dx * dx + conics[gi, 2] * dy * dy) \
                            - conics[gi, 1] * dx * dy
                        if power > 0.0 or power < power_floor[gi]:
                            continue
                        g = math.exp(power)
                        alpha = opacities[gi] * g
                        if alpha > alpha_max:
                            alpha = alpha_max
                        if alpha < alpha_min:
                            continue
                        rec_idx[chunk, count] = gi
                        rec_alpha[chunk, count] = alpha
                        rec_trans[chunk, count] = trans
                        rec_g[chunk, count] = g
                        count += 1
                        trans *= 1.0 - alpha
                        if trans < t_min:
                            break
                    # walk back to front, keeping the composite of everything behind
                    bcr = 0.0
                    bcg = 0.0
                    bcb = 0.0
                    bd = 0.0
                    for j in range(count - 1, -1, -1):
                        gi = rec_idx[chunk, j]
                        alpha = rec_alpha[chunk, j]
                        tj = rec_trans[chunk, j]
                        g = rec_g[chunk, j]
                        w = alpha * tj
                        buf[chunk, gi, 0] += gcr * w
                        buf[chunk, gi, 1] += gcg * w
                        buf[chunk, gi, 2] += gcb * w
                        buf[chunk, gi, 9] += gd * w
                        galpha = tj * (gcr * (colors[gi, 0] - bcr)
                                       + gcg * (colors[gi, 1] - bcg)
                                       + gcb * (colors[gi, 2] - bcb)
                                       + gd * (depths[gi] - bd))
                        if opacities[gi] * g < alpha_max:  # clamped alpha has zero grad
                            buf[chunk, gi, 3] += galpha * g
                            gp = galpha * alpha
                            dx = px - means2d[gi, 0]
                            dy = py - means2d[gi, 1]
                            ca = conics[gi, 0]
                            cb_ = conics[gi, 1]
                            cc = conics[gi, 2]
                            buf[chunk, gi, 4] += gp * (ca * dx + cb_ * dy)
                            buf[chunk, gi, 5] += gp * (cb_ * dx + cc * dy)
                            buf[chunk, gi, 6] += gp * (-0.5 * dx * dx)
                            buf[chunk, gi, 7] += gp * (-dx * dy)
                            buf[chunk, gi, 8] += gp * (-0.5 * dy * dy)
                        bcr = colors[gi, 0] * alpha + (1.0 - alpha) * bcr
                        bcg = colors[gi, 1] * alpha + (1.0 - alpha) * bcg
                        bcb = colors[gi, 2] * alpha + (1.0 - alpha) * bcb
                        bd = depths[gi] * alpha + (1.0 - alpha) * bd


@njit(cache=True, parallel=True)
def chain_kernel(source, t_cam, cov2d, grads2d,
                 quats, scales, quat_norms,
                 w_mat, fx, fy, low_pass,
                 out_position, out_quat, out_scale, out_color, out_opacity,
                 out_screen):
    """Chain per-Gaussian 2D gradients back to 3D parameters.

    Each projected Gaussian owns a unique source row, so parallel writes into
    the (N, ...) outputs never collide.
    """
    n = source.shape[0]
    for p in prange(n):
        i = source[p]
        out_color[i, 0] = grads2d[p, 0]
        out_color[i, 1] = grads2d[p, 1]
        out_color[i, 2] = grads2d[p, 2]
        out_opacity[i] = grads2d[p, 3]
        out_screen[i, 0] = grads2d[p, 4]
        out_screen[i, 1] = grads2d[p, 5]

        txc = t_cam[p, 0]
        tyc = t_cam[p, 1]
        tzc = t_cam[p, 2]
        inv_z = 1.0 / tzc
        inv_z2 = inv_z * inv_z

        # conic gradients -> low-passed 2D covariance gradients
        a2 = cov2d[p, 0] + low_pass
        b2 = cov2d[p, 1]
        c2 = cov2d[p, 2] + low_pass
        det = a2 * c2 - b2 * b2
        ca = c2 / det
        cb = -b2 / det
        cc = a2 / det
        ga = grads2d[p, 6]
        gb = grads2d[p, 7]
        gc = grads2d[p, 8]
        g_a2 = -(ga * ca * ca + gb * ca * cb + gc * cb * cb)
        g_b2 = -(2.0 * ga * ca * cb + gb * (ca * cc + cb * cb) + 2.0 * gc * cb * cc)
        g_c2 = -(ga * cb * cb + gb * cb * cc + gc * cc * cc)

        # perspective Jacobian at the camera-space center
        j00 = fx * inv_z
        j02 = -fx * txc * inv_z2
        j11 = fy * inv_z
        j12 = -fy * tyc * inv_z2

        # T = J @ W (2x3)
        t0 = np.empty(3)
        t1 = np.empty(3)
        for col in range(3):
            t0[col] = j00 * w_mat[0, col] + j02 * w_mat[2, col]
            t1[col] = j11 * w_mat[1, col] + j12 * w_mat[2, col]

        # world covariance from the factored parameters
        qw = quats[i, 0]
        qx = quats[i, 1]
        qy = quats[i, 2]
        qz = quats[i, 3]
        r = np.empty((3, 3))
        r[0, 0] = 1.0 - 2.0 * (qy * qy + qz * qz)
        r[0, 1] = 2.0 * (qx * qy - qw * qz)
        r[0, 2] = 2.0 * (qx * qz + qw * qy)
        r[1, 0] = 2.0 * (qx * qy + qw * qz)
        r[1, 1] = 1.0 - 2.0 * (qx * qx + qz * qz)
        r[1, 2] = 2.0 * (qy * qz - qw * qx)
        r[2, 0] = 2.0 * (qx * qz - qw * qy)
        r[2, 1] = 2.0 * (qy * qz + qw * qx)
        r[2, 2] = 1.0 - 2.0 * (qx * qx + qy * qy)
        m3 = np.empty((3, 3))
        for row in range(3):
            for col in range(3):
                m3[row, col] = r[row, col] * scales[i, col]
        sigma = m3 @ m3.T

        # dL/dSigma3 = T^T Gm T with Gm the symmetric 2x2 covariance gradient
        gm00 = g_a2
        gm01 = 0.5 * g_b2
        gm11 = g_c2
        dsig = np.empty((3, 3))
        for row in range(3):
            for col in range(3):
                dsig[row, col] = (t0[row] * (gm00 * t0[col] + gm01 * t1[col])
                                  + t1[row] * (gm01 * t0[col] + gm11 * t1[col]))

        # dL/dT = 2 Gm T Sigma3, then dL/dJ = dL/dT W^T
        ts0 = np.empty(3)
        ts1 = np.empty(3)
        for col in range(3):
            ts0[col] = t0[0] * sigma[0, col] + t0[1] * sigma[1, col] + t0[2] * sigma[2, col]
            ts1[col] = t1[0] * sigma[0, col] + t1[1] * sigma[1, col] + t1[2] * sigma[2, col]
        dt0 = np.empty(3)
        dt1 = np.empty(3)
        for col in range(3):
            dt0[col] = 2.0 * (gm00 * ts0[col] + gm01 * ts1[col])
            dt1[col] = 2.0 * (gm01 * ts0[col] + gm11 * ts1[col])
        dj00 = dt0[0] * w_mat[0, 0] + dt0[1] * w_mat[0, 1] + dt0[2] * w_mat[0, 2]
        dj02 = dt0[0] * w_mat[2, 0] + dt0[1] * w_mat[2, 1] + dt0[2] * w_mat[2, 2]
        dj11 = dt1[0] * w_mat[1, 0] + dt1[1] * w_mat[1, 1] + dt1[2] * w_mat[1, 2]
        dj12 = dt1[0] * w_mat[2, 0] + dt1[1] * w_mat[2, 1] + dt1[2] * w_mat[2, 2]

        gmx = grads2d[p, 4]
        gmy = grads2d[p, 5]
        gt0 = gmx * fx * inv_z - dj02 * fx * inv_z2
        gt1 = gmy * fy * inv_z - dj12 * fy * inv_z2
        gt2 = (-gmx * fx * txc * inv_z2 - gmy * fy * tyc * inv_z2 + grads2d[p, 9]
               - dj00 * fx * inv_z2 - dj11 * fy * inv_z2
               + dj02 * 2.0 * fx * txc * inv_z2 * inv_z
               + dj12 * 2.0 * fy * tyc * inv_z2 * inv_z)
        for col in range(3):
            out_position[i, col] = (w_mat[0, col] * gt0 + w_mat[1, col] * gt1
                                    + w_mat[2, col] * gt2)

        # factored-covariance chain: Sigma3 = M M^T, M = R diag(s)
        gm3 = 2.0 * (dsig @ m3)
        for col in range(3):
            out_scale[i, col] = (gm3[0, col] * r[0, col] + gm3[1, col] * r[1, col]
                                 + gm3[2, col] * r[2, col])
        gr = np.empty((3, 3))
        for row in range(3):
            for col in range(3):
                gr[row, col] = gm3[row, col] * scales[i, col]

        gq_w = 2.0 * (-gr[0, 1] * qz + gr[0, 2] * qy + gr[1, 0] * qz
                      - gr[1, 2] * qx - gr[2, 0] * qy + gr[2, 1] * qx)
        gq_x = 2.0 * (gr[0, 1] * qy + gr[0, 2] * qz + gr[1, 0] * qy
                      - 2.0 * gr[1, 1] * qx - gr[1, 2] * qw + gr[2, 0] * qz
                      + gr[2, 1] * qw - 2.0 * gr[2, 2] * qx)
        gq_y = 2.0 * (-2.0 * gr[0, 0] * qy + gr[0, 1] * qx + gr[0, 2] * qw
                      + gr[1, 0] * qx + gr[1, 2] * qz - gr[2, 0] * qw
                      + gr[2, 1] * qz - 2.0 * gr[2, 2] * qy)
        gq_z = 2.0 * (-2.0 * gr[0, 0] * qz - gr[0, 1] * qw + gr[0, 2] * qx
                      + gr[1, 0] * qw - 2.0 * gr[1, 1] * qz + gr[1, 2] * qy
                      + gr[2, 0] * qx + gr[2, 1] * qy)
        # project out the radial component and undo the input normalization
        dot = gq_w * qw + gq_x * qx + gq_y * qy + gq_z * qz
        inv_n = 1.0 / quat_norms[i]
        out_quat[i, 0] = (gq_w - dot * qw) * inv_n
        out_quat[i, 1] = (gq_x - dot * qx) * inv_n
        out_quat[i, 2] = (gq_y - dot * qy) * inv_n
        out_quat[i, 3] = (gq_z - dot * qz) * inv_n
