"""Sequential tile-walk kernels for forward/backward compositing.

All kernels run single-threaded with a fixed tile -> pixel -> contributor
traversal order, so results are bit-identical regardless of how many
worker threads the process was granted.  Accumulation is float64.
"""

import numpy as np
from numba import njit

TILE = 16


@njit(cache=True)
def composite_forward(offsets, entries, tiles_x, tiles_y, width, height,
                      mean2d, inv_cov, radius2, opacity, color, depthval,
                      background, far, alpha_min, alpha_max, stop_t,
                      out_color, out_depth, out_trans, out_nused, out_nproc):
    for tile in range(tiles_x * tiles_y):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        lo = offsets[tile]
        hi = offsets[tile + 1]
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                t = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                dsum = 0.0
                nused = 0
                k = lo
                while k < hi:
                    if stop_t > 0.0 and t < stop_t:
                        break
                    g = entries[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    if dx * dx + dy * dy <= radius2[g]:
                        q = (inv_cov[g, 0] * dx * dx
                             + 2.0 * inv_cov[g, 1] * dx * dy
                             + inv_cov[g, 2] * dy * dy)
                        gexp = np.exp(-0.5 * q)
                        al = opacity[g] * gexp
                        if al > alpha_max:
                            al = alpha_max
                        if al >= alpha_min:
                            w = al * t
                            cr += w * color[g, 0]
                            cg += w * color[g, 1]
                            cb += w * color[g, 2]
                            dsum += w * depthval[g]
                            t *= 1.0 - al
                            nused += 1
                    k += 1
                out_color[py, px, 0] = cr + t * background[0]
                out_color[py, px, 1] = cg + t * background[1]
                out_color[py, px, 2] = cb + t * background[2]
                out_depth[py, px] = dsum + t * far
                out_trans[py, px] = t
                out_nused[py, px] = nused
                out_nproc[py, px] = k - lo


@njit(cache=True)
def fill_record(offsets, entries, tiles_x, tiles_y, width, height,
                mean2d, inv_cov, radius2, opacity,
                alpha_min, alpha_max, stop_t,
                rec_offsets, rec_slot, rec_alpha, rec_tbefore):
    for tile in range(tiles_x * tiles_y):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        lo = offsets[tile]
        hi = offsets[tile + 1]
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                pix = py * width + px
                pos = rec_offsets[pix]
                t = 1.0
                k = lo
                while k < hi:
                    if stop_t > 0.0 and t < stop_t:
                        break
                    g = entries[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    if dx * dx + dy * dy <= radius2[g]:
                        q = (inv_cov[g, 0] * dx * dx
                             + 2.0 * inv_cov[g, 1] * dx * dy
                             + inv_cov[g, 2] * dy * dy)
                        gexp = np.exp(-0.5 * q)
                        al = opacity[g] * gexp
                        if al > alpha_max:
                            al = alpha_max
                        if al >= alpha_min:
                            rec_slot[pos] = g
                            rec_alpha[pos] = al
                            rec_tbefore[pos] = t
                            pos += 1
                            t *= 1.0 - al
                    k += 1


@njit(cache=True)
def composite_backward(offsets, entries, tiles_x, tiles_y, width, height,
                       mean2d, inv_cov, radius2, opacity, color, depthval,
                       grad_color, grad_depth, background, far,
                       alpha_min, alpha_max, final_trans, nproc,
                       g_mean2d, g_invcov, g_opacity, g_depthval, g_color):
    for tile in range(tiles_x * tiles_y):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        lo = offsets[tile]
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                gc0 = grad_color[py, px, 0]
                gc1 = grad_color[py, px, 1]
                gc2 = grad_color[py, px, 2]
                gd = grad_depth[py, px]
                if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0:
                    continue
                gbg = gc0 * background[0] + gc1 * background[1] \
                    + gc2 * background[2] + gd * far
                t_after = final_trans[py, px]
                suffix = t_after * gbg
                k = lo + nproc[py, px] - 1
                while k >= lo:
                    g = entries[k]
                    k -= 1
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    if dx * dx + dy * dy > radius2[g]:
                        continue
                    a = inv_cov[g, 0]
                    b = inv_cov[g, 1]
                    c = inv_cov[g, 2]
                    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                    gexp = np.exp(-0.5 * q)
                    raw = opacity[g] * gexp
                    al = raw if raw <= alpha_max else alpha_max
                    if al < alpha_min:
                        continue
                    t_before = t_after / (1.0 - al)
                    w = al * t_before
                    gk = (gc0 * color[g, 0] + gc1 * color[g, 1]
                          + gc2 * color[g, 2] + gd * depthval[g])
                    g_color[g, 0] += w * gc0
                    g_color[g, 1] += w * gc1
                    g_color[g, 2] += w * gc2
                    g_depthval[g] += w * gd
                    dl_dal = t_before * gk - suffix / (1.0 - al)
                    if raw <= alpha_max:
                        g_opacity[g] += dl_dal * gexp
                        dl_dq = -0.5 * gexp * dl_dal * opacity[g]
                        g_invcov[g, 0] += dl_dq * dx * dx
                        g_invcov[g, 1] += dl_dq * 2.0 * dx * dy
                        g_invcov[g, 2] += dl_dq * dy * dy
                        g_mean2d[g, 0] -= dl_dq * (2.0 * a * dx + 2.0 * b * dy)
                        g_mean2d[g, 1] -= dl_dq * (2.0 * b * dx + 2.0 * c * dy)
                    suffix += w * gk
                    t_after = t_before

@njit(cache=True)
def composite_forward_record(offsets, entries, tiles_x, tiles_y, width, height,
                             mean2d, inv_cov, radius2, opacity, color,
                             depthval, background, far, alpha_min, alpha_max,
                             stop_t, cap_offsets, rec_slot, rec_alpha,
                             rec_tbefore, out_color, out_depth, out_trans,
                             out_nused, out_nproc):
    """Forward composite that also writes accepted blend samples.

    Entries land at each pixel's capacity offset (its tile's candidate
    count); the caller compacts them afterwards.  Pixel results are
    computed with the exact same operation order as composite_forward.
    """
    for tile in range(tiles_x * tiles_y):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        lo = offsets[tile]
        hi = offsets[tile + 1]
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                pos = cap_offsets[py * width + px]
                t = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                dsum = 0.0
                nused = 0
                k = lo
                while k < hi:
                    if stop_t > 0.0 and t < stop_t:
                        break
                    g = entries[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    if dx * dx + dy * dy <= radius2[g]:
                        q = (inv_cov[g, 0] * dx * dx
                             + 2.0 * inv_cov[g, 1] * dx * dy
                             + inv_cov[g, 2] * dy * dy)
                        gexp = np.exp(-0.5 * q)
                        al = opacity[g] * gexp
                        if al > alpha_max:
                            al = alpha_max
                        if al >= alpha_min:
                            w = al * t
                            cr += w * color[g, 0]
                            cg += w * color[g, 1]
                            cb += w * color[g, 2]
                            dsum += w * depthval[g]
                            rec_slot[pos + nused] = g
                            rec_alpha[pos + nused] = al
                            rec_tbefore[pos + nused] = t
                            t *= 1.0 - al
                            nused += 1
                    k += 1
                out_color[py, px, 0] = cr + t * background[0]
                out_color[py, px, 1] = cg + t * background[1]
                out_color[py, px, 2] = cb + t * background[2]
                out_depth[py, px] = dsum + t * far
                out_trans[py, px] = t
                out_nused[py, px] = nused
                out_nproc[py, px] = k - lo


@njit(cache=True)
def composite_backward_rec(rec_offsets, rec_slot, rec_alpha, rec_tbefore,
                           width, height, mean2d, inv_cov, opacity, color,
                           depthval, grad_color, grad_depth, background, far,
                           alpha_max, final_trans,
                           g_mean2d, g_invcov, g_opacity, g_depthval,
                           g_color):
    """Backward pass replaying recorded blend samples back-to-front.

    Only accepted contributors are revisited and the Gaussian falloff is
    recovered as alpha/opacity, so no exponentials are recomputed.
    """
    for py in range(height):
        for px in range(width):
            gc0 = grad_color[py, px, 0]
            gc1 = grad_color[py, px, 1]
            gc2 = grad_color[py, px, 2]
            gd = grad_depth[py, px]
            if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0:
                continue
            pix = py * width + px
            gbg = gc0 * background[0] + gc1 * background[1] \
                + gc2 * background[2] + gd * far
            suffix = final_trans[py, px] * gbg
            lo = rec_offsets[pix]
            k = rec_offsets[pix + 1] - 1
            while k >= lo:
                g = rec_slot[k]
                al = rec_alpha[k]
                t_before = rec_tbefore[k]
                k -= 1
                w = al * t_before
                gk = (gc0 * color[g, 0] + gc1 * color[g, 1]
                      + gc2 * color[g, 2] + gd * depthval[g])
                g_color[g, 0] += w * gc0
                g_color[g, 1] += w * gc1
                g_color[g, 2] += w * gc2
                g_depthval[g] += w * gd
                if al < alpha_max:
                    dl_dal = t_before * gk - suffix / (1.0 - al)
                    g_opacity[g] += dl_dal * al / opacity[g]
                    dl_dq = -0.5 * al * dl_dal
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    a = inv_cov[g, 0]
                    b = inv_cov[g, 1]
                    c = inv_cov[g, 2]
                    g_invcov[g, 0] += dl_dq * dx * dx
                    g_invcov[g, 1] += dl_dq * 2.0 * dx * dy
                    g_invcov[g, 2] += dl_dq * dy * dy
                    g_mean2d[g, 0] -= dl_dq * (2.0 * a * dx + 2.0 * b * dy)
                    g_mean2d[g, 1] -= dl_dq * (2.0 * b * dx + 2.0 * c * dy)
                suffix += w * gk
