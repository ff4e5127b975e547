"""Per-pixel splatting kernels and their hand-derived adjoints.

The blend walks depth-sorted Gaussians front to back per pixel, rejecting
pixels outside a Gaussian's 3-sigma ellipse and stopping once transmittance
drops below 1e-4. A per-row candidate list (Gaussians whose vertical bounds
touch the row, kept in depth order) skips guaranteed misses without changing
the blend. Pixels are independent, so the forward pass parallelizes over rows
and is bitwise identical for any thread count; the backward pass replays each
pixel's blend and accumulates into per-row buffers reduced in fixed row order.

Inputs arrive pre-sorted by depth. The autograd Function treats the sort
order, the 3-sigma test and the termination point as constant with respect to
the parameters, matching the forward pass.
"""

from __future__ import annotations

import numpy as np
import torch
from numba import njit, prange

ALPHA_CLAMP = 0.999
TERMINATE_T = 1e-4
ELLIPSE_CUT = 9.0  # squared Mahalanobis radius of the 3-sigma ellipse

# gradient buffer slots
_G_MX, _G_MY, _G_CA, _G_CB, _G_CC, _G_A0, _G_R, _G_G, _G_B = range(9)


@njit(cache=True)
def _build_rows(by0, by1, py0, py1):
    """CSR row lists: depth-ordered Gaussian indices touching each pixel row."""
    n_rows = py1 - py0
    counts = np.zeros(n_rows + 1, dtype=np.int64)
    n = by0.shape[0]
    for i in range(n):
        r0 = max(by0[i], py0)
        r1 = min(by1[i], py1)
        for y in range(r0, r1):
            counts[y - py0 + 1] += 1
    row_ptr = np.cumsum(counts)
    row_idx = np.empty(row_ptr[-1], dtype=np.int64)
    cursor = row_ptr[:-1].copy()
    for i in range(n):
        r0 = max(by0[i], py0)
        r1 = min(by1[i], py1)
        for y in range(r0, r1):
            k = y - py0
            row_idx[cursor[k]] = i
            cursor[k] += 1
    return row_ptr, row_idx


@njit(cache=True, parallel=True, fastmath=False)
def _forward_kernel(mx, my, ca, cb, cc, alpha0, colors,
                    bx0, bx1, px0, px1, py0, py1, row_ptr, row_idx,
                    bg, img, t_final, n_iter):
    for y in prange(py0, py1):
        r = y - py0
        lo = row_ptr[r]
        hi = row_ptr[r + 1]
        for x in range(px0, px1):
            t = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            stop = hi - lo
            for k in range(lo, hi):
                if t < TERMINATE_T:
                    stop = k - lo
                    break
                i = row_idx[k]
                if x < bx0[i] or x >= bx1[i]:
                    continue
                dx = (x + 0.5) - mx[i]
                dy = (y + 0.5) - my[i]
                q = ca[i] * dx * dx + 2.0 * cb[i] * dx * dy + cc[i] * dy * dy
                if q > ELLIPSE_CUT:
                    continue
                a = alpha0[i] * np.exp(-0.5 * q)
                if a > ALPHA_CLAMP:
                    a = ALPHA_CLAMP
                w = a * t
                c0 += colors[i, 0] * w
                c1 += colors[i, 1] * w
                c2 += colors[i, 2] * w
                t *= 1.0 - a
            img[y, x, 0] = c0 + bg[0] * t
            img[y, x, 1] = c1 + bg[1] * t
            img[y, x, 2] = c2 + bg[2] * t
            t_final[y, x] = t
            n_iter[y, x] = stop


@njit(cache=True, parallel=True, fastmath=False)
def _backward_kernel(mx, my, ca, cb, cc, alpha0, colors,
                     bx0, bx1, px0, px1, py0, py1, row_ptr, row_idx,
                     bg, grad_img, n_iter, grads):
    """Accumulate d loss / d {mean2d, conic, alpha0, colors} into grads (N, 9)."""
    n = mx.shape[0]
    n_rows = py1 - py0
    if n_rows <= 0 or n == 0:
        return
    # Per-row buffers: rows accumulate independently and are reduced in fixed
    # row order afterwards, so results match for any thread count.
    row_g = np.zeros((n_rows, n, 9))
    for r in prange(n_rows):
        y = r + py0
        lo = row_ptr[r]
        hi = row_ptr[r + 1]
        width = hi - lo
        if width == 0:
            continue
        idx = np.empty(width, dtype=np.int64)
        alph = np.empty(width)
        tbef = np.empty(width)
        for x in range(px0, px1):
            d0 = grad_img[y, x, 0]
            d1 = grad_img[y, x, 1]
            d2 = grad_img[y, x, 2]
            if d0 == 0.0 and d1 == 0.0 and d2 == 0.0:
                continue
            # replay the forward blend for this pixel
            m = 0
            t = 1.0
            for k in range(lo, lo + n_iter[y, x]):
                i = row_idx[k]
                if x < bx0[i] or x >= bx1[i]:
                    continue
                dx = (x + 0.5) - mx[i]
                dy = (y + 0.5) - my[i]
                q = ca[i] * dx * dx + 2.0 * cb[i] * dx * dy + cc[i] * dy * dy
                if q > ELLIPSE_CUT:
                    continue
                a = alpha0[i] * np.exp(-0.5 * q)
                if a > ALPHA_CLAMP:
                    a = ALPHA_CLAMP
                idx[m] = i
                alph[m] = a
                tbef[m] = t
                m += 1
                t *= 1.0 - a
            # suffix color behind the current Gaussian, including background
            s0 = bg[0] * t
            s1 = bg[1] * t
            s2 = bg[2] * t
            for j in range(m - 1, -1, -1):
                i = idx[j]
                a = alph[j]
                tb = tbef[j]
                w = a * tb
                row_g[r, i, _G_R] += d0 * w
                row_g[r, i, _G_G] += d1 * w
                row_g[r, i, _G_B] += d2 * w
                d_dot_col = d0 * colors[i, 0] + d1 * colors[i, 1] + d2 * colors[i, 2]
                d_dot_sfx = d0 * s0 + d1 * s1 + d2 * s2
                da = d_dot_col * tb - d_dot_sfx / (1.0 - a)
                s0 += colors[i, 0] * w
                s1 += colors[i, 1] * w
                s2 += colors[i, 2] * w
                if a >= ALPHA_CLAMP:
                    continue  # clamped alpha: zero derivative into the inputs
                dx = (x + 0.5) - mx[i]
                dy = (y + 0.5) - my[i]
                row_g[r, i, _G_A0] += da * (a / alpha0[i])
                dpw = da * a            # d loss / d power, power = -q/2, a = a0*exp(power)
                dq = -0.5 * dpw
                row_g[r, i, _G_MX] += dpw * (ca[i] * dx + cb[i] * dy)
                row_g[r, i, _G_MY] += dpw * (cb[i] * dx + cc[i] * dy)
                row_g[r, i, _G_CA] += dq * dx * dx
                row_g[r, i, _G_CB] += dq * 2.0 * dx * dy
                row_g[r, i, _G_CC] += dq * dy * dy
    for r in range(n_rows):
        for i in range(n):
            for slot in range(9):
                grads[i, slot] += row_g[r, i, slot]


class RasterBlend(torch.autograd.Function):
    """Depth-ordered alpha blend over a pixel window.

    Inputs must already be sorted by ascending depth. `meta` carries the
    non-differentiable context: integer per-Gaussian pixel bounds, the pixel
    window, the background color and the image size.
    """

    @staticmethod
    def forward(ctx, mean2d, conic, alpha0, colors, meta):
        bx0, bx1, by0, by1, px0, px1, py0, py1, bg, width, height = meta
        mx = np.ascontiguousarray(mean2d[:, 0].detach().numpy())
        my = np.ascontiguousarray(mean2d[:, 1].detach().numpy())
        ca = np.ascontiguousarray(conic[:, 0].detach().numpy())
        cb = np.ascontiguousarray(conic[:, 1].detach().numpy())
        cc = np.ascontiguousarray(conic[:, 2].detach().numpy())
        a0 = np.ascontiguousarray(alpha0.detach().numpy())
        col = np.ascontiguousarray(colors.detach().numpy())
        img = np.empty((height, width, 3))
        img[:, :] = bg
        t_final = np.ones((height, width))
        n_iter = np.zeros((height, width), dtype=np.int64)
        row_ptr = row_idx = None
        if mean2d.shape[0] > 0 and px1 > px0 and py1 > py0:
            row_ptr, row_idx = _build_rows(by0, by1, py0, py1)
            _forward_kernel(mx, my, ca, cb, cc, a0, col,
                            bx0, bx1, px0, px1, py0, py1, row_ptr, row_idx,
                            bg, img, t_final, n_iter)
        ctx.raster = (mx, my, ca, cb, cc, a0, col, bx0, bx1,
                      px0, px1, py0, py1, row_ptr, row_idx, bg, n_iter)
        return torch.from_numpy(img)

    @staticmethod
    def backward(ctx, grad_img):
        (mx, my, ca, cb, cc, a0, col, bx0, bx1,
         px0, px1, py0, py1, row_ptr, row_idx, bg, n_iter) = ctx.raster
        n = mx.shape[0]
        grads = np.zeros((n, 9))
        if n > 0 and px1 > px0 and py1 > py0:
            _backward_kernel(mx, my, ca, cb, cc, a0, col,
                             bx0, bx1, px0, px1, py0, py1, row_ptr, row_idx,
                             bg, np.ascontiguousarray(grad_img.detach().numpy()),
                             n_iter, grads)
        g_mean2d = torch.from_numpy(np.ascontiguousarray(grads[:, _G_MX:_G_MY + 1]))
        g_conic = torch.from_numpy(np.ascontiguousarray(grads[:, _G_CA:_G_CC + 1]))
        g_alpha0 = torch.from_numpy(np.ascontiguousarray(grads[:, _G_A0]))
        g_colors = torch.from_numpy(np.ascontiguousarray(grads[:, _G_R:_G_B + 1]))
        return g_mean2d, g_conic, g_alpha0, g_colors, None


def blend_image(mean2d: torch.Tensor, conic: torch.Tensor, alpha0: torch.Tensor,
                colors: torch.Tensor, meta) -> torch.Tensor:
    return RasterBlend.apply(mean2d, conic, alpha0, colors, meta)
