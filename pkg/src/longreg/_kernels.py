"""Compiled inner loops for resampling and histogramming.

All kernels are serial and avoid fastmath so results are bit-reproducible.
Coordinates are voxel-space; callers fold world/affine plumbing into the 3x4
matrices they pass in (row layout: out index -> source voxel coordinate).

Out-of-bounds policy is a per-call flag: MODE_ZERO treats the source as
zero-padded (images, the registration contract), MODE_CLAMP replicates the
border (displacement-field composition, where zero padding would bend
constant flows at the edges).
"""

import numpy as np
from numba import njit

MODE_ZERO = 0
MODE_CLAMP = 1


@njit(cache=True)
def _tri(src, x, y, z, mode):
    sx, sy, sz = src.shape
    if mode == MODE_CLAMP:
        if x < 0.0:
            x = 0.0
        elif x > sx - 1.0:
            x = sx - 1.0
        if y < 0.0:
            y = 0.0
        elif y > sy - 1.0:
            y = sy - 1.0
        if z < 0.0:
            z = 0.0
        elif z > sz - 1.0:
            z = sz - 1.0
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    z0 = int(np.floor(z))
    fx = x - x0
    fy = y - y0
    fz = z - z0
    acc = 0.0
    for dx in range(2):
        xi = x0 + dx
        if xi < 0 or xi >= sx:
            continue
        wx = fx if dx == 1 else 1.0 - fx
        for dy in range(2):
            yj = y0 + dy
            if yj < 0 or yj >= sy:
                continue
            wy = fy if dy == 1 else 1.0 - fy
            for dz in range(2):
                zk = z0 + dz
                if zk < 0 or zk >= sz:
                    continue
                wz = fz if dz == 1 else 1.0 - fz
                acc += wx * wy * wz * src[xi, yj, zk]
    return acc


@njit(cache=True)
def _tri_vec(field, x, y, z, mode):
    """Trilinear sample of a (nx,ny,nz,3) field; returns the 3 components."""
    sx, sy, sz = field.shape[0], field.shape[1], field.shape[2]
    if mode == MODE_CLAMP:
        if x < 0.0:
            x = 0.0
        elif x > sx - 1.0:
            x = sx - 1.0
        if y < 0.0:
            y = 0.0
        elif y > sy - 1.0:
            y = sy - 1.0
        if z < 0.0:
            z = 0.0
        elif z > sz - 1.0:
            z = sz - 1.0
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    z0 = int(np.floor(z))
    fx = x - x0
    fy = y - y0
    fz = z - z0
    a0 = 0.0
    a1 = 0.0
    a2 = 0.0
    for dx in range(2):
        xi = x0 + dx
        if xi < 0 or xi >= sx:
            continue
        wx = fx if dx == 1 else 1.0 - fx
        for dy in range(2):
            yj = y0 + dy
            if yj < 0 or yj >= sy:
                continue
            wy = fy if dy == 1 else 1.0 - fy
            for dz in range(2):
                zk = z0 + dz
                if zk < 0 or zk >= sz:
                    continue
                w = wx * wy * (fz if dz == 1 else 1.0 - fz)
                a0 += w * field[xi, yj, zk, 0]
                a1 += w * field[xi, yj, zk, 1]
                a2 += w * field[xi, yj, zk, 2]
    return a0, a1, a2


@njit(cache=True)
def _nearest(src, x, y, z):
    # floor(x + 0.5): deterministic half-up ties, unlike round-half-even
    xi = int(np.floor(x + 0.5))
    yj = int(np.floor(y + 0.5))
    zk = int(np.floor(z + 0.5))
    sx, sy, sz = src.shape
    if xi < 0 or xi >= sx or yj < 0 or yj >= sy or zk < 0 or zk >= sz:
        return 0
    return src[xi, yj, zk]


@njit(cache=True)
def affine_trilinear(src, m, out, mode):
    nx, ny, nz = out.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x = m[0, 0] * i + m[0, 1] * j + m[0, 2] * k + m[0, 3]
                y = m[1, 0] * i + m[1, 1] * j + m[1, 2] * k + m[1, 3]
                z = m[2, 0] * i + m[2, 1] * j + m[2, 2] * k + m[2, 3]
                out[i, j, k] = _tri(src, x, y, z, mode)


@njit(cache=True)
def affine_nearest(src, m, out):
    nx, ny, nz = out.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x = m[0, 0] * i + m[0, 1] * j + m[0, 2] * k + m[0, 3]
                y = m[1, 0] * i + m[1, 1] * j + m[1, 2] * k + m[1, 3]
                z = m[2, 0] * i + m[2, 1] * j + m[2, 2] * k + m[2, 3]
                out[i, j, k] = _nearest(src, x, y, z)


@njit(cache=True)
def points_trilinear(src, pts, out, mode):
    for n in range(pts.shape[0]):
        out[n] = _tri(src, pts[n, 0], pts[n, 1], pts[n, 2], mode)


@njit(cache=True)
def points_nearest(src, pts, out):
    for n in range(pts.shape[0]):
        out[n] = _nearest(src, pts[n, 0], pts[n, 1], pts[n, 2])


@njit(cache=True)
def warp_trilinear(src, disp, m_src, m_disp, ainv_src, out):
    """out[v] = src sampled at M_src v + Ainv_src @ disp(M_disp v).

    disp holds world-mm vectors on its own grid; it is sampled trilinearly
    with zero padding (no displacement outside its support).
    """
    nx, ny, nz = out.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                dx_ = m_disp[0, 0] * i + m_disp[0, 1] * j + m_disp[0, 2] * k + m_disp[0, 3]
                dy_ = m_disp[1, 0] * i + m_disp[1, 1] * j + m_disp[1, 2] * k + m_disp[1, 3]
                dz_ = m_disp[2, 0] * i + m_disp[2, 1] * j + m_disp[2, 2] * k + m_disp[2, 3]
                d0, d1, d2 = _tri_vec(disp, dx_, dy_, dz_, MODE_ZERO)
                x = (m_src[0, 0] * i + m_src[0, 1] * j + m_src[0, 2] * k + m_src[0, 3]
                     + ainv_src[0, 0] * d0 + ainv_src[0, 1] * d1 + ainv_src[0, 2] * d2)
                y = (m_src[1, 0] * i + m_src[1, 1] * j + m_src[1, 2] * k + m_src[1, 3]
                     + ainv_src[1, 0] * d0 + ainv_src[1, 1] * d1 + ainv_src[1, 2] * d2)
                z = (m_src[2, 0] * i + m_src[2, 1] * j + m_src[2, 2] * k + m_src[2, 3]
                     + ainv_src[2, 0] * d0 + ainv_src[2, 1] * d1 + ainv_src[2, 2] * d2)
                out[i, j, k] = _tri(src, x, y, z, MODE_ZERO)


@njit(cache=True)
def warp_nearest(src, disp, m_src, m_disp, ainv_src, out):
    nx, ny, nz = out.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                dx_ = m_disp[0, 0] * i + m_disp[0, 1] * j + m_disp[0, 2] * k + m_disp[0, 3]
                dy_ = m_disp[1, 0] * i + m_disp[1, 1] * j + m_disp[1, 2] * k + m_disp[1, 3]
                dz_ = m_disp[2, 0] * i + m_disp[2, 1] * j + m_disp[2, 2] * k + m_disp[2, 3]
                d0, d1, d2 = _tri_vec(disp, dx_, dy_, dz_, MODE_ZERO)
                x = (m_src[0, 0] * i + m_src[0, 1] * j + m_src[0, 2] * k + m_src[0, 3]
                     + ainv_src[0, 0] * d0 + ainv_src[0, 1] * d1 + ainv_src[0, 2] * d2)
                y = (m_src[1, 0] * i + m_src[1, 1] * j + m_src[1, 2] * k + m_src[1, 3]
                     + ainv_src[1, 0] * d0 + ainv_src[1, 1] * d1 + ainv_src[1, 2] * d2)
                z = (m_src[2, 0] * i + m_src[2, 1] * j + m_src[2, 2] * k + m_src[2, 3]
                     + ainv_src[2, 0] * d0 + ainv_src[2, 1] * d1 + ainv_src[2, 2] * d2)
                out[i, j, k] = _nearest(src, x, y, z)


@njit(cache=True)
def disp_compose(p, q, ainv_lin, out):
    """Displacement of (id+p) o (id+q): out(v) = q[v] + p(v + Ainv q[v]).

    Border-clamped sampling of p keeps constant fields exactly constant.
    """
    nx, ny, nz = out.shape[0], out.shape[1], out.shape[2]
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                q0 = q[i, j, k, 0]
                q1 = q[i, j, k, 1]
                q2 = q[i, j, k, 2]
                x = i + ainv_lin[0, 0] * q0 + ainv_lin[0, 1] * q1 + ainv_lin[0, 2] * q2
                y = j + ainv_lin[1, 0] * q0 + ainv_lin[1, 1] * q1 + ainv_lin[1, 2] * q2
                z = k + ainv_lin[2, 0] * q0 + ainv_lin[2, 1] * q1 + ainv_lin[2, 2] * q2
                p0, p1, p2 = _tri_vec(p, x, y, z, MODE_CLAMP)
                out[i, j, k, 0] = q0 + p0
                out[i, j, k, 1] = q1 + p1
                out[i, j, k, 2] = q2 + p2


@njit(cache=True)
def joint_hist_pv(a, b, bins):
    """Partial-volume joint histogram of two flat arrays scaled to [0, bins-1].

    Each sample spreads bilinearly over the 2x2 neighbouring bins, so the
    histogram (and entropies downstream) vary smoothly with intensity.
    """
    hist = np.zeros((bins, bins), dtype=np.float64)
    for n in range(a.shape[0]):
        x = a[n]
        y = b[n]
        if x < 0.0:
            x = 0.0
        elif x > bins - 1.0:
            x = bins - 1.0
        if y < 0.0:
            y = 0.0
        elif y > bins - 1.0:
            y = bins - 1.0
        i0 = int(np.floor(x))
        j0 = int(np.floor(y))
        if i0 > bins - 2:
            i0 = bins - 2
        if j0 > bins - 2:
            j0 = bins - 2
        fx = x - i0
        fy = y - j0
        hist[i0, j0] += (1.0 - fx) * (1.0 - fy)
        hist[i0 + 1, j0] += fx * (1.0 - fy)
        hist[i0, j0 + 1] += (1.0 - fx) * fy
        hist[i0 + 1, j0 + 1] += fx * fy
    return hist
