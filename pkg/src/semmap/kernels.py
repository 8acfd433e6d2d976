"""Hot numeric kernels: TSDF integration, semantic fusion, raycasting and
the ICP normal-equation accumulation.

Each kernel has two implementations: a numba @njit loop version and a
vectorized pure-numpy fallback. The fallback is selected by setting the
environment variable SEMMAP_NO_NUMBA=1 before import (or when numba is
not installed). Both paths compute the same quantities; floating-point
summation order may differ, so cross-path comparisons are tolerance
based, while each individual path is bitwise deterministic.

benchmarks/bench_kernels.py compares the two paths.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("SEMMAP_NO_NUMBA", "0").lower()
USE_NUMBA = _flag not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# TSDF integration

def _integrate_numpy(tsdf, weight, origin, voxel_size, depth, obs_weight,
                     fx, fy, cx, cy, r_wc, t_wc, trunc, w_max):
    nx, ny, nz = tsdf.shape
    h, w = depth.shape
    ix = np.arange(nx)
    iy = np.arange(ny)
    iz = np.arange(nz)
    # chunk over x-slabs to bound transient memory on large grids
    for x0 in range(0, nx, 32):
        x1 = min(x0 + 32, nx)
        gx, gy, gz = np.meshgrid(ix[x0:x1], iy, iz, indexing="ij")
        pw = np.stack([gx, gy, gz], axis=-1) * voxel_size + origin
        pc = pw @ r_wc.T + t_wc
        z = pc[..., 2]
        ok = z > 1e-6
        u = np.full(z.shape, -1, dtype=np.int64)
        v = np.full(z.shape, -1, dtype=np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            u[ok] = np.rint(fx * pc[..., 0][ok] / z[ok] + cx).astype(np.int64)
            v[ok] = np.rint(fy * pc[..., 1][ok] / z[ok] + cy).astype(np.int64)
        ok &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
        d = np.zeros(z.shape)
        ow = np.zeros(z.shape)
        d[ok] = depth[v[ok], u[ok]]
        ow[ok] = obs_weight[v[ok], u[ok]]
        ok &= (d > 0) & (ow > 0)
        sdf = d - z
        ok &= sdf > -trunc
        tn = np.clip(sdf / trunc, -1.0, 1.0)
        sl_t = tsdf[x0:x1]
        sl_w = weight[x0:x1]
        wv = sl_w.copy()
        sl_t[ok] = (wv[ok] * sl_t[ok] + ow[ok] * tn[ok]) / (wv[ok] + ow[ok])
        sl_w[ok] = np.minimum(wv[ok] + ow[ok], w_max)


def _fuse_probs_numpy(tsdf, weight, probs, sem_weight, origin, voxel_size,
                      depth, fx, fy, cx, cy, r_wc, t_wc, trunc, w_max, prob_map):
    nx, ny, nz = tsdf.shape
    h, w = depth.shape
    iy = np.arange(ny)
    iz = np.arange(nz)
    for x0 in range(0, nx, 32):
        x1 = min(x0 + 32, nx)
        gx, gy, gz = np.meshgrid(np.arange(x0, x1), iy, iz, indexing="ij")
        pw = np.stack([gx, gy, gz], axis=-1) * voxel_size + origin
        pc = pw @ r_wc.T + t_wc
        z = pc[..., 2]
        ok = z > 1e-6
        u = np.full(z.shape, -1, dtype=np.int64)
        v = np.full(z.shape, -1, dtype=np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            u[ok] = np.rint(fx * pc[..., 0][ok] / z[ok] + cx).astype(np.int64)
            v[ok] = np.rint(fy * pc[..., 1][ok] / z[ok] + cy).astype(np.int64)
        ok &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
        d = np.zeros(z.shape)
        d[ok] = depth[v[ok], u[ok]]
        ok &= d > 0
        sdf = d - z
        ok &= np.abs(sdf) < trunc
        if not ok.any():
            continue
        obs = prob_map[v[ok], u[ok]]                     # (K, C)
        ws = sem_weight[x0:x1][ok][:, None]
        new = (ws * probs[x0:x1][ok] + obs) / (ws + 1.0)
        new /= new.sum(axis=1, keepdims=True)
        probs[x0:x1][ok] = new
        sem_weight[x0:x1][ok] = np.minimum(ws[:, 0] + 1.0, w_max)


def _trilinear_numpy(tsdf, weight, pts):
    """Trilinear TSDF sample at continuous voxel coordinates pts (N, 3).

    Returns (values, valid); samples touching the border or any
    unobserved corner voxel are invalid.
    """
    nx, ny, nz = tsdf.shape
    p0 = np.floor(pts).astype(np.int64)
    frac = pts - p0
    valid = (
        (p0[:, 0] >= 0) & (p0[:, 0] + 1 < nx)
        & (p0[:, 1] >= 0) & (p0[:, 1] + 1 < ny)
        & (p0[:, 2] >= 0) & (p0[:, 2] + 1 < nz)
    )
    p0c = np.clip(p0, 0, [nx - 2, ny - 2, nz - 2])
    val = np.zeros(len(pts))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix, iy, iz = p0c[:, 0] + dx, p0c[:, 1] + dy, p0c[:, 2] + dz
                wgt = (
                    (frac[:, 0] if dx else 1 - frac[:, 0])
                    * (frac[:, 1] if dy else 1 - frac[:, 1])
                    * (frac[:, 2] if dz else 1 - frac[:, 2])
                )
                val += wgt * tsdf[ix, iy, iz]
                valid &= weight[ix, iy, iz] > 0
    return val, valid


def _raycast_numpy(tsdf, weight, origin, voxel_size, r_cw, t_cw,
                   fx, fy, cx, cy, h, w, trunc, near, far):
    vpix, upix = np.mgrid[0:h, 0:w]
    dirs_cam = np.stack(
        [(upix - cx) / fx, (vpix - cy) / fy, np.ones((h, w))], axis=-1
    ).reshape(-1, 3)
    dirs = dirs_cam @ r_cw.T                              # ray param == camera z
    o = (t_cw - origin) / voxel_size
    dirs_vox = dirs / voxel_size

    n = h * w
    step = 0.5 * trunc
    t = np.full(n, near)
    prev_val = np.zeros(n)
    prev_ok = np.zeros(n, dtype=bool)
    hit_t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    while active.any():
        pts = o + t[:, None] * dirs_vox
        val, ok = _trilinear_numpy(tsdf, weight, pts)
        cross = active & prev_ok & ok & (prev_val > 0) & (val < 0)
        if cross.any():
            frac = prev_val[cross] / (prev_val[cross] - val[cross])
            hit_t[cross] = t[cross] - step + frac * step
            hit[cross] = True
            active[cross] = False
        prev_val, prev_ok = val, ok
        t = t + step * active
        active &= t <= far

    depth_map = np.where(hit, hit_t, 0.0).reshape(h, w)
    vertex = (t_cw + hit_t[:, None] * dirs).reshape(h, w, 3)

    normal = np.zeros((n, 3))
    if hit.any():
        p = (o + hit_t[hit, None] * dirs_vox[hit])
        grad = np.zeros((len(p), 3))
        gvalid = np.ones(len(p), dtype=bool)
        for ax in range(3):
            off = np.zeros(3)
            off[ax] = 2.0   # 2-voxel stencil smooths interpolation noise
            vp, okp = _trilinear_numpy(tsdf, weight, p + off)
            vm, okm = _trilinear_numpy(tsdf, weight, p - off)
            grad[:, ax] = vp - vm
            gvalid &= okp & okm
        nrm = np.linalg.norm(grad, axis=1)
        gvalid &= nrm > 1e-12
        grad = np.where(gvalid[:, None], grad / np.maximum(nrm, 1e-12)[:, None], 0.0)
        # gradient points from inside to outside, i.e. toward the camera side
        flip = np.sum(grad * dirs[hit], axis=1) > 0
        grad[flip] *= -1.0
        normal[hit] = grad
    normal = normal.reshape(h, w, 3)
    vertex[depth_map == 0] = 0.0
    return depth_map.astype(np.float64), vertex, normal


def _icp_build_numpy(src_pts, src_normals, r, t, model_vertex, model_normal,
                     model_valid, r_mc, t_mc, fx, fy, cx, cy,
                     dist_thresh, cos_thresh):
    h, w = model_valid.shape
    xw = src_pts @ r.T + t
    nw = src_normals @ r.T
    pc = xw @ r_mc.T + t_mc
    z = pc[:, 2]
    ok = z > 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(fx * pc[:, 0] / z + cx).astype(np.int64)
        v = np.rint(fy * pc[:, 1] / z + cy).astype(np.int64)
    u[~ok] = -1
    v[~ok] = -1
    ok &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    ok &= model_valid[vc, uc]
    q = model_vertex[vc, uc]
    nq = model_normal[vc, uc]
    diff = xw - q
    ok &= np.linalg.norm(diff, axis=1) < dist_thresh
    ok &= np.sum(nw * nq, axis=1) > cos_thresh
    if not ok.any():
        return np.zeros((6, 6)), np.zeros(6), 0, 0.0
    xo, no, do = xw[ok], nq[ok], diff[ok]
    resid = np.sum(do * no, axis=1)
    jac = np.concatenate([np.cross(xo, no), no], axis=1)   # (K, 6)
    a = jac.T @ jac
    b = jac.T @ resid
    return a, b, int(ok.sum()), float(np.sum(resid * resid))


if USE_NUMBA:

    @njit(cache=True)
    def _integrate_numba(tsdf, weight, origin, voxel_size, depth, obs_weight,
                         fx, fy, cx, cy, r_wc, t_wc, trunc, w_max):
        nx, ny, nz = tsdf.shape
        h, w = depth.shape
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    px = origin[0] + ix * voxel_size
                    py = origin[1] + iy * voxel_size
                    pz = origin[2] + iz * voxel_size
                    x = r_wc[0, 0] * px + r_wc[0, 1] * py + r_wc[0, 2] * pz + t_wc[0]
                    y = r_wc[1, 0] * px + r_wc[1, 1] * py + r_wc[1, 2] * pz + t_wc[1]
                    z = r_wc[2, 0] * px + r_wc[2, 1] * py + r_wc[2, 2] * pz + t_wc[2]
                    if z <= 1e-6:
                        continue
                    u = int(round(fx * x / z + cx))
                    v = int(round(fy * y / z + cy))
                    if u < 0 or u >= w or v < 0 or v >= h:
                        continue
                    d = depth[v, u]
                    ow = obs_weight[v, u]
                    if d <= 0 or ow <= 0:
                        continue
                    sdf = d - z
                    if sdf <= -trunc:
                        continue
                    tn = sdf / trunc
                    if tn > 1.0:
                        tn = 1.0
                    elif tn < -1.0:
                        tn = -1.0
                    wv = weight[ix, iy, iz]
                    tsdf[ix, iy, iz] = (wv * tsdf[ix, iy, iz] + ow * tn) / (wv + ow)
                    weight[ix, iy, iz] = min(wv + ow, w_max)

    @njit(cache=True)
    def _fuse_probs_numba(tsdf, weight, probs, sem_weight, origin, voxel_size,
                          depth, fx, fy, cx, cy, r_wc, t_wc, trunc, w_max, prob_map):
        nx, ny, nz = tsdf.shape
        h, w = depth.shape
        nc = prob_map.shape[2]
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    px = origin[0] + ix * voxel_size
                    py = origin[1] + iy * voxel_size
                    pz = origin[2] + iz * voxel_size
                    x = r_wc[0, 0] * px + r_wc[0, 1] * py + r_wc[0, 2] * pz + t_wc[0]
                    y = r_wc[1, 0] * px + r_wc[1, 1] * py + r_wc[1, 2] * pz + t_wc[1]
                    z = r_wc[2, 0] * px + r_wc[2, 1] * py + r_wc[2, 2] * pz + t_wc[2]
                    if z <= 1e-6:
                        continue
                    u = int(round(fx * x / z + cx))
                    v = int(round(fy * y / z + cy))
                    if u < 0 or u >= w or v < 0 or v >= h:
                        continue
                    d = depth[v, u]
                    if d <= 0:
                        continue
                    sdf = d - z
                    if sdf <= -trunc or sdf >= trunc:
                        continue
                    ws = sem_weight[ix, iy, iz]
                    total = 0.0
                    for c in range(nc):
                        pv = (ws * probs[ix, iy, iz, c] + prob_map[v, u, c]) / (ws + 1.0)
                        probs[ix, iy, iz, c] = pv
                        total += pv
                    for c in range(nc):
                        probs[ix, iy, iz, c] /= total
                    sem_weight[ix, iy, iz] = min(ws + 1.0, w_max)

    @njit(cache=True)
    def _trilinear_numba(tsdf, weight, x, y, z):
        nx, ny, nz = tsdf.shape
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        z0 = int(np.floor(z))
        if x0 < 0 or x0 + 1 >= nx or y0 < 0 or y0 + 1 >= ny or z0 < 0 or z0 + 1 >= nz:
            return 0.0, False
        fx_ = x - x0
        fy_ = y - y0
        fz_ = z - z0
        val = 0.0
        for dx in range(2):
            wx = fx_ if dx == 1 else 1.0 - fx_
            for dy in range(2):
                wy = fy_ if dy == 1 else 1.0 - fy_
                for dz in range(2):
                    wz = fz_ if dz == 1 else 1.0 - fz_
                    if weight[x0 + dx, y0 + dy, z0 + dz] <= 0:
                        return 0.0, False
                    val += wx * wy * wz * tsdf[x0 + dx, y0 + dy, z0 + dz]
        return val, True

    @njit(cache=True)
    def _raycast_numba(tsdf, weight, origin, voxel_size, r_cw, t_cw,
                       fx, fy, cx, cy, h, w, trunc, near, far):
        depth_map = np.zeros((h, w))
        vertex = np.zeros((h, w, 3))
        normal = np.zeros((h, w, 3))
        step = 0.5 * trunc
        for v in range(h):
            for u in range(w):
                dcx = (u - cx) / fx
                dcy = (v - cy) / fy
                dx = r_cw[0, 0] * dcx + r_cw[0, 1] * dcy + r_cw[0, 2]
                dy = r_cw[1, 0] * dcx + r_cw[1, 1] * dcy + r_cw[1, 2]
                dz = r_cw[2, 0] * dcx + r_cw[2, 1] * dcy + r_cw[2, 2]
                t = near
                prev_val = 0.0
                prev_ok = False
                hit_t = -1.0
                while t <= far:
                    gx = (t_cw[0] + t * dx - origin[0]) / voxel_size
                    gy = (t_cw[1] + t * dy - origin[1]) / voxel_size
                    gz = (t_cw[2] + t * dz - origin[2]) / voxel_size
                    val, ok = _trilinear_numba(tsdf, weight, gx, gy, gz)
                    if prev_ok and ok and prev_val > 0 and val < 0:
                        frac = prev_val / (prev_val - val)
                        hit_t = t - step + frac * step
                        break
                    prev_val = val
                    prev_ok = ok
                    t += step
                if hit_t < 0:
                    continue
                depth_map[v, u] = hit_t
                vertex[v, u, 0] = t_cw[0] + hit_t * dx
                vertex[v, u, 1] = t_cw[1] + hit_t * dy
                vertex[v, u, 2] = t_cw[2] + hit_t * dz
                gx = (vertex[v, u, 0] - origin[0]) / voxel_size
                gy = (vertex[v, u, 1] - origin[1]) / voxel_size
                gz = (vertex[v, u, 2] - origin[2]) / voxel_size
                vxp, okxp = _trilinear_numba(tsdf, weight, gx + 2.0, gy, gz)
                vxm, okxm = _trilinear_numba(tsdf, weight, gx - 2.0, gy, gz)
                vyp, okyp = _trilinear_numba(tsdf, weight, gx, gy + 2.0, gz)
                vym, okym = _trilinear_numba(tsdf, weight, gx, gy - 2.0, gz)
                vzp, okzp = _trilinear_numba(tsdf, weight, gx, gy, gz + 2.0)
                vzm, okzm = _trilinear_numba(tsdf, weight, gx, gy, gz - 2.0)
                if not (okxp and okxm and okyp and okym and okzp and okzm):
                    continue
                nxg = vxp - vxm
                nyg = vyp - vym
                nzg = vzp - vzm
                nrm = np.sqrt(nxg * nxg + nyg * nyg + nzg * nzg)
                if nrm <= 1e-12:
                    continue
                nxg /= nrm
                nyg /= nrm
                nzg /= nrm
                if nxg * dx + nyg * dy + nzg * dz > 0:
                    nxg, nyg, nzg = -nxg, -nyg, -nzg
                normal[v, u, 0] = nxg
                normal[v, u, 1] = nyg
                normal[v, u, 2] = nzg
        return depth_map, vertex, normal

    @njit(cache=True)
    def _icp_build_numba(src_pts, src_normals, r, t, model_vertex, model_normal,
                         model_valid, r_mc, t_mc, fx, fy, cx, cy,
                         dist_thresh, cos_thresh):
        h, w = model_valid.shape
        a = np.zeros((6, 6))
        b = np.zeros(6)
        count = 0
        sq_err = 0.0
        jac = np.zeros(6)
        for k in range(src_pts.shape[0]):
            px, py, pz = src_pts[k, 0], src_pts[k, 1], src_pts[k, 2]
            xw0 = r[0, 0] * px + r[0, 1] * py + r[0, 2] * pz + t[0]
            xw1 = r[1, 0] * px + r[1, 1] * py + r[1, 2] * pz + t[1]
            xw2 = r[2, 0] * px + r[2, 1] * py + r[2, 2] * pz + t[2]
            cx0 = r_mc[0, 0] * xw0 + r_mc[0, 1] * xw1 + r_mc[0, 2] * xw2 + t_mc[0]
            cx1 = r_mc[1, 0] * xw0 + r_mc[1, 1] * xw1 + r_mc[1, 2] * xw2 + t_mc[1]
            cx2 = r_mc[2, 0] * xw0 + r_mc[2, 1] * xw1 + r_mc[2, 2] * xw2 + t_mc[2]
            if cx2 <= 1e-6:
                continue
            u = int(round(fx * cx0 / cx2 + cx))
            v = int(round(fy * cx1 / cx2 + cy))
            if u < 0 or u >= w or v < 0 or v >= h:
                continue
            if not model_valid[v, u]:
                continue
            qx, qy, qz = model_vertex[v, u, 0], model_vertex[v, u, 1], model_vertex[v, u, 2]
            nx_, ny_, nz_ = model_normal[v, u, 0], model_normal[v, u, 1], model_normal[v, u, 2]
            dx0, dx1, dx2 = xw0 - qx, xw1 - qy, xw2 - qz
            if np.sqrt(dx0 * dx0 + dx1 * dx1 + dx2 * dx2) >= dist_thresh:
                continue
            sx, sy, sz = src_normals[k, 0], src_normals[k, 1], src_normals[k, 2]
            nw0 = r[0, 0] * sx + r[0, 1] * sy + r[0, 2] * sz
            nw1 = r[1, 0] * sx + r[1, 1] * sy + r[1, 2] * sz
            nw2 = r[2, 0] * sx + r[2, 1] * sy + r[2, 2] * sz
            if nw0 * nx_ + nw1 * ny_ + nw2 * nz_ <= cos_thresh:
                continue
            resid = dx0 * nx_ + dx1 * ny_ + dx2 * nz_
            jac[0] = xw1 * nz_ - xw2 * ny_
            jac[1] = xw2 * nx_ - xw0 * nz_
            jac[2] = xw0 * ny_ - xw1 * nx_
            jac[3] = nx_
            jac[4] = ny_
            jac[5] = nz_
            for i in range(6):
                b[i] += jac[i] * resid
                for j in range(6):
                    a[i, j] += jac[i] * jac[j]
            count += 1
            sq_err += resid * resid
        return a, b, count, sq_err


def integrate_tsdf(tsdf, weight, origin, voxel_size, depth, intr_arr,
                   r_wc, t_wc, trunc, w_max, obs_weight=None):
    """In-place TSDF running-average update from one depth frame.

    obs_weight is an optional (H, W) per-pixel observation weight (e.g.
    incidence-angle confidence); pixels with weight <= 0 are skipped.
    """
    fx, fy, cx, cy = intr_arr
    if obs_weight is None:
        obs_weight = np.ones_like(depth, dtype=np.float64)
    args = (tsdf, weight, np.asarray(origin, dtype=np.float64), float(voxel_size),
            np.ascontiguousarray(depth, dtype=np.float64),
            np.ascontiguousarray(obs_weight, dtype=np.float64), float(fx), float(fy),
            float(cx), float(cy), np.ascontiguousarray(r_wc),
            np.ascontiguousarray(t_wc), float(trunc), float(w_max))
    if USE_NUMBA:
        _integrate_numba(*args)
    else:
        _integrate_numpy(*args)


def fuse_class_probs(tsdf, weight, probs, sem_weight, origin, voxel_size, depth,
                     intr_arr, r_wc, t_wc, trunc, w_max, prob_map):
    """In-place running-average update of per-voxel class probabilities.

    prob_map is (H, W, C), normalized per pixel; only voxels within the
    truncation band of the current depth are touched.
    """
    fx, fy, cx, cy = intr_arr
    args = (tsdf, weight, probs, sem_weight, np.asarray(origin, dtype=np.float64),
            float(voxel_size), np.ascontiguousarray(depth, dtype=np.float64),
            float(fx), float(fy), float(cx), float(cy), np.ascontiguousarray(r_wc),
            np.ascontiguousarray(t_wc), float(trunc), float(w_max),
            np.ascontiguousarray(prob_map, dtype=np.float64))
    if USE_NUMBA:
        _fuse_probs_numba(*args)
    else:
        _fuse_probs_numpy(*args)


def raycast_tsdf(tsdf, weight, origin, voxel_size, r_cw, t_cw, intr_arr,
                 height, width, trunc, near=0.1, far=5.0):
    """March camera rays to the first +/- zero crossing of the TSDF.

    Returns (depth (H, W) camera z in meters, vertex (H, W, 3) world,
    normal (H, W, 3) world). Missed rays have depth 0.
    """
    fx, fy, cx, cy = intr_arr
    args = (tsdf, weight, np.asarray(origin, dtype=np.float64), float(voxel_size),
            np.ascontiguousarray(r_cw), np.ascontiguousarray(t_cw),
            float(fx), float(fy), float(cx), float(cy), int(height), int(width),
            float(trunc), float(near), float(far))
    if USE_NUMBA:
        return _raycast_numba(*args)
    return _raycast_numpy(*args)


def icp_normal_equations(src_pts, src_normals, r, t, model_vertex, model_normal,
                         model_valid, r_mc, t_mc, intr_arr, dist_thresh, cos_thresh):
    """Accumulate the 6x6 point-to-plane Gauss-Newton system.

    src_pts/src_normals are camera-frame points of the current depth frame;
    (r, t) is the current camera-to-world estimate; the model maps come
    from raycasting at the previous pose, with (r_mc, t_mc) the
    world-to-model-camera transform for projective correspondence lookup.
    Returns (A, b, num_correspondences, squared_error).
    """
    fx, fy, cx, cy = intr_arr
    args = (np.ascontiguousarray(src_pts), np.ascontiguousarray(src_normals),
            np.ascontiguousarray(r), np.ascontiguousarray(t),
            np.ascontiguousarray(model_vertex), np.ascontiguousarray(model_normal),
            np.ascontiguousarray(model_valid), np.ascontiguousarray(r_mc),
            np.ascontiguousarray(t_mc), float(fx), float(fy), float(cx), float(cy),
            float(dist_thresh), float(cos_thresh))
    if USE_NUMBA:
        return _icp_build_numba(*args)
    return _icp_build_numpy(*args)
