"""Axis-aligned bounding-volume hierarchy and the numba ray kernels.

The hierarchy is built once per scene in plain numpy and flattened into
arrays; traversal, the watertight ray/triangle test and the multi-bounce
path walk are compiled with numba (``nogil`` so a thread pool can split a
ray grid across workers).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

T_MIN = 1e-6
LEAF_SIZE = 4
STACK_SIZE = 128


@dataclass(frozen=True)
class BVH:
    node_min: np.ndarray   # (nodes, 3)
    node_max: np.ndarray   # (nodes, 3)
    node_left: np.ndarray  # child index, -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray  # leaves: first slot into ``tri_vertices``
    node_count: np.ndarray
    tri_vertices: np.ndarray  # (n, 3, 3) in leaf order
    tri_ids: np.ndarray       # mesh id of each slot
    n_meshes: int

    @property
    def empty(self) -> bool:
        return self.n_meshes == 0


def build_bvh(vertices: np.ndarray, leaf_size: int = LEAF_SIZE) -> BVH:
    """Median split on the widest centroid axis until ``leaf_size``."""
    vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3, 3)
    n = len(vertices)
    if n == 0:
        z3 = np.zeros((1, 3))
        neg = -np.ones(1, dtype=np.int64)
        return BVH(z3, z3, neg, neg, np.zeros(1, np.int64), np.zeros(1, np.int64),
                   np.zeros((0, 3, 3)), np.zeros(0, np.int64), 0)
    lo = vertices.min(axis=1)
    hi = vertices.max(axis=1)
    centroids = vertices.mean(axis=1)
    order = np.arange(n)
    node_min, node_max, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        node_min.append(lo[idx].min(axis=0))
        node_max.append(hi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(left) - 1

    stack = [(new_node(0, n), 0, n)]
    while stack:
        node, s, e = stack.pop()
        if e - s <= leaf_size:
            continue
        c = centroids[order[s:e]]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        perm = np.argsort(c[:, axis], kind="stable")
        order[s:e] = order[s:e][perm]
        mid = s + (e - s) // 2
        l_node = new_node(s, mid)
        r_node = new_node(mid, e)
        left[node], right[node] = l_node, r_node
        count[node] = 0
        stack.append((r_node, mid, e))
        stack.append((l_node, s, mid))

    return BVH(np.array(node_min), np.array(node_max),
               np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
               np.array(start, dtype=np.int64), np.array(count, dtype=np.int64),
               np.ascontiguousarray(vertices[order]), order.astype(np.int64), n)


_jit = numba.njit(cache=True, nogil=True, error_model="numpy", fastmath=False)


@_jit
def _ray_box(ox, oy, oz, ix, iy, iz, bmin, bmax, tmax):
    t0 = 0.0
    t1 = tmax
    for a in range(3):
        if a == 0:
            o, inv = ox, ix
        elif a == 1:
            o, inv = oy, iy
        else:
            o, inv = oz, iz
        ta = (bmin[a] - o) * inv
        tb = (bmax[a] - o) * inv
        if ta > tb:
            ta, tb = tb, ta
        # NaN (0 * inf) means the ray lies in the slab plane: keep interval
        if ta == ta and ta > t0:
            t0 = ta
        if tb == tb and tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@_jit
def _watertight(org, kx, ky, kz, sx, sy, sz, v0, v1, v2, tmax):
    """Woop/Benthin/Wald watertight test; returns t or -1."""
    ax = v0[kx] - org[kx]
    ay = v0[ky] - org[ky]
    az = v0[kz] - org[kz]
    bx = v1[kx] - org[kx]
    by = v1[ky] - org[ky]
    bz = v1[kz] - org[kz]
    cx = v2[kx] - org[kx]
    cy = v2[ky] - org[ky]
    cz = v2[kz] - org[kz]
    ax = ax - sx * az
    ay = ay - sy * az
    bx = bx - sx * bz
    by = by - sy * bz
    cx = cx - sx * cz
    cy = cy - sy * cz
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return -1.0
    det = u + v + w
    if det == 0.0:
        return -1.0
    t = (u * sz * az + v * sz * bz + w * sz * cz) / det
    if t > T_MIN and t < tmax:
        return t
    return -1.0


@_jit
def _shear(d):
    ax, ay, az = abs(d[0]), abs(d[1]), abs(d[2])
    kz = 0
    if ay > ax and ay >= az:
        kz = 1
    elif az > ax and az > ay:
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0.0:
        kx, ky = ky, kx
    return kx, ky, kz, d[kx] / d[kz], d[ky] / d[kz], 1.0 / d[kz]


@_jit
def closest_hit(org, d, node_min, node_max, node_left, node_right, node_start, node_count,
                tri_vertices, tri_ids, ground_extent, ground_id, any_hit):
    """Nearest intersection along ``org + t d`` (t > T_MIN).

    Returns ``(t, mesh_id)``; ``mesh_id == ground_id`` for the ground square
    and -1 for a miss. With ``any_hit`` the first found hit is returned.
    """
    best_t = math.inf
    best_id = -1
    if ground_extent > 0.0 and d[2] != 0.0:
        tg = -org[2] / d[2]
        if tg > T_MIN:
            gx = org[0] + tg * d[0]
            gy = org[1] + tg * d[1]
            if abs(gx) <= ground_extent and abs(gy) <= ground_extent:
                best_t = tg
                best_id = ground_id
                if any_hit:
                    return best_t, best_id
    if tri_vertices.shape[0] == 0:
        return best_t, best_id
    kx, ky, kz, sx, sy, sz = _shear(d)
    ix = 1.0 / d[0]
    iy = 1.0 / d[1]
    iz = 1.0 / d[2]
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if not _ray_box(org[0], org[1], org[2], ix, iy, iz, node_min[node], node_max[node], best_t):
            continue
        if node_left[node] < 0:
            s = node_start[node]
            for slot in range(s, s + node_count[node]):
                t = _watertight(org, kx, ky, kz, sx, sy, sz, tri_vertices[slot, 0],
                                tri_vertices[slot, 1], tri_vertices[slot, 2], best_t)
                if t > 0.0:
                    mid = tri_ids[slot]
                    # equal distances resolve to the lowest mesh id
                    if t < best_t or (t == best_t and mid < best_id):
                        best_t = t
                        best_id = mid
                        if any_hit:
                            return best_t, best_id
        else:
            stack[top] = node_right[node]
            top += 1
            stack[top] = node_left[node]
            top += 1
    return best_t, best_id


@_jit
def trace_paths(origins, direction, to_sensor, max_bounces, cos_tol,
                node_min, node_max, node_left, node_right, node_start, node_count,
                tri_vertices, tri_ids, normals, ground_extent, ground_id,
                out_mesh, out_point, out_seg, out_ndl, out_ndh, out_vis, out_aligned):
    """Walk every ray through up to ``max_bounces`` mirror reflections,
    recording per hit the geometry needed for shading. Parameter-free: the
    result can be shaded with any set of scattering parameters."""
    n_rays = origins.shape[0]
    org = np.empty(3)
    d = np.empty(3)
    nrm = np.empty(3)
    # rays cast from the sensor see their first hit by construction
    monostatic = (direction[0] * to_sensor[0] + direction[1] * to_sensor[1]
                  + direction[2] * to_sensor[2]) <= -1.0 + 1e-12
    for r in range(n_rays):
        for a in range(3):
            org[a] = origins[r, a]
            d[a] = direction[a]
        for k in range(max_bounces):
            t, mid = closest_hit(org, d, node_min, node_max, node_left, node_right, node_start,
                                 node_count, tri_vertices, tri_ids, ground_extent, ground_id, False)
            if mid < 0:
                break
            for a in range(3):
                org[a] = org[a] + t * d[a]
            if mid == ground_id:
                nrm[0] = 0.0
                nrm[1] = 0.0
                nrm[2] = 1.0
            else:
                for a in range(3):
                    nrm[a] = normals[mid, a]
            dn = d[0] * nrm[0] + d[1] * nrm[1] + d[2] * nrm[2]
            if dn > 0.0:
                for a in range(3):
                    nrm[a] = -nrm[a]
                dn = -dn
            out_mesh[r, k] = mid
            out_seg[r, k] = t
            for a in range(3):
                out_point[r, k, a] = org[a]
            ndl = nrm[0] * to_sensor[0] + nrm[1] * to_sensor[1] + nrm[2] * to_sensor[2]
            out_ndl[r, k] = min(max(ndl, 0.0), 1.0)
            # half vector between the reversed incoming ray and the sensor
            hx = to_sensor[0] - d[0]
            hy = to_sensor[1] - d[1]
            hz = to_sensor[2] - d[2]
            hn = math.sqrt(hx * hx + hy * hy + hz * hz)
            if hn > 0.0:
                ndh = (nrm[0] * hx + nrm[1] * hy + nrm[2] * hz) / hn
                out_ndh[r, k] = min(max(ndh, 0.0), 1.0)
            else:
                out_ndh[r, k] = 0.0
            # mirror direction
            for a in range(3):
                d[a] = d[a] - 2.0 * dn * nrm[a]
            dl = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            for a in range(3):
                d[a] = d[a] / dl
            out_aligned[r, k] = (d[0] * to_sensor[0] + d[1] * to_sensor[1] + d[2] * to_sensor[2]) >= cos_tol
            if k == 0 and monostatic:
                out_vis[r, k] = True
            else:
                ts, sid = closest_hit(org, to_sensor, node_min, node_max, node_left, node_right,
                                      node_start, node_count, tri_vertices, tri_ids,
                                      ground_extent, ground_id, True)
                out_vis[r, k] = sid < 0
