"""Numba kernels: priority-flood watershed and geodesic (Dijkstra) distances.

All kernels operate on flat arrays in x-fastest (Fortran) order; the flat
index of voxel (x, y, z) is ``x + nx*y + nx*ny*z``. The heap orders entries
by (priority, insertion counter), so equal priorities pop in insertion order.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _sift_up(hp, hc, hi, j):
    while j > 0:
        parent = (j - 1) >> 1
        if hp[j] < hp[parent] or (hp[j] == hp[parent] and hc[j] < hc[parent]):
            hp[j], hp[parent] = hp[parent], hp[j]
            hc[j], hc[parent] = hc[parent], hc[j]
            hi[j], hi[parent] = hi[parent], hi[j]
            j = parent
        else:
            break


@njit(cache=True)
def _sift_down(hp, hc, hi, size):
    j = 0
    while True:
        left = 2 * j + 1
        if left >= size:
            break
        best = left
        right = left + 1
        if right < size and (hp[right] < hp[left] or (hp[right] == hp[left] and hc[right] < hc[left])):
            best = right
        if hp[best] < hp[j] or (hp[best] == hp[j] and hc[best] < hc[j]):
            hp[j], hp[best] = hp[best], hp[j]
            hc[j], hc[best] = hc[best], hc[j]
            hi[j], hi[best] = hi[best], hi[j]
            j = best
        else:
            break


@njit(cache=True)
def priority_flood(priority, labels, domain, nx, ny, nz, dx, dy, dz, dflat):
    """Grow seed labels over the domain in ascending priority (in place).

    Seeds are the nonzero entries of ``labels``; they are pushed in raster
    order. A voxel is labeled the first time a popped neighbor reaches it.
    """
    n = priority.size
    cap = n + 1
    hp = np.empty(cap, np.float64)
    hc = np.empty(cap, np.int64)
    hi = np.empty(cap, np.int64)
    size = 0
    counter = 0
    for f in range(n):
        if labels[f] > 0 and domain[f]:
            hp[size] = priority[f]
            hc[size] = counter
            hi[size] = f
            _sift_up(hp, hc, hi, size)
            size += 1
            counter += 1
    nk = dflat.size
    while size > 0:
        f = hi[0]
        size -= 1
        hp[0] = hp[size]
        hc[0] = hc[size]
        hi[0] = hi[size]
        _sift_down(hp, hc, hi, size)
        lab = labels[f]
        x = f % nx
        r = f // nx
        y = r % ny
        z = r // ny
        for k in range(nk):
            xx = x + dx[k]
            if xx < 0 or xx >= nx:
                continue
            yy = y + dy[k]
            if yy < 0 or yy >= ny:
                continue
            zz = z + dz[k]
            if zz < 0 or zz >= nz:
                continue
            g = f + dflat[k]
            if domain[g] and labels[g] == 0:
                labels[g] = lab
                hp[size] = priority[g]
                hc[size] = counter
                hi[size] = g
                _sift_up(hp, hc, hi, size)
                size += 1
                counter += 1


@njit(cache=True)
def geodesic_flood(domain, seed_idx, nx, ny, nz, dx, dy, dz, dflat, dw):
    """Multi-source Dijkstra within the domain mask; returns flat distances.

    Edge weights ``dw`` are the Euclidean step lengths of the neighbor
    offsets. Unreachable or out-of-domain voxels stay at +inf.
    """
    n = domain.size
    dist = np.full(n, np.inf)
    cap = 4 * seed_idx.size + 64
    hp = np.empty(cap, np.float64)
    hc = np.empty(cap, np.int64)
    hi = np.empty(cap, np.int64)
    size = 0
    counter = 0
    for s in seed_idx:
        if dist[s] > 0.0:
            dist[s] = 0.0
            hp[size] = 0.0
            hc[size] = counter
            hi[size] = s
            _sift_up(hp, hc, hi, size)
            size += 1
            counter += 1
    nk = dflat.size
    while size > 0:
        p = hp[0]
        f = hi[0]
        size -= 1
        hp[0] = hp[size]
        hc[0] = hc[size]
        hi[0] = hi[size]
        _sift_down(hp, hc, hi, size)
        if p > dist[f]:
            continue
        x = f % nx
        r = f // nx
        y = r % ny
        z = r // ny
        for k in range(nk):
            xx = x + dx[k]
            if xx < 0 or xx >= nx:
                continue
            yy = y + dy[k]
            if yy < 0 or yy >= ny:
                continue
            zz = z + dz[k]
            if zz < 0 or zz >= nz:
                continue
            g = f + dflat[k]
            if not domain[g]:
                continue
            nd = p + dw[k]
            if nd < dist[g]:
                dist[g] = nd
                if size == cap:
                    new_cap = cap * 2
                    nhp = np.empty(new_cap, np.float64)
                    nhc = np.empty(new_cap, np.int64)
                    nhi = np.empty(new_cap, np.int64)
                    nhp[:size] = hp[:size]
                    nhc[:size] = hc[:size]
                    nhi[:size] = hi[:size]
                    hp = nhp
                    hc = nhc
                    hi = nhi
                    cap = new_cap
                hp[size] = nd
                hc[size] = counter
                hi[size] = g
                _sift_up(hp, hc, hi, size)
                size += 1
                counter += 1
    return dist
