"""Serial numba kernels for the trilinear grid hot paths.

Loops are deliberately single-threaded: accumulation order is fixed, so
results are bit-deterministic and immune to thread-count effects. The math
mirrors the generic tape op exactly (clip to bounds, floor, corner-weight
products in the same order).
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, fastmath=False)
def trilinear_fwd(grid, pos, bmin, scale, rx, ry, rz, out):
    m = pos.shape[0]
    nf = grid.shape[1]
    for n in range(m):
        ux = (pos[n, 0] - bmin[0]) * scale[0]
        uy = (pos[n, 1] - bmin[1]) * scale[1]
        uz = (pos[n, 2] - bmin[2]) * scale[2]
        if ux < 0.0:
            ux = 0.0
        elif ux > rx - 1:
            ux = float(rx - 1)
        if uy < 0.0:
            uy = 0.0
        elif uy > ry - 1:
            uy = float(ry - 1)
        if uz < 0.0:
            uz = 0.0
        elif uz > rz - 1:
            uz = float(rz - 1)
        ix = int(ux)
        iy = int(uy)
        iz = int(uz)
        if ix > rx - 2:
            ix = rx - 2
        if iy > ry - 2:
            iy = ry - 2
        if iz > rz - 2:
            iz = rz - 2
        fx = ux - ix
        fy = uy - iy
        fz = uz - iz
        c = (ix * ry + iy) * rz + iz
        w000 = (1.0 - fx) * (1.0 - fy) * (1.0 - fz)
        w001 = (1.0 - fx) * (1.0 - fy) * fz
        w010 = (1.0 - fx) * fy * (1.0 - fz)
        w011 = (1.0 - fx) * fy * fz
        w100 = fx * (1.0 - fy) * (1.0 - fz)
        w101 = fx * (1.0 - fy) * fz
        w110 = fx * fy * (1.0 - fz)
        w111 = fx * fy * fz
        cyz = ry * rz
        for f in range(nf):
            out[n, f] = (
                w000 * grid[c, f]
                + w001 * grid[c + 1, f]
                + w010 * grid[c + rz, f]
                + w011 * grid[c + rz + 1, f]
                + w100 * grid[c + cyz, f]
                + w101 * grid[c + cyz + 1, f]
                + w110 * grid[c + cyz + rz, f]
                + w111 * grid[c + cyz + rz + 1, f]
            )


@nb.njit(cache=True, fastmath=False)
def trilinear_bwd(grid, pos, bmin, scale, rx, ry, rz, dout,
                  need_grid, need_pos, ggrid, gpos):
    """Accumulates grid gradients into ggrid and positional gradients into
    gpos (both pre-zeroed by the caller); serial, fixed order."""
    m = pos.shape[0]
    nf = grid.shape[1]
    for n in range(m):
        ux = (pos[n, 0] - bmin[0]) * scale[0]
        uy = (pos[n, 1] - bmin[1]) * scale[1]
        uz = (pos[n, 2] - bmin[2]) * scale[2]
        inx = 1.0
        iny = 1.0
        inz = 1.0
        if ux < 0.0:
            ux = 0.0
            inx = 0.0
        elif ux > rx - 1:
            ux = float(rx - 1)
            inx = 0.0
        if uy < 0.0:
            uy = 0.0
            iny = 0.0
        elif uy > ry - 1:
            uy = float(ry - 1)
            iny = 0.0
        if uz < 0.0:
            uz = 0.0
            inz = 0.0
        elif uz > rz - 1:
            uz = float(rz - 1)
            inz = 0.0
        ix = int(ux)
        iy = int(uy)
        iz = int(uz)
        if ix > rx - 2:
            ix = rx - 2
        if iy > ry - 2:
            iy = ry - 2
        if iz > rz - 2:
            iz = rz - 2
        fx = ux - ix
        fy = uy - iy
        fz = uz - iz
        c = (ix * ry + iy) * rz + iz
        cyz = ry * rz
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for f in range(nf):
            g = dout[n, f]
            g000 = grid[c, f]
            g001 = grid[c + 1, f]
            g010 = grid[c + rz, f]
            g011 = grid[c + rz + 1, f]
            g100 = grid[c + cyz, f]
            g101 = grid[c + cyz + 1, f]
            g110 = grid[c + cyz + rz, f]
            g111 = grid[c + cyz + rz + 1, f]
            if need_grid:
                ggrid[c, f] += (1.0 - fx) * (1.0 - fy) * (1.0 - fz) * g
                ggrid[c + 1, f] += (1.0 - fx) * (1.0 - fy) * fz * g
                ggrid[c + rz, f] += (1.0 - fx) * fy * (1.0 - fz) * g
                ggrid[c + rz + 1, f] += (1.0 - fx) * fy * fz * g
                ggrid[c + cyz, f] += fx * (1.0 - fy) * (1.0 - fz) * g
                ggrid[c + cyz + 1, f] += fx * (1.0 - fy) * fz * g
                ggrid[c + cyz + rz, f] += fx * fy * (1.0 - fz) * g
                ggrid[c + cyz + rz + 1, f] += fx * fy * fz * g
            if need_pos:
                gx += g * (
                    (1.0 - fy) * (1.0 - fz) * (g100 - g000)
                    + (1.0 - fy) * fz * (g101 - g001)
                    + fy * (1.0 - fz) * (g110 - g010)
                    + fy * fz * (g111 - g011)
                )
                gy += g * (
                    (1.0 - fx) * (1.0 - fz) * (g010 - g000)
                    + (1.0 - fx) * fz * (g011 - g001)
                    + fx * (1.0 - fz) * (g110 - g100)
                    + fx * fz * (g111 - g101)
                )
                gz += g * (
                    (1.0 - fx) * (1.0 - fy) * (g001 - g000)
                    + (1.0 - fx) * fy * (g011 - g010)
                    + fx * (1.0 - fy) * (g101 - g100)
                    + fx * fy * (g111 - g110)
                )
        if need_pos:
            gpos[n, 0] += gx * scale[0] * inx
            gpos[n, 1] += gy * scale[1] * iny
            gpos[n, 2] += gz * scale[2] * inz
