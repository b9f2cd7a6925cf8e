"""Pure numpy blending kernels with the same signatures as the compiled module."""
import numpy as np


def _tile_bounds(t, tiles_x, tile, height, width):
    ty, tx = divmod(t, tiles_x)
    r0, c0 = ty * tile, tx * tile
    return r0, min(r0 + tile, height), c0, min(c0 + tile, width)


def _tile_sigma(mean2d, conic, opacity, ids, r0, r1, c0, c1, thresh):
    py, px = np.meshgrid(np.arange(r0, r1) + 0.5, np.arange(c0, c1) + 0.5, indexing="ij")
    dx = px.reshape(-1, 1) - mean2d[ids, 0]
    dy = py.reshape(-1, 1) - mean2d[ids, 1]
    con = conic[ids]
    q = con[:, 0] * dx * dx + 2.0 * con[:, 1] * dx * dy + con[:, 2] * dy * dy
    s = opacity[ids] * np.exp(-0.5 * q)
    used = s >= thresh
    return dx, dy, np.where(used, s, 0.0), used


def _transmittance(s, floor):
    """Transmittance before each entry and the early-stop mask (sequential semantics)."""
    one_minus = 1.0 - s
    tb = np.ones_like(s)
    if s.shape[1] > 1:
        tb[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    live = tb >= floor
    return tb, live


def forward(mean2d, conic, opacity, color, offsets, entries, height, width, tile, bg, thresh, floor,
            image, trans, num_threads=1):
    tiles_x = (width + tile - 1) // tile
    n_tiles = tiles_x * ((height + tile - 1) // tile)
    bg = np.asarray(bg)
    for t in range(n_tiles):
        r0, r1, c0, c1 = _tile_bounds(t, tiles_x, tile, height, width)
        ids = np.asarray(entries[offsets[t]:offsets[t + 1]])
        if len(ids) == 0:
            image[r0:r1, c0:c1] = bg
            trans[r0:r1, c0:c1] = 1.0
            continue
        _, _, s, _ = _tile_sigma(mean2d, conic, opacity, ids, r0, r1, c0, c1, thresh)
        tb, live = _transmittance(s, floor)
        s = np.where(live, s, 0.0)
        w = s * tb
        final_t = np.prod(1.0 - s, axis=1)
        rgb = w @ color[ids] + final_t[:, None] * bg
        image[r0:r1, c0:c1] = rgb.reshape(r1 - r0, c1 - c0, 3)
        trans[r0:r1, c0:c1] = final_t.reshape(r1 - r0, c1 - c0)


def backward(mean2d, conic, opacity, color, offsets, entries, height, width, tile, bg, thresh, floor,
             grad_image, g_mean, g_conic, g_opac, g_color, num_threads=1):
    tiles_x = (width + tile - 1) // tile
    n_tiles = tiles_x * ((height + tile - 1) // tile)
    bg = np.asarray(bg)
    for t in range(n_tiles):
        start, stop = offsets[t], offsets[t + 1]
        if stop == start:
            continue
        r0, r1, c0, c1 = _tile_bounds(t, tiles_x, tile, height, width)
        ids = np.asarray(entries[start:stop])
        dx, dy, s, used = _tile_sigma(mean2d, conic, opacity, ids, r0, r1, c0, c1, thresh)
        tb, live = _transmittance(s, floor)
        s = np.where(live, s, 0.0)
        used &= live
        gimg = grad_image[r0:r1, c0:c1].reshape(-1, 3)
        cols = color[ids]
        g_color[start:stop] += (s * tb).T @ gimg
        # suffix colour seen behind each entry, accumulated back to front
        acc = np.broadcast_to(bg, gimg.shape).copy()
        gs = np.zeros_like(s)
        for j in range(len(ids) - 1, -1, -1):
            sj = s[:, j:j + 1]
            gs[:, j] = tb[:, j] * np.sum(gimg * (cols[j] - acc), axis=1)
            acc = sj * cols[j] + (1.0 - sj) * acc
        gs = np.where(used, gs, 0.0)
        con = conic[ids]
        density = np.exp(-0.5 * (con[:, 0] * dx * dx + 2.0 * con[:, 1] * dx * dy + con[:, 2] * dy * dy))
        g_opac[start:stop] += np.sum(gs * density, axis=0)
        dq = -0.5 * gs * s
        g_mean[start:stop, 0] += np.sum(-2.0 * dq * (con[:, 0] * dx + con[:, 1] * dy), axis=0)
        g_mean[start:stop, 1] += np.sum(-2.0 * dq * (con[:, 1] * dx + con[:, 2] * dy), axis=0)
        g_conic[start:stop, 0] += np.sum(dq * dx * dx, axis=0)
        g_conic[start:stop, 1] += np.sum(dq * 2.0 * dx * dy, axis=0)
        g_conic[start:stop, 2] += np.sum(dq * dy * dy, axis=0)
