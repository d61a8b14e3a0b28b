"""Pure-numpy kernels. Results are bit-identical to the compiled ``_kernels``."""

import numpy as np


def zbuffer(pix, depth, n_pix):
    """Per-pixel nearest point; depth ties go to the lower point index.

    Returns:
        winner: (n_pix,) int64, -1 where no point landed.
        best: (n_pix,) float64, +inf where no point landed.
    """
    pix = np.asarray(pix, dtype=np.int64)
    depth = np.asarray(depth, dtype=np.float64)
    winner = np.full(n_pix, -1, dtype=np.int64)
    best = np.full(n_pix, np.inf)
    if len(pix) == 0:
        return winner, best
    order = np.lexsort((np.arange(len(pix)), depth, pix))
    sp = pix[order]
    first = np.ones(len(sp), dtype=bool)
    first[1:] = sp[1:] != sp[:-1]
    win = order[first]
    winner[sp[first]] = win
    best[sp[first]] = depth[win]
    return winner, best


def fuse_scores(lt, lf, lr):
    """scores[i, j, k] = lt[j, i] + lf[k, i] + lr[k, j], flattened x-major."""
    s = lt.T[:, :, None] + lf.T[:, None, :]
    s = s + lr.T[None, :, :]
    return s.ravel()


def argmax_first(scores):
    return int(np.argmax(scores))
