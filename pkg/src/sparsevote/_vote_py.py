"""Vectorised numpy voting kernels.

Same signatures and results as the compiled ``_vote_cy`` module. Work is one
batched matrix product per kernel offset, so the cost still grows with the
number of occupied cells rather than the grid volume.
"""

import numpy as np


def _offsets(kernel_shape):
    kx, ky, kz = kernel_shape
    for a in range(kx):
        for b in range(ky):
            for c in range(kz):
                yield a, b, c, (a - kx // 2, b - ky // 2, c - kz // 2)


def _shifted_keys(coords, offset, shape):
    """Linear indices of ``coords + offset`` and the in-bounds mask."""
    L, M, N = shape
    t = coords.astype(np.int64) + np.asarray(offset, dtype=np.int64)
    inside = np.all((t >= 0) & (t < np.asarray(shape, dtype=np.int64)), axis=1)
    t = t[inside]
    return (t[:, 0] * M + t[:, 1]) * N + t[:, 2], inside


def vote_forward(coords, feats, weights, L, M, N):
    kx, ky, kz, fi, fo = weights.shape
    if feats.shape[1] != fi or feats.shape[0] != coords.shape[0]:
        raise ValueError("coords/features/weights disagree on shape")
    keys, votes = [], []
    for a, b, c, off in _offsets((kx, ky, kz)):
        k, inside = _shifted_keys(coords, off, (L, M, N))
        if not k.size:
            continue
        keys.append(k)
        votes.append(feats[inside] @ weights[kx - 1 - a, ky - 1 - b, kz - 1 - c])
    if not keys:
        return np.empty(0, np.int64), np.empty((0, fo), np.float32)
    keys = np.concatenate(keys)
    votes = np.concatenate(votes)
    uniq, inverse = np.unique(keys, return_inverse=True)
    out = np.empty((uniq.size, fo), dtype=np.float32)
    for f in range(fo):
        out[:, f] = np.bincount(inverse, weights=votes[:, f], minlength=uniq.size)
    return uniq, out


def vote_backward(coords, feats, weights, gkeys, gvals, L, M, N):
    kx, ky, kz, fi, fo = weights.shape
    P = coords.shape[0]
    dw = np.zeros(weights.shape, dtype=np.float64)
    gin = np.zeros((P, fi), dtype=np.float64)
    if gkeys.size == 0 or P == 0:
        return dw.astype(np.float32), gin.astype(np.float32)
    order = np.argsort(gkeys, kind="stable")
    sorted_keys = gkeys[order]
    rows = np.arange(P)
    for a, b, c, off in _offsets((kx, ky, kz)):
        k, inside = _shifted_keys(coords, off, (L, M, N))
        if not k.size:
            continue
        pos = np.searchsorted(sorted_keys, k)
        pos[pos == sorted_keys.size] = 0
        hit = sorted_keys[pos] == k
        if not hit.any():
            continue
        src = rows[inside][hit]
        g = gvals[order[pos[hit]]].astype(np.float64)
        h = feats[src].astype(np.float64)
        idx = (kx - 1 - a, ky - 1 - b, kz - 1 - c)
        dw[idx] += h.T @ g
        # each input cell appears at most once per offset
        gin[src] += g @ weights[idx].T.astype(np.float64)
    return dw.astype(np.float32), gin.astype(np.float32)
