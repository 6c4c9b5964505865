# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled voting kernels.

Both entry points mirror ``sparsevote._vote_py`` exactly (same arguments,
same outputs up to float summation order). The loops run without the GIL so
several orientations or batch examples can be processed by threads.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int32_t, int64_t, uint64_t
from libc.stdlib cimport free, malloc, realloc
from libc.string cimport memset

cnp.import_array()


cdef struct KeyTable:
    int64_t* keys
    int64_t* vals
    int64_t capacity
    int64_t size


cdef inline uint64_t _mix(int64_t key) noexcept nogil:
    cdef uint64_t z = <uint64_t>key + 0x9E3779B97F4A7C15ULL
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef int _table_init(KeyTable* t, int64_t wanted) noexcept nogil:
    cdef int64_t cap = 16
    while cap < 2 * wanted:
        cap <<= 1
    t.keys = <int64_t*>malloc(cap * sizeof(int64_t))
    t.vals = <int64_t*>malloc(cap * sizeof(int64_t))
    if t.keys == NULL or t.vals == NULL:
        return -1
    memset(t.keys, 0xFF, cap * sizeof(int64_t))  # -1 marks an empty slot
    t.capacity = cap
    t.size = 0
    return 0


cdef void _table_free(KeyTable* t) noexcept nogil:
    free(t.keys)
    free(t.vals)
    t.keys = NULL
    t.vals = NULL


cdef int _table_grow(KeyTable* t) noexcept nogil:
    cdef int64_t old_cap = t.capacity
    cdef int64_t* old_keys = t.keys
    cdef int64_t* old_vals = t.vals
    cdef int64_t i, slot, mask
    cdef int64_t cap = old_cap * 2
    t.keys = <int64_t*>malloc(cap * sizeof(int64_t))
    t.vals = <int64_t*>malloc(cap * sizeof(int64_t))
    if t.keys == NULL or t.vals == NULL:
        return -1
    memset(t.keys, 0xFF, cap * sizeof(int64_t))
    t.capacity = cap
    mask = cap - 1
    for i in range(old_cap):
        if old_keys[i] >= 0:
            slot = <int64_t>(_mix(old_keys[i]) & <uint64_t>mask)
            while t.keys[slot] >= 0:
                slot = (slot + 1) & mask
            t.keys[slot] = old_keys[i]
            t.vals[slot] = old_vals[i]
    free(old_keys)
    free(old_vals)
    return 0


cdef inline int64_t _table_find(KeyTable* t, int64_t key) noexcept nogil:
    cdef int64_t mask = t.capacity - 1
    cdef int64_t slot = <int64_t>(_mix(key) & <uint64_t>mask)
    while True:
        if t.keys[slot] == key:
            return t.vals[slot]
        if t.keys[slot] < 0:
            return -1
        slot = (slot + 1) & mask


cdef inline int64_t _table_insert(KeyTable* t, int64_t key, int64_t val) noexcept nogil:
    """Return the existing value for ``key`` or store ``val`` and return -1."""
    cdef int64_t mask = t.capacity - 1
    cdef int64_t slot = <int64_t>(_mix(key) & <uint64_t>mask)
    while True:
        if t.keys[slot] == key:
            return t.vals[slot]
        if t.keys[slot] < 0:
            t.keys[slot] = key
            t.vals[slot] = val
            t.size += 1
            return -1
        slot = (slot + 1) & mask


def vote_forward(
    const int32_t[:, ::1] coords,
    const float[:, ::1] feats,
    const float[:, :, :, :, ::1] weights,
    int L, int M, int N,
):
    """Scatter flipped-kernel votes from every occupied cell.

    Returns ``(keys, values)``: linear indices of vote-receiving cells in order
    of first vote, and the accumulated votes (no bias).
    """
    cdef Py_ssize_t P = coords.shape[0]
    cdef Py_ssize_t Fi = feats.shape[1]
    cdef int KX = weights.shape[0], KY = weights.shape[1], KZ = weights.shape[2]
    cdef Py_ssize_t Fo = weights.shape[4]
    cdef int I = KX // 2, J = KY // 2, K = KZ // 2
    cdef Py_ssize_t p, fi, fo
    cdef int a, b, c, tl, tm, tn
    cdef int64_t key, row, rows = 0, row_cap
    cdef float hv
    cdef const float* w
    cdef float* acc
    cdef float* out = NULL
    cdef int64_t* out_keys = NULL
    cdef void* tmp
    cdef KeyTable table
    cdef int failed = 0

    if feats.shape[0] != P or weights.shape[3] != Fi:
        raise ValueError("coords/features/weights disagree on shape")

    row_cap = max(16, 4 * P)
    with nogil:
        if _table_init(&table, row_cap) != 0:
            failed = 1
        else:
            out = <float*>malloc(row_cap * Fo * sizeof(float))
            out_keys = <int64_t*>malloc(row_cap * sizeof(int64_t))
            if out == NULL or out_keys == NULL:
                failed = 1
        p = 0
        while p < P and not failed:
            for a in range(KX):
                tl = coords[p, 0] + a - I
                if tl < 0 or tl >= L:
                    continue
                for b in range(KY):
                    tm = coords[p, 1] + b - J
                    if tm < 0 or tm >= M:
                        continue
                    for c in range(KZ):
                        tn = coords[p, 2] + c - K
                        if tn < 0 or tn >= N:
                            continue
                        key = (<int64_t>tl * M + tm) * N + tn
                        row = _table_insert(&table, key, rows)
                        if row < 0:
                            row = rows
                            if rows == row_cap:
                                row_cap *= 2
                                tmp = realloc(out, row_cap * Fo * sizeof(float))
                                if tmp == NULL:
                                    failed = 1
                                    break
                                out = <float*>tmp
                                tmp = realloc(out_keys, row_cap * sizeof(int64_t))
                                if tmp == NULL:
                                    failed = 1
                                    break
                                out_keys = <int64_t*>tmp
                            out_keys[row] = key
                            memset(&out[row * Fo], 0, Fo * sizeof(float))
                            rows += 1
                            if 2 * table.size > table.capacity:
                                if _table_grow(&table) != 0:
                                    failed = 1
                                    break
                        acc = &out[row * Fo]
                        w = &weights[KX - 1 - a, KY - 1 - b, KZ - 1 - c, 0, 0]
                        for fi in range(Fi):
                            hv = feats[p, fi]
                            if hv == 0:
                                continue
                            for fo in range(Fo):
                                acc[fo] += hv * w[fi * Fo + fo]
                    if failed:
                        break
                if failed:
                    break
            p += 1
        _table_free(&table)

    if failed:
        free(out)
        free(out_keys)
        raise MemoryError("vote accumulation buffer allocation failed")

    keys_arr = np.empty(rows, dtype=np.int64)
    vals_arr = np.empty((rows, Fo), dtype=np.float32)
    cdef int64_t[::1] kv = keys_arr
    cdef float[:, ::1] vv = vals_arr
    cdef int64_t r
    with nogil:
        for r in range(rows):
            kv[r] = out_keys[r]
            for fo in range(Fo):
                vv[r, fo] = out[r * Fo + fo]
    free(out)
    free(out_keys)
    return keys_arr, vals_arr


def vote_backward(
    const int32_t[:, ::1] coords,
    const float[:, ::1] feats,
    const float[:, :, :, :, ::1] weights,
    const int64_t[::1] gkeys,
    const float[:, ::1] gvals,
    int L, int M, int N,
):
    """Adjoint of :func:`vote_forward`.

    ``gkeys``/``gvals`` hold the upstream gradient on output cells. Returns
    ``(d_weights, grad_input)`` where ``grad_input`` is aligned with ``coords``.
    """
    cdef Py_ssize_t P = coords.shape[0]
    cdef Py_ssize_t Fi = feats.shape[1]
    cdef int KX = weights.shape[0], KY = weights.shape[1], KZ = weights.shape[2]
    cdef Py_ssize_t Fo = weights.shape[4]
    cdef int I = KX // 2, J = KY // 2, K = KZ // 2
    cdef Py_ssize_t G = gkeys.shape[0]
    cdef Py_ssize_t p, fi, fo, q
    cdef int a, b, c, tl, tm, tn
    cdef int64_t key, row
    cdef double hv, s
    cdef const float* w
    cdef const float* g
    cdef double* dw
    cdef KeyTable table

    if gvals.shape[0] != G or gvals.shape[1] != Fo or weights.shape[3] != Fi:
        raise ValueError("gradient/weights disagree on shape")

    dw_arr = np.zeros((KX, KY, KZ, Fi, Fo), dtype=np.float64)
    gin_arr = np.zeros((P, Fi), dtype=np.float64)
    cdef double[:, :, :, :, ::1] dwv = dw_arr
    cdef double[:, ::1] gin = gin_arr
    if G == 0 or P == 0:
        return dw_arr.astype(np.float32), gin_arr.astype(np.float32)

    with nogil:
        if _table_init(&table, G) != 0:
            with gil:
                raise MemoryError("gradient lookup table allocation failed")
        for q in range(G):
            _table_insert(&table, gkeys[q], q)
        for p in range(P):
            for a in range(KX):
                tl = coords[p, 0] + a - I
                if tl < 0 or tl >= L:
                    continue
                for b in range(KY):
                    tm = coords[p, 1] + b - J
                    if tm < 0 or tm >= M:
                        continue
                    for c in range(KZ):
                        tn = coords[p, 2] + c - K
                        if tn < 0 or tn >= N:
                            continue
                        key = (<int64_t>tl * M + tm) * N + tn
                        row = _table_find(&table, key)
                        if row < 0:
                            continue
                        g = &gvals[row, 0]
                        w = &weights[KX - 1 - a, KY - 1 - b, KZ - 1 - c, 0, 0]
                        dw = &dwv[KX - 1 - a, KY - 1 - b, KZ - 1 - c, 0, 0]
                        for fi in range(Fi):
                            hv = feats[p, fi]
                            s = 0.0
                            for fo in range(Fo):
                                s += w[fi * Fo + fo] * g[fo]
                                if hv != 0:
                                    dw[fi * Fo + fo] += hv * g[fo]
                            gin[p, fi] += s
        _table_free(&table)

    return dw_arr.astype(np.float32), gin_arr.astype(np.float32)
