# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled list scheduler; same contract as ``_listsched_py.list_schedule``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def list_schedule(duration, sm, stream, device, comm, rank, pred_count, succ_ptr, succ_idx,
                  capacity, Py_ssize_t n_streams):
    cdef double[::1] dur = np.ascontiguousarray(duration, dtype=np.float64)
    cdef long long[::1] smv = np.ascontiguousarray(sm, dtype=np.int64)
    cdef long long[::1] stv = np.ascontiguousarray(stream, dtype=np.int64)
    cdef long long[::1] dev = np.ascontiguousarray(device, dtype=np.int64)
    cdef long long[::1] cmv = np.ascontiguousarray(comm, dtype=np.int64)
    cdef long long[::1] rk = np.ascontiguousarray(rank, dtype=np.int64)
    cdef long long[::1] waiting = np.array(pred_count, dtype=np.int64)
    cdef long long[::1] sptr = np.ascontiguousarray(succ_ptr, dtype=np.int64)
    cdef long long[::1] sidx = np.ascontiguousarray(succ_idx, dtype=np.int64)
    cdef long long[::1] free_sm = np.array(capacity, dtype=np.int64)
    cdef Py_ssize_t n = dur.shape[0]
    cdef Py_ssize_t n_dev = free_sm.shape[0]

    cdef long long[::1] channel_busy = np.zeros(n_dev, dtype=np.int64)
    cdef long long[::1] stream_busy = np.zeros(max(n_streams, 1), dtype=np.int64)
    cdef long long[::1] by_rank = np.empty(n, dtype=np.int64)
    cdef double[::1] start = np.zeros(n, dtype=np.float64)
    cdef double[::1] end = np.zeros(n, dtype=np.float64)
    # ready holds ranks in ascending order; running holds event ids.
    cdef long long[::1] ready = np.empty(n, dtype=np.int64)
    cdef long long[::1] running = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t n_ready = 0, n_running = 0, n_keep, done = 0
    cdef Py_ssize_t a, b, i, j, d, r, lo, hi, mid
    cdef double t = 0.0, tmin

    for i in range(n):
        by_rank[rk[i]] = i
    for r in range(n):
        i = by_rank[r]
        if waiting[i] == 0:
            ready[n_ready] = r
            n_ready += 1

    while done < n:
        n_keep = 0
        for a in range(n_ready):
            r = ready[a]
            i = by_rank[r]
            d = dev[i]
            if stream_busy[stv[i]] or free_sm[d] < smv[i] or (cmv[i] and channel_busy[d]):
                ready[n_keep] = r
                n_keep += 1
                continue
            stream_busy[stv[i]] = 1
            free_sm[d] -= smv[i]
            if cmv[i]:
                channel_busy[d] = 1
            start[i] = t
            end[i] = t + dur[i]
            running[n_running] = i
            n_running += 1
        n_ready = n_keep
        if n_running == 0:
            raise RuntimeError("deadlock: ready events cannot fit any device")

        tmin = end[running[0]]
        for a in range(1, n_running):
            if end[running[a]] < tmin:
                tmin = end[running[a]]
        t = tmin
        a = 0
        while a < n_running:
            i = running[a]
            if end[i] != t:
                a += 1
                continue
            running[a] = running[n_running - 1]
            n_running -= 1
            done += 1
            d = dev[i]
            stream_busy[stv[i]] = 0
            free_sm[d] += smv[i]
            if cmv[i]:
                channel_busy[d] = 0
            for b in range(sptr[i], sptr[i + 1]):
                j = sidx[b]
                waiting[j] -= 1
                if waiting[j] == 0:
                    r = rk[j]
                    lo = 0
                    hi = n_ready
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if ready[mid] < r:
                            lo = mid + 1
                        else:
                            hi = mid
                    for mid in range(n_ready, lo, -1):
                        ready[mid] = ready[mid - 1]
                    ready[lo] = r
                    n_ready += 1
    return np.asarray(start), np.asarray(end)
