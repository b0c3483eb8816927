# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled box-linking kernel. Mirrors ``nightadapt._linking_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log

cnp.import_array()


cdef inline double _dist(double xc, double yc, double wc, double hc,
                         double xr, double yr, double wr, double hr) nogil:
    cdef double a = (xc - xr) / wr
    cdef double b = (yc - yr) / hr
    cdef double c = log(wc / wr)
    cdef double d = log(hc / hr)
    return a * a + b * b + c * c + d * d


def normalized_distance(double xc, double yc, double wc, double hc,
                        double xr, double yr, double wr, double hr):
    return _dist(xc, yc, wc, hc, xr, yr, wr, hr)


def link_boxes(cnp.ndarray[cnp.float64_t, ndim=2] boxes,
               cnp.ndarray[cnp.int64_t, ndim=1] counts,
               double reward):
    """Best skip-allowed chain of one box per chosen frame.

    ``boxes`` stacks every frame's candidates, ``counts[t]`` of them for frame
    ``t``. Returns ``(choice, objective)`` with ``choice[t]`` the in-frame index
    or -1.
    """
    cdef Py_ssize_t n_frames = counts.shape[0]
    cdef Py_ssize_t n_states = boxes.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] offsets = np.zeros(n_frames + 1, dtype=np.int64)
    cdef Py_ssize_t t
    for t in range(n_frames):
        offsets[t + 1] = offsets[t] + counts[t]
    if offsets[n_frames] != n_states:
        raise ValueError("counts do not sum to the number of boxes")

    cdef cnp.ndarray[cnp.float64_t, ndim=1] value = np.empty(n_states, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] back = np.full(n_states, -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] frame_of = np.empty(n_states, dtype=np.int64)
    cdef double[:, ::1] bx = np.ascontiguousarray(boxes)
    cdef double[::1] val = value
    cdef cnp.int64_t[::1] bk = back
    cdef cnp.int64_t[::1] off = offsets
    cdef Py_ssize_t s, p, lo, best_s = -1
    cdef double best, cand, best_total = 0.0

    with nogil:
        for t in range(n_frames):
            lo = off[t]
            for s in range(lo, off[t + 1]):
                best = reward
                for p in range(lo):
                    cand = val[p] + (reward - _dist(bx[s, 0], bx[s, 1], bx[s, 2], bx[s, 3],
                                                   bx[p, 0], bx[p, 1], bx[p, 2], bx[p, 3]))
                    if cand > best:
                        best = cand
                        bk[s] = p
                val[s] = best
                if best_s < 0 or best > best_total:
                    best_total = best
                    best_s = s

    for t in range(n_frames):
        for s in range(offsets[t], offsets[t + 1]):
            frame_of[s] = t

    choice = np.full(n_frames, -1, dtype=np.int64)
    s = best_s
    while s >= 0:
        t = frame_of[s]
        choice[t] = s - offsets[t]
        s = back[s]
    return choice, (best_total if best_s >= 0 else float("nan"))
