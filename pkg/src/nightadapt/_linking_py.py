"""Pure-numpy box-linking kernel, used when the compiled extension is unavailable."""

import math

import numpy as np


def normalized_distance(xc, yc, wc, hc, xr, yr, wr, hr):
    a = (xc - xr) / wr
    b = (yc - yr) / hr
    c = math.log(wc / wr)
    d = math.log(hc / hr)
    return a * a + b * b + c * c + d * d


def _dist_to_many(cur, refs):
    a = (cur[0] - refs[:, 0]) / refs[:, 2]
    b = (cur[1] - refs[:, 1]) / refs[:, 3]
    c = np.log(cur[2] / refs[:, 2])
    d = np.log(cur[3] / refs[:, 3])
    return a * a + b * b + c * c + d * d


def link_boxes(boxes, counts, reward):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    counts = np.asarray(counts, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    if offsets[-1] != len(boxes):
        raise ValueError("counts do not sum to the number of boxes")

    n_frames = len(counts)
    value = np.empty(len(boxes))
    back = np.full(len(boxes), -1, dtype=np.int64)
    best_s, best_total = -1, 0.0
    for t in range(n_frames):
        lo = offsets[t]
        for s in range(lo, offsets[t + 1]):
            best = reward
            if lo > 0:
                cand = value[:lo] + (reward - _dist_to_many(boxes[s], boxes[:lo]))
                p = int(np.argmax(cand))
                if cand[p] > best:
                    best = cand[p]
                    back[s] = p
            value[s] = best
            if best_s < 0 or best > best_total:
                best_s, best_total = s, best

    frame_of = np.repeat(np.arange(n_frames), counts)
    choice = np.full(n_frames, -1, dtype=np.int64)
    s = best_s
    while s >= 0:
        t = frame_of[s]
        choice[t] = s - offsets[t]
        s = back[s]
    return choice, (float(best_total) if best_s >= 0 else float("nan"))
