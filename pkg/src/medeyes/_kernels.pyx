# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops for rollouts and objective evaluation.

Same signatures as ``medeyes._kernels_py``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


def softmax_row(double[::1] phi, double[:, ::1] theta, cnp.uint8_t[::1] allowed):
    cdef Py_ssize_t d = theta.shape[0], v = theta.shape[1], i, j
    out = np.empty(v, dtype=np.float64)
    cdef double[::1] p = out
    cdef double m, s, x
    for j in range(v):
        p[j] = 0.0
    for i in range(d):
        x = phi[i]
        if x != 0.0:
            for j in range(v):
                p[j] += x * theta[i, j]
    m = -INFINITY
    for j in range(v):
        if allowed[j] and p[j] > m:
            m = p[j]
    s = 0.0
    for j in range(v):
        p[j] = exp(p[j] - m) if allowed[j] else 0.0
        s += p[j]
    for j in range(v):
        p[j] /= s
    return out


def sample_index(double[::1] probs, double u):
    cdef Py_ssize_t n = probs.shape[0], j
    cdef double total = 0.0, c = 0.0, target
    for j in range(n):
        total += probs[j]
    target = u * total
    for j in range(n):
        c += probs[j]
        if c > target:
            return j
    return n - 1


def batch_log_probs(double[:, ::1] feats, double[:, ::1] theta, cnp.int64_t[::1] tokens,
                    cnp.uint8_t[:, ::1] allowed):
    cdef Py_ssize_t n = feats.shape[0], d = theta.shape[0], v = theta.shape[1], r, i, j
    logp_out = np.empty(n, dtype=np.float64)
    probs_out = np.zeros((n, v), dtype=np.float64)
    cdef double[::1] lp = logp_out
    cdef double[:, ::1] p = probs_out
    cdef double m, s, x, lse
    for r in range(n):
        for i in range(d):
            x = feats[r, i]
            if x != 0.0:
                for j in range(v):
                    p[r, j] += x * theta[i, j]
        m = -INFINITY
        for j in range(v):
            if allowed[r, j] and p[r, j] > m:
                m = p[r, j]
        s = 0.0
        for j in range(v):
            if allowed[r, j]:
                s += exp(p[r, j] - m)
        lse = m + log(s)
        lp[r] = p[r, tokens[r]] - lse if allowed[r, tokens[r]] else -INFINITY
        for j in range(v):
            p[r, j] = exp(p[r, j] - lse) if allowed[r, j] else 0.0
    return logp_out, probs_out


def weighted_grad(double[:, ::1] feats, double[:, ::1] probs, cnp.int64_t[::1] tokens, double[::1] weights):
    cdef Py_ssize_t n = feats.shape[0], d = feats.shape[1], v = probs.shape[1], r, i, j
    out = np.zeros((d, v), dtype=np.float64)
    cdef double[:, ::1] g = out
    cdef double w, x
    for r in range(n):
        w = weights[r]
        if w == 0.0:
            continue
        for i in range(d):
            x = feats[r, i] * w
            if x != 0.0:
                for j in range(v):
                    g[i, j] -= x * probs[r, j]
                g[i, tokens[r]] += x
    return out


def pool_labels(cnp.int8_t[:, :] crop, int resolution, double min_share):
    cdef Py_ssize_t h = crop.shape[0], w = crop.shape[1]
    cdef Py_ssize_t side = h if h > w else w
    cdef Py_ssize_t block = (side + resolution - 1) // resolution
    if block < 1:
        block = 1
    if block == 1:
        return np.array(crop, dtype=np.int8)
    cdef Py_ssize_t ph = (h + block - 1) // block, pw = (w + block - 1) // block
    out = np.zeros((ph, pw), dtype=np.int8)
    cdef cnp.int8_t[:, ::1] o = out
    cdef int counts[128]
    cdef Py_ssize_t bi, bj, y, x, k, best
    cdef int lab
    for bi in range(ph):
        for bj in range(pw):
            for k in range(128):
                counts[k] = 0
            for y in range(bi * block, min((bi + 1) * block, h)):
                for x in range(bj * block, min((bj + 1) * block, w)):
                    lab = crop[y, x]
                    if lab > 0:
                        counts[lab] += 1
            best = 0
            for k in range(1, 128):
                if counts[k] > counts[best] or (best == 0 and counts[k] > 0):
                    best = k
            if best > 0 and counts[best] >= min_share * block * block:
                o[bi, bj] = <cnp.int8_t>best
    return out


def separated_pairs(cnp.int64_t[:, :] boxes, double eps):
    cdef Py_ssize_t k = boxes.shape[0], i, j
    cdef long w, h, inter, union_
    cdef long count = 0
    for i in range(k):
        for j in range(i + 1, k):
            w = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            h = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            inter = w * h if (w > 0 and h > 0) else 0
            union_ = ((boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
                      + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter)
            if <double>inter / <double>union_ < eps:
                count += 1
    return count
