# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled post-processing kernels; see ``_pykernels`` for the reference."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


cdef inline double _pair_tiou(double s1, double e1, double s2, double e2) noexcept nogil:
    cdef double lo = s1 if s1 > s2 else s2
    cdef double hi = e1 if e1 < e2 else e2
    cdef double inter = hi - lo
    if inter <= 0:
        return 0.0
    return inter / ((e1 - s1) + (e2 - s2) - inter)


def tiou_matrix(a_start, a_end, b_start, b_end):
    cdef const double[:] as_ = np.ascontiguousarray(a_start, dtype=np.float64)
    cdef const double[:] ae = np.ascontiguousarray(a_end, dtype=np.float64)
    cdef const double[:] bs = np.ascontiguousarray(b_start, dtype=np.float64)
    cdef const double[:] be = np.ascontiguousarray(b_end, dtype=np.float64)
    cdef Py_ssize_t n = as_.shape[0], m = bs.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, :] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _pair_tiou(as_[i], ae[i], bs[j], be[j])
    return out


cdef inline bint _ranks_above(double s1, double st1, long long src1,
                              double s2, double st2, long long src2) noexcept nogil:
    if s1 != s2:
        return s1 > s2
    if st1 != st2:
        return st1 < st2
    return src1 < src2


def soft_nms(starts, ends, scores, source, double sigma, double score_floor):
    cdef const double[:] st = np.ascontiguousarray(starts, dtype=np.float64)
    cdef const double[:] en = np.ascontiguousarray(ends, dtype=np.float64)
    cdef const long long[:] src = np.ascontiguousarray(source, dtype=np.int64)
    cur_arr = np.array(scores, dtype=np.float64)
    cdef double[:] cur = cur_arr
    cdef Py_ssize_t n = cur.shape[0]
    alive_arr = np.empty(n, dtype=np.int64)
    order_arr = np.empty(n, dtype=np.int64)
    final_arr = np.empty(n, dtype=np.float64)
    cdef long long[:] alive = alive_arr
    cdef long long[:] order = order_arr
    cdef double[:] final = final_arr
    cdef Py_ssize_t n_alive = 0, n_out = 0, k, w, i, best, b
    cdef double ov
    with nogil:
        for i in range(n):
            if cur[i] >= score_floor:
                alive[n_alive] = i
                n_alive += 1
        while n_alive > 0:
            b = 0
            for k in range(1, n_alive):
                i = alive[k]
                best = alive[b]
                if _ranks_above(cur[i], st[i], src[i], cur[best], st[best], src[best]):
                    b = k
            best = alive[b]
            order[n_out] = best
            final[n_out] = cur[best]
            n_out += 1
            w = 0
            for k in range(n_alive):
                i = alive[k]
                if i == best:
                    continue
                ov = _pair_tiou(st[best], en[best], st[i], en[i])
                cur[i] = cur[i] * exp(-(ov * ov) / sigma)
                if cur[i] >= score_floor:
                    alive[w] = i
                    w += 1
            n_alive = w
    return order_arr[:n_out].copy(), final_arr[:n_out].copy()


def greedy_match(pred_video, pred_start, pred_end, gt_ptr, gt_start, gt_end, double threshold):
    cdef const long long[:] pv = np.ascontiguousarray(pred_video, dtype=np.int64)
    cdef const double[:] ps = np.ascontiguousarray(pred_start, dtype=np.float64)
    cdef const double[:] pe = np.ascontiguousarray(pred_end, dtype=np.float64)
    cdef const long long[:] ptr = np.ascontiguousarray(gt_ptr, dtype=np.int64)
    cdef const double[:] gs = np.ascontiguousarray(gt_start, dtype=np.float64)
    cdef const double[:] ge = np.ascontiguousarray(gt_end, dtype=np.float64)
    cdef Py_ssize_t n = pv.shape[0], k, g, best
    cdef double ov, best_ov
    used_arr = np.zeros(gs.shape[0], dtype=np.uint8)
    tp_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[:] used = used_arr
    cdef unsigned char[:] tp = tp_arr
    with nogil:
        for k in range(n):
            best = -1
            best_ov = -1.0
            for g in range(ptr[pv[k]], ptr[pv[k] + 1]):
                if used[g]:
                    continue
                ov = _pair_tiou(ps[k], pe[k], gs[g], ge[g])
                if ov > best_ov:
                    best_ov = ov
                    best = g
            if best >= 0 and best_ov >= threshold:
                used[best] = 1
                tp[k] = 1
    return tp_arr.astype(bool)
