# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused compiled kernels; reference semantics live in ``_numpy.py``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, log1p

cnp.import_array()

BACKEND = "cython"


cdef inline double _sig(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def bce_grads(pred, target, double eps):
    cdef const double[::1] p = np.ascontiguousarray(pred, dtype=np.float64).ravel()
    cdef const double[::1] t = np.ascontiguousarray(target, dtype=np.float64).ravel()
    cdef Py_ssize_t n = p.shape[0]
    cdef cnp.ndarray[double, ndim=1] dpred = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] dtarget = np.empty(n, dtype=np.float64)
    cdef double acc = 0.0
    cdef double pc, lp, l1p
    cdef Py_ssize_t i
    for i in range(n):
        pc = p[i]
        if pc < eps:
            pc = eps
        elif pc > 1.0 - eps:
            pc = 1.0 - eps
        lp = log(pc)
        l1p = log1p(-pc)
        acc += t[i] * lp + (1.0 - t[i]) * l1p
        if eps < p[i] < 1.0 - eps:
            dpred[i] = (pc - t[i]) / (pc * (1.0 - pc)) / n
        else:
            dpred[i] = 0.0
        dtarget[i] = -(lp - l1p) / n
    return -acc / n, dpred, dtarget


def dice_grads(pred, target, double smooth):
    cdef const double[::1] p = np.ascontiguousarray(pred, dtype=np.float64).ravel()
    cdef const double[::1] t = np.ascontiguousarray(target, dtype=np.float64).ravel()
    cdef Py_ssize_t n = p.shape[0]
    cdef cnp.ndarray[double, ndim=1] dpred = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] dtarget = np.empty(n, dtype=np.float64)
    cdef double inter = 0.0, sp = 0.0, st = 0.0
    cdef double num, denom, d2
    cdef Py_ssize_t i
    for i in range(n):
        inter += p[i] * t[i]
        sp += p[i]
        st += t[i]
    num = 2.0 * inter + smooth
    denom = sp + st + smooth
    d2 = denom * denom
    for i in range(n):
        dpred[i] = -(2.0 * t[i] * denom - num) / d2
        dtarget[i] = -(2.0 * p[i] * denom - num) / d2
    return 1.0 - num / denom, dpred, dtarget


def bce_dice_values(preds, targets, double eps, double smooth):
    cdef const double[:, ::1] pr = np.ascontiguousarray(preds, dtype=np.float64)
    cdef const double[:, ::1] tg = np.ascontiguousarray(targets, dtype=np.float64)
    cdef Py_ssize_t n_pred = pr.shape[0], n_tgt = tg.shape[0], n_pix = pr.shape[1]
    cdef cnp.ndarray[double, ndim=2] bce = np.empty((n_pred, n_tgt), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] dice = np.empty((n_pred, n_tgt), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] log_p = np.empty((n_pred, n_pix), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] log_1p = np.empty((n_pred, n_pix), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] pred_sum = np.zeros(n_pred, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] tgt_sum = np.zeros(n_tgt, dtype=np.float64)
    cdef double pc, acc_bce, acc_inter, tv
    cdef Py_ssize_t j, k, i
    for j in range(n_pred):
        for i in range(n_pix):
            pc = pr[j, i]
            pred_sum[j] += pc
            if pc < eps:
                pc = eps
            elif pc > 1.0 - eps:
                pc = 1.0 - eps
            log_p[j, i] = log(pc)
            log_1p[j, i] = log1p(-pc)
    for k in range(n_tgt):
        for i in range(n_pix):
            tgt_sum[k] += tg[k, i]
    for j in range(n_pred):
        for k in range(n_tgt):
            acc_bce = 0.0
            acc_inter = 0.0
            for i in range(n_pix):
                tv = tg[k, i]
                acc_bce += tv * log_p[j, i] + (1.0 - tv) * log_1p[j, i]
                acc_inter += pr[j, i] * tv
            bce[j, k] = -acc_bce / n_pix
            dice[j, k] = 1.0 - (2.0 * acc_inter + smooth) / (pred_sum[j] + tgt_sum[k] + smooth)
    return bce, dice


def soft_union(masks, bint use_logits, double eps):
    cdef const double[:, ::1] m = np.ascontiguousarray(masks, dtype=np.float64)
    cdef Py_ssize_t n = m.shape[0], n_pix = m.shape[1]
    cdef cnp.ndarray[double, ndim=1] ghat = np.zeros(n_pix, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] dghat = np.empty((n, n_pix), dtype=np.float64)
    cdef double s, mc, g
    cdef Py_ssize_t j, i
    if use_logits:
        for i in range(n_pix):
            s = 0.0
            for j in range(n):
                mc = m[j, i]
                if mc < eps:
                    mc = eps
                elif mc > 1.0 - eps:
                    mc = 1.0 - eps
                s += log(mc) - log1p(-mc)
            g = _sig(s)
            ghat[i] = g
            for j in range(n):
                mc = m[j, i]
                if eps < mc < 1.0 - eps:
                    dghat[j, i] = g * (1.0 - g) / (mc * (1.0 - mc))
                else:
                    dghat[j, i] = 0.0
    else:
        for i in range(n_pix):
            s = 0.0
            for j in range(n):
                s += m[j, i]
            g = _sig(s)
            ghat[i] = g
            for j in range(n):
                dghat[j, i] = g * (1.0 - g)
    return ghat, dghat


def iou_pairs(a, b):
    cdef const cnp.uint8_t[:, ::1] am = np.ascontiguousarray(a, dtype=np.uint8)
    cdef const cnp.uint8_t[:, ::1] bm = np.ascontiguousarray(b, dtype=np.uint8)
    cdef Py_ssize_t n_a = am.shape[0], n_b = bm.shape[0], n_pix = am.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((n_a, n_b), dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] area_a = np.zeros(n_a, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] area_b = np.zeros(n_b, dtype=np.int64)
    cdef cnp.int64_t inter, union
    cdef Py_ssize_t ia, ib, i
    for ia in range(n_a):
        for i in range(n_pix):
            area_a[ia] += am[ia, i]
    for ib in range(n_b):
        for i in range(n_pix):
            area_b[ib] += bm[ib, i]
    for ia in range(n_a):
        for ib in range(n_b):
            inter = 0
            for i in range(n_pix):
                inter += am[ia, i] & bm[ib, i]
            union = area_a[ia] + area_b[ib] - inter
            if union > 0:
                out[ia, ib] = <double>inter / <double>union
    return out
