# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend.

Mirrors ``_ref``: same four entry points, same shapes, caches opaque to the
caller. The time loops run without the GIL; activation math is done in
double precision and stored at the working dtype, so float32 results differ
from the numpy backend only by rounding.
"""

import numpy as np

from libc.math cimport exp, tanh

NAME = "compiled"
COMPILED = True

ctypedef fused real:
    float
    double


cdef inline double _sig(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def _c2d(a):
    return np.ascontiguousarray(a)


# -- convolution bank --------------------------------------------------------
#
# im2col / col2im run as C loops; the big gemms go through BLAS (numpy
# matmul), which the naive loops cannot beat at the model's sizes.


def conv_bank_forward(seq, weights, biases, widths):
    seq = _c2d(seq)
    ws = [_c2d(w) for w in weights]
    bs = [_c2d(b) for b in biases]
    wd = tuple(int(w) for w in widths)
    channels = [w.shape[0] for w in ws]
    f, m = seq.shape
    out = np.empty((sum(channels), m), dtype=seq.dtype)
    patches_all, pres = [], []
    row = 0
    for w_mat, b_vec, w, c in zip(ws, bs, wd, channels):
        if w == 1:
            patches = seq
        else:
            patches = np.empty((w * f, m), dtype=seq.dtype)
            _im2col(seq, w, patches)
        pre = w_mat @ patches
        _bias_relu(pre, b_vec, out[row : row + c, :])
        patches_all.append(patches)
        pres.append(pre)
        row += c
    cache = (seq, ws, wd, patches_all, pres)
    return out, cache


def _im2col(real[:, ::1] seq, int width, real[:, ::1] patches):
    cdef Py_ssize_t f = seq.shape[0]
    cdef Py_ssize_t m = seq.shape[1]
    cdef Py_ssize_t pad = (width - 1) // 2
    cdef Py_ssize_t dw, j, t, src
    with nogil:
        for dw in range(width):
            for j in range(f):
                for t in range(m):
                    src = t + dw - pad
                    patches[dw * f + j, t] = seq[j, src] if 0 <= src < m else 0.0


def _bias_relu(real[:, ::1] pre, real[:, ::1] b_vec, real[:, :] out):
    # fuses bias add (in place, cached for the backward mask) with ReLU
    cdef Py_ssize_t c = pre.shape[0]
    cdef Py_ssize_t m = pre.shape[1]
    cdef Py_ssize_t o, t
    cdef real v, b
    with nogil:
        for o in range(c):
            b = b_vec[o, 0]
            for t in range(m):
                v = pre[o, t] + b
                pre[o, t] = v
                # v != v keeps NaN poisonous, matching np.maximum
                out[o, t] = v if v > 0 or v != v else 0.0


def conv_bank_backward(g, cache):
    seq, ws, wd, patches_all, pres = cache
    g = _c2d(g)
    dseq = np.zeros_like(seq)
    dws, dbs = [], []
    row = 0
    for w_mat, w, patches, pre in zip(ws, wd, patches_all, pres):
        c = w_mat.shape[0]
        gw = np.empty_like(pre)
        db = np.zeros((c, 1), dtype=w_mat.dtype)
        _mask_sum(_c2d(g[row : row + c, :]), pre, gw, db)
        dws.append(gw @ patches.T)
        dbs.append(db)
        dpatch = _c2d(w_mat.T @ gw)
        if w == 1:
            dseq += dpatch
        else:
            _col2im(dpatch, w, dseq)
        row += c
    return dseq, dws, dbs


def _mask_sum(real[:, ::1] g, real[:, ::1] pre, real[:, ::1] gw,
              real[:, ::1] db):
    # gw = g * (pre > 0); db = row sums of gw
    cdef Py_ssize_t c = pre.shape[0]
    cdef Py_ssize_t m = pre.shape[1]
    cdef Py_ssize_t o, t
    cdef double s
    cdef real v
    with nogil:
        for o in range(c):
            s = 0.0
            for t in range(m):
                v = g[o, t] if pre[o, t] > 0 else 0.0
                gw[o, t] = v
                s += v
            db[o, 0] = <real> s


def _col2im(real[:, ::1] dpatch, int width, real[:, ::1] dseq):
    cdef Py_ssize_t f = dseq.shape[0]
    cdef Py_ssize_t m = dseq.shape[1]
    cdef Py_ssize_t pad = (width - 1) // 2
    cdef Py_ssize_t dw, j, t, src
    with nogil:
        for dw in range(width):
            for j in range(f):
                for t in range(m):
                    src = t + dw - pad
                    if 0 <= src < m:
                        dseq[j, src] += dpatch[dw * f + j, t]


# -- LSTM --------------------------------------------------------------------


def lstm_forward(seq, wx, wh, b):
    seq = _c2d(seq)
    wx = _c2d(wx)
    wh = _c2d(wh)
    b = _c2d(b)
    h = wh.shape[1]
    m = seq.shape[1]
    # the input projection has no recurrence; let BLAS handle it
    pre_t = _c2d((wx @ seq + b).T)
    gates_t = np.empty((m, 4 * h), dtype=seq.dtype)
    cs_t = np.empty((m, h), dtype=seq.dtype)
    hs_t = np.empty((m, h), dtype=seq.dtype)
    _lstm_fwd(pre_t, wh, gates_t, cs_t, hs_t)
    cache = (_c2d(seq.T), wx, wh, gates_t, cs_t, hs_t)
    return _c2d(hs_t.T), cache


def _lstm_fwd(real[:, ::1] pre_t, real[:, ::1] wh, real[:, ::1] gates_t,
              real[:, ::1] cs_t, real[:, ::1] hs_t):
    cdef Py_ssize_t m = pre_t.shape[0]
    cdef Py_ssize_t h = wh.shape[1]
    cdef Py_ssize_t t, k, j
    cdef double a, i, fo, ga, o, c
    with nogil:
        for t in range(m):
            for k in range(4 * h):
                a = pre_t[t, k]
                if t > 0:
                    for j in range(h):
                        a += wh[k, j] * hs_t[t - 1, j]
                gates_t[t, k] = <real> a
            for k in range(h):
                i = _sig(gates_t[t, k])
                fo = _sig(gates_t[t, h + k])
                ga = tanh(gates_t[t, 2 * h + k])
                o = _sig(gates_t[t, 3 * h + k])
                c = i * ga
                if t > 0:
                    c += fo * cs_t[t - 1, k]
                cs_t[t, k] = <real> c
                hs_t[t, k] = <real> (o * tanh(c))
                # store activated gates in place; backward wants them, not
                # the pre-activations
                gates_t[t, k] = <real> i
                gates_t[t, h + k] = <real> fo
                gates_t[t, 2 * h + k] = <real> ga
                gates_t[t, 3 * h + k] = <real> o


def lstm_backward(g, cache):
    seq_t, wx, wh, gates_t, cs_t, hs_t = cache
    g_t = _c2d(np.asarray(g).T)
    m, f = seq_t.shape
    h = wh.shape[1]
    dseq_t = np.empty((m, f), dtype=seq_t.dtype)
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros((4 * h, 1), dtype=wx.dtype)
    _lstm_bwd(g_t, seq_t, wx, wh, gates_t, cs_t, hs_t, dseq_t, dwx, dwh, db)
    return _c2d(dseq_t.T), dwx, dwh, db


def _lstm_bwd(real[:, ::1] g_t, real[:, ::1] seq_t, real[:, ::1] wx,
              real[:, ::1] wh, real[:, ::1] gates_t, real[:, ::1] cs_t,
              real[:, ::1] hs_t, real[:, ::1] dseq_t, real[:, ::1] dwx,
              real[:, ::1] dwh, real[:, ::1] db):
    cdef Py_ssize_t m = seq_t.shape[0]
    cdef Py_ssize_t f = seq_t.shape[1]
    cdef Py_ssize_t h = wh.shape[1]
    cdef Py_ssize_t t, k, j
    cdef double i, fo, ga, o, tc, dh, do, dc, dav
    da_np = np.empty(4 * h, dtype=np.float64)
    dh_next_np = np.zeros(h, dtype=np.float64)
    dc_next_np = np.zeros(h, dtype=np.float64)
    cdef double[::1] da = da_np
    cdef double[::1] dh_next = dh_next_np
    cdef double[::1] dc_next = dc_next_np
    with nogil:
        for t in range(m - 1, -1, -1):
            for k in range(h):
                i = gates_t[t, k]
                fo = gates_t[t, h + k]
                ga = gates_t[t, 2 * h + k]
                o = gates_t[t, 3 * h + k]
                tc = tanh(<double> cs_t[t, k])
                dh = g_t[t, k] + dh_next[k]
                do = dh * tc
                dc = dh * o * (1.0 - tc * tc) + dc_next[k]
                da[k] = (dc * ga) * i * (1.0 - i)
                if t > 0:
                    da[h + k] = (dc * cs_t[t - 1, k]) * fo * (1.0 - fo)
                else:
                    da[h + k] = 0.0
                da[2 * h + k] = (dc * i) * (1.0 - ga * ga)
                da[3 * h + k] = do * o * (1.0 - o)
                dc_next[k] = dc * fo
            for j in range(h):
                dh_next[j] = 0.0
            for k in range(4 * h):
                dav = da[k]
                db[k, 0] += <real> dav
                if dav == 0.0:
                    continue
                for j in range(f):
                    dwx[k, j] += <real> (dav * seq_t[t, j])
                if t > 0:
                    for j in range(h):
                        dwh[k, j] += <real> (dav * hs_t[t - 1, j])
                for j in range(h):
                    dh_next[j] += wh[k, j] * dav
            for j in range(f):
                dseq_t[t, j] = 0.0
            for k in range(4 * h):
                dav = da[k]
                if dav != 0.0:
                    for j in range(f):
                        dseq_t[t, j] += <real> (wx[k, j] * dav)
