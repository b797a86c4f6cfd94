"""Pure-numpy kernel backend.

Implements the two sequence kernels that dominate runtime: the multi-width
1-D convolution bank (with fused ReLU) and the unidirectional LSTM. The
compiled backend in ``_fast.pyx`` provides the same four functions with the
same signatures; forward functions return ``(output, cache)`` and backward
functions consume that cache.
"""

import numpy as np

NAME = "numpy"
COMPILED = False


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def conv_bank_forward(seq, weights, biases, widths):
    """Same-padded 1-D convolutions over the time axis, ReLU, feature-concat.

    seq: (f, m); weights[i]: (c, widths[i]*f) with the column block for time
    offset dw at rows ``dw*f:(dw+1)*f``; biases[i]: (c, 1). Output is
    (sum(c), m).
    """
    f, m = seq.shape
    outs = []
    patches_all = []
    pres = []
    for w_mat, b_vec, w in zip(weights, biases, widths):
        pad = (w - 1) // 2
        padded = np.zeros((f, m + 2 * pad), dtype=seq.dtype)
        padded[:, pad : pad + m] = seq
        patches = np.empty((w * f, m), dtype=seq.dtype)
        for dw in range(w):
            patches[dw * f : (dw + 1) * f, :] = padded[:, dw : dw + m]
        pre = w_mat @ patches + b_vec
        outs.append(np.maximum(pre, 0.0))
        patches_all.append(patches)
        pres.append(pre)
    out = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=0)
    cache = (seq.shape, seq.dtype, weights, widths, patches_all, pres)
    return out, cache


def conv_bank_backward(g, cache):
    (f, m), dtype, weights, widths, patches_all, pres = cache
    dseq = np.zeros((f, m), dtype=dtype)
    dws = []
    dbs = []
    row = 0
    for w_mat, w, patches, pre in zip(weights, widths, patches_all, pres):
        c = w_mat.shape[0]
        gw = g[row : row + c, :] * (pre > 0)
        row += c
        dws.append(gw @ patches.T)
        dbs.append(gw.sum(axis=1, keepdims=True))
        dpatch = w_mat.T @ gw
        pad = (w - 1) // 2
        dpadded = np.zeros((f, m + 2 * pad), dtype=dtype)
        for dw in range(w):
            dpadded[:, dw : dw + m] += dpatch[dw * f : (dw + 1) * f, :]
        dseq += dpadded[:, pad : pad + m]
    return dseq, dws, dbs


def lstm_forward(seq, wx, wh, b):
    """Single-layer unidirectional LSTM from zero initial state.

    seq: (f, m); wx: (4h, f); wh: (4h, h); b: (4h, 1). Gate rows are ordered
    input, forget, candidate, output. Returns all hidden states (h, m).
    """
    f, m = seq.shape
    h = wh.shape[1]
    dtype = seq.dtype
    pre_x = wx @ seq + b
    hs = np.zeros((h, m), dtype=dtype)
    ig = np.empty((h, m), dtype=dtype)
    fg = np.empty((h, m), dtype=dtype)
    gg = np.empty((h, m), dtype=dtype)
    og = np.empty((h, m), dtype=dtype)
    cs = np.empty((h, m), dtype=dtype)
    h_prev = np.zeros(h, dtype=dtype)
    c_prev = np.zeros(h, dtype=dtype)
    for t in range(m):
        a = pre_x[:, t] + wh @ h_prev
        i = _sigmoid(a[:h])
        fo = _sigmoid(a[h : 2 * h])
        ga = np.tanh(a[2 * h : 3 * h])
        o = _sigmoid(a[3 * h :])
        c = fo * c_prev + i * ga
        ht = o * np.tanh(c)
        ig[:, t], fg[:, t], gg[:, t], og[:, t], cs[:, t] = i, fo, ga, o, c
        hs[:, t] = ht
        h_prev, c_prev = ht, c
    cache = (seq, wx, wh, hs, ig, fg, gg, og, cs)
    return hs, cache


def lstm_backward(g, cache):
    seq, wx, wh, hs, ig, fg, gg, og, cs = cache
    f, m = seq.shape
    h = wh.shape[1]
    dtype = seq.dtype
    dseq = np.empty((f, m), dtype=dtype)
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros((4 * h, 1), dtype=dtype)
    dh_next = np.zeros(h, dtype=dtype)
    dc_next = np.zeros(h, dtype=dtype)
    zero = np.zeros(h, dtype=dtype)
    for t in range(m - 1, -1, -1):
        c_prev = cs[:, t - 1] if t > 0 else zero
        h_prev = hs[:, t - 1] if t > 0 else zero
        i, fo, ga, o, c = ig[:, t], fg[:, t], gg[:, t], og[:, t], cs[:, t]
        tc = np.tanh(c)
        dh = g[:, t] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        di = dc * ga
        dg = dc * i
        df = dc * c_prev
        dc_next = dc * fo
        da = np.concatenate(
            [
                di * i * (1.0 - i),
                df * fo * (1.0 - fo),
                dg * (1.0 - ga * ga),
                do * o * (1.0 - o),
            ]
        )
        db[:, 0] += da
        dwx += np.outer(da, seq[:, t])
        dwh += np.outer(da, h_prev)
        dseq[:, t] = wx.T @ da
        dh_next = wh.T @ da
    return dseq, dwx, dwh, db
