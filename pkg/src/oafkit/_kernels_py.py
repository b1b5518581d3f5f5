"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same functions with the same argument order; the
package picks one at import time (see ``oafkit.kernels``).
"""
import numpy as np


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_forward(xproj, wh, reverse):
    """Run the LSTM recurrence over precomputed input projections.

    xproj: (N, T, 4H) input contribution ``x @ Wx + b`` with gate order i, f, g, o.
    wh: (H, 4H) recurrent weights.
    Returns h (N, T, H), c (N, T, H) and activated gates (N, T, 4H).
    """
    n, t_len, four_h = xproj.shape
    hid = four_h // 4
    dtype = xproj.dtype
    h_all = np.zeros((n, t_len, hid), dtype)
    c_all = np.zeros((n, t_len, hid), dtype)
    gates = np.zeros((n, t_len, four_h), dtype)
    h = np.zeros((n, hid), dtype)
    c = np.zeros((n, hid), dtype)
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in steps:
        z = xproj[:, t] + h @ wh
        i = _sigmoid(z[:, :hid])
        f = _sigmoid(z[:, hid:2 * hid])
        g = np.tanh(z[:, 2 * hid:3 * hid])
        o = _sigmoid(z[:, 3 * hid:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t, :hid] = i
        gates[:, t, hid:2 * hid] = f
        gates[:, t, 2 * hid:3 * hid] = g
        gates[:, t, 3 * hid:] = o
        c_all[:, t] = c
        h_all[:, t] = h
    return h_all, c_all, gates


def lstm_backward(dh_all, h_all, c_all, gates, wh, reverse):
    """Backpropagate through :func:`lstm_forward`; returns (dxproj, dwh)."""
    n, t_len, hid = dh_all.shape
    dtype = dh_all.dtype
    dxproj = np.zeros((n, t_len, 4 * hid), dtype)
    dwh = np.zeros_like(wh)
    dh_next = np.zeros((n, hid), dtype)
    dc_next = np.zeros((n, hid), dtype)
    zeros = np.zeros((n, hid), dtype)
    steps = range(t_len) if reverse else range(t_len - 1, -1, -1)
    for t in steps:
        prev = t + 1 if reverse else t - 1
        first = prev < 0 or prev >= t_len
        h_prev = zeros if first else h_all[:, prev]
        c_prev = zeros if first else c_all[:, prev]
        i = gates[:, t, :hid]
        f = gates[:, t, hid:2 * hid]
        g = gates[:, t, 2 * hid:3 * hid]
        o = gates[:, t, 3 * hid:]
        dh = dh_all[:, t] + dh_next
        tc = np.tanh(c_all[:, t])
        dc = dc_next + dh * o * (1 - tc * tc)
        dz = dxproj[:, t]
        dz[:, :hid] = dc * g * i * (1 - i)
        dz[:, hid:2 * hid] = dc * c_prev * f * (1 - f)
        dz[:, 2 * hid:3 * hid] = dc * i * (1 - g * g)
        dz[:, 3 * hid:] = dh * tc * o * (1 - o)
        dc_next = dc * f
        dwh += h_prev.T @ dz
        dh_next = dz @ wh.T
    return dxproj, dwh


def levenshtein(a, b):
    """Edit distance between two int64 arrays (two-row dynamic programme)."""
    n, m = len(a), len(b)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ai == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[m]


def im2col(xp, kh, kw, sh, sw, dh, dw, ho, wo):
    """Patch matrix (N*ho*wo, C*kh*kw) of an already padded NCHW input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = xp[:, :, i * dh:i * dh + sh * (ho - 1) + 1:sh,
                                 j * dw:j * dw + sw * (wo - 1) + 1:sw].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, hp, wp, kh, kw, sh, sw, dh, dw, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add patch gradients into (N, C, hp, wp)."""
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(n, ho, wo, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i * dh:i * dh + sh * (ho - 1) + 1:sh,
                j * dw:j * dw + sw * (wo - 1) + 1:sw] += blocks[..., i, j].transpose(0, 3, 1, 2)
    return out
