"""Independent brute-force references for the vectorized implementations.

Everything here is a direct nested-loop transcription of the operation
definitions (or of the gated-unit/attention equation sets) and deliberately
shares no code with the library's im2col/broadcast paths.
"""
import numpy as np


def conv2d_loop(x, w, b=None, stride=(1, 1), padding=(0, 0, 0, 0)):
    """x: (H,W,Cin), w: (kh,kw,Cin,Cout). Cross-correlation, explicit pads."""
    kh, kw, cin, cout = w.shape
    sh, sw = stride
    pt, pb, pl, pr = padding
    xp = np.zeros((x.shape[0] + pt + pb, x.shape[1] + pl + pr, cin),
                  dtype=np.float64)
    xp[pt:pt + x.shape[0], pl:pl + x.shape[1]] = x
    oh = (xp.shape[0] - kh) // sh + 1
    ow = (xp.shape[1] - kw) // sw + 1
    out = np.zeros((oh, ow, cout))
    for oi in range(oh):
        for oj in range(ow):
            for co in range(cout):
                acc = 0.0
                for i in range(kh):
                    for j in range(kw):
                        for ci in range(cin):
                            acc += xp[oi * sh + i, oj * sw + j, ci] \
                                * w[i, j, ci, co]
                out[oi, oj, co] = acc + (b[co] if b is not None else 0.0)
    return out


def conv2d_transpose_loop(x, w, b=None, stride=(1, 1), padding=(0, 0, 0, 0)):
    """Scatter-add transposed convolution; w: (kh,kw,Cin,Cout) with Cin the
    input channels of this op."""
    kh, kw, cin, cout = w.shape
    sh, sw = stride
    pt, pb, pl, pr = padding
    h, wd = x.shape[0], x.shape[1]
    oh = (h - 1) * sh + kh
    ow = (wd - 1) * sw + kw
    full = np.zeros((oh, ow, cout))
    for u in range(h):
        for v in range(wd):
            for i in range(kh):
                for j in range(kw):
                    for ci in range(cin):
                        for co in range(cout):
                            full[u * sh + i, v * sw + j, co] += \
                                x[u, v, ci] * w[i, j, ci, co]
    out = full[pt:oh - pb, pl:ow - pr]
    if b is not None:
        out = out + b
    return out


def dense_loop(x, w, b=None):
    """x: (n_in,), w: (n_in, n_out)."""
    n_in, n_out = w.shape
    out = np.zeros(n_out)
    for o in range(n_out):
        acc = 0.0
        for i in range(n_in):
            acc += x[i] * w[i, o]
        out[o] = acc + (b[o] if b is not None else 0.0)
    return out


def global_pool_loop(x, kind):
    """x: (H,W,C) -> (1,1,C)."""
    h, w, c = x.shape
    out = np.zeros((1, 1, c))
    for ch in range(c):
        vals = [x[i, j, ch] for i in range(h) for j in range(w)]
        out[0, 0, ch] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def channel_pool_loop(x, kind):
    """x: (H,W,C) -> (H,W,1)."""
    h, w, c = x.shape
    out = np.zeros((h, w, 1))
    for i in range(h):
        for j in range(w):
            vals = [x[i, j, ch] for ch in range(c)]
            out[i, j, 0] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def mu_loop(h, weights, biases, padding):
    """Direct transcription of the gated-unit equation set.

    weights/biases: four (w, b) conv parameter pairs for g1, g2, g3, u.
    """
    g1 = _sigmoid(conv2d_loop(h, weights[0], biases[0], padding=padding))
    g2 = _sigmoid(conv2d_loop(h, weights[1], biases[1], padding=padding))
    g3 = _sigmoid(conv2d_loop(h, weights[2], biases[2], padding=padding))
    u = np.tanh(conv2d_loop(h, weights[3], biases[3], padding=padding))
    return g1 * np.tanh(g2 * h + g3 * u)


def cmu_loop(older, recent, mu1, mu2, wo, bo, wh, bh, padding):
    """h1 = MU(MU(older)), same weights twice; h2 = MU(recent); gated out."""
    h1 = mu_loop(mu_loop(older, *mu1, padding), *mu1, padding)
    h2 = mu_loop(recent, *mu2, padding)
    h = h1 + h2
    o = _sigmoid(conv2d_loop(h, wo, bo, padding=padding))
    return o * np.tanh(conv2d_loop(h, wh, bh, padding=padding))


def channel_attention_loop(d, w1, b1, w2, b2, lam, gam):
    """Shared two-layer bottleneck on global max/avg pools; sigmoid once."""
    def mlp(vec):
        hidden = np.maximum(dense_loop(vec, w1, b1), 0.0)
        return dense_loop(hidden, w2, b2)

    xmax = mlp(global_pool_loop(d, "max").reshape(-1))
    xavg = mlp(global_pool_loop(d, "avg").reshape(-1))
    a_c = _sigmoid(lam.reshape(-1) * xmax + gam.reshape(-1) * xavg)
    out = np.zeros_like(d)
    h, w, c = d.shape
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                out[i, j, ch] = a_c[ch] * d[i, j, ch]
    return out


def spatial_attention_loop(d, wmax, bmax, wavg, bavg, lam, gam, padding):
    """Per-map 4x4 convs on channel-wise pools; one sigmoid after combining."""
    xmax = conv2d_loop(channel_pool_loop(d, "max"), wmax, bmax,
                       padding=padding)
    xavg = conv2d_loop(channel_pool_loop(d, "avg"), wavg, bavg,
                       padding=padding)
    a_s = _sigmoid(lam * xmax + gam * xavg)
    out = np.zeros_like(d)
    h, w, c = d.shape
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                out[i, j, ch] = a_s[i, j, 0] * d[i, j, ch]
    return out


def rmse_loop(pred, true):
    """Sum of squared inflow+outflow errors per region, averaged, rooted."""
    pred = np.asarray(pred, np.float64).reshape(-1, *pred.shape[-3:])
    true = np.asarray(true, np.float64).reshape(-1, *true.shape[-3:])
    total, count = 0.0, 0
    for s in range(pred.shape[0]):
        for i in range(pred.shape[1]):
            for j in range(pred.shape[2]):
                di = pred[s, i, j, 0] - true[s, i, j, 0]
                do = pred[s, i, j, 1] - true[s, i, j, 1]
                total += di * di + do * do
                count += 1
    return np.sqrt(total / count)


def mape_ape_loop(pred, true):
    """Clamped-denominator percentage errors; APE is the per-slice region sum
    averaged over slices."""
    pred = np.asarray(pred, np.float64).reshape(-1, *pred.shape[-3:])
    true = np.asarray(true, np.float64).reshape(-1, *true.shape[-3:])
    ratios = []
    for s in range(pred.shape[0]):
        for i in range(pred.shape[1]):
            for j in range(pred.shape[2]):
                num = abs((pred[s, i, j, 0] - true[s, i, j, 0])
                          + (pred[s, i, j, 1] - true[s, i, j, 1]))
                den = max(true[s, i, j, 0] + true[s, i, j, 1], 1.0)
                ratios.append(num / den)
    mape = 100.0 * sum(ratios) / len(ratios)
    ape = 100.0 * sum(ratios) / pred.shape[0]
    return mape, ape
