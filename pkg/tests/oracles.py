"""Independent reference implementations the engine is checked against.

Everything here is deliberately naive -- nested loops, direct formulas,
extended precision -- and shares no code with the package.
"""

import numpy as np


def conv2d_naive(x, w, b, stride=1, pad=0):
    """Direct 6-nested-loop cross-correlation with bias."""
    n, cin, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(n):
        for f in range(k):
            for r in range(ho):
                for c in range(wo):
                    acc = b[f]
                    for ch in range(cin):
                        for dr in range(kh):
                            for dc in range(kw):
                                acc += xp[i, ch, r * stride + dr, c * stride + dc] * w[f, ch, dr, dc]
                    out[i, f, r, c] = acc
    return out


def softmax_logloss_longdouble(logits, labels):
    """Summed log-loss evaluated directly from the formula in 80-bit precision."""
    x = np.asarray(logits, dtype=np.longdouble)
    total = np.longdouble(0.0)
    for i, c in enumerate(labels):
        total -= x[i, c] - np.log(np.sum(np.exp(x[i])))
    return float(total)


def forward_replay(net, batch):
    """Layer-by-layer forward pass using the naive conv; returns class logits."""
    a = batch
    for params, (k, ksz, pad), pooled in zip(net.conv_params, net.config.conv, net.config.pool):
        a = conv2d_naive(a, params.weights.data, params.bias.data, stride=1, pad=pad)
        a = np.maximum(a, 0.0)
        if pooled:
            n, c, h, w = a.shape
            a = a.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
    a = a.reshape(a.shape[0], -1)
    a = np.maximum(a @ net.fc_hidden.weights.data.T + net.fc_hidden.bias.data, 0.0)
    return a @ net.class_head.weights.data.T + net.class_head.bias.data
