"""Independent reference implementations, written as plainly as possible (explicit loops, float64).

They share no code with the package and exist only to cross-check it.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for a in range(kh):
                            for q in range(kw):
                                r = i * stride - padding + a * dilation
                                s = j * stride - padding + q * dilation
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[bi, g * cg + ci, r, s] * w[oc, ci, a, q]
                    out[bi, oc, i, j] = acc + (0.0 if b is None else b[oc])
    return out


def pool2d(kind, x, k, stride, padding):
    x = np.asarray(x, np.float64)
    n, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for bi in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    vals = []
                    for a in range(k):
                        for q in range(k):
                            r, s = i * stride - padding + a, j * stride - padding + q
                            if 0 <= r < h and 0 <= s < w:
                                vals.append(x[bi, ch, r, s])
                    out[bi, ch, i, j] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def batchnorm_train(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, np.float64)
    out = np.empty_like(x)
    for ch in range(x.shape[1]):
        v = x[:, ch]
        mu = v.sum() / v.size
        var = ((v - mu) ** 2).sum() / v.size
        out[:, ch] = gamma[ch] * (v - mu) / math.sqrt(var + eps) + beta[ch]
    return out


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def lstm(seq, w_ih, w_hh, bias, reverse=False):
    """Scalar-loop LSTM; gate rows are input, forget, cell, output."""
    seq = np.asarray(seq, np.float64)
    b, t, f = seq.shape
    hdim = w_hh.shape[1]
    out = np.zeros((b, t, hdim))
    steps = range(t - 1, -1, -1) if reverse else range(t)
    for bi in range(b):
        h = np.zeros(hdim)
        c = np.zeros(hdim)
        for s in steps:
            z = w_ih @ seq[bi, s] + w_hh @ h + bias
            i_g = np.array([_sigmoid(v) for v in z[:hdim]])
            f_g = np.array([_sigmoid(v) for v in z[hdim:2 * hdim]])
            g_g = np.tanh(z[2 * hdim:3 * hdim])
            o_g = np.array([_sigmoid(v) for v in z[3 * hdim:]])
            c = f_g * c + i_g * g_g
            h = o_g * np.tanh(c)
            out[bi, s] = h
    return out


def attention(seq, w, v):
    seq = np.asarray(seq, np.float64)
    pooled = np.zeros((seq.shape[0], seq.shape[2]))
    for bi in range(seq.shape[0]):
        scores = np.array([v @ np.tanh(w @ h) for h in seq[bi]])
        e = np.exp(scores - scores.max())
        a = e / e.sum()
        pooled[bi] = (a[:, None] * seq[bi]).sum(axis=0)
    return pooled


def softmax(z):
    z = np.asarray(z, np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def derive_cell(alpha, nodes):
    """Reference discretisation by exhaustive pair search: for each node choose the pair of
    incoming edges with the largest summed best-op weight, preferring lower source nodes on ties."""
    op_count = alpha.shape[1]
    none_index = op_count - 1
    row = 0
    edges = []
    for j in range(nodes):
        sources = list(range(2 + j))
        info = {}
        for src in sources:
            p = softmax(alpha[row])
            best = max(range(none_index), key=lambda k: (p[k], -k))
            info[src] = (best, p[best])
            row += 1
        best_pair = None
        for a in sources:
            for b in sources:
                if a >= b:
                    continue
                if best_pair is None or _pair_better(info, (a, b), best_pair):
                    best_pair = (a, b)
        for src in best_pair:
            edges.append((info[src][0], src, j + 2))
    return edges


def _pair_better(info, cand, incumbent):
    """Lexicographic: the pair whose sorted strengths dominate; ties resolved towards lower sources."""
    def key(pair):
        strengths = sorted((info[s][1] for s in pair), reverse=True)
        return strengths, [-s for s in sorted(pair)]
    ks, ki = key(cand), key(incumbent)
    if not np.allclose(ks[0], ki[0], rtol=0, atol=1e-15):
        # a pair is better when it contains the strongest edge, then the second strongest
        return ks[0] > ki[0]
    return ks[1] > ki[1]


def cosine_lr(lr_max, lr_min, t, total):
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / total))


def adam(grads, lr, b1, b2, eps, wd, p0):
    p = float(p0)
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        g = g + wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


def slaney_mel(f):
    f = float(f)
    if f < 1000.0:
        return 3.0 * f / 200.0
    return 15.0 + 27.0 * math.log(f / 1000.0) / math.log(6.4)


def stft_frames(wav, n_fft, hop):
    """Frame-by-frame power spectrum with an explicit periodic Hann window."""
    wav = np.concatenate([np.zeros(n_fft // 2), np.asarray(wav, np.float64), np.zeros(n_fft // 2)])
    window = np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n_fft) for i in range(n_fft)])
    cols = []
    start = 0
    while start + n_fft <= wav.size:
        cols.append(np.abs(np.fft.fft(wav[start:start + n_fft] * window)[: n_fft // 2 + 1]) ** 2)
        start += hop
    return np.array(cols).T
