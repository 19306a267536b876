import numpy as np


def naive_conv2d(x, w, bias, stride, padding, groups):
    """Direct-loop convolution oracle, independent of the im2col path."""
    n, cin, h, wd = x.shape
    oc, icg, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, oc, oh, ow))
    ocg = oc // groups
    for b in range(n):
        for o in range(oc):
            g = o // ocg
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(icg):
                        c = g * icg + ci
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[b, c, i * stride + ki, j * stride + kj] \
                                    * w[o, ci, ki, kj]
                    out[b, o, i, j] = acc
            if bias is not None:
                out[b, o] += bias[o]
    return out
