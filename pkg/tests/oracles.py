"""Independent reference implementations used as test oracles.

Everything in this file is deliberately written as straight-line, loop-based
numpy code with no imports from the package under test.  The implementations
here trade speed for obviousness: nested loops, explicit index formulas, and
direct matrix DFTs.  Test inputs are kept tiny so this is affordable.
"""

import math

import numpy as np


# ---------------------------------------------------------------------------
# convolution / linear / norm primitives (6-nested-loop style)
# ---------------------------------------------------------------------------

def conv2d_loops(x, w, b=None, stride=1, padding="same"):
    """Direct convolution: x (N,Cin,H,W), w (Cout,Cin,k,k), b (Cout,)."""
    n, cin, hh, ww = x.shape
    cout, cin_w, kh, kw = w.shape
    assert cin == cin_w and kh == kw
    k = kh
    if padding == "same":
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(padding)
    xp = np.zeros((n, cin, hh + 2 * pad, ww + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + hh, pad:pad + ww] = x
    oh = (hh + 2 * pad - k) // stride + 1
    ow = (ww + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                acc += (w[co, ci, ky, kx]
                                        * xp[ni, ci, oy * stride + ky, ox * stride + kx])
                    out[ni, co, oy, ox] = acc
    if b is not None:
        out += b.reshape(1, cout, 1, 1)
    return out


def depthwise_conv2d_loops(x, w, b=None):
    """Depthwise convolution, same padding: x (N,C,H,W), w (C,1,k,k)."""
    n, c, hh, ww = x.shape
    cw, one, kh, kw = w.shape
    assert cw == c and one == 1 and kh == kw
    k = kh
    pad = k // 2
    xp = np.zeros((n, c, hh + 2 * pad, ww + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + hh, pad:pad + ww] = x
    out = np.zeros_like(x)
    for ni in range(n):
        for ci in range(c):
            for oy in range(hh):
                for ox in range(ww):
                    acc = 0.0
                    for ky in range(k):
                        for kx in range(k):
                            acc += w[ci, 0, ky, kx] * xp[ni, ci, oy + ky, ox + kx]
                    out[ni, ci, oy, ox] = acc
    if b is not None:
        out += b.reshape(1, c, 1, 1)
    return out


def linear_loops(x, w, b=None):
    """Per-site channel map: x (N,C,H,W), w (Cout,Cin) applied at every (n,h,w)."""
    n, cin, hh, ww = x.shape
    cout, cin_w = w.shape
    assert cin == cin_w
    out = np.zeros((n, cout, hh, ww), dtype=x.dtype)
    for ni in range(n):
        for hy in range(hh):
            for wx in range(ww):
                vec = x[ni, :, hy, wx]
                for co in range(cout):
                    out[ni, co, hy, wx] = float(np.dot(w[co], vec))
    if b is not None:
        out += b.reshape(1, cout, 1, 1)
    return out


def layernorm_loops(x, gamma, beta, eps):
    """Channel-axis layer norm per spatial site."""
    n, c, hh, ww = x.shape
    out = np.zeros_like(x)
    for ni in range(n):
        for hy in range(hh):
            for wx in range(ww):
                vec = x[ni, :, hy, wx]
                mu = vec.mean()
                var = vec.var()
                out[ni, :, hy, wx] = (vec - mu) / math.sqrt(var + eps) * gamma + beta
    return out


def gelu_scalar(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def gelu_loops(x):
    flat = np.array([gelu_scalar(v) for v in x.ravel()], dtype=x.dtype)
    return flat.reshape(x.shape)


def sigmoid_loops(x):
    flat = np.array([1.0 / (1.0 + math.exp(-v)) for v in x.ravel()], dtype=x.dtype)
    return flat.reshape(x.shape)


def gap_loops(x):
    n, c, hh, ww = x.shape
    out = np.zeros((n, c, 1, 1), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            out[ni, ci, 0, 0] = x[ni, ci].sum() / (hh * ww)
    return out


def softmax_rows(m):
    """Softmax over the last axis of a 2D matrix."""
    out = np.zeros_like(m)
    for i in range(m.shape[0]):
        row = m[i] - m[i].max()
        e = np.exp(row)
        out[i] = e / e.sum()
    return out


def pixel_unshuffle_index(x, r=2):
    """Space-to-depth via the explicit index formula."""
    n, c, hh, ww = x.shape
    out = np.zeros((n, c * r * r, hh // r, ww // r), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for i in range(r):
                for j in range(r):
                    for oy in range(hh // r):
                        for ox in range(ww // r):
                            out[ni, ci * r * r + i * r + j, oy, ox] = \
                                x[ni, ci, oy * r + i, ox * r + j]
    return out


# ---------------------------------------------------------------------------
# direct DFT oracle (orthonormal 1/sqrt(HW) convention)
# ---------------------------------------------------------------------------

def dft2d_matrix(x):
    """Direct 2D DFT of a real/complex (H,W) array by explicit matrix product."""
    hh, ww = x.shape
    uh = np.exp(-2j * np.pi * np.outer(np.arange(hh), np.arange(hh)) / hh)
    uw = np.exp(-2j * np.pi * np.outer(np.arange(ww), np.arange(ww)) / ww)
    return (uh @ x.astype(complex) @ uw.T) / math.sqrt(hh * ww)


def idft2d_matrix(xf):
    """Inverse of dft2d_matrix (conjugate kernels, same normalization)."""
    hh, ww = xf.shape
    uh = np.exp(2j * np.pi * np.outer(np.arange(hh), np.arange(hh)) / hh)
    uw = np.exp(2j * np.pi * np.outer(np.arange(ww), np.arange(ww)) / ww)
    return (uh @ xf @ uw.T) / math.sqrt(hh * ww)


def dft2d_batch(x):
    """Apply dft2d_matrix over the spatial dims of an (N,C,H,W) array."""
    out = np.zeros(x.shape, dtype=complex)
    for ni in range(x.shape[0]):
        for ci in range(x.shape[1]):
            out[ni, ci] = dft2d_matrix(x[ni, ci])
    return out


def idft2d_batch(xf):
    out = np.zeros(xf.shape, dtype=complex)
    for ni in range(xf.shape[0]):
        for ci in range(xf.shape[1]):
            out[ni, ci] = idft2d_matrix(xf[ni, ci])
    return out


# ---------------------------------------------------------------------------
# architecture transcription oracles
# ---------------------------------------------------------------------------

def epgo_reference(x, ln_gamma, ln_beta, w1, b1, w2, b2, eps=1e-6):
    """Straight-line transcription of the dynamic-k prompt operator.

    Normalize -> linear -> ReLU -> linear -> sigmoid -> flatten -> mean.
    Returns one fraction per batch item.
    """
    xn = layernorm_loops(x, ln_gamma, ln_beta, eps)
    h = linear_loops(xn, w1, b1)
    h = np.maximum(h, 0.0)
    g = linear_loops(h, w2, b2)
    s = sigmoid_loops(g)
    return np.array([s[ni].ravel().mean() for ni in range(x.shape[0])])


def topk_rows_reference(m, k):
    """Per-row top-k mask with stable lowest-index tie-breaking; m is 2D."""
    rows, cols = m.shape
    mask = np.zeros((rows, cols))
    for i in range(rows):
        order = sorted(range(cols), key=lambda j: (-m[i, j], j))
        for j in order[:k]:
            mask[i, j] = 1.0
    return mask


def dense_channel_attention_reference(x, qkv_pw_w, qkv_pw_b, qkv_dw_w, qkv_dw_b,
                                      out_w, out_b, heads, temperature):
    """Full channel self-attention without any sparsification.

    Pointwise then depthwise qkv projection, per-head C_h x C_h attention with
    softmax over rows of Q K^T * temperature / sqrt(HW), merged by the output
    pointwise projection.
    """
    n, c, hh, ww = x.shape
    qkv = conv2d_loops(x, qkv_pw_w, qkv_pw_b, 1, "same")
    qkv = depthwise_conv2d_loops(qkv, qkv_dw_w, qkv_dw_b)
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    ch = c // heads
    out = np.zeros_like(x)
    for ni in range(n):
        for he in range(heads):
            qm = q[ni, he * ch:(he + 1) * ch].reshape(ch, hh * ww)
            km = k[ni, he * ch:(he + 1) * ch].reshape(ch, hh * ww)
            vm = v[ni, he * ch:(he + 1) * ch].reshape(ch, hh * ww)
            logits = (qm @ km.T) * temperature[he] / math.sqrt(hh * ww)
            attn = softmax_rows(logits)
            out[ni, he * ch:(he + 1) * ch] = (attn @ vm).reshape(ch, hh, ww)
    return conv2d_loops(out, out_w, out_b, 1, "same")


def spr_sa_reference(x, lin_in_w, lin_in_b, dw3_w, dw3_b, pw_mid_w, pw_mid_b,
                     pw_out_w, pw_out_b):
    """Transcription of the convolutional spatial attention branch."""
    t = linear_loops(x, lin_in_w, lin_in_b)
    t = depthwise_conv2d_loops(t, dw3_w, dw3_b)
    f_l = conv2d_loops(t, pw_mid_w, pw_mid_b, 1, "same")
    f_sp = gap_loops(f_l)
    prod = f_sp * f_l
    return conv2d_loops(gelu_loops(prod), pw_out_w, pw_out_b, 1, "same")


def spatial_map_reference(x, pw1_w, pw1_b, pw2_w, pw2_b):
    h = conv2d_loops(x, pw1_w, pw1_b, 1, "same")
    h = gelu_loops(h)
    h = conv2d_loops(h, pw2_w, pw2_b, 1, "same")
    return sigmoid_loops(h)


def channel_map_reference(x, pw1_w, pw1_b, pw2_w, pw2_b):
    g = gap_loops(x)
    h = conv2d_loops(g, pw1_w, pw1_b, 1, "same")
    h = gelu_loops(h)
    h = conv2d_loops(h, pw2_w, pw2_b, 1, "same")
    return sigmoid_loops(h)


def align_fuse_reference(f_spr, f_spc, map_s, map_c):
    return f_spr * map_s + f_spc * map_c


def freq_interact_reference(f_hat, lin_pre_w, lin_pre_b, lin_freq_w, lin_freq_b,
                            skip=True):
    """Transcription of the frequency-domain fusion stage via the direct DFT."""
    c = f_hat.shape[1]
    pre = linear_loops(f_hat, lin_pre_w, lin_pre_b)
    spec = dft2d_batch(pre)
    stack = np.concatenate([spec.real, spec.imag], axis=1)
    mixed = linear_loops(stack, lin_freq_w, lin_freq_b)
    back = idft2d_batch(mixed[:, :c] + 1j * mixed[:, c:])
    out = back.real
    if skip:
        out = out + f_hat
    return out


def msgn_reference(x, pw_in_w, pw_in_b, dw3_w, dw3_b, dw5_w, dw5_b,
                   lin_out_w, lin_out_b):
    """Transcription of the multi-scale gated feed-forward path."""
    h = conv2d_loops(x, pw_in_w, pw_in_b, 1, "same")
    half = h.shape[1] // 2
    h1, h2 = h[:, :half], h[:, half:]
    gate = depthwise_conv2d_loops(h1, dw3_w, dw3_b)
    value = depthwise_conv2d_loops(h2, dw5_w, dw5_b)
    return linear_loops(gate * value, lin_out_w, lin_out_b)


# ---------------------------------------------------------------------------
# optimizer hand-step
# ---------------------------------------------------------------------------

def adam_scalar_steps(w0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Hand-stepped scalar Adam trajectory for a fixed gradient sequence."""
    w, m, v = float(w0), 0.0, 0.0
    history = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
        history.append(w)
    return history


# ---------------------------------------------------------------------------
# parameter-shape enumeration
# ---------------------------------------------------------------------------

def enumerate_param_shapes(base_channels, blocks_per_level, heads_per_level,
                           ffn_expansion=2.0, use_bias=True):
    """Walk the architecture layout and list every (name, shape) pair.

    Mirrors the documented layout: 7x7 embedding conv; encoder levels 1-3 with
    unshuffle+reduce downsampling; latent level 4; decoder levels 3-1 with
    expand+shuffle upsampling and concat+reduce skip fusion; 3x3 output head.
    """
    shapes = []

    def add(name, shape):
        shapes.append((name, tuple(shape)))

    def add_conv(name, cout, cin, k):
        add(name + ".weight", (cout, cin, k, k))
        if use_bias:
            add(name + ".bias", (cout,))

    def add_dw(name, c, k):
        add(name + ".weight", (c, 1, k, k))
        if use_bias:
            add(name + ".bias", (c,))

    def add_lin(name, cout, cin):
        add(name + ".weight", (cout, cin))
        if use_bias:
            add(name + ".bias", (cout,))

    def add_block(prefix, c, heads):
        hidden = max(math.ceil(c / 4), 4)
        reduce = max(math.ceil(c / 8), 1)
        ffn_hidden = int(c * ffn_expansion)
        add(prefix + ".norm1.gamma", (c,))
        add(prefix + ".norm1.beta", (c,))
        add_conv(prefix + ".spc.qkv_pw", 3 * c, c, 1)
        add_dw(prefix + ".spc.qkv_dw", 3 * c, 3)
        add_conv(prefix + ".spc.out_proj", c, c, 1)
        add(prefix + ".spc.temperature", (heads,))
        add(prefix + ".epgo.ln_gamma", (c,))
        add(prefix + ".epgo.ln_beta", (c,))
        add_lin(prefix + ".epgo.w1", hidden, c)
        add_lin(prefix + ".epgo.w2", c, hidden)
        add_lin(prefix + ".spr.lin_in", c, c)
        add_dw(prefix + ".spr.dw3", c, 3)
        add_conv(prefix + ".spr.pw_mid", c, c, 1)
        add_conv(prefix + ".spr.pw_out", c, c, 1)
        add_conv(prefix + ".aafm.spatial_pw1", reduce, c, 1)
        add_conv(prefix + ".aafm.spatial_pw2", 1, reduce, 1)
        add_conv(prefix + ".aafm.channel_pw1", reduce, c, 1)
        add_conv(prefix + ".aafm.channel_pw2", c, reduce, 1)
        add_lin(prefix + ".aafm.lin_pre", c, c)
        add_lin(prefix + ".aafm.lin_freq", 2 * c, 2 * c)
        add(prefix + ".norm2.gamma", (c,))
        add(prefix + ".norm2.beta", (c,))
        add_conv(prefix + ".msgn.pw_in", 2 * ffn_hidden, c, 1)
        add_dw(prefix + ".msgn.dw3", ffn_hidden, 3)
        add_dw(prefix + ".msgn.dw5", ffn_hidden, 5)
        add_lin(prefix + ".msgn.lin_out", c, ffn_hidden)

    c = base_channels
    dims = [c, 2 * c, 4 * c, 8 * c]

    add_conv("embed", c, 3, 7)
    for lvl in (1, 2, 3):
        for j in range(blocks_per_level[lvl - 1]):
            add_block(f"enc{lvl}.block{j}", dims[lvl - 1], heads_per_level[lvl - 1])
        add_conv(f"down{lvl}.reduce", 2 * dims[lvl - 1], 4 * dims[lvl - 1], 1)
    for j in range(blocks_per_level[3]):
        add_block(f"latent.block{j}", dims[3], heads_per_level[3])
    for lvl in (3, 2, 1):
        add_conv(f"up{lvl + 1}.expand", 2 * dims[lvl], dims[lvl], 1)
        add_conv(f"skip{lvl}.fuse", dims[lvl - 1], 2 * dims[lvl - 1], 1)
        for j in range(blocks_per_level[lvl - 1]):
            add_block(f"dec{lvl}.block{j}", dims[lvl - 1], heads_per_level[lvl - 1])
    add_conv("output", 3, c, 3)
    return shapes


def count_params(base_channels, blocks_per_level, heads_per_level,
                 ffn_expansion=2.0, use_bias=True):
    shapes = enumerate_param_shapes(base_channels, blocks_per_level,
                                    heads_per_level, ffn_expansion, use_bias)
    return sum(int(np.prod(s)) for _, s in shapes)
