# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled valid-mode 2-D convolution kernels (stride 1, float64).

Layouts: x (B, Ci, H, W), w (Co, Ci, s, t), y (B, Co, H-s+1, W-t+1).
All loops run without the GIL and sum in a fixed order, so results are
bit-reproducible for a given input.
"""
import numpy as np

DEF JB = 32


cdef void _conv_row(const double* xbase, Py_ssize_t x_ci_stride, Py_ssize_t W,
                    const double* wbase, Py_ssize_t Ci, Py_ssize_t s, Py_ssize_t t,
                    double bias, double* orow, Py_ssize_t Wo) noexcept nogil:
    cdef double acc[JB]
    cdef Py_ssize_t j = 0, jj, jn, ci, a, bb
    cdef const double* xrow
    cdef const double* wrow
    cdef double wv
    while j < Wo:
        jn = Wo - j
        if jn >= JB:
            for jj in range(JB):
                acc[jj] = bias
            for ci in range(Ci):
                for a in range(s):
                    xrow = xbase + ci * x_ci_stride + a * W + j
                    wrow = wbase + (ci * s + a) * t
                    for bb in range(t):
                        wv = wrow[bb]
                        for jj in range(JB):
                            acc[jj] += wv * xrow[jj + bb]
            for jj in range(JB):
                orow[j + jj] = acc[jj]
            j += JB
        else:
            for jj in range(jn):
                acc[jj] = bias
            for ci in range(Ci):
                for a in range(s):
                    xrow = xbase + ci * x_ci_stride + a * W + j
                    wrow = wbase + (ci * s + a) * t
                    for bb in range(t):
                        wv = wrow[bb]
                        for jj in range(jn):
                            acc[jj] += wv * xrow[jj + bb]
            for jj in range(jn):
                orow[j + jj] = acc[jj]
            j += jn


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = w.shape[0], s = w.shape[2], t = w.shape[3]
    if w.shape[1] != Ci or b.shape[0] != Co:
        raise ValueError("filter bank does not match input channels")
    if s > H or t > W:
        raise ValueError("filter window larger than input")
    cdef Py_ssize_t Ho = H - s + 1, Wo = W - t + 1
    out = np.empty((B, Co, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t n, co, i
    with nogil:
        for n in range(B):
            for co in range(Co):
                for i in range(Ho):
                    _conv_row(&x[n, 0, i, 0], H * W, W, &w[co, 0, 0, 0],
                              Ci, s, t, b[co], &o[n, co, i, 0], Wo)
    return out


cdef void _corr_lanes32(const double* dyrow, const double* xrow, Py_ssize_t Wo,
                        double* out, Py_ssize_t nl) noexcept nogil:
    # out[l] += sum_j dyrow[j] * xrow[j + l] for l < nl; xrow must hold Wo + 32 values
    cdef double acc[JB]
    cdef Py_ssize_t j, jj
    cdef double d
    cdef const double* xr
    for jj in range(JB):
        acc[jj] = 0.0
    for j in range(Wo):
        d = dyrow[j]
        xr = xrow + j
        for jj in range(JB):
            acc[jj] += d * xr[jj]
    for jj in range(nl):
        out[jj] += acc[jj]


def conv2d_backward_weight(const double[:, :, :, ::1] x, const double[:, :, :, ::1] dy,
                           Py_ssize_t s, Py_ssize_t t):
    """Gradient of the loss w.r.t. the filter bank, summed over the batch.

    Each (example, output map, output row, input map, window row) contributes
    the cross-correlation of an output-gradient row with an input row at lags
    0..t-1, accumulated in lanes over the lag.
    """
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = dy.shape[1], Ho = dy.shape[2], Wo = dy.shape[3]
    if dy.shape[0] != B or Ho != H - s + 1 or Wo != W - t + 1:
        raise ValueError("output gradient shape does not match input and window")
    dw_arr = np.zeros((Co, Ci, s, t), dtype=np.float64)
    cdef double[:, :, :, ::1] dw = dw_arr
    # zero-padded copy so every lane read stays in bounds
    xp_arr = np.zeros((B, Ci, H, W + JB), dtype=np.float64)
    xp_arr[:, :, :, :W] = x
    cdef double[:, :, :, ::1] xp = xp_arr
    cdef Py_ssize_t n, co, ci, i, a, l0, nl
    with nogil:
        for n in range(B):
            for co in range(Co):
                for i in range(Ho):
                    for ci in range(Ci):
                        for a in range(s):
                            l0 = 0
                            while l0 < t:
                                nl = t - l0
                                if nl > JB:
                                    nl = JB
                                _corr_lanes32(&dy[n, co, i, 0], &xp[n, ci, i + a, l0], Wo,
                                              &dw[co, ci, a, l0], nl)
                                l0 += nl
    return dw_arr


# -- batch-norm, ReLU and max pooling ---------------------------------------------
# Pooled maps are addressed as (B, C, M): M = Ho*Wo pooled cells, or 1 when the
# whole map is pooled. idx holds the flat H*W position of each selected input.

def channel_sums(const double[:, :, :, ::1] z):
    cdef Py_ssize_t B = z.shape[0], C = z.shape[1], HW = z.shape[2] * z.shape[3]
    out = np.zeros(C, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t n, c, k
    cdef const double* p
    cdef double acc
    with nogil:
        for c in range(C):
            acc = 0.0
            for n in range(B):
                p = &z[n, c, 0, 0]
                for k in range(HW):
                    acc += p[k]
            o[c] = acc
    return out


def channel_sqdev(const double[:, :, :, ::1] z, const double[::1] mean):
    cdef Py_ssize_t B = z.shape[0], C = z.shape[1], HW = z.shape[2] * z.shape[3]
    out = np.zeros(C, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t n, c, k
    cdef const double* p
    cdef double acc, d, m
    with nogil:
        for c in range(C):
            acc = 0.0
            m = mean[c]
            for n in range(B):
                p = &z[n, c, 0, 0]
                for k in range(HW):
                    d = p[k] - m
                    acc += d * d
            o[c] = acc
    return out


def bn_relu_pool(const double[:, :, :, ::1] z, const double[::1] mu, const double[::1] inv,
                 const double[::1] gamma, const double[::1] beta, Py_ssize_t ph, Py_ssize_t pw):
    """Normalize, rectify and max-pool non-overlapping ph x pw windows (ph = 0: whole map)."""
    cdef Py_ssize_t B = z.shape[0], C = z.shape[1], H = z.shape[2], W = z.shape[3]
    cdef Py_ssize_t Ho, Wo, M
    if ph == 0:
        Ho, Wo = 1, 1
    else:
        Ho, Wo = H // ph, W // pw
    M = Ho * Wo
    out = np.empty((B, C, M), dtype=np.float64)
    idx = np.empty((B, C, M), dtype=np.int64)
    cdef double[:, :, ::1] o = out
    cdef long long[:, :, ::1] ix = idx
    cdef Py_ssize_t n, c, i, j, a, bb, pos, bestpos, k
    cdef double m, iv, g, be, u, best
    cdef const double* p
    with nogil:
        for n in range(B):
            for c in range(C):
                m = mu[c]
                iv = inv[c]
                g = gamma[c]
                be = beta[c]
                p = &z[n, c, 0, 0]
                if ph == 0:
                    best = -1.0
                    bestpos = 0
                    for k in range(H * W):
                        u = (p[k] - m) * iv * g + be
                        if u < 0.0:
                            u = 0.0
                        if u > best:
                            best = u
                            bestpos = k
                    o[n, c, 0] = best
                    ix[n, c, 0] = bestpos
                else:
                    for i in range(Ho):
                        for j in range(Wo):
                            best = -1.0
                            bestpos = 0
                            for a in range(ph):
                                for bb in range(pw):
                                    pos = (i * ph + a) * W + j * pw + bb
                                    u = (p[pos] - m) * iv * g + be
                                    if u < 0.0:
                                        u = 0.0
                                    if u > best:
                                        best = u
                                        bestpos = pos
                            o[n, c, i * Wo + j] = best
                            ix[n, c, i * Wo + j] = bestpos
    return out, idx


def pool_grad_stats(const double[:, :, ::1] dout, const long long[:, :, ::1] idx,
                    const double[:, :, :, ::1] z, const double[::1] mu, const double[::1] inv,
                    const double[::1] gamma, const double[::1] beta):
    """ReLU-gated gradient at the pooled positions plus per-channel sums of it
    (``s1``) and of it times the normalized input (``s2``)."""
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1], M = dout.shape[2]
    du_arr = np.empty((B, C, M), dtype=np.float64)
    s1_arr = np.zeros(C, dtype=np.float64)
    s2_arr = np.zeros(C, dtype=np.float64)
    cdef double[:, :, ::1] du = du_arr
    cdef double[::1] s1 = s1_arr
    cdef double[::1] s2 = s2_arr
    cdef Py_ssize_t n, c, k
    cdef double xh, u, d
    cdef const double* p
    with nogil:
        for c in range(C):
            for n in range(B):
                p = &z[n, c, 0, 0]
                for k in range(M):
                    xh = (p[idx[n, c, k]] - mu[c]) * inv[c]
                    u = xh * gamma[c] + beta[c]
                    d = dout[n, c, k] if u > 0.0 else 0.0
                    du[n, c, k] = d
                    s1[c] += d
                    s2[c] += d * xh
    return du_arr, s1_arr, s2_arr


def bn_input_grad(const double[:, :, ::1] du, const long long[:, :, ::1] idx,
                  const double[:, :, :, ::1] z, const double[::1] mu, const double[::1] inv,
                  const double[::1] gamma, const double[::1] s1, const double[::1] s2,
                  double count, bint train):
    """Gradient w.r.t. the pre-normalization map given the pooled-position gradients."""
    cdef Py_ssize_t B = z.shape[0], C = z.shape[1], HW = z.shape[2] * z.shape[3], M = du.shape[2]
    dz_arr = np.zeros((B, C, z.shape[2], z.shape[3]), dtype=np.float64)
    cdef double[:, :, :, ::1] dz = dz_arr
    cdef Py_ssize_t n, c, k
    cdef double g, mb, mg, m, iv
    cdef const double* p
    cdef double* q
    with nogil:
        for n in range(B):
            for c in range(C):
                g = gamma[c] * inv[c]
                p = &z[n, c, 0, 0]
                q = &dz[n, c, 0, 0]
                if train:
                    mb = s1[c] / count
                    mg = s2[c] / count
                    m = mu[c]
                    iv = inv[c]
                    for k in range(HW):
                        q[k] = -g * (mb + (p[k] - m) * iv * mg)
                for k in range(M):
                    q[idx[n, c, k]] += g * du[n, c, k]
    return dz_arr
