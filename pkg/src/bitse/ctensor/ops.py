"""Differentiable operations on ComplexTensor.

Every backward rule emits gradients in the dL/dRe + j*dL/dIm packing
(see tensor.py).  For a holomorphic building block f this is
conj(f'(z)) * g; non-holomorphic ops (crelu, abs, real/imag) are derived
from the real/imaginary partials directly.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ComplexTensor, TensorError, record, tensor, unbroadcast


def _wrap(x, like=None):
    if isinstance(x, ComplexTensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return tensor(np.asarray(x), dtype=dtype)


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b, a)
    out = a.data + b.data
    ash, bsh = a.shape, b.shape
    return record(out, (a, b), lambda g: (unbroadcast(g, ash),
                                          unbroadcast(g, bsh)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b, a)
    out = a.data - b.data
    ash, bsh = a.shape, b.shape
    return record(out, (a, b), lambda g: (unbroadcast(g, ash),
                                          unbroadcast(-g, bsh)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b, a)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return record(out, (a, b),
                  lambda g: (unbroadcast(g * np.conj(bd), a.shape),
                             unbroadcast(g * np.conj(ad), b.shape)))


def div(a, b):
    a, b = _wrap(a), _wrap(b, a)
    out = a.data / b.data
    ad, bd = a.data, b.data
    return record(out, (a, b),
                  lambda g: (unbroadcast(g * np.conj(1.0 / bd), a.shape),
                             unbroadcast(g * np.conj(-ad / (bd * bd)), b.shape)))


def neg(a):
    return record(-a.data, (a,), lambda g: (-g,))


def conj(a):
    return record(np.conj(a.data), (a,), lambda g: (np.conj(g),))


def creal(a):
    out = a.data.real.astype(a.data.dtype)
    return record(out, (a,), lambda g: (g.real.astype(a.data.dtype),))


def cimag(a):
    out = a.data.imag.astype(a.data.dtype)
    return record(out, (a,), lambda g: (1j * g.real,))


def cabs(a):
    mag = np.abs(a.data)
    ad = a.data

    def bwd(g):
        safe = np.where(mag > 0, mag, 1.0)
        return (g.real * np.where(mag > 0, ad / safe, 0.0),)

    return record(mag.astype(a.data.dtype), (a,), bwd)


def crelu(a):
    """Eq.-style complex ReLU: clamp real and imaginary parts at zero."""
    re, im = a.data.real, a.data.imag
    out = np.maximum(re, 0) + 1j * np.maximum(im, 0)

    def bwd(g):
        return (g.real * (re > 0) + 1j * (g.imag * (im > 0)),)

    return record(out.astype(a.data.dtype), (a,), bwd)


def sqrt_r(a):
    """Square root of a (nonnegative) real-valued tensor."""
    out = np.sqrt(a.data.real)

    def bwd(g):
        return (g.real / (2.0 * np.maximum(out, 1e-30)),)

    return record(out.astype(a.data.dtype), (a,), bwd)


def log10_r(a):
    """Base-10 logarithm of a (positive) real-valued tensor."""
    x = a.data.real
    out = np.log10(x)
    return record(out.astype(a.data.dtype), (a,),
                  lambda g: (g.real / (x * np.log(10.0)),))


# -- reductions and shape ----------------------------------------------------

def csum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    ash = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * len(ash)), ash).copy(),)
        ga = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ga, ash).copy(),)

    return record(np.asarray(out), (a,), bwd)


def cmean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return mul(csum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    ash = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(ash),))


def transpose2d(a):
    if a.data.ndim != 2:
        raise TensorError("transpose2d expects a 2-d tensor")
    return record(np.ascontiguousarray(a.data.T), (a,),
                  lambda g: (np.ascontiguousarray(g.T),))


def cat(tensors, axis=0):
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p)
                     for p in np.split(g, splits, axis=axis))

    return record(out, tuple(tensors), bwd)


def take(a, index, axis=0):
    """Slice along one axis; index is a python slice."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = index
    sl = tuple(sl)
    ash = a.shape

    def bwd(g):
        full = np.zeros(ash, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return record(np.ascontiguousarray(a.data[sl]), (a,), bwd)


def pad2d(a, pad_f, pad_t):
    """Zero-pad the last two axes; pad_f/pad_t are (before, after) pairs."""
    widths = [(0, 0)] * (a.data.ndim - 2) + [tuple(pad_f), tuple(pad_t)]
    out = np.pad(a.data, widths)
    sl = tuple(slice(b, s - e) for (b, e), s in
               zip(widths, out.shape))

    def bwd(g):
        return (np.ascontiguousarray(g[sl]),)

    return record(out, (a,), bwd)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise TensorError("matmul inner dims disagree: %s @ %s"
                          % (a.shape, b.shape))
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        # Wirtinger packing: grad_a = g conj(b)^T, grad_b = conj(a)^T g
        return (g @ np.conj(bd).T, np.conj(ad).T @ g)

    return record(out, (a, b), bwd)


def linear(x, w, b=None):
    """x [N, D] @ w [D, E] (+ b [E])."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# -- convolutions ------------------------------------------------------------

def _conv_geometry(fin, tin, kf, kt, sf, st, pf, pt):
    if fin + 2 * pf < kf or tin + 2 * pt < kt:
        raise TensorError("conv geometry invalid: input %sx%s kernel %sx%s "
                          "pad %s,%s" % (fin, tin, kf, kt, pf, pt))
    return (fin + 2 * pf - kf) // sf + 1, (tin + 2 * pt - kt) // st + 1


def _im2col(xpad, kf, kt, sf, st):
    c, fp, tp = xpad.shape
    fo = (fp - kf) // sf + 1
    to = (tp - kt) // st + 1
    s0, s1, s2 = xpad.strides
    cols = as_strided(xpad, (c, kf, kt, fo, to),
                      (s0, s1, s2, s1 * sf, s2 * st))
    return np.ascontiguousarray(cols).reshape(c * kf * kt, fo * to), fo, to


def _col2im(cols, c, fp, tp, kf, kt, sf, st):
    fo = (fp - kf) // sf + 1
    to = (tp - kt) // st + 1
    x = np.zeros((c, fp, tp), dtype=cols.dtype)
    cols = cols.reshape(c, kf, kt, fo, to)
    for i in range(kf):
        for j in range(kt):
            x[:, i:i + sf * fo:sf, j:j + st * to:st] += cols[:, i, j]
    return x


def conv2d(x, w, stride=(1, 1), padding=(0, 0)):
    """Complex 2-d cross-correlation, x [Ci,F,T], w [Co,Ci,kF,kT]."""
    co, ci, kf, kt = w.shape
    if x.shape[0] != ci:
        raise TensorError("conv2d channel mismatch: %s vs %s"
                          % (x.shape, w.shape))
    sf, st = stride
    pf, pt = padding
    fin, tin = x.shape[1], x.shape[2]
    fo, to = _conv_geometry(fin, tin, kf, kt, sf, st, pf, pt)
    xpad = np.pad(x.data, ((0, 0), (pf, pf), (pt, pt)))
    cols, _, _ = _im2col(xpad, kf, kt, sf, st)
    wmat = w.data.reshape(co, ci * kf * kt)
    out = (wmat @ cols).reshape(co, fo, to)

    def bwd(g):
        gmat = g.reshape(co, fo * to)
        gw = (gmat @ np.conj(cols).T).reshape(w.shape)
        gcols = np.conj(wmat).T @ gmat
        gxpad = _col2im(gcols, ci, fin + 2 * pf, tin + 2 * pt, kf, kt, sf, st)
        gx = gxpad[:, pf:pf + fin, pt:pt + tin]
        return (np.ascontiguousarray(gx), gw)

    return record(out, (x, w), bwd)


def conv_transpose2d(x, w, stride=(1, 1), padding=(0, 0)):
    """Adjoint of conv2d with the same geometry.

    x [Co,F',T'], w [Co,Ci,kF,kT] -> [Ci,F,T] with
    F = (F'-1)*sF - 2*pF + kF.
    """
    co, ci, kf, kt = w.shape
    if x.shape[0] != co:
        raise TensorError("conv_transpose2d channel mismatch: %s vs %s"
                          % (x.shape, w.shape))
    sf, st = stride
    pf, pt = padding
    fi, ti = x.shape[1], x.shape[2]
    fp = (fi - 1) * sf + kf
    tp = (ti - 1) * st + kt
    fo, to = fp - 2 * pf, tp - 2 * pt
    if fo <= 0 or to <= 0:
        raise TensorError("conv_transpose2d geometry collapses to empty")
    wmat = w.data.reshape(co, ci * kf * kt)
    xmat = x.data.reshape(co, fi * ti)
    cols = wmat.T @ xmat
    ypad = _col2im(cols, ci, fp, tp, kf, kt, sf, st)
    out = np.ascontiguousarray(ypad[:, pf:pf + fo, pt:pt + to])

    def bwd(g):
        gpad = np.pad(g, ((0, 0), (pf, pf), (pt, pt)))
        gcols, _, _ = _im2col(gpad, kf, kt, sf, st)
        gx = (np.conj(wmat) @ gcols).reshape(x.shape)
        gw = (np.conj(xmat) @ gcols.T).reshape(w.shape)
        return (gx, gw)

    return record(out, (x, w), bwd)


# -- composite layers --------------------------------------------------------

LAYERNORM_EPS = 1e-8


def global_layer_norm(z, gain, bias):
    """gain * (z - mean) / sqrt(mean|z - mean|^2 + eps) + bias.

    The mean is complex and taken over every feature of the sample; the
    scale is a real scalar, so the phase structure is preserved.
    gain/bias broadcast over the channel axis (shape [C,1,1] for [C,F,T]).
    """
    mu = cmean(z)
    d = sub(z, reshape(mu, (1,) * z.data.ndim))
    power = creal(mul(d, conj(d)))
    sigma = sqrt_r(add(cmean(power), LAYERNORM_EPS))
    core = div(d, reshape(sigma, (1,) * z.data.ndim))
    return add(mul(gain, core), bias)


def attention(q, k, v, heads=1):
    """CReLU-gated attention: out = CReLU(q conj(k)^T / sqrt(d)) v.

    q [Nq, D], k/v [Nk, D]; the softmax of conventional attention is
    replaced by the complex ReLU.  With heads > 1 the feature axis is
    split evenly and heads are concatenated back.
    """
    if q.shape[-1] != k.shape[-1]:
        raise TensorError("q/k feature dims disagree")
    if k.shape[0] != v.shape[0]:
        raise TensorError("k/v sequence lengths disagree")
    d = q.shape[-1]
    if d % heads != 0:
        raise TensorError("feature dim %d not divisible by %d heads"
                          % (d, heads))
    if heads == 1:
        scores = crelu(mul(matmul(q, transpose2d(conj(k))), 1.0 / np.sqrt(d)))
        return matmul(scores, v)
    hd = d // heads
    outs = []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        qs, ks, vs = (take(t, sl, axis=1) for t in (q, k, v))
        scores = crelu(mul(matmul(qs, transpose2d(conj(ks))),
                           1.0 / np.sqrt(hd)))
        outs.append(matmul(scores, vs))
    return cat(outs, axis=1)


# -- operator sugar ----------------------------------------------------------

def _install_operators():
    ComplexTensor.__add__ = lambda a, b: add(a, b)
    ComplexTensor.__radd__ = lambda a, b: add(a, b)
    ComplexTensor.__sub__ = lambda a, b: sub(a, b)
    ComplexTensor.__rsub__ = lambda a, b: sub(_wrap(b, a), a)
    ComplexTensor.__mul__ = lambda a, b: mul(a, b)
    ComplexTensor.__rmul__ = lambda a, b: mul(a, b)
    ComplexTensor.__truediv__ = lambda a, b: div(a, _wrap(b, a))
    ComplexTensor.__neg__ = neg
    ComplexTensor.__matmul__ = matmul


_install_operators()
