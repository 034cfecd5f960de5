"""Training losses: SI-SDR, frequency-domain L1-MAE, and their
two-speaker combination.

SI-SDR operates on time-domain signals, so the spectrogram estimates are
passed through a differentiable iSTFT whose backward pass is the adjoint
of the weighted overlap-add synthesis.  Binaural signals enter SI-SDR as
the concatenation of both ear channels, so a single projection scale is
shared across ears and interaural level errors are penalized.
"""

from dataclasses import dataclass

import numpy as np

from . import dsp
from .ctensor import ComplexTensor, ops, record, tensor

SISDR_EPSILON = 1e-8

STAGES = ("stage1", "stage2")


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.0
    sisdr_epsilon: float = SISDR_EPSILON
    stage: str = "stage1"

    def __post_init__(self):
        if self.alpha < 0:
            raise LossError("alpha must be nonnegative")
        if self.stage not in STAGES:
            raise LossError("unknown stage %r" % self.stage)
        if self.stage == "stage1" and self.alpha != 0:
            raise LossError("stage1 requires alpha = 0")


# -- reference (non-differentiable) losses -----------------------------------------

def si_sdr(s, s_hat, eps=SISDR_EPSILON):
    """Scale-invariant SDR in dB; multichannel inputs are concatenated."""
    s = np.asarray(s, dtype=np.float64).ravel()
    s_hat = np.asarray(s_hat, dtype=np.float64).ravel()
    if s.shape != s_hat.shape:
        raise LossError("length mismatch")
    power = np.dot(s, s)
    if power <= 0:
        raise LossError("zero-energy target")
    beta = np.dot(s_hat, s) / power
    ref = beta * s
    # eps guards both degenerate cases: perfect match (zero error) and an
    # orthogonal estimate (zero projection) -> large finite +-dB values
    return 20.0 * np.log10((np.linalg.norm(ref) + eps)
                           / (np.linalg.norm(ref - s_hat) + eps))


def l1_mae(spec, spec_hat):
    """Mean absolute magnitude-spectrogram deviation."""
    spec = np.asarray(spec)
    spec_hat = np.asarray(spec_hat)
    if spec.shape != spec_hat.shape:
        raise LossError("spectrogram shape mismatch")
    return float(np.mean(np.abs(np.abs(spec) - np.abs(spec_hat))))


# -- differentiable iSTFT -----------------------------------------------------------

def istft_op(spec, window_len=dsp.DEFAULT_WINDOW_LEN, hop=dsp.DEFAULT_HOP):
    """Differentiable weighted overlap-add iSTFT of a (..., K, N) tensor.

    Output carries the synthesized real signal (imaginary part zero).
    The backward pass maps a time-domain gradient to spectrogram bins:
    g_frame = window * gather(g / norm), grad_S = (2/L) rfft(g_frame)
    with the DC and Nyquist bins halved and kept real.
    """
    if not isinstance(spec, ComplexTensor):
        spec = tensor(spec)
    shape = spec.shape
    if len(shape) < 2:
        raise LossError("spectrogram tensor must be at least 2-d")
    k, n = shape[-2], shape[-1]
    if k != window_len // 2 + 1:
        raise LossError("bin count %d inconsistent with window %d"
                        % (k, window_len))
    lead = shape[:-2]
    flat = spec.data.reshape((-1, k, n))
    out = np.stack([dsp.istft_array(c, window_len, hop) for c in flat])
    out_len = out.shape[-1]
    w = dsp.hann_periodic(window_len)
    norm = np.zeros(out_len)
    for i in range(n):
        norm[i * hop:i * hop + window_len] += w * w
    norm = np.maximum(norm, 1e-12)
    idx = np.arange(window_len)[None, :] + hop * np.arange(n)[:, None]

    def backward(g):
        gt = np.real(g).reshape((-1, out_len)) / norm
        grad = np.empty((gt.shape[0], k, n), dtype=complex)
        for c in range(gt.shape[0]):
            frames = gt[c][idx] * w
            gs = (2.0 / window_len) * np.fft.rfft(frames, axis=1).T
            gs[0] = 0.5 * gs[0].real
            gs[-1] = 0.5 * gs[-1].real
            grad[c] = gs
        return (grad.reshape(shape),)

    return record(out.reshape(lead + (out_len,)).astype(complex),
                  (spec,), backward)


# -- differentiable losses ----------------------------------------------------------

def si_sdr_loss(target, est, eps=SISDR_EPSILON):
    """Differentiable SI-SDR of a real-valued estimate tensor, in dB.

    `target` is a constant array; `est` a ComplexTensor with zero
    imaginary part (e.g. from istft_op).  Channels are concatenated.
    """
    t = np.asarray(target, dtype=np.float64).ravel()
    power = np.dot(t, t)
    if power <= 0:
        raise LossError("zero-energy target")
    size = 1
    for d in est.shape:
        size *= d
    if size != len(t):
        raise LossError("length mismatch")
    e = ops.reshape(est, (len(t),))
    beta = ops.mul(ops.csum(ops.mul(e, t)), 1.0 / power)
    ref = ops.mul(beta, t)
    err = ops.sub(ref, e)
    num = ops.add(ops.sqrt_r(ops.csum(ops.mul(ref, ref))), eps)
    den = ops.add(ops.sqrt_r(ops.csum(ops.mul(err, err))), eps)
    return ops.mul(ops.log10_r(ops.div(num, den)), 20.0)


def l1_mae_loss(target_spec, est):
    """Differentiable mean | |S| - |S_hat| | over all entries."""
    mags = np.abs(np.asarray(target_spec))
    if mags.shape != est.shape:
        raise LossError("spectrogram shape mismatch")
    diff = ops.sub(ops.cabs(est), mags)
    return ops.cmean(ops.cabs(diff))


def total_loss(target_d, target_i, est_d, est_i, cfg,
               window_len=dsp.DEFAULT_WINDOW_LEN, hop=dsp.DEFAULT_HOP):
    """Two-speaker combined loss on spectrogram estimates.

    L = 1/2 sum_{speaker} ( -si_sdr(time target, istft(est))
                            + alpha * l1_mae(spec target, est) ).
    Targets are constant complex spectrograms; estimates are tensors
    produced with the matching clue (clue alternation).
    """
    terms = []
    for target, est in ((target_d, est_d), (target_i, est_i)):
        target = np.asarray(target)
        t_time = np.stack([dsp.istft_array(c, window_len, hop)
                           for c in target.reshape((-1,) + target.shape[-2:])])
        term = ops.neg(si_sdr_loss(t_time, istft_op(est, window_len, hop),
                                   cfg.sisdr_epsilon))
        if cfg.alpha:
            term = ops.add(term, ops.mul(l1_mae_loss(target, est), cfg.alpha))
        terms.append(term)
    return ops.mul(ops.add(terms[0], terms[1]), 0.5)
