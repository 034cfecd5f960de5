"""Signal processing shared by the simulator and the model pipeline.

STFT analysis/synthesis uses a periodic Hann window of 512 samples with
hop 128 (75% overlap) and weighted overlap-add with COLA normalization,
so the interior of istft(stft(x)) reconstructs x essentially exactly.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

DEFAULT_WINDOW_LEN = 512
DEFAULT_HOP = 128


class DspError(ValueError):
    pass


@dataclass
class MonoSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DspError("sample_rate must be positive")


@dataclass
class BinauralSignal:
    left: np.ndarray
    right: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        if len(self.left) != len(self.right):
            raise DspError("channel lengths differ")

    def __len__(self):
        return len(self.left)

    def stack(self):
        return np.stack([self.left, self.right])

    @classmethod
    def from_array(cls, arr, sample_rate):
        return cls(arr[0], arr[1], sample_rate)


@dataclass
class Spectrogram:
    """One- or two-channel complex STFT, shape (C, K, N)."""
    data: np.ndarray
    sample_rate: int
    window_len: int = DEFAULT_WINDOW_LEN
    hop: int = DEFAULT_HOP
    window: str = "hann"

    @property
    def bins(self):
        return self.data.shape[1]

    @property
    def frames(self):
        return self.data.shape[2]


def hann_periodic(length):
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / length)


def num_frames(n_samples, window_len=DEFAULT_WINDOW_LEN, hop=DEFAULT_HOP):
    return (n_samples - window_len) // hop + 1


def stft_array(x, window_len=DEFAULT_WINDOW_LEN, hop=DEFAULT_HOP):
    """STFT of a real 1-d signal -> (K, N) complex, K = window_len/2 + 1."""
    x = np.asarray(x, dtype=np.float64)
    if window_len % hop != 0:
        raise DspError("hop must divide window_len")
    if len(x) < window_len:
        raise DspError("signal shorter than one window (%d < %d)"
                       % (len(x), window_len))
    n = num_frames(len(x), window_len, hop)
    w = hann_periodic(window_len)
    idx = np.arange(window_len)[None, :] + hop * np.arange(n)[:, None]
    frames = x[idx] * w
    return np.fft.rfft(frames, axis=1).T.copy()


def istft_array(spec, window_len=DEFAULT_WINDOW_LEN, hop=DEFAULT_HOP):
    """Weighted overlap-add inverse of stft_array."""
    spec = np.asarray(spec)
    k, n = spec.shape
    if k != window_len // 2 + 1:
        raise DspError("bin count %d inconsistent with window %d"
                       % (k, window_len))
    w = hann_periodic(window_len)
    frames = np.fft.irfft(spec.T, n=window_len, axis=1) * w
    out_len = (n - 1) * hop + window_len
    y = np.zeros(out_len)
    norm = np.zeros(out_len)
    for i in range(n):
        y[i * hop:i * hop + window_len] += frames[i]
        norm[i * hop:i * hop + window_len] += w * w
    return y / np.maximum(norm, 1e-12)


def stft(sig, window_len=DEFAULT_WINDOW_LEN, hop=DEFAULT_HOP):
    if isinstance(sig, MonoSignal):
        chans = [sig.samples]
        fs = sig.sample_rate
    else:
        chans = [sig.left, sig.right]
        fs = sig.sample_rate
    data = np.stack([stft_array(c, window_len, hop) for c in chans])
    return Spectrogram(data, fs, window_len, hop)


def istft(spec):
    chans = [istft_array(spec.data[c], spec.window_len, spec.hop)
             for c in range(spec.data.shape[0])]
    if len(chans) == 1:
        return MonoSignal(chans[0], spec.sample_rate)
    return BinauralSignal(chans[0], chans[1], spec.sample_rate)


def _resample_filter(max_rate):
    # ~90 dB stopband; transition straddles the new Nyquist so that
    # tones at 0.99*Nyquist pass within 0.1 dB
    numtaps = 256 * max_rate + 1
    return firwin(numtaps, 1.07 / max_rate, window=("kaiser", 9.0))


def resample_array(x, from_hz, to_hz):
    if from_hz == to_hz:
        return np.asarray(x, dtype=np.float64).copy()
    if int(from_hz) != from_hz or int(to_hz) != to_hz:
        raise DspError("non-integer sample rates unsupported")
    from_hz, to_hz = int(from_hz), int(to_hz)
    g = np.gcd(from_hz, to_hz)
    up, down = to_hz // g, from_hz // g
    h = _resample_filter(max(up, down))
    return resample_poly(np.asarray(x, dtype=np.float64), up, down, window=h)


def resample(sig, from_hz, to_hz):
    if isinstance(sig, MonoSignal):
        return MonoSignal(resample_array(sig.samples, from_hz, to_hz), to_hz)
    return BinauralSignal(resample_array(sig.left, from_hz, to_hz),
                          resample_array(sig.right, from_hz, to_hz), to_hz)


FRAC_DELAY_TAPS = 32


def fractional_delay(ir, delay):
    """Delay a real sequence by a (possibly fractional) number of samples.

    Integer part: index shift.  Fractional part: 32-tap Hann-windowed
    sinc interpolation.  Output length = len + ceil(delay) + 32.
    """
    ir = np.asarray(ir, dtype=np.float64)
    if delay < 0:
        raise DspError("negative delay")
    d_int = int(np.floor(delay))
    frac = delay - d_int
    out = np.zeros(len(ir) + int(np.ceil(delay)) + FRAC_DELAY_TAPS)
    if frac < 1e-12:
        out[d_int:d_int + len(ir)] = ir
        return out
    half = FRAC_DELAY_TAPS // 2 - 1  # 15: kernel group delay is 15 + frac
    u = np.arange(FRAC_DELAY_TAPS) - half - frac
    kernel = np.sinc(u) * 0.5 * (1 + np.cos(np.pi * u / (half + 1)))
    y = np.convolve(ir, kernel)
    shift = d_int - half
    if shift >= 0:
        seg = y[:len(out) - shift]
        out[shift:shift + len(seg)] = seg
    else:
        out[:len(y) + shift] = y[-shift:]
    return out


def crop_or_pad(x, length, rng=None):
    """Fix a 1-d signal to `length` samples.

    Shorter signals are zero-padded at the tail.  Longer ones are cropped
    from a random onset when an rng is given (training), else from the
    start (deterministic evaluation).
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == length:
        return x.copy()
    if len(x) < length:
        return np.pad(x, (0, length - len(x)))
    if rng is None:
        return x[:length].copy()
    onset = int(rng.integers(0, len(x) - length + 1))
    return x[onset:onset + length].copy()


# -- WAV I/O -------------------------------------------------------------------

def read_wav(path):
    """Read a RIFF WAV file -> (float64 array [n] or [n, ch], rate)."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    else:
        data = data.astype(np.float64)
    return data, rate


def write_wav(path, data, rate, fmt="f32"):
    """Write mono [n] or stereo [n, 2] audio as PCM16 or 32-bit float."""
    data = np.asarray(data)
    if fmt == "f32":
        wavfile.write(path, rate, data.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(data, -1.0, 32767.0 / 32768.0)
        wavfile.write(path, rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise DspError("unknown wav format %r" % fmt)
