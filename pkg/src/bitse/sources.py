"""Synthetic speech-like sources: amplitude-modulated filtered noise.

White noise is shaped into a roughly 100-4000 Hz band with a downward
spectral tilt, then modulated by a ~4 Hz raised-cosine envelope, giving
a crude syllabic rhythm.  Band edges, tilt, envelope rate, and a few
formant-like resonances are jittered per draw so that two sources in a
mixture are spectrally distinct, the way two talkers are -- without
that diversity, spatial cues would be the only thing separating them.
The generator lets the full pipeline (simulation, training, evaluation)
run without any external speech corpus.
"""

import numpy as np
from scipy.signal import butter, iirpeak, lfilter

from .dsp import DspError, MonoSignal

BAND_LO_HZ = (80.0, 250.0)
BAND_HI_HZ = (3000.0, 6000.0)
ENVELOPE_HZ = 4.0
TILT_POLE = (0.80, 0.95)  # one-pole lowpass emphasizing low frequencies
N_FORMANTS = 3
FORMANT_HZ = (300.0, 3000.0)
FORMANT_Q = (2.0, 8.0)
FORMANT_GAIN = 3.0


def synth_source(rng, duration_s, fs=16000, envelope_hz=ENVELOPE_HZ):
    """Draw one synthetic source signal, RMS-normalized to 0.1."""
    if duration_s <= 0:
        raise DspError("duration must be positive")
    n = int(round(duration_s * fs))
    if n < fs // 10:
        raise DspError("source shorter than 100 ms")
    x = rng.standard_normal(n)
    lo = rng.uniform(*BAND_LO_HZ)
    hi = rng.uniform(*BAND_HI_HZ)
    b, a = butter(4, [lo / (fs / 2), hi / (fs / 2)], "bandpass")
    x = lfilter(b, a, x)
    pole = rng.uniform(*TILT_POLE)
    x = lfilter([1.0 - pole], [1.0, -pole], x)  # spectral tilt
    for _ in range(N_FORMANTS):  # talker-specific spectral color
        fc = rng.uniform(*FORMANT_HZ)
        q = rng.uniform(*FORMANT_Q)
        bf, af = iirpeak(fc / (fs / 2), q)
        x = x + FORMANT_GAIN * lfilter(bf, af, x)
    rate = envelope_hz * rng.uniform(0.5, 2.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    t = np.arange(n) / fs
    env = 0.5 * (1.0 + np.cos(2 * np.pi * rate * t + phase))
    x = x * (0.05 + 0.95 * env)  # keep a small floor so frames stay active
    x = 0.1 * x / np.sqrt(np.mean(x ** 2))
    return MonoSignal(x, fs)
