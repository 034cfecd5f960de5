"""Binaural target speaker extraction toolkit.

Subpackages/modules:
    ctensor    complex-valued tensors with reverse-mode autodiff
    dsp        STFT/iSTFT, resampling, fractional delay, WAV I/O
    hrtf       HRIR storage, lookup, spherical-head synthesis, clue FFT
    roomsim    shoebox image method composed with HRIRs, scene sampling
    net        complex U-Net extractor and its ablation variants
    objectives SI-SDR / L1 magnitude losses and the combined objective
    metrics    evaluation: SI-SDR, binaural cue deviations, spatial scan
    trainer    dataset pipeline, Adam, two-stage schedule, checkpoints
    cli        batch commands tying the pipeline together
"""

__version__ = "0.1.0"
