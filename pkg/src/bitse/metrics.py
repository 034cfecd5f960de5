"""Evaluation metrics: SI-SDR reporting helpers, frame-wise binaural cue
(ILD/ITD) extraction, cue-deviation scores, cue p.d.f. histograms, and the
azimuth scanning procedure.

Cues are broadband and frame-wise: 20 ms frames with a 10 ms hop, active
when the frame energy is within 40 dB of the loudest frame.  Sign
conventions: a left ear that is louder gives a positive ILD, a left ear
that leads in time gives a positive ITD.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import dsp, hrtf, objectives

CUE_FRAME_S = 0.02
CUE_HOP_S = 0.01
CUE_FLOOR_DB = -40.0
MAX_ITD_MS = 1.0

ITD_BIN_MS = 0.05
ILD_BIN_DB = 0.5
ILD_RANGE_DB = 20.0


class MetricsError(ValueError):
    pass


@dataclass
class CueSeries:
    """Per-frame broadband binaural cues with an activity mask."""
    ild_db: np.ndarray
    itd_ms: np.ndarray
    active: np.ndarray
    frame_len: int
    hop: int

    def __post_init__(self):
        if not (len(self.ild_db) == len(self.itd_ms) == len(self.active)):
            raise MetricsError("cue series lengths differ")


@dataclass
class ScanResult:
    azimuths_deg: np.ndarray
    si_sdr_db: np.ndarray

    def __post_init__(self):
        self.azimuths_deg = np.asarray(self.azimuths_deg, dtype=np.float64)
        self.si_sdr_db = np.asarray(self.si_sdr_db, dtype=np.float64)
        if np.any(np.diff(self.azimuths_deg) <= 0):
            raise MetricsError("azimuths must be strictly increasing")

    def peak_azimuth(self):
        return float(self.azimuths_deg[int(np.argmax(self.si_sdr_db))])


# -- cue extraction ------------------------------------------------------------------

def _frame_indices(n, frame_len, hop):
    count = (n - frame_len) // hop + 1
    if count < 1:
        raise MetricsError("signal shorter than one cue frame")
    return np.arange(frame_len)[None, :] + hop * np.arange(count)[:, None]


def _parabolic_peak(y, i):
    """Sub-sample offset of the peak near index i via 3-point parabola."""
    if i <= 0 or i >= len(y) - 1:
        return 0.0
    denom = y[i - 1] - 2.0 * y[i] + y[i + 1]
    if denom >= 0:
        return 0.0
    return 0.5 * (y[i - 1] - y[i + 1]) / denom


def extract_cues(sig):
    """Frame-wise ILD (dB) and ITD (ms) of a 16 kHz binaural signal.

    ITD is the lag of the interaural cross-correlation maximum over
    +-1 ms, refined with a parabolic fit; positive means the left ear
    leads.  ILD is 10*log10(E_left/E_right); positive means the left ear
    is louder.  Frames quieter than 40 dB below the loudest frame are
    marked inactive and carry zero cues.
    """
    fs = sig.sample_rate
    frame_len = int(round(CUE_FRAME_S * fs))
    hop = int(round(CUE_HOP_S * fs))
    max_lag = int(round(MAX_ITD_MS * 1e-3 * fs))
    idx = _frame_indices(len(sig), frame_len, hop)
    lf = sig.left[idx]
    rf = sig.right[idx]
    e_l = np.sum(lf * lf, axis=1)
    e_r = np.sum(rf * rf, axis=1)
    energy = e_l + e_r
    peak = energy.max()
    if peak <= 0:
        raise MetricsError("no active frames (silent signal)")
    active = energy > peak * 10.0 ** (CUE_FLOOR_DB / 10.0)
    if not np.any(active):
        raise MetricsError("no active frames")

    tiny = np.finfo(float).tiny
    ild = np.zeros(len(idx))
    ild[active] = 10.0 * np.log10((e_l[active] + tiny) / (e_r[active] + tiny))

    itd = np.zeros(len(idx))
    for i in np.flatnonzero(active):
        # np.correlate(l, r, "full")[k] correlates l shifted by
        # lag = k - (frame_len - 1) against r; a leading left ear
        # (right = delayed left) peaks at a negative lag
        corr = np.correlate(lf[i], rf[i], "full")
        lags = np.arange(-(frame_len - 1), frame_len)
        window = (lags >= -max_lag) & (lags <= max_lag)
        corr = corr[window]
        lags = lags[window]
        j = int(np.argmax(corr))
        lag = lags[j] + _parabolic_peak(corr, j)
        itd[i] = -lag * 1000.0 / fs
    return CueSeries(ild, itd, active, frame_len, hop)


def delta_cues(target, estimate):
    """(mean |dILD|, mean |dITD|) over jointly active frames."""
    if len(target) != len(estimate):
        raise MetricsError("signal lengths differ")
    if target.sample_rate != estimate.sample_rate:
        raise MetricsError("sample rates differ")
    ct = extract_cues(target)
    ce = extract_cues(estimate)
    both = ct.active & ce.active
    if not np.any(both):
        raise MetricsError("no jointly active frames")
    d_ild = float(np.mean(np.abs(ct.ild_db[both] - ce.ild_db[both])))
    d_itd = float(np.mean(np.abs(ct.itd_ms[both] - ce.itd_ms[both])))
    return d_ild, d_itd


# -- cue histograms ------------------------------------------------------------------

@dataclass
class CueHistograms:
    itd_centers: np.ndarray
    itd_density: np.ndarray
    ild_centers: np.ndarray
    ild_density: np.ndarray


def _normalized_hist(values, lo, hi, width):
    edges = np.arange(lo, hi + width / 2, width)
    counts, _ = np.histogram(values, bins=edges)
    total = counts.sum()
    density = counts / total if total else counts.astype(float)
    return (edges[:-1] + edges[1:]) / 2.0, density


def cue_histograms(sig):
    """Normalized ITD/ILD histograms of a signal's active frames."""
    cues = extract_cues(sig)
    itd_c, itd_d = _normalized_hist(cues.itd_ms[cues.active],
                                    -MAX_ITD_MS, MAX_ITD_MS, ITD_BIN_MS)
    ild = np.clip(cues.ild_db[cues.active],
                  -ILD_RANGE_DB + ILD_BIN_DB / 2, ILD_RANGE_DB - ILD_BIN_DB / 2)
    ild_c, ild_d = _normalized_hist(ild, -ILD_RANGE_DB, ILD_RANGE_DB,
                                    ILD_BIN_DB)
    return CueHistograms(itd_c, itd_d, ild_c, ild_d)


def write_cue_histograms(hist, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["cue", "bin_center", "density"])
        for c, d in zip(hist.itd_centers, hist.itd_density):
            out.writerow(["itd_ms", "%.6f" % c, "%.9f" % d])
        for c, d in zip(hist.ild_centers, hist.ild_density):
            out.writerow(["ild_db", "%.6f" % c, "%.9f" % d])


# -- spatial scan ---------------------------------------------------------------------

def clue_for_model(model, hrirs, direction):
    """Model-input clue for a direction: HRTF response or DOA one-hot."""
    if model.cfg.variant == "doa_onehot":
        grid = model.cfg.doa_grid_size
        step = 180.0 / (grid - 1)
        slot = (direction.azimuth_deg + 90.0) / step
        i = int(round(slot))
        if not (0 <= i < grid) or abs(slot - i) > 1e-6:
            raise MetricsError("azimuth %.2f not on the %d-point DOA grid"
                               % (direction.azimuth_deg, grid))
        onehot = np.zeros(grid)
        onehot[i] = 1.0
        return onehot
    rec = hrtf.nearest_direction(hrirs, direction)
    clue = hrtf.hrir_to_clue(rec, n_fft=(model.cfg.n_bins - 1) * 2)
    return clue.values


def extract(model, mixture, clue):
    """Run the model on a binaural mixture and synthesize the estimate."""
    spec = dsp.stft(mixture)
    est = model.infer(spec.data, clue)
    return dsp.istft(dsp.Spectrogram(est, mixture.sample_rate,
                                     spec.window_len, spec.hop))


def spatial_scan(model, mixture, hrirs, target, elevation_deg=0.0,
                 step_deg=5.0):
    """SI-SDR of the extraction versus the true target, swept over
    azimuth clues in [-90, 90] at the given elevation."""
    if step_deg <= 0:
        raise MetricsError("step must be positive")
    azimuths = np.arange(-90.0, 90.0 + step_deg / 2, step_deg)
    ref = target.stack()
    scores = []
    for az in azimuths:
        clue = clue_for_model(model, hrirs,
                              hrtf.Direction(float(az), elevation_deg))
        est = extract(model, mixture, clue)
        n = min(len(est), ref.shape[1])
        scores.append(objectives.si_sdr(ref[:, :n], est.stack()[:, :n]))
    return ScanResult(azimuths, scores)


def write_scan_csv(scan, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["azimuth_deg", "si_sdr_db"])
        for az, score in zip(scan.azimuths_deg, scan.si_sdr_db):
            out.writerow(["%.2f" % az, "%.6f" % score])
