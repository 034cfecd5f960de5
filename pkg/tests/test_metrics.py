import csv

import numpy as np
import pytest

from bitse import dsp, hrtf, metrics
from bitse.dsp import BinauralSignal
from bitse.hrtf import Direction

FS = 16000


def noise(seed, n=FS):
    return np.random.default_rng(seed).standard_normal(n)


def delayed(x, k):
    return np.concatenate([np.zeros(k), x[:-k]]) if k else x.copy()


# -- extract_cues ---------------------------------------------------------------------

def test_identical_channels_zero_cues():
    x = noise(0)
    c = metrics.extract_cues(BinauralSignal(x, x, FS))
    assert np.all(c.itd_ms[c.active] == 0.0)
    assert np.all(np.abs(c.ild_db[c.active]) < 1e-12)


def test_right_delayed_positive_itd():
    # left leads by 8 samples -> +0.5 ms under the left-leads-positive
    # convention
    x = noise(1)
    c = metrics.extract_cues(BinauralSignal(x, delayed(x, 8), FS))
    assert np.all(np.abs(c.itd_ms[c.active] - 0.5) < 0.01)


def test_left_delayed_negative_itd():
    x = noise(2)
    c = metrics.extract_cues(BinauralSignal(delayed(x, 8), x, FS))
    assert np.all(np.abs(c.itd_ms[c.active] + 0.5) < 0.01)


def test_half_amplitude_right_ild():
    x = noise(3)
    c = metrics.extract_cues(BinauralSignal(x, 0.5 * x, FS))
    assert np.all(np.abs(c.ild_db[c.active] - 20 * np.log10(2)) < 1e-9)


def test_fractional_delay_parabolic_refinement():
    x = noise(4, 2 * FS)
    right = dsp.fractional_delay(x, 6.4)[:len(x)]
    left = dsp.fractional_delay(x, 0.0)[:len(x)]
    c = metrics.extract_cues(BinauralSignal(left, right, FS))
    err = np.abs(c.itd_ms[c.active] - 6.4 / FS * 1000)
    assert np.median(err) < 0.01


def test_itd_clamped_to_one_ms():
    x = noise(5)
    c = metrics.extract_cues(BinauralSignal(x, delayed(x, 40), FS))
    assert np.all(np.abs(c.itd_ms) <= 1.0 + 1e-9)


def test_activity_mask_excludes_silence():
    x = noise(6)
    x[:FS // 2] = 1e-6 * x[:FS // 2]
    c = metrics.extract_cues(BinauralSignal(x, x, FS))
    n = len(c.active)
    assert not c.active[: n // 3].any()
    assert c.active[n // 2:].all()


def test_silent_signal_rejected():
    z = np.zeros(FS)
    with pytest.raises(metrics.MetricsError):
        metrics.extract_cues(BinauralSignal(z, z, FS))


def test_short_signal_rejected():
    x = noise(7, 100)
    with pytest.raises(metrics.MetricsError):
        metrics.extract_cues(BinauralSignal(x, x, FS))


def test_spherical_head_itd_matches_woodworth():
    hs = hrtf.synth_spherical_head(hrtf.azimuth_grid(15.0))
    src = noise(8)
    for rec in hs.records:
        left = np.convolve(src, rec.left_ir)
        right = np.convolve(src, rec.right_ir)
        c = metrics.extract_cues(BinauralSignal(left, right, FS))
        want = hrtf.woodworth_itd(rec.direction.azimuth_deg) * 1000
        got = np.median(c.itd_ms[c.active])
        assert abs(got - want) <= 0.125, rec.direction


# -- delta_cues -----------------------------------------------------------------------

def test_delta_cues_self_is_zero():
    x, y = noise(9), noise(10)
    sig = BinauralSignal(x, 0.7 * y, FS)
    assert metrics.delta_cues(sig, sig) == (0.0, 0.0)


def test_delta_cues_gain_fixture():
    x = noise(11)
    target = BinauralSignal(x, delayed(x, 3), FS)
    est = BinauralSignal(target.left, target.right * 10 ** (3 / 20), FS)
    d_ild, d_itd = metrics.delta_cues(target, est)
    assert abs(d_ild - 3.0) < 0.05
    assert abs(d_itd) < 0.0625


def test_delta_cues_delay_fixture():
    x = noise(12)
    target = BinauralSignal(x, x.copy(), FS)
    est = BinauralSignal(x, delayed(x, 4), FS)
    _, d_itd = metrics.delta_cues(target, est)
    assert abs(d_itd - 0.25) < 0.02


def test_delta_cues_length_mismatch():
    a = BinauralSignal(noise(13), noise(14), FS)
    b = BinauralSignal(noise(13)[:-1], noise(14)[:-1], FS)
    with pytest.raises(metrics.MetricsError):
        metrics.delta_cues(a, b)


def test_delta_cues_no_joint_activity():
    x = noise(15)
    n = len(x)
    a = np.where(np.arange(n) < n // 4, x, 1e-9 * x)
    b = np.where(np.arange(n) >= 3 * n // 4, x, 1e-9 * x)
    with pytest.raises(metrics.MetricsError):
        metrics.delta_cues(BinauralSignal(a, a, FS), BinauralSignal(b, b, FS))


# -- cue_histograms -------------------------------------------------------------------

def test_histograms_normalized():
    x = noise(16)
    hist = metrics.cue_histograms(BinauralSignal(x, delayed(x, 5) * 0.8, FS))
    assert abs(hist.itd_density.sum() - 1.0) < 1e-9
    assert abs(hist.ild_density.sum() - 1.0) < 1e-9
    assert len(hist.itd_centers) == 40
    assert len(hist.ild_centers) == 80


def test_histograms_static_source_concentrates():
    x = noise(17)
    hist = metrics.cue_histograms(BinauralSignal(x, delayed(x, 7), FS))
    assert hist.itd_density.max() > 0.99
    center = hist.itd_centers[int(np.argmax(hist.itd_density))]
    assert abs(center - 7 / FS * 1000) <= metrics.ITD_BIN_MS


def test_histograms_oracle_estimate_identical():
    x = noise(18)
    sig = BinauralSignal(x, 0.6 * delayed(x, 4), FS)
    a = metrics.cue_histograms(sig)
    b = metrics.cue_histograms(BinauralSignal(sig.left.copy(),
                                              sig.right.copy(), FS))
    assert np.array_equal(a.itd_density, b.itd_density)
    assert np.array_equal(a.ild_density, b.ild_density)


def test_histograms_extreme_ild_clipped_into_range():
    x = noise(19)
    hist = metrics.cue_histograms(BinauralSignal(x, 1e-3 * x, FS))
    assert abs(hist.ild_density.sum() - 1.0) < 1e-9
    assert hist.ild_density[-1] > 0.99  # piled into the top bin


def test_histogram_csv(tmp_path):
    x = noise(20)
    hist = metrics.cue_histograms(BinauralSignal(x, delayed(x, 2), FS))
    path = tmp_path / "hist.csv"
    metrics.write_cue_histograms(hist, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["cue", "bin_center", "density"]
    assert len(rows) == 1 + 40 + 80
    total_itd = sum(float(r[2]) for r in rows[1:41])
    assert abs(total_itd - 1.0) < 1e-6


# -- spatial scan ----------------------------------------------------------------------

class _StubCfg:
    variant = "hrtf_complex"
    n_bins = 257
    doa_grid_size = 37


class _OracleModel:
    """Stand-in whose output is a fixed spectrogram, ignoring the clue."""

    cfg = _StubCfg()

    def __init__(self, spec):
        self.spec = spec

    def infer(self, mixture, clue):
        return self.spec


def test_scan_grid_and_oracle_flat_maximum():
    rng = np.random.default_rng(21)
    target = BinauralSignal(rng.standard_normal(FS),
                            rng.standard_normal(FS), FS)
    mixture = BinauralSignal(target.left + rng.standard_normal(FS),
                             target.right + rng.standard_normal(FS), FS)
    hs = hrtf.synth_spherical_head(hrtf.azimuth_grid(15.0))
    model = _OracleModel(dsp.stft(target).data)
    scan = metrics.spatial_scan(model, mixture, hs, target, step_deg=5.0)
    assert len(scan.azimuths_deg) == 37
    assert scan.azimuths_deg[0] == -90.0 and scan.azimuths_deg[-1] == 90.0
    # the oracle ignores the clue: one flat, near-reconstruction-limited
    # curve (window tapering at the signal edges bounds the round-trip)
    assert scan.si_sdr_db.min() > 40
    assert np.ptp(scan.si_sdr_db) < 1e-6


def test_scan_csv_roundtrip(tmp_path):
    scan = metrics.ScanResult(np.array([-10.0, 0.0, 10.0]),
                              np.array([1.0, 5.0, 2.0]))
    assert scan.peak_azimuth() == 0.0
    path = tmp_path / "scan.csv"
    metrics.write_scan_csv(scan, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["azimuth_deg", "si_sdr_db"]
    assert [float(r[0]) for r in rows[1:]] == [-10.0, 0.0, 10.0]


def test_scan_result_requires_increasing_azimuths():
    with pytest.raises(metrics.MetricsError):
        metrics.ScanResult(np.array([0.0, 0.0]), np.array([1.0, 2.0]))


def test_scan_rejects_bad_step():
    hs = hrtf.synth_spherical_head([Direction(0.0, 0.0)])
    x = noise(22)
    sig = BinauralSignal(x, x, FS)
    with pytest.raises(metrics.MetricsError):
        metrics.spatial_scan(_OracleModel(None), sig, hs, sig, step_deg=0)


# -- clue_for_model -------------------------------------------------------------------

def test_clue_for_model_hrtf_variant():
    hs = hrtf.synth_spherical_head(hrtf.azimuth_grid(15.0))
    model = _OracleModel(None)
    clue = metrics.clue_for_model(model, hs, Direction(30.0, 0.0))
    rec = hrtf.nearest_direction(hs, Direction(30.0, 0.0))
    assert np.array_equal(clue, hrtf.hrir_to_clue(rec).values)
    assert clue.shape == (2, 257)


def test_clue_for_model_doa_variant():
    model = _OracleModel(None)
    model.cfg = _StubCfg()
    model.cfg.variant = "doa_onehot"
    clue = metrics.clue_for_model(model, None, Direction(-90.0, 0.0))
    assert clue[0] == 1.0 and clue.sum() == 1.0
    clue = metrics.clue_for_model(model, None, Direction(40.0, 0.0))
    assert clue[26] == 1.0
    with pytest.raises(metrics.MetricsError):
        metrics.clue_for_model(model, None, Direction(42.0, 0.0))
