"""Directional HRIR storage, lookup, synthesis, and the frequency clue.

Azimuth convention: 0 deg is straight ahead, positive to the listener's
left, range [-180, 180).  Elevation in [-90, 90].
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from . import dsp

BUNDLE_MAGIC = b"HRIR"
BUNDLE_VERSION = 1

SPEED_OF_SOUND = 343.0
DEFAULT_HEAD_RADIUS = 0.0875


class HrtfError(ValueError):
    pass


def wrap_azimuth(az):
    return (az + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class Direction:
    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self):
        if not -180.0 <= self.azimuth_deg < 180.0:
            raise HrtfError("azimuth %.2f out of [-180, 180)" % self.azimuth_deg)
        if not -90.0 <= self.elevation_deg <= 90.0:
            raise HrtfError("elevation %.2f out of [-90, 90]" % self.elevation_deg)

    def unit_vector(self):
        az = np.deg2rad(self.azimuth_deg)
        el = np.deg2rad(self.elevation_deg)
        return np.array([np.cos(el) * np.cos(az),
                         np.cos(el) * np.sin(az),
                         np.sin(el)])


def angular_distance_deg(a, b):
    cosang = float(np.clip(np.dot(a.unit_vector(), b.unit_vector()), -1.0, 1.0))
    return np.rad2deg(np.arccos(cosang))


@dataclass
class HrirRecord:
    direction: Direction
    left_ir: np.ndarray
    right_ir: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.left_ir = np.asarray(self.left_ir, dtype=np.float64)
        self.right_ir = np.asarray(self.right_ir, dtype=np.float64)
        if len(self.left_ir) != len(self.right_ir):
            raise HrtfError("ear IR lengths differ")


@dataclass
class HrirSet:
    records: list
    sample_rate: int
    ir_length: int

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            key = (rec.direction.azimuth_deg, rec.direction.elevation_deg)
            if key in seen:
                raise HrtfError("duplicate direction %s" % (key,))
            seen.add(key)
            if len(rec.left_ir) != self.ir_length:
                raise HrtfError("non-uniform IR length")
            if rec.sample_rate != self.sample_rate:
                raise HrtfError("non-uniform sample rate")

    def __len__(self):
        return len(self.records)


@dataclass
class HrtfClue:
    """2 x K complex frequency response used as the extraction clue."""
    values: np.ndarray  # (2, K)
    direction: Direction

    @property
    def bins(self):
        return self.values.shape[1]


# -- bundle I/O -----------------------------------------------------------------

def save_hrir_set(hrirs, path):
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<IIII", BUNDLE_VERSION, hrirs.sample_rate,
                             len(hrirs.records), hrirs.ir_length))
        for rec in hrirs.records:
            fh.write(struct.pack("<ff", rec.direction.azimuth_deg,
                                 rec.direction.elevation_deg))
            fh.write(rec.left_ir.astype("<f4").tobytes())
            fh.write(rec.right_ir.astype("<f4").tobytes())


def load_hrir_set(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != BUNDLE_MAGIC:
            raise HrtfError("bad magic %r" % magic)
        header = fh.read(16)
        if len(header) < 16:
            raise HrtfError("truncated header")
        version, fs, num, ir_len = struct.unpack("<IIII", header)
        if version != BUNDLE_VERSION:
            raise HrtfError("unsupported version %d" % version)
        records = []
        rec_bytes = 8 + 2 * 4 * ir_len
        for _ in range(num):
            blob = fh.read(rec_bytes)
            if len(blob) < rec_bytes:
                raise HrtfError("truncated record")
            az, el = struct.unpack_from("<ff", blob)
            irs = np.frombuffer(blob, dtype="<f4", offset=8)
            records.append(HrirRecord(Direction(float(az), float(el)),
                                      irs[:ir_len].astype(np.float64),
                                      irs[ir_len:].astype(np.float64), fs))
    return HrirSet(records, fs, ir_len)


# -- lookup -----------------------------------------------------------------------

def _lookup_cache(hrirs):
    cache = getattr(hrirs, "_lookup_cache_", None)
    if cache is None or len(cache[1]) != len(hrirs.records):
        az = np.array([r.direction.azimuth_deg for r in hrirs.records])
        el = np.array([r.direction.elevation_deg for r in hrirs.records])
        # records pre-sorted by (azimuth, elevation) so that argmin's
        # first-occurrence rule realizes the tie-break
        perm = np.lexsort((el, az))
        units = np.stack([hrirs.records[i].direction.unit_vector()
                          for i in perm])
        cache = (units, perm)
        hrirs._lookup_cache_ = cache
    return cache


def nearest_indices(hrirs, queries):
    """Indices of the nearest records for a batch of query directions.

    Nearest by great-circle distance; ties break toward the smaller
    azimuth, then the smaller elevation.
    """
    if not hrirs.records:
        raise HrtfError("empty HRIR set")
    units, perm = _lookup_cache(hrirs)
    q = np.stack([d.unit_vector() for d in queries])
    ang = np.arccos(np.clip(units @ q.T, -1.0, 1.0))
    best = np.argmin(np.round(np.rad2deg(ang), 9), axis=0)
    return perm[best]


def nearest_direction(hrirs, query):
    """Record minimizing great-circle distance to the query direction."""
    idx = nearest_indices(hrirs, [query])[0]
    return hrirs.records[int(idx)]


# -- clue -------------------------------------------------------------------------

def hrir_to_clue(rec, n_fft=512, target_hz=16000):
    """One-sided FFT of the (resampled) HRIR pair -> 2 x (n_fft/2+1) clue."""
    left, right = rec.left_ir, rec.right_ir
    if rec.sample_rate != target_hz:
        # rate-change gain keeps the *filter* response: resampling an IR
        # as a signal scales its DTFT by target/source
        gain = rec.sample_rate / target_hz
        left = gain * dsp.resample_array(left, rec.sample_rate, target_hz)
        right = gain * dsp.resample_array(right, rec.sample_rate, target_hz)
    def one_sided(ir):
        buf = np.zeros(n_fft)
        n = min(len(ir), n_fft)
        buf[:n] = ir[:n]
        return np.fft.rfft(buf)
    return HrtfClue(np.stack([one_sided(left), one_sided(right)]),
                    rec.direction)


# -- spherical-head synthesis ------------------------------------------------------

def woodworth_itd(azimuth_deg, elevation_deg=0.0,
                  head_radius=DEFAULT_HEAD_RADIUS, c=SPEED_OF_SOUND):
    """Spherical-head ITD in seconds; positive when the source is left.

    ITD(lam) = (a/c) * (sin lam + lam) on the lateral angle lam, clamped
    beyond 90 deg; sin(lam) = sin(azimuth) * cos(elevation).
    """
    s = np.sin(np.deg2rad(azimuth_deg)) * np.cos(np.deg2rad(elevation_deg))
    lam = np.arcsin(np.clip(abs(s), 0.0, 1.0))
    itd = head_radius / c * (np.sin(lam) + lam)
    return float(np.sign(s) * itd)


def _shadow_cutoff_hz(lateral_sin):
    # contralateral lowpass; cutoff falls as the source moves lateral
    return 6000.0 * (1.0 - 0.8 * lateral_sin) + 500.0


BASE_DELAY_SAMPLES = 16


def _head_ir_pair(direction, fs, head_radius, ir_len):
    az, el = direction.azimuth_deg, direction.elevation_deg
    s = np.sin(np.deg2rad(abs(az))) * np.cos(np.deg2rad(el))
    itd = woodworth_itd(abs(az), el, head_radius)
    half = itd / 2.0 * fs
    impulse = np.zeros(ir_len)
    impulse[0] = 1.0
    ipsi = dsp.fractional_delay(impulse, BASE_DELAY_SAMPLES - half)[:ir_len]
    contra = dsp.fractional_delay(impulse, BASE_DELAY_SAMPLES + half)[:ir_len]
    if s > 1e-12:
        alpha = np.exp(-2 * np.pi * _shadow_cutoff_hz(s) / fs)
        contra = lfilter([1.0 - alpha], [1.0, -alpha], contra)
    return ipsi, contra


def synth_spherical_head(grid, fs=16000, head_radius=DEFAULT_HEAD_RADIUS,
                         ir_len=128):
    """Synthesize a two-ear HRIR set on a direction grid.

    Per ear: a Woodworth pure delay split evenly between the ears plus a
    first-order head-shadow lowpass on the far ear.  Mirrored azimuths
    swap the two ears bit-exactly.
    """
    if not grid:
        raise HrtfError("empty direction grid")
    records = []
    for direction in grid:
        ipsi, contra = _head_ir_pair(direction, fs, head_radius, ir_len)
        if direction.azimuth_deg >= 0:
            left, right = ipsi, contra  # source on the left: left ear near
        else:
            left, right = contra, ipsi
        records.append(HrirRecord(direction, left, right, fs))
    return HrirSet(records, fs, ir_len)


def azimuth_grid(step_deg, lo=-90.0, hi=90.0, elevation_deg=0.0):
    if step_deg <= 0:
        raise HrtfError("grid step must be positive")
    azimuths = np.arange(lo, hi + step_deg / 2, step_deg)
    return [Direction(float(a), elevation_deg) for a in azimuths]
