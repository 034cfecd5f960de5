"""Shoebox image-method simulation composed with HRIRs.

Binaural room responses follow the attenuated/time-shifted HRIR sum:
each image source contributes its nearest-grid HRIR, delayed by the
propagation time and scaled by beta^order / (4 pi d).
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import butter, fftconvolve, filtfilt

from . import dsp, hrtf
from .dsp import BinauralSignal, MonoSignal
from .hrtf import Direction, wrap_azimuth

SPEED_OF_SOUND = 343.0
WALL_MARGIN = 0.1


class RoomError(ValueError):
    pass


@dataclass
class Room:
    lx: float
    ly: float
    lz: float
    target_t60: float = 0.0

    def __post_init__(self):
        if min(self.lx, self.ly, self.lz) <= 0:
            raise RoomError("room dimensions must be positive")
        if self.target_t60 < 0:
            raise RoomError("t60 must be nonnegative")

    @property
    def dims(self):
        return np.array([self.lx, self.ly, self.lz])

    @property
    def volume(self):
        return self.lx * self.ly * self.lz

    @property
    def surface(self):
        return 2 * (self.lx * self.ly + self.lx * self.lz + self.ly * self.lz)


@dataclass
class Pose:
    position: tuple
    yaw_deg: float = 0.0

    def validate_in(self, room):
        p = np.asarray(self.position, dtype=np.float64)
        if np.any(p < WALL_MARGIN) or np.any(p > room.dims - WALL_MARGIN):
            raise RoomError("pose %s violates %.2f m wall margin"
                            % (self.position, WALL_MARGIN))
        return self


@dataclass
class ReflectionPath:
    attenuation: float
    delay: float  # seconds
    doa: Direction  # listener head frame
    order: int


@dataclass
class Scene:
    room: Room
    listener: Pose
    desired: Pose
    interferer: Pose
    seed: int = 0


def t60_to_reflection_coeff(room):
    """Sabine inversion to a uniform wall reflection coefficient beta."""
    if room.target_t60 <= 0:
        raise RoomError("t60 must be positive for Sabine inversion")
    alpha = 0.161 * room.volume / (room.surface * room.target_t60)
    if alpha >= 1.0:
        raise RoomError("target T60 %.2f s unreachable in this room "
                        "(Sabine absorption %.2f >= 1)"
                        % (room.target_t60, alpha))
    return math.sqrt(1.0 - alpha)


def head_frame_doa(vec, yaw_deg):
    """DOA of a world-frame direction vector in the listener head frame."""
    az_world = math.degrees(math.atan2(vec[1], vec[0]))
    el = math.degrees(math.atan2(vec[2], math.hypot(vec[0], vec[1])))
    return Direction(wrap_azimuth(az_world - yaw_deg), el)


def image_sources(room, src, listener, max_order):
    """All Allen-Berkley image paths up to max_order reflections."""
    if max_order < 0:
        raise RoomError("max_order must be >= 0")
    src.validate_in(room)
    listener.validate_in(room)
    if room.target_t60 > 0:
        beta = t60_to_reflection_coeff(room)
    else:
        beta = 0.0  # anechoic: only the direct path survives (order 0)
    spos = np.asarray(src.position, dtype=np.float64)
    lpos = np.asarray(listener.position, dtype=np.float64)
    dims = room.dims

    def axis_images(axis):
        out = []
        half = max_order // 2 + 1
        for n in range(-half, half + 1):
            for mirrored in (False, True):
                if mirrored:
                    coord = -spos[axis] + 2 * n * dims[axis]
                    count = abs(2 * n - 1)
                else:
                    coord = spos[axis] + 2 * n * dims[axis]
                    count = abs(2 * n)
                if count <= max_order:
                    out.append((coord, count))
        return out

    paths = []
    for cx, nx in axis_images(0):
        for cy, ny in axis_images(1):
            order = nx + ny
            if order > max_order:
                continue
            for cz, nz in axis_images(2):
                total = order + nz
                if total > max_order:
                    continue
                vec = np.array([cx, cy, cz]) - lpos
                d = float(np.linalg.norm(vec))
                if d < 1e-9:
                    raise RoomError("source coincides with listener")
                paths.append(ReflectionPath(
                    attenuation=(beta ** total if total else 1.0)
                                / (4 * math.pi * d),
                    delay=d / SPEED_OF_SOUND,
                    doa=head_frame_doa(vec, listener.yaw_deg),
                    order=total))
    paths.sort(key=lambda p: p.delay)
    return paths


def completeness_order(room, path_m):
    """Smallest reflection order whose image set is complete out to path_m.

    An image at distance d needs up to d * sqrt(sum 1/L_i^2) reflections
    in the worst-case (wall-normal-weighted diagonal) direction, plus one
    for the per-axis discretization.
    """
    spread = math.sqrt(float(np.sum(1.0 / room.dims ** 2)))
    return max(1, int(math.ceil(path_m * spread)) + 1)


def default_max_order(room, cap_path_m=40.0):
    """Order keeping the image set complete over the T60 decay path,
    capped at cap_path_m of travel to bound the image count."""
    if room.target_t60 <= 0:
        return 0
    needed = min(SPEED_OF_SOUND * room.target_t60, cap_path_m)
    return completeness_order(room, needed)


def render_binaural_ir(paths, hrirs, fs):
    """Sum of delayed/attenuated nearest-grid HRIRs -> (2, T) array.

    Paths sharing a nearest HRIR are merged into one fractional-delay
    delta train and convolved once per ear.
    """
    if not paths:
        raise RoomError("empty path list")
    delays = np.array([p.delay for p in paths]) * fs
    attens = np.array([p.attenuation for p in paths])
    total = int(math.ceil(delays.max())) + hrirs.ir_length + dsp.FRAC_DELAY_TAPS
    rec_idx = hrtf.nearest_indices(hrirs, [p.doa for p in paths])
    half = dsp.FRAC_DELAY_TAPS // 2 - 1  # interpolator group delay
    taps = np.arange(dsp.FRAC_DELAY_TAPS)
    out = np.zeros((2, total))
    for ri in np.unique(rec_idx):
        sel = rec_idx == ri
        train = np.zeros(total + half)  # sample index offset by +half
        d_int = np.floor(delays[sel]).astype(int)
        frac = delays[sel] - d_int
        a = attens[sel]
        pure = frac < 1e-12
        np.add.at(train, d_int[pure] + half, a[pure])
        if np.any(~pure):
            u = taps[None, :] - half - frac[~pure, None]
            kern = np.sinc(u) * 0.5 * (1 + np.cos(np.pi * u / (half + 1)))
            np.add.at(train, d_int[~pure, None] + taps[None, :],
                      a[~pure, None] * kern)
        rec = hrirs.records[int(ri)]
        for ch, ir in ((0, rec.left_ir), (1, rec.right_ir)):
            out[ch] += fftconvolve(train, ir)[half:half + total]
    return out


def render_source(sig, bir):
    """Convolve a mono source with a binaural IR, cropped to signal length."""
    if isinstance(sig, MonoSignal):
        x, fs = sig.samples, sig.sample_rate
    else:
        x, fs = np.asarray(sig, dtype=np.float64), None
    left = fftconvolve(x, bir[0])[:len(x)]
    right = fftconvolve(x, bir[1])[:len(x)]
    if fs is None:
        return np.stack([left, right])
    return BinauralSignal(left, right, fs)


@dataclass
class SceneConfig:
    room_lx: tuple = (4.0, 8.0)
    room_ly: tuple = (3.0, 7.0)
    room_lz: tuple = (2.5, 3.5)
    t60: tuple = (0.2, 0.8)  # (0, 0) -> anechoic
    min_separation_deg: float = 10.0
    rejection_budget: int = 10000


def sample_scene(cfg, rng):
    """Draw a random scene honoring margins and angular separation."""
    u = lambda lo_hi: float(rng.uniform(*lo_hi))
    for _ in range(cfg.rejection_budget):
        room = Room(u(cfg.room_lx), u(cfg.room_ly), u(cfg.room_lz),
                    target_t60=u(cfg.t60))
        pick = lambda: tuple(rng.uniform(WALL_MARGIN, d - WALL_MARGIN)
                             for d in room.dims)
        listener = Pose(pick(), yaw_deg=float(rng.uniform(0.0, 360.0)))
        desired = Pose(pick())
        interferer = Pose(pick())
        lpos = np.asarray(listener.position)
        doas = []
        ok = True
        for pose in (desired, interferer):
            vec = np.asarray(pose.position) - lpos
            if np.linalg.norm(vec) < 0.2:
                ok = False
                break
            doas.append(head_frame_doa(vec, listener.yaw_deg))
        if not ok:
            continue
        if hrtf.angular_distance_deg(doas[0], doas[1]) < cfg.min_separation_deg:
            continue
        return Scene(room, listener, desired, interferer,
                     seed=int(rng.integers(0, 2 ** 31)))
    raise RoomError("scene rejection budget exhausted")


def scene_doa(scene, which):
    pose = scene.desired if which == "desired" else scene.interferer
    vec = np.asarray(pose.position) - np.asarray(scene.listener.position)
    return head_frame_doa(vec, scene.listener.yaw_deg)


def schroeder_curve_db(ir):
    """Backward-integrated energy decay of a (2, T) or (T,) IR, in dB."""
    ir = np.atleast_2d(ir)
    energy = np.sum(ir ** 2, axis=0)
    edc = np.cumsum(energy[::-1])[::-1]
    edc = edc / edc[0]
    return 10 * np.log10(np.maximum(edc, 1e-30))


def schroeder_t60(ir, fs, fit_db=(-5.0, -25.0), highpass_hz=80.0):
    """T60 from a linear fit of the Schroeder decay between fit_db levels.

    A zero-phase highpass (default 80 Hz) removes the image method's
    low-frequency buildup — the coherent sum of all-positive reflection
    taps — which otherwise flattens the late decay.
    """
    if highpass_hz:
        b, a = butter(2, highpass_hz / (fs / 2.0), "highpass")
        ir = filtfilt(b, a, np.atleast_2d(ir), axis=1)
    curve = schroeder_curve_db(ir)
    hi, lo = fit_db
    idx = np.flatnonzero((curve <= hi) & (curve >= lo))
    if len(idx) < 2:
        raise RoomError("decay range too short for a T60 fit")
    t = idx / fs
    slope, _ = np.polyfit(t, curve[idx], 1)
    if slope >= 0:
        raise RoomError("non-decaying Schroeder curve")
    return -60.0 / slope


ACTIVITY_FRAME = 0.02  # 20 ms activity frames for the overlap protocol
ACTIVITY_FLOOR_DB = -40.0


def activity_mask(x, fs):
    frame = int(ACTIVITY_FRAME * fs)
    n = len(x) // frame
    e = np.array([np.sum(x[i * frame:(i + 1) * frame] ** 2)
                  for i in range(n)])
    peak = e.max()
    if peak <= 0:
        return np.zeros(n, bool)
    return e > peak * 10 ** (ACTIVITY_FLOOR_DB / 10)


def _active_span(x, fs):
    mask = activity_mask(x, fs)
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise RoomError("silent source: cannot set SIR")
    frame = int(ACTIVITY_FRAME * fs)
    return idx[0] * frame, (idx[-1] + 1) * frame


def mix_scene(s_d, s_i, scene, hrirs, sir_db, overlap_frac=1.0,
              target_mode="direct_path", max_order=None):
    """Render a two-speaker binaural mixture plus per-speaker targets.

    Targets are the sources convolved with the order-0 path of the scene
    (nearest HRIR, with its delay and 1/(4 pi d) gain) — i.e. the
    first-arrival reference in both anechoic and reverberant modes.
    """
    if target_mode not in ("anechoic", "direct_path"):
        raise RoomError("unknown target_mode %r" % target_mode)
    fs = s_d.sample_rate
    if s_i.sample_rate != fs or hrirs.sample_rate != fs:
        raise RoomError("sample rate mismatch")
    if not 0.0 <= overlap_frac <= 1.0:
        raise RoomError("overlap_frac out of [0, 1]")
    if np.sum(s_d.samples ** 2) <= 0 or np.sum(s_i.samples ** 2) <= 0:
        raise RoomError("silent source: cannot set SIR")
    order = default_max_order(scene.room) if max_order is None else max_order

    stems = {}
    targets = {}
    for name, src, pose in (("d", s_d, scene.desired),
                            ("i", s_i, scene.interferer)):
        paths = image_sources(scene.room, pose, scene.listener, order)
        bir = render_binaural_ir(paths, hrirs, fs)
        stems[name] = render_source(src, bir)
        direct = [p for p in paths if p.order == 0]
        bir0 = render_binaural_ir(direct, hrirs, fs)
        targets[name] = render_source(src, bir0)

    # interferer gain for the requested SIR, on the rendered stems
    e_d = np.sum(stems["d"].stack() ** 2)
    e_i = np.sum(stems["i"].stack() ** 2)
    gain = math.sqrt(e_d / e_i / 10 ** (sir_db / 10))

    # shift the interferer so its active region overlaps the desired one
    a0, a1 = _active_span(stems["d"].left + stems["d"].right, fs)
    b0, _ = _active_span(stems["i"].left + stems["i"].right, fs)
    shift = int(round(a0 + (1.0 - overlap_frac) * (a1 - a0))) - b0

    def shifted(arr):
        out = np.zeros_like(arr)
        if shift >= 0:
            out[shift:] = arr[:len(arr) - shift]
        else:
            out[:shift] = arr[-shift:]
        return out

    interferer = BinauralSignal(gain * shifted(stems["i"].left),
                                gain * shifted(stems["i"].right), fs)
    target_i = BinauralSignal(gain * shifted(targets["i"].left),
                              gain * shifted(targets["i"].right), fs)
    mixture = BinauralSignal(stems["d"].left + interferer.left,
                             stems["d"].right + interferer.right, fs)
    return {"mixture": mixture, "target_d": targets["d"],
            "target_i": target_i, "stem_d": stems["d"], "stem_i": interferer}
