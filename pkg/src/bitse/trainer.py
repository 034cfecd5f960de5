"""Training pipeline: manifest-driven batches, Adam on complex
parameters, the two-stage loss schedule, and resumable checkpoints.

Stage 1 trains with the SI-SDR term only; once validation SI-SDR
plateaus the L1 magnitude term is enabled (stage 2).  Every step invokes
the model once per speaker with the clues swapped and averages the two
loss terms; the invocation log records this alternation.
"""

import csv
import json
import os
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import ctensor as ct
from . import dsp, hrtf, metrics, net, objectives

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MANIFEST_FIELDS = ["id", "mixture", "target_d", "target_i", "hrirs",
                   "theta_d", "phi_d", "theta_i", "phi_i", "sir_db",
                   "t60", "mode"]


class TrainerError(RuntimeError):
    pass


@dataclass
class MixtureRow:
    id: str
    mixture: str
    target_d: str
    target_i: str
    hrirs: str
    theta_d: float
    phi_d: float
    theta_i: float
    phi_i: float
    sir_db: float
    t60: float
    mode: str


def write_manifest(rows, path):
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, MANIFEST_FIELDS)
        out.writeheader()
        for row in rows:
            out.writerow({k: getattr(row, k) for k in MANIFEST_FIELDS})


def load_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise TrainerError("manifest columns %s != %s"
                               % (reader.fieldnames, MANIFEST_FIELDS))
        for rec in reader:
            for key in ("mixture", "target_d", "target_i", "hrirs"):
                if not os.path.isabs(rec[key]):
                    rec[key] = os.path.join(base, rec[key])
            rows.append(MixtureRow(
                rec["id"], rec["mixture"], rec["target_d"], rec["target_i"],
                rec["hrirs"], float(rec["theta_d"]), float(rec["phi_d"]),
                float(rec["theta_i"]), float(rec["phi_i"]),
                float(rec["sir_db"]), float(rec["t60"]), rec["mode"]))
    if not rows:
        raise TrainerError("empty manifest")
    return rows


@dataclass
class TrainConfig:
    manifest: str
    model: net.ModelConfig = field(default_factory=net.ModelConfig)
    batch_size: int = 4
    lr: float = 1e-3
    max_steps: int = 1000
    seed: int = 0
    alpha: float = 1.0  # stage-2 L1 weight
    val_every: int = 50
    val_count: int = 4
    plateau_window: int = 5
    plateau_db: float = 0.2
    clip_norm: float = 5.0
    crop_s: float = 5.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainerError("batch size must be >= 1")
        if self.lr <= 0:
            raise TrainerError("learning rate must be positive")


@dataclass
class TrainState:
    step: int = 0
    stage: str = "stage1"
    m: dict = field(default_factory=dict)  # first moments, complex
    v: dict = field(default_factory=dict)  # second moments, (2,)+shape real
    best_val: float = -np.inf
    val_history: list = field(default_factory=list)
    stage_switch_step: int = -1
    rng_state: dict = field(default_factory=dict)


def save_state(state, path):
    meta = {"step": state.step, "stage": state.stage,
            "best_val": state.best_val, "val_history": state.val_history,
            "stage_switch_step": state.stage_switch_step,
            "rng_state": state.rng_state}
    arrays = {}
    for name, arr in state.m.items():
        arrays["m." + name] = arr
    for name, arr in state.v.items():
        arrays["v." + name] = arr
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_state(path):
    blob = np.load(path)
    meta = json.loads(str(blob["meta"]))
    state = TrainState(step=meta["step"], stage=meta["stage"],
                       best_val=meta["best_val"],
                       val_history=meta["val_history"],
                       stage_switch_step=meta["stage_switch_step"],
                       rng_state=meta["rng_state"])
    for key in blob.files:
        if key.startswith("m."):
            state.m[key[2:]] = blob[key]
        elif key.startswith("v."):
            state.v[key[2:]] = blob[key]
    return state


# -- data pipeline ---------------------------------------------------------------------

_hrir_cache = {}
_clue_cache = {}


def _load_hrirs(path):
    path = os.path.abspath(path)
    if path not in _hrir_cache:
        _hrir_cache[path] = hrtf.load_hrir_set(path)
    return _hrir_cache[path]


def _clue(model_cfg, hrirs_path, az, el):
    key = (model_cfg.variant, model_cfg.n_bins, model_cfg.doa_grid_size,
           os.path.abspath(hrirs_path), az, el)
    if key not in _clue_cache:
        holder = SimpleNamespace(cfg=model_cfg)
        _clue_cache[key] = metrics.clue_for_model(
            holder, _load_hrirs(hrirs_path), hrtf.Direction(az, el))
    return _clue_cache[key]


def _load_stems(row, crop_len, rng):
    """Read mixture and targets, apply one shared crop/pad window."""
    stems = []
    rate = None
    for path in (row.mixture, row.target_d, row.target_i):
        data, fs = dsp.read_wav(path)
        if data.ndim != 2 or data.shape[1] != 2:
            raise TrainerError("expected stereo WAV at %s" % path)
        if rate is None:
            rate = fs
        elif fs != rate:
            raise TrainerError("sample rate mismatch in row %s" % row.id)
        stems.append(data.T)  # (2, n)
    n = stems[0].shape[1]
    if any(s.shape[1] != n for s in stems):
        raise TrainerError("stem lengths differ in row %s" % row.id)
    if n > crop_len:
        onset = 0 if rng is None else int(rng.integers(0, n - crop_len + 1))
        stems = [s[:, onset:onset + crop_len] for s in stems]
    elif n < crop_len:
        stems = [np.pad(s, ((0, 0), (0, crop_len - n))) for s in stems]
    return stems, rate


def load_item(row, cfg, rng=None):
    """Manifest row -> training item with spectrograms and both clues."""
    fs = 16000
    crop_len = int(round(cfg.crop_s * fs))
    (mix, tgt_d, tgt_i), rate = _load_stems(row, crop_len, rng)
    if rate != fs:
        raise TrainerError("row %s is %d Hz; expected %d" % (row.id, rate, fs))
    spec = lambda x: np.stack([dsp.stft_array(c) for c in x])
    return {
        "row": row,
        "mixture_spec": spec(mix),
        "target_d_spec": spec(tgt_d),
        "target_i_spec": spec(tgt_i),
        "target_d_time": tgt_d,
        "target_i_time": tgt_i,
        "clue_d": _clue(cfg.model, row.hrirs, row.theta_d, row.phi_d),
        "clue_i": _clue(cfg.model, row.hrirs, row.theta_i, row.phi_i),
    }


def batch_iter(manifest, cfg, rng):
    """Endless deterministic stream of training batches.

    Each epoch is a fresh seeded shuffle of the manifest; items carry
    both speakers' clues so the two-speaker loss is computable.
    """
    rows = manifest if isinstance(manifest, list) else load_manifest(manifest)
    while True:
        order = rng.permutation(len(rows))
        batch = []
        for i in order:
            batch.append(load_item(rows[int(i)], cfg, rng))
            if len(batch) == cfg.batch_size:
                yield batch
                batch = []


# -- optimizer -------------------------------------------------------------------------

def clip_gradients(grads, max_norm):
    """Scale the gradient dict to a global norm of at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.real ** 2) + np.sum(g.imag ** 2))
    norm = np.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


def adam_step(params, grads, state, lr):
    """One Adam update, real and imaginary components independent."""
    t = state.step  # caller increments step before the update
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g.real)) or not np.all(np.isfinite(g.imag)):
            raise TrainerError("non-finite gradient for parameter %r" % name)
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, complex)
            state.v[name] = np.zeros((2,) + p.shape)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v[0] += (1 - ADAM_BETA2) * g.real ** 2
        v[1] += (1 - ADAM_BETA2) * g.imag ** 2
        mhat = m / (1 - ADAM_BETA1 ** t)
        vhat = v / (1 - ADAM_BETA2 ** t)
        step_re = lr * mhat.real / (np.sqrt(vhat[0]) + ADAM_EPS)
        step_im = lr * mhat.imag / (np.sqrt(vhat[1]) + ADAM_EPS)
        p.data = (p.data - (step_re + 1j * step_im)).astype(p.data.dtype)


# -- loss/validation --------------------------------------------------------------------

def _loss_config(cfg, stage):
    if stage == "stage1":
        return objectives.LossConfig(alpha=0.0, stage="stage1")
    return objectives.LossConfig(alpha=cfg.alpha, stage="stage2")


def train_step(model, batch, state, cfg, invocations=None):
    """Forward both speakers per item, average, backprop, Adam update."""
    loss_cfg = _loss_config(cfg, state.stage)
    tape = ct.set_tape(ct.Tape())
    try:
        terms = []
        for item in batch:
            est_d = model.forward(item["mixture_spec"], item["clue_d"])
            est_i = model.forward(item["mixture_spec"], item["clue_i"])
            if invocations is not None:
                invocations.append((state.step, item["row"].id, "d"))
                invocations.append((state.step, item["row"].id, "i"))
            terms.append(objectives.total_loss(
                item["target_d_spec"], item["target_i_spec"],
                est_d, est_i, loss_cfg))
        total = terms[0]
        for term in terms[1:]:
            total = ct.add(total, term)
        total = ct.mul(total, 1.0 / len(terms))
        loss_val = float(total.data.real.item())
        if not np.isfinite(loss_val):
            raise TrainerError("training loss diverged (non-finite)")
        model.zero_grad()
        ct.backward(total)
        grads = {}
        for name, p in model.params.items():
            g = np.zeros(p.shape, complex) if p.grad is None \
                else np.asarray(p.grad, dtype=complex)
            if model.cfg.is_real:
                g = g.real.astype(complex)  # keep real nets real
            grads[name] = g
    finally:
        tape.reset()
        ct.set_tape(ct.Tape())
    grads, _ = clip_gradients(grads, cfg.clip_norm)
    adam_step(model.params, grads, state, cfg.lr)
    return loss_val


def validate(model, rows, cfg):
    """Mean SI-SDR of the clue_d extraction on deterministic crops."""
    scores = []
    for row in rows[:cfg.val_count]:
        item = load_item(row, cfg, rng=None)
        est = model.infer(item["mixture_spec"], item["clue_d"])
        est_t = np.stack([dsp.istft_array(c) for c in est])
        ref = item["target_d_time"][:, :est_t.shape[1]]
        scores.append(objectives.si_sdr(ref, est_t[:, :ref.shape[1]]))
    return float(np.mean(scores))


def _plateaued(history, window, tol_db):
    if len(history) < window:
        return False
    return history[-1] - history[-window] < tol_db


@dataclass
class TrainResult:
    model: object
    state: TrainState
    log: list  # (step, stage, loss, si_sdr_val or "")
    invocations: list  # (step, row id, speaker role)


def train(cfg, out_dir=None, resume=None):
    """Run the two-stage schedule; write checkpoints and CSV logs."""
    rows = load_manifest(cfg.manifest)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    if resume:
        model = net.load_model(os.path.join(resume, "last.ckpt"))
        state = load_state(os.path.join(resume, "state.npz"))
        rng = np.random.default_rng(cfg.seed)
        rng.bit_generator.state = state.rng_state
    else:
        model = net.Model(cfg.model, seed=cfg.seed)
        state = TrainState()
        rng = np.random.default_rng(cfg.seed)
    batches = batch_iter(rows, cfg, rng)
    log = []
    invocations = []

    while state.step < cfg.max_steps:
        batch = next(batches)
        state.step += 1
        loss = train_step(model, batch, state, cfg, invocations)
        val = ""
        if state.step % cfg.val_every == 0 or state.step == cfg.max_steps:
            score = validate(model, rows, cfg)
            state.val_history.append(score)
            val = score
            if score > state.best_val:
                state.best_val = score
                if out_dir:
                    net.save_model(model, os.path.join(out_dir, "best.ckpt"))
            if state.stage == "stage1" and _plateaued(
                    state.val_history, cfg.plateau_window, cfg.plateau_db):
                state.stage = "stage2"
                state.stage_switch_step = state.step
                state.val_history = []  # fresh plateau window for stage 2
        log.append((state.step, state.stage, loss, val))

    state.rng_state = rng.bit_generator.state
    if out_dir:
        net.save_model(model, os.path.join(out_dir, "last.ckpt"))
        save_state(state, os.path.join(out_dir, "state.npz"))
        with open(os.path.join(out_dir, "log.csv"), "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["step", "stage", "loss", "si_sdr_val"])
            out.writerows(log)
        with open(os.path.join(out_dir, "invocations.csv"), "w",
                  newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["step", "mixture_id", "speaker"])
            out.writerows(invocations)
    return TrainResult(model, state, log, invocations)
