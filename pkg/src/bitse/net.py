"""Complex-valued U-Net for binaural target-speaker extraction.

Encoder: five (conv 4x4 stride 2 pad 1, global layer norm, CReLU)
blocks on the 2-channel binaural spectrogram.  Bottleneck: per-frame
feature vectors attend over time, are gated elementwise by the clue
embedding, pass four more attention layers and a linear.  Decoder:
five transposed-conv blocks with concatenated skip connections and a
final 1x1 convolution with no activation.

Variants: `hrtf_complex` (complex clue, complex weights), `hrtf_ri`
(real/imaginary parts stacked into 4 real channels, real weights,
plain ReLU), `doa_onehot` (one-hot direction clue instead of an HRTF).
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ctensor as ct
from .ctensor import ComplexTensor, ops

VARIANTS = ("hrtf_complex", "hrtf_ri", "doa_onehot")
N_BLOCKS = 5
TIME_MULTIPLE = 2 ** N_BLOCKS

WHITEN_EPS = 1e-8

CHECKPOINT_MAGIC = b"BTSE"
CHECKPOINT_VERSION = 1
_VARIANT_TAGS = {v: i for i, v in enumerate(VARIANTS)}


class NetError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "hrtf_complex"
    widths: tuple = (16, 32, 64, 128, 256)
    kernel: tuple = (4, 4)
    stride: tuple = (2, 2)
    padding: tuple = (1, 1)
    heads: int = 1
    attention_layers: int = 4
    doa_grid_size: int = 37
    n_bins: int = 257
    precision: str = "c64"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.variant not in VARIANTS:
            raise NetError("unknown variant %r" % self.variant)
        if len(self.widths) != N_BLOCKS:
            raise NetError("need %d encoder widths, got %d"
                           % (N_BLOCKS, len(self.widths)))
        if min(self.widths) < 1 or self.heads < 1:
            raise NetError("widths and heads must be positive")

    @property
    def in_channels(self):
        return 4 if self.variant == "hrtf_ri" else 2

    @property
    def padded_bins(self):
        mult = TIME_MULTIPLE
        return ((self.n_bins + mult - 1) // mult) * mult

    @property
    def bottleneck_bins(self):
        return self.padded_bins // TIME_MULTIPLE

    @property
    def embed_dim(self):
        return self.widths[-1] * self.bottleneck_bins

    @property
    def clue_len(self):
        if self.variant == "doa_onehot":
            return self.doa_grid_size
        return self.in_channels * self.n_bins

    @property
    def is_real(self):
        return self.variant == "hrtf_ri"


def param_count(cfg):
    """Analytic complex-parameter count (pairs of floats for real nets)."""
    kf, kt = cfg.kernel
    k = kf * kt
    total = 0
    c_in = cfg.in_channels
    for w in cfg.widths:  # encoder: conv + bias + gLN gain/bias
        total += w * c_in * k + w + 2 * w
        c_in = w
    ws = cfg.widths
    dec_out = (ws[3], ws[2], ws[1], ws[0], ws[0])
    dec_in = (2 * ws[4], 2 * ws[3], 2 * ws[2], 2 * ws[1], 2 * ws[0])
    for ci, co in zip(dec_in, dec_out):  # decoder convT + bias + gLN
        total += ci * co * k + co + 2 * co
    total += cfg.in_channels * ws[0] + cfg.in_channels  # final 1x1 conv
    e = cfg.embed_dim
    total += cfg.clue_len * e + e  # clue FC
    total += e * e + e  # bottleneck output linear
    total += 2 * (cfg.attention_layers + 2)  # bottleneck norms
    return total


class Model:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.params = {}
        rng = np.random.default_rng(seed)
        kf, kt = cfg.kernel

        def add(name, shape, fan_in, kind="weight"):
            if kind == "gain":
                data = np.ones(shape, complex)
            elif kind == "zero":
                data = np.zeros(shape, complex)
            else:
                a = 1.0 / np.sqrt(fan_in)
                data = rng.uniform(-a, a, shape)
                if not cfg.is_real:
                    data = data + 1j * rng.uniform(-a, a, shape)
            self.params[name] = ComplexTensor(data, requires_grad=True,
                                              dtype=cfg.precision)

        c_in = cfg.in_channels
        for i, w in enumerate(cfg.widths):
            add("enc%d.w" % i, (w, c_in, kf, kt), c_in * kf * kt)
            add("enc%d.b" % i, (w, 1, 1), 1, "zero")
            add("enc%d.gain" % i, (w, 1, 1), 1, "gain")
            add("enc%d.bias" % i, (w, 1, 1), 1, "zero")
            c_in = w
        ws = cfg.widths
        dec_out = (ws[3], ws[2], ws[1], ws[0], ws[0])
        dec_in = (2 * ws[4], 2 * ws[3], 2 * ws[2], 2 * ws[1], 2 * ws[0])
        for j, (ci, co) in enumerate(zip(dec_in, dec_out)):
            add("dec%d.w" % j, (ci, co, kf, kt), ci * kf * kt // 4)
            add("dec%d.b" % j, (co, 1, 1), 1, "zero")
            add("dec%d.gain" % j, (co, 1, 1), 1, "gain")
            add("dec%d.bias" % j, (co, 1, 1), 1, "zero")
        add("out.w", (cfg.in_channels, ws[0], 1, 1), ws[0])
        add("out.b", (cfg.in_channels, 1, 1), 1, "zero")
        e = cfg.embed_dim
        add("clue.w", (cfg.clue_len, e), cfg.clue_len)
        add("clue.b", (e,), 1, "zero")
        add("bott.w", (e, e), e)
        add("bott.b", (e,), 1, "zero")
        # per-layer norms keep the CReLU attention magnitudes bounded
        for l in range(cfg.attention_layers + 2):
            add("batt%d.gain" % l, (1, 1), 1, "gain")
            add("batt%d.bias" % l, (1, 1), 1, "zero")

    # -- bookkeeping ---------------------------------------------------------

    def parameters(self):
        return self.params

    def num_parameters(self):
        return sum(int(np.prod(p.shape)) for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- clue embedding --------------------------------------------------------

    def _clue_array(self, clue):
        values = getattr(clue, "values", clue)
        values = np.asarray(values)
        if self.cfg.variant == "doa_onehot":
            if values.shape != (self.cfg.doa_grid_size,):
                raise NetError("one-hot clue length %s != grid %d"
                               % (values.shape, self.cfg.doa_grid_size))
            if np.sum(values == 1) != 1 or np.sum(values != 0) != 1:
                raise NetError("clue is not one-hot")
            return values.astype(float)
        if values.shape != (2, self.cfg.n_bins):
            raise NetError("clue shape %s != (2, %d)"
                           % (values.shape, self.cfg.n_bins))
        if self.cfg.is_real:
            return np.stack([values[0].real, values[0].imag,
                             values[1].real, values[1].imag])
        return values

    def embed_clue(self, clue):
        """Clue -> E-dim embedding tensor (attention + FC, or FC only)."""
        if isinstance(clue, ComplexTensor):
            x = clue  # caller-tracked tensor (e.g. clue-gradient checks)
        else:
            x = ct.tensor(self._clue_array(clue), dtype=self.cfg.precision)
        if self.cfg.variant == "doa_onehot":
            flat = ops.reshape(x, (1, self.cfg.doa_grid_size))
        else:
            att = ops.attention(x, x, x)  # rows = ears (or RI components)
            flat = ops.reshape(att, (1, self.cfg.clue_len))
        emb = ops.linear(flat, self.params["clue.w"], self.params["clue.b"])
        return ops.reshape(emb, (self.cfg.embed_dim,))

    # -- forward -----------------------------------------------------------------

    def _block(self, x, prefix, transpose):
        cfg = self.cfg
        if transpose:
            y = ops.conv_transpose2d(x, self.params[prefix + ".w"],
                                     cfg.stride, cfg.padding)
        else:
            y = ops.conv2d(x, self.params[prefix + ".w"],
                           cfg.stride, cfg.padding)
        y = ops.add(y, self.params[prefix + ".b"])
        y = ops.global_layer_norm(y, self.params[prefix + ".gain"],
                                  self.params[prefix + ".bias"])
        return ops.crelu(y)

    def _bottleneck(self, x, emb, frames):
        cfg = self.cfg
        e = cfg.embed_dim
        def norm(t, l):
            return ops.global_layer_norm(t, self.params["batt%d.gain" % l],
                                         self.params["batt%d.bias" % l])

        seq = ops.transpose2d(ops.reshape(x, (e, frames)))  # (N', E)
        seq = norm(ops.add(ops.attention(seq, seq, seq, cfg.heads), seq), 0)
        seq = norm(ops.mul(seq, ops.reshape(emb, (1, e))), 1)
        for l in range(cfg.attention_layers):
            seq = norm(ops.add(ops.attention(seq, seq, seq, cfg.heads), seq),
                       l + 2)
        seq = ops.linear(seq, self.params["bott.w"], self.params["bott.b"])
        return ops.reshape(ops.transpose2d(seq),
                           (cfg.widths[-1], cfg.bottleneck_bins, frames))

    def forward(self, mixture, clue):
        """(2, K, N) complex spectrogram + clue -> same-shape estimate."""
        cfg = self.cfg
        mix = mixture.data if isinstance(mixture, ComplexTensor) \
            else np.asarray(mixture)
        if mix.ndim != 3 or mix.shape[0] != 2 or mix.shape[1] != cfg.n_bins:
            raise NetError("mixture shape %s != (2, %d, N)"
                           % (mix.shape, cfg.n_bins))
        n = mix.shape[2]
        if n < TIME_MULTIPLE:
            raise NetError("need at least %d frames, got %d"
                           % (TIME_MULTIPLE, n))
        # per-bin whitening: acoustic spectra span a huge dynamic range
        # across frequency, which leaves gradients ill-conditioned; the
        # network sees the whitened mixture and its output is scaled back
        scale = np.sqrt(np.mean(np.abs(mix) ** 2, axis=(0, 2),
                                keepdims=True)) + WHITEN_EPS
        mix = mix / scale
        if cfg.is_real:
            mix = np.stack([mix[0].real, mix[0].imag,
                            mix[1].real, mix[1].imag])
        x = ct.tensor(mix, dtype=cfg.precision)
        n_pad = ((n + TIME_MULTIPLE - 1) // TIME_MULTIPLE) * TIME_MULTIPLE
        x = ops.pad2d(x, (0, cfg.padded_bins - cfg.n_bins), (0, n_pad - n))

        skips = []
        for i in range(N_BLOCKS):
            x = self._block(x, "enc%d" % i, transpose=False)
            skips.append(x)

        emb = self.embed_clue(clue)
        x = self._bottleneck(x, emb, n_pad // TIME_MULTIPLE)

        for j in range(N_BLOCKS):
            x = ops.cat([x, skips[N_BLOCKS - 1 - j]], axis=0)
            x = self._block(x, "dec%d" % j, transpose=True)
        x = ops.conv2d(x, self.params["out.w"])  # 1x1, no activation
        x = ops.add(x, self.params["out.b"])
        x = ops.take(x, slice(0, cfg.n_bins), axis=1)
        x = ops.take(x, slice(0, n), axis=2)

        if cfg.is_real:
            left = ops.add(ops.take(x, slice(0, 1), axis=0),
                           ops.mul(ops.take(x, slice(1, 2), axis=0), 1j))
            right = ops.add(ops.take(x, slice(2, 3), axis=0),
                            ops.mul(ops.take(x, slice(3, 4), axis=0), 1j))
            x = ops.cat([left, right], axis=0)
        return ops.mul(x, scale)  # undo the input whitening

    def infer(self, mixture, clue):
        """Forward pass outside any gradient tape; returns a numpy array."""
        tape = ct.set_tape(ct.Tape())
        try:
            out = self.forward(mixture, clue).data.copy()
        finally:
            tape.reset()
            ct.set_tape(ct.Tape())
        return out


# -- checkpoint I/O ------------------------------------------------------------------

def _config_text(cfg):
    items = [
        ("variant", cfg.variant),
        ("widths", ",".join(str(w) for w in cfg.widths)),
        ("kernel", "%d,%d" % cfg.kernel),
        ("stride", "%d,%d" % cfg.stride),
        ("padding", "%d,%d" % cfg.padding),
        ("heads", str(cfg.heads)),
        ("attention_layers", str(cfg.attention_layers)),
        ("doa_grid_size", str(cfg.doa_grid_size)),
        ("n_bins", str(cfg.n_bins)),
        ("precision", cfg.precision),
    ]
    return "".join("%s=%s\n" % kv for kv in items)


def _config_from_text(text):
    kv = {}
    for line in text.splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            kv[key] = val
    tup = lambda s: tuple(int(v) for v in s.split(","))
    return ModelConfig(variant=kv["variant"], widths=tup(kv["widths"]),
                       kernel=tup(kv["kernel"]), stride=tup(kv["stride"]),
                       padding=tup(kv["padding"]), heads=int(kv["heads"]),
                       attention_layers=int(kv["attention_layers"]),
                       doa_grid_size=int(kv["doa_grid_size"]),
                       n_bins=int(kv["n_bins"]), precision=kv["precision"])


def save_model(model, path):
    cfg = model.cfg
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION,
                          _VARIANT_TAGS[cfg.variant]))
    text = _config_text(cfg).encode()
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        nb = name.encode()
        is_complex = 0 if cfg.is_real else 1
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BI", is_complex, len(p.shape)))
        buf.write(struct.pack("<%dI" % len(p.shape), *p.shape))
        if is_complex:
            inter = np.empty(p.data.size * 2, dtype="<f4")
            inter[0::2] = p.data.real.ravel()
            inter[1::2] = p.data.imag.ravel()
            buf.write(inter.tobytes())
        else:
            buf.write(p.data.real.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise NetError("bad checkpoint magic %r" % blob[:4])
    off = 4
    version, tag = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise NetError("unsupported checkpoint version %d" % version)
    (tlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    cfg = _config_from_text(blob[off:off + tlen].decode())
    off += tlen
    if _VARIANT_TAGS[cfg.variant] != tag:
        raise NetError("variant tag/config mismatch")
    model = Model(cfg, seed=0)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    if count != len(model.params):
        raise NetError("parameter count mismatch")
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode()
        off += nlen
        is_complex, rank = struct.unpack_from("<BI", blob, off)
        off += 5
        shape = struct.unpack_from("<%dI" % rank, blob, off)
        off += 4 * rank
        if name not in model.params:
            raise NetError("unknown parameter %r" % name)
        p = model.params[name]
        if tuple(shape) != p.shape:
            raise NetError("shape mismatch for %r" % name)
        size = int(np.prod(shape))
        if is_complex:
            flat = np.frombuffer(blob, dtype="<f4", count=2 * size,
                                 offset=off)
            off += 8 * size
            data = (flat[0::2] + 1j * flat[1::2]).reshape(shape)
        else:
            flat = np.frombuffer(blob, dtype="<f4", count=size, offset=off)
            off += 4 * size
            data = flat.reshape(shape).astype(complex)
        p.data = np.ascontiguousarray(data).astype(p.data.dtype)
    return model
