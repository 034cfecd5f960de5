"""Batch command-line interface.

Subcommands: synth-hrtf, simulate, train, extract, evaluate, scan.
Configuration is structured key=value text (file via --config, overrides
via --set); unknown keys are rejected and every run writes a
resolved-config snapshot beside its outputs.  All randomness derives
from --seed through named sub-streams.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

import argparse
import csv
import os
import shutil
import sys
from types import SimpleNamespace

import numpy as np

from . import dsp, hrtf, metrics, net, objectives, roomsim, sources, trainer

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# named sub-streams of --seed
STREAM_SIMULATE = 1
STREAM_SOURCES = 2


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# -- key=value configuration ----------------------------------------------------------

def _parse_bool(s):
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ValueError("not a boolean: %r" % s)


_PARSERS = {"int": int, "float": float, "str": str, "bool": _parse_bool}


def resolve_config(schema, config_path=None, overrides=()):
    """Schema {key: (type, default)} + file + overrides -> dict."""
    cfg = {k: d for k, (_, d) in schema.items()}

    def apply(key, val, origin):
        if key not in schema:
            raise CliError(EXIT_CONFIG, "unknown config key %r (%s)"
                           % (key, origin))
        kind = schema[key][0]
        try:
            cfg[key] = _PARSERS[kind](val)
        except ValueError:
            raise CliError(EXIT_CONFIG, "bad %s value for %r: %r"
                           % (kind, key, val))

    if config_path:
        try:
            with open(config_path) as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise CliError(EXIT_CONFIG, "cannot read config: %s" % exc)
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise CliError(EXIT_CONFIG, "bad config line %r" % line)
            apply(key.strip(), val.strip(), config_path)
    for item in overrides or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise CliError(EXIT_CONFIG, "override must be key=value: %r"
                           % item)
        apply(key.strip(), val.strip(), "--set")
    return cfg


def write_snapshot(cfg, seed, command, out_path):
    """Resolved-config snapshot next to the command's outputs."""
    target = os.path.join(out_path, "resolved_config.txt") \
        if os.path.isdir(out_path) else str(out_path) + ".config.txt"
    with open(target, "w") as fh:
        fh.write("command=%s\n" % command)
        fh.write("seed=%d\n" % seed)
        for key in sorted(cfg):
            val = cfg[key]
            if isinstance(val, bool):
                val = "true" if val else "false"
            fh.write("%s=%s\n" % (key, val))
    return target


# -- synth-hrtf ------------------------------------------------------------------------

SYNTH_SCHEMA = {
    "step_deg": ("float", 5.0),
    "elevation_deg": ("float", 0.0),
    "fs": ("int", 16000),
    "ir_len": ("int", 128),
    "head_radius": ("float", hrtf.DEFAULT_HEAD_RADIUS),
}


def cmd_synth_hrtf(args):
    cfg = resolve_config(SYNTH_SCHEMA, args.config, args.set)
    if cfg["step_deg"] <= 0:
        raise CliError(EXIT_CONFIG, "step_deg must be positive")
    grid = hrtf.azimuth_grid(cfg["step_deg"],
                             elevation_deg=cfg["elevation_deg"])
    hs = hrtf.synth_spherical_head(grid, fs=cfg["fs"],
                                   head_radius=cfg["head_radius"],
                                   ir_len=cfg["ir_len"])
    hrtf.save_hrir_set(hs, args.out)
    write_snapshot(cfg, args.seed, "synth-hrtf", args.out)
    print("wrote %d-record bundle to %s" % (len(hs), args.out))
    return EXIT_OK


# -- simulate --------------------------------------------------------------------------

SIMULATE_SCHEMA = {
    "count": ("int", 10),
    "duration_s": ("float", 5.0),
    "mode": ("str", "anechoic"),
    "t60_min": ("float", 0.2),
    "t60_max": ("float", 0.8),
    "sir_min": ("float", 0.0),
    "sir_max": ("float", 5.0),
    "overlap": ("float", 1.0),
    "min_separation_deg": ("float", 10.0),
}


def _corpus_files(corpus):
    files = sorted(f for f in os.listdir(corpus) if f.endswith(".wav"))
    if not files:
        raise CliError(EXIT_DATA, "no WAV files in corpus %s" % corpus)
    return [os.path.join(corpus, f) for f in files]


def _draw_source(files, rng, duration_s, fs):
    if files is None:
        return sources.synth_source(rng, duration_s, fs)
    path = files[int(rng.integers(0, len(files)))]
    data, rate = dsp.read_wav(path)
    if data.ndim != 1:
        raise CliError(EXIT_DATA, "corpus WAV %s is not mono" % path)
    if rate != fs:
        data = dsp.resample_array(data, rate, fs)
    return dsp.MonoSignal(dsp.crop_or_pad(data, int(duration_s * fs), rng),
                          fs)


def cmd_simulate(args):
    cfg = resolve_config(SIMULATE_SCHEMA, args.config, args.set)
    if cfg["mode"] not in ("anechoic", "reverberant"):
        raise CliError(EXIT_CONFIG, "mode must be anechoic or reverberant")
    if cfg["count"] < 1:
        raise CliError(EXIT_CONFIG, "count must be >= 1")
    hs = hrtf.load_hrir_set(args.hrirs)
    fs = hs.sample_rate
    files = None if args.synthetic_sources else _corpus_files(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    shutil.copy(args.hrirs, os.path.join(args.out, "hrirs.bin"))

    t60 = (cfg["t60_min"], cfg["t60_max"]) \
        if cfg["mode"] == "reverberant" else (0.0, 0.0)
    scene_cfg = roomsim.SceneConfig(
        t60=t60, min_separation_deg=cfg["min_separation_deg"])
    rng = np.random.default_rng([args.seed, STREAM_SIMULATE])
    src_rng = np.random.default_rng([args.seed, STREAM_SOURCES])
    rows = []
    for i in range(cfg["count"]):
        scene = roomsim.sample_scene(scene_cfg, rng)
        s_d = _draw_source(files, src_rng, cfg["duration_s"], fs)
        s_i = _draw_source(files, src_rng, cfg["duration_s"], fs)
        sir = float(rng.uniform(cfg["sir_min"], cfg["sir_max"]))
        out = roomsim.mix_scene(s_d, s_i, scene, hs, sir,
                                overlap_frac=cfg["overlap"])
        stems = {}
        for key in ("mixture", "target_d", "target_i"):
            name = "%04d_%s.wav" % (i, key)
            dsp.write_wav(os.path.join(args.out, name),
                          out[key].stack().T, fs)
            stems[key] = name
        doa_d = roomsim.scene_doa(scene, "desired")
        doa_i = roomsim.scene_doa(scene, "interferer")
        rows.append(trainer.MixtureRow(
            "%04d" % i, stems["mixture"], stems["target_d"],
            stems["target_i"], "hrirs.bin",
            doa_d.azimuth_deg, doa_d.elevation_deg,
            doa_i.azimuth_deg, doa_i.elevation_deg,
            sir, scene.room.target_t60, cfg["mode"]))
    manifest = os.path.join(args.out, "manifest.csv")
    trainer.write_manifest(rows, manifest)
    write_snapshot(cfg, args.seed, "simulate", args.out)
    print("wrote %d mixtures to %s" % (len(rows), args.out))
    return EXIT_OK


# -- train -----------------------------------------------------------------------------

TRAIN_SCHEMA = {
    "variant": ("str", "hrtf_complex"),
    "widths": ("str", "16,32,64,128,256"),
    "precision": ("str", "c64"),
    "attention_layers": ("int", 4),
    "heads": ("int", 1),
    "doa_grid_size": ("int", 37),
    "batch_size": ("int", 4),
    "lr": ("float", 1e-3),
    "max_steps": ("int", 1000),
    "alpha": ("float", 1.0),
    "val_every": ("int", 50),
    "val_count": ("int", 4),
    "plateau_window": ("int", 5),
    "plateau_db": ("float", 0.2),
    "clip_norm": ("float", 5.0),
    "crop_s": ("float", 5.0),
}


def _train_config(cfg, manifest, seed):
    try:
        model_cfg = net.ModelConfig(
            variant=cfg["variant"],
            widths=tuple(int(w) for w in cfg["widths"].split(",")),
            heads=cfg["heads"], attention_layers=cfg["attention_layers"],
            doa_grid_size=cfg["doa_grid_size"], precision=cfg["precision"])
        return trainer.TrainConfig(
            manifest=manifest, model=model_cfg, batch_size=cfg["batch_size"],
            lr=cfg["lr"], max_steps=cfg["max_steps"], seed=seed,
            alpha=cfg["alpha"], val_every=cfg["val_every"],
            val_count=cfg["val_count"],
            plateau_window=cfg["plateau_window"],
            plateau_db=cfg["plateau_db"], clip_norm=cfg["clip_norm"],
            crop_s=cfg["crop_s"])
    except (net.NetError, trainer.TrainerError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc))


def cmd_train(args):
    cfg = resolve_config(TRAIN_SCHEMA, args.config, args.set)
    train_cfg = _train_config(cfg, args.manifest, args.seed)
    os.makedirs(args.out, exist_ok=True)
    write_snapshot(cfg, args.seed, "train", args.out)
    result = trainer.train(train_cfg, out_dir=args.out, resume=args.resume)
    print("trained %d steps; final stage %s; best validation SI-SDR %.2f dB"
          % (result.state.step, result.state.stage, result.state.best_val))
    return EXIT_OK


# -- extract ---------------------------------------------------------------------------

def _read_stereo(path):
    data, rate = dsp.read_wav(path)
    if data.ndim != 2 or data.shape[1] != 2:
        raise CliError(EXIT_DATA, "%s is not a stereo WAV" % path)
    return dsp.BinauralSignal(data[:, 0], data[:, 1], rate)


def _grid_step_deg(hs):
    """Median nearest-neighbor spacing of the HRIR grid."""
    dirs = [r.direction for r in hs.records]
    if len(dirs) < 2:
        return 180.0
    spacing = []
    for i, d in enumerate(dirs):
        others = [hrtf.angular_distance_deg(d, o)
                  for j, o in enumerate(dirs) if j != i]
        spacing.append(min(others))
    return float(np.median(spacing))


def cmd_extract(args):
    model = net.load_model(args.checkpoint)
    mixture = _read_stereo(args.mixture)
    query = hrtf.Direction(args.theta, args.phi)
    hs = None
    if model.cfg.variant != "doa_onehot":
        if not args.hrirs:
            raise CliError(EXIT_CONFIG,
                           "--hrirs is required for HRTF-clue models")
        hs = hrtf.load_hrir_set(args.hrirs)
        rec = hrtf.nearest_direction(hs, query)
        dist = hrtf.angular_distance_deg(rec.direction, query)
        if dist > _grid_step_deg(hs):
            print("warning: nearest HRIR is %.1f deg from the requested "
                  "direction" % dist, file=sys.stderr)
    try:
        clue = metrics.clue_for_model(model, hs, query)
        est = metrics.extract(model, mixture, clue)
    except metrics.MetricsError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    out = est.stack().T
    if len(est) < len(mixture):  # keep output length equal to the input
        out = np.pad(out, ((0, len(mixture) - len(est)), (0, 0)))
    dsp.write_wav(args.out, out, mixture.sample_rate)
    write_snapshot({"theta": args.theta, "phi": args.phi},
                   args.seed, "extract", args.out)
    if args.reference:
        ref = _read_stereo(args.reference)
        n = min(len(ref), out.shape[0])
        score = objectives.si_sdr(ref.stack()[:, :n], out.T[:, :n])
        print("si_sdr_db=%.4f" % score)
    return EXIT_OK


# -- evaluate --------------------------------------------------------------------------

def evaluate_manifest(model, rows, crop_s=5.0):
    """Per-mixture metric rows (id, si_sdr_in, si_sdr_out, dILD, dITD)."""
    holder = SimpleNamespace(crop_s=crop_s, model=model.cfg)
    out_rows = []
    for row in rows:
        item = trainer.load_item(row, holder, rng=None)
        mix_spec = item["mixture_spec"]
        est = model.infer(mix_spec, item["clue_d"])
        est_t = np.stack([dsp.istft_array(c) for c in est])
        n = est_t.shape[1]
        ref = item["target_d_time"][:, :n]
        mix_t = np.stack([dsp.istft_array(c) for c in mix_spec])
        si_in = objectives.si_sdr(ref, mix_t[:, :n])
        si_out = objectives.si_sdr(ref, est_t)
        fs = 16000
        d_ild, d_itd = metrics.delta_cues(
            dsp.BinauralSignal(ref[0], ref[1], fs),
            dsp.BinauralSignal(est_t[0], est_t[1], fs))
        out_rows.append((row.id, si_in, si_out, d_ild, d_itd))
    return out_rows


def cmd_evaluate(args):
    model = net.load_model(args.checkpoint)
    rows = trainer.load_manifest(args.manifest)
    report = evaluate_manifest(model, rows, crop_s=args.crop_s)
    means = [float(np.mean([r[i] for r in report])) for i in range(1, 5)]
    with open(args.out, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["id", "si_sdr_in", "si_sdr_out",
                      "delta_ild", "delta_itd"])
        for rid, si_in, si_out, d_ild, d_itd in report:
            out.writerow([rid, "%.4f" % si_in, "%.4f" % si_out,
                          "%.4f" % d_ild, "%.6f" % d_itd])
        out.writerow(["mean"] + ["%.4f" % means[0], "%.4f" % means[1],
                                 "%.4f" % means[2], "%.6f" % means[3]])
    write_snapshot({"crop_s": args.crop_s}, args.seed, "evaluate", args.out)
    print("evaluated %d mixtures; mean SI-SDR %.2f -> %.2f dB"
          % (len(report), means[0], means[1]))
    return EXIT_OK


# -- scan ------------------------------------------------------------------------------

def cmd_scan(args):
    model = net.load_model(args.checkpoint)
    mixture = _read_stereo(args.mixture)
    target = _read_stereo(args.target)
    hs = hrtf.load_hrir_set(args.hrirs) if args.hrirs else None
    try:
        scan = metrics.spatial_scan(model, mixture, hs, target,
                                    elevation_deg=args.elevation,
                                    step_deg=args.step)
    except metrics.MetricsError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    metrics.write_scan_csv(scan, args.out)
    write_snapshot({"elevation": args.elevation, "step": args.step},
                   args.seed, "scan", args.out)
    print("scan peak %.2f dB at azimuth %.1f deg"
          % (float(scan.si_sdr_db.max()), scan.peak_azimuth()))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="bitse", description="binaural target speaker extraction")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="key=value config file")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth-hrtf", help="write a spherical-head bundle")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_hrtf)

    p = sub.add_parser("simulate", help="render a mixture dataset")
    common(p)
    p.add_argument("--hrirs", required=True)
    p.add_argument("--out", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--corpus", help="directory of mono WAVs")
    group.add_argument("--synthetic-sources", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train an extraction model")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None,
                   help="directory holding last.ckpt/state.npz")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract a speaker from a mixture")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--phi", type=float, default=0.0)
    p.add_argument("--hrirs", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", default=None,
                   help="stereo WAV; prints SI-SDR when given")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="metrics report over a manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop-s", type=float, default=5.0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("scan", help="azimuth SI-SDR scan")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--hrirs", default=None)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--step", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scan)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return exc.code
    except trainer.TrainerError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC if "diverged" in str(exc) \
            or "non-finite" in str(exc) else EXIT_DATA
    except (dsp.DspError, hrtf.HrtfError, roomsim.RoomError,
            metrics.MetricsError, net.NetError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
