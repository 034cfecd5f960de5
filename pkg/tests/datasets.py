"""Shared helpers that synthesize small on-disk datasets for tests."""

import math
import os

import numpy as np

from bitse import dsp, hrtf, roomsim, sources, trainer

FS = 16000
ROOM = (6.0, 5.0, 3.0)
LISTENER = (3.0, 2.5, 1.5)


def head_grid(path, step_deg=10.0):
    hs = hrtf.synth_spherical_head(hrtf.azimuth_grid(step_deg))
    hrtf.save_hrir_set(hs, path)
    return hs


def scene_at(theta_d, theta_i, t60=0.0, radius=1.5):
    """Fixed scene with both sources on the horizontal plane."""
    def pos(theta):
        rad = math.radians(theta)
        return (LISTENER[0] + radius * math.cos(rad),
                LISTENER[1] + radius * math.sin(rad),
                LISTENER[2])
    room = roomsim.Room(*ROOM, target_t60=t60)
    return roomsim.Scene(room, roomsim.Pose(LISTENER),
                         roomsim.Pose(pos(theta_d)),
                         roomsim.Pose(pos(theta_i)))


def build_dataset(dirpath, n_rows, seed=0, duration_s=1.2, t60=0.0,
                  sir_range=(0.0, 5.0), thetas=None, grid_step=10.0,
                  max_order=None, min_sep_deg=0.0):
    """Render mixtures into dirpath and return the manifest path."""
    os.makedirs(dirpath, exist_ok=True)
    rng = np.random.default_rng(seed)
    hrir_path = os.path.join(dirpath, "hrirs.bin")
    hs = head_grid(hrir_path, grid_step)
    rows = []
    for i in range(n_rows):
        if thetas is None:
            while True:
                theta_d, theta_i = rng.choice(np.arange(-80, 81, grid_step),
                                              size=2, replace=False)
                if abs(theta_d - theta_i) >= min_sep_deg:
                    break
        else:
            theta_d, theta_i = thetas
        scene = scene_at(float(theta_d), float(theta_i), t60)
        sir = float(rng.uniform(*sir_range))
        s_d = sources.synth_source(rng, duration_s, FS)
        s_i = sources.synth_source(rng, duration_s, FS)
        out = roomsim.mix_scene(s_d, s_i, scene, hs, sir,
                                max_order=max_order)
        stems = {}
        for key in ("mixture", "target_d", "target_i"):
            name = "%03d_%s.wav" % (i, key)
            dsp.write_wav(os.path.join(dirpath, name),
                          out[key].stack().T, FS)
            stems[key] = name
        rows.append(trainer.MixtureRow(
            "%03d" % i, stems["mixture"], stems["target_d"],
            stems["target_i"], "hrirs.bin",
            float(theta_d), 0.0, float(theta_i), 0.0, sir, t60,
            "reverberant" if t60 > 0 else "anechoic"))
    manifest = os.path.join(dirpath, "manifest.csv")
    trainer.write_manifest(rows, manifest)
    return manifest
