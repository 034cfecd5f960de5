import csv
import os

import numpy as np
import pytest

from bitse import ctensor as ct
from bitse import hrtf, net, trainer
from datasets import build_dataset

MINI = dict(widths=(1, 1, 1, 1, 1), precision="c64")


def mini_train_cfg(manifest, **kw):
    base = dict(manifest=manifest, model=net.ModelConfig(**MINI),
                batch_size=1, lr=1e-3, max_steps=4, seed=0, crop_s=0.5,
                val_every=2, val_count=1, plateau_window=50)
    base.update(kw)
    return trainer.TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return build_dataset(str(root), n_rows=2, seed=7, duration_s=1.2,
                         thetas=(40.0, -30.0))


# -- manifest ------------------------------------------------------------------------

def test_manifest_roundtrip(dataset):
    rows = trainer.load_manifest(dataset)
    assert len(rows) == 2
    assert rows[0].theta_d == 40.0 and rows[0].theta_i == -30.0
    assert os.path.isabs(rows[0].mixture)
    assert os.path.exists(rows[0].mixture)
    assert rows[0].mode == "anechoic"


def test_manifest_bad_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(trainer.TrainerError):
        trainer.load_manifest(path)


def test_manifest_empty(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text(",".join(trainer.MANIFEST_FIELDS) + "\n")
    with pytest.raises(trainer.TrainerError):
        trainer.load_manifest(path)


# -- batch_iter ------------------------------------------------------------------------

def test_batch_iter_deterministic(dataset):
    cfg = mini_train_cfg(dataset)

    def first_ids(seed, n=6):
        it = trainer.batch_iter(dataset, cfg, np.random.default_rng(seed))
        return [item["row"].id for _ in range(n) for item in next(it)]

    assert first_ids(3) == first_ids(3)
    # both rows appear once per epoch
    assert sorted(first_ids(3)[:2]) == ["000", "001"]


def test_batch_iter_five_second_protocol(dataset):
    cfg = mini_train_cfg(dataset, crop_s=5.0)
    it = trainer.batch_iter(dataset, cfg, np.random.default_rng(0))
    item = next(it)[0]
    assert item["mixture_spec"].shape == (2, 257, 622)
    assert item["target_d_spec"].shape == (2, 257, 622)
    assert item["target_i_spec"].shape == (2, 257, 622)


def test_batch_iter_clue_matches_manifest(dataset):
    cfg = mini_train_cfg(dataset)
    rows = trainer.load_manifest(dataset)
    it = trainer.batch_iter(dataset, cfg, np.random.default_rng(0))
    item = next(it)[0]
    hs = hrtf.load_hrir_set(rows[0].hrirs)
    rec = hrtf.nearest_direction(hs, hrtf.Direction(item["row"].theta_d, 0.0))
    assert np.array_equal(item["clue_d"], hrtf.hrir_to_clue(rec).values)


# -- adam ------------------------------------------------------------------------------

def _toy_params(values):
    return {name: ct.tensor(np.array(val, complex), requires_grad=True)
            for name, val in values.items()}


def test_adam_zero_gradient_no_change():
    params = _toy_params({"w": [1.0 + 2.0j, -0.5]})
    state = trainer.TrainState(step=1)
    before = params["w"].data.copy()
    trainer.adam_step(params, {"w": np.zeros(2, complex)}, state, lr=0.1)
    assert np.array_equal(params["w"].data, before)


def test_adam_constant_gradient_approaches_lr_sign():
    params = _toy_params({"w": [0.0]})
    state = trainer.TrainState()
    lr = 0.01
    prev = params["w"].data.copy()
    for _ in range(300):
        state.step += 1
        trainer.adam_step(params, {"w": np.array([2.5 + 0j])}, state, lr)
        delta = prev - params["w"].data
        prev = params["w"].data.copy()
    # Adam's stationary-gradient limit steps by lr in the sign direction
    assert abs(delta[0].real - lr) < 0.05 * lr
    assert delta[0].imag == 0.0


def test_adam_independent_components():
    params = _toy_params({"w": [0.0]})
    state = trainer.TrainState(step=1)
    trainer.adam_step(params, {"w": np.array([1.0 + 1.0j])}, state, lr=0.1)
    w = params["w"].data[0]
    assert abs(w.real - w.imag) < 1e-12
    assert w.real < 0


def test_adam_nan_gradient_names_parameter():
    params = _toy_params({"good": [1.0], "bad": [1.0]})
    state = trainer.TrainState(step=1)
    grads = {"good": np.zeros(1, complex),
             "bad": np.array([np.nan + 0j])}
    with pytest.raises(trainer.TrainerError, match="bad"):
        trainer.adam_step(params, grads, state, lr=0.1)


def test_clip_gradients():
    grads = {"a": np.array([3.0 + 0j]), "b": np.array([4.0j])}
    clipped, norm = trainer.clip_gradients(grads, 5.0)
    assert abs(norm - 5.0) < 1e-12
    assert clipped is not grads or clipped == grads
    big = {"a": np.array([30.0 + 0j]), "b": np.array([40.0j])}
    clipped, norm = trainer.clip_gradients(big, 5.0)
    assert abs(norm - 50.0) < 1e-12
    total = sum(np.sum(g.real ** 2 + g.imag ** 2) for g in clipped.values())
    assert abs(np.sqrt(total) - 5.0) < 1e-9


# -- state serialization ------------------------------------------------------------------

def test_state_roundtrip(tmp_path):
    state = trainer.TrainState(step=17, stage="stage2", best_val=3.25,
                               val_history=[1.0, 2.0, 3.25],
                               stage_switch_step=10,
                               rng_state=np.random.default_rng(5)
                               .bit_generator.state)
    state.m["w"] = np.array([1.0 + 2.0j, 3.0])
    state.v["w"] = np.ones((2, 2))
    path = tmp_path / "state.npz"
    trainer.save_state(state, path)
    back = trainer.load_state(path)
    assert back.step == 17 and back.stage == "stage2"
    assert back.best_val == 3.25
    assert back.val_history == [1.0, 2.0, 3.25]
    assert back.stage_switch_step == 10
    assert back.rng_state == state.rng_state
    assert np.array_equal(back.m["w"], state.m["w"])
    assert np.array_equal(back.v["w"], state.v["w"])


# -- training loop ---------------------------------------------------------------------

def test_train_smoke_and_logs(dataset, tmp_path):
    cfg = mini_train_cfg(dataset)
    out = str(tmp_path / "run")
    res = trainer.train(cfg, out_dir=out)
    assert res.state.step == 4
    assert len(res.log) == 4
    assert all(np.isfinite(row[2]) for row in res.log)
    # validation at steps 2 and 4
    assert res.log[1][3] != "" and res.log[3][3] != ""
    assert res.log[0][3] == ""
    for name in ("last.ckpt", "best.ckpt", "state.npz", "log.csv",
                 "invocations.csv"):
        assert os.path.exists(os.path.join(out, name)), name
    with open(os.path.join(out, "log.csv"), newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "stage", "loss", "si_sdr_val"]
    assert len(rows) == 5


def test_train_clue_alternation_logged(dataset, tmp_path):
    cfg = mini_train_cfg(dataset, max_steps=3)
    res = trainer.train(cfg, out_dir=str(tmp_path / "run"))
    # one d and one i invocation per item per step, d first
    assert len(res.invocations) == 2 * 3
    for step in (1, 2, 3):
        roles = [r for s, _, r in res.invocations if s == step]
        assert roles == ["d", "i"]
    ids = {mid for _, mid, _ in res.invocations}
    assert ids <= {"000", "001"}


def test_train_deterministic(dataset, tmp_path):
    cfg = mini_train_cfg(dataset, max_steps=3)
    a = trainer.train(cfg, out_dir=str(tmp_path / "a"))
    b = trainer.train(cfg, out_dir=str(tmp_path / "b"))
    assert [row[2] for row in a.log] == [row[2] for row in b.log]
    for name, p in a.model.params.items():
        assert np.array_equal(p.data, b.model.params[name].data), name


def test_train_resume_matches_uninterrupted(dataset, tmp_path):
    full_cfg = mini_train_cfg(dataset, max_steps=4)
    full = trainer.train(full_cfg, out_dir=str(tmp_path / "full"))

    part_dir = str(tmp_path / "part")
    trainer.train(mini_train_cfg(dataset, max_steps=2), out_dir=part_dir)
    resumed = trainer.train(full_cfg, out_dir=part_dir, resume=part_dir)

    assert [row[2] for row in resumed.log] == \
        [row[2] for row in full.log[2:]]
    for name, p in full.model.params.items():
        assert np.array_equal(p.data, resumed.model.params[name].data), name


def test_train_stage_switch_once(dataset, tmp_path):
    cfg = mini_train_cfg(dataset, max_steps=6, plateau_window=1)
    res = trainer.train(cfg, out_dir=str(tmp_path / "run"))
    assert res.state.stage == "stage2"
    assert res.state.stage_switch_step == 2  # first validation
    stages = [row[1] for row in res.log]
    transitions = sum(1 for a, b in zip(stages, stages[1:]) if a != b)
    assert transitions == 1
    assert stages[1] == "stage2" and stages[-1] == "stage2"


def test_plateau_criterion():
    assert not trainer._plateaued([1.0, 2.0], 5, 0.2)
    assert not trainer._plateaued([0, 1, 2, 3, 4], 5, 0.2)
    assert trainer._plateaued([4.0, 4.05, 4.1, 4.1, 4.1], 5, 0.2)


def test_loss_config_per_stage(dataset):
    cfg = mini_train_cfg(dataset, alpha=0.7)
    s1 = trainer._loss_config(cfg, "stage1")
    assert s1.alpha == 0.0 and s1.stage == "stage1"
    s2 = trainer._loss_config(cfg, "stage2")
    assert s2.alpha == 0.7 and s2.stage == "stage2"


def test_train_config_validation(dataset):
    with pytest.raises(trainer.TrainerError):
        mini_train_cfg(dataset, batch_size=0)
    with pytest.raises(trainer.TrainerError):
        mini_train_cfg(dataset, lr=0.0)
