from dataclasses import asdict, replace

import numpy as np
import pytest

from ostrich.data import synth_splits
from ostrich.errors import DataError, FormatError, NumericError
from ostrich.losses import read_log, vo_targets
from ostrich.trainer import (
    TrainConfig,
    TrainState,
    best_state,
    checkpoint_load,
    checkpoint_save,
    predict,
    train,
    train_step,
    validation_loss,
)

SMALL = TrainConfig(epochs=3, batch=4, flow_depth=2, flow_hidden=4, enc_hidden=4, disc_depth=2, disc_width=4, critic_steps=2, seed=3)


@pytest.fixture(scope="module")
def sets():
    return synth_splits(12, 4, 4, 32, 32, seed=0)


def params_of(state):
    return state.snapshot()


def same_params(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(lambda2=1.0)
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.5)
    with pytest.raises(ValueError):
        TrainConfig(mix_init="random")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 2, "learning_rate": 0.1})
    assert TrainConfig.from_dict(asdict(SMALL)) == SMALL


def test_zero_lr_is_a_fixed_point(sets):
    cfg = replace(SMALL, lr_disc=0.0, lr_F=0.0, lr_E=0.0)
    st = TrainState.fresh(cfg)
    before = params_of(st)
    x = sets["train"].images()[:4]
    y = sets["train"].masks()[:4, None].astype(float)
    rep = train_step(st, x, y, diagnostics=True)
    assert same_params(before, params_of(st))
    assert rep.is_finite() and rep.cycle_diag <= 1e-8


def test_step_is_deterministic_and_clips(sets):
    x = sets["train"].images()[:4]
    y = sets["train"].masks()[:4, None].astype(float)
    a, b = TrainState.fresh(SMALL), TrainState.fresh(SMALL)
    ra, rb = train_step(a, x, y), train_step(b, x, y)
    assert same_params(params_of(a), params_of(b))
    assert ra.gan_pair == rb.gan_pair and ra.ssim_reg == rb.ssim_reg
    assert a.nets.D.max_abs_weight() <= SMALL.clip
    with pytest.raises(DataError):
        train_step(a, x, y[:2])


def test_train_writes_log_and_checkpoints(tmp_path, sets):
    st = train(SMALL, sets, tmp_path)
    assert st.epoch == 3
    log = read_log(tmp_path / "train_log.csv")
    assert [r["epoch"] for r in log] == [0, 1, 2]
    assert all(abs(r["lambda1"] - 10.0 * 0.97 ** r["epoch"]) <= 1e-12 for r in log)
    assert (tmp_path / "last.ostr").exists() and (tmp_path / "best.ostr").exists()
    best = checkpoint_load(tmp_path / "best.ostr")
    assert same_params(best.snapshot(), st.best_params)


def test_patience_with_frozen_parameters(sets):
    cfg = replace(SMALL, epochs=10, patience=1, lr_disc=0.0, lr_F=0.0, lr_E=0.0)
    st = train(cfg, sets)
    assert st.epoch == 2 and st.best_epoch == 0


def test_validation_loss_is_repeatable(sets):
    st = TrainState.fresh(SMALL)
    vx = sets["val"].images()
    vt = vo_targets(vx)
    assert validation_loss(st, vx, vt) == validation_loss(st, vx, vt)
    assert abs(validation_loss(st, vx, vt) - validation_loss(st, vx, vt, batch=3)) <= 1e-12


def test_checkpoint_bytes_and_inference(tmp_path, sets):
    st = train(replace(SMALL, epochs=1), sets)
    p1, p2 = tmp_path / "a.ostr", tmp_path / "b.ostr"
    checkpoint_save(st, p1)
    back = checkpoint_load(p1)
    checkpoint_save(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    x = sets["val"].images()
    assert np.array_equal(predict(st, x), predict(back, x))
    assert back.rng.get_state() == st.rng.get_state()
    assert same_params(best_state(back).snapshot(), st.best_params)


def test_corrupt_checkpoints(tmp_path):
    st = TrainState.fresh(SMALL)
    p = tmp_path / "c.ostr"
    checkpoint_save(st, p)
    raw = p.read_bytes()
    (tmp_path / "t.ostr").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        checkpoint_load(tmp_path / "t.ostr")
    (tmp_path / "m.ostr").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        checkpoint_load(tmp_path / "m.ostr")
    (tmp_path / "x.ostr").write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        checkpoint_load(tmp_path / "x.ostr")
    with pytest.raises(FormatError):
        checkpoint_load(tmp_path / "missing.ostr")


def test_resume_is_bit_identical(tmp_path, sets):
    cfg = replace(SMALL, epochs=4)
    full = train(cfg, sets)
    part = train(cfg, sets, tmp_path, stop_after=2)
    assert part.epoch == 2
    resumed = train(cfg, sets, state=checkpoint_load(tmp_path / "last.ostr"))
    assert same_params(full.snapshot(), resumed.snapshot())
    assert full.best_val == resumed.best_val and full.best_epoch == resumed.best_epoch


def test_numeric_failure_dumps_state(tmp_path, sets):
    st = TrainState.fresh(SMALL)
    st.nets.stack.couplings[0].w1.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        train(SMALL, sets, tmp_path, state=st)
    assert (tmp_path / "crash_dump.ostr").exists()


def test_empty_split_rejected(sets):
    with pytest.raises(DataError):
        train(SMALL, {"train": sets["train"]})
