import json
import random
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mhri.autograd import Tensor
from mhri.checkpoint import load_checkpoint, read_header, save_checkpoint
from mhri.errors import CheckpointError, ConfigError, ContractError, DimensionError, DivergenceError
from mhri.metrics import evaluate_model, mean_reports
from mhri.model import MHRIModel
from mhri.scene import LossTerms
from mhri.train import (
    AblationFlags,
    TrainConfig,
    _run_fold,
    cross_validate,
    joint_loss,
    read_log,
    train_fold,
)

LOG_FIELDS = {"fold", "epoch", "l_ce_s", "l_kl_s", "l_ce_r", "l_kl_r", "total"}


def tiny(**changes):
    cfg = dict(epochs=2, batch_size=4, k_folds=2, d_model=16, n_heads=2, n_layers=1, max_seq=16, seed=0, lr=1e-3)
    cfg.update(changes)
    return TrainConfig(**cfg)


def terms(ce, kl, weight):
    return LossTerms(Tensor(ce), None if kl is None else Tensor(kl), weight)


# ---------------------------------------------------------------- objective
def test_joint_loss_sum():
    assert float(joint_loss(terms(1.2, None, 0.0), terms(0.8, None, 0.0)).data) == pytest.approx(2.0)


def test_joint_loss_single_task_is_response_only():
    r = terms(0.8, 0.3, 0.01)
    out = joint_loss(terms(1.2, 0.5, 0.01), r, AblationFlags(False, False, True))
    assert float(out.data) == float(r.total.data)


def test_joint_loss_row_d_algebra():
    s, r = terms(1.2, 0.5, 0.01), terms(0.8, 0.3, 0.02)
    out = joint_loss(s, r, AblationFlags(True, False, True))
    assert float(out.data) == pytest.approx(1.2 + 0.8 + 0.02 * 0.3, abs=1e-15)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.booleans(), st.booleans(),
       st.booleans())
def test_joint_loss_flag_algebra(ce_s, kl_s, ce_r, kl_r, m, fs, fr):
    lam = 0.01
    out = float(joint_loss(terms(ce_s, kl_s, lam), terms(ce_r, kl_r, lam), AblationFlags(m, fs, fr)).data)
    expected = ce_r + (lam * kl_r if fr else 0.0)
    if m:
        expected += ce_s + (lam * kl_s if fs else 0.0)
    assert out == pytest.approx(expected, rel=1e-12, abs=1e-12)


# ------------------------------------------------------------------ config
@pytest.mark.parametrize("bad", [dict(lr=-1.0), dict(lr=float("nan")), dict(epochs=0), dict(batch_size=0),
                                 dict(k_folds=1), dict(lambda_s=-0.1)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_round_trip_and_unknown_keys():
    cfg = tiny(kl_s=False)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="learning_rate"):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_defaults_match_reported_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.epochs, cfg.dropout) == (1e-4, 8, 30, 0.1)
    assert (cfg.lambda_s, cfg.lambda_r, cfg.k_folds) == (0.01, 0.01, 6)


# ---------------------------------------------------------------- training
def test_lr_zero_leaves_params_unchanged(small_episodes):
    cfg = tiny(lr=0.0, weight_decay=0.0)
    _, model = train_fold(small_episodes, cfg)
    fresh = MHRIModel(cfg.model_config(8, 8, cfg.seed))
    for name, t in model.params.items():
        assert np.array_equal(t.data, fresh.params[name].data), name


def test_same_seed_bit_identical(small_episodes):
    _, a = train_fold(small_episodes, tiny())
    _, b = train_fold(list(reversed(small_episodes)), tiny())
    for name, t in a.params.items():
        assert t.data.tobytes() == b.params[name].data.tobytes()


def test_different_seed_differs(small_episodes):
    _, a = train_fold(small_episodes, tiny())
    _, b = train_fold(small_episodes, tiny(seed=1))
    assert not np.array_equal(a.params["response.w"].data, b.params["response.w"].data)


def test_epochs_logged(small_episodes, tmp_path):
    log_path = tmp_path / "log.jsonl"
    result, _ = train_fold(small_episodes, tiny(epochs=3), log_path=log_path)
    assert [e["epoch"] for e in result.epochs] == [1, 2, 3]
    rows = read_log(log_path)
    assert rows == result.epochs
    assert all(set(r) == LOG_FIELDS for r in rows)


def test_disabled_kl_logs_zero(small_episodes):
    result, _ = train_fold(small_episodes, tiny(kl_s=False, kl_r=False))
    assert all(e["l_kl_s"] == 0.0 and e["l_kl_r"] == 0.0 for e in result.epochs)
    result, _ = train_fold(small_episodes, tiny())
    assert all(e["l_kl_s"] > 0.0 and e["l_kl_r"] > 0.0 for e in result.epochs)


def test_single_task_leaves_scene_head_at_init(small_episodes):
    cfg = tiny(multitask=False, weight_decay=0.0)
    result, model = train_fold(small_episodes, cfg)
    fresh = MHRIModel(cfg.model_config(8, 8, cfg.seed))
    assert np.array_equal(model.params["scene.speaker.w"].data, fresh.params["scene.speaker.w"].data)
    assert all(e["l_ce_s"] == 0.0 for e in result.epochs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch_and_batch(small_episodes):
    # the first step moves every weight by ~lr, so the second batch overflows
    with pytest.raises(DivergenceError, match=r"epoch 1, batch 1"):
        train_fold(small_episodes, tiny(lr=1e200))


def test_empty_train_set():
    with pytest.raises(ContractError):
        train_fold([], tiny())


def test_loss_decreases_on_small_data(small_episodes):
    result, _ = train_fold(small_episodes, tiny(epochs=15, lr=3e-3, dropout=0.0))
    assert result.epochs[-1]["total"] < result.epochs[0]["total"]


# -------------------------------------------------------------- checkpoints
def test_checkpoint_round_trip_bit_exact(small_episodes, tmp_path):
    path = tmp_path / "m.ckpt"
    _, model = train_fold(small_episodes, tiny(), checkpoint_path=path)
    params, config, header = load_checkpoint(path, expect=model.config)
    assert config == model.config
    assert header["extra"]["train_ids"] == sorted(ep.episode_id for ep in small_episodes)
    for name, t in model.params.items():
        assert t.data.tobytes() == params[name].data.tobytes()
        assert (name in params.decay) == (name in model.params.decay)
    reloaded = MHRIModel(config, params)
    assert evaluate_model(reloaded, small_episodes) == evaluate_model(model, small_episodes)


def test_checkpoint_save_is_byte_stable(tmp_path):
    model = MHRIModel(tiny().model_config(8, 8, 0))
    save_checkpoint(model.params, model.config, tmp_path / "a.ckpt")
    params, config, _ = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(params, config, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_truncated_checkpoint(tmp_path):
    model = MHRIModel(tiny().model_config(8, 8, 0))
    path = tmp_path / "t.ckpt"
    save_checkpoint(model.params, model.config, path)
    data = path.read_bytes()
    for cut in (4, 15, len(data) // 2, len(data) - 8):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError, match="offset"):
            load_checkpoint(path)


def test_bad_magic_and_version(tmp_path):
    model = MHRIModel(tiny().model_config(8, 8, 0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.params, model.config, path)
    data = bytearray(path.read_bytes())
    bad = bytes(b"XXXXXXXX" + data[8:])
    (tmp_path / "magic.ckpt").write_bytes(bad)
    with pytest.raises(CheckpointError, match="offset 0"):
        read_header(tmp_path / "magic.ckpt")
    data[8:12] = struct.pack("<I", 99)
    (tmp_path / "ver.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="offset 8"):
        read_header(tmp_path / "ver.ckpt")


def test_d_model_mismatch_names_parameter(tmp_path):
    model = MHRIModel(tiny().model_config(8, 8, 0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.params, model.config, path)
    other = tiny(d_model=32).model_config(8, 8, 0)
    with pytest.raises(DimensionError, match=r"fuse\.text_proj\.w"):
        load_checkpoint(path, expect=other)


def test_config_drift_warns_or_raises(tmp_path):
    model = MHRIModel(tiny().model_config(8, 8, 0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.params, model.config, path)
    drifted = tiny(dropout=0.3).model_config(8, 8, 0)
    with pytest.warns(UserWarning, match="dropout"):
        load_checkpoint(path, expect=drifted)
    with pytest.raises(ConfigError):
        load_checkpoint(path, expect=drifted, strict=True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(path, expect=model.config)


# -------------------------------------------------------- cross-validation
@pytest.fixture(scope="module")
def small_cv(small_episodes, tmp_path_factory):
    out = tmp_path_factory.mktemp("cv")
    return cross_validate(small_episodes, tiny(), out_dir=out), out


def test_cv_aggregate_is_fold_mean(small_cv):
    cv, _ = small_cv
    assert len(cv.folds) == 2
    accs = [f.metrics.acc_average for f in cv.folds]
    assert abs(cv.aggregate.acc_average - sum(accs) / len(accs)) <= 1e-12
    assert cv.aggregate == mean_reports([f.metrics for f in cv.folds])


def test_cv_folds_are_disjoint_and_cover(small_cv, small_episodes):
    cv, _ = small_cv
    tests = [set(f.test_ids) for f in cv.folds]
    assert set().union(*tests) == {ep.episode_id for ep in small_episodes}
    for f in cv.folds:
        assert not set(f.train_ids) & set(f.test_ids)
        assert len(f.epochs) == 2


def test_cv_writes_checkpoints_and_log(small_cv):
    cv, out = small_cv
    for f in cv.folds:
        assert (out / f"fold{f.fold_index}.ckpt").exists()
    rows = read_log(out / "train_log.jsonl")
    assert [(r["fold"], r["epoch"]) for r in rows] == [(0, 1), (0, 2), (1, 1), (1, 2)]
    json.dumps(cv.report())


def test_cv_input_order_irrelevant(small_cv, small_episodes):
    cv, _ = small_cv
    shuffled = list(small_episodes)
    random.Random(5).shuffle(shuffled)
    assert cross_validate(shuffled, tiny()).aggregate == cv.aggregate


def test_parallel_folds_match_sequential(small_cv, small_episodes):
    cv, _ = small_cv
    par = cross_validate(small_episodes, tiny(), workers=2)
    assert par.aggregate == cv.aggregate
    assert [f.epochs for f in par.folds] == [f.epochs for f in cv.folds]


def test_audit_hook_catches_leak(small_episodes):
    ids = sorted(ep.episode_id for ep in small_episodes)
    with pytest.raises(ContractError, match="reached the optimizer"):
        _run_fold(small_episodes, tiny(epochs=1), 0, ids, ids[:1], None)


def test_cv_too_few_episodes(small_episodes):
    with pytest.raises(ConfigError):
        cross_validate(small_episodes[:2], tiny(k_folds=3))
