import math
import shutil

import numpy as np
import pytest

from mtcrl import checkpoint as ckpt
from mtcrl.checkpoint import CheckpointError
from mtcrl.replay import ReplayBuffer
from mtcrl.trainer import (
    METRIC_COLUMNS, TrainConfig, Trainer, TrainingFault, checkpoint_config, fmt, model_checksum, run,
)


def tiny(**kw):
    base = dict(env="pendulum", algo="mtc", total_steps=30, init_steps=20, batch_size=8, history=3,
                capacity=1000, horizon=25, eval_every=15, eval_episodes=1)
    base.update(kw)
    return TrainConfig(**base)


# -- configuration -----------------------------------------------------------------------------

def test_default_hyperparameters():
    c = TrainConfig()
    assert (c.gamma, c.init_steps, c.batch_size, c.actor_update_freq, c.target_update_freq) == (0.99, 5000, 256, 1, 2)
    assert (c.init_temperature, c.init_alpha, c.tau, c.ip, c.m, c.history) == (0.1, 1e-6, 0.01, -7.0, 1e-6, 8)
    assert c.critic_lr == c.actor_lr == c.alpha_lr == c.temperature_lr == 1e-4
    assert c.capacity == 1_000_000 and c.latent_dim == 30 and c.grad_clip is None
    assert (c.eval_every, c.eval_episodes) == (20_000, 10)


@pytest.mark.parametrize("bad", [
    {"algo": "ppo"}, {"env": "hopper"}, {"batch_size": 0}, {"actor_lr": -1e-4}, {"m": 1.5},
    {"gamma": 1.5}, {"tau": 0.0}, {"grad_clip": 0.0}, {"ip": math.inf}, {"total_steps": -1},
    {"dynamics_output_norm": "batch"},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_negative_constraint_level_allowed():
    assert TrainConfig(ip=-0.5).ip == -0.5


def test_from_dict_parses_strings_and_rejects_unknown_keys():
    c = TrainConfig.from_dict({"total_steps": "1e3", "ip": "-0.5", "regularize": "false",
                               "grad_clip": "none", "algo": "sac"})
    assert c.total_steps == 1000 and c.ip == -0.5 and c.regularize is False and c.grad_clip is None
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": "1"})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"regularize": "maybe"})
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_effective_mixing_and_regularisation():
    assert tiny(algo="mtc", m=0.3).m_effective == 0.3
    assert tiny(algo="mtc-noa", m=0.3).m_effective == 0.0
    assert tiny(algo="rpc", m=0.3).m_effective == 0.0
    assert not tiny(algo="sac").regularized
    assert not tiny(algo="mtc", regularize=False).regularized


def test_actor_optimizer_scope():
    t = Trainer(tiny(m=0.0))
    mdl = t.models
    ids = {id(p) for p in t.actor_opt.params}
    assert all(id(p) in ids for p in mdl.encoder.parameters() + mdl.dynamics.parameters())
    assert not any(id(p) in ids for p in mdl.action_predictor.parameters())
    t_sac = Trainer(tiny(algo="mtc", regularize=False))
    assert len(t_sac.actor_opt.params) == len(t_sac.models.policy.parameters())


def test_fmt_nine_significant_digits():
    assert fmt(1 / 3) == "0.333333333" and fmt(float("nan")) == "nan" and fmt(12345678912) == "1.23456789e+10"


# -- stepping ----------------------------------------------------------------------------------

def test_no_updates_before_init_steps():
    t = Trainer(tiny(init_steps=20))
    before = model_checksum(t.models)
    for _ in range(20):
        diag = t.train_step()
        assert math.isnan(diag["critic_loss"])
    assert t.updates == 0 and model_checksum(t.models) == before and len(t.buffer) == 20
    diag = t.train_step()
    assert t.updates == 1 and not math.isnan(diag["critic_loss"]) and not math.isnan(diag["bound_mean"])
    assert model_checksum(t.models) != before


@pytest.mark.parametrize("algo", ["mtc", "mtc-noa", "rpc", "sac"])
def test_every_algo_trains_deterministically(algo):
    runs = []
    for _ in range(2):
        t = Trainer(tiny(algo=algo))
        rows = [t.train_step() for _ in range(26)]
        runs.append((model_checksum(t.models), [fmt(r[k]) for r in rows for k in METRIC_COLUMNS]))
    assert runs[0] == runs[1]
    if algo == "sac":
        assert runs[0][1][METRIC_COLUMNS.index("bound_mean")] == "nan"


def test_target_update_frequency():
    t = Trainer(tiny(init_steps=20, target_update_freq=2))
    for _ in range(21):
        t.train_step()
    after_first = t.models.q1_target.state_dict()  # update index 0 refreshes the targets
    t.train_step()  # update index 1 does not
    assert all(a.tobytes() == b.tobytes() for a, b in zip(after_first.values(),
                                                        t.models.q1_target.state_dict().values()))
    t.train_step()
    assert any(a.tobytes() != b.tobytes() for a, b in zip(after_first.values(),
                                                        t.models.q1_target.state_dict().values()))


def test_alpha_stays_positive_through_training():
    t = Trainer(tiny(total_steps=40))
    for _ in range(40):
        diag = t.train_step()
        assert diag["alpha"] > 0 and diag["beta_prime"] > 0


def test_fault_dumps_window_and_checksum(tmp_path):
    t = Trainer(tiny(), tmp_path)
    for _ in range(20):
        t.train_step()
    t.models.q1.net.layers[-1].bias.values[...] = 1e200
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(TrainingFault):
        t.train_step()
    text = (tmp_path / "fault.txt").read_text()
    assert "step=21" in text and f"model_sha256={model_checksum(t.models)}" in text
    dump = np.load(tmp_path / "fault_window.npz")
    assert dump["states"].shape == (8, 4, 3) and dump["actions"].shape == (8, 3, 1)


# -- SAC reduction -----------------------------------------------------------------------------

def _frozen_snapshot(seed=0, n=200):
    src = Trainer(tiny(algo="sac", init_steps=n, seed=seed))
    for _ in range(n):
        src.collect()
    return src.buffer


def _copy_buffer(buf):
    out = ReplayBuffer(buf.capacity, buf.obs.shape[1], buf.actions.shape[1])
    out.load_state_dict(buf.state_dict())
    return out


def test_disabled_regulariser_matches_sac_mode():
    snapshot = _frozen_snapshot()
    a = Trainer(tiny(algo="mtc", regularize=False))
    b = Trainer(tiny(algo="sac"))
    for t in (a, b):
        t.buffer = _copy_buffer(snapshot)
    for _ in range(25):
        wa = a.buffer.sample_windows(8, 3, a.streams["replay"])
        wb = b.buffer.sample_windows(8, 3, b.streams["replay"])
        assert wa.starts.tobytes() == wb.starts.tobytes()
        a.update(wa)
        b.update(wb)
    sa, sb = a.models.state_dict(), b.models.state_dict()
    for name, v in sb.items():
        assert np.max(np.abs(sa[name] - v)) <= 1e-12, name
    assert a.models.alpha == pytest.approx(1e-6)


# -- persistence -------------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    t = Trainer(tiny())
    for _ in range(24):
        t.train_step()
    t.save(tmp_path / "a.ckpt")
    u = Trainer(tiny())
    u.load(tmp_path / "a.ckpt")
    assert model_checksum(u.models) == model_checksum(t.models)
    assert u.step == t.step and u.updates == t.updates and u.obs.tobytes() == t.obs.tobytes()
    rows_t = [t.train_step() for _ in range(4)]
    rows_u = [u.train_step() for _ in range(4)]
    assert [fmt(r[k]) for r in rows_t for k in METRIC_COLUMNS] == [fmt(r[k]) for r in rows_u for k in METRIC_COLUMNS]
    assert model_checksum(u.models) == model_checksum(t.models)


def test_incompatible_checkpoint_rejected(tmp_path):
    t = Trainer(tiny(algo="sac"))
    t.save(tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError):
        Trainer(tiny(algo="mtc")).load(tmp_path / "a.ckpt")
    assert checkpoint_config(tmp_path / "a.ckpt")["algo"] == "sac"


def test_run_writes_artifacts_and_is_reproducible(tmp_path):
    cfg = tiny()
    r1 = run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    for name in ("metrics.csv", "eval.csv", "trajectories.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS) and len(lines) == 31
    assert [int(ln.split(",")[0]) for ln in lines[1:]] == list(range(1, 31))
    assert [row[0] for row in r1.eval_rows] == [15, 30]
    assert (tmp_path / "a" / "step_15.ckpt").exists() and r1.final_checkpoint.exists()
    _, manifest = ckpt.load(r1.final_checkpoint)
    assert manifest["algo"] == "mtc" and manifest["resume"]["step"] == 30


def test_resume_continues_identically(tmp_path):
    cfg = tiny()
    run(cfg, tmp_path / "full")
    shutil.copytree(tmp_path / "full", tmp_path / "resumed")
    run(cfg, tmp_path / "resumed", resume=tmp_path / "resumed" / "step_15.ckpt")
    for name in ("metrics.csv", "eval.csv"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "resumed" / name).read_bytes()
    steps = [int(ln.split(",")[0]) for ln in (tmp_path / "resumed" / "metrics.csv").read_text().splitlines()[1:]]
    assert steps == sorted(steps) and len(set(steps)) == len(steps)


def test_resume_needs_existing_metrics(tmp_path):
    run(tiny(), tmp_path / "a")
    with pytest.raises(FileNotFoundError):
        run(tiny(), tmp_path / "empty", resume=tmp_path / "a" / "step_15.ckpt")
