import bz2
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtcrl import checkpoint as ckpt
from mtcrl.autodiff import ContractError, DomainError, ShapeError
from mtcrl.envs import PerturbationConfig, make_env
from mtcrl.evaluation import (
    Trajectory, ar1_bound_estimate, ar1_covariance, ci90, compress_trajectory, discounted_tc,
    evaluate_policy, gaussian_tc_analytic, lagged_pairs, normalize_scores, normalized_size, onpolicy_bound,
    perturbation, read_trajectories, return_floor, robustness_sweep, serialize_trajectory, split_actions,
    split_by_trajectory, t_step_prediction_error, write_trajectories,
)
from mtcrl.models import ModelSet


def untrained(env_id="pendulum", algo="mtc", seed=0):
    spec = make_env(env_id).spec
    return ModelSet(spec.obs_dim, spec.action_dim, np.random.default_rng(seed), algo=algo)


# -- rollouts ----------------------------------------------------------------------------------

def test_zero_episodes_is_empty():
    res = evaluate_policy(untrained(), "pendulum", 0)
    assert res.returns.size == 0 and res.trajectories == []


def test_rollout_is_deterministic_and_within_reward_bounds():
    models = untrained()
    a = evaluate_policy(models, "pendulum", 3, seed=7, horizon=40)
    b = evaluate_policy(models, "pendulum", 3, seed=7, horizon=40)
    assert a.returns.tobytes() == b.returns.tobytes()
    lo, hi = make_env("pendulum").reward_bounds()
    assert np.all(np.isfinite(a.returns)) and np.all(a.returns >= 40 * lo) and np.all(a.returns <= 40 * hi)
    assert [len(t) for t in a.trajectories] == [40, 40, 40]


def test_rollout_uses_the_mean_action():
    models = untrained()
    res = evaluate_policy(models, "pendulum", 1, horizon=10)
    traj = res.trajectories[0]
    # batched and row-by-row matmuls differ only in the last ulp
    np.testing.assert_allclose(traj.actions, models.policy.mean_action(traj.states), rtol=0, atol=1e-12)


def test_rollout_rejects_mismatched_env():
    with pytest.raises(ckpt.CheckpointError):
        evaluate_policy(untrained("pendulum"), "pointmass", 1)


# -- compressibility ---------------------------------------------------------------------------

def test_serialisation_is_canonical():
    traj = Trajectory("pendulum", [[0.04, -0.04], [1.25, -3.0]], [[-0.01], [0.96]])
    text = serialize_trajectory(traj).decode()
    assert text == "# env=pendulum dim_s=2 dim_a=1 steps=2 prec=1\n0.0,0.0,0.0\n1.2,-3.0,1.0\n"
    assert serialize_trajectory(traj) == serialize_trajectory(Trajectory("pendulum", traj.states, traj.actions))


def test_compressed_size_is_bz2_of_the_text():
    traj = Trajectory("x", np.arange(30.0).reshape(10, 3), np.zeros((10, 1)))
    assert compress_trajectory(traj) == len(bz2.compress(serialize_trajectory(traj)))


def test_constant_trajectory_compresses_five_times_better_than_noise():
    rng = np.random.default_rng(0)
    const = Trajectory("x", np.full((1000, 3), 0.5), np.full((1000, 1), -0.3))
    noise = Trajectory("x", rng.uniform(-1, 1, (1000, 3)), rng.uniform(-1, 1, (1000, 1)))
    assert 5 * compress_trajectory(const) <= compress_trajectory(noise)
    assert compress_trajectory(noise) == compress_trajectory(noise)


def test_repetition_less_than_doubles_size():
    rng = np.random.default_rng(1)
    s, a = rng.uniform(-1, 1, (500, 3)), rng.uniform(-1, 1, (500, 1))
    once = compress_trajectory(Trajectory("x", s, a))
    twice = compress_trajectory(Trajectory("x", np.vstack([s, s]), np.vstack([a, a])))
    assert twice < 2 * once


def test_compression_errors():
    with pytest.raises(ContractError):
        compress_trajectory(Trajectory("x", np.zeros((0, 2)), np.zeros((0, 1))))
    with pytest.raises(LookupError):
        compress_trajectory(Trajectory("x", np.zeros((3, 2)), np.zeros((3, 1))), compressor="zstd")


def test_normalized_size():
    assert normalized_size({"a": 120}) == {"a": 1.0}
    out = normalized_size({"a": 50, "b": 200, "c": 100})
    assert out == {"a": 0.25, "b": 1.0, "c": 0.5}
    assert normalized_size({"x": 200, "y": 100, "z": 50}) == {"x": 1.0, "y": 0.5, "z": 0.25}
    with pytest.raises(ValueError):
        normalized_size({"a": 0})


def test_trajectory_dump_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    trajs = [Trajectory("pendulum", rng.normal(size=(n, 3)), rng.uniform(-1, 1, (n, 1))) for n in (4, 7)]
    write_trajectories(tmp_path / "t.bin", trajs)
    back = read_trajectories(tmp_path / "t.bin")
    assert len(back) == 2
    for a, b in zip(trajs, back):
        assert a.env_id == b.env_id and a.states.tobytes() == b.states.tobytes()
        assert a.actions.tobytes() == b.actions.tobytes()
    ckpt.save(tmp_path / "other", {"x": np.zeros(1)}, manifest={"kind": "model"})
    with pytest.raises(ckpt.CheckpointError):
        read_trajectories(tmp_path / "other")


# -- t-step predictability ---------------------------------------------------------------------

def test_split_is_unchanged_by_duplication():
    rng = np.random.default_rng(3)
    acts = [rng.normal(size=(12, 1)) for _ in range(10)]
    train, test = split_by_trajectory(acts)
    assert len(test) == 2 and len(train) == 8
    train2, test2 = split_by_trajectory(acts + acts)
    assert sorted(a.tobytes() for a in train2) == sorted(a.tobytes() for a in train + train)
    assert sorted(a.tobytes() for a in test2) == sorted(a.tobytes() for a in test + test)


def test_lagged_pairs():
    a = np.arange(6.0).reshape(6, 1)
    x, y = lagged_pairs([a, a + 10], 2)
    np.testing.assert_array_equal(x[:, 0], [0, 1, 2, 3, 10, 11, 12, 13])
    np.testing.assert_array_equal(y[:, 0], [2, 3, 4, 5, 12, 13, 14, 15])


def test_split_actions_contracts():
    acts = [np.zeros((5, 1)) + i for i in range(3)]
    with pytest.raises(ContractError):
        split_actions(acts, 5)
    with pytest.raises(ContractError):
        split_actions([], 3)
    with pytest.raises(ContractError):
        split_actions([np.zeros((10, 1))] * 4, 3)  # a single distinct trajectory cannot be split
    with pytest.raises(ValueError):
        split_actions(acts, 0)


def test_constant_actions_are_more_predictable_than_noise():
    rng = np.random.default_rng(4)
    consts = [np.full((50, 1), c) for c in rng.uniform(-0.9, 0.9, 20)]
    noise = [rng.uniform(-1, 1, (50, 1)) for _ in range(20)]
    nll_const = t_step_prediction_error(consts, 3)
    nll_noise = t_step_prediction_error(noise, 3)
    # best Gaussian fit to U(-1, 1) has NLL 0.5 ln(2 pi e / 3) ~ 0.87
    assert nll_noise == pytest.approx(0.5 * math.log(2 * math.pi * math.e / 3), abs=0.1)
    assert nll_const < nll_noise - 3.0


def test_prediction_error_invariant_to_duplication():
    rng = np.random.default_rng(5)
    acts = [rng.uniform(-1, 1, (20, 1)) for _ in range(10)]
    a = t_step_prediction_error(acts, 5, steps=100)
    b = t_step_prediction_error(acts + acts, 5, steps=100)
    assert a == pytest.approx(b, rel=1e-6)


# -- robustness sweeps -------------------------------------------------------------------------

def test_perturbation_kinds():
    assert perturbation("obs", 0.2) == PerturbationConfig(obs_noise_sigma=0.2)
    assert perturbation("act", 0.5) == PerturbationConfig(action_noise_sigma=0.5)
    assert perturbation("mass", 1.5) == PerturbationConfig(mass_scale=1.5)
    assert perturbation("distract", 3) == PerturbationConfig(distractor_dims=3)
    with pytest.raises(ValueError):
        perturbation("distract", 1.5)
    with pytest.raises(ValueError):
        perturbation("wind", 1.0)


def test_ci90():
    assert ci90([1.0, 2.0, 3.0]) == pytest.approx(1.6448536269514722 / math.sqrt(3))
    assert ci90([5.0]) == 0.0


def test_zero_cell_reproduces_plain_rollout():
    models = untrained()
    rows = robustness_sweep(models, "pendulum", [("obs", 0.0), ("mass", 1.0)], [0, 1], episodes=2, horizon=20)
    for seed in (0, 1):
        plain = evaluate_policy(models, "pendulum", 2, seed=seed, horizon=20).returns.mean()
        for kind in ("obs", "mass"):
            row = next(r for r in rows if r["perturbation"] == kind and r["seed"] == str(seed))
            assert row["mean_return"] == plain


def test_sweep_cells_are_independent_of_grid_order():
    models = untrained()
    grid = [("act", 0.5), ("obs", 0.1), ("mass", 1.5)]
    a = robustness_sweep(models, "pendulum", grid, [3], episodes=1, horizon=15)
    b = robustness_sweep(models, "pendulum", grid[::-1], [3], episodes=1, horizon=15)
    key = lambda r: (r["perturbation"], r["level"], r["seed"])  # noqa: E731
    assert sorted(a, key=key) == sorted(b, key=key)
    assert robustness_sweep(models, "pendulum", [], [0]) == []


def test_sweep_summary_row_uses_per_seed_means():
    rows = robustness_sweep(untrained(), "pendulum", [("act", 0.3)], [0, 1, 2], episodes=1, horizon=10)
    per_seed = [r["mean_return"] for r in rows if r["seed"] != "all"]
    summary = next(r for r in rows if r["seed"] == "all")
    assert summary["mean_return"] == pytest.approx(np.mean(per_seed)) and summary["ci90"] == ci90(per_seed)


def test_normalize_scores():
    floor = return_floor("pendulum", 10)
    rows = [dict(method=m, task="pendulum", perturbation="obs", level=0.1, seed="all", mean_return=v)
            for m, v in (("a", -40.0), ("b", -20.0))]
    out = {r["method"]: r["normalized_score"] for r in normalize_scores(rows, horizon=10)}
    assert out["b"] == 1.0
    assert out["a"] == pytest.approx((-40.0 - floor) / (-20.0 - floor))
    assert 0 < out["a"] < 1
    assert normalize_scores(rows[:1], horizon=10)[0]["normalized_score"] == 1.0
    swapped = [dict(r, method={"a": "b", "b": "a"}[r["method"]]) for r in rows]
    out2 = {r["method"]: r["normalized_score"] for r in normalize_scores(swapped, horizon=10)}
    assert out2 == {"b": out["a"], "a": out["b"]}


def test_non_negative_tasks_divide_by_the_best():
    rows = [dict(method=m, task="custom", perturbation="mass", level=1.0, seed="0", mean_return=v)
            for m, v in (("a", 300.0), ("b", 600.0))]
    assert [r["normalized_score"] for r in normalize_scores(rows)] == [0.5, 1.0]


# -- total-correlation oracles -----------------------------------------------------------------

def test_gaussian_tc_examples():
    assert gaussian_tc_analytic(np.diag([1.0, 4.0, 0.5])) == pytest.approx(0.0, abs=1e-15)
    assert gaussian_tc_analytic(ar1_covariance(0.5, 3)) == pytest.approx(math.log(4 / 3), abs=1e-12)
    assert gaussian_tc_analytic(ar1_covariance(0.5, 3)) == pytest.approx(0.28768, abs=1e-5)
    rho = 0.7
    assert gaussian_tc_analytic([[1.0, rho], [rho, 1.0]]) == pytest.approx(-0.5 * math.log(1 - rho ** 2))


@pytest.mark.parametrize("rho, n", [(0.3, 8), (0.8, 5), (-0.6, 4)])
def test_ar1_tc_matches_closed_form(rho, n):
    expected = -0.5 * (n - 1) * math.log(1 - rho ** 2)
    assert gaussian_tc_analytic(ar1_covariance(rho, n)) == pytest.approx(expected, rel=1e-12)


@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_gaussian_tc_matches_slogdet(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    cov = a @ a.T + 0.1 * np.eye(n)
    expected = 0.5 * (np.sum(np.log(np.diag(cov))) - np.linalg.slogdet(cov)[1])
    assert gaussian_tc_analytic(cov) == pytest.approx(expected, abs=1e-9)
    assert gaussian_tc_analytic(cov) >= -1e-9


def test_gaussian_tc_errors():
    with pytest.raises(DomainError):
        gaussian_tc_analytic([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(DomainError):
        gaussian_tc_analytic([[1.0, 0.1], [0.2, 1.0]])
    with pytest.raises(ShapeError):
        gaussian_tc_analytic(np.eye(3)[:2])
    with pytest.raises(DomainError):
        gaussian_tc_analytic(np.eye(2), [1.0, -1.0])
    with pytest.raises(DomainError):
        ar1_covariance(1.0, 3)


def test_exact_conditional_bound_recovers_ar1_tc():
    est, se = ar1_bound_estimate(0.5, 4, 100_000, np.random.default_rng(0))
    tc = gaussian_tc_analytic(ar1_covariance(0.5, 4))
    assert abs(est - tc) < 4 * se and abs(est - tc) / tc < 0.02


@pytest.mark.parametrize("kw", [dict(coef=0.3), dict(log_std=0.0), dict(bias=0.2), dict(coef=0.9, log_std=-0.5)])
def test_misspecified_bound_stays_below_tc(kw):
    est, se = ar1_bound_estimate(0.5, 4, 50_000, np.random.default_rng(1), **kw)
    assert est <= gaussian_tc_analytic(ar1_covariance(0.5, 4)) + 3 * se


def test_independent_chain_bound_is_near_zero():
    est, se = ar1_bound_estimate(0.0, 5, 20_000, np.random.default_rng(2))
    assert est == pytest.approx(0.0, abs=1e-12) and se == pytest.approx(0.0, abs=1e-12)


def test_onpolicy_bound_on_untrained_model():
    mean, se = onpolicy_bound(untrained(), "pendulum", 300, history=4, horizon=50, batch=128)
    assert math.isfinite(mean) and se > 0
    assert mean <= 3 * se
    with pytest.raises(ContractError):
        onpolicy_bound(untrained(algo="sac"), "pendulum", 10)


def test_discounted_tc_re_export():
    assert discounted_tc([1.0, 2.0, 4.0], [0.0, 0.0, 0.0], 0.0) == 1.0
    assert discounted_tc([1.0, 2.0, 4.0], [1.0, 1.0, 1.0], 1.0) == 10.0
    assert discounted_tc([1.0, 2.0, 4.0], [0.0, 0.0, 0.0], 0.5) == 1.0 + 1.0 + 1.0
