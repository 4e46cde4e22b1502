import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mtcrl.estimator import MTCSAC, TStepActionPredictor, held_out_nll
from mtcrl.evaluation import evaluate_policy, t_step_prediction_error


def tiny_agent(**kw):
    base = dict(total_steps=30, init_steps=20, batch_size=8, history=3, eval_episodes=2, horizon=20)
    base.update(kw)
    return MTCSAC(**base)


def test_params_and_clone():
    est = tiny_agent(algo="sac", ip=-3.0)
    params = est.get_params()
    assert params["algo"] == "sac" and params["ip"] == -3.0 and params["history"] == 3
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "models_")
    assert est.set_params(m=0.2).m == 0.2


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        tiny_agent().predict(np.zeros((1, 3)))


def test_fit_predict_score():
    est = tiny_agent().fit()
    assert len(est.history_) == 30 and est.n_features_in_ == 3
    obs = np.random.default_rng(0).normal(size=(5, 3))
    act = est.predict(obs)
    assert act.shape == (5, 1) and np.all(np.abs(act) < 1)
    expected = evaluate_policy(est.models_, "pendulum", 2, seed=0, horizon=20).returns.mean()
    assert est.score() == expected
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 4)))


def test_fit_is_deterministic():
    a, b = tiny_agent(seed=3).fit(), tiny_agent(seed=3).fit()
    obs = np.ones((1, 3))
    assert a.predict(obs).tobytes() == b.predict(obs).tobytes()


def test_predictor_recovers_a_linear_relation():
    rng = np.random.default_rng(1)
    trajs = []
    for _ in range(8):
        a = np.empty((40, 1))
        a[0] = rng.uniform(-1, 1)
        for k in range(1, 40):
            a[k] = 0.9 * a[k - 1] + 0.05 * rng.standard_normal()
        trajs.append(a)
    est = TStepActionPredictor(t=1, steps=1500, lr=3e-3).fit(trajs)
    pred = est.predict(np.array([[0.5], [-0.5]]))
    np.testing.assert_allclose(pred[:, 0], [0.45, -0.45], atol=0.05)
    assert est.score(trajs) > 1.0  # conditional std 0.05 gives a log-likelihood near 1.6


def test_predictor_rejects_short_trajectories():
    with pytest.raises(ValueError):
        TStepActionPredictor(t=5).fit([np.zeros((5, 1))])


def test_held_out_nll_matches_the_protocol_function():
    rng = np.random.default_rng(2)
    trajs = [rng.uniform(-1, 1, (15, 1)) for _ in range(10)]
    assert held_out_nll(trajs, 3, steps=50) == t_step_prediction_error(trajs, 3, steps=50)
