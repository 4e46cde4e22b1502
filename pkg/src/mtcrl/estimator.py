"""scikit-learn style front ends.

``MTCSAC`` trains an agent with ``fit`` and maps observations to mean actions
with ``predict``; ``TStepActionPredictor`` is the t-step-ahead action model
used for the predictability analysis.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .evaluation import GaussianPredictor, evaluate_policy, lagged_pairs, split_actions
from .rng import stream
from .trainer import TrainConfig, Trainer


class MTCSAC(BaseEstimator):
    """Soft actor-critic with an optional total-correlation regulariser.

    Parameters mirror :class:`~mtcrl.trainer.TrainConfig`; ``algo="sac"``
    gives the plain baseline.  ``fit`` ignores ``X`` and ``y``: the data come
    from interacting with ``env``.
    """

    def __init__(self, env="pendulum", algo="mtc", total_steps=100_000, seed=0, ip=-7.0, m=1e-6,
                 history=8, batch_size=256, init_steps=5000, eval_episodes=10, horizon=1000):
        self.env = env
        self.algo = algo
        self.total_steps = total_steps
        self.seed = seed
        self.ip = ip
        self.m = m
        self.history = history
        self.batch_size = batch_size
        self.init_steps = init_steps
        self.eval_episodes = eval_episodes
        self.horizon = horizon

    def _config(self) -> TrainConfig:
        return TrainConfig(env=self.env, algo=self.algo, total_steps=self.total_steps, seed=self.seed,
                           ip=self.ip, m=self.m, history=self.history, batch_size=self.batch_size,
                           init_steps=self.init_steps, eval_episodes=self.eval_episodes, horizon=self.horizon,
                           capacity=max(1, min(1_000_000, self.total_steps)))

    def fit(self, X=None, y=None):
        trainer = Trainer(self._config())
        self.history_ = [trainer.train_step() for _ in range(self.total_steps)]
        self.models_ = trainer.models
        self.n_features_in_ = trainer.env.spec.obs_dim
        return self

    def predict(self, X):
        """Deterministic (mean) actions for a batch of observations."""
        check_is_fitted(self, "models_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} observation features, got {X.shape[1]}")
        return self.models_.policy.mean_action(X)

    def score(self, X=None, y=None):
        """Mean evaluation return over ``eval_episodes`` episodes."""
        check_is_fitted(self, "models_")
        res = evaluate_policy(self.models_, self.env, self.eval_episodes, seed=self.seed, horizon=self.horizon)
        return float(res.returns.mean()) if res.returns.size else float("nan")


class TStepActionPredictor(BaseEstimator):
    """Gaussian model of a_{k+t} given a_k.

    ``fit`` takes a list of per-trajectory action arrays and trains on all of
    them; ``score`` returns the mean log-likelihood (higher is better).  Use
    :func:`held_out_nll` for the 80/20 protocol.
    """

    def __init__(self, t=3, steps=2000, lr=1e-3, width=64, seed=0):
        self.t = t
        self.steps = steps
        self.lr = lr
        self.width = width
        self.seed = seed

    def _pairs(self, trajectories):
        actions = [check_array(a, dtype=np.float64) for a in trajectories]
        if min(len(a) for a in actions) <= self.t:
            raise ValueError(f"t={self.t} needs trajectories longer than {self.t} steps")
        return lagged_pairs(actions, self.t)

    def fit(self, X, y=None):
        x, target = self._pairs(X)
        self.n_features_in_ = x.shape[1]
        self.model_ = GaussianPredictor(x.shape[1], x.shape[1], stream(self.seed, f"predictor/{self.t}"),
                                        self.width).fit(x, target, self.steps, self.lr)
        return self

    def predict(self, X):
        """Predicted mean of the action t steps after each row of ``X``."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.distribution(X).mean.values.copy()

    def score(self, X, y=None):
        check_is_fitted(self, "model_")
        x, target = self._pairs(X)
        return -self.model_.score_nll(x, target)


def held_out_nll(trajectories, t: int, **params) -> float:
    """Fit on 80% of the trajectories, report mean NLL on the rest."""
    train, test = split_actions(trajectories, t)
    est = TStepActionPredictor(t=t, **params).fit(train)
    return -est.score(test)
