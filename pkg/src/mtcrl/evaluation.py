"""Measurement protocols: rollouts, compressibility, t-step predictability,
robustness sweeps, score normalisation and the Gaussian total-correlation oracle.
"""
from __future__ import annotations

import bz2
import hashlib
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import ContractError, DomainError, ShapeError, Tensor
from .envs import REGISTRY, PerturbationConfig, make_env
from .models import MLP, DiagGaussian, ModelSet, bounded_log_std
from .objective import assemble_bound_terms, discounted_tc, tc_bound_terms
from .rng import stream

Z90 = NormalDist().inv_cdf(0.95)
REPORT_COLUMNS = ("method", "task", "perturbation", "level", "seed", "mean_return", "ci90", "normalized_score")
PREDICTION_HORIZONS = (3, 5, 8, 10)
COMPRESSORS = {"bz2": bz2.compress}

__all__ = ["Trajectory", "EvalResult", "load_models", "evaluate_policy", "serialize_trajectory",
           "compress_trajectory", "normalized_size", "write_trajectories", "read_trajectories",
           "t_step_prediction_error", "robustness_sweep", "perturbation", "normalize_scores",
           "gaussian_tc_analytic", "ar1_covariance", "ar1_bound_estimate", "onpolicy_bound",
           "discounted_tc", "ci90"]


@dataclass
class Trajectory:
    """Observations the agent saw (T, ds) and the actions it took (T, da)."""

    env_id: str
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2 or len(self.states) != len(self.actions):
            raise ContractError("trajectory needs (T, ds) states and (T, da) actions")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class EvalResult:
    returns: np.ndarray
    trajectories: list = field(default_factory=list)


def load_models(path) -> ModelSet:
    """Rebuild the ModelSet stored in a checkpoint written by the trainer."""
    arrays, manifest = ckpt.load(path)
    if manifest is None:
        raise ckpt.CheckpointError("checkpoint carries no architecture manifest")
    models = ModelSet(manifest["obs_dim"], manifest["action_dim"], np.random.default_rng(0),
                      algo=manifest["algo"], latent_dim=manifest["latent_dim"],
                      dynamics_output_norm=manifest["dynamics_output_norm"])
    ckpt.check_manifest(manifest, models.manifest())
    models.load_state_dict({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    return models


def eval_env_seed(seed: int) -> int:
    """Environment seed for evaluation; disjoint from the training env stream."""
    return int(stream(seed, "eval").integers(2 ** 62))


def evaluate_policy(models: ModelSet, env_id: str, episodes: int, seed: int = 0, horizon: int = 1000,
                    perturbation: PerturbationConfig | None = None) -> EvalResult:
    """Roll out the mean action for ``episodes`` episodes; deterministic given ``seed``."""
    if episodes < 0:
        raise ValueError("episodes must be non-negative")
    if episodes == 0:
        return EvalResult(np.zeros(0), [])
    env = make_env(env_id, seed=eval_env_seed(seed), horizon=horizon, perturbation=perturbation)
    if env.spec.obs_dim != models.obs_dim or env.spec.action_dim != models.action_dim:
        raise ckpt.CheckpointError(
            f"checkpoint expects obs/action dims {models.obs_dim}/{models.action_dim}, "
            f"env {env_id} has {env.spec.obs_dim}/{env.spec.action_dim}")
    returns, trajs = [], []
    for _ in range(episodes):
        obs = env.reset()
        states, actions, total = [], [], 0.0
        while True:
            a = models.policy.mean_action(obs[None, :])[0]
            states.append(obs)
            actions.append(a)
            obs, r, d, info = env.step(a)
            total += r
            if d or info["truncated"]:
                break
        returns.append(total)
        trajs.append(Trajectory(env_id, np.array(states), np.array(actions)))
    return EvalResult(np.array(returns), trajs)


# -- compressibility ---------------------------------------------------------------------

def serialize_trajectory(traj: Trajectory) -> bytes:
    """Canonical text: a header line then one comma-separated "%.1f" row of (s, a) per step."""
    if len(traj) == 0:
        raise ContractError("cannot serialise an empty trajectory")
    rows = np.round(np.concatenate([traj.states, traj.actions], axis=1), 1) + 0.0  # drop -0.0
    head = (f"# env={traj.env_id} dim_s={traj.states.shape[1]} dim_a={traj.actions.shape[1]} "
            f"steps={len(traj)} prec=1\n")
    body = "\n".join(",".join(f"{v:.1f}" for v in row) for row in rows)
    return (head + body + "\n").encode("ascii")


def compress_trajectory(traj: Trajectory, compressor: str = "bz2") -> int:
    """Compressed byte count of the canonical serialisation."""
    if compressor not in COMPRESSORS:
        raise LookupError(f"compressor {compressor!r} unavailable; known: {sorted(COMPRESSORS)}")
    return len(COMPRESSORS[compressor](serialize_trajectory(traj)))


def normalized_size(sizes: dict) -> dict:
    """Each method's size divided by the largest; ratios land in (0, 1]."""
    if not sizes:
        return {}
    vals = {k: float(v) for k, v in sizes.items()}
    if any(v <= 0 for v in vals.values()):
        raise ValueError("sizes must be positive")
    top = max(vals.values())
    return {k: v / top for k, v in vals.items()}


# -- binary trajectory dumps -----------------------------------------------------------------

def write_trajectories(path, trajectories: list) -> None:
    arrays = {}
    for i, t in enumerate(trajectories):
        arrays[f"{i:05d}/states"] = t.states
        arrays[f"{i:05d}/actions"] = t.actions
    env_id = trajectories[0].env_id if trajectories else ""
    ckpt.save(path, arrays, manifest={"kind": "trajectories", "env": env_id, "count": len(trajectories)})


def read_trajectories(path) -> list:
    arrays, manifest = ckpt.load(path)
    if not manifest or manifest.get("kind") != "trajectories":
        raise ckpt.CheckpointError(f"{path} is not a trajectory dump")
    return [Trajectory(manifest["env"], arrays[f"{i:05d}/states"], arrays[f"{i:05d}/actions"])
            for i in range(manifest["count"])]


# -- t-step predictability -------------------------------------------------------------------

def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


def split_by_trajectory(actions: list, held_out: float = 0.2) -> tuple[list, list]:
    """80/20 split decided by content hash, so duplicating the dataset leaves both halves'
    empirical distributions unchanged."""
    keys = sorted({_digest(a) for a in actions})
    n_test = max(1, int(round(held_out * len(keys))))
    if len(keys) - n_test < 1:
        raise ContractError("need at least two distinct trajectories to split")
    test_keys = set(keys[-n_test:])
    train = [a for a in actions if _digest(a) not in test_keys]
    test = [a for a in actions if _digest(a) in test_keys]
    return train, test


def lagged_pairs(actions: list, t: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([a[:-t] for a in actions])
    y = np.concatenate([a[t:] for a in actions])
    return x, y


class GaussianPredictor:
    """MLP with a diagonal Gaussian head, fitted by full-batch maximum likelihood."""

    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator, width: int = 64):
        self.dim_out = dim_out
        self.net = MLP(dim_in, 2 * dim_out, rng, hidden=width)

    def distribution(self, x) -> DiagGaussian:
        out = self.net(x)
        d = self.dim_out
        return DiagGaussian(ad.columns(out, 0, d), bounded_log_std(ad.columns(out, d, 2 * d)))

    def nll(self, x, y) -> Tensor:
        return ad.neg(ad.mean(self.distribution(x).log_prob(y)))

    def fit(self, x, y, steps: int = 2000, lr: float = 1e-3) -> "GaussianPredictor":
        opt = ad.AdamState(self.net.parameters(), lr=lr)
        for _ in range(steps):
            ad.backward(self.nll(x, y))
            ad.adam_apply(opt)
        return self

    def score_nll(self, x, y) -> float:
        with ad.no_grad():
            return float(self.nll(x, y).values)


def split_actions(trajectories: list, t: int) -> tuple[list, list]:
    """Validated per-trajectory action arrays split 80/20, for predicting t steps ahead."""
    if t < 1:
        raise ValueError("t must be at least 1")
    actions = [np.asarray(tr.actions if isinstance(tr, Trajectory) else tr, dtype=np.float64) for tr in trajectories]
    if not actions:
        raise ContractError("empty dataset")
    if any(a.ndim != 2 for a in actions):
        raise ContractError("each trajectory's actions must be (T, da)")
    if min(len(a) for a in actions) <= t:
        raise ContractError(f"t={t} needs trajectories longer than {t} steps")
    return split_by_trajectory(actions)


def t_step_prediction_error(trajectories: list, t: int, *, steps: int = 2000, lr: float = 1e-3,
                            width: int = 64, seed: int = 0) -> float:
    """Held-out mean NLL of a Gaussian MLP predicting a_{k+t} from a_k, fitted by maximum likelihood."""
    train, test = split_actions(trajectories, t)
    x_tr, y_tr = lagged_pairs(train, t)
    x_te, y_te = lagged_pairs(test, t)
    dim = x_tr.shape[1]
    model = GaussianPredictor(dim, dim, stream(seed, f"predictor/{t}"), width)
    return model.fit(x_tr, y_tr, steps, lr).score_nll(x_te, y_te)


# -- robustness sweeps -----------------------------------------------------------------------

KINDS = ("obs", "act", "mass", "distract")


def perturbation(kind: str, level: float) -> PerturbationConfig:
    """Map a (kind, level) grid cell to a wrapper configuration."""
    if kind == "obs":
        return PerturbationConfig(obs_noise_sigma=level)
    if kind == "act":
        return PerturbationConfig(action_noise_sigma=level)
    if kind == "mass":
        return PerturbationConfig(mass_scale=level)
    if kind == "distract":
        if level != int(level):
            raise ValueError("distractor level is a dimension count")
        return PerturbationConfig(distractor_dims=int(level))
    raise ValueError(f"unknown perturbation kind {kind!r}; valid: {', '.join(KINDS)}")


def ci90(values) -> float:
    """Half-width of a normal-approximation 90% interval for the mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(Z90 * v.std(ddof=1) / math.sqrt(v.size))


def robustness_sweep(models: ModelSet, env_id: str, grid: list, seeds: list, episodes: int = 30, *,
                     method: str = "", horizon: int = 1000) -> list[dict]:
    """Full factorial over ``grid`` (a list of (kind, level)) and ``seeds``.

    Every cell builds its own environment from the evaluation seed alone, so
    cells are independent of grid order and share initial states.  Each cell
    yields one row per seed (CI over episodes) and a ``seed="all"`` row whose
    CI is taken over the per-seed means.
    """
    rows = []
    for kind, level in grid:
        cfg = perturbation(kind, level)
        means = []
        for seed in seeds:
            res = evaluate_policy(models, env_id, episodes, seed=seed, horizon=horizon, perturbation=cfg)
            mean = float(res.returns.mean()) if res.returns.size else math.nan
            means.append(mean)
            rows.append(dict(method=method, task=env_id, perturbation=kind, level=float(level), seed=str(seed),
                             mean_return=mean, ci90=ci90(res.returns), normalized_score=math.nan))
        if seeds:
            rows.append(dict(method=method, task=env_id, perturbation=kind, level=float(level), seed="all",
                             mean_return=float(np.mean(means)), ci90=ci90(means), normalized_score=math.nan))
    return rows


def return_floor(env_id: str, horizon: int) -> float:
    """Lowest achievable episode return (zero for non-negative rewards)."""
    if env_id not in REGISTRY:
        return 0.0
    lo, _ = REGISTRY[env_id](horizon=horizon).reward_bounds()
    return min(0.0, lo * horizon)


def normalize_scores(rows: list[dict], horizon: int = 1000) -> list[dict]:
    """Score each row against the best method in its (task, kind, level, seed) cell.

    Returns are first shifted by the task's lowest achievable return so that
    tasks with negative rewards map onto (0, 1] like non-negative ones.
    """
    best: dict = {}
    for r in rows:
        key = (r["task"], r["perturbation"], float(r["level"]), str(r["seed"]))
        best[key] = max(best.get(key, -math.inf), float(r["mean_return"]))
    out = []
    for r in rows:
        key = (r["task"], r["perturbation"], float(r["level"]), str(r["seed"]))
        floor = return_floor(r["task"], horizon)
        top = best[key] - floor
        val = float(r["mean_return"]) - floor
        out.append(dict(r, normalized_score=1.0 if top <= 0 else val / top))
    return out


# -- total-correlation oracles ------------------------------------------------------------------

def gaussian_tc_analytic(cov, marginal_variances=None) -> float:
    """TC = 1/2 (sum_i ln sigma_i^2 - ln det Sigma) in nats, via a Cholesky factor."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError("covariance must be square")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise DomainError("covariance must be symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DomainError("covariance is not positive definite") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    var = np.diag(cov) if marginal_variances is None else np.asarray(marginal_variances, dtype=np.float64)
    if var.shape != (cov.shape[0],) or np.any(var <= 0):
        raise DomainError("marginal variances must be positive, one per variable")
    return 0.5 * (float(np.sum(np.log(var))) - logdet)



def ar1_covariance(rho: float, n: int) -> np.ndarray:
    """Stationary unit-variance AR(1): Sigma_ij = rho^|i-j|."""
    if not -1.0 < rho < 1.0:
        raise DomainError("rho must lie in (-1, 1)")
    idx = np.arange(n)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def ar1_samples(rho: float, n: int, samples: int, rng: np.random.Generator) -> np.ndarray:
    """(samples, n) draws of x_1 ~ N(0,1), x_{k+1} = rho x_k + sqrt(1-rho^2) e_k."""
    x = np.empty((samples, n))
    x[:, 0] = rng.standard_normal(samples)
    scale = math.sqrt(1.0 - rho * rho)
    for k in range(1, n):
        x[:, k] = rho * x[:, k - 1] + scale * rng.standard_normal(samples)
    return x


def ar1_bound_estimate(rho: float, n: int, samples: int, rng: np.random.Generator, *,
                       coef: float | None = None, log_std: float | None = None,
                       bias: float = 0.0) -> tuple[float, float]:
    """Monte-Carlo lower bound on the chain's TC and its standard error.

    The variational conditional is q(x_{k+1} | x_{1:k}) = N(coef x_k + bias, exp(log_std)^2);
    the defaults are the exact conditional.  Marginals are the exact N(0, 1),
    so the per-sample bound is sum_k log q(x_{k+1}|.) - log N(x_{k+1}; 0, 1).
    """
    coef = rho if coef is None else coef
    log_std = 0.5 * math.log(1.0 - rho * rho) if log_std is None else log_std
    x = ar1_samples(rho, n, samples, rng)
    prev, nxt = x[:, :-1].T.reshape(-1, 1), x[:, 1:].T.reshape(-1, 1)  # step-major
    with ad.no_grad():
        q = DiagGaussian(Tensor(coef * prev + bias, _check=False), Tensor(np.full_like(prev, log_std), _check=False))
        f = DiagGaussian(Tensor(np.zeros_like(nxt), _check=False), Tensor(np.zeros_like(nxt), _check=False))
        terms = assemble_bound_terms(q.log_prob(nxt), f.log_prob(nxt), None, None, n - 1)
    cz, _ = terms.numpy()
    per_sample = cz.sum(axis=0)
    return float(per_sample.mean()), float(per_sample.std(ddof=1) / math.sqrt(samples))


def onpolicy_bound(models: ModelSet, env_id: str, steps: int, *, history: int = 8, m: float = 1e-6,
                   seed: int = 0, horizon: int = 1000, batch: int = 500) -> tuple[float, float]:
    """Mean and standard error of the final-step mixed bound term along on-policy rollouts.

    Actions are sampled from the policy and latents from the encoder, so each
    term is a sample of a sum of negated KL divergences.
    """
    if models.algo not in ("mtc", "mtc-noa"):
        raise ContractError("on-policy bound needs a history-model checkpoint")
    if models.algo != "mtc":
        m = 0.0
    env = make_env(env_id, seed=eval_env_seed(seed), horizon=horizon)
    rng = stream(seed, "onpolicy")
    da = models.action_dim
    states, actions = [], []
    episodes = []
    obs = env.reset()
    while sum(max(0, len(e[1]) - history + 1) for e in episodes) + max(0, len(actions) - history + 1) < steps:
        with ad.no_grad():
            a, _ = models.policy.act(obs[None, :], rng.standard_normal((1, da)))
        a = np.clip(a.values[0], -1.0, 1.0)
        states.append(obs)
        actions.append(a)
        obs, _, d, info = env.step(a)
        if d or info["truncated"]:
            states.append(obs)
            episodes.append((np.array(states), np.array(actions)))
            states, actions = [], []
            obs = env.reset()
    if actions:
        episodes.append((np.array(states + [obs]), np.array(actions)))
    win_s, win_a = [], []
    for s, a in episodes:
        for k in range(len(a) - history + 1):
            win_s.append(s[k:k + history + 1])
            win_a.append(a[k:k + history])
    win_s, win_a = np.array(win_s[:steps]), np.array(win_a[:steps])
    vals = []
    for lo in range(0, len(win_a), batch):
        w = _Window(win_s[lo:lo + batch], win_a[lo:lo + batch])
        with ad.no_grad():
            terms = tc_bound_terms(w, models, rng)
        vals.append(terms.mixed_steps(m)[-1])
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class _Window:
    states: np.ndarray
    actions: np.ndarray
