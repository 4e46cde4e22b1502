"""Networks and Gaussian utilities for MTC-SAC.

All networks take row-major batches (rows = samples).  Weight init is
uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for every weight and bias.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
LATENT_DIM = 30
HIDDEN = 256
RECURRENT_HIDDEN = 256
RECURRENT_OUT = 30
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_ATANH_CLIP = 1.0 - 1e-9


class Module:
    """Container of named parameters and sub-modules, in insertion order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def add_param(self, name: str, values: np.ndarray) -> Tensor:
        t = Tensor(values, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.values.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.values[...] = arr


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = self.add_param("weight", rng.uniform(-bound, bound, (n_in, n_out)))
        self.bias = self.add_param("bias", rng.uniform(-bound, bound, n_out))

    def __call__(self, x) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class MLP(Module):
    """Three fully connected layers with ReLU between them."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, hidden: int = HIDDEN):
        super().__init__()
        self.widths = (n_in, hidden, hidden, n_out)
        self.layers = [
            self.add_child(f"l{i}", Linear(a, b, rng))
            for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:]))
        ]

    def __call__(self, x) -> Tensor:
        for layer in self.layers[:-1]:
            x = ad.relu(layer(x))
        return self.layers[-1](x)


class LayerNorm(Module):
    def __init__(self, width: int):
        super().__init__()
        self.gain = self.add_param("gain", np.ones(width))
        self.shift = self.add_param("shift", np.zeros(width))

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gain, self.shift)


class LSTMCell(Module):
    """Single-layer gated recurrence (input/forget/candidate/output gates)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.hidden = n_in, hidden
        bound = 1.0 / math.sqrt(hidden)
        self.weight = self.add_param("weight", rng.uniform(-bound, bound, (n_in + hidden, 4 * hidden)))
        self.bias = self.add_param("bias", rng.uniform(-bound, bound, 4 * hidden))

    def initial_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden))
        return Tensor(z, _check=False), Tensor(z.copy(), _check=False)

    def __call__(self, x, state: tuple[Tensor, Tensor]) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        x = ad._as_tensor(x)
        if x.values.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"recurrent input width {x.shape[-1]} != {self.n_in}")
        h, c = state
        if h.shape[1] != self.hidden:
            raise ShapeError(f"hidden width {h.shape[1]} != {self.hidden}")
        h, c = ad.lstm_cell(x, h, c, self.weight, self.bias)
        return h, (h, c)


def recurrent_step(cell: LSTMCell, x, state):
    """One step of ``cell``: returns ``(output, next_state)``."""
    return cell(x, state)


def bounded_log_std(raw: Tensor) -> Tensor:
    """Squash raw outputs smoothly into [LOG_STD_MIN, LOG_STD_MAX]."""
    half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN)
    return ad.add(ad.mul(ad.tanh(raw), half), LOG_STD_MIN + half)


class DiagGaussian:
    """Batch of diagonal Gaussians; ``mean`` and ``log_std`` have shape (batch, dim)."""

    def __init__(self, mean: Tensor, log_std: Tensor):
        if mean.shape != log_std.shape:
            raise ShapeError(f"mean {mean.shape} and log_std {log_std.shape} differ")
        self.mean, self.log_std = mean, log_std

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def log_prob(self, x) -> Tensor:
        """Summed log-density per row."""
        x = ad._as_tensor(x)
        if x.shape != self.mean.shape:
            raise ShapeError(f"log_prob: value {x.shape} vs distribution {self.mean.shape}")
        white = ad.mul(ad.sub(x, self.mean), ad.exp(ad.neg(self.log_std)))
        per_dim = ad.sub(ad.mul(ad.square(white), -0.5), self.log_std)
        return ad.add(ad.sum(per_dim, axis=-1), -self.dim * HALF_LOG_2PI)

    def rsample(self, eps: np.ndarray) -> Tensor:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != self.mean.shape:
            raise ShapeError("rsample: noise shape mismatch")
        return ad.add(self.mean, ad.mul(ad.exp(self.log_std), eps))

    def rows(self, start: int, stop: int) -> "DiagGaussian":
        return DiagGaussian(ad.rows(self.mean, start, stop), ad.rows(self.log_std, start, stop))

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_std.detach())


def kl_diag_gaussian(p: DiagGaussian, q: DiagGaussian) -> Tensor:
    """Analytic KL(p || q) per row."""
    if p.mean.shape != q.mean.shape:
        raise ShapeError(f"kl: dimensions {p.mean.shape} and {q.mean.shape} differ")
    var_ratio = ad.exp(ad.mul(ad.sub(p.log_std, q.log_std), 2.0))
    mean_term = ad.square(ad.mul(ad.sub(p.mean, q.mean), ad.exp(ad.neg(q.log_std))))
    per_dim = ad.mul(ad.sub(ad.add(var_ratio, mean_term), 1.0), 0.5)
    per_dim = ad.add(per_dim, ad.sub(q.log_std, p.log_std))
    return ad.sum(per_dim, axis=-1)


def _log1m_tanh_sq(u) -> Tensor:
    """log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), summed per row."""
    u = ad._as_tensor(u)
    per = ad.mul(ad.sub(ad.sub(math.log(2.0), u), ad.softplus(ad.mul(u, -2.0))), 2.0)
    return ad.sum(per, axis=-1)


def atanh_clipped(a: np.ndarray) -> np.ndarray:
    return np.arctanh(np.clip(a, -_ATANH_CLIP, _ATANH_CLIP))


class SquashedGaussian:
    """tanh-transformed diagonal Gaussian over actions in (-1, 1)."""

    def __init__(self, base: DiagGaussian):
        self.base = base

    @property
    def mean_action(self) -> np.ndarray:
        return np.tanh(self.base.mean.values)

    def rsample(self, eps: np.ndarray) -> tuple[Tensor, Tensor]:
        u = self.base.rsample(eps)
        return ad.tanh(u), self._log_prob_u(u)

    def log_prob(self, a: np.ndarray) -> Tensor:
        """Log-density of fixed actions (e.g. from replay); inverts the squash."""
        u = atanh_clipped(np.asarray(a, dtype=np.float64))
        return self._log_prob_u(Tensor(u, _check=False))

    def _log_prob_u(self, u: Tensor) -> Tensor:
        return ad.sub(self.base.log_prob(u), _log1m_tanh_sq(u))

    def rows(self, start: int, stop: int) -> "SquashedGaussian":
        return SquashedGaussian(self.base.rows(start, stop))


class GaussianHead(Module):
    """Network whose output is split into a mean half and a bounded log-std half."""

    def _split(self, out: Tensor, dim: int) -> DiagGaussian:
        return DiagGaussian(ad.columns(out, 0, dim), bounded_log_std(ad.columns(out, dim, 2 * dim)))


class Encoder(GaussianHead):
    """f(z | s): observation -> diagonal Gaussian over a 30-dim latent."""

    def __init__(self, obs_dim: int, rng: np.random.Generator, latent_dim: int = LATENT_DIM):
        super().__init__()
        self.obs_dim, self.latent_dim = obs_dim, latent_dim
        self.net = self.add_child("net", MLP(obs_dim, 2 * latent_dim, rng))

    def distribution(self, s) -> DiagGaussian:
        s = ad._as_tensor(s)
        if s.values.ndim != 2 or s.shape[1] != self.obs_dim:
            raise ShapeError(f"encoder expects (batch, {self.obs_dim}), got {s.shape}")
        return self._split(self.net(s), self.latent_dim)

    def encode(self, s, eps: np.ndarray) -> tuple[Tensor, DiagGaussian]:
        dist = self.distribution(s)
        return dist.rsample(eps), dist


class Policy(GaussianHead):
    """pi(a | s): tanh-squashed diagonal Gaussian over actions."""

    def __init__(self, obs_dim: int, action_dim: int, rng: np.random.Generator):
        super().__init__()
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.net = self.add_child("net", MLP(obs_dim, 2 * action_dim, rng))

    def distribution(self, s) -> SquashedGaussian:
        s = ad._as_tensor(s)
        if s.values.ndim != 2 or s.shape[1] != self.obs_dim:
            raise ShapeError(f"policy expects (batch, {self.obs_dim}), got {s.shape}")
        return SquashedGaussian(self._split(self.net(s), self.action_dim))

    def act(self, s, eps: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.distribution(s).rsample(eps)

    def mean_action(self, s) -> np.ndarray:
        with ad.no_grad():
            return self.distribution(s).mean_action


class HistoryModel(GaussianHead):
    """Recurrent core (hidden 256) -> projection to 30 -> optional layer norm -> 3-layer head.

    Emits one diagonal Gaussian per step of the unrolled history.
    """

    def __init__(self, n_in: int, out_dim: int, rng: np.random.Generator, norm: str = "layer_norm"):
        super().__init__()
        if norm not in ("layer_norm", "none"):
            raise ValueError(f"unknown output normalisation {norm!r}")
        self.n_in, self.out_dim, self.norm_kind = n_in, out_dim, norm
        self.cell = self.add_child("cell", LSTMCell(n_in, RECURRENT_HIDDEN, rng))
        self.proj = self.add_child("proj", Linear(RECURRENT_HIDDEN, RECURRENT_OUT, rng))
        self.norm = self.add_child("norm", LayerNorm(RECURRENT_OUT)) if norm == "layer_norm" else None
        self.head = self.add_child("head", MLP(RECURRENT_OUT, 2 * out_dim, rng))

    def unroll(self, inputs: list) -> list[Tensor]:
        """Hidden outputs after each step of ``inputs`` (a list of (batch, n_in) tensors)."""
        if not inputs:
            raise ContractError("history window is empty")
        state = self.cell.initial_state(ad._as_tensor(inputs[0]).shape[0])
        outs = []
        for x in inputs:
            h, state = self.cell(x, state)
            outs.append(h)
        return outs

    def heads(self, hidden: Tensor) -> DiagGaussian:
        y = self.proj(hidden)
        if self.norm is not None:
            y = self.norm(y)
        return self._split(self.head(y), self.out_dim)

    def all_steps(self, inputs: list) -> DiagGaussian:
        """Distributions for every step, stacked step-major: rows [k*B:(k+1)*B] is step k."""
        return self.heads(ad.concat(self.unroll(inputs), axis=0))

    def last_step(self, inputs: list) -> DiagGaussian:
        return self.heads(self.unroll(inputs)[-1])


class HistoryDynamics(HistoryModel):
    """q_eta(z_{t+1} | z_{1:t}, a_{1:t})."""

    def __init__(self, latent_dim: int, action_dim: int, rng: np.random.Generator, norm: str = "layer_norm"):
        super().__init__(latent_dim + action_dim, latent_dim, rng, norm)
        self.latent_dim, self.action_dim = latent_dim, action_dim

    def step_inputs(self, z_steps: list, a_steps: list) -> list[Tensor]:
        if len(z_steps) != len(a_steps):
            raise ContractError("dynamics needs one action per latent in the window")
        return [ad.concat([z, ad._as_tensor(a)], axis=1) for z, a in zip(z_steps, a_steps)]

    def predict_next_latent(self, z_steps: list, a_steps: list) -> DiagGaussian:
        return self.last_step(self.step_inputs(z_steps, a_steps))


class HistoryActionPredictor(HistoryModel):
    """q_chi(a_t | z_{1:t}, a_{1:t-1}); squashed like the policy."""

    def __init__(self, latent_dim: int, action_dim: int, rng: np.random.Generator, norm: str = "layer_norm"):
        super().__init__(latent_dim + action_dim, action_dim, rng, norm)
        self.latent_dim, self.action_dim = latent_dim, action_dim

    def step_inputs(self, z_steps: list, prev_actions: list) -> list[Tensor]:
        """``prev_actions`` holds a_{1:t-1}; step 1 is fed a zero action."""
        if len(prev_actions) != len(z_steps) - 1:
            raise ContractError("action predictor needs t latents and t-1 previous actions")
        batch = ad._as_tensor(z_steps[0]).shape[0]
        shifted = [np.zeros((batch, self.action_dim))] + list(prev_actions)
        return [ad.concat([z, ad._as_tensor(a)], axis=1) for z, a in zip(z_steps, shifted)]

    def predict_action(self, z_steps: list, prev_actions: list) -> SquashedGaussian:
        return SquashedGaussian(self.last_step(self.step_inputs(z_steps, prev_actions)))


class QNet(Module):
    def __init__(self, obs_dim: int, action_dim: int, rng: np.random.Generator):
        super().__init__()
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.net = self.add_child("net", MLP(obs_dim + action_dim, 1, rng))

    def __call__(self, s, a) -> Tensor:
        x = ad.concat([ad._as_tensor(s), ad._as_tensor(a)], axis=1)
        return ad.sum(self.net(x), axis=-1)


def soft_update(net: Module, target: Module, tau: float) -> None:
    """target <- (1 - tau) * target + tau * net, parameter by parameter."""
    src = list(net.named_parameters())
    dst = list(target.named_parameters())
    if [n for n, _ in src] != [n for n, _ in dst]:
        raise ContractError("soft_update: parameter names differ")
    for (name, p), (_, tp) in zip(src, dst):
        if p.shape != tp.shape:
            raise ContractError(f"soft_update: shape mismatch for {name}")
        if tau == 1.0:
            tp.values[...] = p.values
        elif tau != 0.0:
            tp.values *= 1.0 - tau
            tp.values += tau * p.values


class OneStepDynamics(GaussianHead):
    """q(z_{t+1} | z_t, a_t) without history; the RPC-style baseline model."""

    def __init__(self, latent_dim: int, action_dim: int, rng: np.random.Generator):
        super().__init__()
        self.latent_dim, self.action_dim = latent_dim, action_dim
        self.net = self.add_child("net", MLP(latent_dim + action_dim, 2 * latent_dim, rng))

    def distribution(self, z, a) -> DiagGaussian:
        return self._split(self.net(ad.concat([ad._as_tensor(z), ad._as_tensor(a)], axis=1)), self.latent_dim)


ALGOS = ("mtc", "mtc-noa", "rpc", "sac")


class ModelSet(Module):
    """Every learnable piece of one agent.

    Which predictors exist depends on ``algo``: ``mtc`` builds the encoder and
    both history models, ``mtc-noa`` drops the action predictor, ``rpc`` uses a
    one-step dynamics model and ``sac`` has only the policy and critics.
    alpha and beta' are stored as logs so they stay positive.
    """

    def __init__(self, obs_dim: int, action_dim: int, rng: np.random.Generator, *,
                 algo: str = "mtc", latent_dim: int = LATENT_DIM,
                 dynamics_output_norm: str = "layer_norm", init_alpha: float = 1e-6,
                 init_temperature: float = 0.1):
        super().__init__()
        if algo not in ALGOS:
            raise ValueError(f"unknown algo {algo!r}; expected one of {ALGOS}")
        self.obs_dim, self.action_dim, self.latent_dim = obs_dim, action_dim, latent_dim
        self.algo = algo
        self.dynamics_output_norm = dynamics_output_norm
        # policy and critics first so every algo gets identical initial weights for a seed
        self.policy = self.add_child("policy", Policy(obs_dim, action_dim, rng))
        self.q1 = self.add_child("q1", QNet(obs_dim, action_dim, rng))
        self.q2 = self.add_child("q2", QNet(obs_dim, action_dim, rng))
        self.q1_target = self.add_child("q1_target", QNet(obs_dim, action_dim, rng))
        self.q2_target = self.add_child("q2_target", QNet(obs_dim, action_dim, rng))
        soft_update(self.q1, self.q1_target, 1.0)
        soft_update(self.q2, self.q2_target, 1.0)
        self.q1_target.requires_grad_(False)
        self.q2_target.requires_grad_(False)
        self.encoder = self.dynamics = self.action_predictor = None
        if algo != "sac":
            self.encoder = self.add_child("encoder", Encoder(obs_dim, rng, latent_dim))
        if algo in ("mtc", "mtc-noa"):
            self.dynamics = self.add_child(
                "dynamics", HistoryDynamics(latent_dim, action_dim, rng, dynamics_output_norm))
        elif algo == "rpc":
            self.dynamics = self.add_child("dynamics", OneStepDynamics(latent_dim, action_dim, rng))
        if algo == "mtc":
            self.action_predictor = self.add_child(
                "action_predictor",
                HistoryActionPredictor(latent_dim, action_dim, rng, dynamics_output_norm))
        self.log_alpha = self.add_param("log_alpha", np.array([math.log(init_alpha)]))
        self.log_beta_prime = self.add_param("log_beta_prime", np.array([math.log(init_temperature)]))

    @property
    def regularized(self) -> bool:
        return self.algo != "sac"

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.values[0]))

    @property
    def beta_prime(self) -> float:
        return float(np.exp(self.log_beta_prime.values[0]))

    def critic_parameters(self) -> list[Tensor]:
        return self.q1.parameters() + self.q2.parameters()

    def actor_parameters(self) -> list[Tensor]:
        params = self.policy.parameters()
        for m in (self.encoder, self.dynamics, self.action_predictor):
            if m is not None:
                params += m.parameters()
        return params

    def manifest(self) -> dict:
        return {
            "algo": self.algo,
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "latent_dim": self.latent_dim,
            "hidden": HIDDEN,
            "recurrent_hidden": RECURRENT_HIDDEN,
            "dynamics_output_norm": self.dynamics_output_norm,
        }
