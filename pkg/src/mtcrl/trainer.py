"""The MTC-SAC training loop and run orchestration."""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .envs import REGISTRY, make_env
from .evaluation import evaluate_policy, write_trajectories
from .models import ALGOS, ModelSet, soft_update
from .objective import (TrainingFault, actor_objective, bound_terms, critic_loss,
                        dual_alpha_loss, entropy_temperature_loss, sac_actor_objective)
from .replay import NotReady, ReplayBuffer, Transition
from .rng import RunStreams

METRIC_COLUMNS = ("step", "episode_return", "critic_loss", "actor_obj", "bound_mean",
                  "c_z_mean", "c_a_mean", "alpha", "beta_prime", "entropy")
EVAL_COLUMNS = ("step", "mean_return", "std_return", "episodes")


def fmt(x) -> str:
    """Nine significant digits; the one float format used by every CSV."""
    return f"{float(x):.9g}"


@dataclass
class TrainConfig:
    env: str = "pendulum"
    algo: str = "mtc"
    seed: int = 0
    total_steps: int = 100_000
    gamma: float = 0.99
    init_steps: int = 5000
    batch_size: int = 256
    actor_update_freq: int = 1
    target_update_freq: int = 2
    init_temperature: float = 0.1
    init_alpha: float = 1e-6
    critic_lr: float = 1e-4
    actor_lr: float = 1e-4
    alpha_lr: float = 1e-4
    temperature_lr: float = 1e-4
    tau: float = 0.01
    ip: float = -7.0
    m: float = 1e-6
    history: int = 8
    capacity: int = 1_000_000
    latent_dim: int = 30
    dynamics_output_norm: str = "layer_norm"
    regularize: bool = True
    grad_clip: float | None = None
    horizon: int = 1000
    eval_every: int = 20_000
    eval_episodes: int = 10
    log_every: int = 1

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algo {self.algo!r}; valid: {', '.join(ALGOS)}")
        if self.env not in REGISTRY:
            raise ValueError(f"unknown env {self.env!r}; valid: {', '.join(sorted(REGISTRY))}")
        if self.dynamics_output_norm not in ("layer_norm", "none"):
            raise ValueError("dynamics_output_norm must be 'layer_norm' or 'none'")
        positive = ("gamma", "batch_size", "actor_update_freq", "target_update_freq", "init_temperature",
                    "init_alpha", "critic_lr", "actor_lr", "alpha_lr", "temperature_lr", "tau",
                    "history", "capacity", "latent_dim", "horizon", "eval_every", "log_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("total_steps", "init_steps", "eval_episodes", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.gamma <= 1 or not 0 < self.tau <= 1:
            raise ValueError("gamma and tau must lie in (0, 1]")
        if not 0 <= self.m <= 1:
            raise ValueError("m must lie in [0, 1]")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when set")
        if not math.isfinite(self.ip):
            raise ValueError("ip must be finite")

    @property
    def regularized(self) -> bool:
        return self.regularize and self.algo != "sac"

    @property
    def m_effective(self) -> float:
        """m after the algo has had its say: only ``mtc`` has an action term."""
        return self.m if self.algo == "mtc" else 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: coerce(names[k], v) for k, v in d.items()})


def coerce(f: dataclasses.Field, v):
    """Parse a string config value into the field's type; non-strings pass through."""
    if not isinstance(v, str):
        return v
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if "None" in kind and v.lower() in ("none", ""):
        return None
    if kind.startswith("bool"):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{f.name}: not a boolean: {v!r}")
    if kind.startswith("int"):
        return int(float(v)) if "e" in v.lower() else int(v)
    if kind.startswith("float"):
        return float(v)
    return v


def model_checksum(models: ModelSet) -> str:
    h = hashlib.sha256()
    for name, p in models.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
    return h.hexdigest()


class Trainer:
    """Owns the models, optimizers, replay buffer, environment and RNG streams of one run."""

    def __init__(self, config: TrainConfig, out_dir: str | Path | None = None):
        self.config = c = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.streams = RunStreams(c.seed)
        self.env = make_env(c.env, seed=c.seed, horizon=c.horizon)
        spec = self.env.spec
        self.models = ModelSet(spec.obs_dim, spec.action_dim, self.streams["init"], algo=c.algo,
                               latent_dim=c.latent_dim, dynamics_output_norm=c.dynamics_output_norm,
                               init_alpha=c.init_alpha, init_temperature=c.init_temperature)
        self.target_entropy = -float(spec.action_dim)
        self.buffer = ReplayBuffer(c.capacity, spec.obs_dim, spec.action_dim)
        mdl = self.models
        self.critic_opt = ad.AdamState(mdl.critic_parameters(), lr=c.critic_lr)
        self.actor_opt = ad.AdamState(self._actor_params(), lr=c.actor_lr)
        self.alpha_opt = ad.AdamState([mdl.log_alpha], lr=c.alpha_lr)
        self.temperature_opt = ad.AdamState([mdl.log_beta_prime], lr=c.temperature_lr)
        self.step = 0
        self.updates = 0
        self.obs = self.env.reset()
        self.episode_return = 0.0
        self.last_return = float("nan")

    def _actor_params(self):
        mdl, c = self.models, self.config
        if not c.regularized:
            return mdl.policy.parameters()
        params = mdl.policy.parameters() + mdl.encoder.parameters() + mdl.dynamics.parameters()
        if mdl.action_predictor is not None and c.m_effective > 0:
            params += mdl.action_predictor.parameters()
        return params

    # -- collection -------------------------------------------------------------------
    def collect(self) -> None:
        c = self.config
        rng = self.streams["policy"]
        if self.step < c.init_steps:
            a = rng.uniform(-1.0, 1.0, self.env.spec.action_dim)
        else:
            with ad.no_grad():
                a, _ = self.models.policy.act(self.obs[None, :], rng.standard_normal((1, self.env.spec.action_dim)))
            a = np.clip(a.values[0], -1.0, 1.0)
        obs_next, r, d, info = self.env.step(a)
        self.buffer.push(Transition(self.obs, a, r, obs_next, float(d), info["truncated"]))
        self.episode_return += r
        if d or info["truncated"]:
            self.last_return = self.episode_return
            self.episode_return = 0.0
            self.obs = self.env.reset()
        else:
            self.obs = obs_next
        self.step += 1

    # -- one gradient update ------------------------------------------------------------
    def update(self, window) -> dict:
        """Critic, actor (+encoder and predictors), temperature, dual and target updates on one batch."""
        c, mdl = self.config, self.models
        pol = self.streams["policy"]
        B, da = window.batch, window.actions.shape[2]
        eps_critic = pol.standard_normal((B, da))
        eps_actor = pol.standard_normal((B, da))
        eps_current = pol.standard_normal((B, da))
        m = c.m_effective
        diag = {"critic_loss": math.nan, "actor_obj": math.nan, "bound_mean": math.nan,
                "c_z_mean": math.nan, "c_a_mean": math.nan}

        terms = None
        bonus = None
        if c.regularized:
            terms = bound_terms(window, mdl, self.streams["encoder"], grad_last_only=True)
            mixed = terms.mixed_steps(m)
            bonus = mixed[-1]
            cz, ca = terms.numpy()
            diag.update(bound_mean=float(mixed.mean()), c_z_mean=float(cz.mean()), c_a_mean=float(ca.mean()))
            if not np.all(np.isfinite(mixed)):
                raise TrainingFault("non-finite bound terms")

        loss, _ = critic_loss(window, mdl, gamma=c.gamma, bonus=bonus, next_eps=eps_critic)
        self._apply(loss, self.critic_opt)
        diag["critic_loss"] = float(loss.values)

        entropy = math.nan
        if self.updates % c.actor_update_freq == 0:
            if c.algo == "sac":
                obj = sac_actor_objective(window, mdl, gamma=c.gamma, next_eps=eps_actor, eps=eps_current)
                with ad.no_grad():
                    _, logp = mdl.policy.act(window.states[:, -1], eps_actor)
                logp_next = logp.values
            else:
                obj, info = actor_objective(window, mdl, gamma=c.gamma, m=m, terms=terms, next_eps=eps_actor,
                                            eps=eps_current)
                logp_next = info["logp_next"]
            self._apply(ad.neg(obj), self.actor_opt)
            diag["actor_obj"] = float(obj.values)
            entropy = float(-np.mean(logp_next))
            self._apply(entropy_temperature_loss(logp_next, mdl.log_beta_prime, self.target_entropy),
                        self.temperature_opt)
        if c.regularized:
            self._apply(dual_alpha_loss(diag["bound_mean"], c.ip, mdl.log_alpha), self.alpha_opt)
        if self.updates % c.target_update_freq == 0:
            soft_update(mdl.q1, mdl.q1_target, c.tau)
            soft_update(mdl.q2, mdl.q2_target, c.tau)
        self.updates += 1
        diag.update(alpha=mdl.alpha if c.regularized else 0.0, beta_prime=mdl.beta_prime, entropy=entropy)
        return diag

    def _apply(self, loss, opt) -> None:
        if not np.isfinite(loss.values).all():
            raise TrainingFault("non-finite loss")
        for p in opt.params:
            p.grad = None
        ad.backward(loss)
        ad.adam_apply(opt, grad_clip=self.config.grad_clip)

    def train_step(self) -> dict:
        """Collect one transition, then update once if past the initial steps."""
        self.collect()
        c = self.config
        diag = {k: math.nan for k in METRIC_COLUMNS}
        diag.update(alpha=self.models.alpha if c.regularized else 0.0, beta_prime=self.models.beta_prime)
        if self.step > c.init_steps:
            try:
                window = self.buffer.sample_windows(c.batch_size, c.history, self.streams["replay"])
            except NotReady:
                window = None
            if window is not None:
                try:
                    diag.update(self.update(window))
                except (TrainingFault, ad.DomainError, FloatingPointError) as exc:
                    self._dump_fault(window, exc)
                    raise TrainingFault(str(exc)) from exc
        diag["step"] = self.step
        diag["episode_return"] = self.last_return
        return diag

    def _dump_fault(self, window, exc) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        np.savez(self.out_dir / "fault_window.npz", states=window.states, actions=window.actions,
                 rewards=window.rewards, dones=window.dones, starts=window.starts)
        (self.out_dir / "fault.txt").write_text(
            f"step={self.step}\nerror={exc}\nmodel_sha256={model_checksum(self.models)}\n")

    # -- persistence ----------------------------------------------------------------------
    def _optimizer_arrays(self) -> dict:
        out = {}
        for tag, opt in self._optimizers().items():
            out[f"opt/{tag}/t"] = np.array(float(opt.step))
            for i, (mv, vv) in enumerate(zip(opt.m, opt.v)):
                out[f"opt/{tag}/m/{i}"] = mv
                out[f"opt/{tag}/v/{i}"] = vv
        return out

    def _optimizers(self) -> dict:
        return {"critic": self.critic_opt, "actor": self.actor_opt, "alpha": self.alpha_opt,
                "temperature": self.temperature_opt}

    def save(self, path) -> None:
        arrays = {f"model/{k}": v for k, v in self.models.state_dict().items()}
        arrays.update(self._optimizer_arrays())
        env = self.env.unwrapped
        resume = {
            "step": self.step, "updates": self.updates, "episode_return": self.episode_return,
            "last_return": self.last_return, "obs": self.obs.tolist(),
            "env_state": [float(x) for x in env.state], "env_t": env.t,
            "env_rng": env.rng.bit_generator.state, "env_reference": getattr(env, "reference", None),
            "streams": self.streams.get_state(), "config": self.config.to_dict(),
        }
        ckpt.save(path, arrays, manifest={**self.models.manifest(), "resume": resume})
        live = len(self.buffer)
        buf = self.buffer.state_dict()
        ckpt.save(str(path) + ".replay", {
            **{k: np.asarray(buf[k][:live] if np.ndim(buf[k]) else buf[k], dtype=np.float64) for k in buf},
        })

    def load(self, path) -> None:
        arrays, manifest = ckpt.load(path)
        ckpt.check_manifest(manifest, self.models.manifest())
        self.models.load_state_dict({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
        for tag, opt in self._optimizers().items():
            opt.step = int(arrays[f"opt/{tag}/t"])
            for i in range(len(opt.m)):
                opt.m[i][...] = arrays[f"opt/{tag}/m/{i}"]
                opt.v[i][...] = arrays[f"opt/{tag}/v/{i}"]
        r = manifest["resume"]
        self.step, self.updates = r["step"], r["updates"]
        self.episode_return, self.last_return = r["episode_return"], r["last_return"]
        self.obs = np.asarray(r["obs"], dtype=np.float64)
        env = self.env.unwrapped
        env.state, env.t = tuple(r["env_state"]), r["env_t"]
        env.rng.bit_generator.state = r["env_rng"]
        if r["env_reference"] is not None:
            env.reference = r["env_reference"]
        self.streams.set_state(r["streams"])
        replay_path = Path(str(path) + ".replay")
        if replay_path.exists():
            buf, _ = ckpt.load(replay_path)
            self._restore_buffer(buf)

    def _restore_buffer(self, buf: dict) -> None:
        b = self.buffer
        total = int(buf["total"])
        live = buf["obs"].shape[0]
        # live entries were saved in slot order; slot i holds global index with i == g % capacity
        for k in ("obs", "next_obs", "actions", "rewards", "dones", "ends", "episode"):
            dst = getattr(b, k)
            dst[:live] = buf[k].astype(dst.dtype)
        b.total = total
        b.current_episode = int(buf["current_episode"])


def checkpoint_config(path) -> dict:
    _, manifest = ckpt.load(path)
    return (manifest or {}).get("resume", {}).get("config", {})


@dataclass
class RunResult:
    out_dir: Path
    final_checkpoint: Path
    eval_rows: list = field(default_factory=list)


def run(config: TrainConfig, out_dir, resume: str | Path | None = None, progress=None) -> RunResult:
    """Train for ``config.total_steps`` writing metrics.csv, eval.csv and checkpoints under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config, out)
    metrics_path, eval_path = out / "metrics.csv", out / "eval.csv"
    if resume is not None:
        trainer.load(resume)
        _truncate_csv(metrics_path, trainer.step)
        _truncate_csv(eval_path, trainer.step)
    else:
        metrics_path.write_text(",".join(METRIC_COLUMNS) + "\n")
        eval_path.write_text(",".join(EVAL_COLUMNS) + "\n")
    eval_rows = []
    final = out / "final.ckpt"
    with open(metrics_path, "a") as mf:
        while trainer.step < config.total_steps:
            diag = trainer.train_step()
            if trainer.step % config.log_every == 0 or trainer.step == config.total_steps:
                mf.write(",".join([str(trainer.step)] + [fmt(diag[k]) for k in METRIC_COLUMNS[1:]]) + "\n")
            if trainer.step % config.eval_every == 0 or trainer.step == config.total_steps:
                result = evaluate_policy(trainer.models, config.env, config.eval_episodes,
                                         seed=config.seed, horizon=config.horizon)
                row = (trainer.step, float(np.mean(result.returns)) if result.returns.size else math.nan,
                       float(np.std(result.returns)) if result.returns.size else math.nan, result.returns.size)
                eval_rows.append(row)
                with open(eval_path, "a") as ef:
                    ef.write(f"{row[0]},{fmt(row[1])},{fmt(row[2])},{row[3]}\n")
                mf.flush()
                trainer.save(out / f"step_{trainer.step}.ckpt")
                if progress is not None:
                    progress(row)
    trainer.save(final)
    if config.eval_episodes:
        result = evaluate_policy(trainer.models, config.env, config.eval_episodes,
                                 seed=config.seed, horizon=config.horizon)
        write_trajectories(out / "trajectories.bin", result.trajectories)
    return RunResult(out, final, eval_rows)


def _truncate_csv(path: Path, step: int) -> None:
    """Drop rows past ``step`` so a resumed run appends a monotone continuation."""
    if not path.exists():
        raise FileNotFoundError(f"cannot resume: {path} is missing")
    lines = path.read_text().splitlines(keepends=True)
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
    path.write_text("".join(keep))

