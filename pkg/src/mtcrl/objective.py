"""Loss surfaces for MTC-SAC: total-correlation bound terms, critic, actor, dual and temperature losses.

Windows are processed step-major: a (batch, steps, dim) array is flattened so
rows ``[k*B:(k+1)*B]`` hold step ``k`` for every window in the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .models import DiagGaussian, ModelSet, SquashedGaussian


class TrainingFault(FloatingPointError):
    """A non-finite quantity appeared during an update."""


def step_major(x: np.ndarray) -> np.ndarray:
    """(B, K, d) -> (K*B, d); (B, K) -> (K*B,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x.T.reshape(-1)
    return x.transpose(1, 0, 2).reshape(-1, x.shape[2])


@dataclass
class BoundTerms:
    """Per-step log-ratio contributions, flattened step-major (``steps * batch`` entries).

    ``c_z[t] = log q_eta(z_{t+1}|z_{1:t},a_{1:t}) - log f(z_{t+1}|s_{t+1})``
    ``c_a[t] = log q_chi(a_t|z_{1:t},a_{1:t-1}) - log pi(a_t|s_t)``
    """

    c_z: Tensor
    c_a: Tensor
    steps: int
    batch: int

    def step(self, t: int) -> tuple[Tensor, Tensor]:
        """Terms of step ``t`` (0-based; ``-1`` is the last step) for every window."""
        t = t % self.steps
        lo, hi = t * self.batch, (t + 1) * self.batch
        return ad.rows(self.c_z, lo, hi), ad.rows(self.c_a, lo, hi)

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        shape = (self.steps, self.batch)
        return self.c_z.values.reshape(shape), self.c_a.values.reshape(shape)

    def mixed_steps(self, m: float) -> np.ndarray:
        """(1-m) c_z + m c_a per step and window, as a (steps, batch) array."""
        _check_m(m)
        cz, ca = self.numpy()
        return (1.0 - m) * cz + m * ca


def _check_m(m: float) -> None:
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"mixing coefficient m must lie in [0, 1], got {m}")


def assemble_bound_terms(log_q_next, log_f_next, log_q_act, log_pi_act, steps: int) -> BoundTerms:
    """Combine per-step log-densities (step-major, equal length) into :class:`BoundTerms`.

    Pass ``None`` for both action densities when there is no action model
    (the action terms are then identically zero).
    """
    log_q_next, log_f_next = ad._as_tensor(log_q_next), ad._as_tensor(log_f_next)
    n = log_q_next.shape[0]
    if log_f_next.shape != (n,) or n % steps:
        raise ContractError("bound terms need matching step-major log-densities")
    c_z = ad.sub(log_q_next, log_f_next)
    if log_q_act is None:
        c_a = Tensor(np.zeros(n), _check=False)
    else:
        c_a = ad.sub(ad._as_tensor(log_q_act), ad._as_tensor(log_pi_act))
    return BoundTerms(c_z, c_a, steps, n // steps)


def _window_arrays(window):
    states = np.asarray(window.states, dtype=np.float64)
    actions = np.asarray(window.actions, dtype=np.float64)
    if states.ndim != 3 or actions.ndim != 3:
        raise ContractError("window arrays must be (batch, steps, dim)")
    if states.shape[1] < 2:
        raise ContractError("a window needs at least 2 states")
    if actions.shape[1] != states.shape[1] - 1:
        raise ContractError("a window of H+1 states needs exactly H actions")
    return states, actions


def sample_latents(window, models: ModelSet, rng: np.random.Generator):
    """Reparameterised z for every state of the window, plus the encoder distribution."""
    states, _ = _window_arrays(window)
    batch, n_states, _ = states.shape
    flat = step_major(states)
    eps = rng.standard_normal((flat.shape[0], models.latent_dim))
    z, f = models.encoder.encode(flat, eps)
    return z, f, batch, n_states


def tc_bound_terms(window, models: ModelSet, rng: np.random.Generator,
                   grad_last_only: bool = False) -> BoundTerms:
    """History-conditioned bound terms for each of the H steps of every window.

    With ``grad_last_only`` the prediction heads of steps 1..H-1 are evaluated
    without recording gradients; the final step (the one the losses use) keeps
    its full graph.
    """
    _, actions = _window_arrays(window)
    z, f, batch, n_states = sample_latents(window, models, rng)
    steps = n_states - 1
    z_steps = [ad.rows(z, k * batch, (k + 1) * batch) for k in range(n_states)]
    a_steps = [actions[:, k] for k in range(steps)]

    dyn_in = models.dynamics.step_inputs(z_steps[:-1], a_steps)
    q_next = _history_distributions(models.dynamics, dyn_in, grad_last_only)
    z_next = ad.rows(z, batch, n_states * batch)
    log_q_next = q_next.log_prob(z_next)
    log_f_next = f.rows(batch, n_states * batch).log_prob(z_next)

    log_q_act = log_pi_act = None
    if models.action_predictor is not None:
        act_in = models.action_predictor.step_inputs(z_steps[:-1], a_steps[:-1])
        q_act = _history_distributions(models.action_predictor, act_in, grad_last_only)
        flat_actions = step_major(actions)
        log_q_act = SquashedGaussian(q_act).log_prob(flat_actions)
        log_pi_act = models.policy.distribution(step_major(window.states[:, :-1])).log_prob(flat_actions)
    return assemble_bound_terms(log_q_next, log_f_next, log_q_act, log_pi_act, steps)


def _history_distributions(model, inputs, grad_last_only: bool):
    hidden = model.unroll(inputs)
    if not grad_last_only or len(hidden) == 1:
        return model.heads(ad.concat(hidden, axis=0))
    with ad.no_grad():
        early = model.heads(ad.concat([h.detach() for h in hidden[:-1]], axis=0))
    last = model.heads(hidden[-1])
    return DiagGaussian(ad.concat([early.mean, last.mean], axis=0),
                        ad.concat([early.log_std, last.log_std], axis=0))


def rpc_bound_terms(window, models: ModelSet, rng: np.random.Generator) -> BoundTerms:
    """State-only terms from the one-step model q(z_{t+1}|z_t, a_t); action terms are zero."""
    _, actions = _window_arrays(window)
    z, f, batch, n_states = sample_latents(window, models, rng)
    z_prev = ad.rows(z, 0, (n_states - 1) * batch)
    z_next = ad.rows(z, batch, n_states * batch)
    q = models.dynamics.distribution(z_prev, step_major(actions))
    return assemble_bound_terms(q.log_prob(z_next), f.rows(batch, n_states * batch).log_prob(z_next),
                                None, None, n_states - 1)


def bound_terms(window, models: ModelSet, rng: np.random.Generator, grad_last_only: bool = False) -> BoundTerms:
    if models.algo == "rpc":
        return rpc_bound_terms(window, models, rng)
    return tc_bound_terms(window, models, rng, grad_last_only)


def mixed_bound(terms: BoundTerms, m: float) -> Tensor:
    """(1-m) * sum_t c_z + m * sum_t c_a, averaged over the windows of the batch."""
    _check_m(m)
    total = ad.add(ad.mul(ad.sum(terms.c_z), 1.0 - m), ad.mul(ad.sum(terms.c_a), m))
    return ad.mul(total, 1.0 / terms.batch)


def regularized_reward(r, c_z, c_a, alpha: float):
    """r* = r + alpha * (c_z + c_a)."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    bonus = alpha * (np.asarray(c_z, dtype=np.float64) + np.asarray(c_a, dtype=np.float64))
    if not np.all(np.isfinite(bonus)):
        raise TrainingFault("non-finite information bonus")
    return np.asarray(r, dtype=np.float64) + bonus


def final_transition(window):
    """(s_t, a_t, r_t, s_{t+1}, d_t) of the last window step."""
    dones = getattr(window, "dones", None)
    if dones is None:
        raise ContractError("window lacks done flags")
    return (window.states[:, -2], window.actions[:, -1], window.rewards[:, -1],
            window.states[:, -1], np.asarray(dones, dtype=np.float64)[:, -1])


def critic_loss(window, models: ModelSet, *, gamma: float, bonus: np.ndarray | None,
                next_eps: np.ndarray) -> tuple[Tensor, dict]:
    """Twin soft-Q regression onto y = r* + gamma (1-d) [min Q_targ(s', a') - beta log pi(a'|s')].

    ``bonus`` is the already-mixed information term of the final step (or None
    for plain SAC).  beta = beta' - alpha.  The target carries no gradient.
    """
    s, a, r, s_next, d = final_transition(window)
    alpha = models.alpha if bonus is not None else 0.0
    beta = models.beta_prime - alpha
    r_star = r if bonus is None else regularized_reward(r, bonus, 0.0, alpha)
    with ad.no_grad():
        a_next, logp_next = models.policy.act(s_next, next_eps)
        q_next = ad.minimum(models.q1_target(s_next, a_next), models.q2_target(s_next, a_next))
        y = r_star + gamma * (1.0 - d) * (q_next.values - beta * logp_next.values)
    y_t = Tensor(y, _check=False)
    q1, q2 = models.q1(s, a), models.q2(s, a)
    loss = ad.add(ad.mean(ad.square(ad.sub(q1, y_t))), ad.mean(ad.square(ad.sub(q2, y_t))))
    return loss, {"target_mean": float(y.mean()), "r_star_mean": float(np.mean(r_star))}


def actor_objective(window, models: ModelSet, *, gamma: float, m: float,
                    terms: BoundTerms | None, next_eps: np.ndarray, eps: np.ndarray) -> tuple[Tensor, dict]:
    """Per-batch mean of the quantity the actor, encoder and predictors ascend.

    -beta' log pi(a~_t|s_t) + alpha [(1-m) c_z_t + m log q_chi(a_t|...)]
    + gamma [min Q(s_{t+1}, a_{t+1}) - beta' log pi(a_{t+1}|s_{t+1})]

    with a_t from replay and both a~_t (noise ``eps``) and a_{t+1} (noise
    ``next_eps``) reparameterised from the current policy.  Scoring the replayed
    a_t under -log pi instead would reward moving the policy away from past
    actions without bound.  Critic parameters are frozen while it is built.
    ``terms=None`` gives the unregularised objective.
    """
    _check_m(m)
    s, a, _, s_next, _ = final_transition(window)
    beta_prime = models.beta_prime
    _, logp_t = models.policy.act(s, eps)
    a_next, logp_next = models.policy.act(s_next, next_eps)
    models.q1.requires_grad_(False)
    models.q2.requires_grad_(False)
    try:
        q_next = ad.minimum(models.q1(s_next, a_next), models.q2(s_next, a_next))
    finally:
        models.q1.requires_grad_(True)
        models.q2.requires_grad_(True)
    per = ad.add(ad.mul(logp_t, -beta_prime),
                 ad.mul(ad.sub(q_next, ad.mul(logp_next, beta_prime)), gamma))
    info = {"entropy": float(-logp_next.values.mean())}
    if terms is not None:
        alpha = models.alpha
        c_z, c_a = terms.step(-1)
        # c_a = log q_chi - log pi at the replayed action; adding log pi back leaves log q_chi
        act_part = ad.add(c_a, models.policy.distribution(s).log_prob(a)) if m > 0 else None
        bonus = ad.mul(c_z, 1.0 - m)
        if act_part is not None:
            bonus = ad.add(bonus, ad.mul(act_part, m))
        per = ad.add(per, ad.mul(bonus, alpha))
    return ad.mean(per), {**info, "logp_next": logp_next.values}


def sac_actor_objective(window, models: ModelSet, *, gamma: float, next_eps: np.ndarray,
                        eps: np.ndarray) -> Tensor:
    """Unregularised objective, written independently of :func:`actor_objective`.

    Used as the reference path of the SAC-reduction check.
    """
    s, _, _, s_next, _ = final_transition(window)
    temp = models.beta_prime
    _, own = models.policy.distribution(s).rsample(eps)
    nxt = models.policy.distribution(s_next)
    a1, lp1 = nxt.rsample(next_eps)
    models.q1.requires_grad_(False)
    models.q2.requires_grad_(False)
    try:
        q = ad.minimum(models.q1(s_next, a1), models.q2(s_next, a1))
    finally:
        models.q1.requires_grad_(True)
        models.q2.requires_grad_(True)
    entropy_term = ad.mul(own, -temp)
    soft_value = ad.sub(q, ad.mul(lp1, temp))
    return ad.mean(ad.add(entropy_term, ad.mul(soft_value, gamma)))


def dual_alpha_loss(bound_estimate: float, target: float, log_alpha: Tensor) -> Tensor:
    """L(alpha) = alpha * (bound_estimate - I_p), minimised over log alpha."""
    return ad.mul(ad.exp(log_alpha), float(bound_estimate) - float(target))


def entropy_temperature_loss(log_probs: np.ndarray, log_beta_prime: Tensor, target_entropy: float) -> Tensor:
    """beta' * mean(-log pi - target_entropy), minimised over log beta'."""
    gap = float(np.mean(-np.asarray(log_probs, dtype=np.float64) - target_entropy))
    return ad.mul(ad.exp(log_beta_prime), gap)


def discounted_tc(terms_z, terms_a, gamma: float) -> float:
    """sum_t gamma^t (c_z[t] + c_a[t]) with t counted from 0."""
    cz = np.asarray(terms_z, dtype=np.float64)
    ca = np.asarray(terms_a, dtype=np.float64)
    if cz.shape != ca.shape or cz.ndim != 1:
        raise ValueError("per-step terms must be equal-length vectors")
    return float(np.sum(gamma ** np.arange(cz.size) * (cz + ca)))
