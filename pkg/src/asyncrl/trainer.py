"""Staleness-corrected optimization over prefetched training batches.

The pipeline per optimizer cycle:

  1. values are recomputed for every sampled trajectory under the newest
     critic (stale behavior-time values are never used when revalue is on),
  2. advantages come from the lambda-weighted recursion over the fresh
     value deltas, with the terminal bootstrap zeroed on done episodes,
  3. advantages are normalized with pooled global statistics assembled
     from per-shard sums (a simulated all-reduce across K logical shards),
  4. the policy surrogate weights each token's importance ratio by a
     Gaussian trust weight in log-ratio space (stop-gradient through the
     weight), or clips it in the baseline arm,
  5. one Adam step on policy and value head, then the new weights are
     published to the inference service.

Everything here is hand-derived numpy; gradients are audited against
central differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Generator

import numpy as np

from .buffers import ReplayBuffer, TrainBatch
from .inference import OBS_MODEL, POLICY, REWARD_MODEL, VersionedWeights
from .models import ModelBundle, state_values_batch
from .numerics import (
    AdamState,
    Array,
    DomainError,
    adam_step,
    log_softmax,
    mlp_backward,
    mlp_forward,
    softmax,
)
from .runtime import CLOSED, TIMEOUT, Channel, Get, Sleep


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise DomainError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise DomainError(f"lam must be in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class LossConfig:
    algorithm: str = "trust"     # "trust" | "clip"
    sigma: float = 0.3           # trust-weight width in log-ratio space
    clip_eps: float = 0.2
    lambda_v: float = 0.5
    lambda_h: float = 0.01

    def __post_init__(self) -> None:
        if self.algorithm not in ("trust", "clip"):
            raise DomainError(f"unknown algorithm {self.algorithm!r}")
        if self.sigma <= 0:
            raise DomainError(f"sigma must be > 0, got {self.sigma}")
        if not 0.0 < self.clip_eps < 1.0:
            raise DomainError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.lambda_v < 0 or self.lambda_h < 0:
            raise DomainError("loss coefficients must be >= 0")


# --------------------------------------------------------------------------
# Advantage estimation.


def compute_gae(rewards: Array, values: Array, done: bool, cfg: GaeConfig) -> tuple[Array, Array]:
    """Backward-recursion advantages and value targets.

    values has length T+1 (bootstrap last); a done episode's bootstrap is
    treated as zero regardless of the stored estimate.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64).copy()
    t_len = r.shape[0]
    if v.shape != (t_len + 1,):
        raise DomainError(f"values must have length T+1={t_len + 1}, got {v.shape}")
    if t_len == 0:
        raise DomainError("empty trajectory")
    if done:
        v[-1] = 0.0
    deltas = r + cfg.gamma * v[1:] - v[:-1]
    adv = np.empty_like(deltas)
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        acc = deltas[t] + cfg.gamma * cfg.lam * acc
        adv[t] = acc
    targets = adv + v[:-1]
    return adv, targets


# --------------------------------------------------------------------------
# Global advantage normalization from per-shard sums.


@dataclass(frozen=True)
class ShardStats:
    """Per-shard (sum, sum-of-squares, count); the all-reduce payload."""

    s: Array
    q: Array
    n: Array

    def __post_init__(self) -> None:
        s, q, n = (np.asarray(a, dtype=np.float64) for a in (self.s, self.q, self.n))
        if not (s.shape == q.shape == n.shape):
            raise DomainError("shard stat arrays must share one shape")
        # Cauchy-Schwarz per shard: N_k * Q_k >= S_k^2 (tolerating roundoff)
        if np.any(n * q - s * s < -1e-9):
            raise DomainError("inconsistent shard stats: N*Q < S^2")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "n", n)


def shard_statistics(shards: list[Array]) -> ShardStats:
    s = np.array([float(np.sum(a)) for a in shards])
    q = np.array([float(np.sum(np.square(a))) for a in shards])
    n = np.array([float(np.size(a)) for a in shards])
    return ShardStats(s, q, n)


def global_normalize(shards: list[Array], eps: float = 1e-8) -> tuple[list[Array], dict]:
    """Normalize every shard by pooled mean/std computed from shard sums.

    The result is invariant to how the same multiset of advantages is
    partitioned into shards (up to float addition order).
    """
    stats = shard_statistics(shards)
    n_total = float(np.sum(stats.n))
    if n_total == 0:
        raise DomainError("cannot normalize zero advantages")
    mean = float(np.sum(stats.s)) / n_total
    var = float(np.sum(stats.q)) / n_total - mean * mean
    if var < -1e-12:
        raise DomainError(f"negative pooled variance {var}")
    var = max(var, 0.0)
    denom = np.sqrt(var) + eps
    normalized = [(np.asarray(a, dtype=np.float64) - mean) / denom for a in shards]
    summary = {
        "mean": mean,
        "std": float(np.sqrt(var)),
        "n": int(n_total),
        "shard_sizes": tuple(int(k) for k in stats.n),
    }
    return normalized, summary


# --------------------------------------------------------------------------
# Surrogate objectives.


def trust_weight(ratio: Array | float, sigma: float) -> Array | float:
    """Gaussian trust weight in log-ratio space: exp(-log(r)^2 / (2 sigma^2)).

    Equals 1 at ratio 1, decays symmetrically in log space; the caller
    treats the result as a constant (stop-gradient).
    """
    r = np.asarray(ratio, dtype=np.float64)
    if np.any(r <= 0) or not np.all(np.isfinite(r)):
        raise DomainError("trust weight needs finite ratios > 0")
    w = np.exp(-0.5 * np.square(np.log(r) / sigma))
    return float(w) if np.isscalar(ratio) else w


def chunk_ratio(logp_new: Array, logp_old: Array) -> Array:
    """Joint chunk ratio: product of per-token ratios, composed in log space."""
    return np.exp(np.sum(logp_new - logp_old, axis=-1))


def policy_surrogate(
    logp_new: Array,
    logp_old: Array,
    advantages: Array,
    cfg: LossConfig,
    trust_weights: Array | None = None,
) -> tuple[float, Array, dict]:
    """Token-level surrogate loss and its gradient w.r.t. logp_new.

    logp_new/logp_old: (N, K) chosen-token log-probs; advantages: (N,)
    broadcast to every token of the chunk.  Non-finite or non-positive
    ratios exclude the token (counted in diagnostics); a batch with every
    token excluded is signalled via diagnostics["dropped"].

    trust_weights overrides the internally computed stop-gradient weights;
    the finite-difference audit uses this to pin them at the base point.
    """
    lp_new = np.asarray(logp_new, dtype=np.float64)
    lp_old = np.asarray(logp_old, dtype=np.float64)
    adv = np.broadcast_to(np.asarray(advantages, dtype=np.float64)[:, None], lp_new.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        ratios = np.exp(lp_new - lp_old)
    included = np.isfinite(ratios) & (ratios > 0)
    n_excluded = int(included.size - included.sum())
    diag: dict[str, Any] = {"excluded_tokens": n_excluded, "dropped": False}
    if not included.any():
        diag["dropped"] = True
        return 0.0, np.zeros_like(lp_new), diag
    m = float(included.sum())
    r = np.where(included, ratios, 1.0)
    a = np.where(included, adv, 0.0)
    dlogp = np.zeros_like(lp_new)
    if cfg.algorithm == "trust":
        if trust_weights is None:
            w = np.where(included, trust_weight(r, cfg.sigma), 0.0)
        else:
            w = np.where(included, trust_weights, 0.0)
        per_token = w * r * a
        loss = -float(per_token[included].sum()) / m
        dlogp = -(w * r * a) / m          # d(-w r A)/dlogp = -w A dr/dlogp = -w r A
        dlogp[~included] = 0.0
        diag["trust_weight_mean"] = float(w[included].mean())
        diag["trust_weight_min"] = float(w[included].min())
    else:
        lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
        clipped_r = np.clip(r, lo, hi)
        surr = np.minimum(r * a, clipped_r * a)
        loss = -float(surr[included].sum()) / m
        # gradient flows only where the unclipped branch attains the min
        active = r * a <= clipped_r * a
        dlogp = np.where(active, -(r * a) / m, 0.0)
        dlogp[~included] = 0.0
        outside = (r < lo) | (r > hi)
        diag["clipped_fraction"] = float(outside[included].mean())
    diag["ratio_mean"] = float(r[included].mean())
    diag["ratio_max"] = float(r[included].max())
    return loss, dlogp, diag


def entropy_bonus(logits: Array) -> tuple[float, Array]:
    """Mean per-token entropy of the current policy and its logits gradient."""
    lp = log_softmax(logits, axis=-1)
    p = np.exp(lp)
    h_tok = -np.sum(p * lp, axis=-1)
    n_tokens = float(h_tok.size)
    h_mean = float(h_tok.sum()) / n_tokens
    # dH/dz_i = -p_i (log p_i + H) per token
    dlogits = -p * (lp + h_tok[..., None]) / n_tokens
    return h_mean, dlogits


def total_loss(policy_term: float, value_term: float, entropy: float, cfg: LossConfig) -> float:
    """L = L_policy + lambda_v * L_value - lambda_h * entropy."""
    return policy_term + cfg.lambda_v * value_term - cfg.lambda_h * entropy


# --------------------------------------------------------------------------
# Trainer.


@dataclass(frozen=True)
class TrainerConfig:
    gae: GaeConfig = GaeConfig()
    loss: LossConfig = LossConfig()
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    k_shards: int = 4
    eps_norm: float = 1e-8
    revalue: bool = True
    world_model: bool = False
    t_obs: int = 4               # optimizer cycles per observation-model update
    t_reward: int = 8            # optimizer cycles per reward-model update
    wm_batch_episodes: int = 8
    wm_max_transitions: int = 512
    reward_neg_ratio: int = 4    # negative frames kept per positive
    poll_interval: float = 0.002
    train_service_time: float = 0.0

    def __post_init__(self) -> None:
        if self.k_shards < 1:
            raise DomainError("k_shards must be >= 1")
        if self.t_obs < 1 or self.t_reward < 1:
            raise DomainError("world-model schedules must be >= 1")


def behavior_log_probs(behavior_logits: Array, tokens: Array) -> Array:
    """(T, K) chosen-token log-probs from stored (T, K, A) behavior logits."""
    lp = log_softmax(behavior_logits, axis=-1)
    t = np.asarray(tokens, dtype=np.int64)
    return np.take_along_axis(lp, t[..., None], axis=-1)[..., 0]


class Trainer:
    """Owns the live models; consumes TrainBatches; publishes weights."""

    def __init__(
        self,
        bundle: ModelBundle,
        cfg: TrainerConfig,
        service: Any = None,
        metrics: Any | None = None,
        seed: int = 0,
    ) -> None:
        self.bundle = bundle
        self.cfg = cfg
        self.service = service
        self.metrics = metrics
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        self.adam_policy = AdamState.init(bundle.policy.params, lr=cfg.lr,
                                          beta1=cfg.beta1, beta2=cfg.beta2)
        self.adam_value = AdamState.init(bundle.value.params, lr=cfg.lr,
                                         beta1=cfg.beta1, beta2=cfg.beta2)
        self.adam_obs = AdamState.init(bundle.obs_model.params, lr=cfg.lr,
                                       beta1=cfg.beta1, beta2=cfg.beta2)
        self.adam_reward = AdamState.init(bundle.reward_model.params, lr=cfg.lr,
                                          beta1=cfg.beta1, beta2=cfg.beta2)
        self.publish_version = 0
        self.cycles = 0
        self.skipped = 0
        self.obs_updates = 0
        self.reward_updates = 0

    # -- publication -----------------------------------------------------------

    def publish_policy(self) -> None:
        if self.service is None:
            return
        snapshot = self.bundle.clone()
        self.service.update_weights(
            VersionedWeights.from_bundle(POLICY, self.publish_version, snapshot)
        )

    def publish_world_model(self, kind: str) -> None:
        if self.service is None or kind not in self.service.configs:
            return
        snapshot = self.bundle.clone()
        version = (snapshot.obs_model.params.version if kind == OBS_MODEL
                   else snapshot.reward_model.params.version)
        self.service.update_weights(VersionedWeights.from_bundle(kind, version, snapshot))

    def publish_initial(self) -> None:
        self.publish_policy()
        if self.cfg.world_model:
            self.publish_world_model(OBS_MODEL)
            self.publish_world_model(REWARD_MODEL)

    # -- batch construction (called by the prefetcher) ----------------------------

    def recompute_values(self, traj: Any) -> Array:
        """V(o_t) for all T+1 frames under the current critic."""
        assert self.publish_version >= traj.behavior_version
        return state_values_batch(self.bundle.policy, self.bundle.value,
                                  traj.observations, traj.steps)

    def build_train_batch(self, trajs: list[Any]) -> TrainBatch | None:
        """Recompute, estimate advantages, normalize globally, tensorize."""
        cfg = self.cfg
        critic_version = self.publish_version
        all_obs, all_steps, all_tokens, all_logp = [], [], [], []
        all_adv, all_targets, lags = [], [], []
        n_real = n_imagined = 0
        for traj in trajs:
            if cfg.revalue:
                values = self.recompute_values(traj)
            else:
                values = np.append(traj.values, traj.bootstrap_value)
            adv, targets = compute_gae(traj.rewards, values, traj.done, cfg.gae)
            all_obs.append(traj.observations[:-1])
            all_steps.append(traj.steps[:-1])
            all_tokens.append(traj.tokens)
            all_logp.append(behavior_log_probs(traj.behavior_logits, traj.tokens))
            all_adv.append(adv)
            all_targets.append(targets)
            lags.append(critic_version - traj.behavior_version)
            if traj.source == "real":
                n_real += 1
            else:
                n_imagined += 1
        flat_adv = np.concatenate(all_adv)
        shards = np.array_split(flat_adv, cfg.k_shards)
        normalized, summary = global_normalize(shards, cfg.eps_norm)
        batch = TrainBatch(
            obs=np.concatenate(all_obs),
            steps=np.concatenate(all_steps).astype(np.int64),
            tokens=np.concatenate(all_tokens).astype(np.int64),
            behavior_logp=np.concatenate(all_logp),
            advantages=np.concatenate(normalized),
            value_targets=np.concatenate(all_targets),
            critic_version=critic_version,
            n_real=n_real,
            n_imagined=n_imagined,
            norm_mean=summary["mean"],
            norm_std=summary["std"],
            norm_count=summary["n"],
            shard_sizes=summary["shard_sizes"],
            behavior_lag_mean=float(np.mean(lags)),
        )
        if not batch.check_finite():
            return None
        return batch

    # -- optimization -------------------------------------------------------------

    def train_step(self, batch: TrainBatch) -> dict | None:
        """One policy + value update from a frozen TrainBatch; publishes.

        Returns the step's metrics, or None when the batch was skipped
        (every token excluded).
        """
        cfg = self.cfg
        policy, value = self.bundle.policy, self.bundle.value
        logits, cache = policy.forward_teacher(batch.obs, batch.tokens)
        logp_new = policy.log_prob_chunk(logits, batch.tokens)
        l_pi, dlogp, diag = policy_surrogate(
            logp_new, batch.behavior_logp, batch.advantages, cfg.loss
        )
        if diag["dropped"]:
            self.skipped += 1
            if self.metrics is not None:
                self.metrics.emit("train_skip", skipped=self.skipped)
            return None
        h_mean, dlogits_ent = entropy_bonus(logits)
        # chosen-token logp backward through the softmax:
        # d(coef * logp[a]) / dz_i = coef * (1[i == a] - p_i)
        p = softmax(logits, axis=-1)
        dlogits = -dlogp[..., None] * p
        np.add.at(
            dlogits.reshape(-1, dlogits.shape[-1]),
            (np.arange(dlogp.size), batch.tokens.ravel()),
            dlogp.ravel(),
        )
        dlogits -= cfg.loss.lambda_h * dlogits_ent
        policy_grads = policy.backward_teacher(cache, dlogits)

        hiddens = np.stack([cache["h1"], cache["h2"]], axis=1)  # detached
        values, vcache = value.forward_batch(hiddens, batch.steps)
        err = values - batch.value_targets
        l_v = float(np.mean(err**2))
        dvalues = cfg.loss.lambda_v * 2.0 * err / err.size
        value_grads = value.backward_batch(vcache, dvalues)

        loss = total_loss(l_pi, l_v, h_mean, cfg.loss)
        policy.params, self.adam_policy = adam_step(policy.params, policy_grads,
                                                    self.adam_policy)
        value.params, self.adam_value = adam_step(value.params, value_grads,
                                                  self.adam_value)
        self.cycles += 1
        self.publish_version += 1
        self.publish_policy()
        record = {
            "loss": loss,
            "policy_loss": l_pi,
            "value_loss": l_v,
            "entropy": h_mean,
            "version": self.publish_version,
            "critic_version": batch.critic_version,
            "behavior_lag": batch.behavior_lag_mean,
            "n_real": batch.n_real,
            "n_imagined": batch.n_imagined,
            **{k: v for k, v in diag.items() if k != "dropped"},
        }
        if self.metrics is not None:
            self.metrics.emit("train_step", **record)
        return record

    def train_obs_model_step(self, trajs: list[Any]) -> float:
        """MSE regression on (o_t, a_t) -> o_{t+1} transitions."""
        xs, ys = [], []
        for traj in trajs:
            for t in range(traj.tokens.shape[0]):
                xs.append(self.bundle.obs_model.encode_input(
                    traj.observations[t], traj.tokens[t]))
                ys.append(traj.observations[t + 1])
        if not xs:
            raise DomainError("no transitions to fit")
        x = np.stack(xs)
        y = np.stack(ys)
        if x.shape[0] > self.cfg.wm_max_transitions:
            idx = self.rng.choice(x.shape[0], size=self.cfg.wm_max_transitions, replace=False)
            x, y = x[idx], y[idx]
        params = self.bundle.obs_model.params
        pred, hiddens = mlp_forward(params, x)
        err = pred - y
        loss = float(np.mean(err**2))
        grad_out = 2.0 * err / err.size
        grads, _ = mlp_backward(params, x, hiddens, grad_out)
        self.bundle.obs_model.params, self.adam_obs = adam_step(params, grads, self.adam_obs)
        self.obs_updates += 1
        self.publish_world_model(OBS_MODEL)
        if self.metrics is not None:
            self.metrics.emit("obs_model_step", loss=loss, updates=self.obs_updates)
        return loss

    def train_reward_model_step(self, trajs: list[Any]) -> float:
        """Binary cross-entropy on frames; positives are terminal frames of
        successful episodes, negatives subsampled to a bounded ratio."""
        pos, neg = [], []
        for traj in trajs:
            succeeded = bool(np.sum(traj.rewards) > 0)
            frames = traj.observations
            for i in range(frames.shape[0]):
                terminal = i == frames.shape[0] - 1
                if succeeded and terminal:
                    pos.append(frames[i])
                else:
                    neg.append(frames[i])
        # bound the negative mass; with no positives yet keep a plain sample
        max_neg = (len(pos) * self.cfg.reward_neg_ratio if pos
                   else self.cfg.wm_max_transitions)
        if len(neg) > max_neg:
            idx = self.rng.choice(len(neg), size=max_neg, replace=False)
            neg = [neg[i] for i in idx]
        single_class = not pos or not neg
        frames = pos + neg
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        x = np.stack(frames)
        params = self.bundle.reward_model.params
        logits, hiddens = mlp_forward(params, x)
        z = logits[:, 0]
        # stable BCE from logits: softplus(z) - y*z
        loss = float(np.mean(np.logaddexp(0.0, z) - labels * z))
        probs = 1.0 / (1.0 + np.exp(-z))
        grad_out = ((probs - labels) / labels.size)[:, None]
        grads, _ = mlp_backward(params, x, hiddens, grad_out)
        self.bundle.reward_model.params, self.adam_reward = adam_step(
            params, grads, self.adam_reward)
        self.reward_updates += 1
        self.publish_world_model(REWARD_MODEL)
        if self.metrics is not None:
            self.metrics.emit("reward_model_step", loss=loss, updates=self.reward_updates,
                              single_class=single_class)
        return loss

    # -- loop -----------------------------------------------------------------------

    def run(self, cache: Channel, wm_buffer: ReplayBuffer | None, stop: Any) -> Generator:
        """Consume TrainBatches until stopped; interleave world-model updates
        every t_obs / t_reward optimizer cycles."""
        cfg = self.cfg
        while not stop.is_set:
            item = yield Get(cache, timeout=cfg.poll_interval)
            if item is CLOSED:
                return
            if item is TIMEOUT:
                continue
            if cfg.train_service_time > 0:
                yield Sleep(cfg.train_service_time)
            record = self.train_step(item)
            if record is not None and cfg.world_model and wm_buffer is not None:
                if self.cycles % cfg.t_obs == 0:
                    trajs = wm_buffer.sample(cfg.wm_batch_episodes, self.rng)
                    if trajs:
                        self.train_obs_model_step(trajs)
                if self.cycles % cfg.t_reward == 0:
                    trajs = wm_buffer.sample(cfg.wm_batch_episodes, self.rng)
                    if trajs:
                        self.train_reward_model_step(trajs)
