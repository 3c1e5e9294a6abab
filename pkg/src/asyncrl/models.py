"""Model stand-ins: token policy, pooled value head, world-model nets.

The policy is a small dense backbone with an autoregressive token head
over an action vocabulary carved out of a larger synthetic vocabulary at
construction time (the slim head serves and trains only the action rows).
The value head attends over the backbone's hidden-layer activations,
which are always treated as detached: no value gradient ever reaches
backbone parameters.

Forward passes exist in two shapes: per-request (sequential, used by the
inference service so batching stays bitwise neutral) and teacher-forced
batch (vectorized, used by training).  Backward passes are hand-derived.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Array,
    DimensionError,
    ParamSet,
    init_mlp,
    log_softmax,
    mlp_forward,
    softmax,
)


def slim_vocabulary(full_head: Array, start: int, end: int, full_bias: Array | None = None):
    """Copy rows [start, end) of a (V, d) output head (and bias if given).

    Softmax over the slim logits is identical to softmax over the full
    logits restricted to the action rows and renormalized.
    """
    w = np.asarray(full_head, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"full head must be 2-d, got shape {w.shape}")
    v = w.shape[0]
    if not (0 <= start < end <= v):
        raise DimensionError(f"action range [{start}, {end}) invalid for vocabulary size {v}")
    w_slim = w[start:end].copy()
    if full_bias is None:
        return w_slim, np.zeros(end - start)
    b = np.asarray(full_bias, dtype=np.float64)
    if b.shape != (v,):
        raise DimensionError(f"full bias shape {b.shape} != ({v},)")
    return w_slim, b[start:end].copy()


def chunk_onehot(tokens: Array, n_actions: int) -> Array:
    """(K,) int tokens -> flat (K * n_actions,) one-hot encoding."""
    t = np.asarray(tokens, dtype=np.int64)
    out = np.zeros((t.size, n_actions), dtype=np.float64)
    out[np.arange(t.size), t] = 1.0
    return out.ravel()


# --------------------------------------------------------------------------
# Policy.


@dataclass(frozen=True)
class PolicyConfig:
    obs_dim: int
    hidden_dim: int = 64
    chunk_len: int = 4
    n_actions: int = 7
    vocab_size: int = 32
    action_start: int = 16
    init_scale: float = 0.1

    def __post_init__(self) -> None:
        if self.action_start + self.n_actions > self.vocab_size:
            raise DimensionError(
                f"action range [{self.action_start}, {self.action_start + self.n_actions}) "
                f"exceeds vocabulary size {self.vocab_size}"
            )


class PolicyModel:
    """Backbone MLP plus autoregressive token head over the slim vocabulary.

    Token k's logits condition on the observation and on token k-1 via a
    learned previous-token embedding (row n_actions embeds chunk start).
    """

    def __init__(self, cfg: PolicyConfig, params: ParamSet) -> None:
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: PolicyConfig) -> "PolicyModel":
        d, s = cfg.hidden_dim, cfg.init_scale
        backbone = init_mlp(rng, [cfg.obs_dim, d, d], scale=s)
        full_head = rng.normal(0.0, s / np.sqrt(d), size=(cfg.vocab_size, d))
        full_bias = np.zeros(cfg.vocab_size)
        w_head, b_head = slim_vocabulary(
            full_head, cfg.action_start, cfg.action_start + cfg.n_actions, full_bias
        )
        tensors = {
            "w0": backbone["w0"], "b0": backbone["b0"],
            "w1": backbone["w1"], "b1": backbone["b1"],
            "e_prev": rng.normal(0.0, s, size=(cfg.n_actions + 1, d)),
            "e_pos": rng.normal(0.0, s, size=(cfg.chunk_len, d)),
            "w_head": w_head, "b_head": b_head,
        }
        return cls(cfg, ParamSet(tensors))

    def with_params(self, params: ParamSet) -> "PolicyModel":
        return PolicyModel(self.cfg, params)

    # -- per-request paths ---------------------------------------------------

    def backbone(self, obs_vec: Array) -> list[Array]:
        """Hidden activations [h1, h2] for one observation vector."""
        p = self.params
        x = np.asarray(obs_vec, dtype=np.float64)
        if x.shape != (self.cfg.obs_dim,):
            raise DimensionError(
                f"policy backbone: expected observation shape ({self.cfg.obs_dim},), "
                f"got {x.shape}"
            )
        h1 = np.tanh(p["w0"] @ x + p["b0"])
        h2 = np.tanh(p["w1"] @ h1 + p["b1"])
        return [h1, h2]

    def token_logits(self, h2: Array, prev_token: int, k: int) -> Array:
        p = self.params
        c = h2 + p["e_prev"][prev_token] + p["e_pos"][k]
        return p["w_head"] @ c + p["b_head"]

    def sample_chunk(self, obs_vec: Array, rng: np.random.Generator) -> tuple[Array, Array]:
        """Autoregressively sample K tokens; returns (tokens, logits (K, A))."""
        cfg = self.cfg
        _, h2 = self.backbone(obs_vec)
        tokens = np.zeros(cfg.chunk_len, dtype=np.int64)
        logits = np.zeros((cfg.chunk_len, cfg.n_actions), dtype=np.float64)
        prev = cfg.n_actions  # chunk-start embedding row
        for k in range(cfg.chunk_len):
            lg = self.token_logits(h2, prev, k)
            logits[k] = lg
            probs = softmax(lg)
            token = int(np.searchsorted(np.cumsum(probs), rng.random()))
            token = min(token, cfg.n_actions - 1)
            tokens[k] = token
            prev = token
        return tokens, logits

    def greedy_chunk(self, obs_vec: Array) -> Array:
        cfg = self.cfg
        _, h2 = self.backbone(obs_vec)
        tokens = np.zeros(cfg.chunk_len, dtype=np.int64)
        prev = cfg.n_actions
        for k in range(cfg.chunk_len):
            token = int(np.argmax(self.token_logits(h2, prev, k)))
            tokens[k] = token
            prev = token
        return tokens

    # -- teacher-forced batch paths (training) --------------------------------

    def forward_teacher(self, obs_mat: Array, tokens: Array) -> tuple[Array, dict]:
        """Logits (N, K, A) for stored chunks, plus a cache for backward."""
        p, cfg = self.params, self.cfg
        x = np.asarray(obs_mat, dtype=np.float64)
        t = np.asarray(tokens, dtype=np.int64)
        n = x.shape[0]
        if x.shape != (n, cfg.obs_dim) or t.shape != (n, cfg.chunk_len):
            raise DimensionError(
                f"teacher forward: obs {x.shape} tokens {t.shape} inconsistent with "
                f"(N, {cfg.obs_dim}) / (N, {cfg.chunk_len})"
            )
        h1 = np.tanh(x @ p["w0"].T + p["b0"])
        h2 = np.tanh(h1 @ p["w1"].T + p["b1"])
        prev = np.empty_like(t)
        prev[:, 0] = cfg.n_actions
        prev[:, 1:] = t[:, :-1]
        c = h2[:, None, :] + p["e_prev"][prev] + p["e_pos"][None, :, :]
        logits = c @ p["w_head"].T + p["b_head"]
        cache = {"x": x, "h1": h1, "h2": h2, "prev": prev, "c": c}
        return logits, cache

    def backward_teacher(self, cache: dict, dlogits: Array) -> dict[str, Array]:
        """Parameter gradients of sum(dlogits * logits)."""
        p, cfg = self.params, self.cfg
        x, h1, h2, prev, c = cache["x"], cache["h1"], cache["h2"], cache["prev"], cache["c"]
        d = cfg.hidden_dim
        dw_head = np.einsum("nka,nkd->ad", dlogits, c)
        db_head = dlogits.sum(axis=(0, 1))
        dc = dlogits @ p["w_head"]
        de_prev = np.zeros_like(p["e_prev"])
        np.add.at(de_prev, prev.ravel(), dc.reshape(-1, d))
        de_pos = dc.sum(axis=0)
        dh2 = dc.sum(axis=1)
        dz2 = dh2 * (1.0 - h2 ** 2)
        dw1 = dz2.T @ h1
        db1 = dz2.sum(axis=0)
        dh1 = dz2 @ p["w1"]
        dz1 = dh1 * (1.0 - h1 ** 2)
        dw0 = dz1.T @ x
        db0 = dz1.sum(axis=0)
        return {
            "w0": dw0, "b0": db0, "w1": dw1, "b1": db1,
            "e_prev": de_prev, "e_pos": de_pos,
            "w_head": dw_head, "b_head": db_head,
        }

    def backbone_batch(self, obs_mat: Array) -> Array:
        """Stacked hidden states (N, 2, D) for the value head."""
        p = self.params
        x = np.asarray(obs_mat, dtype=np.float64)
        h1 = np.tanh(x @ p["w0"].T + p["b0"])
        h2 = np.tanh(h1 @ p["w1"].T + p["b1"])
        return np.stack([h1, h2], axis=1)

    def log_prob_chunk(self, logits: Array, tokens: Array) -> Array:
        """Per-token log-probabilities of chosen tokens; logits (..., K, A)."""
        lp = log_softmax(logits, axis=-1)
        t = np.asarray(tokens, dtype=np.int64)
        return np.take_along_axis(lp, t[..., None], axis=-1)[..., 0]


# --------------------------------------------------------------------------
# Value head: attention pooling over detached hidden states, plus a
# learned step embedding, then a small MLP to a scalar.


@dataclass(frozen=True)
class ValueConfig:
    hidden_dim: int = 64      # must match the backbone width
    n_steps: int = 41         # step-embedding rows; indices 0 .. n_steps-1
    mlp_hidden: int = 32
    init_scale: float = 0.1


class ValueHead:
    def __init__(self, cfg: ValueConfig, params: ParamSet) -> None:
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: ValueConfig) -> "ValueHead":
        d, m, s = cfg.hidden_dim, cfg.mlp_hidden, cfg.init_scale
        tensors = {
            "w_attn": rng.normal(0.0, s, size=d),
            "b_attn": np.zeros(1),
            "e_step": rng.normal(0.0, s, size=(cfg.n_steps, d)),
            "w0v": rng.normal(0.0, s / np.sqrt(d), size=(m, d)),
            "b0v": np.zeros(m),
            "w1v": rng.normal(0.0, s / np.sqrt(m), size=(1, m)),
            "b1v": np.zeros(1),
        }
        return cls(cfg, ParamSet(tensors))

    def with_params(self, params: ParamSet) -> "ValueHead":
        return ValueHead(self.cfg, params)

    def _check_steps(self, steps: Array) -> Array:
        t = np.asarray(steps, dtype=np.int64)
        if np.any(t < 0) or np.any(t >= self.cfg.n_steps):
            raise DimensionError(
                f"step index outside value-step table [0, {self.cfg.n_steps})"
            )
        return t

    def forward(self, hiddens: list[Array] | Array, step: int) -> float:
        value, _ = self.forward_batch(np.asarray(hiddens)[None, :, :], np.array([step]))
        return float(value[0])

    def forward_batch(self, hiddens: Array, steps: Array) -> tuple[Array, dict]:
        """hiddens (N, n_h, D) detached; steps (N,) ints -> values (N,)."""
        p = self.params
        hs = np.asarray(hiddens, dtype=np.float64)
        if hs.ndim != 3 or hs.shape[2] != self.cfg.hidden_dim:
            raise DimensionError(
                f"value head: hidden states shape {hs.shape} incompatible with "
                f"(N, n_h, {self.cfg.hidden_dim})"
            )
        t = self._check_steps(steps)
        e = hs @ p["w_attn"] + p["b_attn"][0]
        alpha = softmax(e, axis=-1)
        z = np.einsum("ni,nid->nd", alpha, hs)
        u = z + p["e_step"][t]
        m = np.tanh(u @ p["w0v"].T + p["b0v"])
        values = m @ p["w1v"].T + p["b1v"]
        cache = {"hs": hs, "t": t, "alpha": alpha, "u": u, "m": m}
        return values[:, 0], cache

    def backward_batch(self, cache: dict, dvalues: Array) -> dict[str, Array]:
        """Gradients w.r.t. value-head parameters only (hiddens detached)."""
        p = self.params
        hs, t, alpha, u, m = cache["hs"], cache["t"], cache["alpha"], cache["u"], cache["m"]
        dv = np.asarray(dvalues, dtype=np.float64)[:, None]
        dw1v = dv.T @ m
        db1v = dv.sum(axis=0)
        dm = dv @ p["w1v"]
        dzm = dm * (1.0 - m ** 2)
        dw0v = dzm.T @ u
        db0v = dzm.sum(axis=0)
        du = dzm @ p["w0v"]
        de_step = np.zeros_like(p["e_step"])
        np.add.at(de_step, t, du)
        dalpha = np.einsum("nd,nid->ni", du, hs)
        # softmax jacobian: de_i = alpha_i * (dalpha_i - sum_j alpha_j dalpha_j)
        de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        dw_attn = np.einsum("ni,nid->d", de, hs)
        db_attn = np.array([de.sum()])
        return {
            "w_attn": dw_attn, "b_attn": db_attn, "e_step": de_step,
            "w0v": dw0v, "b0v": db0v, "w1v": dw1v, "b1v": db1v,
        }


# --------------------------------------------------------------------------
# World-model nets.  Both are plain MLP regressors behind small wrappers.


@dataclass(frozen=True)
class ObsModelConfig:
    obs_dim: int
    chunk_len: int = 4
    n_actions: int = 7
    hidden_dim: int = 96
    init_scale: float = 0.1

    @property
    def in_dim(self) -> int:
        return self.obs_dim + self.chunk_len * self.n_actions


class ObsModel:
    """Predicts the next observation from (observation, action chunk)."""

    def __init__(self, cfg: ObsModelConfig, params: ParamSet) -> None:
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: ObsModelConfig) -> "ObsModel":
        return cls(cfg, init_mlp(rng, [cfg.in_dim, cfg.hidden_dim, cfg.obs_dim],
                                 scale=cfg.init_scale))

    def with_params(self, params: ParamSet) -> "ObsModel":
        return ObsModel(self.cfg, params)

    def encode_input(self, obs_vec: Array, tokens: Array) -> Array:
        return np.concatenate([np.asarray(obs_vec, dtype=np.float64),
                               chunk_onehot(tokens, self.cfg.n_actions)])

    def predict(self, obs_vec: Array, tokens: Array) -> Array:
        out, _ = mlp_forward(self.params, self.encode_input(obs_vec, tokens))
        return out


class RewardModel:
    """Predicts success probability of a single frame (sigmoid output)."""

    def __init__(self, obs_dim: int, params: ParamSet, hidden_dim: int = 64) -> None:
        self.obs_dim = obs_dim
        self.hidden_dim = hidden_dim
        self.params = params

    @classmethod
    def init(cls, rng: np.random.Generator, obs_dim: int, hidden_dim: int = 64,
             init_scale: float = 0.1) -> "RewardModel":
        return cls(obs_dim, init_mlp(rng, [obs_dim, hidden_dim, 1], scale=init_scale),
                   hidden_dim)

    def with_params(self, params: ParamSet) -> "RewardModel":
        return RewardModel(self.obs_dim, params, self.hidden_dim)

    def predict(self, obs_vec: Array) -> float:
        logit, _ = mlp_forward(self.params, np.asarray(obs_vec, dtype=np.float64))
        return float(1.0 / (1.0 + np.exp(-logit[0])))

    def predict_batch(self, obs_mat: Array) -> Array:
        logits, _ = mlp_forward(self.params, np.asarray(obs_mat, dtype=np.float64))
        return 1.0 / (1.0 + np.exp(-logits[:, 0]))


# --------------------------------------------------------------------------
# Bundle.


@dataclass
class ModelBundle:
    """All four parameter sets that flow between trainer and service."""

    policy: PolicyModel
    value: ValueHead
    obs_model: ObsModel
    reward_model: RewardModel

    def clone(self) -> "ModelBundle":
        return ModelBundle(
            policy=self.policy.with_params(self.policy.params.copy()),
            value=self.value.with_params(self.value.params.copy()),
            obs_model=self.obs_model.with_params(self.obs_model.params.copy()),
            reward_model=self.reward_model.with_params(self.reward_model.params.copy()),
        )


def state_value(policy: PolicyModel, value: ValueHead, obs_vec: Array, step: int) -> float:
    """V(o_t): value head over the backbone's hidden states at step t."""
    return value.forward(np.stack(policy.backbone(obs_vec)), step)


def state_values_batch(policy: PolicyModel, value: ValueHead,
                       obs_mat: Array, steps: Array) -> Array:
    hs = policy.backbone_batch(obs_mat)
    values, _ = value.forward_batch(hs, steps)
    return values
