"""Minimal dense-network kernel: float64 tensors, hand-derived gradients.

No autodiff anywhere.  Every backward pass in this package is written
against the forward code by hand and audited with finite_diff_check.
All functions treat parameters as values: adam_step returns fresh
ParamSet/AdamState objects and never mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

ADAM_EPS = 1e-8


class DimensionError(ValueError):
    """Shape mismatch; the message names the offending tensor."""


class DomainError(ValueError):
    """Input outside a function's domain (e.g. softmax of an empty vector)."""


class NonFiniteError(ValueError):
    """NaN or infinity where a finite value is required."""


@dataclass
class ParamSet:
    """Named float64 tensors plus a monotone optimizer-step counter."""

    tensors: dict[str, Array]
    version: int = 0

    def __post_init__(self) -> None:
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in self.tensors.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()}, self.version)

    def __getitem__(self, name: str) -> Array:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise NonFiniteError(f"parameter tensor {name!r} contains non-finite values")

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def flatten(self) -> Array:
        return np.concatenate([self.tensors[k].ravel() for k in sorted(self.tensors)])

    def with_flat(self, flat: Array) -> "ParamSet":
        """Rebuild a ParamSet of the same shapes from a flat vector."""
        out: dict[str, Array] = {}
        i = 0
        for k in sorted(self.tensors):
            t = self.tensors[k]
            out[k] = np.asarray(flat[i : i + t.size], dtype=np.float64).reshape(t.shape)
            i += t.size
        if i != flat.size:
            raise DimensionError(f"flat vector has {flat.size} entries, expected {i}")
        return ParamSet(out, self.version)


@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS

    @classmethod
    def init(cls, params: ParamSet, lr: float = 3e-4, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = ADAM_EPS) -> "AdamState":
        zeros = {k: np.zeros_like(t) for k, t in params.tensors.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()},
                   step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: ParamSet, grads: dict[str, Array], state: AdamState) -> tuple[ParamSet, AdamState]:
    """One Adam update.  Pure: returns new params (version + 1) and state.

    Gradients must cover exactly the parameter names, match shapes, and be
    finite; a zero gradient leaves parameter values untouched (version
    still advances).
    """
    if set(grads) != set(params.tensors):
        missing = set(params.tensors) ^ set(grads)
        raise DimensionError(f"gradient names do not match parameters: {sorted(missing)}")
    t = state.step + 1
    new_tensors: dict[str, Array] = {}
    new_m: dict[str, Array] = {}
    new_v: dict[str, Array] = {}
    for name, w in params.tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != w.shape:
            raise DimensionError(f"gradient {name!r}: shape {g.shape} != parameter {w.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient {name!r} contains non-finite values")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new_tensors[name] = w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    new_params = ParamSet(new_tensors, params.version + 1)
    new_params.check_finite()
    new_state = AdamState(m=new_m, v=new_v, step=t, lr=state.lr,
                          beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return new_params, new_state


# --------------------------------------------------------------------------
# Softmax family.  Always max-shifted; defined for every finite input.


def softmax(logits: Array, axis: int = -1) -> Array:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise DomainError("softmax input contains non-finite values")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: Array, axis: int = -1) -> Array:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise DomainError("log_softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise DomainError("log_softmax input contains non-finite values")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# Dense multilayer net: tanh hidden layers, linear output.
#
# Parameter naming convention: w0/b0, w1/b1, ... with wi of shape
# (out_dim, in_dim).  mlp_forward returns the final pre-activation output
# and the list of hidden activations (the hidden states feed the value
# head elsewhere in the package).


def mlp_layer_count(params: ParamSet) -> int:
    n = 0
    while f"w{n}" in params.tensors:
        if f"b{n}" not in params.tensors:
            raise DimensionError(f"layer {n}: w{n} present but b{n} missing")
        n += 1
    if n == 0:
        raise DimensionError("no layers found (expected tensors w0/b0, ...)")
    return n


def mlp_forward(params: ParamSet, x: Array) -> tuple[Array, list[Array]]:
    """Forward pass.  x may be a vector (d,) or a batch (n, d).

    Returns (output, hiddens) where hiddens are the post-tanh activations
    of every layer except the last.  The output is pre-activation (linear).
    """
    n_layers = mlp_layer_count(params)
    h = np.asarray(x, dtype=np.float64)
    hiddens: list[Array] = []
    for i in range(n_layers):
        w, b = params[f"w{i}"], params[f"b{i}"]
        if h.shape[-1] != w.shape[1]:
            raise DimensionError(
                f"layer w{i}: expected input dim {w.shape[1]}, got {h.shape[-1]}"
            )
        z = h @ w.T + b
        if i < n_layers - 1:
            h = np.tanh(z)
            hiddens.append(h)
        else:
            h = z
    return h, hiddens


def mlp_backward(
    params: ParamSet, x: Array, hiddens: list[Array], grad_out: Array
) -> tuple[dict[str, Array], Array]:
    """Gradients of sum(grad_out * output) w.r.t. parameters and input.

    x, hiddens and grad_out must come from a matching mlp_forward call.
    Handles the same vector/batch shapes as mlp_forward.
    """
    n_layers = mlp_layer_count(params)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    acts = [np.atleast_2d(x)] + [np.atleast_2d(h) for h in hiddens]
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    grads: dict[str, Array] = {}
    for i in range(n_layers - 1, -1, -1):
        a_in = acts[i]
        grads[f"w{i}"] = g.T @ a_in
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params[f"w{i}"]
        if i > 0:
            g = g * (1.0 - acts[i] ** 2)  # tanh' through the producing layer
    grad_x = g[0] if single else g
    return grads, grad_x


def init_mlp(rng: np.random.Generator, dims: list[int], scale: float = 0.1) -> ParamSet:
    """Small random init; dims = [in, hidden..., out]."""
    if len(dims) < 2:
        raise DimensionError("init_mlp needs at least input and output dims")
    tensors: dict[str, Array] = {}
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        tensors[f"w{i}"] = rng.normal(0.0, scale / np.sqrt(fan_in), size=(dims[i + 1], dims[i]))
        tensors[f"b{i}"] = np.zeros(dims[i + 1])
    return ParamSet(tensors)


# --------------------------------------------------------------------------
# Gradient auditing.


class NondeterministicLossError(RuntimeError):
    """loss_fn gave two different values at the same parameters."""


def finite_diff_check(
    loss_fn,
    params: ParamSet,
    analytic: dict[str, Array],
    step: float = 1e-6,
) -> float:
    """Max relative error between central differences and analytic grads.

    Relative error per coordinate: |fd - analytic| / (|analytic| + 1e-8).
    loss_fn must be deterministic: it is evaluated twice at the base point
    and any discrepancy raises NondeterministicLossError.  Intended for
    micro-nets only (cost is two evaluations per scalar parameter).
    """
    base1 = float(loss_fn(params))
    base2 = float(loss_fn(params))
    if base1 != base2:
        raise NondeterministicLossError(
            f"loss_fn returned {base1!r} then {base2!r} at identical parameters"
        )
    worst = 0.0
    for name in sorted(params.tensors):
        w = params.tensors[name]
        g = np.asarray(analytic[name], dtype=np.float64)
        if g.shape != w.shape:
            raise DimensionError(f"analytic gradient {name!r}: shape {g.shape} != {w.shape}")
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = w[idx]
            w[idx] = orig + step
            up = float(loss_fn(params))
            w[idx] = orig - step
            down = float(loss_fn(params))
            w[idx] = orig
            fd = (up - down) / (2.0 * step)
            err = abs(fd - g[idx]) / (abs(g[idx]) + 1e-8)
            if err > worst:
                worst = err
    return worst
