"""Minimal dense actor-critic stack with reverse-mode gradients.

Policies are MLPs over the flattened observation tensor: a trunk of hidden
layers feeding an actor head and a scalar critic head. Two actor head shapes
exist:

  * ``joint``: 36 logits over the joint action of both characters
    (index = 6 * a1 + a2). Used by self-play agents.
  * ``factored``: 6 + 6 logits, one block per character. Co-play learners
    train the first block on their own actions. In self-play evaluation the
    joint distribution is the product of the two blocks (``control =
    "pair"``, the default); ``control = "mirror"`` instead drives the second
    character with the first block applied to the player-swapped
    observation. Either way a factored policy induces a full 36-way joint
    distribution.

Whatever the head, ``joint_logits`` produces 36 joint logits whose softmax
is the policy's joint action distribution, and ``backward_joint`` converts a
gradient on those logits (plus the value) into parameter gradients and the
gradient with respect to the input observation. All gradients are exact and
checked against central finite differences in the test suite.

Parameters default to float32; gradient-check suites build float64 nets.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .featurize import N_CHANNELS, player_swap_permutation

N_CHAR_ACTIONS = 6
N_JOINT_ACTIONS = 36

CHECKPOINT_MAGIC = b"CBNN"
CHECKPOINT_VERSION = 1

_DTYPES = {"f32": np.float32, "f64": np.float64}


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


class TrainingError(RuntimeError):
    """Raised when optimization hits a non-finite loss or gradient."""


@dataclass(frozen=True)
class ArchSpec:
    """Network architecture descriptor. Contracts are architecture-agnostic;
    this fixes shapes for initialization and checkpointing."""

    height: int
    width: int
    channels: int = N_CHANNELS
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"  # or "relu"
    head: str = "joint"  # or "factored"
    shared_trunk: bool = True
    dtype: str = "f32"

    def __post_init__(self) -> None:
        if any(h < 1 for h in self.hidden) or not self.hidden:
            raise ValueError("hidden widths must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in ("joint", "factored"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def input_dim(self) -> int:
        return self.channels * self.height * self.width

    @property
    def actor_dim(self) -> int:
        return N_JOINT_ACTIONS if self.head == "joint" else 2 * N_CHAR_ACTIONS

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


@dataclass
class PolicyParams:
    """Actor-critic parameter store with provenance metadata.

    ``meta`` records seed, environment steps trained, lineage, the training
    algorithm tag, and (for factored heads) the self-play control mode.
    Treated as immutable for inference; trainers are the single writer.
    """

    arch: ArchSpec
    weights: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def control(self) -> str:
        if self.arch.head == "joint":
            return "joint"
        return self.meta.get("control", "pair")


def _trunk_names(prefix: str, n_layers: int) -> list[str]:
    return [f"{prefix}{i}" for i in range(n_layers)]


def _layer_dims(arch: ArchSpec) -> list[tuple[int, int]]:
    dims = []
    prev = arch.input_dim
    for h in arch.hidden:
        dims.append((prev, h))
        prev = h
    return dims


def init_params(arch: ArchSpec, seed: int, meta: Optional[dict] = None) -> PolicyParams:
    """Deterministic scaled-uniform fan-in initialization; the actor head is
    additionally shrunk by 100x so fresh policies start near-uniform."""
    rng = np.random.default_rng(seed)
    dt = arch.np_dtype
    weights: dict[str, np.ndarray] = {}

    def linear(name: str, fan_in: int, fan_out: int, scale: float = 1.0) -> None:
        bound = scale / np.sqrt(fan_in)
        weights[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dt)
        weights[f"{name}.b"] = np.zeros(fan_out, dtype=dt)

    trunks = ["trunk"] if arch.shared_trunk else ["atrunk", "ctrunk"]
    for prefix in trunks:
        for name, (fi, fo) in zip(_trunk_names(prefix, len(arch.hidden)), _layer_dims(arch)):
            linear(name, fi, fo)
    linear("actor", arch.hidden[-1], arch.actor_dim, scale=0.01)
    linear("critic", arch.hidden[-1], 1)

    base_meta = {"seed": int(seed), "steps": 0, "parent": None, "algo": "init"}
    if meta:
        base_meta.update(meta)
    return PolicyParams(arch=arch, weights=weights, meta=base_meta)


def clone_params(params: PolicyParams, **meta_updates) -> PolicyParams:
    meta = dict(params.meta)
    meta.update(meta_updates)
    return PolicyParams(
        arch=params.arch,
        weights={k: v.copy() for k, v in params.weights.items()},
        meta=meta,
    )


def params_fingerprint(params: PolicyParams) -> str:
    h = hashlib.sha256()
    for name in sorted(params.weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.weights[name]).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _act(arch: ArchSpec, s: np.ndarray) -> np.ndarray:
    return np.tanh(s) if arch.activation == "tanh" else np.maximum(s, 0.0)


def _act_grad(arch: ArchSpec, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return (1.0 - a * a) if arch.activation == "tanh" else (s > 0.0).astype(a.dtype)


def _run_trunk(params: PolicyParams, prefix: str, X: np.ndarray) -> tuple[np.ndarray, list]:
    arch = params.arch
    a = X
    trace = []
    for name in _trunk_names(prefix, len(arch.hidden)):
        s = a @ params.weights[f"{name}.W"] + params.weights[f"{name}.b"]
        nxt = _act(arch, s)
        trace.append((name, a, s, nxt))
        a = nxt
    return a, trace


def _trunk_backward(
    params: PolicyParams, trace: list, d_top: np.ndarray, grads: dict[str, np.ndarray]
) -> np.ndarray:
    arch = params.arch
    d = d_top
    for name, a_in, s, a_out in reversed(trace):
        ds = d * _act_grad(arch, s, a_out)
        grads[f"{name}.W"] = grads.get(f"{name}.W", 0.0) + a_in.T @ ds
        grads[f"{name}.b"] = grads.get(f"{name}.b", 0.0) + ds.sum(axis=0)
        d = ds @ params.weights[f"{name}.W"].T
    return d


def forward_raw(params: PolicyParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
    """Actor head output and value for a batch of flattened observations.

    Returns ``(actor_out [B, actor_dim], value [B], cache)``.
    """
    arch = params.arch
    X = np.ascontiguousarray(X, dtype=arch.np_dtype)
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ValueError(f"expected input [batch, {arch.input_dim}], got {X.shape}")
    cache: dict = {"X": X}
    if arch.shared_trunk:
        top, trace = _run_trunk(params, "trunk", X)
        cache["trunk"] = trace
        cache["a_top"] = cache["c_top"] = top
    else:
        a_top, a_trace = _run_trunk(params, "atrunk", X)
        c_top, c_trace = _run_trunk(params, "ctrunk", X)
        cache["atrunk"], cache["ctrunk"] = a_trace, c_trace
        cache["a_top"], cache["c_top"] = a_top, c_top
    actor_out = cache["a_top"] @ params.weights["actor.W"] + params.weights["actor.b"]
    value = (cache["c_top"] @ params.weights["critic.W"] + params.weights["critic.b"])[:, 0]
    return actor_out, value, cache


def backward_raw(
    params: PolicyParams, cache: dict, d_actor: np.ndarray, d_value: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Parameter gradients and input gradient for given head gradients."""
    arch = params.arch
    dt = arch.np_dtype
    d_actor = np.ascontiguousarray(d_actor, dtype=dt)
    d_value = np.ascontiguousarray(d_value, dtype=dt).reshape(-1, 1)
    grads: dict[str, np.ndarray] = {}

    grads["actor.W"] = cache["a_top"].T @ d_actor
    grads["actor.b"] = d_actor.sum(axis=0)
    grads["critic.W"] = cache["c_top"].T @ d_value
    grads["critic.b"] = d_value.sum(axis=0)
    d_a_top = d_actor @ params.weights["actor.W"].T
    d_c_top = d_value @ params.weights["critic.W"].T

    if arch.shared_trunk:
        dX = _trunk_backward(params, cache["trunk"], d_a_top + d_c_top, grads)
    else:
        dX = _trunk_backward(params, cache["atrunk"], d_a_top, grads)
        dX = dX + _trunk_backward(params, cache["ctrunk"], d_c_top, grads)

    for name, w in params.weights.items():
        if name not in grads:
            grads[name] = np.zeros_like(w)
        else:
            grads[name] = np.ascontiguousarray(grads[name], dtype=dt)
    return grads, dX


def _swap_perm_for(arch: ArchSpec) -> np.ndarray:
    if arch.channels != N_CHANNELS:
        raise ValueError("player swap is only defined for the standard channel map")
    return player_swap_permutation(arch.height, arch.width)


def as_batch(obs: np.ndarray) -> np.ndarray:
    """Flatten (C, h, w) or [B, C, h, w] observations into [B, D]."""
    if obs.ndim == 3:
        return obs.reshape(1, -1)
    if obs.ndim == 4:
        return obs.reshape(obs.shape[0], -1)
    if obs.ndim == 2:
        return obs
    raise ValueError(f"cannot interpret observation array of shape {obs.shape}")


def joint_logits(params: PolicyParams, obs) -> tuple[np.ndarray, np.ndarray, tuple]:
    """36 joint-action logits and value for a batch of observations.

    ``ctx`` is opaque state for ``backward_joint``.
    """
    X = as_batch(np.asarray(obs))
    control = params.control
    if control == "joint":
        za, v, cache = forward_raw(params, X)
        return za, v, ("joint", cache)
    if control == "pair":
        za, v, cache = forward_raw(params, X)
        z = za[:, :N_CHAR_ACTIONS, None] + za[:, None, N_CHAR_ACTIONS:]
        return z.reshape(X.shape[0], N_JOINT_ACTIONS), v, ("pair", cache)
    if control == "mirror":
        perm = _swap_perm_for(params.arch)
        za, v, c_main = forward_raw(params, X)
        zb, _, c_swap = forward_raw(params, X[:, perm])
        z = za[:, :N_CHAR_ACTIONS, None] + zb[:, None, :N_CHAR_ACTIONS]
        return z.reshape(X.shape[0], N_JOINT_ACTIONS), v, ("mirror", c_main, c_swap, perm)
    raise ValueError(f"unknown control mode {control!r}")


def backward_joint(
    params: PolicyParams, ctx: tuple, d_logits: np.ndarray, d_value: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate gradients on the 36 joint logits and the value."""
    kind = ctx[0]
    B = d_logits.shape[0]
    if kind == "joint":
        return backward_raw(params, ctx[1], d_logits, d_value)
    dz = d_logits.reshape(B, N_CHAR_ACTIONS, N_CHAR_ACTIONS)
    if kind == "pair":
        d_actor = np.concatenate([dz.sum(axis=2), dz.sum(axis=1)], axis=1)
        return backward_raw(params, ctx[1], d_actor, d_value)
    if kind == "mirror":
        _, c_main, c_swap, perm = ctx
        pad = np.zeros((B, N_CHAR_ACTIONS), dtype=d_logits.dtype)
        g_main, dX_main = backward_raw(
            params, c_main, np.concatenate([dz.sum(axis=2), pad], axis=1), d_value
        )
        g_swap, dX_swap = backward_raw(
            params, c_swap, np.concatenate([dz.sum(axis=1), pad], axis=1), np.zeros(B)
        )
        grads = {k: g_main[k] + g_swap[k] for k in g_main}
        return grads, dX_main + dX_swap[:, perm]
    raise ValueError(f"unknown ctx kind {kind!r}")


def forward(params: PolicyParams, obs) -> tuple[np.ndarray, float]:
    """Joint logits and value for one observation."""
    z, v, _ = joint_logits(params, obs)
    return z[0], float(v[0])


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


def softmax_T(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction; T = 1 is the plain policy."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_divergence(p: np.ndarray, q: np.ndarray, floor: float = 1e-12) -> float:
    """KL(p || q) with q clamped below by ``floor``; nonnegative."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), floor)
    terms = np.where(p > 0.0, p * (np.log(np.maximum(p, floor)) - np.log(q)), 0.0)
    return float(terms.sum())


def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.maximum(p, 1e-300)), 0.0)
    return -terms.sum(axis=-1)


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sample per row; deterministic given the generator state."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])
    return np.minimum((u[:, None] > cdf).sum(axis=1), probs.shape[-1] - 1)


def promote_f64(params: PolicyParams) -> PolicyParams:
    """Float64 view of a policy for high-precision gradient work."""
    if params.arch.dtype == "f64":
        return params
    arch = ArchSpec(**{**asdict(params.arch), "dtype": "f64"})
    return PolicyParams(
        arch=arch,
        weights={k: w.astype(np.float64) for k, w in params.weights.items()},
        meta=dict(params.meta),
    )


def grad_action_prob_wrt_input(params: PolicyParams, obs: np.ndarray, action_index: int) -> np.ndarray:
    """Exact gradient of the T = 1 probability of ``action_index`` (joint)
    with respect to every input scalar, shaped like the observation.
    Computed at 64-bit precision whatever the parameter dtype."""
    if not 0 <= action_index < N_JOINT_ACTIONS:
        raise ValueError(f"action index {action_index} out of range")
    params = promote_f64(params)
    z, _, ctx = joint_logits(params, obs)
    p = softmax_T(z, 1.0)
    d_logits = np.zeros_like(p)
    d_logits[0] = -p[0, action_index] * p[0]
    d_logits[0, action_index] += p[0, action_index]
    _, dX = backward_joint(params, ctx, d_logits, np.zeros(1))
    return dX[0].reshape(params.arch.channels, params.arch.height, params.arch.width)


def grad_action_prob_batch(
    params: PolicyParams, obs_batch: np.ndarray, action_indices: np.ndarray
) -> np.ndarray:
    """Summed 64-bit input gradient of per-step chosen-action probabilities,
    one backward pass for the whole batch."""
    params = promote_f64(params)
    z, _, ctx = joint_logits(params, obs_batch)
    p = softmax_T(z, 1.0)
    B = p.shape[0]
    pa = p[np.arange(B), action_indices]
    d_logits = -pa[:, None] * p
    d_logits[np.arange(B), action_indices] += pa
    _, dX = backward_joint(params, ctx, d_logits, np.zeros(B))
    return dX.sum(axis=0)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: PolicyParams) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(w) for k, w in params.weights.items()},
        v={k: np.zeros_like(w) for k, w in params.weights.items()},
    )


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def adam_step(
    params: PolicyParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    max_grad_norm: Optional[float] = None,
) -> None:
    """One Adam update, in place. Raises TrainingError on non-finite grads."""
    norm = global_grad_norm(grads)
    if not np.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise TrainingError(f"non-finite gradient in {bad}")
    scale = 1.0
    if max_grad_norm is not None and norm > max_grad_norm > 0:
        scale = max_grad_norm / norm
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for k, w in params.weights.items():
        g = np.asarray(grads[k], dtype=w.dtype) * scale
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / bias1
        v_hat = state.v[k] / bias2
        w -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(w.dtype)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: PolicyParams, path) -> None:
    """Versioned binary: magic, version, JSON header (architecture, metadata,
    array table), then raw little-endian array bytes."""
    names = sorted(params.weights)
    header = {
        "arch": asdict(params.arch),
        "meta": params.meta,
        "arrays": [
            {
                "name": k,
                "dtype": str(params.weights[k].dtype),
                "shape": list(params.weights[k].shape),
            }
            for k in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for k in names:
            f.write(np.ascontiguousarray(params.weights[k]).tobytes())


def load_checkpoint(path) -> PolicyParams:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r} in {path}")
        version, header_len = struct.unpack("<HI", f.read(6))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(f.read(header_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
        arch_dict = dict(header["arch"])
        arch_dict["hidden"] = tuple(arch_dict["hidden"])
        arch = ArchSpec(**arch_dict)
        weights = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            dtype = np.dtype(entry["dtype"])
            raw = f.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointError(f"truncated checkpoint {path}")
            weights[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return PolicyParams(arch=arch, weights=weights, meta=header["meta"])
