"""Minimal dense neural stack with manual backpropagation.

Networks are built from flat 64-bit parameter vectors with a named
layout, so gradients, optimizer steps, Polyak target updates, Gaussian
perturbations and checkpointing all operate on plain arrays.  The actor
maps embedded context ids through ELU hidden layers to a sigmoid output
affinely rescaled into the action box.  The critic embeds the state,
runs state and action through equal-width branches, joins them, and
(in the dueling variant) splits the output into a state value V(s) read
off the state branch and an advantage A(s, a) read off the joint trunk,
with Q = V + A.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .auction import ACTION_DIM, ActionBounds
from .replay import SearchContext

__all__ = [
    "ParameterSet",
    "StateSpec",
    "ActorNet",
    "CriticNet",
    "SgdOptimizer",
    "AdamOptimizer",
    "make_optimizer",
    "sgd_apply",
    "soft_update",
    "elu",
    "elu_grad",
    "sigmoid",
]

_COUNTER_FIELDS = ("user_click_count", "user_purchase_count")


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class ParameterSet:
    """Named views over one flat float64 vector.

    The gradient of a network shares the layout of its parameters, so
    elementwise updates are single vector operations.
    """

    def __init__(self, shapes: dict[str, tuple[int, ...]], flat: np.ndarray | None = None):
        self.shapes = {name: tuple(shape) for name, shape in shapes.items()}
        self.offsets: dict[str, int] = {}
        total = 0
        for name, shape in self.shapes.items():
            self.offsets[name] = total
            total += int(np.prod(shape)) if shape else 1
        self.size = total
        if flat is None:
            flat = np.zeros(total, dtype=np.float64)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (total,):
            raise ValueError(f"flat vector must have length {total}")
        self.flat = flat

    def __getitem__(self, name: str) -> np.ndarray:
        off = self.offsets[name]
        shape = self.shapes[name]
        n = int(np.prod(shape)) if shape else 1
        return self.flat[off:off + n].reshape(shape)

    def same_layout(self, other: "ParameterSet") -> bool:
        return self.shapes == other.shapes

    def require_layout(self, other: "ParameterSet"):
        if not self.same_layout(other):
            raise ValueError("parameter layouts do not match")

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.shapes, self.flat.copy())

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet(self.shapes)

    def save(self, path):
        """Bit-exact checkpoint: JSON layout header + raw float64 payload."""
        header = json.dumps({"shapes": {k: list(v) for k, v in self.shapes.items()}}).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(self.flat.tobytes())

    @classmethod
    def load(cls, path) -> "ParameterSet":
        with open(path, "rb") as fh:
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode())
            shapes = {k: tuple(v) for k, v in header["shapes"].items()}
            flat = np.frombuffer(fh.read(), dtype=np.float64).copy()
        return cls(shapes, flat)


@dataclass(frozen=True)
class StateSpec:
    """Which context fields feed the networks and their vocabulary sizes.

    Every field becomes an id: categorical fields are hashed into their
    vocabulary, the behavior counters are log-bucketed.
    """

    fields: tuple[str, ...]
    vocab: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for f in self.fields:
            if f not in self.vocab or self.vocab[f] < 1:
                raise ValueError(f"field '{f}' needs a positive vocab size")

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    def _field_id(self, name: str, value) -> int:
        v = self.vocab[name]
        if name in _COUNTER_FIELDS:
            return min(int(math.log2(1.0 + max(float(value), 0.0))), v - 1)
        return int(value) % v

    def encode(self, ctx: SearchContext) -> np.ndarray:
        return np.array([self._field_id(f, getattr(ctx, f)) for f in self.fields],
                        dtype=np.int64)

    def encode_batch(self, contexts: Sequence[SearchContext]) -> np.ndarray:
        return np.stack([self.encode(c) for c in contexts]) if contexts else \
            np.zeros((0, self.num_fields), dtype=np.int64)


def _init_dense(params: ParameterSet, name_w: str, name_b: str,
                rng: np.random.Generator):
    w = params[name_w]
    bound = 1.0 / math.sqrt(w.shape[1])
    w[...] = rng.uniform(-bound, bound, size=w.shape)
    params[name_b][...] = 0.0


def _init_embeddings(params: ParameterSet, spec: StateSpec, rng: np.random.Generator,
                     scale: float = 0.05):
    for f in spec.fields:
        emb = params[f"emb_{f}"]
        emb[...] = rng.uniform(-scale, scale, size=emb.shape)


class ActorNet:
    """Deterministic policy: context ids -> in-bounds action vector."""

    def __init__(self, state_spec: StateSpec, bounds: ActionBounds,
                 emb_dim: int = 8, hidden: Sequence[int] = (100, 100),
                 rng: np.random.Generator | None = None,
                 params: ParameterSet | None = None):
        self.spec = state_spec
        self.bounds = bounds
        self.emb_dim = emb_dim
        self.hidden = tuple(hidden)
        shapes: dict[str, tuple[int, ...]] = {}
        for f in state_spec.fields:
            shapes[f"emb_{f}"] = (state_spec.vocab[f], emb_dim)
        in_dim = state_spec.num_fields * emb_dim
        for i, h in enumerate(self.hidden):
            shapes[f"W{i}"] = (h, in_dim)
            shapes[f"b{i}"] = (h,)
            in_dim = h
        shapes["W_out"] = (ACTION_DIM, in_dim)
        shapes["b_out"] = (ACTION_DIM,)
        self.layout = shapes
        if params is not None:
            if params.shapes != shapes:
                raise ValueError("parameter layout does not match architecture")
            self.params = params
        else:
            self.params = ParameterSet(shapes)
            rng = rng or np.random.default_rng(0)
            _init_embeddings(self.params, state_spec, rng)
            for i in range(len(self.hidden)):
                _init_dense(self.params, f"W{i}", f"b{i}", rng)
            _init_dense(self.params, "W_out", "b_out", rng)
        self._cache = None

    def clone_with(self, params: ParameterSet) -> "ActorNet":
        return ActorNet(self.spec, self.bounds, self.emb_dim, self.hidden, params=params)

    def forward(self, ids: np.ndarray) -> np.ndarray:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        P = self.params
        e = np.concatenate([P[f"emb_{f}"][ids[:, i]]
                            for i, f in enumerate(self.spec.fields)], axis=1)
        h = e
        pre: list[np.ndarray] = []
        acts: list[np.ndarray] = [e]
        for i in range(len(self.hidden)):
            z = h @ P[f"W{i}"].T + P[f"b{i}"]
            pre.append(z)
            h = elu(z)
            acts.append(h)
        z_out = h @ P["W_out"].T + P["b_out"]
        u = sigmoid(z_out)
        a = self.bounds.lows + u * self.bounds.span
        a = np.clip(a, self.bounds.lows, self.bounds.highs)
        self._cache = (ids, pre, acts, u)
        return a

    def act(self, ctx: SearchContext) -> np.ndarray:
        return self.forward(self.spec.encode(ctx)[None, :])[0]

    def backward(self, d_action: np.ndarray) -> ParameterSet:
        """Parameter gradient for upstream gradient d_action, (N, 5)."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        ids, pre, acts, u = self._cache
        P = self.params
        g = ParameterSet(self.layout)
        du = np.atleast_2d(d_action) * self.bounds.span
        dz = du * u * (1.0 - u)
        g["W_out"][...] = dz.T @ acts[-1]
        g["b_out"][...] = dz.sum(axis=0)
        dh = dz @ P["W_out"]
        for i in reversed(range(len(self.hidden))):
            dzi = dh * elu_grad(pre[i])
            g[f"W{i}"][...] = dzi.T @ acts[i]
            g[f"b{i}"][...] = dzi.sum(axis=0)
            dh = dzi @ P[f"W{i}"]
        d = self.emb_dim
        for i, f in enumerate(self.spec.fields):
            np.add.at(g[f"emb_{f}"], ids[:, i], dh[:, i * d:(i + 1) * d])
        return g


class CriticNet:
    """State-action value network with an optional dueling head.

    With ``dueling=True`` the output is Q = V(s) + A(s, a) where V is a
    linear head on the state branch and A a linear head on the joint
    trunk; with ``dueling=False`` V is identically zero and the joint
    head alone carries Q.
    """

    def __init__(self, state_spec: StateSpec, emb_dim: int = 8,
                 branch: int = 100, joint: Sequence[int] = (500, 500),
                 dueling: bool = True,
                 rng: np.random.Generator | None = None,
                 params: ParameterSet | None = None):
        self.spec = state_spec
        self.emb_dim = emb_dim
        self.branch = branch
        self.joint = tuple(joint)
        self.dueling = dueling
        shapes: dict[str, tuple[int, ...]] = {}
        for f in state_spec.fields:
            shapes[f"emb_{f}"] = (state_spec.vocab[f], emb_dim)
        shapes["W_s"] = (branch, state_spec.num_fields * emb_dim)
        shapes["b_s"] = (branch,)
        shapes["W_a"] = (branch, ACTION_DIM)
        shapes["b_a"] = (branch,)
        in_dim = 2 * branch
        for i, h in enumerate(self.joint):
            shapes[f"W_j{i}"] = (h, in_dim)
            shapes[f"b_j{i}"] = (h,)
            in_dim = h
        shapes["w_adv"] = (in_dim,)
        shapes["b_adv"] = (1,)
        if dueling:
            shapes["w_val"] = (branch,)
            shapes["b_val"] = (1,)
        self.layout = shapes
        if params is not None:
            if params.shapes != shapes:
                raise ValueError("parameter layout does not match architecture")
            self.params = params
        else:
            self.params = ParameterSet(shapes)
            rng = rng or np.random.default_rng(0)
            _init_embeddings(self.params, state_spec, rng)
            _init_dense(self.params, "W_s", "b_s", rng)
            _init_dense(self.params, "W_a", "b_a", rng)
            for i in range(len(self.joint)):
                _init_dense(self.params, f"W_j{i}", f"b_j{i}", rng)
            bound = 1.0 / math.sqrt(in_dim)
            self.params["w_adv"][...] = rng.uniform(-bound, bound, size=in_dim)
            if dueling:
                vb = 1.0 / math.sqrt(branch)
                self.params["w_val"][...] = rng.uniform(-vb, vb, size=branch)
        self._cache = None

    def clone_with(self, params: ParameterSet) -> "CriticNet":
        return CriticNet(self.spec, self.emb_dim, self.branch, self.joint,
                         dueling=self.dueling, params=params)

    def forward(self, ids: np.ndarray, actions: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        P = self.params
        e = np.concatenate([P[f"emb_{f}"][ids[:, i]]
                            for i, f in enumerate(self.spec.fields)], axis=1)
        zs = e @ P["W_s"].T + P["b_s"]
        hs = elu(zs)
        za = actions @ P["W_a"].T + P["b_a"]
        ha = elu(za)
        j = np.concatenate([hs, ha], axis=1)
        pre_j: list[np.ndarray] = []
        acts_j: list[np.ndarray] = [j]
        for i in range(len(self.joint)):
            z = j @ P[f"W_j{i}"].T + P[f"b_j{i}"]
            pre_j.append(z)
            j = elu(z)
            acts_j.append(j)
        A = j @ P["w_adv"] + P["b_adv"][0]
        if self.dueling:
            V = hs @ P["w_val"] + P["b_val"][0]
        else:
            V = np.zeros_like(A)
        Q = V + A
        self._cache = (ids, actions, e, zs, hs, za, ha, pre_j, acts_j)
        return Q, V, A

    def backward(self, g_adv: np.ndarray, g_val: np.ndarray | None = None
                 ) -> tuple[ParameterSet, np.ndarray]:
        """Gradients for upstream signals on the A and V outputs.

        For a loss on Q pass the same upstream to both.  Returns the
        parameter gradient and the gradient w.r.t. the action input.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        ids, actions, e, zs, hs, za, ha, pre_j, acts_j = self._cache
        P = self.params
        g = ParameterSet(self.layout)
        g_adv = np.asarray(g_adv, dtype=np.float64)
        g["w_adv"][...] = acts_j[-1].T @ g_adv
        g["b_adv"][...] = g_adv.sum()
        dj = np.outer(g_adv, P["w_adv"])
        for i in reversed(range(len(self.joint))):
            dz = dj * elu_grad(pre_j[i])
            g[f"W_j{i}"][...] = dz.T @ acts_j[i]
            g[f"b_j{i}"][...] = dz.sum(axis=0)
            dj = dz @ P[f"W_j{i}"]
        B = self.branch
        dhs = dj[:, :B].copy()
        dha = dj[:, B:]
        if self.dueling and g_val is not None:
            g_val = np.asarray(g_val, dtype=np.float64)
            g["w_val"][...] = hs.T @ g_val
            g["b_val"][...] = g_val.sum()
            dhs += np.outer(g_val, P["w_val"])
        dza = dha * elu_grad(za)
        g["W_a"][...] = dza.T @ actions
        g["b_a"][...] = dza.sum(axis=0)
        d_action = dza @ P["W_a"]
        dzs = dhs * elu_grad(zs)
        g["W_s"][...] = dzs.T @ e
        g["b_s"][...] = dzs.sum(axis=0)
        de = dzs @ P["W_s"]
        d = self.emb_dim
        for i, f in enumerate(self.spec.fields):
            np.add.at(g[f"emb_{f}"], ids[:, i], de[:, i * d:(i + 1) * d])
        return g, d_action


class SgdOptimizer:
    """Plain gradient descent."""

    def __init__(self, lr: float):
        self.lr = lr

    def apply(self, params: ParameterSet, grads: ParameterSet):
        params.require_layout(grads)
        params.flat -= self.lr * grads.flat


class AdamOptimizer:
    """Adaptive-moment gradient descent."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def apply(self, params: ParameterSet, grads: ParameterSet):
        params.require_layout(grads)
        if self.m is None:
            self.m = np.zeros_like(params.flat)
            self.v = np.zeros_like(params.flat)
        if self.m.shape != params.flat.shape:
            raise ValueError("optimizer state does not match parameter layout")
        self.t += 1
        g = grads.flat
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        params.flat -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SgdOptimizer(lr)
    if name == "adam":
        return AdamOptimizer(lr)
    raise ValueError(f"unknown optimizer '{name}'")


def sgd_apply(params: ParameterSet, grads: ParameterSet, optimizer) -> ParameterSet:
    """Apply one optimizer step in place and return the parameters."""
    optimizer.apply(params, grads)
    return params


def soft_update(target: ParameterSet, online: ParameterSet, tau: float) -> ParameterSet:
    """Polyak averaging: target <- (1 - tau) * target + tau * online."""
    if not (0.0 < tau <= 1.0):
        raise ValueError("tau must be in (0, 1]")
    target.require_layout(online)
    target.flat *= (1.0 - tau)
    target.flat += tau * online.flat
    return target
