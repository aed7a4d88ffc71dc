"""Asynchronous off-policy actor-critic training.

Exploration agents replay logged sessions under uniformly random
actions and store the resulting transition tuples.  Workers repeatedly
pull a consistent parameter snapshot, accumulate critic and actor
gradients over a few batches, and push the sums to an in-process
parameter server, which applies them with a central optimizer and
Polyak-updates the target networks on every applied push.  A single
worker runs strictly serially and is bit-reproducible under a fixed
seed.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .auction import ACTION_DIM, ActionBounds
from .env import Calibrators, EnvConfig, rollout
from .nets import ActorNet, CriticNet, ParameterSet, StateSpec, make_optimizer, soft_update
from .replay import AuctionRecord, TransitionTuple, group_by_session

__all__ = [
    "TrainConfig",
    "PRESETS",
    "Batch",
    "TransitionStore",
    "ParameterServer",
    "explore",
    "critic_step",
    "actor_step",
    "train",
    "TrainResult",
    "write_curves",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    tau: float = 0.01
    gamma: float = 0.9
    regularization: float = 1e-5
    num_workers: int = 1
    global_update_every: int = 10   # local gradient steps per push
    total_steps: int = 2000         # local gradient steps, summed over workers
    seed: int = 0
    optimizer: str = "adam"
    checkpoint_every: int = 20      # applied pushes between curve rows

    def __post_init__(self):
        for name in ("batch_size", "num_workers", "global_update_every",
                     "total_steps", "checkpoint_every"):
            if getattr(self, name) < 1 and name != "total_steps":
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        for name in ("lr_actor", "lr_critic", "gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must be in (0, 1]")
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")


# Desk-scale presets; "paper" mirrors the published hyperparameter table.
PRESETS: dict[str, dict] = {
    "base": {"lr_actor": 1e-3, "lr_critic": 1e-3, "regularization": 1e-5,
             "batch_size": 512, "optimizer": "adam"},
    "learning_rate": {"lr_actor": 1e-2, "lr_critic": 1e-2, "regularization": 1e-5,
                      "batch_size": 512, "optimizer": "adam"},
    "batch_size": {"lr_actor": 1e-3, "lr_critic": 1e-3, "regularization": 1e-5,
                   "batch_size": 64, "optimizer": "adam"},
    "regular": {"lr_actor": 1e-3, "lr_critic": 1e-3, "regularization": 1e-3,
                "batch_size": 512, "optimizer": "adam"},
    "paper": {"lr_actor": 1e-5, "lr_critic": 1e-5, "regularization": 1e-5,
              "batch_size": 50_000, "optimizer": "sgd", "tau": 0.01},
}


def config_from_preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset '{name}'; have {sorted(PRESETS)}")
    kwargs = dict(PRESETS[name])
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


@dataclass
class Batch:
    state_ids: np.ndarray   # (N, F)
    actions: np.ndarray     # (N, 5)
    rewards: np.ndarray     # (N,)
    next_ids: np.ndarray    # (N, F)
    terminal: np.ndarray    # (N,) bool


class TransitionStore:
    """Columnar, immutable store of transition tuples."""

    def __init__(self, state_ids, actions, rewards, next_ids, terminal):
        self.state_ids = np.asarray(state_ids, dtype=np.int64)
        self.actions = np.asarray(actions, dtype=np.float64)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.next_ids = np.asarray(next_ids, dtype=np.int64)
        self.terminal = np.asarray(terminal, dtype=bool)
        self.size = self.rewards.shape[0]

    @classmethod
    def from_tuples(cls, tuples: Iterable[TransitionTuple],
                    spec: StateSpec) -> "TransitionStore":
        sids, acts, rews, nids, term = [], [], [], [], []
        for t in tuples:
            sids.append(spec.encode(t.state))
            acts.append(np.asarray(t.action, dtype=np.float64))
            rews.append(t.reward)
            if t.next_state is None:
                nids.append(np.zeros(spec.num_fields, dtype=np.int64))
                term.append(True)
            else:
                nids.append(spec.encode(t.next_state))
                term.append(False)
        if not rews:
            raise ValueError("no transitions")
        return cls(np.stack(sids), np.stack(acts), np.array(rews),
                   np.stack(nids), np.array(term))

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        idx = rng.integers(self.size, size=batch_size)
        return self.batch(idx)

    def batch(self, idx) -> Batch:
        return Batch(self.state_ids[idx], self.actions[idx], self.rewards[idx],
                     self.next_ids[idx], self.terminal[idx])


def explore(records: Iterable[AuctionRecord], bounds: ActionBounds,
            cal: Calibrators, env_cfg: EnvConfig, seed: int,
            passes: int = 1) -> list[TransitionTuple]:
    """Build off-policy transitions by replaying sessions under actions
    drawn i.i.d. uniformly from the action box."""
    sessions = group_by_session(records)
    rng = np.random.default_rng(seed)
    out: list[TransitionTuple] = []

    def uniform_policy(_state):
        return rng.uniform(bounds.lows, bounds.highs)

    for _ in range(passes):
        for sid in sorted(sessions):
            out.extend(rollout(sessions[sid], uniform_policy, cal, env_cfg))
    return out


def _l2(params: ParameterSet) -> float:
    return float(params.flat @ params.flat)


def critic_step(batch: Batch, critic: CriticNet, target_actor: ActorNet,
                target_critic: CriticNet, cfg: TrainConfig
                ) -> tuple[ParameterSet, float]:
    """One-step TD gradient of the critic on a batch.

    Targets are r + gamma * Q'(s', pi'(s')) with terminal transitions
    bootstrapping to r alone; the loss is the batch-mean half squared
    error plus the L2 penalty (kept outside the mean so its strength does
    not depend on batch size).
    """
    next_actions = target_actor.forward(batch.next_ids)
    q_next, _, _ = target_critic.forward(batch.next_ids, next_actions)
    q_star = batch.rewards + cfg.gamma * np.where(batch.terminal, 0.0, q_next)
    q, _, _ = critic.forward(batch.state_ids, batch.actions)
    n = q.shape[0]
    diff = q - q_star
    loss = 0.5 * float(diff @ diff) / n
    grads, _ = critic.backward(g_adv=diff / n, g_val=diff / n)
    if cfg.regularization > 0:
        loss += 0.5 * cfg.regularization * _l2(critic.params)
        grads.flat += cfg.regularization * critic.params.flat
    return grads, loss


def actor_step(batch: Batch, actor: ActorNet, critic: CriticNet,
               cfg: TrainConfig) -> ParameterSet:
    """Deterministic policy gradient through the critic's advantage stream.

    Returns the gradient of the loss -mean A(s, pi(s)) (plus L2 penalty),
    so descending it ascends the batch advantage.
    """
    actions = actor.forward(batch.state_ids)
    critic.forward(batch.state_ids, actions)
    n = batch.state_ids.shape[0]
    _, d_action = critic.backward(g_adv=np.full(n, 1.0 / n), g_val=None)
    grads = actor.backward(-d_action)
    if cfg.regularization > 0:
        grads.flat += cfg.regularization * actor.params.flat
    return grads


@dataclass
class Snapshot:
    version: int
    actor: ParameterSet
    critic: ParameterSet
    target_actor: ParameterSet
    target_critic: ParameterSet


class ParameterServer:
    """In-process parameter store with atomic snapshots and pushes."""

    def __init__(self, actor_params: ParameterSet, critic_params: ParameterSet,
                 cfg: TrainConfig):
        self._lock = threading.Lock()
        self.actor = actor_params.copy()
        self.critic = critic_params.copy()
        self.target_actor = actor_params.copy()
        self.target_critic = critic_params.copy()
        self.cfg = cfg
        self.opt_actor = make_optimizer(cfg.optimizer, cfg.lr_actor)
        self.opt_critic = make_optimizer(cfg.optimizer, cfg.lr_critic)
        self.version = 0
        self.staleness: list[int] = []

    def snapshot(self) -> Snapshot:
        with self._lock:
            return Snapshot(self.version, self.actor.copy(), self.critic.copy(),
                            self.target_actor.copy(), self.target_critic.copy())

    def push(self, actor_grad: ParameterSet, critic_grad: ParameterSet,
             seen_version: int) -> int:
        """Apply one gradient push; returns the new version."""
        with self._lock:
            self.opt_critic.apply(self.critic, critic_grad)
            self.opt_actor.apply(self.actor, actor_grad)
            soft_update(self.target_critic, self.critic, self.cfg.tau)
            soft_update(self.target_actor, self.actor, self.cfg.tau)
            self.version += 1
            self.staleness.append(self.version - 1 - seen_version)
            return self.version


@dataclass
class TrainResult:
    actor_params: ParameterSet
    critic_params: ParameterSet
    target_actor_params: ParameterSet
    target_critic_params: ParameterSet
    curves: list[dict] = field(default_factory=list)
    staleness: list[int] = field(default_factory=list)


def _worker_loop(server: ParameterServer, store: TransitionStore,
                 actor_template: ActorNet, critic_template: CriticNet,
                 cfg: TrainConfig, steps: int, seed: int,
                 record_checkpoint: Callable[[int, float], None]):
    rng = np.random.default_rng(seed)
    n_push = cfg.global_update_every
    done = 0
    while done < steps:
        snap = server.snapshot()
        actor = actor_template.clone_with(snap.actor)
        critic = critic_template.clone_with(snap.critic)
        t_actor = actor_template.clone_with(snap.target_actor)
        t_critic = critic_template.clone_with(snap.target_critic)
        a_sum = actor.params.zeros_like()
        c_sum = critic.params.zeros_like()
        losses = []
        for _ in range(min(n_push, steps - done)):
            batch = store.sample(rng, cfg.batch_size)
            c_grad, c_loss = critic_step(batch, critic, t_actor, t_critic, cfg)
            a_grad = actor_step(batch, actor, critic, cfg)
            c_sum.flat += c_grad.flat
            a_sum.flat += a_grad.flat
            losses.append(c_loss)
            done += 1
        version = server.push(a_sum, c_sum, snap.version)
        record_checkpoint(version, float(np.mean(losses)))


def train(store: TransitionStore, actor: ActorNet, critic: CriticNet,
          cfg: TrainConfig,
          eval_fn: Callable[[ParameterSet], dict] | None = None) -> TrainResult:
    """Run the asynchronous learning loop and return the final parameters.

    ``eval_fn`` (actor parameters -> metric dict) is invoked at
    checkpoint pushes and its outputs merged into the training curves.
    With ``num_workers=1`` the loop is strictly serial and reproducible.
    """
    server = ParameterServer(actor.params, critic.params, cfg)
    curves: list[dict] = []
    curve_lock = threading.Lock()

    def record_checkpoint(version: int, loss: float):
        if version % cfg.checkpoint_every != 0:
            return
        row = {"push": version,
               "steps": version * cfg.global_update_every,
               "critic_loss": loss}
        if eval_fn is not None:
            row.update(eval_fn(server.snapshot().actor))
        with curve_lock:
            curves.append(row)

    if cfg.total_steps > 0:
        per_worker = [cfg.total_steps // cfg.num_workers] * cfg.num_workers
        per_worker[0] += cfg.total_steps % cfg.num_workers
        if cfg.num_workers == 1:
            _worker_loop(server, store, actor, critic, cfg, per_worker[0],
                         cfg.seed, record_checkpoint)
        else:
            threads = []
            errors: list[BaseException] = []

            def run(steps, seed):
                try:
                    _worker_loop(server, store, actor, critic, cfg, steps,
                                 seed, record_checkpoint)
                except BaseException as exc:  # surfaced after join
                    errors.append(exc)

            for w, steps in enumerate(per_worker):
                t = threading.Thread(target=run, args=(steps, cfg.seed + 7919 * w))
                threads.append(t)
                t.start()
            for t in threads:
                t.join()
            if errors:
                raise RuntimeError("worker failed during training") from errors[0]

    curves.sort(key=lambda r: r["push"])
    return TrainResult(actor_params=server.actor, critic_params=server.critic,
                       target_actor_params=server.target_actor,
                       target_critic_params=server.target_critic,
                       curves=curves, staleness=list(server.staleness))


def write_curves(curves: Sequence[dict], path):
    """Plain-text training curves, one checkpoint per line."""
    if not curves:
        cols = []
    else:
        cols = list(curves[0].keys())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in curves:
            fh.write(",".join(repr(row.get(c, "")) for c in cols) + "\n")
