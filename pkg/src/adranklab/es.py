"""Evolution-strategy online fine-tuning of the policy parameters.

Each iteration Gaussian-perturbs the actor parameters n times, deploys
every perturbed policy on its own hashed traffic bin of a simulated
live stream, scores each bin by the discrete per-impression reward

    R_bar = (total_click_price + lambda * click_number) / served_ad_number

with clicks drawn from the hidden ground-truth user model, and moves
the parameters along the reward-weighted sum of the perturbations:

    theta' = theta + eta / (n * sigma) * sum_i R_bar_i * eps_i

No backward pass is involved anywhere; perturbations travel between
evaluation and update as seeds, not as vectors.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .auction import batch_auction, pack_records
from .env import EnvConfig
from .nets import ActorNet, ParameterSet
from .replay import AuctionRecord

__all__ = [
    "EsConfig",
    "BinResult",
    "EsIterationReport",
    "perturb",
    "noise_for",
    "route_traffic",
    "evaluate_bin",
    "es_update",
    "run_es",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EsConfig:
    n: int = 20                  # perturbations per iteration
    sigma: float = 0.1           # noise standard deviation
    eta: float = 0.05            # learning rate
    lam: float = 1.0             # click-reward weight
    bin_count: int = 20
    iterations: int = 20
    seed: int = 0
    sample_fraction: float = 0.02  # share of the stream scored per iteration
    center_rewards: bool = False   # subtract the mean reward before the update

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.sigma <= 0 or self.eta <= 0:
            raise ValueError("sigma and eta must be > 0")
        if self.bin_count < self.n:
            raise ValueError("bin_count must be >= n")
        if not (0.0 < self.sample_fraction <= 1.0):
            raise ValueError("sample_fraction must be in (0, 1]")


@dataclass(frozen=True)
class BinResult:
    perturbation_index: int
    total_click_price: float
    click_number: int
    served_ad_number: int

    def relative_reward(self, lam: float) -> float:
        if self.served_ad_number <= 0:
            raise ValueError("empty bin has no relative reward")
        return (self.total_click_price + lam * self.click_number) / self.served_ad_number


@dataclass
class EsIterationReport:
    iteration: int
    mean_reward: float
    rewards: list[float]
    impressions: int
    clicks: int
    revenue: float

    @property
    def rpm(self) -> float:
        return 1000.0 * self.revenue / self.impressions if self.impressions else 0.0

    @property
    def ctr(self) -> float:
        return self.clicks / self.impressions if self.impressions else 0.0

    @property
    def ppc(self) -> float | None:
        return self.revenue / self.clicks if self.clicks else None


def noise_for(template: ParameterSet, eps_key: tuple[int, int],
              sigma: float) -> np.ndarray:
    """Regenerate one perturbation vector from its (seed, index) key."""
    rng = np.random.default_rng(np.random.SeedSequence(list(eps_key)))
    return sigma * rng.standard_normal(template.size)


def perturb(theta: ParameterSet, n: int, sigma: float, seed: int
            ) -> list[tuple[tuple[int, int], ParameterSet]]:
    """n Gaussian-perturbed copies of theta, each tagged with the key
    that regenerates its noise."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    out = []
    for i in range(n):
        key = (seed, i)
        eps = noise_for(theta, key, sigma)
        out.append((key, ParameterSet(theta.shapes, theta.flat + eps)))
    return out


def _stable_bin(session_id: str, bin_count: int) -> int:
    digest = hashlib.blake2b(session_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % bin_count


def route_traffic(records: Iterable[AuctionRecord], bin_count: int
                  ) -> dict[int, list[AuctionRecord]]:
    """Stable session-hash split; a given session always lands in the
    same bin."""
    if bin_count < 1:
        raise ValueError("bin_count must be >= 1")
    bins: dict[int, list[AuctionRecord]] = {}
    for rec in records:
        bins.setdefault(_stable_bin(rec.session_id, bin_count), []).append(rec)
    return bins


def evaluate_bin(actor: ActorNet, records: Sequence[AuctionRecord],
                 env_cfg: EnvConfig, rng: np.random.Generator,
                 perturbation_index: int = 0) -> BinResult | None:
    """Serve one bin under the given policy and accumulate discrete rewards.

    Returns None for an empty bin (the caller excludes it from the
    update).  Clicks are Bernoulli draws from the winners' ground-truth
    CTR.
    """
    records = list(records)
    if not records:
        return None
    packed = pack_records(records)
    ids = actor.spec.encode_batch([r.context for r in records])
    actions = actor.forward(ids)
    winner_cols, prices = batch_auction(packed, actions, k=env_cfg.k,
                                        reserve=env_cfg.reserve)
    filled = winner_cols >= 0
    rows = np.arange(len(records))[:, None]
    true_ctr = packed.true_ctr[rows, np.maximum(winner_cols, 0)]
    if np.any(np.isnan(true_ctr[filled])):
        raise ValueError("scrubbed records cannot drive the online simulator")
    draws = rng.random(size=winner_cols.shape)
    clicked = filled & (draws < true_ctr)
    return BinResult(
        perturbation_index=perturbation_index,
        total_click_price=float(prices[clicked].sum()),
        click_number=int(clicked.sum()),
        served_ad_number=int(filled.sum()),
    )


def es_update(theta: ParameterSet, bin_results: Sequence[BinResult | None],
              eps_keys: Sequence[tuple[int, int]], cfg: EsConfig) -> ParameterSet:
    """Weighted-perturbation parameter update; empty bins are excluded
    and n renormalized to the participating count."""
    pairs = [(r, k) for r, k in zip(bin_results, eps_keys) if r is not None]
    if not pairs:
        log.warning("all traffic bins empty; skipping the update")
        return theta.copy()
    rewards = np.array([r.relative_reward(cfg.lam) for r, _ in pairs])
    if cfg.center_rewards:
        rewards = rewards - rewards.mean()
    n_eff = len(pairs)
    acc = np.zeros(theta.size)
    for (_, key), rbar in zip(pairs, rewards):
        acc += rbar * noise_for(theta, key, cfg.sigma)
    new_flat = theta.flat + cfg.eta / (n_eff * cfg.sigma) * acc
    return ParameterSet(theta.shapes, new_flat)


def run_es(actor: ActorNet, records: Sequence[AuctionRecord],
           env_cfg: EnvConfig, cfg: EsConfig
           ) -> tuple[ParameterSet, list[EsIterationReport]]:
    """Iterate perturb / deploy-per-bin / update over a simulated stream."""
    records = list(records)
    bins = route_traffic(records, cfg.bin_count)
    theta = actor.params.copy()
    reports: list[EsIterationReport] = []
    for it in range(cfg.iterations):
        iter_seed = cfg.seed * 1_000_003 + it
        perturbed = perturb(theta, cfg.n, cfg.sigma, iter_seed)
        results: list[BinResult | None] = []
        rewards: list[float] = []
        impressions = clicks = 0
        revenue = 0.0
        for i, (key, params) in enumerate(perturbed):
            bin_records = bins.get(i, [])
            if cfg.sample_fraction < 1.0 and bin_records:
                sub_rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, it, i, 1]))
                take = max(1, int(round(len(bin_records) * cfg.sample_fraction)))
                idx = sub_rng.choice(len(bin_records), size=take, replace=False)
                bin_records = [bin_records[j] for j in sorted(idx)]
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, it, i, 2]))
            res = evaluate_bin(actor.clone_with(params), bin_records, env_cfg,
                               rng, perturbation_index=i)
            results.append(res)
            if res is not None:
                rewards.append(res.relative_reward(cfg.lam))
                impressions += res.served_ad_number
                clicks += res.click_number
                revenue += res.total_click_price
        theta = es_update(theta, results, [k for k, _ in perturbed], cfg)
        reports.append(EsIterationReport(
            iteration=it,
            mean_reward=float(np.mean(rewards)) if rewards else 0.0,
            rewards=rewards,
            impressions=impressions,
            clicks=clicks,
            revenue=revenue,
        ))
    return theta, reports
