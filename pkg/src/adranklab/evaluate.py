"""Brute-force parameter oracle and business-metric evaluation.

The oracle exhaustively evaluates the shaped reward of every grid
action per state bucket (query x ad position by default) and keeps the
argmax; trained policies are then scored by their squared distance to
the oracle actions in unit-box coordinates, and by business metrics
(RPM, PPC, CTR) on a held-out stream.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .auction import ACTION_DIM, ActionBounds, baseline_action, batch_auction, pack_records
from .env import Calibrators, EnvConfig, batch_rewards
from .nets import ActorNet
from .replay import AuctionRecord, SearchContext

__all__ = [
    "MetricsReport",
    "GridSpec",
    "OracleResult",
    "grid_search",
    "policy_oracle_error",
    "evaluate_policy",
    "tune_baseline",
    "default_state_key",
    "format_delta_table",
]


@dataclass(frozen=True)
class MetricsReport:
    impressions: int
    clicks: float
    revenue: float

    @property
    def rpm(self) -> float:
        return 1000.0 * self.revenue / self.impressions

    @property
    def ppc(self) -> float | None:
        return self.revenue / self.clicks if self.clicks > 0 else None

    @property
    def ctr(self) -> float:
        return self.clicks / self.impressions

    def as_dict(self) -> dict:
        return {"impressions": self.impressions, "clicks": self.clicks,
                "revenue": self.revenue, "rpm": self.rpm, "ppc": self.ppc,
                "ctr": self.ctr}


@dataclass(frozen=True)
class GridSpec:
    """Per-component (min, max, step) triples for the 5 action parameters."""

    components: tuple[tuple[float, float, float], ...] = (
        (0.5, 2.0, 0.25),   # a1
        (0.0, 10.0, 1.0),   # a2
        (0.5, 2.0, 0.25),   # a3
        (0.0, 10.0, 1.0),   # a4
        (0.5, 2.0, 0.25),   # a5
    )

    def __post_init__(self):
        if len(self.components) != ACTION_DIM:
            raise ValueError("grid spec needs 5 components")
        for lo, hi, st in self.components:
            if st <= 0 or hi < lo:
                raise ValueError("each component needs hi >= lo and step > 0")

    def axes(self) -> list[np.ndarray]:
        out = []
        for lo, hi, st in self.components:
            n = int(np.floor((hi - lo) / st + 1e-9)) + 1
            out.append(lo + st * np.arange(n))
        return out

    def size(self) -> int:
        return int(np.prod([len(a) for a in self.axes()]))

    def points(self) -> np.ndarray:
        """All grid actions, (G, 5), in lexicographic order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)


@dataclass(frozen=True)
class OracleResult:
    state_key: tuple
    best_action: np.ndarray
    best_reward: float
    impressions: int
    context: SearchContext  # representative context for probing policies


def default_state_key(ctx: SearchContext) -> tuple:
    return (ctx.query_id, ctx.ad_position)


def grid_search(records: Iterable[AuctionRecord], cal: Calibrators,
                env_cfg: EnvConfig, grid: GridSpec,
                state_key_fn: Callable[[SearchContext], tuple] = default_state_key,
                max_grid_points: int = 200_000,
                max_records_per_state: int | None = None,
                seed: int = 0) -> dict[tuple, OracleResult]:
    """Exhaustive per-state argmax of the mean shaped reward over the grid.

    Ties resolve to the lexicographically smallest grid action.  States
    with more than ``max_records_per_state`` records are subsampled
    deterministically.
    """
    if grid.size() > max_grid_points:
        raise ValueError(f"grid has {grid.size()} points, cap is {max_grid_points}")
    groups: dict[tuple, list[AuctionRecord]] = {}
    for rec in records:
        groups.setdefault(state_key_fn(rec.context), []).append(rec)
    if not groups:
        raise ValueError("no records to search over")
    points = grid.points()
    out: dict[tuple, OracleResult] = {}
    for state_index, key in enumerate(sorted(groups)):
        recs = groups[key]
        impressions = len(recs)
        if max_records_per_state is not None and len(recs) > max_records_per_state:
            rng = np.random.default_rng(np.random.SeedSequence([seed, state_index]))
            idx = rng.choice(len(recs), size=max_records_per_state, replace=False)
            recs = [recs[i] for i in sorted(idx)]
        packed = pack_records(recs)
        totals = np.empty(points.shape[0])
        for g, action in enumerate(points):
            totals[g] = batch_rewards(packed, action, cal, env_cfg).mean()
        best = int(np.argmax(totals))  # first max = lexicographic tie-break
        out[key] = OracleResult(state_key=key, best_action=points[best].copy(),
                                best_reward=float(totals[best]),
                                impressions=impressions,
                                context=recs[0].context)
    return out


def policy_oracle_error(actor: ActorNet, oracle: dict[tuple, OracleResult],
                        bounds: ActionBounds,
                        weighting: str = "uniform") -> float:
    """Mean squared L2 distance between the policy's and the oracle's
    actions, in unit-box coordinates; optionally impression-weighted."""
    if weighting not in ("uniform", "impression"):
        raise ValueError("weighting must be 'uniform' or 'impression'")
    if not oracle:
        raise ValueError("empty oracle result set")
    errs = []
    weights = []
    for key in sorted(oracle):
        res = oracle[key]
        a = bounds.normalize(actor.act(res.context))
        b = bounds.normalize(res.best_action)
        errs.append(float(((a - b) ** 2).sum()))
        weights.append(res.impressions if weighting == "impression" else 1.0)
    return float(np.average(errs, weights=weights))


def _policy_actions(policy, packed, contexts) -> np.ndarray:
    if isinstance(policy, ActorNet):
        ids = policy.spec.encode_batch(contexts)
        return policy.forward(ids)
    if callable(policy):
        return np.stack([np.asarray(policy(c), dtype=np.float64) for c in contexts])
    a = np.asarray(policy, dtype=np.float64)
    if a.shape == (ACTION_DIM,):
        return np.broadcast_to(a, (len(contexts), ACTION_DIM))
    raise TypeError("policy must be an ActorNet, a callable, or a fixed action")


def evaluate_policy(policy, records: Sequence[AuctionRecord], cal: Calibrators,
                    env_cfg: EnvConfig, response_mode: str = "expected",
                    seed: int = 0) -> MetricsReport:
    """Run the stream under a policy and report business metrics.

    ``expected`` accrues calibrated click probabilities and expected
    revenue; ``sampled`` draws discrete clicks from the hidden
    ground-truth model under a fixed seed.
    """
    records = list(records)
    if not records:
        raise ValueError("empty stream")
    if response_mode not in ("expected", "sampled"):
        raise ValueError("response_mode must be 'expected' or 'sampled'")
    packed = pack_records(records)
    contexts = [r.context for r in records]
    actions = _policy_actions(policy, packed, contexts)
    winner_cols, prices = batch_auction(packed, actions, k=env_cfg.k,
                                        reserve=env_cfg.reserve)
    filled = winner_cols >= 0
    rows = np.arange(len(records))[:, None]
    safe = np.maximum(winner_cols, 0)
    impressions = int(filled.sum())
    if response_mode == "expected":
        pred_ctr = packed.pred_ctr[rows, safe]
        ctr_hat = cal.ctr.apply_array(pred_ctr, packed.device_type, packed.ad_position)
        clicks = float(ctr_hat[filled].sum())
        revenue = float((ctr_hat * prices)[filled].sum())
    else:
        true_ctr = packed.true_ctr[rows, safe]
        if np.any(np.isnan(true_ctr[filled])):
            raise ValueError("scrubbed records cannot be sampled")
        rng = np.random.default_rng(seed)
        clicked = filled & (rng.random(size=winner_cols.shape) < true_ctr)
        clicks = float(clicked.sum())
        revenue = float(prices[clicked].sum())
    return MetricsReport(impressions=impressions, clicks=clicks, revenue=revenue)


def tune_baseline(records: Sequence[AuctionRecord], cal: Calibrators,
                  env_cfg: EnvConfig, exponents: Sequence[float],
                  objective: str = "reward") -> tuple[float, float]:
    """Brute-force the baseline squash exponent.

    ``objective`` is the mean shaped reward ("reward") or RPM ("rpm");
    returns (best exponent, best objective value).
    """
    if not len(exponents):
        raise ValueError("no exponents to search")
    packed = pack_records(list(records))
    best_e, best_v = None, -np.inf
    for e in exponents:
        action = baseline_action(float(e))
        if objective == "reward":
            v = float(batch_rewards(packed, action, cal, env_cfg).mean())
        elif objective == "rpm":
            v = evaluate_policy(action, list(records), cal, env_cfg).rpm
        else:
            raise ValueError("objective must be 'reward' or 'rpm'")
        if v > best_v:
            best_e, best_v = float(e), v
    return best_e, best_v


def format_delta_table(reports: dict[str, MetricsReport], baseline: str) -> str:
    """Percent-delta table against a named baseline report."""
    if baseline not in reports:
        raise ValueError(f"baseline '{baseline}' not among reports")
    base = reports[baseline]

    def delta(x, b):
        return 0.0 if b == 0 else 100.0 * (x - b) / b

    lines = ["policy,delta_rpm_pct,delta_ctr_pct,delta_ppc_pct,rpm,ctr,ppc"]
    for name in reports:
        r = reports[name]
        ppc = r.ppc if r.ppc is not None else float("nan")
        base_ppc = base.ppc if base.ppc is not None else float("nan")
        lines.append(",".join([
            name,
            f"{delta(r.rpm, base.rpm):.2f}",
            f"{delta(r.ctr, base.ctr):.2f}",
            f"{delta(ppc, base_ppc):.2f}",
            f"{r.rpm:.4f}", f"{r.ctr:.5f}", f"{ppc:.4f}",
        ]))
    return "\n".join(lines) + "\n"
