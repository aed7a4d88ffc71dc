"""Parameterized ranking function and GSP pricing.

The rank score of a candidate under action a = (a1..a5) is

    CTR**a1 * bid  +  a2 * (CTR*CVR)**a3  +  a4 * CVR**a5 * price

The winner of each slot pays the smallest price sufficient to keep the
slot (generalized second price), floored at a reserve and capped at the
winner's own bid.  A one-exponent squashed-eCPM baseline is the special
case a2 = a4 = 0.

Two evaluation paths are provided: a scalar per-record path
(:func:`run_auction`) used as the reference semantics, and a packed
columnar path (:class:`PackedAuctions`, :func:`batch_auction`) used by
the oracle grid search and policy evaluation.  Tests pin the two paths
to each other.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .replay import AdCandidate, AuctionRecord

__all__ = [
    "ActionBounds",
    "DEFAULT_BOUNDS",
    "AuctionOutcome",
    "rank_score",
    "run_auction",
    "baseline_score",
    "baseline_action",
    "PackedAuctions",
    "pack_records",
    "batch_scores",
    "batch_auction",
]

ACTION_DIM = 5


@dataclass(frozen=True)
class ActionBounds:
    """Per-component box for the 5 ranking parameters."""

    lows: np.ndarray
    highs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lows", np.asarray(self.lows, dtype=np.float64))
        object.__setattr__(self, "highs", np.asarray(self.highs, dtype=np.float64))
        if self.lows.shape != (ACTION_DIM,) or self.highs.shape != (ACTION_DIM,):
            raise ValueError("bounds must have 5 components")
        if not np.all(self.highs > self.lows):
            raise ValueError("highs must exceed lows componentwise")

    @property
    def span(self) -> np.ndarray:
        return self.highs - self.lows

    def contains(self, action) -> bool:
        a = np.asarray(action, dtype=np.float64)
        return bool(np.all(np.isfinite(a)) and np.all(a >= self.lows) and np.all(a <= self.highs))

    def clip(self, action) -> np.ndarray:
        return np.clip(np.asarray(action, dtype=np.float64), self.lows, self.highs)

    def normalize(self, action) -> np.ndarray:
        """Map an action into unit-box coordinates."""
        return (np.asarray(action, dtype=np.float64) - self.lows) / self.span


# exponents a1, a3, a5 in [0.5, 2]; weights a2, a4 in [0, 10]
DEFAULT_BOUNDS = ActionBounds(
    lows=np.array([0.5, 0.0, 0.5, 0.0, 0.5]),
    highs=np.array([2.0, 10.0, 2.0, 10.0, 2.0]),
)


@dataclass(frozen=True)
class AuctionOutcome:
    """Top-k allocation of one auction."""

    winner_ids: tuple[str, ...]
    click_prices: tuple[float, ...]
    scores: dict[str, float] = field(repr=False)


def _score_terms(ctr, cvr, bid, price, action):
    a1, a2, a3, a4, a5 = action
    revenue = ctr ** a1 * bid
    user = a2 * (ctr * cvr) ** a3
    advertiser = a4 * cvr ** a5 * price
    return revenue, user, advertiser


def rank_score(candidate: AdCandidate, action) -> float:
    """Rank score of one candidate under the 5-parameter ranking function."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (ACTION_DIM,):
        raise ValueError("action must have 5 components")
    r, u, adv = _score_terms(candidate.pred_ctr, candidate.pred_cvr,
                             candidate.bid, candidate.product_price, a)
    score = r + u + adv
    if not np.isfinite(score):
        raise ValueError(f"non-finite rank score for {candidate.candidate_id}")
    return float(score)


def baseline_score(candidate: AdCandidate, squash_exponent: float) -> float:
    """Squashed-eCPM baseline score CTR**e * bid."""
    if squash_exponent <= 0:
        raise ValueError("squash exponent must be > 0")
    return float(candidate.pred_ctr ** squash_exponent * candidate.bid)


def baseline_action(squash_exponent: float) -> np.ndarray:
    """Action vector whose auctions coincide with the baseline ranking."""
    return np.array([squash_exponent, 0.0, 1.0, 0.0, 1.0])


def run_auction(record: AuctionRecord, action, k: int = 1,
                reserve: float = 0.01) -> AuctionOutcome:
    """Allocate the top-k slots of one record and GSP-price each winner.

    Ordering is by descending (score, bid, candidate_id).  The winner of
    slot i pays the minimum bid that keeps its score at or above the
    next-ranked score, clamped into [reserve, own bid].  When no
    next-ranked candidate exists a zero-score sentinel prices the slot.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    a = np.asarray(action, dtype=np.float64)
    scored = []
    for c in record.candidates:
        r, u, adv = _score_terms(c.pred_ctr, c.pred_cvr, c.bid, c.product_price, a)
        s = r + u + adv
        if not np.isfinite(s):
            raise ValueError(f"non-finite rank score for {c.candidate_id}")
        scored.append((c, float(s), float(u + adv)))
    scored.sort(key=lambda t: (-t[1], -t[0].bid, t[0].candidate_id))

    a1 = a[0]
    winners, prices = [], []
    slots = min(k, len(scored))
    for i in range(slots):
        cand, _, own_non_revenue = scored[i]
        next_score = scored[i + 1][1] if i + 1 < len(scored) else 0.0
        denom = cand.pred_ctr ** a1
        price = (next_score - own_non_revenue) / denom
        price = max(price, reserve)
        price = min(price, cand.bid)
        winners.append(cand.candidate_id)
        prices.append(float(price))
    return AuctionOutcome(
        winner_ids=tuple(winners),
        click_prices=tuple(prices),
        scores={c.candidate_id: s for c, s, _ in scored},
    )


# ---------------------------------------------------------------------------
# packed columnar representation for vectorized evaluation


@dataclass
class PackedAuctions:
    """Columnar view of a list of records, padded to a common width.

    Candidates within each record are pre-sorted by descending bid then
    candidate id, so a stable argmax over scores reproduces the scalar
    path's tie-break.
    """

    bid: np.ndarray          # (R, C)
    price: np.ndarray        # (R, C)
    pred_ctr: np.ndarray     # (R, C)
    pred_cvr: np.ndarray     # (R, C)
    true_ctr: np.ndarray     # (R, C), nan where unknown
    true_cvr: np.ndarray     # (R, C)
    valid: np.ndarray        # (R, C) bool
    n_candidates: np.ndarray  # (R,)
    device_type: np.ndarray  # (R,)
    ad_position: np.ndarray  # (R,)
    records: list            # original AuctionRecord list
    order: np.ndarray        # (R, C) original candidate index per packed column

    @property
    def num_records(self) -> int:
        return self.bid.shape[0]


def pack_records(records: Sequence[AuctionRecord]) -> PackedAuctions:
    records = list(records)
    if not records:
        raise ValueError("cannot pack an empty record list")
    width = max(len(r.candidates) for r in records)
    R = len(records)
    shape = (R, width)
    bid = np.zeros(shape)
    price = np.zeros(shape)
    pctr = np.full(shape, 1e-9)
    pcvr = np.full(shape, 1e-9)
    tctr = np.full(shape, np.nan)
    tcvr = np.full(shape, np.nan)
    valid = np.zeros(shape, dtype=bool)
    order = np.zeros(shape, dtype=np.int64)
    ncand = np.zeros(R, dtype=np.int64)
    device = np.zeros(R, dtype=np.int64)
    position = np.zeros(R, dtype=np.int64)
    for i, rec in enumerate(records):
        idx = sorted(range(len(rec.candidates)),
                     key=lambda j: (-rec.candidates[j].bid, rec.candidates[j].candidate_id))
        ncand[i] = len(idx)
        device[i] = rec.context.device_type
        position[i] = rec.context.ad_position
        for col, j in enumerate(idx):
            c = rec.candidates[j]
            bid[i, col] = c.bid
            price[i, col] = c.product_price
            pctr[i, col] = c.pred_ctr
            pcvr[i, col] = c.pred_cvr
            if c.true_ctr is not None:
                tctr[i, col] = c.true_ctr
            if c.true_cvr is not None:
                tcvr[i, col] = c.true_cvr
            valid[i, col] = True
            order[i, col] = j
    return PackedAuctions(bid=bid, price=price, pred_ctr=pctr, pred_cvr=pcvr,
                          true_ctr=tctr, true_cvr=tcvr, valid=valid,
                          n_candidates=ncand, device_type=device,
                          ad_position=position, records=records, order=order)


def _expand_actions(actions, R):
    a = np.asarray(actions, dtype=np.float64)
    if a.shape == (ACTION_DIM,):
        a = np.broadcast_to(a, (R, ACTION_DIM))
    if a.shape != (R, ACTION_DIM):
        raise ValueError("actions must be (5,) or (num_records, 5)")
    return a


def batch_scores(packed: PackedAuctions, actions) -> np.ndarray:
    """Rank scores (R, C); invalid slots are -inf."""
    a = _expand_actions(actions, packed.num_records)
    a1 = a[:, 0:1]
    a2 = a[:, 1:2]
    a3 = a[:, 2:3]
    a4 = a[:, 3:4]
    a5 = a[:, 4:5]
    scores = (packed.pred_ctr ** a1 * packed.bid
              + a2 * (packed.pred_ctr * packed.pred_cvr) ** a3
              + a4 * packed.pred_cvr ** a5 * packed.price)
    return np.where(packed.valid, scores, -np.inf)


def batch_auction(packed: PackedAuctions, actions, k: int = 1,
                  reserve: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized top-k GSP over all packed records.

    Returns (winner_cols, click_prices), both (R, k); winner_cols index
    into the packed columns and are -1 for unfilled slots.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    R = packed.num_records
    a = _expand_actions(actions, R)
    scores = batch_scores(packed, a)
    work = scores.copy()
    rows = np.arange(R)

    ranked_cols = np.empty((R, k + 1), dtype=np.int64)
    ranked_scores = np.empty((R, k + 1))
    for j in range(k + 1):
        col = np.argmax(work, axis=1)
        ranked_cols[:, j] = col
        ranked_scores[:, j] = work[rows, col]
        work[rows, col] = -np.inf

    a1, a2, a3, a4, a5 = (a[:, i] for i in range(ACTION_DIM))
    winner_cols = np.full((R, k), -1, dtype=np.int64)
    prices = np.zeros((R, k))
    for j in range(k):
        col = ranked_cols[:, j]
        filled = np.isfinite(ranked_scores[:, j])
        ctr_w = packed.pred_ctr[rows, col]
        cvr_w = packed.pred_cvr[rows, col]
        bid_w = packed.bid[rows, col]
        price_w = packed.price[rows, col]
        next_score = ranked_scores[:, j + 1]
        next_score = np.where(np.isfinite(next_score), next_score, 0.0)
        own_non_revenue = a2 * (ctr_w * cvr_w) ** a3 + a4 * cvr_w ** a5 * price_w
        p = (next_score - own_non_revenue) / (ctr_w ** a1)
        p = np.maximum(p, reserve)
        p = np.minimum(p, bid_w)
        winner_cols[:, j] = np.where(filled, col, -1)
        prices[:, j] = np.where(filled, p, 0.0)
    return winner_cols, prices
