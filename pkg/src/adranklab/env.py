"""Simulated sponsored-search environment over replay records.

A step re-runs one logged auction under a chosen action, shapes the
reward from calibrated response rates and the GSP click prices,

    r = sum over winners of (ctr_hat * click_price + delta * ctr_hat)

and synthesizes the next state by carrying the query features forward,
adding the expected user behavior to the counters and advancing the ad
position.  Only within-session transitions are modeled; a session ends
when the last position is reached.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .auction import PackedAuctions, batch_auction, run_auction
from .calibration import IdentityCalibrator
from .replay import AuctionRecord, SearchContext, TransitionTuple

__all__ = ["EnvConfig", "Calibrators", "step", "rollout", "batch_rewards"]


@dataclass(frozen=True)
class EnvConfig:
    delta: float = 1.0            # reward weight on expected clicks
    gamma: float = 0.9            # discount
    positions_per_session: int = 4
    reserve: float = 0.01
    k: int = 1                    # slots per auction
    use_calibrated_in_score: bool = False

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must be strictly inside (0, 1)")
        if self.delta < 0 or not np.isfinite(self.delta):
            raise ValueError("delta must be finite and >= 0")
        if self.positions_per_session < 1 or self.k < 1:
            raise ValueError("positions_per_session and k must be >= 1")


@dataclass(frozen=True)
class Calibrators:
    """CTR and CVR calibrators used for rewards and state updates."""

    ctr: object
    cvr: object

    @classmethod
    def identity(cls) -> "Calibrators":
        return cls(ctr=IdentityCalibrator(), cvr=IdentityCalibrator())


def _calibrated_record(record: AuctionRecord, cal: Calibrators) -> AuctionRecord:
    cands = tuple(
        dataclasses.replace(
            c,
            pred_ctr=cal.ctr.apply(c.pred_ctr, record.context),
            pred_cvr=cal.cvr.apply(c.pred_cvr, record.context),
        )
        for c in record.candidates
    )
    return dataclasses.replace(record, candidates=cands)


def step(record: AuctionRecord, action, cal: Calibrators,
         cfg: EnvConfig) -> TransitionTuple:
    """Run one auction under ``action`` and emit a transition tuple."""
    ctx = record.context
    scored_record = _calibrated_record(record, cal) if cfg.use_calibrated_in_score else record
    outcome = run_auction(scored_record, action, k=cfg.k, reserve=cfg.reserve)

    by_id = {c.candidate_id: c for c in record.candidates}
    reward = 0.0
    exp_clicks = 0.0
    exp_purchases = 0.0
    for wid, price in zip(outcome.winner_ids, outcome.click_prices):
        cand = by_id[wid]
        ctr_hat = cal.ctr.apply(cand.pred_ctr, ctx)
        cvr_hat = cal.cvr.apply(cand.pred_cvr, ctx)
        reward += ctr_hat * price + cfg.delta * ctr_hat
        exp_clicks += ctr_hat
        exp_purchases += ctr_hat * cvr_hat

    terminal = ctx.ad_position >= cfg.positions_per_session - 1
    if terminal:
        next_state = None
    else:
        next_state = dataclasses.replace(
            ctx,
            user_click_count=ctx.user_click_count + exp_clicks,
            user_purchase_count=ctx.user_purchase_count + exp_purchases,
            ad_position=ctx.ad_position + 1,
        )
    return TransitionTuple(state=ctx, action=tuple(float(x) for x in np.asarray(action)),
                           reward=float(reward), next_state=next_state)


def rollout(session_records: Sequence[AuctionRecord],
            policy: Callable[[SearchContext], np.ndarray],
            cal: Calibrators, cfg: EnvConfig) -> list[TransitionTuple]:
    """Chain steps through one session, threading the synthesized state.

    Records must be ordered by ad position starting at 0; each step's
    next state becomes the following step's state.
    """
    if not session_records:
        return []
    positions = [r.context.ad_position for r in session_records]
    if positions != list(range(len(session_records))):
        raise ValueError(f"session positions out of order: {positions}")
    state = session_records[0].context
    out: list[TransitionTuple] = []
    for rec in session_records:
        rec = dataclasses.replace(rec, context=state)
        t = step(rec, policy(state), cal, cfg)
        out.append(t)
        if t.next_state is None:
            break
        state = t.next_state
    return out


def batch_rewards(packed: PackedAuctions, actions, cal: Calibrators,
                  cfg: EnvConfig) -> np.ndarray:
    """Shaped reward of every packed record under ``actions``; (R,).

    Vectorized counterpart of :func:`step`'s reward computation, used by
    the grid-search oracle and policy evaluation.  Calibrated scoring is
    not supported on this path.
    """
    if cfg.use_calibrated_in_score:
        raise NotImplementedError("calibrated scoring is scalar-path only")
    winner_cols, prices = batch_auction(packed, actions, k=cfg.k, reserve=cfg.reserve)
    R, k = winner_cols.shape
    rows = np.arange(R)[:, None]
    safe_cols = np.maximum(winner_cols, 0)
    pred_ctr = packed.pred_ctr[rows, safe_cols]
    ctr_hat = cal.ctr.apply_array(pred_ctr, packed.device_type, packed.ad_position)
    filled = winner_cols >= 0
    per_slot = np.where(filled, ctr_hat * prices + cfg.delta * ctr_hat, 0.0)
    return per_slot.sum(axis=1)
