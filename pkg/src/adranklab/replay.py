"""Synthetic auction replay logs.

Data model for auction records and transition tuples, a seeded generator
with a hidden ground-truth user model (context-dependent CTR/CVR
miscalibration), a Bernoulli response sampler, and line-delimited JSON
persistence with an optional scrubbed mode that drops the ground-truth
fields before the log is handed to a learner.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "AdCandidate",
    "SearchContext",
    "AuctionRecord",
    "TransitionTuple",
    "GeneratorConfig",
    "ConfigError",
    "LogFormatError",
    "generate_log",
    "sample_user_response",
    "sample_responses",
    "write_log",
    "read_log",
    "write_transitions",
    "read_transitions",
    "group_by_session",
]

_PROB_FLOOR = 1e-4


class ConfigError(ValueError):
    """Raised when a generator configuration is invalid."""


class LogFormatError(ValueError):
    """Raised on a malformed log line; carries the line number and field."""

    def __init__(self, line_number: int, field: str, message: str):
        super().__init__(f"line {line_number}: field '{field}': {message}")
        self.line_number = line_number
        self.field = field


@dataclass(frozen=True)
class AdCandidate:
    """One advertisement competing in an auction.

    ``true_ctr``/``true_cvr`` belong to the hidden user model; they are
    ``None`` in scrubbed logs given to learners.
    """

    candidate_id: str
    bid: float
    product_price: float
    pred_ctr: float
    pred_cvr: float
    true_ctr: float | None = None
    true_cvr: float | None = None


@dataclass(frozen=True)
class SearchContext:
    """Search-side features of one advertisement showing chance."""

    query_id: int
    query_category_id: int
    user_age_bucket: int
    user_gender: int
    user_click_count: float
    user_purchase_count: float
    ad_position: int
    device_type: int


@dataclass(frozen=True)
class AuctionRecord:
    """One showing chance: context plus the full candidate list."""

    record_id: str
    session_id: str
    context: SearchContext
    candidates: tuple[AdCandidate, ...]

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ValueError("an auction record needs at least 2 candidates")
        ids = [c.candidate_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError("candidate ids must be unique within a record")


@dataclass(frozen=True)
class TransitionTuple:
    """(state, action, reward, next_state); next_state None marks terminal."""

    state: SearchContext
    action: tuple[float, ...]
    reward: float
    next_state: SearchContext | None


@dataclass
class GeneratorConfig:
    """Knobs of the synthetic replay generator.

    ``ctr_beta``/``cvr_beta`` are distortion exponents indexed by
    ``[device_type][ad_position]``: the hidden truth is
    ``pred ** beta``, a monotone per-context warp of the predictions.

    ``cvr_ctr_coupling`` multiplies each sampled CVR by
    ``(pred_ctr / ctr_mean) ** kappa`` and ``price_cvr_coupling`` multiplies
    each product price by ``(pred_cvr / cvr_mean) ** kappa`` (means taken at
    the beta priors, so 0 keeps the marginals untouched).  Negative values
    anti-correlate the pair, which decouples the conversion and value terms
    of the rank score from the CTR term and gives the exponents of those
    terms independent leverage on the reward.
    """

    num_sessions: int = 1000
    positions_per_session: int = 4
    candidates_min: int = 5
    candidates_max: int = 20
    query_vocab: int = 10
    category_vocab: int = 5
    age_buckets: int = 6
    gender_vocab: int = 3
    device_vocab: int = 2
    bid_log_mean: float = 0.0
    bid_log_sigma: float = 0.6
    price_log_mean: float = 3.0
    price_log_sigma: float = 0.8
    ctr_beta_a: float = 2.0
    ctr_beta_b: float = 18.0
    cvr_beta_a: float = 2.0
    cvr_beta_b: float = 30.0
    cvr_ctr_coupling: float = 0.0
    price_cvr_coupling: float = 0.0
    ctr_beta: Sequence[Sequence[float]] | None = None
    cvr_beta: Sequence[Sequence[float]] | None = None

    def __post_init__(self):
        if self.ctr_beta is None:
            self.ctr_beta = _default_betas(self.device_vocab, self.positions_per_session)
        if self.cvr_beta is None:
            self.cvr_beta = _default_betas(self.device_vocab, self.positions_per_session)
        self.validate()

    def validate(self):
        for name in ("num_sessions", "positions_per_session", "candidates_min",
                     "query_vocab", "category_vocab", "age_buckets",
                     "gender_vocab", "device_vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.candidates_min < 2:
            raise ConfigError("candidates_min must be >= 2 (GSP needs a runner-up)")
        if self.candidates_max < self.candidates_min:
            raise ConfigError("candidates_max < candidates_min")
        for name in ("bid_log_sigma", "price_log_sigma", "ctr_beta_a",
                     "ctr_beta_b", "cvr_beta_a", "cvr_beta_b"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("cvr_ctr_coupling", "price_cvr_coupling"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        for name in ("ctr_beta", "cvr_beta"):
            table = getattr(self, name)
            if len(table) != self.device_vocab:
                raise ConfigError(f"{name} needs one row per device type")
            for row in table:
                if len(row) != self.positions_per_session:
                    raise ConfigError(f"{name} rows need one entry per position")
                if any(b <= 0 for b in row):
                    raise ConfigError(f"{name} exponents must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown generator config keys: {sorted(bad)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ctr_beta"] = [list(r) for r in self.ctr_beta]
        d["cvr_beta"] = [list(r) for r in self.cvr_beta]
        return d


def _default_betas(devices: int, positions: int) -> list[list[float]]:
    # Alternate over- and under-prediction across devices, drifting by position.
    out = []
    for d in range(devices):
        base = 0.8 + 0.5 * (d % 2)
        out.append([round(base + 0.08 * p, 4) for p in range(positions)])
    return out


def generate_log(config: GeneratorConfig, seed: int) -> Iterator[AuctionRecord]:
    """Yield a deterministic stream of auction records for (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    for s in range(config.num_sessions):
        session_id = f"s{s:08d}"
        query_id = int(rng.integers(config.query_vocab))
        category_id = int(rng.integers(config.category_vocab))
        age = int(rng.integers(config.age_buckets))
        gender = int(rng.integers(config.gender_vocab))
        device = int(rng.integers(config.device_vocab))
        clicks = float(np.round(rng.exponential(2.0), 6))
        purchases = float(np.round(rng.exponential(0.5), 6))
        for pos in range(config.positions_per_session):
            ctx = SearchContext(
                query_id=query_id,
                query_category_id=category_id,
                user_age_bucket=age,
                user_gender=gender,
                user_click_count=clicks,
                user_purchase_count=purchases,
                ad_position=pos,
                device_type=device,
            )
            n = int(rng.integers(config.candidates_min, config.candidates_max + 1))
            bids = rng.lognormal(config.bid_log_mean, config.bid_log_sigma, size=n)
            prices = rng.lognormal(config.price_log_mean, config.price_log_sigma, size=n)
            pred_ctr = np.clip(rng.beta(config.ctr_beta_a, config.ctr_beta_b, size=n),
                               _PROB_FLOOR, 1.0)
            pred_cvr = np.clip(rng.beta(config.cvr_beta_a, config.cvr_beta_b, size=n),
                               _PROB_FLOOR, 1.0)
            if config.cvr_ctr_coupling != 0.0:
                ctr_mean = config.ctr_beta_a / (config.ctr_beta_a + config.ctr_beta_b)
                pred_cvr = np.clip(
                    pred_cvr * (pred_ctr / ctr_mean) ** config.cvr_ctr_coupling,
                    _PROB_FLOOR, 1.0)
            if config.price_cvr_coupling != 0.0:
                cvr_mean = config.cvr_beta_a / (config.cvr_beta_a + config.cvr_beta_b)
                prices = prices * (pred_cvr / cvr_mean) ** config.price_cvr_coupling
            b_ctr = config.ctr_beta[device][pos]
            b_cvr = config.cvr_beta[device][pos]
            true_ctr = np.clip(pred_ctr ** b_ctr, _PROB_FLOOR, 1.0)
            true_cvr = np.clip(pred_cvr ** b_cvr, _PROB_FLOOR, 1.0)
            record_id = f"{session_id}-p{pos}"
            cands = tuple(
                AdCandidate(
                    candidate_id=f"{record_id}-c{j}",
                    bid=float(bids[j]),
                    product_price=float(prices[j]),
                    pred_ctr=float(pred_ctr[j]),
                    pred_cvr=float(pred_cvr[j]),
                    true_ctr=float(true_ctr[j]),
                    true_cvr=float(true_cvr[j]),
                )
                for j in range(n)
            )
            yield AuctionRecord(record_id=record_id, session_id=session_id,
                                context=ctx, candidates=cands)


def sample_user_response(candidate: AdCandidate, rng: np.random.Generator) -> tuple[bool, bool]:
    """Draw (clicked, purchased) from the hidden ground-truth rates.

    A purchase can only happen after a click.
    """
    if candidate.true_ctr is None or candidate.true_cvr is None:
        raise ValueError("candidate was scrubbed; ground-truth rates unavailable")
    clicked = bool(rng.random() < candidate.true_ctr)
    purchased = bool(clicked and rng.random() < candidate.true_cvr)
    return clicked, purchased


def sample_responses(records: Iterable[AuctionRecord], seed: int
                     ) -> Iterator[tuple[SearchContext, AdCandidate, bool, bool]]:
    """Simulated impression outcomes for every candidate, e.g. to fit calibration."""
    rng = np.random.default_rng(seed)
    for rec in records:
        for cand in rec.candidates:
            clicked, purchased = sample_user_response(cand, rng)
            yield rec.context, cand, clicked, purchased


def group_by_session(records: Iterable[AuctionRecord]) -> dict[str, list[AuctionRecord]]:
    """Group records by session id, each group sorted by ad position."""
    groups: dict[str, list[AuctionRecord]] = {}
    for rec in records:
        groups.setdefault(rec.session_id, []).append(rec)
    for recs in groups.values():
        recs.sort(key=lambda r: r.context.ad_position)
    return groups


# ---------------------------------------------------------------------------
# line-delimited JSON persistence

_CONTEXT_FIELDS = [f.name for f in dataclasses.fields(SearchContext)]
_CAND_FIELDS = ["candidate_id", "bid", "product_price", "pred_ctr", "pred_cvr"]
_CAND_TRUE_FIELDS = ["true_ctr", "true_cvr"]


def _record_to_dict(rec: AuctionRecord, scrubbed: bool) -> dict:
    cands = []
    for c in rec.candidates:
        d = {k: getattr(c, k) for k in _CAND_FIELDS}
        if not scrubbed:
            for k in _CAND_TRUE_FIELDS:
                d[k] = getattr(c, k)
        cands.append(d)
    return {
        "record_id": rec.record_id,
        "session_id": rec.session_id,
        "context": dataclasses.asdict(rec.context),
        "candidates": cands,
    }


def write_log(records: Iterable[AuctionRecord], path, scrubbed: bool = False) -> int:
    """Write one record per line; returns the number written.

    ``scrubbed`` omits the ground-truth response fields.
    """
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(_record_to_dict(rec, scrubbed)) + "\n")
            n += 1
    return n


def _parse_record(d: dict, line_number: int) -> AuctionRecord:
    def need(obj, field, kind):
        if field not in obj:
            raise LogFormatError(line_number, field, "missing")
        v = obj[field]
        try:
            return kind(v)
        except (TypeError, ValueError):
            raise LogFormatError(line_number, field, f"bad value {v!r}") from None

    ctx_d = d.get("context")
    if not isinstance(ctx_d, dict):
        raise LogFormatError(line_number, "context", "missing or not an object")
    ctx = SearchContext(
        query_id=need(ctx_d, "query_id", int),
        query_category_id=need(ctx_d, "query_category_id", int),
        user_age_bucket=need(ctx_d, "user_age_bucket", int),
        user_gender=need(ctx_d, "user_gender", int),
        user_click_count=need(ctx_d, "user_click_count", float),
        user_purchase_count=need(ctx_d, "user_purchase_count", float),
        ad_position=need(ctx_d, "ad_position", int),
        device_type=need(ctx_d, "device_type", int),
    )
    raw_cands = d.get("candidates")
    if not isinstance(raw_cands, list):
        raise LogFormatError(line_number, "candidates", "missing or not a list")
    cands = []
    for cd in raw_cands:
        kwargs = {k: need(cd, k, float) for k in _CAND_FIELDS if k != "candidate_id"}
        kwargs["candidate_id"] = need(cd, "candidate_id", str)
        for k in _CAND_TRUE_FIELDS:
            kwargs[k] = float(cd[k]) if k in cd and cd[k] is not None else None
        cands.append(AdCandidate(**kwargs))
    try:
        return AuctionRecord(
            record_id=need(d, "record_id", str),
            session_id=need(d, "session_id", str),
            context=ctx,
            candidates=tuple(cands),
        )
    except ValueError as exc:
        raise LogFormatError(line_number, "candidates", str(exc)) from None


def read_log(path) -> Iterator[AuctionRecord]:
    """Yield records from a line-delimited log; malformed lines raise
    :class:`LogFormatError` with the line number and offending field."""
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogFormatError(i, "<line>", f"invalid JSON: {exc}") from None
            yield _parse_record(d, i)


def _context_or_none(d):
    return dataclasses.asdict(d) if d is not None else None


def write_transitions(tuples: Iterable[TransitionTuple], path) -> int:
    """Persist transition tuples in the same line-delimited JSON idiom."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in tuples:
            fh.write(json.dumps({
                "state": dataclasses.asdict(t.state),
                "action": list(t.action),
                "reward": t.reward,
                "next_state": _context_or_none(t.next_state),
            }) + "\n")
            n += 1
    return n


def read_transitions(path) -> Iterator[TransitionTuple]:
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogFormatError(i, "<line>", f"invalid JSON: {exc}") from None
            try:
                state = SearchContext(**d["state"])
                nxt = d["next_state"]
                next_state = SearchContext(**nxt) if nxt is not None else None
                yield TransitionTuple(
                    state=state,
                    action=tuple(float(x) for x in d["action"]),
                    reward=float(d["reward"]),
                    next_state=next_state,
                )
            except (KeyError, TypeError) as exc:
                raise LogFormatError(i, "<tuple>", str(exc)) from None
