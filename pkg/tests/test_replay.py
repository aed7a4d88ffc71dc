import dataclasses

import numpy as np
import pytest

from adranklab.replay import (AdCandidate, AuctionRecord, ConfigError,
                              GeneratorConfig, LogFormatError, SearchContext,
                              TransitionTuple, generate_log, group_by_session,
                              read_log, read_transitions, sample_user_response,
                              write_log, write_transitions)


def test_generation_deterministic(small_config, tmp_path):
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    write_log(generate_log(small_config, seed=7), a)
    write_log(generate_log(small_config, seed=7), b)
    assert a.read_bytes() == b.read_bytes()


def test_different_seeds_differ(small_config):
    a = list(generate_log(small_config, seed=1))
    b = list(generate_log(small_config, seed=2))
    assert a != b


def test_identity_miscalibration_matches_predictions():
    cfg = GeneratorConfig(num_sessions=300,
                          ctr_beta=[[1.0] * 4, [1.0] * 4],
                          cvr_beta=[[1.0] * 4, [1.0] * 4])
    for rec in generate_log(cfg, seed=3):
        for c in rec.candidates:
            assert c.true_ctr == pytest.approx(c.pred_ctr)
            assert c.true_cvr == pytest.approx(c.pred_cvr)


def test_distinct_device_bias_curves_diverge():
    # Two devices with opposite distortions: bucketed empirical click rates
    # per device must track their own curve, computed by a bucket-and-average
    # oracle over the generated stream.
    cfg = GeneratorConfig(num_sessions=4000, positions_per_session=2,
                          candidates_min=5, candidates_max=8,
                          ctr_beta=[[0.6, 0.6], [1.6, 1.6]],
                          cvr_beta=[[1.0, 1.0], [1.0, 1.0]])
    rng = np.random.default_rng(5)
    sums = {0: [0.0, 0.0, 0], 1: [0.0, 0.0, 0]}  # device -> [clicks, preds, n]
    for rec in generate_log(cfg, seed=9):
        dev = rec.context.device_type
        for c in rec.candidates:
            clicked, _ = sample_user_response(c, rng)
            acc = sums[dev]
            acc[0] += clicked
            acc[1] += c.pred_ctr
            acc[2] += 1
    rates = {d: sums[d][0] / sums[d][2] for d in sums}
    mean_pred = {d: sums[d][1] / sums[d][2] for d in sums}
    # beta < 1 inflates the truth above the prediction, beta > 1 deflates it
    assert rates[0] > mean_pred[0]
    assert rates[1] < mean_pred[1]


def test_zero_coupling_is_identity(small_config):
    # the coupling transforms are applied after sampling, so switching them
    # off must reproduce the original stream exactly
    plain = list(generate_log(small_config, seed=11))
    cfg = dataclasses.replace(small_config, cvr_ctr_coupling=0.0,
                              price_cvr_coupling=0.0)
    assert list(generate_log(cfg, seed=11)) == plain


def test_negative_couplings_anticorrelate():
    cfg = GeneratorConfig(num_sessions=800, positions_per_session=2,
                          candidates_min=5, candidates_max=8,
                          ctr_beta_a=2.0, ctr_beta_b=2.0,
                          cvr_beta_a=2.0, cvr_beta_b=12.0,
                          cvr_ctr_coupling=-1.0, price_cvr_coupling=-1.0)
    ctrs, cvrs, prices = [], [], []
    for rec in generate_log(cfg, seed=4):
        for c in rec.candidates:
            ctrs.append(c.pred_ctr)
            cvrs.append(c.pred_cvr)
            prices.append(c.product_price)
    log = np.log
    assert np.corrcoef(log(ctrs), log(cvrs))[0, 1] < -0.5
    assert np.corrcoef(log(cvrs), log(prices))[0, 1] < -0.5
    # with coupling -1 the product ctr*cvr reduces to scaled raw noise,
    # independent of ctr (up to the clip at the probability floor)
    prod = np.array(ctrs) * np.array(cvrs)
    assert abs(np.corrcoef(log(ctrs), log(prod))[0, 1]) < 0.1


def test_coupled_truth_follows_coupled_predictions():
    # the per-context warp applies to the coupled CVR, not the raw draw
    cfg = GeneratorConfig(num_sessions=50, cvr_ctr_coupling=-1.0,
                          ctr_beta=[[1.0] * 4, [1.0] * 4],
                          cvr_beta=[[1.0] * 4, [1.0] * 4])
    for rec in generate_log(cfg, seed=6):
        for c in rec.candidates:
            assert c.true_cvr == pytest.approx(c.pred_cvr)


@pytest.mark.parametrize("bad", [
    {"num_sessions": 0},
    {"candidates_min": 1},
    {"candidates_min": 8, "candidates_max": 4},
    {"query_vocab": 0},
    {"bid_log_sigma": -1.0},
    {"ctr_beta": [[1.0, 1.0, 1.0, 1.0]]},          # one row for two devices
    {"ctr_beta": [[1.0], [1.0]]},                   # wrong row length
    {"ctr_beta": [[0.0] * 4, [1.0] * 4]},           # non-positive exponent
    {"cvr_ctr_coupling": float("nan")},
    {"price_cvr_coupling": float("inf")},
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigError):
        GeneratorConfig(**bad)


def test_unknown_config_key_rejected():
    with pytest.raises(ConfigError):
        GeneratorConfig.from_dict({"bogus": 1})


def _candidate(**kw):
    base = dict(candidate_id="c0", bid=1.0, product_price=10.0,
                pred_ctr=0.1, pred_cvr=0.05, true_ctr=0.1, true_cvr=0.05)
    base.update(kw)
    return AdCandidate(**base)


def test_record_needs_two_candidates_and_unique_ids():
    ctx = SearchContext(0, 0, 0, 0, 0.0, 0.0, 0, 0)
    with pytest.raises(ValueError):
        AuctionRecord("r", "s", ctx, (_candidate(),))
    with pytest.raises(ValueError):
        AuctionRecord("r", "s", ctx, (_candidate(), _candidate()))


def test_sample_user_response_edge_cases(rng):
    zero = _candidate(true_ctr=0.0)
    assert all(sample_user_response(zero, rng) == (False, False) for _ in range(50))
    sure = _candidate(true_ctr=1.0, true_cvr=1.0)
    assert sample_user_response(sure, rng) == (True, True)
    scrubbed = _candidate(true_ctr=None, true_cvr=None)
    with pytest.raises(ValueError):
        sample_user_response(scrubbed, rng)


def test_click_frequency_matches_rate():
    rng = np.random.default_rng(123)
    cand = _candidate(true_ctr=0.3)
    n = 100_000
    clicks = sum(sample_user_response(cand, rng)[0] for _ in range(n))
    assert clicks / n == pytest.approx(0.3, abs=0.01)


def test_log_round_trip(small_records, tmp_path):
    path = tmp_path / "log.jsonl"
    write_log(small_records, path)
    assert list(read_log(path)) == small_records


def test_empty_log(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert list(read_log(path)) == []


def test_scrubbed_log_has_no_truth(small_records, tmp_path):
    path = tmp_path / "scrubbed.jsonl"
    write_log(small_records[:20], path, scrubbed=True)
    assert "true_ctr" not in path.read_text()
    for rec in read_log(path):
        assert all(c.true_ctr is None and c.true_cvr is None for c in rec.candidates)


def test_malformed_line_reports_position(small_records, tmp_path):
    path = tmp_path / "bad.jsonl"
    write_log(small_records[:3], path)
    lines = path.read_text().splitlines()
    lines[1] = lines[1].replace('"bid"', '"bogus"')
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(LogFormatError) as exc:
        list(read_log(path))
    assert exc.value.line_number == 2
    assert exc.value.field == "bid"


def test_invalid_json_line(tmp_path):
    path = tmp_path / "garbage.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(LogFormatError):
        list(read_log(path))


def test_group_by_session_sorted(small_records):
    groups = group_by_session(small_records)
    for recs in groups.values():
        assert [r.context.ad_position for r in recs] == list(range(len(recs)))


def test_transition_round_trip(small_records, tmp_path):
    ctx = small_records[0].context
    nxt = dataclasses.replace(ctx, ad_position=ctx.ad_position + 1)
    tuples = [
        TransitionTuple(state=ctx, action=(1.0, 0.0, 1.0, 0.0, 1.0),
                        reward=0.25, next_state=nxt),
        TransitionTuple(state=nxt, action=(0.5, 2.0, 1.5, 3.0, 0.75),
                        reward=0.0, next_state=None),
    ]
    path = tmp_path / "tuples.jsonl"
    write_transitions(tuples, path)
    assert list(read_transitions(path)) == tuples
