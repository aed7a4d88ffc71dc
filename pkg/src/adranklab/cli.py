"""Command-line entry point.

Subcommands cover the full pipeline: generate-log, calibrate,
train-offline, oracle-search, evaluate, es-online and report.  Each
reads a YAML config plus flag overrides, writes its outputs under an
output directory, and echoes the resolved config for reproducibility.
Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import auction, calibration, env, es, evaluate, nets, replay, trainer

DEFAULT_STATE_FIELDS = ("query_id", "ad_position")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(message)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(p, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError("config root must be a mapping")
    return doc


def echo_config(cfg: dict, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def generator_config(cfg: dict) -> replay.GeneratorConfig:
    return replay.GeneratorConfig.from_dict(cfg.get("generator", {}))


def env_config(cfg: dict, gen: replay.GeneratorConfig) -> env.EnvConfig:
    d = dict(cfg.get("env", {}))
    d.setdefault("positions_per_session", gen.positions_per_session)
    return env.EnvConfig(**d)


def state_spec(cfg: dict, gen: replay.GeneratorConfig) -> nets.StateSpec:
    fields = tuple(cfg.get("state_fields", DEFAULT_STATE_FIELDS))
    vocab_defaults = {
        "query_id": gen.query_vocab,
        "query_category_id": gen.category_vocab,
        "user_age_bucket": gen.age_buckets,
        "user_gender": gen.gender_vocab,
        "device_type": gen.device_vocab,
        "ad_position": gen.positions_per_session,
        "user_click_count": 16,
        "user_purchase_count": 16,
    }
    vocab = {f: int(cfg.get("vocab", {}).get(f, vocab_defaults[f])) for f in fields}
    return nets.StateSpec(fields=fields, vocab=vocab)


def build_nets(cfg: dict, spec: nets.StateSpec, bounds: auction.ActionBounds,
               seed: int, dueling: bool | None = None):
    net = cfg.get("net", {})
    rng = np.random.default_rng(seed)
    actor = nets.ActorNet(spec, bounds, emb_dim=int(net.get("emb_dim", 8)),
                          hidden=tuple(net.get("actor_hidden", (100, 100))), rng=rng)
    critic = nets.CriticNet(spec, emb_dim=int(net.get("emb_dim", 8)),
                            branch=int(net.get("critic_branch", 100)),
                            joint=tuple(net.get("critic_joint", (500, 500))),
                            dueling=net.get("dueling", True) if dueling is None else dueling,
                            rng=rng)
    return actor, critic


def action_bounds(cfg: dict) -> auction.ActionBounds:
    b = cfg.get("bounds")
    if not b:
        return auction.DEFAULT_BOUNDS
    return auction.ActionBounds(lows=np.array(b["lows"], dtype=float),
                                highs=np.array(b["highs"], dtype=float))


def load_calibrators(maps_path: str | None) -> env.Calibrators:
    if maps_path is None:
        return env.Calibrators.identity()
    ctr, cvr = calibration.load_calibrators(maps_path)
    return env.Calibrators(ctr=ctr, cvr=cvr)


def _oracle_to_dict(results: dict) -> dict:
    return {
        "states": [
            {
                "state_key": list(r.state_key),
                "best_action": r.best_action.tolist(),
                "best_reward": r.best_reward,
                "impressions": r.impressions,
                "context": dataclasses.asdict(r.context),
            }
            for _, r in sorted(results.items())
        ]
    }


def _oracle_from_dict(doc: dict) -> dict:
    out = {}
    for e in doc["states"]:
        key = tuple(e["state_key"])
        out[key] = evaluate.OracleResult(
            state_key=key,
            best_action=np.array(e["best_action"], dtype=float),
            best_reward=float(e["best_reward"]),
            impressions=int(e["impressions"]),
            context=replay.SearchContext(**e["context"]),
        )
    return out


def load_oracle(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return _oracle_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_log(args, cfg):
    gen = generator_config(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = replay.write_log(replay.generate_log(gen, args.seed), out,
                         scrubbed=args.scrubbed)
    echo_config(cfg, out.parent)
    print(f"wrote {n} records to {out}")
    return 0


def cmd_calibrate(args, cfg):
    records = list(replay.read_log(args.log))
    cal_cfg = cfg.get("calibration", {})
    responses = replay.sample_responses(records, args.seed)
    ctr_cal, cvr_cal = calibration.fit_from_responses(
        responses,
        min_samples=int(cal_cfg.get("min_samples", 1000)),
        bin_width=float(cal_cfg.get("bin_width", 0.01)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    calibration.save_calibrators(out, ctr_cal, cvr_cal)
    echo_config(cfg, out.parent)
    print(f"wrote calibration maps ({len(ctr_cal.maps)} CTR partitions) to {out}")
    return 0


def cmd_train_offline(args, cfg):
    gen = generator_config(cfg)
    records = list(replay.read_log(args.log))
    cal = load_calibrators(args.maps)
    ecfg = env_config(cfg, gen)
    bounds = action_bounds(cfg)
    spec = state_spec(cfg, gen)
    tr = dict(cfg.get("train", {}))
    preset = tr.pop("preset", None)
    if args.seed is not None:
        tr["seed"] = args.seed
    tcfg = trainer.config_from_preset(preset, **tr) if preset else trainer.TrainConfig(**tr)

    tuples = trainer.explore(records, bounds, cal, ecfg, seed=tcfg.seed,
                             passes=int(cfg.get("explore_passes", 1)))
    store = trainer.TransitionStore.from_tuples(tuples, spec)
    actor, critic = build_nets(cfg, spec, bounds, seed=tcfg.seed)

    eval_fn = None
    if args.oracle:
        oracle = load_oracle(args.oracle)

        def eval_fn(actor_params):
            probe = actor.clone_with(actor_params)
            return {
                "oracle_error": evaluate.policy_oracle_error(probe, oracle, bounds),
                "oracle_error_weighted": evaluate.policy_oracle_error(
                    probe, oracle, bounds, weighting="impression"),
            }

    result = trainer.train(store, actor, critic, tcfg, eval_fn=eval_fn)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.actor_params.save(out_dir / "actor.ckpt")
    result.critic_params.save(out_dir / "critic.ckpt")
    trainer.write_curves(result.curves, out_dir / "curves.csv")
    echo_config(cfg, out_dir)
    last = result.curves[-1] if result.curves else {}
    print(f"trained {tcfg.total_steps} steps; final checkpoint row: {last}")
    return 0


def cmd_oracle_search(args, cfg):
    gen = generator_config(cfg)
    records = list(replay.read_log(args.log))
    cal = load_calibrators(args.maps)
    ecfg = env_config(cfg, gen)
    grid_cfg = cfg.get("grid", {})
    grid = evaluate.GridSpec(tuple(tuple(c) for c in grid_cfg["components"])) \
        if "components" in grid_cfg else evaluate.GridSpec()
    results = evaluate.grid_search(
        records, cal, ecfg, grid,
        max_grid_points=int(grid_cfg.get("max_points", 200_000)),
        max_records_per_state=grid_cfg.get("max_records_per_state"),
        seed=args.seed or 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(_oracle_to_dict(results), fh, indent=1)
    echo_config(cfg, out.parent)
    print(f"searched {grid.size()} grid points over {len(results)} states -> {out}")
    return 0


def _resolve_policy(args, cfg, spec, bounds):
    if args.policy == "baseline":
        if args.squash is None:
            raise UsageError("--squash is required for --policy baseline")
        return auction.baseline_action(args.squash), f"baseline(e={args.squash})"
    if args.policy == "fixed":
        if args.action is None:
            raise UsageError("--action is required for --policy fixed")
        a = np.array([float(x) for x in args.action.split(",")])
        if a.shape != (auction.ACTION_DIM,):
            raise UsageError("--action needs 5 comma-separated numbers")
        return a, f"fixed({args.action})"
    if args.policy == "actor":
        if args.actor_ckpt is None:
            raise UsageError("--actor-ckpt is required for --policy actor")
        params = nets.ParameterSet.load(args.actor_ckpt)
        actor, _ = build_nets(cfg, spec, bounds, seed=0)
        return actor.clone_with(params), "actor"
    raise UsageError(f"unknown policy '{args.policy}'")


def cmd_evaluate(args, cfg):
    gen = generator_config(cfg)
    records = list(replay.read_log(args.log))
    cal = load_calibrators(args.maps)
    ecfg = env_config(cfg, gen)
    bounds = action_bounds(cfg)
    spec = state_spec(cfg, gen)
    policy, name = _resolve_policy(args, cfg, spec, bounds)
    reports = {}
    if args.baseline_squash is not None:
        reports["baseline"] = evaluate.evaluate_policy(
            auction.baseline_action(args.baseline_squash), records, cal, ecfg,
            response_mode=args.mode, seed=args.seed or 0)
    reports[name] = evaluate.evaluate_policy(policy, records, cal, ecfg,
                                             response_mode=args.mode,
                                             seed=args.seed or 0)
    table = evaluate.format_delta_table(
        reports, "baseline" if "baseline" in reports else name)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table, encoding="utf-8")
    echo_config(cfg, out.parent)
    print(table, end="")
    return 0


def cmd_es_online(args, cfg):
    gen = generator_config(cfg)
    records = list(replay.read_log(args.log))
    ecfg = env_config(cfg, gen)
    bounds = action_bounds(cfg)
    spec = state_spec(cfg, gen)
    params = nets.ParameterSet.load(args.actor_ckpt)
    actor, _ = build_nets(cfg, spec, bounds, seed=0)
    actor = actor.clone_with(params)
    es_cfg_d = dict(cfg.get("es", {}))
    if args.seed is not None:
        es_cfg_d["seed"] = args.seed
    escfg = es.EsConfig(**es_cfg_d)
    final, reports = es.run_es(actor, records, ecfg, escfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    final.save(out_dir / "actor_es.ckpt")
    with open(out_dir / "es_iterations.csv", "w", encoding="utf-8") as fh:
        fh.write("iteration,mean_reward,rpm,ctr,ppc,impressions,clicks,revenue\n")
        for r in reports:
            ppc = r.ppc if r.ppc is not None else float("nan")
            fh.write(f"{r.iteration},{r.mean_reward!r},{r.rpm!r},{r.ctr!r},"
                     f"{ppc!r},{r.impressions},{r.clicks},{r.revenue!r}\n")
    echo_config(cfg, out_dir)
    print(f"ran {escfg.iterations} ES iterations; "
          f"mean reward {reports[0].mean_reward:.4f} -> {reports[-1].mean_reward:.4f}")
    return 0


def cmd_report(args, cfg):
    run_dir = Path(args.run_dir)
    curves = run_dir / "curves.csv"
    if not curves.exists():
        raise FileNotFoundError(f"no curves.csv under {run_dir}")
    lines = curves.read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    widths = [max(len(h), 12) for h in header]
    table = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        table.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    text = "\n".join(table) + "\n"
    (run_dir / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    if not args.no_plot:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            return 0
        data = {h: [] for h in header}
        for r in rows:
            for h, c in zip(header, r):
                try:
                    data[h].append(float(c))
                except ValueError:
                    data[h].append(np.nan)
        x = data.get("steps", data.get("push", range(len(rows))))
        fig, ax = plt.subplots(figsize=(7, 4))
        for h in header:
            if h in ("push", "steps"):
                continue
            ax.plot(x, data[h], label=h)
        ax.set_xlabel("training steps")
        ax.legend()
        ax.set_yscale("log")
        fig.tight_layout()
        fig.savefig(run_dir / "curves.png", dpi=110)
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="adranklab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--config", default=None, help="YAML config file")
        sp.add_argument("--seed", type=int, default=seed_default)

    sp = sub.add_parser("generate-log", help="generate a synthetic replay log")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scrubbed", action="store_true",
                    help="omit ground-truth response fields")
    sp.set_defaults(fn=cmd_generate_log)

    sp = sub.add_parser("calibrate", help="fit isotonic calibration maps")
    common(sp)
    sp.add_argument("--log", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_calibrate)

    sp = sub.add_parser("train-offline", help="run asynchronous actor-critic training")
    common(sp, seed_default=None)
    sp.add_argument("--log", required=True)
    sp.add_argument("--maps", default=None)
    sp.add_argument("--oracle", default=None,
                    help="oracle-search output for convergence curves")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=cmd_train_offline)

    sp = sub.add_parser("oracle-search", help="brute-force the best per-state action")
    common(sp)
    sp.add_argument("--log", required=True)
    sp.add_argument("--maps", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_oracle_search)

    sp = sub.add_parser("evaluate", help="business metrics of a policy on a stream")
    common(sp)
    sp.add_argument("--log", required=True)
    sp.add_argument("--maps", default=None)
    sp.add_argument("--policy", required=True, choices=["baseline", "fixed", "actor"])
    sp.add_argument("--squash", type=float, default=None)
    sp.add_argument("--action", default=None, help="5 comma-separated numbers")
    sp.add_argument("--actor-ckpt", default=None)
    sp.add_argument("--baseline-squash", type=float, default=None,
                    help="also evaluate a baseline and report deltas against it")
    sp.add_argument("--mode", default="expected", choices=["expected", "sampled"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("es-online", help="evolution-strategy online fine-tuning")
    common(sp, seed_default=None)
    sp.add_argument("--log", required=True)
    sp.add_argument("--actor-ckpt", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=cmd_es_online)

    sp = sub.add_parser("report", help="render curves and tables for a run directory")
    common(sp)
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--no-plot", action="store_true")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, replay.LogFormatError, replay.ConfigError,
            ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
