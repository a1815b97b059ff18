"""Command-line entry point.

Stage commands work on a workspace directory laid out like a pipeline
run (``data/``, ``examples/``, ``features/``, ``model/``, ``baselines/``,
``reports/``), and take the same config file and ``--set`` overrides.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl

logger = logging.getLogger("filterank")


def _config(args) -> pl.PipelineConfig:
    overrides: dict = {}
    for item in getattr(args, "set", None) or []:
        _merge(overrides, pl.parse_override(item))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return pl.load_config(args.config, overrides)


def _merge(dst: dict, src: dict) -> None:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v


def _workspace(args, cfg) -> Path:
    out = Path(args.dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=1, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
        print(f"wrote {out}")
    else:
        print(text)


def cmd_gen(args) -> int:
    over = {"world": {}, "sim": {}}
    for flag, section, key in (("k", "world", "k"), ("segments", "world", "num_segments"),
                               ("bias", "world", "presentation_bias_strength"),
                               ("presentation", "world", "presentation"), ("users", "sim", "num_users")):
        value = getattr(args, flag)
        if value is not None:
            over[section][key] = value
    cfg = pl.config_from_dict(over, _config(args))
    out = Path(args.out_dir) if args.out_dir else _workspace(args, cfg) / "data"
    for path in pl.generate_data(cfg, out).values():
        print(path)
    return 0


def cmd_attribute(args) -> int:
    from .attribution import positive_rate, split_dataset, write_examples

    over = {"attribution": {}}
    if args.lookback is not None:
        over["attribution"]["lookback_days"] = args.lookback
    if args.cancel_window is not None:
        over["attribution"]["cancellation_days"] = args.cancel_window
    cfg = pl.config_from_dict(over, _config(args))
    ws = Path(args.dir or cfg.out_dir)
    searches = Path(args.searches) if args.searches else ws / "data/searches.jsonl"
    bookings = Path(args.bookings) if args.bookings else ws / "data/bookings.jsonl"
    examples, rs, rb = pl.attribute_files(searches, bookings, cfg.attribution)
    print(f"searches: {rs.accepted} read, {rs.rejected} rejected; bookings: {rb.accepted} read, {rb.rejected} rejected")
    print(f"examples: {len(examples)}, positive rate {positive_rate(examples):.4f}")
    if args.out:
        write_examples(args.out, examples)
        print(args.out)
    else:
        tr, ev = split_dataset(examples, cfg.eval.train_frac, cfg.seed)
        (ws / "examples").mkdir(parents=True, exist_ok=True)
        write_examples(ws / "examples/train.jsonl", tr)
        write_examples(ws / "examples/eval.jsonl", ev)
        print(ws / "examples/train.jsonl")
        print(ws / "examples/eval.jsonl")
    return 0


def cmd_fit(args) -> int:
    from .attribution import read_examples
    from .features import fit_schema

    cfg = _config(args)
    ws = Path(args.dir or cfg.out_dir)
    train_path = Path(args.train) if args.train else ws / "examples/train.jsonl"
    out = Path(args.out) if args.out else ws / "features/schema.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    schema = fit_schema(read_examples(train_path), cfg.world.k, exclude_groups=args.exclude or ())
    schema.save(out)
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    over = {k: v for k, v in (("epochs", args.epochs), ("learning_rate", args.lr)) if v is not None}
    if over:
        cfg = pl.config_from_dict({"model": over}, cfg)
    ws = Path(args.dir or cfg.out_dir)
    out = Path(args.out) if args.out else ws / "model"
    eval_path = Path(args.eval) if args.eval else ws / "examples/eval.jsonl"
    pl.train_files(
        Path(args.train) if args.train else ws / "examples/train.jsonl",
        eval_path if eval_path.exists() else None,
        Path(args.schema) if args.schema else ws / "features/schema.json",
        replace(cfg.model, seed=cfg.seed),
        out,
    )
    history = json.loads((out / "history.json").read_text(encoding="utf-8"))
    for i, loss in enumerate(history["train_loss"], 1):
        line = f"epoch {i}: train loss {loss:.5f}"
        if history["eval_pr_auc_booking"]:
            line += f"  eval PR-AUC booking {history['eval_pr_auc_booking'][i - 1]:.4f}"
        print(line)
    print(out)
    return 0


def cmd_baselines(args) -> int:
    cfg = _config(args)
    out = _workspace(args, cfg)
    stage = next(s for s in pl.STAGES if s.name == "baselines")
    missing = [p for p in stage.inputs if not (out / p).exists()]
    if missing:
        print(f"error: missing inputs: {', '.join(missing)}", file=sys.stderr)
        return 2
    stage.run(cfg, out)
    for p in stage.outputs:
        print(out / p)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    result = pl.run_pipeline(cfg, args.dir, force=args.force)
    print(f"ran: {', '.join(result.ran) or '-'}")
    print(f"skipped: {', '.join(result.skipped) or '-'}")
    print(f"report: {result.report_path}")
    return 0


def _settings(args, cfg):
    from .experiments import ExperimentSettings

    s = ExperimentSettings(k=cfg.world.k, num_segments=cfg.world.num_segments, model=cfg.model,
                           fcr_window_days=cfg.baselines.fcr_window_days, min_support=cfg.baselines.min_support)
    if args.users:
        s = replace(s, num_users=args.users)
    if getattr(args, "ab_users", None):
        s = replace(s, ab_users=args.ab_users)
    return s


def cmd_eval(args) -> int:
    from . import experiments as ex
    from .evaluation import engagement_only_policy, feature_ablation, ranking_policy, simulated_ab
    from .model import load
    from .attribution import read_examples
    from .synthgen import read_world

    cfg = _config(args)
    if args.seeds:
        # self-contained experiments: fresh world and logs per seed
        s = _settings(args, cfg)
        seeds = range(cfg.seed, cfg.seed + args.seeds)
        if args.mode == "compare":
            sweep = ex.seed_sweep(seeds, s)
            payload = sweep.to_json()
            for r in sweep.results:
                print(f"seed {r.seed}")
                print(pl.format_comparison(r.comparison.to_json()))
            print(f"wins over {len(sweep.results)} seeds: {sweep.wins()}")
        elif args.mode == "ablate":
            payload = {"per_seed": {}}
            for seed in seeds:
                rep = ex.run_ablation(seed, s)
                payload["per_seed"][seed] = rep.to_json()
                print(f"seed {seed}: booking drop {json.dumps(rep.booking_drop())}")
        else:
            payload = {"per_seed": {seed: ex.run_ab(seed, s).to_json() for seed in seeds}}
        payload["settings"] = s.to_json()
        _emit(payload, args.out)
        return 0

    ws = Path(args.data or args.dir or cfg.out_dir)
    model_dir = Path(args.model) if args.model else ws / "model"
    world_path = Path(args.world) if args.world else ws / "data/world.json"
    if args.mode == "compare":
        from .baselines import FcrTable, NecessityTable
        from .evaluation import compare_predictors, model_scorer, table_scorer

        comp = compare_predictors(read_examples(ws / "examples/eval.jsonl"), {
            "necessity": table_scorer(NecessityTable.load(ws / "baselines/necessity.json")),
            "fcr": table_scorer(FcrTable.load(ws / "baselines/fcr.json")),
            "ml": model_scorer(load(model_dir)),
        })
        payload = comp.to_json()
        print(pl.format_comparison(payload))
    elif args.mode == "ablate":
        rep = feature_ablation(read_examples(ws / "examples/train.jsonl"), read_examples(ws / "examples/eval.jsonl"),
                               config=replace(cfg.model, seed=cfg.seed), k=cfg.world.k)
        payload = rep.to_json()
        for row in rep.rows:
            print(f"{row.removed or 'full':<16} engagement {row.pr_auc_engagement:.4f}  booking {row.pr_auc_booking:.4f}")
    else:
        params = load(model_dir)
        world = read_world(world_path)
        rc = cfg.ranking
        users = args.ab_users or cfg.eval.ab_users
        payload = {
            "baseline": "engagement_only",
            f"exponent_{rc.conversion_weight_exponent}": simulated_ab(
                world, engagement_only_policy(params, rc), ranking_policy(params, rc), users, cfg.seed).to_json(),
        }
        half = replace(rc, conversion_weight_exponent=0.5)
        payload["exponent_0.5"] = simulated_ab(
            world, engagement_only_policy(params, rc), ranking_policy(params, half), users, cfg.seed).to_json()
        for name, rep in payload.items():
            if isinstance(rep, dict):
                print(f"{name}: lift {rep['relative_booking_lift']:+.2%}  CI [{rep['ci95'][0]:+.2%}, {rep['ci95'][1]:+.2%}]")
    _emit(payload, args.out)
    return 0


def _read_json_arg(value: str):
    p = Path(value)
    if p.exists():
        return json.loads(p.read_text(encoding="utf-8"))
    return json.loads(value)


def cmd_recommend(args) -> int:
    cfg = _config(args)
    body = {
        "query": _read_json_arg(args.query),
        "facet_counts": _read_json_arg(args.facets),
        "applied_filters": [int(x) for x in args.applied.split(",") if x] if args.applied else [],
    }
    if args.url:
        import httpx

        r = httpx.post(args.url.rstrip("/") + "/recommend", json=body, timeout=10)
        print(json.dumps(r.json(), indent=1))
        return 0 if r.status_code == 200 else 1
    from .model import load, model_version
    from .ranking import recommend
    from .service.schemas import RecommendRequest

    req = RecommendRequest.model_validate(body)
    params = load(args.model)
    ranked = recommend(params, req.query.to_query(), req.facet_counts, cfg.ranking, req.applied_filters)
    print(json.dumps({"recommendations": [r.to_json() for r in ranked],
                      "model_version": model_version(args.model)}, indent=1))
    return 0


def cmd_serve(args) -> int:
    from .service.runner import serve

    cfg = _config(args)
    serve(args.model, args.addr, args.workers, cfg.ranking if args.config or args.set else None, args.log_level)
    return 0


def cmd_loadtest(args) -> int:
    from .features import FeatureSchema
    from .model import SCHEMA_FILE
    from .service.loadtest import make_requests, run_loadtest
    from .synthgen import read_world

    world = read_world(args.world) if args.world else None
    if args.url:
        if not args.schema and not args.model:
            print("error: --url needs --schema or --model to build requests", file=sys.stderr)
            return 2
        schema = FeatureSchema.load(args.schema or Path(args.model) / SCHEMA_FILE)
        payloads = make_requests(schema, args.requests, args.seed, world)
        report = run_loadtest(args.url, payloads, args.concurrency)
    else:
        from .service.app import create_app
        from .service.runner import background_server

        schema = FeatureSchema.load(Path(args.model) / SCHEMA_FILE)
        payloads = make_requests(schema, args.requests, args.seed, world)
        with background_server(create_app(args.model)) as url:
            report = run_loadtest(url, payloads, args.concurrency)
    payload = report.to_json()
    print(f"requests {payload['requests']}  errors {payload['errors']}  qps {payload['qps']}")
    print("latency ms  " + "  ".join(f"{k} {v}" for k, v in payload["latency_ms"].items()))
    print(f"handler us  p50 {payload['handler_micros']['p50']}  p99 {payload['handler_micros']['p99']}")
    if args.out:
        _emit(payload, args.out)
    return 0 if payload["errors"] == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="filterank", description="Search filter recommendation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workspace=True):
        sp.add_argument("--config", help="pipeline TOML file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int)
        if workspace:
            sp.add_argument("--dir", help="workspace directory (default: out_dir from config)")

    sp = sub.add_parser("gen", help="simulate a world and its logs")
    common(sp)
    sp.add_argument("--k", type=int, help="number of filters")
    sp.add_argument("--segments", type=int)
    sp.add_argument("--users", type=int)
    sp.add_argument("--bias", type=float, help="presentation bias strength")
    sp.add_argument("--presentation", choices=("default", "conversion_ordered"))
    sp.add_argument("--out-dir", help="output directory (default: <workspace>/data)")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("attribute", help="label searches with attributed bookings")
    common(sp)
    sp.add_argument("--searches")
    sp.add_argument("--bookings")
    sp.add_argument("--lookback", type=int, help="lookback days (default 14)")
    sp.add_argument("--cancel-window", type=int, help="cancellation days (default 30)")
    sp.add_argument("--out", help="write all examples here instead of a train/eval split")
    sp.set_defaults(func=cmd_attribute)

    sp = sub.add_parser("fit", help="fit the feature schema on training examples")
    common(sp)
    sp.add_argument("--train")
    sp.add_argument("--exclude", action="append", help="feature group to leave out")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("train", help="train the two-head model")
    common(sp)
    sp.add_argument("--train")
    sp.add_argument("--eval")
    sp.add_argument("--schema")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--out", help="model directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("baselines", help="compute FCR and necessity tables")
    common(sp)
    sp.set_defaults(func=cmd_baselines)

    sp = sub.add_parser("eval", help="compare predictors, ablate features or run simulated A/B tests")
    sp.add_argument("mode", choices=("compare", "ablate", "ab"))
    common(sp)
    sp.add_argument("--model", help="model directory (default: workspace model/)")
    sp.add_argument("--data", help="workspace holding examples/ and baselines/")
    sp.add_argument("--world", help="world.json (default: workspace data/world.json)")
    sp.add_argument("--seeds", type=int, help="run self-contained experiments over this many seeds")
    sp.add_argument("--users", type=int, help="users per simulated dataset (with --seeds)")
    sp.add_argument("--ab-users", type=int)
    sp.add_argument("--out", help="report path (JSON)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("recommend", help="rank filters for one query")
    common(sp, workspace=False)
    sp.add_argument("--model", help="model directory")
    sp.add_argument("--url", help="ask a running service instead of loading the model")
    sp.add_argument("--query", required=True, help="query JSON or a path to it")
    sp.add_argument("--facets", required=True, help="facet counts JSON list or a path to it")
    sp.add_argument("--applied", default="", help="comma-separated applied filter ids")
    sp.set_defaults(func=cmd_recommend)

    sp = sub.add_parser("serve", help="run the HTTP service")
    common(sp, workspace=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--addr", help="host:port (env FILTERANK_ADDR, default 127.0.0.1:8000)")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--log-level", help="env FILTERANK_LOG_LEVEL, default info")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("loadtest", help="measure /recommend latency")
    sp.add_argument("--model", help="model directory; serves it in-process when --url is absent")
    sp.add_argument("--url", help="base URL of a running service")
    sp.add_argument("--schema", help="schema.json used to build requests for --url")
    sp.add_argument("--world", help="world.json for realistic queries and facet counts")
    sp.add_argument("--requests", type=int, default=2000)
    sp.add_argument("--concurrency", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_loadtest)

    sp = sub.add_parser("pipeline", help="run every stage, skipping up-to-date ones")
    common(sp)
    sp.add_argument("--force", action="store_true", help="rerun every stage")
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "recommend" and not args.url and not args.model:
        print("error: recommend needs --model or --url", file=sys.stderr)
        return 2
    if args.command == "loadtest" and not args.url and not args.model:
        print("error: loadtest needs --model or --url", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except pl.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
