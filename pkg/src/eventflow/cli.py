"""Command line front end.

Every subcommand is a thin wrapper over the package API. With ``--server URL``
the ``sample`` and ``evaluate`` commands call a running ``eventflow serve``
instance instead of computing locally.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .sequences import read_jsonl, write_jsonl

log = logging.getLogger("eventflow")


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2))


def _post(server: str, route: str, payload: dict) -> dict:
    import httpx

    r = httpx.post(server.rstrip("/") + route, json=payload, timeout=None)
    r.raise_for_status()
    return r.json()


def cmd_gen_data(args) -> int:
    from .sequences import save_dataset
    from .synthetic import SimulatorSpec, simulate_splits

    params = json.loads(args.params) if args.params else {}
    spec = SimulatorSpec(args.kind, params, args.t_max)
    splits = simulate_splits(spec, args.n, args.seed)
    if args.delta_t:
        splits.meta["delta_t"] = args.delta_t
    out = save_dataset(splits, args.out)
    counts = np.concatenate([splits[s].counts() for s in ("train", "val", "test")])
    log.info("wrote %s: %d sequences, mean count %.1f", out, counts.size, counts.mean())
    return 0


def cmd_train(args) -> int:
    from .harness import resolve_dataset_path
    from .sequences import load_dataset
    from .training import TrainConfig, train

    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.task:
        cfg["task"] = args.task
    if args.steps:
        cfg["steps"] = args.steps
    if args.delta_t:
        cfg["delta_t"] = args.delta_t
    if args.seed is not None:
        cfg["seed"] = args.seed
    splits = load_dataset(resolve_dataset_path(args.data))
    if cfg.get("task") == "forecast" and not cfg.get("delta_t"):
        cfg["delta_t"] = splits.meta.get("delta_t")
    config = TrainConfig.from_dict(cfg)
    out = train(splits, config, args.out)
    vf = out.vector_field
    log.info("trained %d steps; best val %.5f at step %d -> %s", config.steps, vf.best_val, vf.best_step, args.out)
    return 0


def cmd_sample(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.server:
        resp = _post(args.server, "/sample", {"ckpt": str(args.ckpt), "n": args.n, "nfe": args.nfe, "seed": seed})
        with open(args.out, "w") as fh:
            for rec in resp["sequences"]:
                fh.write(json.dumps(rec) + "\n")
        return 0
    from .checkpoint import load_checkpoint
    from .sampling import sample

    ckpt = load_checkpoint(args.ckpt, args.device)
    seqs = sample(ckpt, args.n, args.nfe, np.random.default_rng(seed))
    write_jsonl(args.out, seqs)
    log.info("wrote %d sequences to %s", len(seqs), args.out)
    return 0


def cmd_forecast(args) -> int:
    from .checkpoint import load_checkpoint
    from .harness import resolve_dataset_path
    from .sampling import forecast, write_forecasts
    from .sequences import load_dataset

    ckpt = load_checkpoint(args.ckpt, args.device)
    count = load_checkpoint(args.count_ckpt or Path(args.ckpt) / "count", args.device)
    splits = load_dataset(resolve_dataset_path(args.data))
    seed = 0 if args.seed is None else args.seed
    res = forecast(
        ckpt, count, splits[args.split], args.nfe, np.random.default_rng(seed),
        args.windows, args.window_seed,
    )
    write_forecasts(args.out, res.records)
    log.info("wrote %d forecasts (%d sequences skipped) to %s", len(res.records), res.skipped, args.out)
    return 0


def cmd_evaluate(args) -> int:
    from .harness import forecast_metrics
    from .metrics import mmd
    from .sampling import read_forecasts

    if args.metric == "mmd":
        if not (args.a and args.b):
            raise SystemExit("evaluate --metric mmd needs --a and --b")
        a, b = read_jsonl(args.a), read_jsonl(args.b)
        if args.server:
            payload = {"a": [s.to_record() for s in a], "b": [s.to_record() for s in b]}
            report = _post(args.server, "/mmd", payload)
        else:
            t_end = max(s.support_end for s in a + b)
            report = {"metric": "mmd", "value": mmd(a, b, t_end), "n_pairs": len(a) * len(b), "excluded": 0}
    else:
        if not args.forecasts:
            raise SystemExit(f"evaluate --metric {args.metric} needs --forecasts")
        per_file = [forecast_metrics(read_forecasts(f), [args.metric])[args.metric] for f in args.forecasts]
        values = [r["value"] for r in per_file]
        report = {
            "metric": args.metric,
            "value": float(np.mean(values)),
            "n_pairs": int(sum(r["n_pairs"] for r in per_file)),
            "excluded": int(sum(r["excluded"] for r in per_file)),
        }
        if len(values) > 1:
            report["std_over_seeds"] = float(np.std(values))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    _print_json(report)
    return 0


def cmd_experiment(args) -> int:
    from .harness import ExperimentSpec, plot_report, run_experiment

    spec_path = args.spec or args.config
    if not spec_path:
        raise SystemExit("experiment needs --spec (or the global --config)")
    spec = ExperimentSpec.from_json(spec_path)
    if args.parallel:
        spec.parallel = True
    report = run_experiment(spec)
    if args.plot:
        plot_report(report, Path(spec.out_dir) / "plots")
    print(report.markdown())
    return 1 if report.failures else 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("eventflow.service:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, defaults: bool) -> None:
        # accepted before or after the subcommand; subparsers must not clobber
        kw = (lambda v: {"default": v}) if defaults else (lambda v: {"default": argparse.SUPPRESS})
        parser.add_argument("--seed", type=int, **kw(None))
        parser.add_argument("--device", **kw("cpu"))
        parser.add_argument("--config", help="JSON config (train config or experiment spec)", **kw(None))
        parser.add_argument("--server", help="base URL of a running `eventflow serve`", **kw(None))
        parser.add_argument("-v", "--verbose", action="store_true", **kw(False))

    p = argparse.ArgumentParser(prog="eventflow", description=__doc__.splitlines()[0])
    global_flags(p, True)
    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, **kw) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], **kw)

    g = add("gen-data", help="simulate a synthetic dataset directory")
    g.add_argument("--kind", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--t-max", type=float, default=100.0)
    g.add_argument("--params", default=None, help="JSON object overriding simulator parameters")
    g.add_argument("--delta-t", type=float, default=None, help="forecast horizon stored in meta.json")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = add("train")
    t.add_argument("--task", choices=["unconditional", "forecast"], default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--delta-t", type=float, default=None)
    t.set_defaults(func=cmd_train)

    s = add("sample")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--nfe", type=int, default=25)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    f = add("forecast")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--count-ckpt", default=None, help="defaults to <ckpt>/count")
    f.add_argument("--data", required=True)
    f.add_argument("--split", default="test", choices=["train", "val", "test"])
    f.add_argument("--nfe", type=int, default=25)
    f.add_argument("--windows", type=int, default=50)
    f.add_argument("--window-seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_forecast)

    e = add("evaluate")
    e.add_argument("--metric", required=True, choices=["mmd", "distance", "mare", "mse"])
    e.add_argument("--a")
    e.add_argument("--b")
    e.add_argument("--forecasts", nargs="+")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_evaluate)

    x = add("experiment")
    x.add_argument("--spec", default=None)
    x.add_argument("--parallel", action="store_true")
    x.add_argument("--plot", action="store_true")
    x.set_defaults(func=cmd_experiment)

    v = add("serve")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    v.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.command == "gen-data" and args.seed is None:
        args.seed = 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
