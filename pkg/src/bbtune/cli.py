"""Command line entry point: ``bbtune {serve,tune,bench,sizes,plant,report}``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("bbtune")

DEFAULT_ADDR = "127.0.0.1:7878"


def _add_world_flags(p, *, subspace_flag="--d"):
    p.add_argument(subspace_flag, dest="d", type=int, default=500, help="subspace dimension")
    p.add_argument("--L", type=int, default=50, help="prompt length in tokens")
    p.add_argument("--model-seed", type=int, default=None)
    p.add_argument("--proj-seed", type=int, default=None)
    p.add_argument("--vocab", type=int, default=2000, help="surrogate vocabulary size")
    p.add_argument("--classes", "--K", dest="K", type=int, default=2, help="number of label words")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbtune", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0, help="default for every unset seed")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the inference service")
    p.add_argument("--addr", default=DEFAULT_ADDR, help="host:port (env BBT_LISTEN overrides)")
    _add_world_flags(p, subspace_flag="--subspace")
    p.add_argument("--max-batch", type=int, default=256)
    p.add_argument("--max-connections", type=int, default=64)
    p.add_argument("--http", action="store_true", help="serve the HTTP front end instead of raw frames")

    p = sub.add_parser("tune", help="black-box tune a prompt")
    where = p.add_mutually_exclusive_group()
    where.add_argument("--addr", help="service address: host:port or http://host:port")
    where.add_argument("--local", action="store_true", help="evaluate in-process (default)")
    p.add_argument("--task", type=Path, help="task file from `plant`; planted on the fly if absent")
    p.add_argument("--task-seed", type=int, default=None)
    p.add_argument("--loss", choices=["ce", "hinge", "acc"], default="ce")
    _add_world_flags(p)
    p.add_argument("--popsize", type=int, default=20)
    p.add_argument("--budget", type=int, default=8000, help="API calls")
    p.add_argument("--parallel", action="store_true", help="population-parallel evaluation")
    p.add_argument("--distribution", choices=["uniform", "normal"], default="uniform")
    p.add_argument("--patience", type=int, default=1000, help="early-stop window in API calls; 0 disables")
    p.add_argument("--opt-seed", type=int, default=None)
    p.add_argument("--mode", choices=["subspace", "full"], default="subspace",
                   help="send z (server projects) or the full prompt")
    p.add_argument("--optimizer", choices=["cma", "adam"], default="cma")
    p.add_argument("--no-dev", action="store_true", help="skip dev evaluation")
    p.add_argument("-o", "--out", type=Path, help="write <out>.csv and <out>.json")

    p = sub.add_parser("bench", help="optimizer sanity runs")
    p.add_argument("--fn", choices=["sphere", "rosenbrock", "planted"], default="sphere")
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--popsize", type=int, default=None)
    p.add_argument("--sigma0", type=float, default=None)
    p.add_argument("--max-evals", type=int, default=None)
    p.add_argument("--target", type=float, default=1e-10)
    p.add_argument("-o", "--out", type=Path, help="CSV path (stdout if absent)")

    p = sub.add_parser("sizes", help="per-call payload sizes")
    p.add_argument("--B", type=int, required=True)
    p.add_argument("--S", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--plen", type=int, required=True)

    p = sub.add_parser("plant", help="write a planted k-shot task file")
    p.add_argument("--k", type=int, default=16, help="shots per class")
    p.add_argument("--S", type=int, default=24, help="sequence length")
    _add_world_flags(p)
    p.add_argument("-o", "--out", type=Path, required=True)

    p = sub.add_parser("report", help="summarize curve CSVs")
    p.add_argument("paths", nargs="+", type=Path)
    return parser


def _seed(args, name):
    v = getattr(args, name, None)
    return args.seed if v is None else v


def _print_config(command: str, cfg: dict) -> None:
    print(f"# {command} config " + json.dumps(cfg, sort_keys=True, default=str))


def _world(args):
    from .objective import build_world

    return build_world(
        model_seed=_seed(args, "model_seed"), proj_seed=_seed(args, "proj_seed"),
        sub_dim=args.d, prompt_length=args.L, vocab_size=args.vocab, num_classes=args.K,
        distribution=getattr(args, "distribution", "uniform"),
    )


def cmd_serve(args) -> int:
    from .service import InferenceService, serve

    addr = os.environ.get("BBT_LISTEN") or args.addr
    cfg = {"addr": addr, "model_seed": _seed(args, "model_seed"), "proj_seed": _seed(args, "proj_seed"),
           "subspace": args.d, "L": args.L, "vocab": args.vocab, "K": args.K,
           "max_batch": args.max_batch, "max_connections": args.max_connections, "http": args.http}
    _print_config("serve", cfg)
    if args.d:
        world = _world(args)
        service = InferenceService(world.model, (world.A, world.p0), args.max_batch)
    else:
        from .objective import SurrogateModel

        model = SurrogateModel.create(_seed(args, "model_seed"), args.vocab, num_classes=args.K)
        service = InferenceService(model, None, args.max_batch)
    host, _, port = addr.rpartition(":")
    sys.stdout.flush()
    if args.http:
        import uvicorn

        from .service.app import create_app

        uvicorn.run(create_app(service), host=host or "127.0.0.1", port=int(port), log_level="warning")
    else:
        serve(service, host or "127.0.0.1", int(port), args.max_connections)
    return 0


def cmd_tune(args) -> int:
    from .driver import GradientTask, TaskObjective, TuneConfig, adam_tune, report, tune
    from .objective import plant_task, read_task_file, rebuild_task
    from .protocol import Mode
    from .service import InferenceService, LocalTransport, connect

    config = TuneConfig(
        prompt_length=args.L, sub_dim=args.d, popsize=args.popsize,
        distribution=args.distribution, loss=args.loss, budget=args.budget,
        eval_mode="parallel" if args.parallel else "sequential",
        early_stop_patience=args.patience or None,
        proj_seed=_seed(args, "proj_seed"), opt_seed=_seed(args, "opt_seed"),
        task_seed=_seed(args, "task_seed"), model_seed=_seed(args, "model_seed"),
        dev_eval=not args.no_dev,
    )
    resolved = config.to_dict()
    resolved.update(transport=args.addr or "local", task=str(args.task) if args.task else None,
                    mode=args.mode, optimizer=args.optimizer, vocab=args.vocab, K=args.K)
    _print_config("tune", resolved)

    world = _world(args)
    if args.task:
        tf = read_task_file(args.task)
        if tf.num_classes != args.K or tf.vocab_size > args.vocab:
            raise ValueError("task file does not match --K/--vocab")
        task = rebuild_task(tf, world.spec, world.p0)
    else:
        task = plant_task(config.task_seed, 16, args.K, world.spec, 24, args.vocab, world.model, world.p0)

    if args.optimizer == "adam":
        if args.addr:
            raise ValueError("the Adam baseline needs gradients and only runs with --local")
        result = adam_tune(config, GradientTask(world, task))
        test_acc = GradientTask(world, task).accuracy_on(result.best_z, task.test) if result.best_z is not None else math.nan
    else:
        if args.addr:
            transport = connect(args.addr)
        else:
            transport = LocalTransport(InferenceService(world.model, (world.A, world.p0)))
        mode = Mode.SUBSPACE_VEC if args.mode == "subspace" else Mode.FULL_PROMPT
        objective = TaskObjective(transport, task, args.K, mode, world)
        try:
            result = tune(config, objective)
            test_acc = objective.split_accuracy(result.best_z, "test") if result.best_z is not None else math.nan
        finally:
            transport.close()

    summary = result.summary()
    summary.pop("best_z")
    summary.pop("wall_time")
    summary["test_acc"] = test_acc
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        report(result, args.out, config)
    return 0


def cmd_bench(args) -> int:
    import csv

    from .objective import PlantedQuadratic, rosenbrock, sphere
    from .optimizer import CMAES, CmaConfig
    from .subspace import ProjectionSpec, make_projection, make_prompt_base

    d = args.d
    seed = args.seed
    if args.fn == "sphere":
        fn, mean0, sigma0, max_evals, bounds = sphere, 3.0, 2.0, 6000, (-5.0, 5.0)
    elif args.fn == "rosenbrock":
        fn, mean0, sigma0, max_evals, bounds = rosenbrock, 0.0, 0.5, 20000, (-5.0, 5.0)
    else:
        spec = ProjectionSpec(50 * 16, d, seed=seed)
        z_star = np.random.default_rng(seed + 1000).uniform(-4, 4, d)
        fn = PlantedQuadratic(make_projection(spec), z_star, make_prompt_base("zeros", 50, 16))
        mean0, sigma0, max_evals, bounds = 0.0, 1.0, 8000, (-5.0, 5.0)
    sigma0 = args.sigma0 or sigma0
    max_evals = args.max_evals or max_evals
    cfg = CmaConfig(dim=d, popsize=args.popsize, mean0=mean0, sigma0=sigma0, seed=seed, bounds=bounds)
    _print_config("bench", {"fn": args.fn, "d": d, "popsize": cfg.lam, "sigma0": sigma0,
                            "mean0": mean0, "max_evals": max_evals, "target": args.target, "seed": seed})
    es = CMAES(cfg)
    rows = []
    while es.state.evals + es.lam <= max_evals:
        xs = es.ask()
        es.tell(xs, [fn(x) for x in xs])
        f_mean = fn(es.state.mean)
        rows.append((es.state.evals, es.state.best_f, f_mean, es.state.sigma))
        if f_mean < args.target:
            break
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["evals", "best_f", "f_mean", "sigma"])
        w.writerows((e, repr(b), repr(m), repr(s)) for e, b, m, s in rows)
    finally:
        if args.out:
            out.close()
    final = rows[-1][2] if rows else math.nan
    status = "reached" if final < args.target else "not reached"
    print(f"# final f(mean) = {final:.3e} after {es.state.evals} evals ({status} target {args.target:g})")
    return 0


def cmd_sizes(args) -> int:
    from .protocol import payload_sizes

    if min(args.B, args.S, args.K, args.plen) <= 0:
        raise ValueError("all dimensions must be positive")
    _print_config("sizes", {"B": args.B, "S": args.S, "K": args.K, "plen": args.plen})
    s = payload_sizes(args.B, args.S, args.K, args.plen)
    lines = [
        ("upload input_ids (u16)", s.upload_ids),
        ("upload attention_mask (u8)", s.upload_mask),
        ("upload prompt (f32)", s.upload_prompt),
        ("download logits (f32)", s.download),
        ("upload mask_pos (u16, extension)", s.upload_mask_pos),
        ("request header", s.request_header),
        ("response header", s.response_header),
    ]
    for name, n in lines:
        print(f"{name:<34}{n:>10} B  {n / 1024:8.2f} KB")
    return 0


def cmd_plant(args) -> int:
    from .objective import plant_task, write_task_file

    _print_config("plant", {"k": args.k, "K": args.K, "S": args.S, "d": args.d, "L": args.L,
                            "vocab": args.vocab, "seed": args.seed,
                            "model_seed": _seed(args, "model_seed"), "proj_seed": _seed(args, "proj_seed"),
                            "out": str(args.out)})
    world = _world(args)
    task = plant_task(args.seed, args.k, args.K, world.spec, args.S, args.vocab, world.model, world.p0)
    write_task_file(task, args.out)
    print(f"wrote {args.out}: train={task.train.size} dev={task.dev.size} test={task.test.size}")
    return 0


def cmd_report(args) -> int:
    from .driver import read_curves

    _print_config("report", {"paths": [str(p) for p in args.paths]})
    for path in args.paths:
        curves = read_curves(path.with_suffix(".csv"))
        if not curves:
            print(f"{path}: no points")
            continue
        last = curves[-1]
        dev = [c.dev_acc for c in curves if not math.isnan(c.dev_acc)]
        full = next((c.api_calls for c in curves if c.train_acc == 1.0), None)
        print(f"{path}: points={len(curves)} calls={last.api_calls} train_loss={last.train_loss:.6g} "
              f"dev_acc={last.dev_acc:.4f} best_dev={max(dev) if dev else float('nan'):.4f} "
              f"calls_to_full_train_acc={full}")
    return 0


COMMANDS = {
    "serve": cmd_serve,
    "tune": cmd_tune,
    "bench": cmd_bench,
    "sizes": cmd_sizes,
    "plant": cmd_plant,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"bbtune: error: {exc}", file=sys.stderr)
        return 1
