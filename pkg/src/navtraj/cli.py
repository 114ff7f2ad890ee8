"""Command line entry point: synth | split | partition | train | generate | evaluate | baseline.

Exit codes: 0 ok, 2 configuration error (bad option, missing input), 3 data
error, 4 generation failures above the allowed rate.  Errors are written to
stderr as one JSON object ``{"error": kind, "code": n, "message": ...}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_GENERATION = 0, 2, 3, 4

log = logging.getLogger("navtraj")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        self.code, self.kind = code, kind
        super().__init__(message)


def _need(path, what: str) -> Path:
    p = Path(path) if path is not None else None
    if p is None or not p.exists():
        raise CliError(EXIT_CONFIG, "missing_artifact", f"{what} not found: {path}")
    return p


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(args, out: Path) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    cfg["version"] = __version__
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _net(args):
    from .roadnet import load_network

    return load_network(_need(args.network, "network file"))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .data import write_trajectories
    from .roadnet import save_network
    from .synth import GridSpec, SynthPolicy, grid_network, synth_trajectories

    out = _outdir(args)
    net = grid_network(GridSpec(rows=args.rows, cols=args.cols, spacing=args.spacing, seed=args.seed))
    trajs = synth_trajectories(net, args.n, SynthPolicy(beta=args.beta, noise=args.noise, noise_scope=args.noise_scope, seed=args.seed))
    save_network(net, out / "network.csv")
    write_trajectories(trajs, out / "trajectories.jsonl")
    _echo_config(args, out)
    print(f"wrote {len(net)} segments and {len(trajs)} trajectories to {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    from .data import validate_and_split, write_requests, write_trajectories

    net = _net(args)
    ratios = [float(x) for x in args.ratios.split(",")]
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise CliError(EXIT_CONFIG, "bad_option", f"--ratios needs three non-negative numbers, got {args.ratios}")
    train, val, test, report = validate_and_split(_need(args.trajectories, "trajectory file"), net, ratios, args.seed)
    out = _outdir(args)
    write_trajectories(train, out / "train.jsonl")
    write_trajectories(val, out / "val.jsonl")
    write_trajectories(test, out / "test.jsonl")
    write_requests([t.request() for t in test], out / "test_od.csv")
    with open(out / "filter_report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["reason", "count"])
        for k in sorted(report):
            w.writerow([k, report[k]])
    _echo_config(args, out)
    rejected = ", ".join(f"{k}={v}" for k, v in sorted(report.items()) if k != "kept") or "none"
    print(f"kept {report['kept']}: train={len(train)} val={len(val)} test={len(test)}; rejected {rejected}")
    return EXIT_OK


def cmd_partition(args) -> int:
    from .roadnet import cut_size, partition_zones, save_partition

    net = _net(args)
    k = args.k
    try:
        part = partition_zones(net, k, args.eps, args.seed)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, "bad_option", str(exc)) from None
    out = _outdir(args)
    save_partition(part, out / "partition.csv")
    _echo_config(args, out)
    print(f"k={part.k} sizes={part.sizes().tolist()} cut={cut_size(net, part.zone_of)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import read_trajectories
    from .roadnet import load_partition
    from .trainer import TrainConfig, train

    net = _net(args)
    part = load_partition(_need(args.partition, "partition file"), len(net))
    tr = read_trajectories(_need(args.train, "training trajectories"))
    va = read_trajectories(_need(args.val, "validation trajectories")) if args.val else []
    cfg = TrainConfig(
        d=args.d, n_heads=args.heads, traj_layers=args.layers, lr=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, clip=args.clip, seed=args.seed, scale_mode=args.scale_mode,
        disable_rne=args.disable_rne, disable_traje=args.disable_traje, disable_nav=args.disable_nav,
    )
    out = _outdir(args)
    _echo_config(args, out)
    t0 = time.time()
    model, report = train(cfg, net, part, tr, va, progress=print)
    model.save(out / "model.ckpt", {"train_config": vars(cfg)})
    report.write_csv(out / "train_report.csv")
    print(f"trained in {time.time() - t0:.1f}s; best epoch {report.best_epoch}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _requests(args):
    from .data import read_requests, read_trajectories

    if args.od:
        return read_requests(_need(args.od, "OD request file"))
    if getattr(args, "from_trajectories", None):
        return [t.request() for t in read_trajectories(_need(args.from_trajectories, "trajectory file"))]
    raise CliError(EXIT_CONFIG, "bad_option", "give --od or --from-trajectories")


def _write_generation(out: Path, trajs, failures) -> None:
    from .data import write_trajectories

    write_trajectories([t for t in trajs if t is not None], out / "generated.jsonl")
    with open(out / "failures.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "r_org", "t_org", "r_dest", "reason"])
        for i, req, why in failures:
            w.writerow([i, req.r_org, req.t_org, req.r_dest, why])


def _generation_status(n: int, failures, max_rate: float) -> int:
    rate = len(failures) / n if n else 0.0
    print(f"generated {n - len(failures)}/{n} (failure rate {rate:.3f})")
    if rate > max_rate:
        raise CliError(EXIT_GENERATION, "generation_failed", f"{len(failures)} of {n} requests failed within budget")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .model import NavModel
    from .roadnet import load_partition
    from .search import generate_batch

    net = _net(args)
    ckpt = _need(args.checkpoint, "checkpoint")
    reqs = _requests(args)
    model = NavModel.load(ckpt, net)
    if args.partition:
        part = load_partition(_need(args.partition, "partition file"), len(net))
        if not np.array_equal(part.zone_of, model.zone_of):
            raise CliError(EXIT_DATA, "partition_mismatch", "partition file differs from the one the checkpoint was trained with")
    out = _outdir(args)
    _echo_config(args, out)
    res = generate_batch(model.policy(), net, reqs, args.budget)
    _write_generation(out, res.trajectories, res.failures)
    return _generation_status(len(reqs), res.failures, args.max_failure_rate)


def cmd_baseline(args) -> int:
    from .baselines import (
        GenerationFailure, dijkstra_generate, markov_fit, markov_generate, markov_star_generate, random_walk_generate,
    )
    from .data import read_trajectories
    from .search import SearchFailure

    net = _net(args)
    reqs = _requests(args)
    model = None
    if args.method in ("markov", "markov_star"):
        model = markov_fit(read_trajectories(_need(args.train, "training trajectories")), net)
    rng = np.random.default_rng(args.seed)
    trajs, failures = [], []
    for i, req in enumerate(reqs):
        try:
            if args.method == "markov":
                t = markov_generate(model, req)
            elif args.method == "markov_star":
                t = markov_star_generate(model, req, args.budget)
            elif args.method == "dijkstra":
                t = dijkstra_generate(net, req, args.speed)
            else:
                t = random_walk_generate(net, req, rng)
            t.id = f"{args.method}-{i}"
            trajs.append(t)
        except (GenerationFailure, SearchFailure) as exc:
            trajs.append(None)
            failures.append((i, req, str(exc)))
    out = _outdir(args)
    _echo_config(args, out)
    _write_generation(out, trajs, failures)
    return _generation_status(len(reqs), failures, args.max_failure_rate)


def cmd_evaluate(args) -> int:
    from .data import read_trajectories
    from .metrics import evaluate

    net = _net(args)
    real = read_trajectories(_need(args.real, "real trajectories"))
    gen = read_trajectories(_need(args.generated, "generated trajectories"))
    if not real or not gen:
        raise CliError(EXIT_DATA, "empty_input", "real and generated sets must be non-empty")
    report = evaluate(real, gen, net, bins=args.bins, cell_m=args.grid, edr_threshold_m=args.edr_threshold)
    out = _outdir(args)
    _echo_config(args, out)
    report.write(out, args.label)
    print(report.summary(args.label), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="navtraj", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="JSON file whose keys provide option defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, network=True):
        if network:
            sp.add_argument("--network", required=False, help="network CSV")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="synthetic grid city and trajectories")
    common(s, network=False)
    s.add_argument("--rows", type=int, default=8)
    s.add_argument("--cols", type=int, default=8)
    s.add_argument("--spacing", type=float, default=500.0)
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.10, help="log-normal sigma of interval noise")
    s.add_argument("--noise-scope", choices=("trip", "step"), default="trip")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="filter and split trajectories 7:1:2")
    common(s)
    s.add_argument("--trajectories", required=False)
    s.add_argument("--ratios", default="7,1,2")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("partition", help="balanced zone partition")
    common(s)
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--eps", type=float, default=0.1)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("train", help="train the generator")
    common(s)
    s.add_argument("--partition")
    s.add_argument("--train")
    s.add_argument("--val")
    s.add_argument("--d", type=int, default=32)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--clip", type=float, default=1.0)
    s.add_argument("--scale-mode", choices=("sqrt", "literal"), default="sqrt")
    s.add_argument("--disable-rne", action="store_true")
    s.add_argument("--disable-traje", action="store_true")
    s.add_argument("--disable-nav", action="store_true")
    s.set_defaults(func=cmd_train)

    def gen_opts(sp):
        sp.add_argument("--od", help="CSV r_org,t_org,r_dest")
        sp.add_argument("--from-trajectories", help="take OD requests from a trajectory file")
        sp.add_argument("--budget", type=int, default=None, help="max heap pops per request (default 50*|V|)")
        sp.add_argument("--max-failure-rate", type=float, default=0.05)

    s = sub.add_parser("generate", help="generate trajectories for OD requests")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--partition")
    gen_opts(s)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("baseline", help="reference generators")
    common(s)
    s.add_argument("--method", choices=("markov", "markov_star", "dijkstra", "random_walk"), required=True)
    s.add_argument("--train", help="training trajectories (Markov variants)")
    s.add_argument("--speed", type=float, default=30.0, help="km/h for shortest-path timestamps")
    gen_opts(s)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("evaluate", help="global and local metrics")
    common(s)
    s.add_argument("--real")
    s.add_argument("--generated")
    s.add_argument("--bins", type=int, default=100)
    s.add_argument("--grid", type=float, default=200.0, help="OD grid cell size, meters")
    s.add_argument("--edr-threshold", type=float, default=200.0, help="meters")
    s.add_argument("--label", default="")
    s.set_defaults(func=cmd_evaluate)
    return p


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
            break
        if a.startswith("--config="):
            path = a.split("=", 1)[1]
            break
    else:
        return
    try:
        defaults = json.loads(_need(path, "config file").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, "bad_config", f"{path}: {exc}") from None
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            known = {a.dest for a in sp._actions}
            sp.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items() if k.replace("-", "_") in known})


def main(argv=None) -> int:
    from .data import DataError
    from .model import DataConsistencyError
    from .roadnet import NetworkFormatError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return EXIT_OK if exc.code == 0 else EXIT_CONFIG
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except (NetworkFormatError, DataError, DataConsistencyError) as exc:
        code, kind, msg = EXIT_DATA, "data_error", str(exc)
    except ValueError as exc:
        code, kind, msg = EXIT_DATA, "data_error", str(exc)
    print(json.dumps({"error": kind, "code": code, "message": msg}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
