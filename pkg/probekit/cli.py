"""
probekit CLI

Usage:
    probekit --help
    probekit run --scenario untrained32 --runs 2 --seed 7 --out runs/u32
    probekit run --config configs/mnist.json --data ~/mnist --workers 4
    # or via env var:
    export PROBEKIT_DATA=~/mnist
    probekit run --scenario deep128-guides --out runs/guides
    probekit probe --scenario deep128-guides --out runs/guides
    probekit report runs/guides/records.csv --out runs/guides/plots --split train
    probekit entropy-demo --random 3
    probekit gradcheck

Environment variables:
    PROBEKIT_DATA   default MNIST directory

Commands:
    run             Train a scenario, probe every checkpoint, write records and plots
    probe           Re-run the probe suite on checkpoints saved by an earlier run
    report          Render SVG layer curves and aggregates from a records CSV
    entropy-demo    Print H[Y|A_k] along built-in, random or user-supplied chains
    gradcheck       Finite-difference and loop-reference checks of every op
    fetch-mnist     Download the MNIST IDX files

Exit codes: 0 success, 2 missing/invalid data or config, 3 broken invariant, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from . import logs
from .checkpoint import find_checkpoints
from .datasets import MNIST_BASE_URL, fetch_mnist
from .entropy import chain_conditional_entropies, demo_chains, label_entropy, random_chain
from .exceptions import CheckpointError, ConfigError, DataError, InvariantError, ProbekitError
from .experiments import DATA_ENV, default_config, execute_scenario, load_config, probe_checkpoints
from .gradcheck import run_suite
from .models.config import SCENARIOS, ScenarioConfig
from .models.entropy import ChainSpec
from .report import read_records, render_report, write_records
from .tensor import Rng


def _env_or_default(value: Optional[str], env_name: str) -> Optional[str]:
    if value:
        return value
    return os.environ.get(env_name)


def _scenario_config(args: argparse.Namespace) -> ScenarioConfig:
    """Config file (or scenario defaults) with command-line overrides applied."""
    if args.config:
        config = load_config(args.config)
        if args.scenario and args.scenario != config.scenario:
            raise ConfigError(f"--scenario {args.scenario} contradicts {args.config} ({config.scenario})")
    elif args.scenario:
        config = default_config(args.scenario)
    else:
        raise ConfigError("either --scenario or --config is required")

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.runs is not None:
        overrides["runs"] = args.runs
    if args.steps is not None:
        kept = [s for s in config.checkpoint_steps if s < args.steps]
        overrides["train_steps"] = args.steps
        overrides["checkpoint_steps"] = kept + [args.steps] if args.steps > 0 else [0]
    if args.out:
        overrides["output_dir"] = args.out
    if args.workers is not None:
        overrides["workers"] = args.workers
    data = _env_or_default(args.data, DATA_ENV)
    if data:
        overrides["data_dir"] = data
    if not overrides:
        return config
    try:
        return ScenarioConfig.model_validate({**config.model_dump(), **overrides})
    except ValidationError as exc:
        raise ConfigError(f"invalid overrides: {exc}") from exc


def _write_outputs(out: Path, records, split: str) -> None:
    write_records(records, out / "records.csv")
    if records:
        paths = render_report(records, out / "plots", split=split)
        print(f"Wrote {out / 'records.csv'} and {len(paths) - 1} plots under {out / 'plots'}")
    else:
        print(f"Wrote {out / 'records.csv'} (no probe records)")


def cmd_run(args: argparse.Namespace) -> int:
    config = _scenario_config(args)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.model_dump_json(indent=2))
    result = execute_scenario(config, out_dir=out)
    (out / "summaries.json").write_text(
        json.dumps([s.model_dump(mode="json") for s in result.summaries], indent=2)
    )
    _write_outputs(out, result.records, args.split)
    diverged = [s.run for s in result.summaries if s.diverged]
    if diverged:
        print(f"{config.scenario}: runs {diverged} diverged (see summaries.json)")
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    config = _scenario_config(args)
    out = Path(config.output_dir)
    paths = find_checkpoints(out, config.scenario)
    if not paths or not any(paths.values()):
        raise CheckpointError(f"no checkpoints for {config.scenario} under {out / 'checkpoints'}")
    records = probe_checkpoints(config, paths)
    _write_outputs(out, records, args.split)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    records = read_records(args.records)
    out = Path(args.out) if args.out else Path(args.records).parent / "plots"
    paths = render_report(records, out, split=args.split)
    for p in paths:
        print(p)
    return 0


def cmd_entropy_demo(args: argparse.Namespace) -> int:
    chains = {}
    if args.chain:
        path = Path(args.chain)
        if not path.exists():
            raise DataError(f"missing chain file: {path}")
        try:
            chains[path.stem] = ChainSpec.model_validate_json(path.read_text())
        except ValidationError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    else:
        chains.update(demo_chains())
    rng = Rng(args.seed)
    for i in range(args.random):
        chains[f"random{i}"] = random_chain(rng.derive(i), args.max_alphabet, args.max_length)
    for name, spec in chains.items():
        values = chain_conditional_entropies(spec)
        seq = " ".join(f"{v:.6f}" for v in values)
        print(f"{name:<12} H[Y]={label_entropy(spec):.6f}  H[Y|A_k]: {seq}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_suite(seed=args.seed, repeats=args.repeats)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<22} {r.kind:<8} {r.value:.3e}  threshold {r.threshold:.0e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_fetch_mnist(args: argparse.Namespace) -> int:
    data = _env_or_default(args.data, DATA_ENV)
    if not data:
        raise DataError(f"no target directory: pass --data or set {DATA_ENV}")
    for p in fetch_mnist(data, base_url=args.base_url, timeout=args.timeout):
        print(p)
    return 0


def _scenario_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--scenario", choices=SCENARIOS, help="Scenario to run (defaults per scenario)")
    sp.add_argument("--config", help="JSON scenario config; flags below override it")
    sp.add_argument("--seed", type=int, help="Base seed")
    sp.add_argument("--runs", type=int, help="Number of independent runs")
    sp.add_argument("--steps", type=int, help="Model training steps (last checkpoint moves here)")
    sp.add_argument("--out", help="Output directory (default: config output_dir)")
    sp.add_argument("--split", choices=("train", "test"), default="test", help="Split plotted in SVGs (default: test)")
    sp.add_argument("--workers", type=int, help="Concurrent probe trainers (default: 1)")
    sp.add_argument("--data", help=f"MNIST directory (env: {DATA_ENV})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="probekit", description="Linear classifier probes for layer-wise analysis.")
    p.add_argument("--verbose", action="store_true", help="Debug logging")

    sub = p.add_subparsers(dest="command", required=True)

    # run
    sp = sub.add_parser("run", help="Train a scenario and probe its checkpoints")
    _scenario_flags(sp)
    sp.set_defaults(func=cmd_run)

    # probe
    sp = sub.add_parser("probe", help="Probe checkpoints saved by an earlier run")
    _scenario_flags(sp)
    sp.set_defaults(func=cmd_probe)

    # report
    sp = sub.add_parser("report", help="Render plots and aggregates from a records CSV")
    sp.add_argument("records", help="Path to records.csv")
    sp.add_argument("--out", help="Plot directory (default: <records dir>/plots)")
    sp.add_argument("--split", choices=("train", "test"), default="test", help="Split to plot (default: test)")
    sp.set_defaults(func=cmd_report)

    # entropy-demo
    sp = sub.add_parser("entropy-demo", help="Conditional entropy along Markov chains")
    sp.add_argument("--chain", help="JSON ChainSpec file (replaces the built-in chains)")
    sp.add_argument("--random", type=int, default=0, help="Also print N random chains")
    sp.add_argument("--seed", type=int, default=0, help="Seed for random chains")
    sp.add_argument("--max-alphabet", type=int, default=5)
    sp.add_argument("--max-length", type=int, default=6)
    sp.set_defaults(func=cmd_entropy_demo)

    # gradcheck
    sp = sub.add_parser("gradcheck", help="Numerical checks of every differentiable op")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--repeats", type=int, default=1, help="Random points per op (default: 1)")
    sp.set_defaults(func=cmd_gradcheck)

    # fetch-mnist
    sp = sub.add_parser("fetch-mnist", help="Download MNIST IDX files")
    sp.add_argument("--data", help=f"Target directory (env: {DATA_ENV})")
    sp.add_argument("--base-url", default=MNIST_BASE_URL, help="Mirror URL")
    sp.add_argument("--timeout", type=float, default=60.0, help="HTTP timeout in seconds (default: 60)")
    sp.set_defaults(func=cmd_fetch_mnist)

    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logs.set_verbose(args.verbose)
    try:
        return args.func(args)
    except (DataError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3
    except ProbekitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
