"""Command-line entry point: ``python -m taskdriven <command> [--key value ...]``.

Commands: train, sweep, eval, render-debug, mine-selftest. Any configuration
key may be given as ``--key value`` and overrides the ``--config`` file.
Exit codes: 0 success, 1 usage, 2 numerical failure, 3 infeasible sweep.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, checkpoint, config as cfgmod
from . import evaluation as ev
from .envs import BallCatchEnv
from .envs.ballcatch import BALL_INIT
from .envs.render import TextureError, render_scene, to_ppm, validate_texture
from .training import NoFeasiblePolicyError, read_records, select_policy, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_INFEASIBLE = 0, 1, 2, 3
MANIFEST = "manifest.cfg"

log = logging.getLogger("taskdriven")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def split_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """``["--seed", "1", "--algo=pg"]`` -> ``{"seed": "1", "algo": "pg"}``."""
    out: Dict[str, str] = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--") or tok == "--":
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            try:
                value = next(it)
            except StopIteration:
                raise UsageError(f"option --{key} needs a value") from None
        out[key.replace("-", "_")] = value
    return out


def thread_count(explicit: bool, configured: int) -> int:
    """Rollout threads: the configured value (or all cores), capped by TDPG_THREADS."""
    threads = configured if explicit else (os.cpu_count() or 1)
    cap = os.environ.get("TDPG_THREADS")
    if cap:
        try:
            threads = min(threads, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"TDPG_THREADS must be an integer, got {cap!r}") from None
    return threads


def resolve(args, overrides: Dict[str, str], need_env: bool = True) -> cfgmod.RunConfig:
    file_keys = cfgmod.parse_text(Path(args.config).read_text(encoding="utf-8"), args.config) if args.config else {}
    if need_env and "env" not in overrides and "env" not in file_keys:
        raise UsageError("no environment given; pass --env lava|ballcatch or set env in [env]")
    run = cfgmod.load(args.config, overrides)
    threads = thread_count("threads" in overrides or "threads" in file_keys, run.train.threads)
    run.train = dataclasses.replace(run.train, threads=threads)
    return run


def write_manifest(out: Path, run: cfgmod.RunConfig, command: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / MANIFEST
    path.write_text(run.to_text(cfgmod.manifest_header(command, run.train.seed)), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(run: cfgmod.RunConfig) -> int:
    out = Path(run.out_dir)
    write_manifest(out, run, "train")
    result = train(run.train, out)
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"trained {len(result.records)} epochs; final cost {last.cost_mean:.3f}; records in {out / 'records.csv'}")
    if result.best is not None:
        print(f"best epoch {result.best.epoch}: cost {result.best.cost_mean:.3f} mi {result.best.mi_sum:.4f} -> {result.best.checkpoint_file}")
    return EXIT_OK


def beta_dirname(beta: float) -> str:
    return f"beta-{beta:.6g}"


def cmd_sweep(run: cfgmod.RunConfig) -> int:
    if run.train.algo != "tdpg":
        raise UsageError("sweep trains TDPG policies; use 'train' for --algo pg")
    if not run.betas:
        raise UsageError("sweep needs at least one beta")
    out = Path(run.out_dir)
    write_manifest(out, run, "sweep")
    smooth = run.train.value_ema_alpha if run.train.smooth_selection else None
    runs: List[list] = []
    for beta in run.betas:
        sub = out / beta_dirname(beta)
        cfg = dataclasses.replace(run.train, beta=beta)
        write_manifest(sub, dataclasses.replace(run, train=cfg, out_dir=str(sub), betas=[beta]), "train")
        train(cfg, sub)
        runs.append(read_records(sub / "records.csv"))
    rows = []
    for beta, records in zip(run.betas, runs):
        try:
            rec = select_policy([records], run.train.cost_cap, smooth)
            rows.append([repr(beta), rec.epoch, repr(rec.cost_mean), repr(rec.mi_sum), rec.checkpoint_file])
        except NoFeasiblePolicyError:
            rows.append([repr(beta), "", "", "", ""])
    try:
        chosen = select_policy(runs, run.train.cost_cap, smooth)
        which = next(i for i, recs in enumerate(runs) if any(r is chosen for r in recs))
    finally:
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["beta", "chosen_epoch", "cost_mean", "mi_sum", "checkpoint_file"])
            w.writerows(rows)
    pointer = Path(beta_dirname(run.betas[which])) / chosen.checkpoint_file
    (out / "selected.txt").write_text(f"{pointer.as_posix()}\n", encoding="utf-8")
    print(f"selected beta={run.betas[which]:.6g} epoch {chosen.epoch}: cost {chosen.cost_mean:.3f} mi {chosen.mi_sum:.4f} -> {out / pointer}")
    return EXIT_OK


def _checkpoint_path(path: str) -> str:
    if not path:
        raise UsageError("no checkpoint given; pass --checkpoint PATH")
    p = Path(path)
    if p.is_dir() and (p / "selected.txt").exists():
        p = p / (p / "selected.txt").read_text(encoding="utf-8").strip()
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return str(p)


def cmd_eval(run: cfgmod.RunConfig) -> int:
    env_id = run.train.env
    try:
        shifts = ev.scenario_set(env_id, run.scenarios)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    policies = {"policy": _checkpoint_path(run.checkpoint)}
    if run.compare:
        policies["compare"] = _checkpoint_path(run.compare)
    out = Path(run.out_dir)
    write_manifest(out, run, "eval")
    kwargs = dict(n=run.n_eval, seed=run.eval_seed, threads=run.train.threads, bins=run.bins, u_max=run.train.u_max or None)
    beta = run.train.beta
    results = {}
    for name, path in policies.items():
        blocks = checkpoint.load(path)
        before = checkpoint.digest(blocks)
        reports = ev.evaluate_scenarios(blocks, env_id, shifts, **kwargs)
        if checkpoint.digest(blocks) != before:
            raise RuntimeError("evaluation modified the checkpoint parameters")
        results[name] = reports
        stem = "report" if name == "policy" else "report-compare"
        ev.write_reports(out / f"{stem}.csv", reports)
        print(f"[{name}] {path}")
        print(ev.format_table(reports))
        for r in reports:
            risk = ev.entropic_risk(r.costs, beta)
            print(f"  {r.scenario}: entropic risk (beta={beta:.4g}) {risk.value:.3f}")
    hist = out / "histograms"
    for i, shift in enumerate(shifts):
        group = [results[k][i] for k in results]
        ev.export_histogram(group, hist / ev.scenario_filename(shift.label), run.bins, names=list(results))
    return EXIT_OK


def parse_state(text: str) -> np.ndarray:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse state {text!r}") from None
    if len(values) != 5:
        raise UsageError("a ball-catch state has five entries: d,bx,by,vx,vy")
    return np.array(values)


def cmd_render_debug(run: cfgmod.RunConfig, state: Optional[str], out_file: str) -> int:
    if run.train.env != "ballcatch":
        raise UsageError(f"environment {run.train.env!r} has no renderer")
    try:
        texture = validate_texture(run.train.texture)
    except TextureError as exc:
        raise UsageError(str(exc)) from None
    env = BallCatchEnv(run.train.image_size)
    x = parse_state(state) if state else np.array([0.0, *BALL_INIT])
    sigma = run.train.sensor_noise or 0.0
    noise = None
    if sigma:
        from .rng import EVAL, make_rng

        noise = make_rng(run.train.seed, EVAL, 0, 0).standard_normal((1,) + env.obs_shape)
    img = render_scene(x, texture, env.image_size, noise, sigma)[0]
    path = Path(out_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_ppm(img))
    print(f"wrote {path} ({env.image_size}x{env.image_size}, texture {texture}, noise {sigma:g})")
    return EXIT_OK


def cmd_mine_selftest(seed: int, steps: int) -> int:
    from .oracles import format_results, gaussian_mi_suite

    results = gaussian_mi_suite(seed=seed, steps=steps)
    print(format_results(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERICAL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="taskdriven", description="Task-driven policy gradient: train, sweep and evaluate policies.")
    p.add_argument("--version", action="version", version=f"taskdriven {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, text in (
        ("train", "train one policy (PG or TDPG)"),
        ("sweep", "train TDPG for each beta and select a policy"),
        ("eval", "evaluate a checkpoint under test shifts"),
        ("render-debug", "write a ball-catch frame as a PPM file"),
        ("mine-selftest", "run the Gaussian mutual-information oracle"),
    ):
        sp = sub.add_parser(name, help=text, description=text + ". Other --key value pairs override config keys.")
        if name != "mine-selftest":
            sp.add_argument("--config", default=None, help="key=value config file")
        if name == "render-debug":
            sp.add_argument("--state", default=None, help="d,bx,by,vx,vy (default: launch state)")
            sp.add_argument("--out", required=True, help="output .ppm path")
        if name == "mine-selftest":
            sp.add_argument("--seed", type=int, default=0)
            sp.add_argument("--steps", type=int, default=4000, help="critic updates per correlation")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("no command given")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.command == "mine-selftest":
            if rest:
                raise UsageError(f"unexpected arguments {' '.join(rest)}")
            return cmd_mine_selftest(args.seed, args.steps)
        overrides = split_overrides(rest)
        run = resolve(args, overrides)
        if args.command == "train":
            return cmd_train(run)
        if args.command == "sweep":
            return cmd_sweep(run)
        if args.command == "eval":
            return cmd_eval(run)
        return cmd_render_debug(run, args.state, args.out)
    except (UsageError, cfgmod.ConfigError, checkpoint.CheckpointFormatError) as exc:
        print(f"taskdriven: error: {exc}", file=sys.stderr)
        if isinstance(exc, UsageError):
            parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"taskdriven: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoFeasiblePolicyError as exc:
        print(f"taskdriven: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ArithmeticError as exc:
        print(f"taskdriven: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
