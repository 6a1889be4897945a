"""End-to-end reproduction runs for the lava table and the ball-catching robustness study.

Each driver trains PG and TDPG policies, evaluates them on the published test
shifts and returns a JSON-ready summary; the ``check_*`` functions turn a
summary into pass/fail verdicts.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .envs import TEST_TEXTURES, EnvShiftSpec
from .evaluation import evaluate
from .training import NoFeasiblePolicyError, TrainConfig, read_records, select_policy, train

log = logging.getLogger(__name__)

LAVA_SEEDS = (0, 1, 2)
LAVA_TEST_NOISE = 1.0
LAVA_GOAL_BAND = 0.75


def _best_pg(out: Path) -> Tuple[str, float, int]:
    records = read_records(out / "records.csv")
    best = min((r for r in records if r.checkpoint_file), key=lambda r: r.cost_mean)
    return str(out / best.checkpoint_file), best.cost_mean, best.epoch


def _eval_row(ckpt: str, env_id: str, shift: EnvShiftSpec, n: int, seed: int, threads: int, band: Optional[float] = None) -> Dict:
    r = evaluate(ckpt, env_id, shift, n=n, seed=seed, threads=threads)
    row = {"scenario": r.scenario, "cost_mean": r.cost_mean, "cost_std": r.cost_std, "dist_mean": r.dist_mean}
    if band is not None:
        row["within_band"] = float(np.mean(r.distances <= band))
    return row


def lava_seed(out: Path, seed: int, betas: Sequence[float], n_eval: int = 1000, threads: int = 1, warm_start: bool = False, **overrides) -> Dict:
    """PG plus a TDPG beta sweep for one seed, both evaluated at training and at sigma^2 = 1.

    With ``warm_start`` each TDPG run starts from the selected PG policy.
    """
    out = Path(out)
    t0 = time.perf_counter()
    pg_cfg = TrainConfig.lava(algo="pg", seed=seed, threads=threads, **overrides)
    train(pg_cfg, out / "pg")
    pg_ckpt, pg_train_cost, pg_epoch = _best_pg(out / "pg")
    runs = []
    for beta in betas:
        cfg = dataclasses.replace(pg_cfg, algo="tdpg", beta=beta, warm_start=pg_ckpt if warm_start else "")
        sub = out / f"tdpg-beta-{beta:.6g}"
        train(cfg, sub)
        runs.append((beta, sub, read_records(sub / "records.csv")))
    training = EnvShiftSpec(label="training")
    shifted = EnvShiftSpec(sensor_noise=LAVA_TEST_NOISE, label=f"noise-var-{LAVA_TEST_NOISE:g}")
    summary = {
        "seed": seed,
        "pg": {
            "checkpoint": pg_ckpt,
            "epoch": pg_epoch,
            "train_record_cost": pg_train_cost,
            "training": _eval_row(pg_ckpt, "lava", training, n_eval, seed, threads, LAVA_GOAL_BAND),
            "shifted": _eval_row(pg_ckpt, "lava", shifted, n_eval, seed, threads, LAVA_GOAL_BAND),
        },
    }
    try:
        chosen = select_policy([r for _, _, r in runs], pg_cfg.cost_cap, pg_cfg.value_ema_alpha if pg_cfg.smooth_selection else None)
    except NoFeasiblePolicyError as exc:
        summary["tdpg"] = {"feasible": False, "best_cost": exc.best_cost}
    else:
        beta, sub, _ = next(r for r in runs if any(rec is chosen for rec in r[2]))
        ckpt = str(sub / chosen.checkpoint_file)
        summary["tdpg"] = {
            "feasible": True,
            "beta": beta,
            "epoch": chosen.epoch,
            "checkpoint": ckpt,
            "train_record_cost": chosen.cost_mean,
            "mi_sum": chosen.mi_sum,
            "training": _eval_row(ckpt, "lava", training, n_eval, seed, threads, LAVA_GOAL_BAND),
            "shifted": _eval_row(ckpt, "lava", shifted, n_eval, seed, threads, LAVA_GOAL_BAND),
        }
    summary["sweep"] = [
        {"beta": b, "min_cost": min(r.cost_mean for r in recs), "final_cost": recs[-1].cost_mean, "final_mi": recs[-1].mi_sum} for b, _, recs in runs
    ]
    summary["seconds"] = time.perf_counter() - t0
    return summary


def lava_table(
    out_dir, seeds: Sequence[int] = LAVA_SEEDS, betas: Optional[Sequence[float]] = None, n_eval: int = 1000, threads: int = 1, warm_start: bool = False, **overrides
) -> Dict:
    from .training import default_lava_betas

    betas = list(betas) if betas is not None else default_lava_betas()
    out = Path(out_dir)
    per_seed = []
    for seed in seeds:
        per_seed.append(lava_seed(out / f"seed-{seed}", seed, betas, n_eval, threads, warm_start, **overrides))
        log.info("lava seed %d done in %.0f s", seed, per_seed[-1]["seconds"])
    summary = {"betas": betas, "seeds": list(seeds), "n_eval": n_eval, "runs": per_seed, "warm_start": warm_start, "overrides": overrides}
    out.mkdir(parents=True, exist_ok=True)
    (out / "lava_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def check_lava(summary: Dict) -> Tuple[bool, str]:
    runs = summary["runs"]
    pg_train = float(np.mean([r["pg"]["training"]["cost_mean"] for r in runs]))
    pg_shift = float(np.mean([r["pg"]["shifted"]["cost_mean"] for r in runs]))
    feasible = [r["tdpg"]["feasible"] for r in runs]
    parts = [f"(a) PG training cost {pg_train:.2f} <= 40: {pg_train <= 40}"]
    parts.append(f"(b) TDPG feasible under cap 40 in {sum(feasible)}/{len(runs)} seeds")
    ok_a, ok_b = pg_train <= 40, all(feasible)
    pg_ratio = pg_shift / pg_train
    if any(feasible):
        td = [r["tdpg"] for r in runs if r["tdpg"]["feasible"]]
        td_train = float(np.mean([t["training"]["cost_mean"] for t in td]))
        td_shift = float(np.mean([t["shifted"]["cost_mean"] for t in td]))
        band = float(np.mean([t["shifted"]["within_band"] for t in td]))
        td_ratio = td_shift / td_train
        ok_c = td_ratio <= 1.5 and pg_ratio >= 2.5
        ok_d = band >= 0.7
        parts.append(f"(c) sigma^2=1 ratio TDPG {td_shift:.1f}/{td_train:.1f}={td_ratio:.2f} (<=1.5), PG {pg_shift:.1f}/{pg_train:.1f}={pg_ratio:.2f} (>=2.5)")
        parts.append(f"(d) TDPG within 0.75 of goal at sigma^2=1: {band:.1%} (>=70%)")
    else:
        ok_c = ok_d = False
        parts.append(f"(c) no TDPG policy; PG ratio {pg_ratio:.2f}")
        parts.append("(d) no TDPG policy")
    return ok_a and ok_b and ok_c and ok_d, "; ".join(parts)


# ---------------------------------------------------------------------------
# ball catching


def ballcatch_robustness(
    out_dir,
    seed: int = 0,
    betas: Optional[Sequence[float]] = None,
    n_eval: int = 1000,
    threads: int = 1,
    pg_epochs: int = 100,
    tdpg_epochs: int = 100,
    **overrides,
) -> Dict:
    """PG, then TDPG warm-started from it, evaluated under pixel noise 0.25 and the seven test backdrops."""
    from .training import default_ballcatch_betas

    out = Path(out_dir)
    t0 = time.perf_counter()
    betas = list(betas) if betas is not None else default_ballcatch_betas()
    pg_cfg = TrainConfig.ballcatch(algo="pg", seed=seed, threads=threads, epochs=pg_epochs, **overrides)
    train(pg_cfg, out / "pg")
    pg_ckpt, _, pg_epoch = _best_pg(out / "pg")
    runs = []
    for beta in betas:
        cfg = dataclasses.replace(pg_cfg, algo="tdpg", beta=beta, epochs=tdpg_epochs, warm_start=pg_ckpt)
        sub = out / f"tdpg-beta-{beta:.6g}"
        train(cfg, sub)
        runs.append((beta, sub, read_records(sub / "records.csv")))
    shifts = [EnvShiftSpec(label="training"), EnvShiftSpec(sensor_noise=0.25, label="pixel-noise-0.25")]
    shifts += [EnvShiftSpec(texture=t, label=f"background-{t}") for t in TEST_TEXTURES]
    summary: Dict = {"seed": seed, "betas": betas, "pg": {"checkpoint": pg_ckpt, "epoch": pg_epoch}}
    summary["pg"]["reports"] = [_eval_row(pg_ckpt, "ballcatch", s, n_eval, seed, threads) for s in shifts]
    try:
        chosen = select_policy([r for _, _, r in runs], pg_cfg.cost_cap, pg_cfg.value_ema_alpha if pg_cfg.smooth_selection else None)
    except NoFeasiblePolicyError as exc:
        summary["tdpg"] = {"feasible": False, "best_cost": exc.best_cost}
    else:
        beta, sub, _ = next(r for r in runs if any(rec is chosen for rec in r[2]))
        ckpt = str(sub / chosen.checkpoint_file)
        summary["tdpg"] = {"feasible": True, "beta": beta, "epoch": chosen.epoch, "checkpoint": ckpt}
        summary["tdpg"]["reports"] = [_eval_row(ckpt, "ballcatch", s, n_eval, seed, threads) for s in shifts]
    summary["seconds"] = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    (out / "ballcatch_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def check_ballcatch(summary: Dict) -> Tuple[bool, str]:
    if not summary["tdpg"].get("feasible"):
        return False, f"no feasible TDPG policy (best cost {summary['tdpg'].get('best_cost', float('nan')):.2f})"
    pg = {r["scenario"]: r["cost_mean"] for r in summary["pg"]["reports"]}
    td = {r["scenario"]: r["cost_mean"] for r in summary["tdpg"]["reports"]}
    pg_ratio = pg["pixel-noise-0.25"] / pg["training"]
    td_ratio = td["pixel-noise-0.25"] / td["training"]
    wins = sum(td[f"background-{t}"] < pg[f"background-{t}"] for t in TEST_TEXTURES)
    ok = td_ratio < pg_ratio and wins >= 4
    return ok, f"pixel-noise 0.25 ratio TDPG {td_ratio:.3f} vs PG {pg_ratio:.3f}; TDPG lower on {wins}/7 backdrops (need 4)"

