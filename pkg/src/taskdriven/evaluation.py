"""Robustness evaluation of frozen policies under distribution shift.

Rolls a checkpointed policy in shifted copies of its environment, summarises
cost and final-distance statistics, computes the entropic risk, and writes
CSV/SVG artifacts. Evaluation draws from its own RNG stream, so it never
shares randomness with training.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import checkpoint, rng as rngs
from .autodiff import ContractViolation
from .envs import EnvShiftSpec, TEST_TEXTURES, make_env
from .nets import PolicyParams
from .training import policy_from_blocks, rollout_batch

DEFAULT_ROLLOUTS = 1000
DEFAULT_BINS = 30
LAVA_TEST_NOISE = (1e-3, 1e-2, 1e-1, 1.0)
BALLCATCH_TEST_NOISE = (0.10, 0.15, 0.20, 0.25)
REPORT_COLUMNS = ("scenario", "n", "cost_mean", "cost_std", "dist_mean", "dist_std")

Checkpoint = Union[str, os.PathLike, Mapping[str, np.ndarray], PolicyParams]


@dataclass
class EvalReport:
    scenario: str
    n: int
    cost_mean: float
    cost_std: float
    dist_mean: float
    dist_std: float
    costs: np.ndarray
    distances: np.ndarray
    bin_edges: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bin_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    costs_per_step: Optional[np.ndarray] = None

    @classmethod
    def from_samples(cls, scenario: str, costs, distances, bins: int = DEFAULT_BINS, costs_per_step=None) -> "EvalReport":
        costs = np.asarray(costs, dtype=float)
        distances = np.asarray(distances, dtype=float)
        if costs.size == 0:
            raise ContractViolation("an evaluation report needs at least one rollout")
        counts, edges = histogram(costs, bins)
        return cls(
            scenario,
            int(costs.size),
            float(np.mean(costs)),
            _std(costs),
            float(np.mean(distances)),
            _std(distances),
            costs,
            distances,
            edges,
            counts,
            costs_per_step,
        )

    def row(self) -> List[str]:
        return [self.scenario, str(self.n), *(repr(v) for v in (self.cost_mean, self.cost_std, self.dist_mean, self.dist_std))]


def _std(x: np.ndarray) -> float:
    # one rollout has no spread by convention
    return float(np.std(x)) if x.size > 1 else 0.0


def histogram(costs: np.ndarray, bins: int = DEFAULT_BINS, value_range: Optional[Tuple[float, float]] = None):
    if bins < 1:
        raise ContractViolation("histogram needs at least one bin")
    lo, hi = value_range if value_range is not None else (float(np.min(costs)), float(np.max(costs)))
    if hi <= lo:
        # degenerate range: widen symmetrically so every value lands in one bin
        lo, hi = lo - 0.5, hi + 0.5
    return np.histogram(costs, bins=bins, range=(lo, hi))


# ---------------------------------------------------------------------------
# scenarios


def paper_scenarios(env_id: str) -> List[EnvShiftSpec]:
    """The training distribution followed by the test shifts of the published tables."""
    if env_id == "lava":
        out = [EnvShiftSpec(label="training")]
        out += [EnvShiftSpec(sensor_noise=v, label=f"noise-var-{v:g}") for v in LAVA_TEST_NOISE]
        return out
    if env_id == "ballcatch":
        out = [EnvShiftSpec(label="training")]
        out += [EnvShiftSpec(sensor_noise=s, label=f"pixel-noise-{s:.2f}") for s in BALLCATCH_TEST_NOISE]
        out += [EnvShiftSpec(texture=t, label=f"background-{t}") for t in TEST_TEXTURES]
        return out
    raise ValueError(f"unknown environment {env_id!r}")


def scenario_set(env_id: str, name: str) -> List[EnvShiftSpec]:
    """``paper``, ``training``, or a comma list of ``noise=<v>`` / ``texture=<id>`` items."""
    name = name.strip()
    if name == "paper":
        return paper_scenarios(env_id)
    if name == "training":
        return [EnvShiftSpec(label="training")]
    out = []
    for item in filter(None, (s.strip() for s in name.split(","))):
        key, _, value = item.partition("=")
        if key == "noise":
            v = float(value)
            out.append(EnvShiftSpec(sensor_noise=v, label=f"noise-{v:g}"))
        elif key == "texture":
            out.append(EnvShiftSpec(texture=value, label=f"background-{value}"))
        else:
            raise ValueError(f"cannot parse scenario {item!r}")
    if not out:
        raise ValueError("empty scenario set")
    return out


# ---------------------------------------------------------------------------
# evaluation


def load_policy(ckpt: Checkpoint, env_id: str) -> PolicyParams:
    if isinstance(ckpt, PolicyParams):
        return ckpt
    blocks = ckpt if isinstance(ckpt, Mapping) else checkpoint.load(ckpt)
    # copy so the caller's arrays cannot be touched through the rebuilt nets
    return policy_from_blocks(env_id, {k: np.array(v, copy=True) for k, v in blocks.items()})


def env_for_policy(env_id: str, params: PolicyParams, u_max: Optional[float] = 10.0):
    if env_id == "lava":
        return make_env("lava", u_max=u_max)
    return make_env(env_id, image_size=int(params.meta.get("image_size", 16)))


def evaluate(
    ckpt: Checkpoint,
    env_id: str,
    shift: Optional[EnvShiftSpec] = None,
    n: int = DEFAULT_ROLLOUTS,
    seed: int = 0,
    threads: int = 1,
    bins: int = DEFAULT_BINS,
    u_max: Optional[float] = 10.0,
) -> EvalReport:
    """Roll out the frozen stochastic policy ``n`` times under ``shift``."""
    if n < 1:
        raise ContractViolation("need at least one evaluation rollout")
    params = load_policy(ckpt, env_id)
    env = env_for_policy(env_id, params, u_max)
    shift = shift if shift is not None else EnvShiftSpec(label="training")
    batch = rollout_batch(params, env, shift, n, seed, 0, threads, stream=rngs.EVAL)
    dist = env.final_distance(batch.raw_states[:, -1])
    return EvalReport.from_samples(shift.label, batch.total_cost, dist, bins, batch.costs)


def evaluate_scenarios(ckpt: Checkpoint, env_id: str, shifts: Sequence[EnvShiftSpec], **kwargs) -> List[EvalReport]:
    params = load_policy(ckpt, env_id)
    return [evaluate(params, env_id, s, **kwargs) for s in shifts]


# ---------------------------------------------------------------------------
# risk


@dataclass(frozen=True)
class RiskEstimate:
    beta: float
    value: float
    n: int


def entropic_risk(costs: Sequence[float], beta: float) -> RiskEstimate:
    """``(1/beta) log mean exp(beta * c)`` with the maximum subtracted first."""
    c = np.asarray(costs, dtype=float).reshape(-1)
    if c.size == 0:
        raise ContractViolation("entropic risk of an empty sample")
    if not beta > 0:
        raise ContractViolation(f"beta must be positive, got {beta}")
    if not np.all(np.isfinite(c)):
        raise ContractViolation("costs must be finite")
    # factor out the largest cost itself so constant samples come back exactly
    top = float(np.max(c))
    value = top + math.log(float(np.mean(np.exp(beta * (c - top))))) / beta
    return RiskEstimate(float(beta), value, int(c.size))


@dataclass(frozen=True)
class BoundReport:
    """Both sides of the risk-plus-information cost bound. Never asserted."""

    beta: float
    risk_terms: Tuple[float, ...]
    mi_terms: Tuple[float, ...]
    bound_rhs: float
    empirical_cost: float
    gap: float
    binding: bool = False
    note: str = "NON-BINDING: MINE underestimates MI and the KL condition is not verified"


def bound_diagnostic(costs_per_step: np.ndarray, mi: Sequence[float], beta: float) -> BoundReport:
    """Compare ``sum_t (rho_beta[c_t] + I_t)`` with the empirical expected total cost.

    ``costs_per_step`` is N x K (one column per stage cost, terminal included).
    Missing MI entries count as zero.
    """
    c = np.asarray(costs_per_step, dtype=float)
    if c.ndim == 1:
        c = c[:, None]
    risks = tuple(entropic_risk(c[:, k], beta).value for k in range(c.shape[1]))
    mis = tuple(float(v) for v in mi) + (0.0,) * max(0, c.shape[1] - len(mi))
    rhs = math.fsum(risks) + math.fsum(mis)
    emp = float(np.mean(c.sum(axis=1)))
    return BoundReport(float(beta), risks, mis, rhs, emp, rhs - emp)


# ---------------------------------------------------------------------------
# artifacts


def scenario_filename(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


def write_reports(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def read_reports(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_table(reports: Sequence[EvalReport]) -> str:
    lines = [f"{'scenario':<24}{'n':>6}{'mean cost':>12}{'std':>10}{'mean dist':>12}"]
    for r in reports:
        lines.append(f"{r.scenario:<24}{r.n:>6}{r.cost_mean:>12.2f}{r.cost_std:>10.2f}{r.dist_mean:>12.3f}")
    return "\n".join(lines)


def pooled_range(reports: Sequence[EvalReport]) -> Tuple[float, float]:
    allc = np.concatenate([r.costs for r in reports])
    return float(allc.min()), float(allc.max())


_PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd")


def _svg(series: Sequence[Tuple[str, np.ndarray]], edges: np.ndarray, title: str) -> str:
    w, h, pad = 640, 360, 48
    peak = max(int(c.max()) for _, c in series) or 1
    span = edges[-1] - edges[0]
    sx = (w - 2 * pad) / span
    sy = (h - 2 * pad) / peak
    k = len(series)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
    ]
    for i, (name, counts) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        for b, cnt in enumerate(counts):
            if cnt == 0:
                continue
            bw = (edges[b + 1] - edges[b]) * sx / k
            x = pad + (edges[b] - edges[0]) * sx + i * bw
            y = h - pad - cnt * sy
            out.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{bw:.2f}" height="{cnt * sy:.2f}" fill="{color}" fill-opacity="0.8"/>')
        out.append(f'<text x="{w - pad}" y="{pad + 16 * i}" text-anchor="end" font-family="sans-serif" font-size="12" fill="{color}">{name}</text>')
    for v, anchor in ((edges[0], "start"), (edges[-1], "end")):
        x = pad + (v - edges[0]) * sx
        out.append(f'<text x="{x:.1f}" y="{h - pad + 16}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{v:.1f}</text>')
    out.append(f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-family="sans-serif" font-size="11">{peak}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_histogram(
    reports: Union[EvalReport, Sequence[EvalReport]],
    path_stem,
    bins: int = DEFAULT_BINS,
    value_range: Optional[Tuple[float, float]] = None,
    names: Optional[Sequence[str]] = None,
) -> Tuple[Path, Path]:
    """Write ``<stem>.csv`` (bin edges and counts) and ``<stem>.svg``.

    Several reports share one set of bins spanning their pooled cost range, so
    paired histograms are directly comparable.
    """
    reports = [reports] if isinstance(reports, EvalReport) else list(reports)
    names = list(names) if names is not None else [r.scenario for r in reports]
    rng_ = value_range if value_range is not None else pooled_range(reports)
    hists = [histogram(r.costs, bins, rng_) for r in reports]
    edges = hists[0][1]
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = stem.parent / f"{stem.name}.csv", stem.parent / f"{stem.name}.svg"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", *names])
        for b in range(bins):
            w.writerow([repr(float(edges[b])), repr(float(edges[b + 1])), *(int(c[b]) for c, _ in hists)])
    svg_path.write_text(_svg([(nm, c) for nm, (c, _) in zip(names, hists)], edges, stem.name))
    return csv_path, svg_path
