"""Experiment orchestration: grid execution over (attack, mu, nu, M, seed),
metric aggregation, and CSV reporting.

A sweep is fully determined by its config file: the attack pool, every
stream, and the output bytes. Cells may be fanned out to worker processes
(capped by ``BBARENA_THREADS``); per-cell streams are derived from the cell
identity, so the schedule cannot change results.
"""

from __future__ import annotations

import json
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import netmod
from .attacks import ATTACKS, AttackConfig, AttackOutcome, run_attack
from .netmod import Dataset, MlpModel
from .numkit import Norm, RngStream, Vector, mix64
from .oracle import (
    AttackChannel,
    DefensePolicy,
    MarginOracle,
    QueryLedger,
    margin,
)

CSV_HEADER = (
    "attack,norm,mu,nu,M,budget,failure_rate,true_failure_rate,"
    "mean_q,median_q,clean_acc,n_samples,n_seeds"
)

BUDGET_MODES = ("FIXED", "ADAPTIVE")

# stream-derivation labels
_POOL, _DEFENSE, _ATTACK, _ACCURACY = 11, 12, 13, 14


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    model_path: str
    dataset_path: str
    sample_count: int
    norm: Norm
    radius: float
    attack_list: tuple[str, ...]
    mu_grid: tuple[float, ...]
    nu_grid: tuple[float, ...]
    m_grid: tuple[int, ...] = (1,)
    budget: int = 10_000
    budget_mode: str = "FIXED"
    seeds: tuple[int, ...] = (0,)
    defense_eval_sigma: float = 0.0
    simba_l2_radius: float = 1.0
    samples_per_step: int = 10
    eta: float | None = None

    def __post_init__(self):
        if not self.mu_grid or not self.nu_grid or not self.m_grid or not self.seeds:
            raise ConfigError("grids and seeds must be nonempty")
        if self.budget < 2:
            raise ConfigError("budget must be >= 2")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if self.budget_mode not in BUDGET_MODES:
            raise ConfigError(f"budget_mode must be one of {BUDGET_MODES}")
        unknown = [a for a in self.attack_list if a.upper() not in ATTACKS]
        if unknown:
            raise ConfigError(f"unknown attacks: {unknown}")
        self.attack_list = tuple(a.upper() for a in self.attack_list)
        if "SQUARE" in self.attack_list and self.norm != Norm.LINF:
            raise ConfigError("SQUARE runs under LINF; set norm = LINF")


@dataclass
class ReportRow:
    attack: str
    norm: Norm
    mu: float
    nu: float
    m: int
    budget: int
    failure_rate: float
    true_failure_rate: float
    mean_q: float | None  # None when the cell had no observed successes
    median_q: float | None
    clean_acc: float
    n_samples: int
    n_seeds: int


# ---------------------------------------------------------------------------
# config files


def _parse_sections(text: str) -> dict:
    sections: dict[str, dict[str, str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, value = line.split("=", 1)
        sections[current][key.strip().lower()] = value.strip()
    return sections


def _floats(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def _ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())


def load_spec(path: str) -> ExperimentSpec:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        return spec_from_text(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


def spec_from_text(text: str, base_dir: str = ".") -> ExperimentSpec:
    sec = _parse_sections(text)

    def need(section: str, key: str) -> str:
        try:
            return sec[section][key]
        except KeyError:
            raise ConfigError(f"missing [{section}] {key}")

    def opt(section: str, key: str, default=None):
        return sec.get(section, {}).get(key, default)

    def path_of(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    try:
        spec = ExperimentSpec(
            model_path=path_of(need("model", "model")),
            dataset_path=path_of(need("data", "dataset")),
            sample_count=int(need("data", "sample_count")),
            norm=Norm(need("attack", "norm").upper()),
            radius=float(need("attack", "radius")),
            attack_list=tuple(
                a.strip() for a in need("attack", "attacks").split(",") if a.strip()
            ),
            mu_grid=_floats(need("attack", "mu_grid")),
            nu_grid=_floats(need("defense", "nu_grid")),
            m_grid=_ints(opt("attack", "m_grid", "1")),
            budget=int(opt("attack", "budget", "10000")),
            budget_mode=opt("attack", "budget_mode", "FIXED").upper(),
            seeds=_ints(opt("sweep", "seeds", "0")),
            defense_eval_sigma=float(opt("defense", "eval_sigma", "0")),
            simba_l2_radius=float(opt("attack", "simba_l2_radius", "1.0")),
            samples_per_step=int(opt("attack", "q", "10")),
            eta=(float(opt("attack", "eta")) if opt("attack", "eta") else None),
        )
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return spec


# ---------------------------------------------------------------------------
# execution


def select_pool(model: MlpModel, data: Dataset, spec: ExperimentSpec) -> np.ndarray:
    """Indices of attacked samples: clean-correct only, drawn deterministically
    from the first seed. Failure rate is ill-defined on misclassified inputs."""
    if spec.sample_count > data.n:
        raise ConfigError("sample_count exceeds dataset size")
    rng = RngStream(spec.seeds[0], 0).child(_POOL)
    order = rng.permutation(data.n)
    pred = netmod.forward_batch(model, data.inputs).argmax(axis=1)
    correct = order[pred[order] == data.labels[order]]
    if len(correct) < spec.sample_count:
        raise ConfigError(
            f"only {len(correct)} clean-correct samples, need {spec.sample_count}"
        )
    return correct[: spec.sample_count]


def attack_norm_radius(spec: ExperimentSpec, attack: str) -> tuple[Norm, float]:
    """SIMBA always runs its L2 ball; everything else follows the spec norm."""
    if attack == "SIMBA":
        return Norm.L2, spec.simba_l2_radius
    return spec.norm, spec.radius


def cell_budget(spec: ExperimentSpec, m: int) -> int:
    return spec.budget * m if spec.budget_mode == "ADAPTIVE" else spec.budget


def run_single(
    model: MlpModel,
    x0: Vector,
    label: int,
    attack: str,
    cfg: AttackConfig,
    nu: float,
    defense_rng: RngStream,
) -> AttackOutcome:
    """One attack run against a fresh defended oracle, with the true-margin
    fields filled in defender-side afterwards."""
    oracle = MarginOracle(model, label)
    defense = DefensePolicy(nu, defense_rng)
    ledger = QueryLedger(cfg.max_queries)
    channel = AttackChannel(oracle, defense, ledger, cfg.eot_m)
    outcome = run_attack(attack, channel, x0, cfg)
    outcome.final_true_margin = margin(oracle, outcome.x_adv)
    outcome.true_success = outcome.final_true_margin < 0
    return outcome


@dataclass
class _Cell:
    index: int
    attack: str
    mu: float
    nu: float
    m: int


def _run_cell(args):
    spec, model, data, pool, cell, trace_dir = args
    norm, radius = attack_norm_radius(spec, cell.attack)
    budget = cell_budget(spec, cell.m)
    successes, true_successes, success_queries = [], [], []
    for seed in spec.seeds:
        for sample_pos, sample_idx in enumerate(pool):
            x0 = data.vector(int(sample_idx))
            label = int(data.labels[sample_idx])
            cfg = AttackConfig(
                norm=norm,
                radius=radius,
                mu=cell.mu,
                max_queries=budget,
                eta=spec.eta,
                samples_per_step=spec.samples_per_step,
                eot_m=cell.m,
                seed=mix64(seed, _ATTACK, cell.index, sample_pos),
            )
            defense_rng = RngStream(seed, 0).child(_DEFENSE, cell.index, sample_pos)
            outcome = run_single(model, x0, label, cell.attack, cfg, cell.nu, defense_rng)
            successes.append(outcome.success)
            true_successes.append(outcome.true_success)
            if outcome.success:
                success_queries.append(outcome.queries_used)
            if trace_dir is not None:
                _write_trace(trace_dir, spec, cell, seed, sample_pos, outcome)
    n = len(successes)
    return cell.index, {
        "failure_rate": 1.0 - sum(successes) / n,
        "true_failure_rate": 1.0 - sum(true_successes) / n,
        "mean_q": statistics.fmean(success_queries) if success_queries else None,
        "median_q": float(statistics.median(success_queries)) if success_queries else None,
        "budget": budget,
        "norm": norm,
    }


def _write_trace(trace_dir, spec, cell, seed, sample_pos, outcome: AttackOutcome):
    name = f"cell{cell.index:03d}_seed{seed}_sample{sample_pos:03d}.jsonl"
    header = {
        "attack": cell.attack,
        "mu": cell.mu,
        "nu": cell.nu,
        "M": cell.m,
        "seed": seed,
        "sample": sample_pos,
    }
    final = {
        "final": True,
        "success": outcome.success,
        "true_success": outcome.true_success,
        "queries_used": outcome.queries_used,
        "iterations": outcome.iterations,
    }
    with open(os.path.join(trace_dir, name), "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in outcome.trace:
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps(final) + "\n")


def _worker_count(n_cells: int) -> int:
    raw = os.environ.get("BBARENA_THREADS", "0")
    try:
        requested = int(raw)
    except ValueError:
        raise ConfigError(f"BBARENA_THREADS must be an integer, got {raw!r}")
    if requested < 0:
        raise ConfigError("BBARENA_THREADS must be >= 0")
    if requested == 0:
        requested = os.cpu_count() or 1
    return max(1, min(requested, n_cells))


def run_experiment(
    spec: ExperimentSpec,
    model: MlpModel | None = None,
    data: Dataset | None = None,
    trace_dir: str | None = None,
) -> list[ReportRow]:
    """Run every grid cell once per seed per pooled sample; aggregate rows.

    Deterministic given the spec: streams are derived from (seed, cell,
    sample), and rows are emitted in sorted cell order regardless of the
    execution schedule.
    """
    if model is None:
        model = netmod.load_model(spec.model_path)
    if data is None:
        data = netmod.load_dataset(spec.dataset_path)
    if data.d != model.d_in:
        raise ConfigError("dataset dimension disagrees with model input")
    pool = select_pool(model, data, spec)
    if trace_dir is not None:
        os.makedirs(trace_dir, exist_ok=True)

    cells = [
        _Cell(i, attack, mu, nu, m)
        for i, (attack, mu, nu, m) in enumerate(
            (a, mu, nu, m)
            for a in spec.attack_list
            for mu in spec.mu_grid
            for nu in spec.nu_grid
            for m in spec.m_grid
        )
    ]
    acc_rng = RngStream(spec.seeds[0], 0).child(_ACCURACY)
    clean_acc = netmod.accuracy(
        model, data.subset(pool), spec.defense_eval_sigma, acc_rng
    )

    tasks = [(spec, model, data, pool, cell, trace_dir) for cell in cells]
    workers = _worker_count(len(cells))
    results: dict[int, dict] = {}
    if workers == 1:
        for task in tasks:
            idx, summary = _run_cell(task)
            results[idx] = summary
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool_exec:
            for idx, summary in pool_exec.map(_run_cell, tasks):
                results[idx] = summary

    rows = []
    for cell in cells:
        summary = results[cell.index]
        rows.append(
            ReportRow(
                attack=cell.attack,
                norm=summary["norm"],
                mu=cell.mu,
                nu=cell.nu,
                m=cell.m,
                budget=summary["budget"],
                failure_rate=summary["failure_rate"],
                true_failure_rate=summary["true_failure_rate"],
                mean_q=summary["mean_q"],
                median_q=summary["median_q"],
                clean_acc=clean_acc,
                n_samples=len(pool),
                n_seeds=len(spec.seeds),
            )
        )
    rows.sort(key=lambda r: (r.attack, r.norm.value, r.mu, r.nu, r.m))
    return rows


# ---------------------------------------------------------------------------
# reporting


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_csv(rows: list[ReportRow], path: str) -> None:
    """Emit the report table; refuses to create a file for an empty report."""
    if not rows:
        raise ValueError("no rows to write")
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            ",".join(
                _fmt(v)
                for v in (
                    r.attack,
                    r.norm.value,
                    r.mu,
                    r.nu,
                    r.m,
                    r.budget,
                    r.failure_rate,
                    r.true_failure_rate,
                    r.mean_q,
                    r.median_q,
                    r.clean_acc,
                    r.n_samples,
                    r.n_seeds,
                )
            )
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_csv(path: str) -> list[ReportRow]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header: {header!r}")
        rows = []
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            f = line.split(",")
            rows.append(
                ReportRow(
                    attack=f[0],
                    norm=Norm(f[1]),
                    mu=float(f[2]),
                    nu=float(f[3]),
                    m=int(f[4]),
                    budget=int(f[5]),
                    failure_rate=float(f[6]),
                    true_failure_rate=float(f[7]),
                    mean_q=float(f[8]) if f[8] else None,
                    median_q=float(f[9]) if f[9] else None,
                    clean_acc=float(f[10]),
                    n_samples=int(f[11]),
                    n_seeds=int(f[12]),
                )
            )
    return rows


def summarize(rows: list[ReportRow]) -> str:
    """Human-readable table sorted by (attack, nu/mu)."""
    if not rows:
        raise ValueError("no rows to summarize")
    ordered = sorted(rows, key=lambda r: (r.attack, math.inf if r.mu == 0 else r.nu / r.mu))
    header = (
        f"{'attack':<11}{'norm':<6}{'mu':>9}{'nu':>9}{'M':>4}{'budget':>8}"
        f"{'fail':>8}{'true_fail':>11}{'mean_q':>10}{'median_q':>10}{'clean_acc':>11}"
    )
    lines = [header, "-" * len(header)]
    for r in ordered:
        mean_q = f"{r.mean_q:.1f}" if r.mean_q is not None else "(none)"
        median_q = f"{r.median_q:.1f}" if r.median_q is not None else "(none)"
        lines.append(
            f"{r.attack:<11}{r.norm.value:<6}{r.mu:>9.4g}{r.nu:>9.4g}{r.m:>4}"
            f"{r.budget:>8}{r.failure_rate:>8.3f}{r.true_failure_rate:>11.3f}"
            f"{mean_q:>10}{median_q:>10}{r.clean_acc:>11.4f}"
        )
    lines.append(
        "note: clean_acc is defended accuracy with a single noise draw per input; "
        "query stats cover observed-success runs only."
    )
    return "\n".join(lines)


def read_trace(path: str) -> tuple[dict, list[dict], dict]:
    """Split a run trace into (header, iteration records, final record)."""
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if len(records) < 2 or not records[-1].get("final"):
        raise ValueError(f"{path}: malformed trace")
    return records[0], records[1:-1], records[-1]
