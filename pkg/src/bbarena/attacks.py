"""Query-based black-box attacks driven solely through the defended channel.

Two gradient-estimation attacks (``nes``, ``zo_signsgd``) and three
search-based attacks (``simba``, ``signhunter``, ``square``). All share the
same contract: consume queries only via the channel, check attacker-observed
success after every accepted step, stop on success or budget exhaustion, and
return a feasible point. With ``eot_m > 1`` every probe becomes an averaged
probe (the adaptive attacker); success checks stay single raw queries, which
is what a deployed attacker ultimately observes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numkit import Norm, RngStream, Vector, feasible_array, norm_array
from .oracle import AttackChannel

DEFAULT_Q = 6
DEFAULT_ETA_SCALE = 0.06  # step size as a fraction of the radius


@dataclass
class AttackConfig:
    norm: Norm
    radius: float
    mu: float
    max_queries: int
    eta: float | None = None  # None -> DEFAULT_ETA_SCALE * radius
    samples_per_step: int = DEFAULT_Q
    eot_m: int = 1
    square_size_schedule: tuple[tuple[float, float], ...] | None = None
    baseline_mode: str = "cached"  # "paired" re-probes the reference point
    seed: int = 0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.max_queries < 2:
            raise ValueError("max_queries must be >= 2")
        if self.samples_per_step < 1:
            raise ValueError("samples_per_step must be >= 1")
        if self.eot_m < 1:
            raise ValueError("eot_m must be >= 1")
        if self.baseline_mode not in ("cached", "paired"):
            raise ValueError("baseline_mode must be 'cached' or 'paired'")
        if self.square_size_schedule is not None:
            sides = [s for _, s in self.square_size_schedule]
            if any(b > a for a, b in zip(sides, sides[1:])):
                raise ValueError("schedule side fractions must be decreasing")

    @property
    def step_size(self) -> float:
        return self.eta if self.eta is not None else DEFAULT_ETA_SCALE * self.radius


@dataclass
class AttackOutcome:
    """Per-sample record of one attack run.

    ``success`` is what the attacker itself observed (a negative defended
    value); ``true_success`` and ``final_true_margin`` are filled in
    defender-side by the harness, never by attack code.
    """

    success: bool
    queries_used: int
    iterations: int
    x_adv: Vector
    perturbation_norm: float
    true_success: bool | None = None
    final_true_margin: float | None = None
    trace: list = field(default_factory=list)


def attack_rng(cfg: AttackConfig) -> RngStream:
    """The attacker's own stream; exposed so runs can be replayed in tests."""
    return RngStream(cfg.seed, 0)


def _finish(channel, x0, cfg, x, success, iterations, trace) -> AttackOutcome:
    return AttackOutcome(
        success=success,
        queries_used=channel.used,
        iterations=iterations,
        x_adv=Vector(x, x0.shape),
        perturbation_norm=norm_array(x - x0.values, cfg.norm),
        trace=trace,
    )


def _trace(trace, iterations, used, value):
    trace.append(
        {"iteration": iterations, "queries_used": used, "observed_loss": float(value)}
    )


# ---------------------------------------------------------------------------
# gradient-estimation attacks


def _zo_descent(channel: AttackChannel, x0: Vector, cfg: AttackConfig, sign_step: bool):
    rng = attack_rng(cfg)
    center = x0.values
    d = x0.d
    q = cfg.samples_per_step
    mu, eta = cfg.mu, cfg.step_size
    iter_cost = 2 * q * cfg.eot_m + 1  # antithetic probes plus success check

    x = center.copy()
    trace: list = []
    iterations = 0
    success = False
    while channel.remaining >= iter_cost:
        u = rng.normal((q, d))
        f_plus = channel.probe_batch(x + mu * u)
        f_minus = channel.probe_batch(x - mu * u)
        g = ((f_plus - f_minus) / (2.0 * mu * q)) @ u
        if sign_step or cfg.norm == Norm.LINF:
            direction = np.sign(g)
        else:
            g_norm = np.linalg.norm(g)
            if g_norm == 0.0:
                direction = np.zeros(d)
            else:
                direction = g / g_norm
        x = feasible_array(center, cfg.radius, cfg.norm, x - eta * direction)
        iterations += 1
        value = channel.probe_raw(x)
        _trace(trace, iterations, channel.used, value)
        if value < 0:
            success = True
            break
    return _finish(channel, x0, cfg, x, success, iterations, trace)


def nes_attack(channel: AttackChannel, x0: Vector, cfg: AttackConfig) -> AttackOutcome:
    """Gaussian finite-difference gradient estimation over q antithetic
    direction pairs; LINF takes sign steps, L2 normalised gradient steps."""
    return _zo_descent(channel, x0, cfg, sign_step=False)


def zo_signsgd_attack(
    channel: AttackChannel, x0: Vector, cfg: AttackConfig
) -> AttackOutcome:
    """Same estimator as ``nes_attack`` but the update is coordinate-wise
    sign of the estimate in both norms."""
    return _zo_descent(channel, x0, cfg, sign_step=True)


# ---------------------------------------------------------------------------
# search-based attacks


def simba_attack(channel: AttackChannel, x0: Vector, cfg: AttackConfig) -> AttackOutcome:
    """Coordinate-wise random search over standard basis directions (L2 only).

    Walks fresh random permutations of the basis; each coordinate first tries
    +mu, then -mu, accepting a step when the defended value drops strictly
    below the cached best. One or two probes per coordinate visit.
    """
    if cfg.norm != Norm.L2:
        raise ValueError("simba is an L2 attack")
    rng = attack_rng(cfg)
    center = x0.values
    d = x0.d
    cost = cfg.eot_m

    x = center.copy()
    trace: list = []
    iterations = 0
    success = False
    if channel.remaining < cost:
        return _finish(channel, x0, cfg, x, success, iterations, trace)
    best = channel.probe(x)
    _trace(trace, iterations, channel.used, best)
    success = best < 0

    while not success and channel.remaining >= cost:
        for k in rng.permutation(d):
            if channel.remaining < cost:
                break
            iterations += 1
            if cfg.baseline_mode == "paired":
                best = channel.probe(x)
                if channel.remaining < cost:
                    break
            for sign in (1.0, -1.0):
                candidate = x.copy()
                candidate[k] += sign * cfg.mu
                value = channel.probe(candidate)
                if value < best:
                    x = feasible_array(center, cfg.radius, cfg.norm, candidate)
                    best = value
                    break
                if channel.remaining < cost:
                    break
            _trace(trace, iterations, channel.used, best)
            if best < 0:
                success = True
                break
    return _finish(channel, x0, cfg, x, success, iterations, trace)


def signhunter_attack(
    channel: AttackChannel, x0: Vector, cfg: AttackConfig
) -> AttackOutcome:
    """Sign hunting by recursive block flips.

    Maintains a sign vector s, proposing x0 + R*s (LINF; L2 rescales to the
    sphere), and walks a halving tree of coordinate blocks: flip a block,
    keep the flip iff the defended value drops below the cached best. The
    tree restarts while budget remains.
    """
    center = x0.values
    d = x0.d
    scale = cfg.radius if cfg.norm == Norm.LINF else cfg.radius / math.sqrt(d)
    cost = cfg.eot_m

    def candidate(s):
        return feasible_array(center, cfg.radius, cfg.norm, center + scale * s)

    signs = np.ones(d)
    trace: list = []
    iterations = 0
    success = False
    x = center.copy()
    if channel.remaining < cost:
        return _finish(channel, x0, cfg, x, success, iterations, trace)
    x = candidate(signs)
    best = channel.probe(x)
    _trace(trace, iterations, channel.used, best)
    success = best < 0

    n_levels = max(1, math.ceil(math.log2(d))) + 1
    exhausted = False
    while not success and not exhausted:
        progressed = False
        for level in range(n_levels):
            for chunk in np.array_split(np.arange(d), min(2**level, d)):
                if channel.remaining < cost:
                    exhausted = True
                    break
                flipped = signs.copy()
                flipped[chunk] = -flipped[chunk]
                if cfg.baseline_mode == "paired":
                    best = channel.probe(x)
                    if channel.remaining < cost:
                        exhausted = True
                        break
                value = channel.probe(candidate(flipped))
                iterations += 1
                if value < best:
                    signs = flipped
                    best = value
                    x = candidate(signs)
                    progressed = True
                _trace(trace, iterations, channel.used, best)
                if best < 0:
                    success = True
                    break
            if success or exhausted:
                break
        if not progressed and channel.remaining < cost:
            exhausted = True
    return _finish(channel, x0, cfg, x, success, iterations, trace)


def default_square_schedule(mu: float) -> tuple[tuple[float, float], ...]:
    """Side fraction halves once 2%, 10%, 25% and 50% of budget is spent."""
    return (
        (0.0, mu),
        (0.02, mu / 2),
        (0.10, mu / 4),
        (0.25, mu / 8),
        (0.50, mu / 16),
    )


def square_attack(channel: AttackChannel, x0: Vector, cfg: AttackConfig) -> AttackOutcome:
    """Random search over localized block updates at full perturbation size.

    For image-shaped inputs, proposes squares of side ceil(mu * min(H, W))
    set to +-R per channel; flat vectors fall back to contiguous segments
    of length ceil(mu * d), preserving the localized-block character.
    LINF only; initialisation is a random vertical-stripe perturbation.
    """
    if cfg.norm != Norm.LINF:
        raise ValueError("square is an LINF attack")
    rng = attack_rng(cfg)
    center = x0.values
    d = x0.d
    radius = cfg.radius
    cost = cfg.eot_m
    schedule = cfg.square_size_schedule or default_square_schedule(cfg.mu)

    def side_fraction(spent_fraction: float) -> float:
        frac = schedule[0][1]
        for threshold, side in schedule:
            if spent_fraction >= threshold:
                frac = side
        return frac

    if x0.shape is not None:
        height, width, channels = x0.shape
        stripes = rng.rademacher((1, width, channels)).astype(np.float64)
        delta = (radius * np.broadcast_to(stripes, (height, width, channels))).ravel()
    else:
        delta = radius * rng.rademacher(d).astype(np.float64)

    trace: list = []
    iterations = 0
    success = False
    x = center.copy()
    if channel.remaining < cost:
        return _finish(channel, x0, cfg, x, success, iterations, trace)
    x = feasible_array(center, radius, cfg.norm, center + delta)
    best = channel.probe(x)
    _trace(trace, iterations, channel.used, best)
    success = best < 0

    while not success and channel.remaining >= cost:
        frac = side_fraction(channel.used / channel.budget)
        proposal = delta.copy()
        if x0.shape is not None:
            height, width, channels = x0.shape
            side = max(1, min(math.ceil(frac * min(height, width)), min(height, width)))
            row = int(rng.integers(0, height - side + 1))
            col = int(rng.integers(0, width - side + 1))
            block = proposal.reshape(height, width, channels)
            block[row : row + side, col : col + side, :] = (
                radius * rng.rademacher(channels).astype(np.float64)
            )
        else:
            seg = max(1, min(math.ceil(frac * d), d))
            start = int(rng.integers(0, d - seg + 1))
            proposal[start : start + seg] = radius * float(rng.rademacher())
        if cfg.baseline_mode == "paired":
            best = channel.probe(x)
            if channel.remaining < cost:
                break
        candidate = feasible_array(center, radius, cfg.norm, center + proposal)
        value = channel.probe(candidate)
        iterations += 1
        if value < best:
            delta = proposal
            x = candidate
            best = value
        _trace(trace, iterations, channel.used, best)
        if best < 0:
            success = True
    return _finish(channel, x0, cfg, x, success, iterations, trace)


ATTACKS = {
    "NES": nes_attack,
    "ZOSIGN": zo_signsgd_attack,
    "SIMBA": simba_attack,
    "SIGNHUNTER": signhunter_attack,
    "SQUARE": square_attack,
}


def run_attack(
    name: str, channel: AttackChannel, x0: Vector, cfg: AttackConfig
) -> AttackOutcome:
    try:
        fn = ATTACKS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}")
    return fn(channel, x0, cfg)
