"""Monte Carlo verification lab for the smoothing / defended-estimator
analysis, run against analytic oracles with known Lipschitz constants.

The lab checks, empirically:
  * the Gaussian-smoothing identity and the nu*L0*sqrt(d) smoothing gap,
  * first and second moments of the defended finite-difference estimator,
  * the sign-flip probability of noisy loss-difference probes against both
    its upper bound 2*L0*nu*sqrt(d)/|h| and (affine case) the closed form
    Phi(-|h| / (sqrt(2)*nu*||c||)),
  * the convergence trend of defended zeroth-order descent in the noise
    ratio alpha = nu/mu, and diminishing returns of probe averaging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm as _normal

from .numkit import Norm, RngStream, Vector, project_array

SQRT2 = math.sqrt(2.0)


class DegenerateProbe(ValueError):
    """The noiseless loss difference h is (numerically) zero."""


def gamma_factor(alpha: float) -> float:
    """Noise-ratio factor gamma(alpha) = alpha + sqrt(2)/2 in the descent bound."""
    return alpha + SQRT2 / 2.0


def constant_step_size(
    radius: float, epsilon: float, d: int, l0: float, q_iters: int, alpha: float
) -> float:
    """The conservative constant step size [R*eps / (gamma^2 d^3 L0^3 (Q+1))]^(1/2)."""
    return math.sqrt(
        radius * epsilon / (gamma_factor(alpha) ** 2 * d**3 * l0**3 * (q_iters + 1))
    )


def mu_hat(epsilon: float, d: int, l0: float) -> float:
    """Largest probe scale keeping the doubly-smoothed gap below epsilon."""
    return epsilon / (math.sqrt(d) * l0)


# ---------------------------------------------------------------------------
# analytic oracles


@dataclass
class AffineOracle:
    """f(x) = c.x + b;  L0 = ||c|| exactly, L1 = 0."""

    c: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)

    @property
    def d(self) -> int:
        return self.c.size

    @property
    def l0(self) -> float:
        return float(np.linalg.norm(self.c))

    l1 = 0.0

    def value(self, x: np.ndarray) -> float:
        return float(x @ self.c + self.offset)

    def value_batch(self, x: np.ndarray) -> np.ndarray:
        return x @ self.c + self.offset

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.c.copy()

    def grad_batch(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.c, x.shape)

    def exact_flip_probability(self, h: float, nu: float) -> float:
        """P(sign flip) for the paired probe: h_nu - h ~ N(0, 2 nu^2 ||c||^2)."""
        if nu == 0 or self.l0 == 0:
            return 0.0
        return float(_normal.cdf(-abs(h) / (SQRT2 * nu * self.l0)))


@dataclass
class QuadraticOracle:
    """f(x) = x.A.x + b.x on a bounded region.

    ``l0`` is the exact maximum of ||2Ax + b|| over the stated ball when A is
    a multiple of the identity, and a valid upper bound otherwise.
    """

    a: np.ndarray
    b: np.ndarray
    region_center: np.ndarray
    region_radius: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.region_center = np.asarray(self.region_center, dtype=np.float64)

    @property
    def d(self) -> int:
        return self.b.size

    @property
    def spectral(self) -> float:
        return float(np.linalg.norm(self.a, 2))

    @property
    def l0(self) -> float:
        at_center = float(np.linalg.norm(2.0 * self.a @ self.region_center + self.b))
        return at_center + 2.0 * self.spectral * self.region_radius

    @property
    def l1(self) -> float:
        return 2.0 * self.spectral

    def value(self, x: np.ndarray) -> float:
        return float(x @ self.a @ x + self.b @ x)

    def value_batch(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("ni,ij,nj->n", x, self.a, x) + x @ self.b

    def grad(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * self.a @ x + self.b

    def grad_batch(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * x @ self.a.T + self.b


@dataclass
class PiecewiseMaxOracle:
    """f(x) = max_k c_k . x;  L0 = max_k ||c_k||."""

    cs: np.ndarray  # (K, d)

    def __post_init__(self):
        self.cs = np.atleast_2d(np.asarray(self.cs, dtype=np.float64))

    @property
    def d(self) -> int:
        return self.cs.shape[1]

    @property
    def l0(self) -> float:
        return float(np.linalg.norm(self.cs, axis=1).max())

    def value(self, x: np.ndarray) -> float:
        return float((self.cs @ x).max())

    def value_batch(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.cs.T).max(axis=1)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.cs[int(np.argmax(self.cs @ x))].copy()

    def grad_batch(self, x: np.ndarray) -> np.ndarray:
        return self.cs[np.argmax(x @ self.cs.T, axis=1)]


class FunctionOracle:
    """Adapter turning a plain batch function (e.g. a model margin) into an
    oracle the lab can drive; ``l0`` must come from outside (estimated)."""

    def __init__(self, value_batch_fn, d: int, l0: float | None = None):
        self._fn = value_batch_fn
        self.d = d
        self.l0 = l0

    def value(self, x: np.ndarray) -> float:
        return float(self._fn(x[None, :])[0])

    def value_batch(self, x: np.ndarray) -> np.ndarray:
        return self._fn(x)


# ---------------------------------------------------------------------------
# smoothing and estimator measurements


def smooth_estimate(f, x: np.ndarray, nu: float, n: int, rng: RngStream):
    """Monte Carlo mean of f(x + nu*v) with its standard error."""
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    if nu == 0:
        return f.value(x), 0.0
    if n < 2:
        raise ValueError("need n >= 2 samples")
    values = f.value_batch(x[None, :] + nu * rng.normal((n, x.size)))
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(n))


@dataclass
class GapCheckResult:
    max_gap: float
    bound: float
    max_slack_violation: float  # worst (gap - bound - 3*stderr), <= 0 when ok
    ok: bool


def smoothing_gap_check(
    f,
    region_center: np.ndarray,
    region_radius: float,
    nu: float,
    n_points: int,
    n_samples: int,
    rng: RngStream,
) -> GapCheckResult:
    """Check |f_nu - f| <= nu * L0 * sqrt(d) over sampled region points."""
    if f.l0 is None:
        raise ValueError("oracle must carry an L0 constant")
    d = region_center.size
    bound = nu * f.l0 * math.sqrt(d)
    max_gap = 0.0
    worst = -math.inf
    for _ in range(n_points):
        direction = rng.normal(d)
        direction /= np.linalg.norm(direction)
        radius = region_radius * rng.uniform() ** (1.0 / d)
        x = region_center + radius * direction
        mean, stderr = smooth_estimate(f, x, nu, n_samples, rng)
        gap = abs(mean - f.value(x))
        max_gap = max(max_gap, gap)
        worst = max(worst, gap - bound - 3.0 * stderr)
    return GapCheckResult(max_gap, bound, worst, worst <= 0.0)


def defended_estimates(
    f, x: np.ndarray, mu: float, nu: float, n: int, rng: RngStream, m: int = 1
) -> np.ndarray:
    """n draws of the defended one-sided estimator, optionally m-averaged.

    Each draw shares one direction u across its m defender-noise pairs:
    g = mean_j [f(x + mu*u + nu*v_j1) - f(x + nu*v_j2)] / mu * u.
    """
    d = x.size
    u = rng.normal((n, d))
    base1 = x[None, :] + mu * u
    base2 = np.broadcast_to(x, (n, d))
    diffs = np.zeros(n)
    for _ in range(m):
        if nu > 0:
            f1 = f.value_batch(base1 + nu * rng.normal((n, d)))
            f2 = f.value_batch(base2 + nu * rng.normal((n, d)))
        else:
            f1 = f.value_batch(base1)
            f2 = f.value_batch(base2)
        diffs += (f1 - f2) / mu
    diffs /= m
    return diffs[:, None] * u


def estimator_moments(
    f, x: np.ndarray, mu: float, nu: float, n: int, rng: RngStream, m: int = 1
):
    """Empirical per-coordinate mean and variance of the defended estimator,
    with the standard errors needed to band them."""
    if n < 100:
        raise ValueError("need at least 100 samples")
    g = defended_estimates(f, x, mu, nu, n, rng, m)
    mean = g.mean(axis=0)
    var = g.var(axis=0, ddof=1)
    mean_se = g.std(axis=0, ddof=1) / math.sqrt(n)
    # standard error of the sample variance from empirical fourth moments
    centered = g - mean
    fourth = (centered**4).mean(axis=0)
    var_se = np.sqrt(np.maximum(fourth - var**2, 0.0) / n)
    return mean, var, mean_se, var_se


@dataclass
class FlipRateResult:
    empirical: float
    bound: float
    h: float
    trials: int
    exact: float | None = None  # closed form, affine oracles only

    @property
    def stderr(self) -> float:
        p = self.empirical
        return math.sqrt(max(p * (1.0 - p), 1e-12) / self.trials)


def flip_rate(
    f,
    x: np.ndarray,
    mu: float,
    nu: float,
    u: np.ndarray,
    trials: int,
    rng: RngStream,
    l0: float | None = None,
) -> FlipRateResult:
    """Empirical probability that defender noise flips the sign of the
    loss-difference probe h = f(x + mu*u) - f(x), next to its upper bound."""
    l0 = f.l0 if l0 is None else l0
    if l0 is None:
        raise ValueError("need an L0 constant (analytic or estimated)")
    d = x.size
    h = f.value(x + mu * u) - f.value(x)
    if abs(h) < 1e-12:
        raise DegenerateProbe(f"probe difference h={h} is degenerate")
    if nu == 0:
        flips = 0
    else:
        base1 = x[None, :] + mu * u
        base2 = np.broadcast_to(x, (1, d))
        flips = 0
        done = 0
        chunk = 20_000  # keeps the noise matrices small at large d
        while done < trials:
            b = min(chunk, trials - done)
            h_noisy = f.value_batch(base1 + nu * rng.normal((b, d))) - f.value_batch(
                base2 + nu * rng.normal((b, d))
            )
            flips += int(((h_noisy < 0) != (h < 0)).sum())
            done += b
    bound = min(1.0, 2.0 * l0 * nu * math.sqrt(d) / abs(h))
    exact = (
        f.exact_flip_probability(h, nu) if isinstance(f, AffineOracle) else None
    )
    return FlipRateResult(flips / trials, bound, h, trials, exact)


def lipschitz_estimate(
    f, region_center: np.ndarray, region_radius: float, pairs: int, rng: RngStream
) -> float:
    """Max sampled slope |f(y) - f(x)| / ||y - x||; a lower bound on L0."""
    if pairs < 1:
        raise ValueError("need at least one pair")
    d = region_center.size
    best = 0.0
    drawn = 0
    while drawn < pairs:
        xy = region_center + region_radius * rng.normal((2, d)) / math.sqrt(d)
        gap = np.linalg.norm(xy[1] - xy[0])
        if gap < 1e-12:
            continue  # coincident pair, resample
        drawn += 1
        best = max(best, abs(f.value(xy[1]) - f.value(xy[0])) / gap)
    return best


# ---------------------------------------------------------------------------
# descent sweeps


@dataclass
class ConvergenceSweepConfig:
    alpha_grid: tuple[float, ...]
    mu: float
    q_iters: int
    epsilon: float
    radius: float
    x0: np.ndarray
    step_rule: str = "constant"  # "constant" or "theorem"
    eta: float | None = None  # required for the constant rule
    trials: int = 10
    m: int = 1
    grad_samples: int = 10_000

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alpha_grid)
        if any(a < 0 for a in alphas) or list(alphas) != sorted(alphas):
            raise ValueError("alpha_grid must be nonnegative and ascending")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.step_rule not in ("constant", "theorem"):
            raise ValueError("step_rule must be 'constant' or 'theorem'")
        if self.step_rule == "constant" and self.eta is None:
            raise ValueError("constant step rule needs eta")
        self.alpha_grid = alphas
        self.x0 = np.asarray(self.x0, dtype=np.float64)


@dataclass
class SweepCell:
    alpha: float
    m: int
    eta: float
    metric_mean: float  # time-averaged squared smoothed-gradient norm
    metric_trials: np.ndarray  # per-trial metrics
    records: list = field(default_factory=list)  # (trial, step, grad_norm_sq)


def smoothed_grad_norm_sq(
    f, x: np.ndarray, scale: float, n: int, rng: RngStream
) -> float:
    """||E grad f(x + scale*w)||^2 by Monte Carlo (the doubly-smoothed
    gradient: two Gaussian convolutions compose into one of combined scale)."""
    if scale == 0:
        return float(np.linalg.norm(f.grad(x)) ** 2)
    grads = f.grad_batch(x[None, :] + scale * rng.normal((n, x.size)))
    return float(np.linalg.norm(grads.mean(axis=0)) ** 2)


def _descent_trial(f, cfg, alpha, eta, m, attacker: RngStream, defender: RngStream,
                   monitor: RngStream):
    nu = alpha * cfg.mu
    scale = math.sqrt(cfg.mu**2 + nu**2)
    x = cfg.x0.copy()
    d = x.size
    norms = np.zeros(cfg.q_iters + 1)
    for t in range(cfg.q_iters + 1):
        norms[t] = smoothed_grad_norm_sq(f, x, scale, cfg.grad_samples, monitor)
        if t == cfg.q_iters:
            break
        u = attacker.normal(d)
        diff = 0.0
        for _ in range(m):
            v1 = nu * defender.normal(d) if nu > 0 else 0.0
            v2 = nu * defender.normal(d) if nu > 0 else 0.0
            diff += f.value(x + cfg.mu * u + v1) - f.value(x + v2)
        g = diff / (m * cfg.mu) * u
        x = project_array(cfg.x0, cfg.radius, Norm.L2, x - eta * g)
    return norms


def convergence_sweep(f, cfg: ConvergenceSweepConfig, rng: RngStream) -> list[SweepCell]:
    """Defended zeroth-order descent across a grid of noise ratios.

    Per alpha and trial, runs Q projected descent steps with the one-sided
    defended estimator and reports the Monte Carlo time average of the
    squared smoothed-gradient norm along the trajectory.
    """
    cells = []
    for alpha_idx, alpha in enumerate(cfg.alpha_grid):
        if cfg.step_rule == "theorem":
            if f.l0 is None:
                raise ValueError("theorem step rule needs an analytic L0")
            cap = mu_hat(cfg.epsilon, f.d, f.l0)
            if cfg.mu > cap:
                raise ValueError(
                    f"mu={cfg.mu} too large for the theorem step rule; "
                    f"need mu <= mu_hat={cap:.6g}"
                )
            eta = constant_step_size(
                cfg.radius, cfg.epsilon, f.d, f.l0, cfg.q_iters, alpha
            )
        else:
            eta = float(cfg.eta)
        metrics = np.zeros(cfg.trials)
        records = []
        for trial in range(cfg.trials):
            # trial streams are keyed by (alpha cell, trial) so cells and
            # trials can run in any order; the attacker stream is shared
            # across alphas to make the nu=0 collapse bit-exact.
            attacker = rng.child(1, trial)
            defender = rng.child(2, alpha_idx, trial)
            monitor = rng.child(3, alpha_idx, trial)
            norms = _descent_trial(f, cfg, alpha, eta, cfg.m, attacker, defender, monitor)
            metrics[trial] = norms.mean()
            records.extend(
                (trial, step, float(v)) for step, v in enumerate(norms)
            )
        cells.append(SweepCell(alpha, cfg.m, eta, float(metrics.mean()), metrics, records))
    return cells


def eot_sweep(
    f, cfg: ConvergenceSweepConfig, m_grid: tuple[int, ...], alpha: float, rng: RngStream
):
    """Repeat the descent at one noise ratio for each averaging count M,
    reporting the estimator variance at the start point and the metric."""
    if list(m_grid) != sorted(m_grid) or any(m < 1 for m in m_grid):
        raise ValueError("m_grid must be ascending, all >= 1")
    results = []
    for m in m_grid:
        sub = ConvergenceSweepConfig(
            alpha_grid=(alpha,),
            mu=cfg.mu,
            q_iters=cfg.q_iters,
            epsilon=cfg.epsilon,
            radius=cfg.radius,
            x0=cfg.x0,
            step_rule=cfg.step_rule,
            eta=cfg.eta,
            trials=cfg.trials,
            m=m,
            grad_samples=cfg.grad_samples,
        )
        cell = convergence_sweep(f, sub, rng)[0]
        var_rng = rng.child(4, m)
        g = defended_estimates(
            f, cfg.x0, cfg.mu, alpha * cfg.mu, 2000, var_rng, m
        )
        cell_var = float(g.var(axis=0, ddof=1).mean())
        results.append((m, cell_var, cell))
    return results
