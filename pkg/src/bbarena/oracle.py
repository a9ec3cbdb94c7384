"""The black-box boundary: margin objective, Gaussian query noising, and
exact query accounting.

Attack code must only ever touch :class:`AttackChannel`, which exposes the
defended (noised, metered) value of the margin and nothing else. The exact
margin is a defender-side tool for evaluation and analysis.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .netmod import MlpModel, forward_batch
from .numkit import RngStream, Vector


class OutputSpace(str, Enum):
    LOGIT = "LOGIT"
    SOFTMAX = "SOFTMAX"


class BudgetExhausted(RuntimeError):
    """Raised when a query would push the ledger past its budget."""


@dataclass
class MarginOracle:
    """True-label margin of a frozen model.

    Untargeted: ``f(x) = out_y(x) - max_{j != y} out_j(x)``; negative means
    the model misclassifies x. With ``target_label`` set the sign convention
    flips so that negative means the target class wins.
    """

    model: MlpModel
    true_label: int
    output_space: OutputSpace = OutputSpace.LOGIT
    target_label: int | None = None

    def __post_init__(self):
        k = self.model.num_classes
        if not 0 <= self.true_label < k:
            raise ValueError(f"true_label {self.true_label} out of range for K={k}")
        if self.target_label is not None and not 0 <= self.target_label < k:
            raise ValueError("target_label out of range")


def _margin_from_logits(oracle: MarginOracle, logits: np.ndarray) -> np.ndarray:
    if oracle.output_space == OutputSpace.SOFTMAX:
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        logits = e / e.sum(axis=1, keepdims=True)
    if oracle.target_label is None:
        own = logits[:, oracle.true_label].copy()
        rest = logits.copy()
        rest[:, oracle.true_label] = -np.inf
        return own - rest.max(axis=1)
    own = logits[:, oracle.target_label].copy()
    rest = logits.copy()
    rest[:, oracle.target_label] = -np.inf
    return rest.max(axis=1) - own


def margin_batch(oracle: MarginOracle, x: np.ndarray) -> np.ndarray:
    """Exact margins for a (N, d) batch; never touches any ledger."""
    return _margin_from_logits(oracle, forward_batch(oracle.model, x))


def margin(oracle: MarginOracle, x: Vector) -> float:
    """Exact (noiseless) margin. Defender-side only."""
    if x.d != oracle.model.d_in:
        raise ValueError(f"input has dimension {x.d}, model expects {oracle.model.d_in}")
    return float(margin_batch(oracle, x.values[None, :])[0])


@dataclass
class DefensePolicy:
    """Gaussian input-noise defense of scale ``nu`` with its own stream."""

    nu: float
    rng: RngStream

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")


@dataclass
class QueryLedger:
    """Exact count of oracle evaluations, capped by a budget."""

    budget: int
    count: int = 0
    history: list | None = None

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be positive")

    @property
    def remaining(self) -> int:
        return self.budget - self.count

    def ensure(self, n: int) -> None:
        """Check n queries are payable without consuming anything."""
        if n > self.remaining:
            raise BudgetExhausted(
                f"budget exhausted: {self.count}/{self.budget} used, {n} requested"
            )

    def charge(self, n: int) -> None:
        """Reserve n queries; the ledger is untouched when it cannot pay."""
        self.ensure(n)
        self.count += n

    def record(self, values: np.ndarray) -> None:
        if self.history is not None:
            base = self.count - len(values) + 1
            self.history.extend(
                (base + i, float(v)) for i, v in enumerate(values)
            )


def query_batch(
    oracle: MarginOracle,
    defense: DefensePolicy,
    ledger: QueryLedger,
    x: np.ndarray,
) -> np.ndarray:
    """One metered defended query per row, each with fresh noise.

    Row-major noise draws make this bit-identical to a loop of single
    queries over the same defender stream.
    """
    n = len(x)
    ledger.charge(n)
    if defense.nu > 0:
        x = x + defense.nu * defense.rng.normal(x.shape)
    values = margin_batch(oracle, x)
    ledger.record(values)
    return values


def query(
    oracle: MarginOracle,
    defense: DefensePolicy,
    ledger: QueryLedger,
    x: Vector,
) -> float:
    """The feedback an attacker gets for one query: margin at x + nu*v."""
    return float(query_batch(oracle, defense, ledger, x.values[None, :])[0])


def eot_query_batch(
    oracle: MarginOracle,
    defense: DefensePolicy,
    ledger: QueryLedger,
    x: np.ndarray,
    m: int,
) -> np.ndarray:
    """Row means of m defended queries each; charges m per row up front."""
    if m < 1:
        raise ValueError("m must be >= 1")
    n = len(x)
    ledger.ensure(n * m)  # partial consumption forbidden
    reps = np.repeat(x, m, axis=0)
    values = query_batch(oracle, defense, ledger, reps)
    return values.reshape(n, m).mean(axis=1)


def eot_query(
    oracle: MarginOracle,
    defense: DefensePolicy,
    ledger: QueryLedger,
    x: Vector,
    m: int,
) -> float:
    """Mean of m independent defended queries at x (the averaging attacker)."""
    return float(eot_query_batch(oracle, defense, ledger, x.values[None, :], m)[0])


def observed_success(
    oracle: MarginOracle,
    defense: DefensePolicy,
    ledger: QueryLedger,
    x: Vector,
) -> bool:
    """True iff a fresh defended query at x comes back negative. Costs 1."""
    return query(oracle, defense, ledger, x) < 0


class AttackChannel:
    """The only capability handed to attack code.

    Wraps (oracle, defense, ledger) behind defended operations; there is no
    path from here to the exact margin, the defense scale, or the defender
    stream. ``eot_m > 1`` turns every probe into an averaged probe.
    """

    def __init__(
        self,
        oracle: MarginOracle,
        defense: DefensePolicy,
        ledger: QueryLedger,
        eot_m: int = 1,
    ):
        if eot_m < 1:
            raise ValueError("eot_m must be >= 1")
        self._oracle = oracle
        self._defense = defense
        self._ledger = ledger
        self.eot_m = eot_m

    @property
    def used(self) -> int:
        return self._ledger.count

    @property
    def remaining(self) -> int:
        return self._ledger.remaining

    @property
    def budget(self) -> int:
        return self._ledger.budget

    def probe_batch(self, x: np.ndarray) -> np.ndarray:
        if self.eot_m == 1:
            return query_batch(self._oracle, self._defense, self._ledger, x)
        return eot_query_batch(self._oracle, self._defense, self._ledger, x, self.eot_m)

    def probe(self, x: np.ndarray) -> float:
        """Defended value at one point; costs ``eot_m`` queries."""
        return float(self.probe_batch(np.asarray(x, dtype=np.float64)[None, :])[0])

    def probe_raw(self, x: np.ndarray) -> float:
        """One raw defended query regardless of ``eot_m`` (stopping rule)."""
        return float(
            query_batch(
                self._oracle,
                self._defense,
                self._ledger,
                np.asarray(x, dtype=np.float64)[None, :],
            )[0]
        )
