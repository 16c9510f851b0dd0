"""Privacy mechanisms and the moments accountant.

* Laplace noisy-argmax over teacher vote counts (the labelling mechanism).
* Gaussian gradient sanitiser (clip to norm S, add N(0, sigma^2 S^2)); kept
  as a baseline API and never used by the teacher/student pipeline.
* :class:`PrivacyLedger`, which accumulates log-moment bounds per query and
  converts them into a certified epsilon at a fixed delta.

Each noisy-argmax query with ``Lap(1/gamma)`` noise is ``(2 gamma, 0)``-DP,
so its lambda-th log moment is bounded by ``2 gamma^2 lambda (lambda + 1)``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AccountingError, InfeasibleEpsilonError, UsageError

DEFAULT_DELTA = 1e-5
MOMENT_ORDERS = tuple(range(1, 65))


# ---------------------------------------------------------------------------
# Laplace noisy argmax
# ---------------------------------------------------------------------------

@dataclass
class LaplaceNoise:
    """``Lap(1/gamma)`` samples drawn from a seeded generator.

    ``gamma = inf`` is the noiseless limit and always returns 0.
    """

    gamma: float
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __post_init__(self):
        if not self.gamma > 0:
            raise UsageError("gamma must be positive")

    @property
    def scale(self):
        return 1.0 / self.gamma

    @classmethod
    def seeded(cls, gamma, seed):
        return cls(gamma, np.random.default_rng(seed))

    def sample(self, size=None):
        u = self.rng.uniform(-0.5, 0.5, size=size)
        return laplace_from_uniform(u, self.gamma)


def laplace_from_uniform(u, gamma):
    """Inverse CDF of ``Lap(0, 1/gamma)`` at ``u + 1/2`` for ``u`` in (-1/2, 1/2).

    ``|u|`` is clamped one ulp below 1/2 so the endpoints map to large but
    finite values.
    """
    u = np.asarray(u, dtype=np.float64)
    mag = np.minimum(np.abs(u), np.nextafter(0.5, 0.0))
    out = -(1.0 / gamma) * np.sign(u) * np.log1p(-2.0 * mag)
    return out if out.ndim else float(out)


def sample_laplace(noise, size=None):
    return noise.sample(size)


@dataclass(frozen=True)
class VoteHistogram:
    counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if not counts:
            raise UsageError("vote histogram is empty")
        if min(counts) < 0:
            raise UsageError("vote counts must be nonnegative")
        object.__setattr__(self, "counts", counts)

    @property
    def num_teachers(self):
        return sum(self.counts)

    @classmethod
    def from_predictions(cls, predictions, num_classes):
        return cls(tuple(np.bincount(np.asarray(predictions, dtype=np.int64),
                                     minlength=num_classes)))


def noisy_argmax(votes, noise):
    """Index of the largest ``count + Lap(1/gamma)``; ties go to the lowest index."""
    counts = np.asarray(votes.counts, dtype=np.float64)
    if math.isinf(noise.gamma):
        return int(np.argmax(counts))
    return int(np.argmax(counts + noise.sample(counts.size)))


def noisy_argmax_batch(counts, noise):
    """Row-wise :func:`noisy_argmax` over a ``(N, m)`` count matrix."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[1] == 0:
        raise UsageError("expected a nonempty (N, m) count matrix")
    if math.isinf(noise.gamma):
        return counts.argmax(axis=1)
    return (counts + noise.sample(counts.shape)).argmax(axis=1)


# ---------------------------------------------------------------------------
# Gaussian sanitiser (baseline)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianSanitizerConfig:
    clip_norm: float
    noise_multiplier: float

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise UsageError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise UsageError("noise_multiplier must be nonnegative")


def clip_gradient(grad, clip_norm):
    """Scale ``grad`` by ``min(1, clip_norm / ||grad||_2)``."""
    grad = np.asarray(grad, dtype=np.float64)
    norm = np.linalg.norm(grad)
    if norm <= clip_norm:
        return grad.copy()
    clipped = grad * (clip_norm / norm)
    # rounding can leave the product a hair above the bound
    while np.linalg.norm(clipped) > clip_norm:
        clipped = clipped * (1 - 2 ** -52)
    return clipped


def sanitize_gradient(grad, config, rng):
    clipped = clip_gradient(grad, config.clip_norm)
    assert np.linalg.norm(clipped) <= config.clip_norm
    if config.noise_multiplier == 0:
        return clipped
    std = config.noise_multiplier * config.clip_norm
    return clipped + rng.normal(0.0, std, size=clipped.shape)


# ---------------------------------------------------------------------------
# moments accountant
# ---------------------------------------------------------------------------

def query_moment(gamma, order):
    """Log-moment bound of one ``(2 gamma, 0)``-DP query at the given order."""
    return 2.0 * gamma * gamma * order * (order + 1)


@dataclass
class PrivacyLedger:
    """Moment accumulators for ``query_count`` noisy-argmax queries at one gamma."""

    gamma: float
    delta: float = DEFAULT_DELTA
    orders: tuple = MOMENT_ORDERS
    query_count: int = 0
    moments: np.ndarray = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise UsageError("gamma must be positive")
        if not 0 < self.delta < 1:
            raise UsageError("delta must lie in (0, 1)")
        self.orders = tuple(int(o) for o in self.orders)
        if self.moments is None:
            self.moments = np.zeros(len(self.orders))

    def record_query(self, count=1):
        """Account for ``count`` more queries; returns ``self``."""
        if count < 0:
            raise UsageError("query count must be nonnegative")
        orders = np.asarray(self.orders, dtype=np.float64)
        if math.isinf(self.gamma):
            per_query = np.full(len(self.orders), np.inf)
        else:
            per_query = query_moment(self.gamma, orders)
        if count:
            self.moments = self.moments + count * per_query
        self.query_count += count
        return self

    def moments_epsilon(self):
        """``min_lambda (alpha(lambda) + ln(1/delta)) / lambda`` and the minimising order."""
        orders = np.asarray(self.orders, dtype=np.float64)
        eps = (self.moments + math.log(1.0 / self.delta)) / orders
        best = int(np.argmin(eps))
        return float(eps[best]), self.orders[best]

    def composition_epsilon(self):
        if self.query_count == 0:
            return 0.0
        return 2.0 * self.gamma * self.query_count

    def epsilon(self):
        """Certified epsilon: the tighter of the moments bound and simple composition."""
        return min(self.moments_epsilon()[0], self.composition_epsilon())

    def report(self):
        """Human-readable summary of the ledger."""
        eps_m, order = self.moments_epsilon()
        lines = [
            f"gamma          {self.gamma:.9g}",
            f"queries        {self.query_count}",
            f"delta          {self.delta:.3g}",
            f"eps_moments    {eps_m:.9g} (order {order})",
            f"eps_compose    {self.composition_epsilon():.9g}",
            f"eps_certified  {self.epsilon():.9g}",
            "order  log_moment",
        ]
        lines += [f"{o:5d}  {m:.9g}" for o, m in zip(self.orders, self.moments)]
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {
            "gamma": self.gamma,
            "delta": self.delta,
            "query_count": self.query_count,
            "orders": list(self.orders),
            "moments": [float(m) for m in self.moments],
            "epsilon": self.epsilon(),
        }


def record_query(ledger):
    return ledger.record_query()


def epsilon(ledger):
    return ledger.epsilon()


def epsilon_for(gamma, queries, delta=DEFAULT_DELTA, orders=MOMENT_ORDERS):
    """Certified epsilon after ``queries`` noisy-argmax queries at ``gamma``."""
    return PrivacyLedger(gamma, delta, orders).record_query(queries).epsilon()


def solve_gamma(target_epsilon, queries, delta=DEFAULT_DELTA, orders=MOMENT_ORDERS,
                rel_tol=1e-6):
    """Largest gamma (to ``rel_tol``) whose certified epsilon stays within the target.

    Raises :class:`InfeasibleEpsilonError` if no positive gamma qualifies.
    """
    if not target_epsilon > 0:
        raise UsageError("target epsilon must be positive")
    if queries < 0:
        raise UsageError("query count must be nonnegative")
    if queries == 0:
        floor = PrivacyLedger(1.0, delta, orders).epsilon()
        if floor > target_epsilon:
            raise InfeasibleEpsilonError(
                f"epsilon {target_epsilon} is below the floor {floor}", floor)
        return math.inf

    def eps(g):
        return epsilon_for(g, queries, delta, orders)

    # simple composition alone makes target/(2Q) feasible
    lo = target_epsilon / (2.0 * queries)
    if eps(lo) > target_epsilon:
        raise InfeasibleEpsilonError(
            f"epsilon {target_epsilon} unreachable with {queries} queries", eps(lo))
    hi = lo * 2.0
    while eps(hi) <= target_epsilon:
        lo, hi = hi, hi * 2.0
    while (hi - lo) > rel_tol * lo:
        mid = 0.5 * (lo + hi)
        if eps(mid) <= target_epsilon:
            lo = mid
        else:
            hi = mid
    return lo


def check_budget(ledger, target_epsilon):
    eps = ledger.epsilon()
    if eps > target_epsilon * (1 + 1e-12):
        raise AccountingError(
            f"certified epsilon {eps:.6g} exceeds target {target_epsilon:.6g}")
    return eps
