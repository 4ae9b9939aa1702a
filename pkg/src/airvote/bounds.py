"""Closed-form error and convergence bounds, and Monte Carlo checks of them.

The checks run on a scalar Gaussian gradient oracle: each mini-batch
gradient coordinate is N(g, sigma^2 / A), which is unbiased, unimodal and
symmetric, so the modelling assumptions behind the bounds hold exactly.
"""

from __future__ import annotations

import itertools
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from . import channel
from .errors import InvalidRegimeError
from .rng import stream

Z99 = float(stats.norm.ppf(0.995))
LEMMA1_BREAK = 2.0 / math.sqrt(3.0)


@dataclass(frozen=True)
class BoundReport:
    name: str
    value: float
    valid: bool
    reason: str = ""
    inputs: dict = field(default_factory=dict)

    @property
    def vacuous(self) -> bool:
        return not self.value < 1.0

    def within(self, epsilon: float) -> bool:
        """True when the bound certifies an error probability of at most ``epsilon``."""
        return self.valid and self.value <= epsilon


# --------------------------------------------------------------------------
# Closed forms
# --------------------------------------------------------------------------


def gsnr(g_j: float, sigma_j: float, A: int) -> float:
    """sqrt(A) * |g_j| / sigma_j."""
    if sigma_j <= 0:
        raise ValueError(f"sigma must be positive, got {sigma_j}")
    if A < 1:
        raise ValueError(f"batch size must be >= 1, got {A}")
    return math.sqrt(A) * abs(g_j) / sigma_j


def lemma1_bound(J: float) -> float:
    """Single-ballot sign error bound: 2/(9 J^2) above J = 2/sqrt(3), else 1/2 - J/(2 sqrt(3))."""
    if J < 0:
        raise ValueError("GSNR must be non-negative")
    if J >= LEMMA1_BREAK:
        return 2.0 / (9.0 * J * J)
    return 0.5 - J / (2.0 * math.sqrt(3.0))


def prop1_bound(J: float, s: int) -> BoundReport:
    """Local-vote error bound 1/(J sqrt(s)) for a worker holding s sub-datasets."""
    if s < 1:
        raise ValueError("need at least one ballot")
    inputs = {"J": J, "s": s}
    if J <= 0:
        return BoundReport("prop1", math.inf, False, "J = 0: bound is infinite", inputs)
    value = 1.0 / (J * math.sqrt(s))
    return BoundReport("prop1", value, True, "vacuous (>= 1)" if value >= 1 else "", inputs)


def thm1_bound(J: float, K: int, p: float) -> BoundReport:
    """Allocation-averaged local error bound 1/(J sqrt(K p)), stated for p in (4/(J^2 K), 1]."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    if K < 1:
        raise ValueError("K must be >= 1")
    inputs = {"J": J, "K": K, "p": p}
    if J <= 0:
        return BoundReport("thm1", math.inf, False, "J = 0: bound is infinite", inputs)
    value = 1.0 / (J * math.sqrt(K * p))
    p_low = 4.0 / (J * J * K)
    if p <= p_low:
        return BoundReport("thm1", value, False, f"p <= 4/(J^2 K) = {p_low:.6g}", inputs)
    return BoundReport("thm1", value, True, "", inputs)


def thm2_noise_term(K: int, N0: float, rho) -> float | np.ndarray:
    return np.sqrt(N0 / 2.0) / (K * np.asarray(rho, dtype=np.float64))


def _thm2_vectorized(c: float, K: int, N0: float, rho: np.ndarray) -> np.ndarray:
    return 0.5 * math.sqrt((1.0 - c) / K) + thm2_noise_term(K, N0, rho)


def thm2_bound(c: float, K: int, N0: float, rho: float, q: float = 0.0) -> BoundReport:
    """Global decoding error bound 1/2 sqrt((1-c)/K) + sqrt(N0/2)/(K rho).

    ``q`` is the honest workers' local error probability; the bound is only
    stated when (1 - c)(1 - q) > 1/2.
    """
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if not 0.0 <= c < 1.0:
        raise ValueError(f"c must lie in [0, 1), got {c}")
    if N0 < 0 or K < 1:
        raise ValueError("need N0 >= 0 and K >= 1")
    value = float(_thm2_vectorized(c, K, N0, rho))
    margin = (1.0 - c) * (1.0 - q)
    inputs = {"c": c, "K": K, "N0": N0, "rho": rho, "q": q}
    if margin > 0.5:
        return BoundReport("thm2", value, True, "", inputs)
    return BoundReport("thm2", value, False, f"(1-c)(1-q) = {margin:.6g} <= 1/2", inputs)


def rho_min_required(c: float, K: int, N0: float) -> float:
    """Smallest rho_min for which the convergence bound has a positive denominator."""
    return math.sqrt(2.0 * N0) / (K * (1.0 - math.sqrt((1.0 - c) / K)))


def thm3_bound(
    T: int, L1: float, F0: float, Fstar: float, c: float, K: int, N0: float, rho_min: float
) -> BoundReport:
    """Bound on the average expected L1 gradient norm after T rounds (eta = 1/sqrt(T ||L||_1))."""
    if T < 1 or L1 <= 0 or rho_min <= 0:
        raise ValueError("need T >= 1, L1 > 0, rho_min > 0")
    if F0 < Fstar:
        raise ValueError("F0 must be >= Fstar")
    delta = 1.0 - math.sqrt((1.0 - c) / K) - math.sqrt(2.0) * math.sqrt(N0) / (K * rho_min)
    inputs = {"T": T, "L1": L1, "F0": F0, "Fstar": Fstar, "c": c, "K": K, "N0": N0,
              "rho_min": rho_min, "delta": delta}
    if delta <= 0:
        need = rho_min_required(c, K, N0)
        return BoundReport(
            "thm3", math.inf, False,
            f"Delta = {delta:.6g} <= 0: straggler-dominated, need rho_min >= {need:.6g}", inputs,
        )
    value = math.sqrt(L1) / (math.sqrt(T) * delta) * (F0 - Fstar + 1.0 / (2.0 * T))
    return BoundReport("thm3", value, True, "", inputs)


# --------------------------------------------------------------------------
# Exact error probabilities for the Gaussian oracle
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianGradOracle:
    """Mini-batch gradient coordinate distributed as N(g, sigma^2 / A)."""

    g: float
    sigma: float
    A: int = 1

    def __post_init__(self):
        if self.sigma <= 0 or self.A < 1:
            raise ValueError("need sigma > 0 and A >= 1")

    @classmethod
    def from_gsnr(cls, J: float, g: float = 1.0, A: int = 1) -> "GaussianGradOracle":
        if J <= 0:
            raise ValueError("J must be positive to build an oracle")
        return cls(g, math.sqrt(A) * abs(g) / J, A)

    @property
    def scale(self) -> float:
        return self.sigma / math.sqrt(self.A)

    @property
    def J(self) -> float:
        return gsnr(self.g, self.sigma, self.A)

    @property
    def true_sign(self) -> int:
        return -1 if self.g < 0 else 1

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.normal(self.g, self.scale, size=size)


def ballot_error(oracle: GaussianGradOracle) -> float:
    """Pr(sign of one mini-batch gradient != sign(g)), with sign(0) = +1."""
    return float(stats.norm.cdf(-oracle.J))


def local_error_exact(oracle: GaussianGradOracle, s: int) -> float:
    """Exact local-vote error for s ballots.

    With g > 0 a tie decodes to +1 (correct); with g < 0 a tie is an error.
    """
    e = ballot_error(oracle)
    # W = number of wrong ballots ~ Binomial(s, e)
    if oracle.true_sign > 0:
        return float(stats.binom.sf(s // 2, s, e))  # W > s/2
    return float(stats.binom.sf((s - 1) // 2, s, e))  # W >= s/2


def theorem1_error_exact(oracle: GaussianGradOracle, K: int, p: float) -> float:
    """Local error averaged over n ~ Binomial(K-1, p) extra sub-datasets."""
    n = np.arange(K)
    weights = stats.binom.pmf(n, K - 1, p)
    return float(sum(w * local_error_exact(oracle, 1 + int(k)) for k, w in zip(n, weights) if w > 0))


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MCEstimate:
    errors: int
    trials: int

    @property
    def rate(self) -> float:
        return self.errors / self.trials

    @property
    def se(self) -> float:
        r = self.rate
        return math.sqrt(r * (1.0 - r) / self.trials)

    def wilson(self, z: float = Z99) -> tuple[float, float]:
        n, r = self.trials, self.rate
        denom = 1.0 + z * z / n
        centre = (r + z * z / (2 * n)) / denom
        half = z * math.sqrt(r * (1 - r) / n + z * z / (4 * n * n)) / denom
        return max(0.0, centre - half), min(1.0, centre + half)

    def __add__(self, other: "MCEstimate") -> "MCEstimate":
        return MCEstimate(self.errors + other.errors, self.trials + other.trials)


def _grouped_votes(oracle: GaussianGradOracle, sizes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Majority vote (tie -> +1) over ``sizes[n]`` fresh ballots for each n."""
    sizes = np.asarray(sizes, dtype=np.int64).ravel()
    ballots = np.where(oracle.draw(rng, int(sizes.sum())) < 0, -1, 1).astype(np.int32)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    totals = np.add.reduceat(ballots, offsets)
    return np.where(totals < 0, -1, 1)


_CHUNK = 20_000


def _chunks(trials: int):
    while trials > 0:
        n = min(trials, _CHUNK)
        yield n
        trials -= n


def mc_local_error(oracle: GaussianGradOracle, s: int, trials: int, rng: np.random.Generator) -> MCEstimate:
    """Error frequency of the local majority vote over s ballots."""
    if s < 1:
        raise ValueError("need at least one ballot")
    errors = 0
    for n in _chunks(trials):
        votes = _grouped_votes(oracle, np.full(n, s), rng)
        errors += int(np.count_nonzero(votes != oracle.true_sign))
    return MCEstimate(errors, trials)


def mc_theorem1_error(
    oracle: GaussianGradOracle, K: int, p: float, trials: int, rng: np.random.Generator
) -> MCEstimate:
    """Local vote error with s = 1 + Binomial(K-1, p) ballots drawn per trial."""
    errors = 0
    for n in _chunks(trials):
        sizes = 1 + rng.binomial(K - 1, p, size=n)
        votes = _grouped_votes(oracle, sizes, rng)
        errors += int(np.count_nonzero(votes != oracle.true_sign))
    return MCEstimate(errors, trials)


@dataclass(frozen=True)
class GlobalErrorResult:
    estimate: MCEstimate
    bound_sum: float  # sum over trials of the per-trial bound
    q: float  # exact honest local error probability
    valid: bool

    @property
    def mean_bound(self) -> float:
        return self.bound_sum / self.estimate.trials

    def __add__(self, other: "GlobalErrorResult") -> "GlobalErrorResult":
        return GlobalErrorResult(
            self.estimate + other.estimate, self.bound_sum + other.bound_sum, self.q, self.valid
        )


def byzantine_count(K: int, c: float) -> int:
    return int(math.floor(c * K + 1e-9))


def mc_global_error(
    oracle: GaussianGradOracle,
    K: int,
    c: float,
    p: float,
    snr_db: Optional[float],
    trials: int,
    rng: np.random.Generator,
    fixed_rho: Optional[float] = None,
    check_regime: bool = True,
) -> GlobalErrorResult:
    """Global decoding error under the colluding sign-flip attack.

    Per trial: each honest worker runs a local vote over 1 + Binomial(K-1, p)
    ballots, every Byzantine worker sends -sign(g), fresh CN(0, 1) fading sets
    rho = min_k |h_k| (P0/d = 1, d = 1) unless ``fixed_rho`` is given, and
    receiver noise N(0, N0/2) is added before the sign decision.
    """
    B = byzantine_count(K, c)
    H = K - B
    q = theorem1_error_exact(oracle, K, p)
    valid = (1.0 - c) * (1.0 - q) > 0.5
    if check_regime and not valid:
        raise InvalidRegimeError(f"(1-c)(1-q) = {(1 - c) * (1 - q):.6g} <= 1/2 for c={c}, K={K}, p={p}")
    N0 = channel.snr_to_noise(snr_db, 1.0, 1)
    errors, bound_sum = 0, 0.0
    for n in _chunks(trials):
        if H > 0:
            sizes = 1 + rng.binomial(K - 1, p, size=(n, H))
            honest_sum = _grouped_votes(oracle, sizes, rng).reshape(n, H).sum(axis=1)
        else:
            honest_sum = np.zeros(n, dtype=np.int64)
        signal = honest_sum - B * oracle.true_sign
        if fixed_rho is None:
            h = (rng.standard_normal((n, K)) + 1j * rng.standard_normal((n, K))) / math.sqrt(2.0)
            rho = np.abs(h).min(axis=1)
        else:
            rho = np.full(n, float(fixed_rho))
        r_hat = rho * signal
        if N0 > 0:
            r_hat = r_hat + rng.normal(0.0, math.sqrt(N0 / 2.0), size=n)
        decoded = np.where(r_hat < 0, -1, 1)
        errors += int(np.count_nonzero(decoded != oracle.true_sign))
        bound_sum += float(np.sum(_thm2_vectorized(c, K, N0, rho)))
    return GlobalErrorResult(MCEstimate(errors, trials), bound_sum, q, valid)


# --------------------------------------------------------------------------
# Grid suite
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundCheck:
    bound_name: str
    params: dict
    empirical: float
    ci_low: float
    ci_high: float
    se: float
    bound: float
    valid: bool
    passed: bool
    reason: str = ""


def _split_trials(trials: int, shards: int) -> list[int]:
    base, extra = divmod(trials, shards)
    return [base + (1 if i < extra else 0) for i in range(shards) if base + (1 if i < extra else 0) > 0]


def _sharded(fn, trials: int, shards: int, seed: int, tag: str, point: int, pool):
    parts = _split_trials(trials, shards)
    jobs = [(n, stream(seed, tag, point, i)) for i, n in enumerate(parts)]
    results = list(pool.map(lambda job: fn(job[0], job[1]), jobs))
    total = results[0]
    for r in results[1:]:
        total = total + r
    return total


def _check(name, params, est: MCEstimate, bound: float, valid: bool, reason: str, margin_se: float) -> BoundCheck:
    lo, hi = est.wilson()
    passed = (not valid) or est.rate <= bound + margin_se * est.se
    return BoundCheck(name, params, est.rate, lo, hi, est.se, bound, valid, passed, reason)


def run_bound_suite(
    grid: dict,
    trials: int = 100_000,
    seed: int = 0,
    shards: int = 8,
    threads: int = 1,
    margin_se: float = 3.0,
    signs=(1,),
) -> list[BoundCheck]:
    """Monte Carlo check of every grid point against its closed-form bound.

    ``grid`` may hold ``prop1`` (J, s), ``thm1`` (K, p, J) and ``thm2``
    (K, c, p, J, snr_db) sections, each mapping parameter names to value
    lists. Invalid points are reported with ``valid=False`` and skipped.
    Results depend on ``(seed, shards)`` only, never on ``threads``.

    The bound functions are looked up on this module at call time.
    """
    mod = sys.modules[__name__]
    rows: list[BoundCheck] = []
    point = 0
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        if "prop1" in grid:
            sec = grid["prop1"]
            for sign, J, s in itertools.product(signs, sec["J"], sec["s"]):
                oracle = GaussianGradOracle.from_gsnr(J, g=float(sign))
                rep = mod.prop1_bound(J, s)
                est = _sharded(lambda n, r: mc_local_error(oracle, s, n, r), trials, shards, seed, "prop1", point, pool)
                rows.append(_check("prop1", {"J": J, "s": s, "g_sign": sign}, est, rep.value, rep.valid, rep.reason, margin_se))
                point += 1
        if "thm1" in grid:
            sec = grid["thm1"]
            for sign, K, p, J in itertools.product(signs, sec["K"], sec["p"], sec["J"]):
                rep = mod.thm1_bound(J, K, p)
                params = {"J": J, "K": K, "p": p, "g_sign": sign}
                if not rep.valid:
                    rows.append(BoundCheck("thm1", params, math.nan, math.nan, math.nan, math.nan,
                                           rep.value, False, True, rep.reason))
                    point += 1
                    continue
                oracle = GaussianGradOracle.from_gsnr(J, g=float(sign))
                est = _sharded(lambda n, r: mc_theorem1_error(oracle, K, p, n, r), trials, shards, seed, "thm1", point, pool)
                rows.append(_check("thm1", params, est, rep.value, True, "", margin_se))
                point += 1
        if "thm2" in grid:
            sec = grid["thm2"]
            snrs = sec.get("snr_db", [None])
            for sign, K, c, p, J, snr in itertools.product(signs, sec["K"], sec["c"], sec["p"], sec["J"], snrs):
                oracle = GaussianGradOracle.from_gsnr(J, g=float(sign))
                params = {"J": J, "K": K, "p": p, "c": c, "snr_db": snr, "g_sign": sign}
                q = theorem1_error_exact(oracle, K, p)
                # validity of the per-trial bound does not depend on rho
                rep = mod.thm2_bound(c, K, 0.0, 1.0, q=q)
                if not rep.valid:
                    rows.append(BoundCheck("thm2", params, math.nan, math.nan, math.nan, math.nan,
                                           math.nan, False, True, rep.reason))
                    point += 1
                    continue
                res = _sharded(lambda n, r: mc_global_error(oracle, K, c, p, snr, n, r), trials, shards, seed, "thm2", point, pool)
                rows.append(_check("thm2", params, res.estimate, res.mean_bound, True, "", margin_se))
                point += 1
    return rows


# --------------------------------------------------------------------------
# Diagnostics on real models
# --------------------------------------------------------------------------


def estimate_gsnr(params, dataset, indices, A: int) -> np.ndarray:
    """Per-coordinate GSNR sqrt(A) |mean g| / std(g) from per-sample gradients over ``indices``.

    Coordinates with zero spread get J = inf.
    """
    from .learn import per_sample_gradients

    G = per_sample_gradients(params, dataset, indices)
    mean = G.mean(axis=0)
    sd = G.std(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        J = np.where(sd > 0, math.sqrt(A) * np.abs(mean) / sd, np.inf)
    return J


def estimate_l1_smoothness(params, dataset, iters: int = 50, eps: float = 1e-4, seed: int = 0) -> float:
    """Approximate ||L||_1 as d times the top Hessian eigenvalue magnitude.

    Power iteration on finite-difference Hessian-vector products of the
    full-batch gradient. Approximate: a diagnostic, not a certified constant.
    """
    from .learn import gradient

    w = params.values
    v = stream(seed, "smoothness").standard_normal(w.size)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv = (gradient(params.with_values(w + eps * v), dataset)
              - gradient(params.with_values(w - eps * v), dataset)) / (2 * eps)
        lam = float(v @ hv)
        norm = np.linalg.norm(hv)
        if norm == 0:
            break
        v = hv / norm
    return w.size * abs(lam)
