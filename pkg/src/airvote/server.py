"""Round orchestration for the hierarchical vote scheme and its baselines."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import channel
from .data import (
    Dataset,
    assigned_sets,
    generate_allocation,
    generate_synthetic,
    load_mnist_idx,
    partition,
    sample_minibatch,
    select_classes,
    train_test_split,
)
from .errors import ConfigError
from .learn import (
    MODEL_KINDS,
    ModelParams,
    accuracy,
    gradient,
    init_params,
    loss,
    sgd_step,
    sign_quantize,
)
from .rng import stream
from .worker import (
    AttackSpec,
    directional_update,
    honest_update,
    label_flip_view,
    majority_vote,
    mimic_update,
    omniscient_update,
    oracle_sign_flip_update,
    resolve_mimic_target,
    select_byzantine,
)

log = logging.getLogger(__name__)

SCHEMES = ("hierarchical", "naive_signsgd", "hierarchical_noise_free", "digital_gm")


@dataclass(frozen=True)
class ExperimentConfig:
    K: int = 10
    c: float = 0.0
    p: float = 0.1
    A: int = 8
    eta: float = 0.01
    T: int = 20
    snr_db: Optional[float] = 10.0  # None: noiseless receiver
    seed: int = 0
    model_kind: str = "logistic"
    hidden: int = 32
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    attack: Optional[AttackSpec] = None
    scheme: str = "hierarchical"
    h_min: Optional[float] = None
    byzantine_power_scale: float = 1.0
    power_per_entry: float = 1.0  # P0 / d
    metrics_stride: int = 1
    gm_max_iter: int = 200
    gm_eps: float = 1e-8
    gm_tol: float = 1e-10
    threads: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not 0.0 <= self.c < 1.0:
            raise ConfigError(f"c must lie in [0, 1), got {self.c}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must lie in [0, 1], got {self.p}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.A < 1:
            raise ConfigError("A must be >= 1")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if self.metrics_stride < 1 or self.threads < 1:
            raise ConfigError("metrics_stride and threads must be >= 1")
        if self.power_per_entry <= 0 or self.byzantine_power_scale < 0:
            raise ConfigError("power_per_entry must be positive and byzantine_power_scale non-negative")
        if self.h_min is not None and self.h_min < 0:
            raise ConfigError("h_min must be non-negative")
        if self.c > 0 and self.attack is None:
            raise ConfigError("c > 0 needs an attack; use c = 0 for an attack-free run")

    @property
    def num_byzantine(self) -> int:
        return int(math.floor(self.c * self.K + 1e-9))


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    train_loss: float
    test_accuracy: float
    sign_error_rate: float
    rho: float
    min_channel_gain: float
    wall_time: float

    @property
    def evaluated(self) -> bool:
        return not math.isnan(self.train_loss)


@dataclass
class RunResult:
    metrics: list
    final_params: ModelParams
    config: ExperimentConfig
    counts: dict
    power_violations: int = 0
    warnings: list = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        evaluated = [m for m in self.metrics if m.evaluated]
        return evaluated[-1].test_accuracy if evaluated else math.nan


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


def build_datasets(ds: dict, seed: int) -> tuple[Dataset, Dataset]:
    """Train/test pair from a dataset description (``synthetic`` or ``mnist``)."""
    kind = ds.get("kind", "synthetic")
    if kind == "synthetic":
        classes = ds.get("classes", 2)
        per_class = ds.get("per_class", 1000)
        test_per_class = ds.get("test_per_class", per_class // 4 or 1)
        full = generate_synthetic(
            classes, per_class + test_per_class, ds.get("features", 20),
            ds.get("separation", 2.0), ds.get("data_seed", seed),
        )
        return train_test_split(full, classes * test_per_class, ds.get("data_seed", seed))
    if kind == "mnist":
        train = load_mnist_idx(ds["train_images"], ds["train_labels"], "mnist-train")
        test = load_mnist_idx(ds["test_images"], ds["test_labels"], "mnist-test")
        if ds.get("classes") is not None:
            train = select_classes(train, ds["classes"])
            test = select_classes(test, ds["classes"])
        if ds.get("train_limit"):
            train = train.subset(np.arange(min(len(train), ds["train_limit"])))
        if ds.get("test_limit"):
            test = test.subset(np.arange(min(len(test), ds["test_limit"])))
        return train, test
    raise ConfigError(f"unknown dataset kind {kind!r}")


# --------------------------------------------------------------------------
# Geometric median
# --------------------------------------------------------------------------


def geometric_median(points: np.ndarray, max_iter: int = 200, eps: float = 1e-8, tol: float = 1e-10):
    """Smoothed Weiszfeld iterations started at the mean.

    Returns ``(median, iterations, converged)``. Distances are floored at
    ``eps`` so an iterate landing on a data point stays finite.
    """
    pts = np.asarray(points, dtype=np.float64)
    z = pts.mean(axis=0)
    for it in range(1, max_iter + 1):
        dist = np.maximum(np.linalg.norm(pts - z, axis=1), eps)
        w = 1.0 / dist
        z_new = (w[:, None] * pts).sum(axis=0) / w.sum()
        moved = np.linalg.norm(z_new - z)
        z = z_new
        if moved <= tol:
            return z, it, True
    return z, max_iter, False


# --------------------------------------------------------------------------
# Operation accounting
# --------------------------------------------------------------------------


def _num(x: float):
    r = round(x, 9)
    return int(r) if r == int(r) else r


def operation_counts(scheme: str, K: int, p: float = 0.1, G: int = 10, U: int = 200) -> dict:
    """Per-round operation counts (local SGD steps, GM runs, AirComp aggregations, digital uploads).

    ``local_sgd`` follows the tabulated K*p per worker times K workers; the
    exact expectation under the Bernoulli allocation with unit diagonal,
    K * (1 + (K - 1) p), is reported separately as ``local_sgd_expected``.
    """
    if K < 1 or G < 1 or U < 1 or not 0 <= p <= 1:
        raise ValueError("need K, G, U >= 1 and p in [0, 1]")
    if scheme == "hierarchical":
        per_worker = _num(K * p)
        return {"scheme": scheme, "local_sgd_per_worker": per_worker, "workers": K,
                "local_sgd": _num(K * p * K), "local_sgd_expected": _num(K * (1 + (K - 1) * p)),
                "gm": 0, "aircomp": 1, "digital": 0}
    if scheme in ("naive_signsgd", "hierarchical_noise_free"):
        if scheme == "naive_signsgd":
            return {"scheme": scheme, "local_sgd_per_worker": 1, "workers": K, "local_sgd": K,
                    "gm": 0, "aircomp": 1, "digital": 0}
        return {**operation_counts("hierarchical", K, p, G, U), "scheme": scheme}
    if scheme == "digital_gm":
        return {"scheme": scheme, "local_sgd_per_worker": 1, "workers": K, "local_sgd": K,
                "gm": 1, "aircomp": 0, "digital": K}
    if scheme == "rotaf":
        return {"scheme": scheme, "local_sgd_per_worker": 1, "workers": K, "local_sgd": K,
                "gm": 1, "aircomp": G, "digital": 0}
    if scheme == "aircomp_gm":
        return {"scheme": scheme, "local_sgd_per_worker": 1, "workers": K, "local_sgd": K,
                "gm": 0, "aircomp": U, "digital": 0}
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES + ('rotaf', 'aircomp_gm')}")


# --------------------------------------------------------------------------
# Round machinery
# --------------------------------------------------------------------------


class RoundPhases:
    """Tracks one round's honest messages and refuses Byzantine work until they are all in."""

    def __init__(self, honest_ids):
        self.pending = set(int(k) for k in honest_ids)
        self.honest: dict[int, np.ndarray] = {}
        self.byzantine_started = False

    def submit_honest(self, k: int, message) -> None:
        if self.byzantine_started:
            raise RuntimeError("honest message submitted after the Byzantine phase began")
        self.pending.discard(k)
        self.honest[k] = message

    def begin_byzantine(self) -> dict:
        if self.pending:
            raise RuntimeError(f"Byzantine phase started with honest workers pending: {sorted(self.pending)}")
        self.byzantine_started = True
        return self.honest


class _Run:
    def __init__(self, config: ExperimentConfig, data):
        self.cfg = config
        self.train, self.test = data if data is not None else build_datasets(config.dataset, config.seed)
        if self.train.num_classes != self.test.num_classes:
            raise ConfigError("train and test sets disagree on the number of classes")
        cfg = config
        self.part = partition(self.train, cfg.K, cfg.seed)
        if cfg.A > self.part.D:
            raise ConfigError(f"batch size A={cfg.A} exceeds sub-dataset size D={self.part.D}")
        p = cfg.p if cfg.scheme in ("hierarchical", "hierarchical_noise_free") else 0.0
        self.E = generate_allocation(cfg.K, p, cfg.seed)
        self.S = assigned_sets(self.E)
        self.byz = select_byzantine(cfg.K, cfg.c, cfg.seed) if cfg.attack else np.empty(0, dtype=np.int64)
        self.honest = np.setdiff1d(np.arange(cfg.K), self.byz)
        self.is_byz = np.zeros(cfg.K, dtype=bool)
        self.is_byz[self.byz] = True
        self.flipped = label_flip_view(self.train) if cfg.attack and cfg.attack.variant == "label_flip" else None
        self.mimic_target = None
        if cfg.attack and cfg.attack.variant == "mimic" and self.byz.size:
            self.mimic_target = resolve_mimic_target(cfg.attack.target, self.byz, cfg.K)
        self.params = init_params(cfg.model_kind, self.train.num_features, self.train.num_classes,
                                  cfg.hidden, cfg.seed)
        self.d = self.params.d
        self.P0 = cfg.power_per_entry * self.d
        noisy = cfg.scheme in ("hierarchical", "naive_signsgd")
        self.N0 = channel.snr_to_noise(cfg.snr_db, self.P0, self.d) if noisy else 0.0
        self.amplitudes = None
        if self.byz.size and cfg.byzantine_power_scale != 1.0:
            self.amplitudes = np.where(self.is_byz, cfg.byzantine_power_scale, 1.0)
        self.pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
        self.grad_evals = 0
        self.violations = 0
        self.warnings: list[str] = []

    def _map(self, fn, items):
        if self.pool is None:
            return [fn(x) for x in items]
        return list(self.pool.map(fn, items))

    def _vote_message(self, k: int, t: int, dataset: Dataset) -> np.ndarray:
        S_k = self.S[k]
        rngs = [stream(self.cfg.seed, "minibatch", k, t, int(i)) for i in S_k]
        upd = honest_update(self.params, dataset, self.part, S_k, self.cfg.A, rngs, k, t)
        return upd.message

    def _batch_gradient(self, k: int, t: int, dataset: Dataset) -> np.ndarray:
        rng = stream(self.cfg.seed, "minibatch", k, t, k)
        return gradient(self.params, dataset, sample_minibatch(self.part, k, self.cfg.A, rng))

    # ---- one-bit schemes -------------------------------------------------

    def _byzantine_messages(self, t: int, honest: dict, g_true: np.ndarray) -> dict:
        attack = self.cfg.attack
        out = {}
        if attack is None or not self.byz.size:
            return out
        v = attack.variant
        if v == "label_flip":
            msgs = self._map(lambda k: self._vote_message(int(k), t, self.flipped), self.byz)
            self.grad_evals += sum(len(self.S[k]) for k in self.byz)
            return dict(zip(map(int, self.byz), msgs))
        for k in map(int, self.byz):
            if v == "mimic":
                out[k] = mimic_update(honest[self.mimic_target], k, t).message
            elif v == "directional":
                out[k] = directional_update(self.d, k, t).message
            elif v == "omniscient":
                out[k] = omniscient_update(list(honest.values()), k, t).message
            else:
                out[k] = oracle_sign_flip_update(g_true, k, t).message
        return out

    def _signsgd_round(self, t: int, g_true: np.ndarray):
        phases = RoundPhases(self.honest)
        msgs = self._map(lambda k: self._vote_message(int(k), t, self.train), self.honest)
        for k, m in zip(self.honest, msgs):
            phases.submit_honest(int(k), m)
        self.grad_evals += sum(len(self.S[k]) for k in self.honest)
        honest = phases.begin_byzantine()
        byz = self._byzantine_messages(t, honest, g_true)
        messages = np.stack([honest[k] if k in honest else byz[k] for k in range(self.cfg.K)])

        h = channel.draw_channel(self.cfg.K, stream(self.cfg.seed, "fading", t))
        rnd = channel.design_round(h, self.P0, self.d, self.N0, self.cfg.h_min)
        self.violations += channel.power_violations(rnd, self.amplitudes)
        r_hat = channel.aggregate(messages, rnd, stream(self.cfg.seed, "noise", t), self.amplitudes)
        return channel.global_vote(r_hat), rnd.rho, float(np.abs(h).min())

    # ---- digital geometric median ----------------------------------------

    def _gm_round(self, t: int, g_true: np.ndarray):
        phases = RoundPhases(self.honest)
        grads = self._map(lambda k: self._batch_gradient(int(k), t, self.train), self.honest)
        for k, g in zip(self.honest, grads):
            phases.submit_honest(int(k), g)
        self.grad_evals += len(self.honest)
        honest = phases.begin_byzantine()
        byz = {}
        attack = self.cfg.attack
        if attack is not None and self.byz.size:
            honest_sum = np.sum(list(honest.values()), axis=0)
            for k in map(int, self.byz):
                v = attack.variant
                if v == "label_flip":
                    byz[k] = self._batch_gradient(k, t, self.flipped)
                    self.grad_evals += 1
                elif v == "mimic":
                    byz[k] = honest[self.mimic_target].copy()
                elif v == "directional":
                    byz[k] = np.ones(self.d)
                elif v == "omniscient":
                    byz[k] = -honest_sum
                else:
                    byz[k] = -g_true
        points = np.stack([honest[k] if k in honest else byz[k] for k in range(self.cfg.K)])
        gm, iters, ok = geometric_median(points, self.cfg.gm_max_iter, self.cfg.gm_eps, self.cfg.gm_tol)
        if not ok:
            self.warnings.append(f"round {t}: Weiszfeld did not converge in {iters} iterations")
        return sign_quantize(gm), math.nan, math.nan

    # ---- driver ------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        metrics = []
        try:
            for t in range(cfg.T):
                start = time.perf_counter()
                g_true = gradient(self.params, self.train)
                if cfg.scheme == "digital_gm":
                    v_hat, rho, hmin = self._gm_round(t, g_true)
                else:
                    v_hat, rho, hmin = self._signsgd_round(t, g_true)
                sign_err = float(np.mean(v_hat != sign_quantize(g_true)))
                self.params = sgd_step(self.params, v_hat, cfg.eta)
                if t % cfg.metrics_stride == 0 or t == cfg.T - 1:
                    tr_loss = loss(self.params, self.train)
                    te_acc = accuracy(self.params, self.test)
                else:
                    tr_loss = te_acc = sign_err = math.nan
                metrics.append(RoundMetrics(t, tr_loss, te_acc, sign_err, rho, hmin,
                                            time.perf_counter() - start))
        finally:
            if self.pool is not None:
                self.pool.shutdown()
        counts = operation_counts(cfg.scheme, cfg.K, self.E.p, U=cfg.gm_max_iter)
        counts = {
            "table": counts,
            "gradient_evals_total": self.grad_evals,
            "gradient_evals_per_round": self.grad_evals / cfg.T,
            "allocated_subsets_total": int(self.E.entries.sum()),
            "aircomp_aggregations": 0 if cfg.scheme == "digital_gm" else cfg.T,
            "digital_uploads": cfg.K * cfg.T if cfg.scheme == "digital_gm" else 0,
            "gm_computations": cfg.T if cfg.scheme == "digital_gm" else 0,
        }
        for w in self.warnings:
            log.warning(w)
        return RunResult(metrics, self.params, cfg, counts, self.violations, self.warnings)


def run(config: ExperimentConfig, data=None) -> RunResult:
    """Dispatch on ``config.scheme``. ``data`` optionally supplies a prebuilt (train, test) pair."""
    return _Run(config, data).run()


def run_hierarchical(config: ExperimentConfig, data=None) -> RunResult:
    return run(replace(config, scheme="hierarchical"), data)


def run_naive_signsgd(config: ExperimentConfig, data=None) -> RunResult:
    """Majority-vote SignSGD: identity allocation, same channel and attacks."""
    return run(replace(config, scheme="naive_signsgd"), data)


def run_noise_free(config: ExperimentConfig, data=None) -> RunResult:
    """Hierarchical vote with the receiver noise removed; fading is still drawn and inverted."""
    return run(replace(config, scheme="hierarchical_noise_free"), data)


def run_digital_gm(config: ExperimentConfig, data=None) -> RunResult:
    """Unquantized gradients over ideal digital links, aggregated by geometric median."""
    return run(replace(config, scheme="digital_gm"), data)


def config_to_dict(config: ExperimentConfig) -> dict:
    d = asdict(config)
    d["attack"] = None if config.attack is None else asdict(config.attack)
    return d
