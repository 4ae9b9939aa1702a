"""Local update oracles: the honest local majority vote and the Byzantine attacks.

Attacks act on the transmitted one-bit message only; none of them sees the
channel realization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, Partition, sample_minibatch
from .errors import ConfigError
from .learn import ModelParams, batch_gradients, sign_quantize
from .rng import stream

ATTACKS = ("label_flip", "mimic", "directional", "omniscient", "oracle_sign_flip")


@dataclass(frozen=True)
class AttackSpec:
    variant: str
    target: Optional[int] = None  # mimic only; None means lowest-indexed honest worker

    def __post_init__(self):
        if self.variant not in ATTACKS:
            raise ConfigError(f"unknown attack {self.variant!r}; expected one of {ATTACKS}")
        if self.target is not None and self.variant != "mimic":
            raise ConfigError(f"attack {self.variant!r} takes no target")


@dataclass(frozen=True)
class LocalUpdate:
    message: np.ndarray  # int8 entries in {-1, +1}
    worker: int
    round: int
    gradient_evals: int = 0


def majority_vote(ballots: np.ndarray, axis: int = 0) -> np.ndarray:
    """sign(sum of +/-1 ballots) along ``axis`` with ties going to +1."""
    total = np.asarray(ballots, dtype=np.int64).sum(axis=axis)
    return np.where(total < 0, -1, 1).astype(np.int8)


def honest_update(
    params: ModelParams,
    dataset: Dataset,
    part: Partition,
    S_k: Sequence[int],
    A: int,
    rngs: Sequence[np.random.Generator],
    worker: int = 0,
    round: int = 0,
) -> LocalUpdate:
    """Local majority vote over one mini-batch sign gradient per allocated subset.

    ``rngs[n]`` drives the mini-batch drawn from subset ``S_k[n]``.
    """
    S_k = list(S_k)
    if not S_k:
        raise ValueError("worker has no allocated sub-datasets")
    if len(rngs) != len(S_k):
        raise ValueError(f"need one stream per allocated subset ({len(S_k)}), got {len(rngs)}")
    batches = np.stack([sample_minibatch(part, i, A, rng) for i, rng in zip(S_k, rngs)])
    ballots = sign_quantize(batch_gradients(params, dataset, batches))
    return LocalUpdate(majority_vote(ballots), worker, round, gradient_evals=len(S_k))


def label_flip_view(dataset: Dataset) -> Dataset:
    """Same features with every label y replaced by (C - 1) - y."""
    return Dataset(
        dataset.features,
        (dataset.num_classes - 1) - dataset.labels,
        dataset.num_classes,
        dataset.name + "-flipped",
    )


def directional_update(d: int, worker: int = 0, round: int = 0) -> LocalUpdate:
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return LocalUpdate(np.ones(d, dtype=np.int8), worker, round)


def mimic_update(target_message: np.ndarray, worker: int = 0, round: int = 0) -> LocalUpdate:
    return LocalUpdate(np.array(target_message, dtype=np.int8), worker, round)


def omniscient_update(honest_messages: Sequence[np.ndarray], worker: int = 0, round: int = 0) -> LocalUpdate:
    """-sign(sum of honest messages); a zero honest sum maps to +1 first, so the output is -1."""
    if len(honest_messages) == 0:
        raise ValueError("omniscient attack needs at least one honest message")
    return LocalUpdate(-majority_vote(np.stack(honest_messages)), worker, round)


def oracle_sign_flip_update(true_gradient: np.ndarray, worker: int = 0, round: int = 0) -> LocalUpdate:
    return LocalUpdate(-sign_quantize(true_gradient), worker, round)


def select_byzantine(K: int, c: float, seed: int) -> np.ndarray:
    """The first floor(c*K) ids of a seeded shuffle of range(K), sorted."""
    if not 0.0 <= c < 1.0:
        raise ConfigError(f"corruption level must lie in [0, 1), got {c}")
    # guard against c*K landing a hair below an integer, e.g. 0.29 * 100
    B = int(np.floor(c * K + 1e-9))
    return np.sort(stream(seed, "byzantine").permutation(K)[:B])


def resolve_mimic_target(target: Optional[int], byzantine: np.ndarray, K: int) -> int:
    honest = np.setdiff1d(np.arange(K), byzantine)
    if honest.size == 0:
        raise ConfigError("mimic attack needs at least one honest worker")
    if target is None:
        return int(honest[0])
    if not 0 <= target < K:
        raise ConfigError(f"mimic target {target} outside [0, {K})")
    if target in set(byzantine.tolist()):
        raise ConfigError(f"mimic target {target} is a Byzantine worker")
    return int(target)
