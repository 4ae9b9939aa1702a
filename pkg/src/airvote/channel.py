"""AirComp uplink: Rayleigh block fading, uniform-forcing precoding, power
control, superposition with AWGN, and the over-the-air majority vote.

Power is normalized per symbol, so ``P0 / d`` is the per-entry power budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateChannelError


@dataclass(frozen=True)
class ChannelRound:
    h: np.ndarray  # (K,) complex fading coefficients
    rho: float
    N0: float
    P0: float
    d: int
    participating: np.ndarray = field(default=None)  # (K,) bool; None means everyone

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.N0 < 0:
            raise ValueError(f"N0 must be non-negative, got {self.N0}")
        mask = self.participating
        if mask is None:
            mask = np.ones(len(self.h), dtype=bool)
        object.__setattr__(self, "participating", np.asarray(mask, dtype=bool))

    @property
    def K(self) -> int:
        return len(self.h)


def draw_channel(K: int, rng: np.random.Generator) -> np.ndarray:
    """K i.i.d. CN(0, 1) coefficients: real and imaginary parts N(0, 1/2)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return (rng.standard_normal(K) + 1j * rng.standard_normal(K)) / math.sqrt(2.0)


def _check_nonzero(h) -> np.ndarray:
    mag = np.abs(np.atleast_1d(h))
    if np.any(mag == 0.0):
        raise DegenerateChannelError("a fading coefficient is exactly zero")
    return mag


def power_scaling(h: np.ndarray, P0: float, d: int) -> float:
    """Largest feasible rho: sqrt(P0 / d) * min_k |h_k|."""
    mag = _check_nonzero(h)
    return math.sqrt(P0 / d) * float(mag.min())


def precode(m: np.ndarray, h_k: complex, rho: float) -> np.ndarray:
    """Uniform-forcing transmit vector rho * conj(h_k) / |h_k|^2 * m."""
    _check_nonzero(h_k)
    return (rho * np.conj(h_k) / abs(h_k) ** 2) * np.asarray(m, dtype=np.float64)


def superpose(tx: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Noise-free received signal sum_k h_k x_k for a (K, d) array of transmit vectors."""
    return (np.asarray(h)[:, None] * np.asarray(tx)).sum(axis=0)


def snr_to_noise(snr_db: Optional[float], P0: float, d: int) -> float:
    """N0 = (P0 / d) / 10^(snr_db / 10); ``None`` or +inf means a noiseless receiver."""
    if d < 1 or P0 <= 0:
        raise ValueError("need d >= 1 and P0 > 0")
    if snr_db is None or snr_db == math.inf:
        return 0.0
    return (P0 / d) / 10.0 ** (snr_db / 10.0)


def design_round(
    h: np.ndarray, P0: float, d: int, N0: float, h_min: Optional[float] = None
) -> ChannelRound:
    """Pick the participating set and the max-feasible rho for one round.

    With ``h_min`` set, workers with |h_k| < h_min sit the round out and rho is
    limited only by the weakest participant.
    """
    mag = _check_nonzero(h)
    mask = np.ones(len(mag), dtype=bool) if h_min is None else mag >= h_min
    if not mask.any():
        raise DegenerateChannelError(f"no worker has |h| >= h_min={h_min}")
    return ChannelRound(np.asarray(h), power_scaling(h[mask], P0, d), float(N0), float(P0), int(d), mask)


def aggregate(
    messages: np.ndarray,
    rnd: ChannelRound,
    rng: Optional[np.random.Generator],
    amplitudes: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Processed update Re{y} = rho * sum_k a_k m_k + Re{n} over participating workers.

    ``amplitudes`` scales individual transmitters (1 = compliant precoding).
    Channel inversion is applied exactly: h_k x_k = rho m_k holds by
    construction under perfect CSI, and evaluating it symbolically keeps exact
    vote ties at exactly zero instead of a rounding residue of either sign.
    The real noise part N(0, N0/2) is drawn from ``rng``; the imaginary part
    is never needed.
    """
    messages = np.asarray(messages)
    if messages.ndim != 2 or messages.shape[0] != rnd.K:
        raise ValueError(f"expected ({rnd.K}, d) messages, got {messages.shape}")
    if messages.shape[1] != rnd.d:
        raise ValueError(f"message dimension {messages.shape[1]} != channel dimension {rnd.d}")
    mask = rnd.participating
    if amplitudes is None:
        r_hat = rnd.rho * messages[mask].sum(axis=0, dtype=np.int64).astype(np.float64)
    else:
        a = np.asarray(amplitudes, dtype=np.float64)[mask]
        r_hat = rnd.rho * (a[:, None] * messages[mask]).sum(axis=0)
    if rnd.N0 > 0:
        r_hat = r_hat + rng.normal(0.0, math.sqrt(rnd.N0 / 2.0), size=rnd.d)
    return r_hat


def global_vote(r_hat: np.ndarray) -> np.ndarray:
    """sign(r_hat) with sign(0) = +1."""
    return np.where(np.asarray(r_hat) < 0, -1, 1).astype(np.int8)


def transmit_powers(rnd: ChannelRound, amplitudes: Optional[np.ndarray] = None) -> np.ndarray:
    """||x_k||^2 = d * (a_k rho)^2 / |h_k|^2 for participating workers (0 for the rest)."""
    a = np.ones(rnd.K) if amplitudes is None else np.asarray(amplitudes, dtype=np.float64)
    p = rnd.d * (a * rnd.rho) ** 2 / np.abs(rnd.h) ** 2
    return np.where(rnd.participating, p, 0.0)


def power_violations(rnd: ChannelRound, amplitudes: Optional[np.ndarray] = None, rtol: float = 1e-12) -> int:
    """Number of workers whose transmit power exceeds P0 (up to float rounding)."""
    return int(np.count_nonzero(transmit_powers(rnd, amplitudes) > rnd.P0 * (1.0 + rtol)))
