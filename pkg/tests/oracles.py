"""Independent reference computations used by the test-suite."""

import numpy as np

from airvote.learn import ModelParams, init_params, loss, param_dim


def central_difference(params: ModelParams, dataset, indices, coords, step=1e-5) -> np.ndarray:
    """(F(w + h e_j) - F(w - h e_j)) / 2h for each j in ``coords``."""
    out = np.empty(len(coords))
    for n, j in enumerate(coords):
        up = params.values.copy()
        dn = params.values.copy()
        up[j] += step
        dn[j] -= step
        out[n] = (loss(params.with_values(up), dataset, indices) - loss(params.with_values(dn), dataset, indices)) / (2 * step)
    return out


def random_params(kind, f, C, rng, hidden=6, scale=0.5) -> ModelParams:
    d = param_dim(kind, f, C, hidden if kind == "mlp" else 0)
    base = init_params(kind, f, C, hidden=hidden)
    return base.with_values(scale * rng.standard_normal(d))


def digital_majority(messages: np.ndarray) -> np.ndarray:
    """Error-free server vote: +1 / -1 by the sign of the column sum, 0 on a tie."""
    return np.sign(np.asarray(messages, dtype=np.int64).sum(axis=0))


def global_error_fixed_rho(q, K, B, rho, N0, sign=1):
    """Exact decoding error with H = K - B honest workers, each wrong with probability q.

    The received value is rho * (2X - K) + n with X ~ Binomial(H, 1 - q) correct
    honest messages and n ~ N(0, N0 / 2). A zero received value decodes to +1.
    """
    from scipy import stats

    H = K - B
    x = np.arange(H + 1)
    pmf = stats.binom.pmf(x, H, 1 - q)
    margin = rho * (2 * x - K)  # signed towards the true sign
    if N0 == 0:
        wrong = (margin < 0) | ((margin == 0) & (sign < 0))
        return float(pmf[wrong].sum())
    return float(np.sum(pmf * stats.norm.cdf(-margin / np.sqrt(N0 / 2))))
