"""One-parameter exponential families used on graph arrows.

Each arrow of the life-history graph carries one of three families, all
parameterized by their canonical parameter theta:

* Bernoulli, theta = logit(p), cumulant log(1 + e^theta)
* Poisson, theta = log(lambda), cumulant e^theta
* zero-truncated Poisson, theta = log(lambda), cumulant log(e^(e^theta) - 1)

``cumulant_d1`` is the conditional mean of one draw, ``cumulant_d2`` its
variance.  ``sample_sum`` draws the sum of ``n_pred`` iid variates, the
sampling-distribution primitive of the graph recursion (the sum of zero
terms is zero).
"""

from __future__ import annotations

import enum
import math

import numpy as np

from .errors import DomainError

__all__ = [
    "Family",
    "cumulant",
    "cumulant_d1",
    "cumulant_d2",
    "sample_sum",
    "sample_sum_array",
]

# Above this rate the zero-truncated and plain Poisson agree to machine
# precision (e^-30 ~ 1e-13), so samplers and cumulants switch formulas here.
_ZTP_LARGE_RATE = 30.0
# Below this rate the direct variance formula cancels catastrophically.
_ZTP_SERIES_RATE = 1e-4


class Family(enum.Enum):
    """Arrow distribution families, keyed by canonical parameterization."""

    BERNOULLI = "bernoulli"
    POISSON = "poisson"
    ZERO_TRUNCATED_POISSON = "zero-truncated-poisson"


def _check_theta(theta: float) -> float:
    theta = float(theta)
    if not math.isfinite(theta):
        raise DomainError(f"theta must be finite, got {theta!r}")
    return theta


def _softplus(theta: float) -> float:
    # log(1 + e^theta) without overflow on either tail.
    if theta > 0:
        return theta + math.log1p(math.exp(-theta))
    return math.log1p(math.exp(theta))


def _expit(theta: float) -> float:
    if theta >= 0:
        return 1.0 / (1.0 + math.exp(-theta))
    e = math.exp(theta)
    return e / (1.0 + e)


def _ztp_cumulant(theta: float) -> float:
    lam = math.exp(theta)
    if lam > _ZTP_LARGE_RATE:
        # log(e^lam - 1) = lam + log(1 - e^-lam); the correction underflows
        # to zero for lam > ~745, leaving exactly lam.
        return lam + math.log1p(-math.exp(-lam))
    if lam < 1e-8:
        # log(expm1(lam)) = theta + log1p(lam/2 + ...) without underflow
        return theta + lam / 2.0
    # expm1 keeps full relative accuracy at moderate lam.
    return math.log(math.expm1(lam))


def _ztp_mean(lam: float) -> float:
    if lam < _ZTP_SERIES_RATE:
        # lam / (1 - e^-lam) = 1 + lam/2 + lam^2/12 - lam^4/720 + ...
        return 1.0 + lam / 2.0 + lam * lam / 12.0
    return lam / (-math.expm1(-lam))


def _ztp_var(lam: float) -> float:
    if lam < _ZTP_SERIES_RATE:
        # Series of mean(lam) * (1 + lam - mean(lam)) around lam = 0.
        return lam / 2.0 + lam * lam / 6.0
    m = lam / (-math.expm1(-lam))
    return m * (1.0 + lam - m)


def cumulant(family: Family, theta: float) -> float:
    """Cumulant function c(theta) of the family, overflow safe."""
    theta = _check_theta(theta)
    if family is Family.BERNOULLI:
        return _softplus(theta)
    if family is Family.POISSON:
        return math.exp(theta)
    return _ztp_cumulant(theta)


def cumulant_d1(family: Family, theta: float) -> float:
    """First derivative c'(theta): the conditional mean of one draw."""
    theta = _check_theta(theta)
    if family is Family.BERNOULLI:
        return _expit(theta)
    if family is Family.POISSON:
        return math.exp(theta)
    return _ztp_mean(math.exp(theta))


def cumulant_d2(family: Family, theta: float) -> float:
    """Second derivative c''(theta): the conditional variance of one draw."""
    theta = _check_theta(theta)
    if family is Family.BERNOULLI:
        p = _expit(theta)
        return p * (1.0 - p)
    if family is Family.POISSON:
        return math.exp(theta)
    return _ztp_var(math.exp(theta))


def _ztp_draws(lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One zero-truncated Poisson draw per entry of ``lam``; all >= 1."""
    lam = np.asarray(lam, dtype=float)
    out = np.empty(lam.shape, dtype=np.int64)

    small = lam <= _ZTP_LARGE_RATE
    if small.any():
        # Inversion by sequential CDF accumulation, exact where the
        # truncation mass matters.
        ls = lam[small]
        u = rng.random(ls.shape)
        pmf = ls / np.expm1(ls)  # P(Y = 1)
        cdf = pmf.copy()
        y = np.ones(ls.shape, dtype=np.int64)
        k = 1
        active = u > cdf
        while active.any():
            k += 1
            if k > 400:  # tail mass < 1e-200 for lam <= 30
                y[active] = k
                break
            pmf[active] *= ls[active] / k
            cdf[active] += pmf[active]
            y[active] = k
            active &= u > cdf
        out[small] = y

    big = ~small
    if big.any():
        # Rejection from the untruncated Poisson; zeros are about as
        # likely as e^-30, so the loop essentially never repeats.
        lb = lam[big]
        d = rng.poisson(lb)
        zero = d == 0
        while zero.any():
            d[zero] = rng.poisson(lb[zero])
            zero = d == 0
        out[big] = d
    return out


def sample_sum_array(
    family: Family,
    theta: np.ndarray,
    n_pred: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized ``sample_sum``: one sum per (theta, n_pred) pair."""
    theta = np.asarray(theta, dtype=float)
    n_pred = np.asarray(n_pred, dtype=np.int64)
    if (n_pred < 0).any():
        raise DomainError("n_pred must be nonnegative")
    if not np.isfinite(theta).all():
        raise DomainError("theta must be finite")

    if family is Family.BERNOULLI:
        p = 1.0 / (1.0 + np.exp(-theta))
        return rng.binomial(n_pred, np.broadcast_to(p, n_pred.shape))
    if family is Family.POISSON:
        return rng.poisson(n_pred * np.exp(theta))

    # Zero-truncated Poisson: expand to one row per iid draw, then fold
    # the draws back onto their owners.
    out = np.zeros(n_pred.shape, dtype=np.int64)
    total = int(n_pred.sum())
    if total == 0:
        return out
    lam = np.broadcast_to(np.exp(theta), n_pred.shape)
    owners = np.repeat(np.arange(n_pred.size), n_pred.ravel())
    draws = _ztp_draws(np.repeat(lam.ravel(), n_pred.ravel()), rng)
    np.add.at(out.ravel(), owners, draws)
    return out


def sample_sum(
    family: Family, theta: float, n_pred: int, rng: np.random.Generator
) -> int:
    """Sum of ``n_pred`` iid draws at canonical parameter ``theta``."""
    theta = _check_theta(theta)
    n_pred = int(n_pred)
    if n_pred < 0:
        raise DomainError(f"n_pred must be nonnegative, got {n_pred}")
    if n_pred == 0:
        return 0
    return int(
        sample_sum_array(
            family, np.array([theta]), np.array([n_pred], dtype=np.int64), rng
        )[0]
    )


def cumulant_array(family: Family, theta: np.ndarray) -> np.ndarray:
    """Vectorized cumulant over an array of canonical parameters."""
    theta = np.asarray(theta, dtype=float)
    if family is Family.BERNOULLI:
        # max(theta, 0) + log1p(exp(-|theta|))
        return np.maximum(theta, 0.0) + np.log1p(np.exp(-np.abs(theta)))
    if family is Family.POISSON:
        return np.exp(theta)
    lam = np.exp(theta)
    out = np.empty_like(lam)
    big = lam > _ZTP_LARGE_RATE
    tiny = lam < 1e-8
    mid = ~big & ~tiny
    if big.any():
        out[big] = lam[big] + np.log1p(-np.exp(-lam[big]))
    if tiny.any():
        out[tiny] = theta[tiny] + lam[tiny] / 2.0
    if mid.any():
        out[mid] = np.log(np.expm1(lam[mid]))
    return out


def cumulant_d1_array(family: Family, theta: np.ndarray) -> np.ndarray:
    """Vectorized first derivative of the cumulant."""
    theta = np.asarray(theta, dtype=float)
    if family is Family.BERNOULLI:
        out = np.empty_like(theta)
        pos = theta >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-theta[pos]))
        e = np.exp(theta[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    if family is Family.POISSON:
        return np.exp(theta)
    lam = np.exp(theta)
    out = np.empty_like(lam)
    tiny = lam < _ZTP_SERIES_RATE
    if tiny.any():
        lt = lam[tiny]
        out[tiny] = 1.0 + lt / 2.0 + lt * lt / 12.0
    if (~tiny).any():
        out[~tiny] = lam[~tiny] / (-np.expm1(-lam[~tiny]))
    return out


def cumulant_d2_array(family: Family, theta: np.ndarray) -> np.ndarray:
    """Vectorized second derivative of the cumulant."""
    theta = np.asarray(theta, dtype=float)
    if family is Family.BERNOULLI:
        p = cumulant_d1_array(family, theta)
        return p * (1.0 - p)
    if family is Family.POISSON:
        return np.exp(theta)
    lam = np.exp(theta)
    out = np.empty_like(lam)
    tiny = lam < _ZTP_SERIES_RATE
    if tiny.any():
        lt = lam[tiny]
        out[tiny] = lt / 2.0 + lt * lt / 6.0
    if (~tiny).any():
        m = lam[~tiny] / (-np.expm1(-lam[~tiny]))
        out[~tiny] = m * (1.0 + lam[~tiny] - m)
    return out
