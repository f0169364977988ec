"""Gauss-Hermite integration of logistic probabilities over normal random effects.

The marginal probability E_u[logistic(eta + u)], u ~ N(0, sigma^2), is a
Gauss-Hermite sum after the change of variable u = sqrt(2)*sigma*t.  The
plain sum loses accuracy once sigma grows past ~1 because the integrand's
complex poles (at eta + sqrt(2)*sigma*t = i*pi*(2k+1)) approach the real
axis.  We therefore subtract the three nearest pole pairs from the
integrand and add their Gaussian integrals back exactly via the Faddeeva
function; the order-20 rule is then converged to ~1e-10 for sigma <= 6.
Beyond sigma 6 the roles are swapped: the logistic variable is mapped
through the normal quantile and the same Hermite rule integrates the
(now slowly varying) normal CDF factor.

All sums are folded over the rule's symmetric node pairs so that eta = 0
returns exactly 0.5 and p(eta) + p(-eta) = 1 holds by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit, log_ndtr, wofz

SQRT2 = math.sqrt(2.0)
SQRT_PI = math.sqrt(math.pi)

#: number of conjugate pole pairs subtracted in the primal regime
_N_POLE_PAIRS = 3
#: switch to the quantile-mapped (dual) form above this total sigma
_DUAL_SIGMA = 6.0
#: |eta| > _TAIL_A + _TAIL_B * sigma uses the unfolded (saturated) tail form
_TAIL_A = 25.0
_TAIL_B = 8.0
_P_FLOOR = 1e-300
_P_CEIL = 1.0 - 1e-16


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    """Hermite nodes/weights (physicists' convention, sum w = sqrt(pi))."""

    nodes: np.ndarray
    weights: np.ndarray
    order: int
    mode: str = "univariate"  # or "bivariate"

    def normalized_weights(self) -> np.ndarray:
        return self.weights / self.weights.sum()


def gauss_hermite(order: int, mode: str = "univariate") -> QuadratureRule:
    """Standard Gauss-Hermite rule of the given order."""
    if not 1 <= order <= 100:
        raise QuadratureError(f"order must be in [1, 100], got {order}")
    if mode not in ("univariate", "bivariate"):
        raise QuadratureError(f"unknown mode {mode!r}")
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    # enforce exact symmetry so folded sums cancel bit-for-bit
    nodes = (nodes - nodes[::-1]) / 2.0
    weights = (weights + weights[::-1]) / 2.0
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(nodes=nodes, weights=weights, order=order, mode=mode)


def _fold(nodes: np.ndarray, weights: np.ndarray):
    """Split a reversal-antisymmetric node set into (negative half, middle)."""
    k = len(nodes)
    half = k // 2
    return nodes[:half], weights[:half], (weights[half] if k % 2 else None)


def _tanh_fold(eta, offsets, weights, w_mid, total_weight):
    """Folded GH sum of tanh((eta + offset)/2); exactly odd in eta."""
    a = np.tanh((eta[..., None] + offsets) / 2.0)
    b = np.tanh((eta[..., None] - offsets) / 2.0)
    odd = (a + b) @ weights
    if w_mid is not None:
        odd = odd + w_mid * np.tanh(eta / 2.0)
    return odd / total_weight


def _pole_correction(eta, c, nodes, weights, total_weight):
    """GH error of the tanh sum from the nearest pole pairs, computed as
    (exact Gaussian integral) - (GH estimate) of the pole parts.

    tanh((eta + c t)/2) has poles at t_k = (i pi (2k+1) - eta)/c with
    residue 2/c; a conjugate pair contributes (4/c) Re[1/(t - t_k)] on the
    real line and integrates to (4/c) Re[i pi w(t_k)] against e^{-t^2}.
    Exactly odd in eta by evaluation at |eta| with the sign applied.
    """
    sign = np.sign(eta)
    abs_eta = np.abs(eta)
    corr = np.zeros(np.broadcast_shapes(abs_eta.shape, c.shape), dtype=float)
    cc = np.broadcast_to(c, corr.shape)
    for k in range(_N_POLE_PAIRS):
        zk = (1j * math.pi * (2 * k + 1) - abs_eta) / cc
        exact = (4.0 / cc) * (1j * math.pi * wofz(zk)).real
        node_vals = (4.0 / cc[..., None]) * (1.0 / (nodes - zk[..., None])).real
        corr = corr + (exact - node_vals @ weights)
    return sign * corr / total_weight


def _primal(eta, sigma, rule: QuadratureRule):
    """Pole-corrected folded GH estimate, |eta| below the tail threshold."""
    neg_nodes, half_w, w_mid = _fold(rule.nodes, rule.weights)
    total = float(rule.weights.sum())
    eta = np.asarray(eta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    offsets = SQRT2 * sigma[..., None] * neg_nodes
    t_odd = _tanh_fold(eta, offsets, half_w, w_mid, total)
    c = SQRT2 * sigma
    safe = c > 1e-100
    if np.any(safe):
        corr = _pole_correction(eta, np.where(safe, c, 1.0),
                                rule.nodes, rule.weights, total)
        t_odd = t_odd + np.where(safe, corr, 0.0)
    return 0.5 + 0.5 * t_odd


def _tail(eta, sigma, rule: QuadratureRule):
    """Unfolded expit sum for saturated |eta|; relative accuracy in deep tails."""
    eta = np.asarray(eta, dtype=float)
    offsets = SQRT2 * np.asarray(sigma)[..., None] * rule.nodes
    w_norm = rule.weights / rule.weights.sum()
    low = expit(-np.abs(eta)[..., None] + offsets) @ w_norm
    return np.where(eta < 0, low, 1.0 - low)


def _dual(eta, sigma, rule: QuadratureRule):
    """Quantile-mapped form: E_L[Phi((eta - L)/sigma)], L standard logistic.

    L = logit(Phi(z)) maps a standard normal z to L, so the same Hermite
    rule applies in z; G(z) is computed stably from log_ndtr and is exactly
    antisymmetric, making the folded sum exactly odd in eta.
    """
    z = SQRT2 * rule.nodes
    g = log_ndtr(z) - log_ndtr(-z)
    k = len(g)
    half = k // 2
    g_neg = g[:half]
    half_w = rule.weights[:half]
    w_mid = rule.weights[half] if k % 2 else None
    total = float(rule.weights.sum())
    denom = SQRT2 * np.asarray(sigma, dtype=float)[..., None]
    eta_b = np.asarray(eta, dtype=float)[..., None]
    odd = (erf((eta_b - g_neg) / denom) + erf((eta_b + g_neg) / denom)) @ half_w
    if w_mid is not None:
        odd = odd + w_mid * erf(np.asarray(eta, dtype=float) / (SQRT2 * np.asarray(sigma)))
    return 0.5 + 0.5 * odd / total


def marginal_probability(eta, sigma_u, sigma_s=None, rule: QuadratureRule | None = None):
    """Random-effect-marginalized probability of the outcome.

    Parameters
    ----------
    eta : float or array
        Linear predictor without random effects.
    sigma_u : float or array (broadcastable with eta)
        Participant random-effect SD, >= 0.
    sigma_s : float or array, optional
        School random-effect SD; required iff the rule mode is bivariate.
        Independent normal effects add in quadrature, so the bivariate
        tensor-product rule is evaluated through the combined SD.
    rule : QuadratureRule
        Defaults to the order-20 univariate rule.
    """
    if rule is None:
        rule = gauss_hermite(20)
    if rule.mode == "bivariate":
        if sigma_s is None:
            raise QuadratureError("bivariate mode requires sigma_s")
    elif sigma_s is not None:
        raise QuadratureError("sigma_s given but rule mode is univariate")

    scalar_out = (np.ndim(eta) == 0 and np.ndim(sigma_u) == 0
                  and (sigma_s is None or np.ndim(sigma_s) == 0))
    eta_arr = np.atleast_1d(np.asarray(eta, dtype=float))
    sig_u = np.atleast_1d(np.asarray(sigma_u, dtype=float))
    if np.any(sig_u < 0):
        raise QuadratureError("sigma_u must be >= 0")
    if sigma_s is not None:
        sig_s = np.atleast_1d(np.asarray(sigma_s, dtype=float))
        if np.any(sig_s < 0):
            raise QuadratureError("sigma_s must be >= 0")
        sigma = np.hypot(sig_u, sig_s)
    else:
        sigma = sig_u

    eta_b, sigma_b = np.broadcast_arrays(eta_arr, sigma)
    out = np.empty(eta_b.shape, dtype=float)

    tail = np.abs(eta_b) > _TAIL_A + _TAIL_B * sigma_b
    dual = (~tail) & (sigma_b > _DUAL_SIGMA)
    primal = ~(tail | dual)
    if np.any(primal):
        out[primal] = _primal(eta_b[primal], sigma_b[primal], rule)
    if np.any(dual):
        out[dual] = _dual(eta_b[dual], sigma_b[dual], rule)
    if np.any(tail):
        out[tail] = _tail(eta_b[tail], sigma_b[tail], rule)

    out = np.clip(out, _P_FLOOR, _P_CEIL)
    if scalar_out:
        return float(out[0])
    return out
