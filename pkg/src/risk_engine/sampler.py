"""Dynamic Hamiltonian Monte Carlo (no-U-turn) with warmup adaptation.

The transition follows the classic recursive doubling construction with a
slice variable: trajectories extend in a random direction until the ends
turn back toward each other, and the next state is drawn uniformly from
the slice-admissible states of the tree.  Warmup adapts the step size by
dual averaging toward a target acceptance statistic and estimates a
diagonal mass matrix over expanding windows.  A diagonal (not dense) mass
matrix is used throughout: the parameter vector includes one latent per
participant, so dense adaptation would not scale.

Chains are run sequentially with independent named RNG substreams, so
results are bit-reproducible for a given seed and independent of any
outer scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

_DELTA_MAX = 1000.0  # energy error beyond which a leapfrog step is divergent


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup_iters: int = 1000
    sampling_iters: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.sampling_iters < 1:
            raise ValueError("sampling_iters must be >= 1")
        if 0 < self.warmup_iters < 100:
            raise ValueError("adaptive runs need warmup_iters >= 100 (or 0 to disable)")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")


@dataclass
class PosteriorDraws:
    """Kept draws on the constrained scale plus chain metadata."""

    draws: np.ndarray  # (total kept, dim)
    names: tuple[str, ...]
    chain_ids: np.ndarray  # (total kept,)
    n_chains: int
    divergences: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def columns(self, names) -> np.ndarray:
        idx = [self.names.index(nm) for nm in names]
        return self.draws[:, idx]

    def has(self, name: str) -> bool:
        return name in self.names

    def by_chain(self) -> np.ndarray:
        """Reshape to (chains, iters, dim); chains must be equal length."""
        order = np.argsort(self.chain_ids, kind="stable")
        d = self.draws[order]
        return d.reshape(self.n_chains, -1, d.shape[1])


def initialize(dim: int, seed: int, chain: int = 0) -> np.ndarray:
    """Initial unconstrained point, uniform on [-2, 2] per coordinate."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return substream(seed, "init", chain).uniform(-2.0, 2.0, dim)


def leapfrog(logp_grad, theta, r, grad, eps, inv_mass):
    """One leapfrog step; returns (theta', r', grad', logp')."""
    r_half = r + 0.5 * eps * grad
    theta_new = theta + eps * (inv_mass * r_half)
    value, grad_new = logp_grad(theta_new)
    r_new = r_half + 0.5 * eps * grad_new
    return theta_new, r_new, grad_new, value


def _kinetic(r, inv_mass):
    return 0.5 * float(np.dot(r * inv_mass, r))


def _find_reasonable_step_size(logp_grad, theta, rng, inv_mass):
    eps = 1.0
    value, grad = logp_grad(theta)
    r = rng.standard_normal(theta.shape) / np.sqrt(inv_mass)
    h0 = value - _kinetic(r, inv_mass)
    _, r1, _, v1 = leapfrog(logp_grad, theta, r, grad, eps, inv_mass)
    h1 = v1 - _kinetic(r1, inv_mass)
    log_ratio = h1 - h0
    direction = 1.0 if log_ratio > math.log(0.5) else -1.0
    for _ in range(60):
        eps *= 2.0 ** direction
        _, r1, _, v1 = leapfrog(logp_grad, theta, r, grad, eps, inv_mass)
        h1 = v1 - _kinetic(r1, inv_mass)
        log_ratio = h1 - h0 if math.isfinite(h1) else -math.inf
        if direction * log_ratio <= direction * math.log(0.5):
            break
        if not 1e-10 < eps < 1e7:
            break
    return max(min(eps, 1e3), 1e-10)


def _build_tree(logp_grad, theta, r, grad, value, log_u, direction, depth,
                eps, inv_mass, h0, rng):
    """Recursive doubling; returns the subtree summary."""
    if depth == 0:
        theta1, r1, grad1, v1 = leapfrog(logp_grad, theta, r, grad, direction * eps, inv_mass)
        h1 = v1 - _kinetic(r1, inv_mass) if math.isfinite(v1) else -math.inf
        divergent = (not math.isfinite(h1)) or (log_u > _DELTA_MAX + h1)
        n_good = int(log_u <= h1)
        alpha = min(1.0, math.exp(min(0.0, h1 - h0))) if math.isfinite(h1) else 0.0
        return (theta1, r1, grad1, v1, theta1, r1, grad1, v1,
                theta1, v1, n_good, not divergent, alpha, 1, divergent)

    (theta_m, r_m, grad_m, v_m, theta_p, r_p, grad_p, v_p,
     proposal, v_prop, n_good, cont, alpha, n_alpha, divergent) = _build_tree(
        logp_grad, theta, r, grad, value, log_u, direction, depth - 1,
        eps, inv_mass, h0, rng)

    if cont:
        if direction == -1:
            (theta_m, r_m, grad_m, v_m, _, _, _, _,
             proposal2, v_prop2, n2, cont2, alpha2, n_alpha2, div2) = _build_tree(
                logp_grad, theta_m, r_m, grad_m, v_m, log_u, direction,
                depth - 1, eps, inv_mass, h0, rng)
        else:
            (_, _, _, _, theta_p, r_p, grad_p, v_p,
             proposal2, v_prop2, n2, cont2, alpha2, n_alpha2, div2) = _build_tree(
                logp_grad, theta_p, r_p, grad_p, v_p, log_u, direction,
                depth - 1, eps, inv_mass, h0, rng)
        if n2 > 0 and rng.random() < n2 / max(n_good + n2, 1):
            proposal, v_prop = proposal2, v_prop2
        n_good += n2
        dq = theta_p - theta_m
        cont = (cont2
                and float(np.dot(dq, inv_mass * r_m)) >= 0.0
                and float(np.dot(dq, inv_mass * r_p)) >= 0.0)
        alpha += alpha2
        n_alpha += n_alpha2
        divergent = divergent or div2

    return (theta_m, r_m, grad_m, v_m, theta_p, r_p, grad_p, v_p,
            proposal, v_prop, n_good, cont, alpha, n_alpha, divergent)


def _transition(logp_grad, theta, value, grad, eps, inv_mass, max_depth, rng):
    """One NUTS update; returns (theta', value', grad', accept_stat, divergent)."""
    r0 = rng.standard_normal(theta.shape) / np.sqrt(inv_mass)
    h0 = value - _kinetic(r0, inv_mass)
    log_u = h0 + math.log(rng.random())

    theta_m = theta_p = theta
    r_m = r_p = r0
    grad_m = grad_p = grad
    v_m = v_p = value
    proposal, v_prop, grad_prop = theta, value, grad
    n_good = 1
    alpha_sum, n_alpha = 0.0, 0
    divergent_any = False

    for depth in range(max_depth):
        direction = -1 if rng.random() < 0.5 else 1
        if direction == -1:
            (theta_m, r_m, grad_m, v_m, _, _, _, _,
             prop2, v2, n2, cont, alpha, n_a, div) = _build_tree(
                logp_grad, theta_m, r_m, grad_m, v_m, log_u, direction,
                depth, eps, inv_mass, h0, rng)
        else:
            (_, _, _, _, theta_p, r_p, grad_p, v_p,
             prop2, v2, n2, cont, alpha, n_a, div) = _build_tree(
                logp_grad, theta_p, r_p, grad_p, v_p, log_u, direction,
                depth, eps, inv_mass, h0, rng)
        alpha_sum += alpha
        n_alpha += n_a
        divergent_any = divergent_any or div
        if cont and n2 > 0 and rng.random() < min(1.0, n2 / n_good):
            proposal, v_prop = prop2, v2
            grad_prop = None
        n_good += n2
        if not cont:
            break
        dq = theta_p - theta_m
        if (float(np.dot(dq, inv_mass * r_m)) < 0.0
                or float(np.dot(dq, inv_mass * r_p)) < 0.0):
            break

    if grad_prop is None:
        v_prop, grad_prop = logp_grad(proposal)
    accept_stat = alpha_sum / max(n_alpha, 1)
    return proposal, v_prop, grad_prop, accept_stat, divergent_any


def _warmup_windows(n_warmup: int):
    """Stan-style expanding windows for diagonal mass estimation."""
    if n_warmup < 100:
        return [], 0, n_warmup
    init_buffer = max(1, int(0.15 * n_warmup)) if n_warmup < 150 else 75
    term_buffer = max(1, int(0.10 * n_warmup)) if n_warmup < 150 else 50
    base = max(1, (n_warmup - init_buffer - term_buffer) // 6) if n_warmup < 150 else 25
    windows = []
    start = init_buffer
    end_middle = n_warmup - term_buffer
    size = base
    while start < end_middle:
        if start + 2 * size >= end_middle:
            windows.append((start, end_middle))
            break
        windows.append((start, start + size))
        start += size
        size *= 2
    return windows, init_buffer, end_middle


class _DualAveraging:
    def __init__(self, eps0, target):
        self.mu = math.log(10.0 * eps0)
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.t = 0
        self.target = target
        self.gamma = 0.05
        self.t0 = 10.0
        self.kappa = 0.75

    def update(self, accept_stat):
        self.t += 1
        frac = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        w = self.t ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    def adapted(self):
        return math.exp(self.log_eps_bar)


def run_chain(logp_grad, dim, cfg: SamplerConfig, chain: int,
              initial: np.ndarray | None = None):
    """Run one chain; returns (kept unconstrained draws, kept logp, stats)."""
    rng = substream(cfg.seed, "chain", chain)

    if initial is not None:
        theta = np.asarray(initial, dtype=float)
        value, grad = logp_grad(theta)
        if not math.isfinite(value):
            raise SamplerError("non-finite log posterior at the supplied initial point")
    else:
        theta = None
        for _ in range(100):
            candidate = rng.uniform(-2.0, 2.0, dim)
            value, grad = logp_grad(candidate)
            if math.isfinite(value) and np.all(np.isfinite(grad)):
                theta = candidate
                break
        if theta is None:
            raise SamplerError(
                "could not find a finite log-posterior initialization in 100 draws")

    inv_mass = np.ones(dim)
    eps = _find_reasonable_step_size(logp_grad, theta, rng, inv_mass)
    da = _DualAveraging(eps, cfg.target_accept)
    windows, _, _ = _warmup_windows(cfg.warmup_iters)
    window_ends = {end for (_, end) in windows}
    in_window = np.zeros(cfg.warmup_iters, dtype=bool)
    for (a, b) in windows:
        in_window[a:b] = True

    welford_n = 0
    welford_mean = np.zeros(dim)
    welford_m2 = np.zeros(dim)

    for it in range(cfg.warmup_iters):
        theta, value, grad, accept, _ = _transition(
            logp_grad, theta, value, grad, eps, inv_mass, cfg.max_tree_depth, rng)
        eps = da.update(accept)
        if in_window[it]:
            welford_n += 1
            delta = theta - welford_mean
            welford_mean += delta / welford_n
            welford_m2 += delta * (theta - welford_mean)
        if (it + 1) in window_ends and welford_n > 1:
            var = welford_m2 / (welford_n - 1)
            # Stan-style regularization toward unit scale
            var = (welford_n / (welford_n + 5.0)) * var + (5.0 / (welford_n + 5.0)) * 1e-3
            inv_mass = 1.0 / np.maximum(var, 1e-10)
            welford_n = 0
            welford_mean[:] = 0.0
            welford_m2[:] = 0.0
            eps = _find_reasonable_step_size(logp_grad, theta, rng, inv_mass)
            da = _DualAveraging(eps, cfg.target_accept)

    if cfg.warmup_iters:
        eps = da.adapted()

    kept = np.empty((cfg.sampling_iters, dim))
    kept_logp = np.empty(cfg.sampling_iters)
    divergences = 0
    accept_sum = 0.0
    for it in range(cfg.sampling_iters):
        theta, value, grad, accept, div = _transition(
            logp_grad, theta, value, grad, eps, inv_mass, cfg.max_tree_depth, rng)
        kept[it] = theta
        kept_logp[it] = value
        divergences += int(div)
        accept_sum += accept

    stats = {
        "divergences": divergences,
        "step_size": eps,
        "mean_accept": accept_sum / cfg.sampling_iters,
    }
    return kept, kept_logp, stats


def sample_raw(logp_grad, dim: int, cfg: SamplerConfig):
    """All chains on the unconstrained scale: (chains, iters, dim) + stats."""
    draws = np.empty((cfg.chains, cfg.sampling_iters, dim))
    logps = np.empty((cfg.chains, cfg.sampling_iters))
    divergences = 0
    for c in range(cfg.chains):
        kept, kept_logp, stats = run_chain(logp_grad, dim, cfg, c)
        draws[c] = kept
        logps[c] = kept_logp
        divergences += stats["divergences"]
    return draws, logps, divergences


def sample(model, cfg: SamplerConfig, compute_diagnostics: bool = True) -> PosteriorDraws:
    """Draw from the posterior of a JointModel; constrained-scale output.

    Deterministic for fixed (seed, chains, data).  A divergence fraction
    above 20% sets the ``high_divergence`` flag in the diagnostics; draws
    are always retained.
    """
    raws, _, divergences = sample_raw(model.logp_and_grad, model.dim, cfg)
    total = cfg.chains * cfg.sampling_iters
    flat = np.empty((total, model.dim))
    chain_ids = np.empty(total, dtype=int)
    for c in range(cfg.chains):
        lo = c * cfg.sampling_iters
        hi = lo + cfg.sampling_iters
        for i in range(cfg.sampling_iters):
            flat[lo + i] = model.constrain(raws[c, i])
        chain_ids[lo:hi] = c

    pd = PosteriorDraws(
        draws=flat,
        names=model.layout.names,
        chain_ids=chain_ids,
        n_chains=cfg.chains,
        divergences=divergences,
    )
    diag: dict = {
        "divergences": divergences,
        "divergence_fraction": divergences / total,
        "high_divergence": divergences / total > 0.20,
    }
    if compute_diagnostics:
        per_param = diagnostics(pd)
        rhats = [v["rhat"] for v in per_param.values() if math.isfinite(v["rhat"])]
        diag["max_rhat"] = max(rhats) if rhats else float("nan")
        diag["per_parameter"] = per_param
    pd.diagnostics = diag
    return pd


def split_chains(by_chain: np.ndarray) -> np.ndarray:
    """Split each chain in half (dropping a possible odd middle draw)."""
    c, n, d = by_chain.shape
    half = n // 2
    first = by_chain[:, :half, :]
    second = by_chain[:, n - half:, :]
    return np.concatenate([first, second], axis=0)


def _split_rhat(chains: np.ndarray) -> np.ndarray:
    """R-hat per parameter from (m, n, dim) split chains; NaN if degenerate."""
    m, n, _ = chains.shape
    means = chains.mean(axis=1)
    variances = chains.var(axis=1, ddof=1)
    w = variances.mean(axis=0)
    b = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / w)
    rhat[w == 0.0] = np.nan
    return rhat

def _ess_bulk(chains: np.ndarray) -> np.ndarray:
    """Bulk effective sample size on rank-normalized split chains."""
    from scipy.special import ndtri
    from scipy.stats import rankdata

    m, n, dim = chains.shape
    flat = chains.reshape(m * n, dim)
    ranks = rankdata(flat, method="average", axis=0)
    z = ndtri((ranks - 0.375) / (m * n + 0.25)).reshape(m, n, dim)

    ess = np.empty(dim)
    for j in range(dim):
        x = z[:, :, j]
        if np.all(x.var(axis=1, ddof=1) == 0.0):
            ess[j] = np.nan
            continue
        ess[j] = _ess_from_chains(x)
    return ess


def _ess_from_chains(x: np.ndarray) -> float:
    """ESS of (m, n) chains via FFT autocovariance and Geyer pairing."""
    m, n = x.shape
    centered = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n].real / n
    w = x.var(axis=1, ddof=1).mean()
    b_over_n = x.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = w * (n - 1) / n + b_over_n
    if var_plus == 0:
        return float("nan")
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    # initial monotone positive sequence over paired autocorrelations
    tau = -1.0
    prev_pair = math.inf
    for k in range(n // 2):
        if 2 * k + 1 >= n:
            break
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair < 0:
            break
        pair = min(pair, prev_pair)
        prev_pair = pair
        tau += 2.0 * pair
    tau = max(tau, 1.0 / math.log10(max(m * n, 10)))
    ess = m * n / tau
    return float(min(ess, m * n * math.log10(max(m * n, 10))))


def diagnostics(pd: PosteriorDraws) -> dict:
    """Split R-hat and bulk effective sample size per parameter.

    With a single chain, R-hat falls back to the split halves of that chain
    (flagged); constant parameters report NaN with a flag.
    """
    by_chain = pd.by_chain()
    split = split_chains(by_chain)
    if split.shape[1] < 2:
        raise SamplerError("need at least 4 kept draws for diagnostics")
    rhat = _split_rhat(split)
    ess = _ess_bulk(split)
    out = {}
    for j, name in enumerate(pd.names):
        entry = {"rhat": float(rhat[j]), "ess_bulk": float(ess[j])}
        if not math.isfinite(rhat[j]):
            entry["flag"] = "degenerate"
        elif pd.n_chains == 1:
            entry["flag"] = "single_chain_split"
        out[name] = entry
    return out
