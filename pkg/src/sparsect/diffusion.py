"""Noise schedule and the forward/reverse diffusion arithmetic.

Timesteps are 1-based over the trained schedule; t = 0 denotes clean data
with cumulative signal fraction exactly 1. All operations are pure array
arithmetic and accept any shape; stochastic variants take their noise from
a caller-owned Rng so determinism is decided at the call site.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Schedule:
    """Diffusion constants: beta, alpha = 1 - beta, their running product,
    and the ancestral-sampling noise scale per step."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self):
        return self.beta.shape[0]

    def abar(self, t):
        """Cumulative signal fraction; abar(0) == 1 by convention."""
        t = np.asarray(t)
        self._check(t, allow_zero=True)
        padded = np.concatenate(([1.0], self.alpha_bar))
        out = padded[t]
        return float(out) if out.ndim == 0 else out

    def _check(self, t, allow_zero=False):
        lo = 0 if allow_zero else 1
        if np.any(t < lo) or np.any(t > self.T):
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")


def make_schedule(T, beta1=1e-4, betaT=0.02, kind="linear"):
    """Linear beta schedule with T trained steps."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not (0.0 < beta1 <= betaT < 1.0):
        raise ValueError(f"need 0 < beta1 <= betaT < 1, got ({beta1}, {betaT})")
    if T < 1:
        raise ValueError("need T >= 1")
    beta = np.linspace(beta1, betaT, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # ancestral variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t; zero at t=1
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    sigma = np.sqrt((1.0 - prev) / (1.0 - alpha_bar) * beta)
    return Schedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def _coeffs(sched, t, ndim):
    """sqrt(abar_t), sqrt(1 - abar_t), broadcastable to an input of ndim."""
    ab = sched.abar(t)
    s = np.sqrt(ab)
    c = np.sqrt(1.0 - ab)
    if np.ndim(s) > 0:
        shape = (-1,) + (1,) * (ndim - 1)
        s = s.reshape(shape)
        c = c.reshape(shape)
    return s, c


def q_sample(x0, t, eps, sched):
    """Noising to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {x0.shape}")
    sched._check(np.asarray(t))
    s, c = _coeffs(sched, t, x0.ndim)
    return s * x0 + c * eps


def predict_x0(x_t, t, eps_hat, sched):
    """Invert the noising given a noise estimate: (x_t - sqrt(1-abar) eps)/sqrt(abar)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    sched._check(np.asarray(t))
    s, c = _coeffs(sched, t, x_t.ndim)
    return (x_t - c * eps_hat) / s


def ddim_step(x_t, t, t_prev, eps_hat, sched, sigma_t=0.0, rng=None):
    """One implicit-sampler hop t -> t_prev.

    sigma_t = 0 is the deterministic sampler; t_prev = 0 lands on the
    predicted clean image (abar_0 == 1).
    """
    if not t_prev < t:
        raise ValueError(f"need t_prev < t, got {t_prev} >= {t}")
    sched._check(np.asarray(t))
    sched._check(np.asarray(t_prev), allow_zero=True)
    ab_prev = sched.abar(t_prev)
    if sigma_t < 0 or sigma_t ** 2 > (1.0 - ab_prev) + 1e-12:
        raise ValueError(f"sigma_t {sigma_t} outside [0, sqrt(1 - abar_prev)]")
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    dir_coeff = np.sqrt(max(1.0 - ab_prev - sigma_t ** 2, 0.0))
    out = np.sqrt(ab_prev) * x0_hat + dir_coeff * np.asarray(eps_hat, dtype=np.float64)
    if sigma_t > 0:
        if rng is None:
            raise ValueError("stochastic step requires an rng")
        out = out + sigma_t * rng.randn(*out.shape)
    return out


def ddpm_step(x_t, t, eps_hat, sched, rng):
    """One ancestral step t -> t-1; no noise is added at t = 1."""
    t = int(t)
    sched._check(np.asarray(t))
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    beta_t = sched.beta[t - 1]
    alpha_t = sched.alpha[t - 1]
    ab_t = sched.alpha_bar[t - 1]
    mean = (x_t - (beta_t / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(alpha_t)
    if t > 1:
        mean = mean + sched.sigma[t - 1] * rng.randn(*x_t.shape)
    return mean


def step_grid(t0, trained_T, infer_steps):
    """Descending step sequence {K, K - tau, ..., tau}.

    tau = trained_T / infer_steps (must divide exactly); K = round(t0 * T)
    snapped down to the grid.
    """
    if not (0.0 < t0 < 1.0):
        raise ValueError(f"noise strength must lie in (0, 1), got {t0}")
    if trained_T % infer_steps != 0:
        raise ValueError(f"{infer_steps} inference steps do not divide T={trained_T}")
    tau = trained_T // infer_steps
    K = (int(round(t0 * trained_T)) // tau) * tau
    K = max(K, tau)
    return list(range(K, 0, -tau)), tau
