"""Cascaded diffusion reconstruction over pixel space.

The reverse process starts from a noised low-quality volume rather than pure
noise. Each loop step: predict noise slice-wise, pull the denoised estimate
back to the measurements with the direction-split solver, re-noise the
reconstruction with the SAME predicted noise, then take one deterministic
sampler hop — with the hop's noise estimate supplied by the
discrepancy-mitigation net (label 1) when enabled, else by the prior net.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .denoiser import REAL, RECON
from .diffusion import ddim_step, predict_x0, q_sample, step_grid
from .grid import Rng, Volume
from .metrics import psnr
from .operators import Geometry, radon_adjoint
from .solvers import AdmmParams, specialized_admm3d, tv_objective


@dataclass
class CddmConfig:
    t0: float = 0.5
    infer_steps: int = 50
    dm_enabled: bool = True
    consistency: AdmmParams = field(default_factory=lambda: AdmmParams(
        rho1=0.01, rho2=10.0, rho3=50.0, lam=0.2, iters=10))
    lowq: AdmmParams = field(default_factory=lambda: AdmmParams(
        rho1=2.0, rho2=0.8, rho3=150.0, lam=1.2, iters=50))
    grad_mode: str = "xyz"           # "xyz" or "z": axes penalized in consistency
    initializer: str = "admm"        # "admm" or "coarse-diffusion"
    coarse_factor: int = 4
    coarse_steps: int = 10           # sampler hops at coarse scale; 0 bypasses

    def __post_init__(self):
        if not (0.0 < self.t0 < 1.0):
            raise ValueError(f"noise strength must lie in (0, 1), got {self.t0}")
        if self.grad_mode not in ("xyz", "z"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.initializer not in ("admm", "coarse-diffusion"):
            raise ValueError(f"unknown initializer {self.initializer!r}")


@dataclass
class StepRecord:
    k: int
    psnr_pre: float = None
    psnr_post: float = None
    objective: float = None
    seconds: float = 0.0


@dataclass
class ReconTrace:
    steps: list = field(default_factory=list)


def mean_pool2d(vol, f):
    """In-plane mean pooling by an integer factor; slice count unchanged."""
    nz, ny, nx = vol.shape
    if ny % f or nx % f:
        raise ValueError(f"in-plane dims {(ny, nx)} not divisible by {f}")
    return vol.reshape(nz, ny // f, f, nx // f, f).mean(axis=(2, 4))


def upsample_bilinear2d(vol, f):
    """In-plane bilinear upsampling by an integer factor (pixel-center aligned)."""
    nz, ny, nx = vol.shape

    def axis_weights(n):
        src = (np.arange(n * f) + 0.5) / f - 0.5
        src = np.clip(src, 0.0, n - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        w = src - lo
        return lo, hi, w

    ylo, yhi, wy = axis_weights(ny)
    xlo, xhi, wx = axis_weights(nx)
    rows = (vol[:, ylo, :] * (1 - wy)[None, :, None]
            + vol[:, yhi, :] * wy[None, :, None])
    out = (rows[:, :, xlo] * (1 - wx)[None, None, :]
           + rows[:, :, xhi] * wx[None, None, :])
    return out


def _eps_slicewise(net, vol, k, label):
    """Evaluate the 2D network over all slices of a volume at one step."""
    nz = vol.shape[0]
    return net.forward(vol, np.full(nz, k), np.full(nz, label))


def _consistency(y, g, cfg, x0_hat, consistency_fn):
    if consistency_fn is not None:
        return consistency_fn(x0_hat)
    return specialized_admm3d(y, g, cfg.consistency, x0_hat,
                              xy_enabled=(cfg.grad_mode == "xyz"))


def init_low_quality(y, g, cfg, nets=None, sched=None, rng=None):
    """Low-quality starting volume for the pixel-space reverse process.

    "admm": direction-split solve from the backprojection A^T y with the
    low-quality profile. "coarse-diffusion": additionally refine that result
    at reduced in-plane resolution with the prior net (a small stand-in for
    a first-stage generator), then upsample.
    """
    x_bp = radon_adjoint(y, g)
    x_admm = specialized_admm3d(y, g, cfg.lowq, x_bp)
    if cfg.initializer == "admm":
        return x_admm
    if sched is None or nets is None:
        raise ValueError("coarse-diffusion initializer needs nets and a schedule")
    coarse = mean_pool2d(x_admm.data, cfg.coarse_factor)
    if cfg.coarse_steps > 0:
        if rng is None:
            raise ValueError("coarse-diffusion initializer needs an rng")
        ks, tau = step_grid(cfg.t0, sched.T, cfg.coarse_steps)
        x = q_sample(coarse, ks[0], rng.randn(*coarse.shape), sched)
        prior = nets["prior"]
        for k in ks:
            eps_hat = _eps_slicewise(prior, x, k, REAL)
            x = ddim_step(x, k, k - tau, eps_hat, sched, sigma_t=0.0)
        coarse = x
    up = upsample_bilinear2d(coarse, cfg.coarse_factor)
    return x_admm.like(up)


def one_step_recon(x_k, k, nets, y, g, sched, cfg, tau, consistency_fn=None,
                   ground_truth=None):
    """One reconstruction hop k -> k - tau; returns (next volume, StepRecord)."""
    t_start = time.perf_counter()
    rec = StepRecord(k=k)
    eps_hat = _eps_slicewise(nets["prior"], x_k.data, k, REAL)
    x0_hat = x_k.like(predict_x0(x_k.data, k, eps_hat, sched))
    if ground_truth is not None:
        rec.psnr_pre = psnr(x0_hat, ground_truth)
    x0_rec = _consistency(y, g, cfg, x0_hat, consistency_fn)
    if ground_truth is not None:
        rec.psnr_post = psnr(x0_rec, ground_truth)
    rec.objective = tv_objective(x0_rec, y, g, cfg.consistency.lam)
    x_k_rec = np.sqrt(sched.abar(k)) * x0_rec.data \
        + np.sqrt(1.0 - sched.abar(k)) * eps_hat
    if cfg.dm_enabled:
        eps_next = _eps_slicewise(nets["dm"], x_k_rec, k, RECON)
    else:
        eps_next = _eps_slicewise(nets["prior"], x_k_rec, k, REAL)
    x_next = ddim_step(x_k_rec, k, k - tau, eps_next, sched, sigma_t=0.0)
    rec.seconds = time.perf_counter() - t_start
    return x_k.like(x_next), rec


def cddm_reconstruct(y, g, nets, sched, cfg, rng, ground_truth=None,
                     consistency_fn=None, x_init=None):
    """Full cascaded reconstruction; returns (volume, ReconTrace).

    x_init overrides the low-quality initializer when supplied (used by
    sweeps that share one initialization across noise strengths).
    """
    if cfg.dm_enabled and nets.get("dm") is None:
        raise ValueError("dm_enabled requires a fine-tuned net under nets['dm']")
    ks, tau = step_grid(cfg.t0, sched.T, cfg.infer_steps)
    x_lq = x_init if x_init is not None else init_low_quality(
        y, g, cfg, nets=nets, sched=sched, rng=rng)
    x = x_lq.like(q_sample(x_lq.data, ks[0], rng.randn(*x_lq.data.shape), sched))
    trace = ReconTrace()
    for k in ks:
        x, rec = one_step_recon(x, k, nets, y, g, sched, cfg, tau,
                                consistency_fn=consistency_fn,
                                ground_truth=ground_truth)
        trace.steps.append(rec)
    return x, trace
