"""Training loops for the noise-prediction network.

train_standard fits the usual noise-matching objective on authentic slices
(label 0). train_dm fine-tunes a copy of a pre-trained net with two gradient
steps per iteration: the standard step (label 0, preventing forgetting) and
a correction step (label 1) whose target is the shared noise plus a clamped
multiple of the consistency-induced reconstruction error.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .denoiser import REAL, RECON
from .diffusion import predict_x0, q_sample
from .grid import NonFiniteError, Rng
from .solvers import specialized_admm2d, _as_op


@dataclass
class TrainConfig:
    steps: int = 10000
    batch: int = 2
    lr: float = 1e-3
    lam_max: float = 1.0
    clip_norm: float = 1.0
    seed: int = 0
    ema_decay: float = None


class RmsProp:
    """Momentum-free adaptive step with global gradient-norm clipping."""

    def __init__(self, params, lr, decay=0.99, eps=1e-8, clip_norm=1.0):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        for k, g in grads.items():
            v = self.state[k]
            v *= self.decay
            v += (1.0 - self.decay) * g * g
            params[k] -= self.lr * g / (np.sqrt(v) + self.eps)


def consistency_weight(sched, t, lam_max):
    """min(sqrt(abar_t / (1 - abar_t)), lam_max) for each step in t."""
    ab = sched.abar(t)
    return np.minimum(np.sqrt(ab / (1.0 - ab)), lam_max)


def _mse_and_adjoint(pred, target):
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def _ema_update(shadow, params, decay):
    for k in params:
        shadow[k] *= decay
        shadow[k] += (1.0 - decay) * params[k]


def train_standard(net, dataset, sched, cfg):
    """Fit noise prediction on clean slices; mutates net, returns (net, trace).

    trace rows are (step, loss).
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (N, H, W) stack")
    rng = Rng(cfg.seed)
    opt = RmsProp(net.params, cfg.lr, clip_norm=cfg.clip_norm)
    shadow = ({k: v.copy() for k, v in net.params.items()}
              if cfg.ema_decay else None)
    trace = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, data.shape[0], cfg.batch)
        t = rng.integers(1, sched.T + 1, cfg.batch)
        eps = rng.randn(cfg.batch, data.shape[1], data.shape[2])
        x_t = q_sample(data[idx], t, eps, sched)
        pred = net.forward(x_t, t, REAL)
        loss, dl = _mse_and_adjoint(pred, eps)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite training loss at step {step}")
        opt.step(net.params, net.backward(dl))
        if shadow is not None:
            _ema_update(shadow, net.params, cfg.ema_decay)
        trace.append((step, loss))
    if shadow is not None:
        net.params = shadow
    return net, trace


def train_dm(net, dataset, sched, admm_params, geom, cfg):
    """Discrepancy-mitigation fine-tune; returns (new net, trace).

    Per iteration: noise a clean slice, predict it back (label 0), take the
    standard gradient step, push the prediction through single-slice
    data consistency against y = A x0, re-noise the reconstruction with the
    SAME noise, and take a second step (label 1) toward
    eps + lambda_alpha * (recon - x0). The reconstruction is a constant for
    the second step (no gradient flows through the solver).

    trace rows are (step, loss_standard, loss_dm).
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (N, H, W) stack")
    op = _as_op(geom)
    tuned = net.copy()
    rng = Rng(cfg.seed)
    opt = RmsProp(tuned.params, cfg.lr, clip_norm=cfg.clip_norm)
    trace = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, data.shape[0], cfg.batch)
        x0 = data[idx]
        t = rng.integers(1, sched.T + 1, cfg.batch)
        eps = rng.randn(*x0.shape)
        x_t = q_sample(x0, t, eps, sched)

        pred = tuned.forward(x_t, t, REAL)
        x0_hat = predict_x0(x_t, t, pred, sched)
        loss_std, dl = _mse_and_adjoint(pred, eps)
        if not np.isfinite(loss_std):
            raise NonFiniteError(f"non-finite standard loss at DM step {step}")
        opt.step(tuned.params, tuned.backward(dl))

        try:
            x0_rec = np.stack([
                specialized_admm2d(op.forward(x0[b]), op, admm_params,
                                   x_init=x0_hat[b])
                for b in range(x0.shape[0])
            ])
        except Exception as exc:
            raise RuntimeError(f"data consistency failed at DM step {step}: {exc}"
                               ) from exc
        x_t_rec = q_sample(x0_rec, t, eps, sched)
        delta = x0_rec - x0
        lam = consistency_weight(sched, t, cfg.lam_max)
        target = eps + lam[:, None, None] * delta

        pred2 = tuned.forward(x_t_rec, t, RECON)
        loss_dm, dl2 = _mse_and_adjoint(pred2, target)
        if not np.isfinite(loss_dm):
            raise NonFiniteError(f"non-finite DM loss at step {step}")
        opt.step(tuned.params, tuned.backward(dl2))
        trace.append((step, loss_std, loss_dm))
    return tuned, trace


def write_trace(trace, path):
    """Loss trace CSV: (step, loss_standard[, loss_dm])."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if trace and len(trace[0]) == 3:
            w.writerow(["step", "loss_standard", "loss_dm"])
        else:
            w.writerow(["step", "loss_standard"])
        for row in trace:
            w.writerow([row[0]] + [f"{v:.10e}" for v in row[1:]])
