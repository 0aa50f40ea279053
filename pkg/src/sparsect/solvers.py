"""Proximal machinery and the ADMM variants for TV-regularized CT.

All variants minimize  1/2 ||A x - y||^2 + lambda * sum_a ||D_a x||_1  over a
chosen axis set. The direction-split variant alternates between two coupled
subproblems (a fidelity+TV block and a pure-TV block), each advanced by a
single inner pass per outer iteration, with the blocks' gradient axes chosen
per dimensionality: (x,y) vs z for volumes, x vs y for single slices.
"""

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .grid import NonFiniteError, Sinogram, Volume
from .operators import (Geometry, backproject_slices, diff_adjoint,
                        diff_forward, diff_normal, project_slices)


@dataclass
class AdmmParams:
    rho1: float = 1.0
    rho2: float = 1.0
    rho3: float = 1.0
    lam: float = 0.1
    iters: int = 10
    cg_iters: int = 30
    cg_tol: float = 1e-6

    def __post_init__(self):
        if min(self.rho1, self.rho2, self.rho3) <= 0:
            raise ValueError("penalties must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.iters < 1:
            raise ValueError("need at least one outer iteration")


def soft_threshold(a, kappa):
    """Elementwise (a - kappa)_+ - (-a - kappa)_+."""
    if kappa < 0:
        raise ValueError(f"threshold must be nonnegative, got {kappa}")
    a = np.asarray(a, dtype=np.float64)
    return np.sign(a) * np.maximum(np.abs(a) - kappa, 0.0)


def cg_solve(apply, b, x0=None, tol=1e-6, max_iters=30):
    """Conjugate gradients for S.P.D. apply; returns (x, iters, residual).

    Stops when ||apply(x) - b|| <= tol * ||b|| or at max_iters. The caller
    guarantees symmetry/definiteness on the explored span.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply(x)
    p = r.copy()
    rs = float(np.vdot(r, r))
    bnorm = float(np.linalg.norm(b))
    stop = tol * bnorm
    resid = math.sqrt(rs)
    if resid <= stop or bnorm == 0.0:
        return x, 0, resid
    for it in range(1, max_iters + 1):
        ap = apply(p)
        denom = float(np.vdot(p, ap))
        if not np.isfinite(denom) or denom <= 0:
            raise NonFiniteError(f"CG breakdown at iteration {it}: p^T A p = {denom}")
        alpha = rs / denom
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.vdot(r, r))
        if not np.isfinite(rs_new):
            raise NonFiniteError(f"CG produced non-finite residual at iteration {it}")
        resid = math.sqrt(rs_new)
        if resid <= stop:
            return x, it, resid
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, max_iters, resid


class RadonOp:
    """Forward/adjoint pair over slice stacks for a fixed geometry."""

    def __init__(self, geom):
        self.geom = geom

    def forward(self, x):
        return project_slices(x, self.geom)

    def adjoint(self, y):
        return backproject_slices(y, self.geom)


class IdentityOp:
    """A = I; turns the solvers into pure denoisers (test hook)."""

    def forward(self, x):
        return np.asarray(x, dtype=np.float64)

    def adjoint(self, y):
        return np.asarray(y, dtype=np.float64)


def _as_op(g):
    return RadonOp(g) if isinstance(g, Geometry) else g


def tv_objective(x, y, op_or_geom, lam, axes=None):
    """1/2 ||A x - y||^2 + lam * sum over axes of ||D_a x||_1."""
    x = x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float64)
    y = y.data if isinstance(y, Sinogram) else np.asarray(y, dtype=np.float64)
    op = _as_op(op_or_geom)
    if axes is None:
        axes = ("z", "y", "x") if x.ndim == 3 else ("y", "x")
    r = op.forward(x) - y
    val = 0.5 * float(np.vdot(r, r))
    for ax in axes:
        val += lam * float(np.abs(diff_forward(x, ax)).sum())
    return val


def _trace_writer(trace_path):
    if trace_path is None:
        return None, None
    f = open(trace_path, "w", newline="", encoding="utf-8")
    w = csv.writer(f)
    w.writerow(["iter", "objective", "primal_residual"])
    return f, w


def standard_admm(y, g, p, x_init, trace_path=None):
    """Joint-axes ADMM (single split z = D x over all gradient directions).

    Penalty is p.rho1; thresholds at lam/rho1. Returns the final primal x.
    """
    yarr = y.data if isinstance(y, Sinogram) else np.asarray(y, dtype=np.float64)
    op = _as_op(g)
    x = (x_init.data if isinstance(x_init, Volume) else np.asarray(x_init)).astype(
        np.float64
    ).copy()
    axes = ("z", "y", "x") if x.ndim == 3 else ("y", "x")
    rho = p.rho1
    z = {a: np.zeros_like(diff_forward(x, a)) for a in axes}
    u = {a: np.zeros_like(z[a]) for a in axes}
    aty = op.adjoint(yarr)
    shape = x.shape

    def system(v):
        v = v.reshape(shape)
        out = op.adjoint(op.forward(v)) + rho * diff_normal(v, axes)
        return out.ravel()

    tf, tw = _trace_writer(trace_path)
    try:
        for k in range(p.iters):
            b = aty.copy()
            for a in axes:
                b += rho * diff_adjoint(z[a] - u[a], a)
            xf, _, _ = cg_solve(system, b.ravel(), x0=x.ravel(),
                                tol=p.cg_tol, max_iters=p.cg_iters)
            x = xf.reshape(shape)
            primal = 0.0
            for a in axes:
                dx = diff_forward(x, a)
                z[a] = soft_threshold(dx + u[a], p.lam / rho)
                u[a] += dx - z[a]
                primal += float(np.sum((dx - z[a]) ** 2))
            if tw is not None:
                tw.writerow([k + 1, tv_objective(x, yarr, op, p.lam, axes),
                             math.sqrt(primal)])
        if not np.isfinite(x).all():
            raise NonFiniteError("ADMM produced non-finite state")
    finally:
        if tf is not None:
            tf.close()
    return x_init.like(x) if isinstance(x_init, Volume) else x


def _split_admm(yarr, op, p, x0, axes_h, axes_v, trace_path=None):
    """Direction-split ADMM core.

    The h block carries the fidelity term plus TV along axes_h (inner split
    penalty rho2, threshold lam/rho2); the v block carries TV along axes_v
    (inner penalty rho1*rho3, threshold lam/(rho1*rho3)); w is the scaled
    dual coupling h = v. One inner pass of each block per outer iteration.
    """
    h = np.array(x0, dtype=np.float64)
    v = h.copy()
    w = np.zeros_like(h)
    z_h = {a: np.zeros_like(diff_forward(h, a)) for a in axes_h}
    s_h = {a: np.zeros_like(z_h[a]) for a in axes_h}
    z_v = {a: np.zeros_like(diff_forward(h, a)) for a in axes_v}
    s_v = {a: np.zeros_like(z_v[a]) for a in axes_v}
    aty = op.adjoint(yarr)
    shape = h.shape

    def sys_h(q):
        q = q.reshape(shape)
        out = op.adjoint(op.forward(q)) + p.rho1 * q
        if axes_h:
            out += p.rho2 * diff_normal(q, axes_h)
        return out.ravel()

    def sys_v(q):
        q = q.reshape(shape)
        return (q + p.rho3 * diff_normal(q, axes_v)).ravel()

    tf, tw = _trace_writer(trace_path)
    try:
        for k in range(p.iters):
            b_h = aty - p.rho1 * (w - v)
            for a in axes_h:
                b_h += p.rho2 * diff_adjoint(z_h[a] - s_h[a], a)
            hf, _, _ = cg_solve(sys_h, b_h.ravel(), x0=h.ravel(),
                                tol=p.cg_tol, max_iters=p.cg_iters)
            h = hf.reshape(shape)
            for a in axes_h:
                dh = diff_forward(h, a)
                z_h[a] = soft_threshold(dh + s_h[a], p.lam / p.rho2)
                s_h[a] += dh - z_h[a]

            b_v = h + w
            for a in axes_v:
                b_v += p.rho3 * diff_adjoint(z_v[a] - s_v[a], a)
            vf, _, _ = cg_solve(sys_v, b_v.ravel(), x0=v.ravel(),
                                tol=p.cg_tol, max_iters=p.cg_iters)
            v = vf.reshape(shape)
            for a in axes_v:
                dv = diff_forward(v, a)
                z_v[a] = soft_threshold(dv + s_v[a], p.lam / (p.rho1 * p.rho3))
                s_v[a] += dv - z_v[a]

            w = w + h - v
            if tw is not None:
                tw.writerow([k + 1,
                             tv_objective(h, yarr, op, p.lam,
                                          tuple(axes_h) + tuple(axes_v)),
                             float(np.linalg.norm(h - v))])
        if not np.isfinite(h).all():
            raise NonFiniteError("split ADMM produced non-finite state")
    finally:
        if tf is not None:
            tf.close()
    return h


def specialized_admm3d(y, g, p, x_init, xy_enabled=True, trace_path=None):
    """Direction-split ADMM on a volume: (x,y) gradients in the fidelity
    block, z gradients in the coupled block.

    xy_enabled=False drops the in-plane TV path (z-only consistency mode).
    """
    yarr = y.data if isinstance(y, Sinogram) else np.asarray(y, dtype=np.float64)
    op = _as_op(g)
    x0 = x_init.data if isinstance(x_init, Volume) else np.asarray(x_init)
    if x0.ndim != 3:
        raise ValueError("specialized_admm3d expects a volume")
    axes_h = ("y", "x") if xy_enabled else ()
    out = _split_admm(yarr, op, p, x0, axes_h, ("z",), trace_path)
    return x_init.like(out) if isinstance(x_init, Volume) else out


def specialized_admm2d(y, g, p, x_init, trace_path=None):
    """Single-slice direction-split ADMM: x gradients in the fidelity block,
    y gradients in the coupled block (the training-time decomposition)."""
    yarr = y.data if isinstance(y, Sinogram) else np.asarray(y, dtype=np.float64)
    op = _as_op(g)
    x0 = np.asarray(x_init.data if isinstance(x_init, Volume) else x_init,
                    dtype=np.float64)
    if x0.ndim != 2:
        raise ValueError("specialized_admm2d expects a single slice")
    return _split_admm(yarr, op, p, x0, ("x",), ("y",), trace_path)


def prox_tv(v, weight, axes=None, iters=60, p0=None):
    """prox of weight * sum_a ||D_a u||_1 at v, by projected gradient on the
    dual. Independent of the ADMM route; used as an oracle in tests and by
    the proximal-gradient reference solver."""
    v = np.asarray(v, dtype=np.float64)
    if axes is None:
        axes = ("z", "y", "x") if v.ndim == 3 else ("y", "x")
    axes = tuple(axes)
    if weight == 0 or not axes:
        return v, {}
    p = {a: np.zeros_like(diff_forward(v, a)) for a in axes} if p0 is None else \
        {a: p0[a].copy() for a in axes}
    step = 1.0 / (4.0 * len(axes))
    for _ in range(iters):
        u = v.copy()
        for a in axes:
            u -= diff_adjoint(p[a], a)
        for a in axes:
            p[a] = np.clip(p[a] + step * diff_forward(u, a), -weight, weight)
    u = v.copy()
    for a in axes:
        u -= diff_adjoint(p[a], a)
    return u, p


def prox_gradient_tv(y, g, lam, x_init, iters=10000, axes=None, prox_iters=40,
                     accel=True):
    """FISTA-style proximal gradient for the same TV objective.

    Serves as the independent convex oracle: gradient steps on the fidelity
    term, TV handled by the dual prox above. Lipschitz constant estimated by
    power iteration on A^T A.
    """
    yarr = y.data if isinstance(y, Sinogram) else np.asarray(y, dtype=np.float64)
    op = _as_op(g)
    x = np.array(x_init.data if isinstance(x_init, Volume) else x_init,
                 dtype=np.float64)
    if axes is None:
        axes = ("z", "y", "x") if x.ndim == 3 else ("y", "x")

    q = np.ones_like(x)
    q /= np.linalg.norm(q)
    lip = 1.0
    for _ in range(30):
        q2 = op.adjoint(op.forward(q))
        lip = float(np.linalg.norm(q2.ravel()))
        if lip == 0:
            lip = 1.0
            break
        q = q2 / lip
    lip *= 1.05
    step = 1.0 / lip

    z = x.copy()
    t_mom = 1.0
    dual = None
    for _ in range(iters):
        grad = op.adjoint(op.forward(z) - yarr)
        x_new, dual = prox_tv(z - step * grad, lam * step, axes,
                              iters=prox_iters, p0=dual)
        if accel:
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom * t_mom))
            z = x_new + ((t_mom - 1.0) / t_next) * (x_new - x)
            t_mom = t_next
        else:
            z = x_new
        x = x_new
    return x


def table1_profiles():
    """Grid-searched penalty sets for the two solver roles (walnut column)."""
    return {
        "low_quality": AdmmParams(rho1=2.0, rho2=0.8, rho3=150.0, lam=1.2, iters=50),
        "data_consistency": AdmmParams(rho1=0.01, rho2=10.0, rho3=50.0, lam=0.2,
                                       iters=10),
    }


def with_iters(p, iters):
    return replace(p, iters=iters)
