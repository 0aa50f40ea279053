"""Conditional noise-prediction network over 2D slices, with hand-rolled
reverse-mode gradients.

The network is a compact residual conv stack (3x3 convs, SiLU) conditioned
on a sinusoidal embedding of the timestep plus a learned embedding of a
binary label distinguishing authentic slices from consistency-reconstructed
ones. Everything is float64 numpy; convolutions go through im2col so each
layer is a single GEMM.
"""

import hashlib
import json

import numpy as np

from .grid import Rng

REAL = 0   # label for authentic slices
RECON = 1  # label for consistency-reconstructed slices

_OFFSETS = [(di, dj) for di in range(3) for dj in range(3)]


def _im2col(x):
    """(B, C, H, W) -> column tensor (B, C*9, H*W) for a 3x3 same conv."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((b, c, 9, h, w))
    for k, (di, dj) in enumerate(_OFFSETS):
        cols[:, :, k] = xp[:, :, di:di + h, dj:dj + w]
    return cols.reshape(b, c * 9, h * w)


def _col2im(dcols, shape):
    """Transpose of _im2col: fold (B, C*9, H*W) back onto (B, C, H, W)."""
    b, c, h, w = shape
    dcols = dcols.reshape(b, c, 9, h, w)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for k, (di, dj) in enumerate(_OFFSETS):
        dxp[:, :, di:di + h, dj:dj + w] += dcols[:, :, k]
    return dxp[:, :, 1:-1, 1:-1]


def _conv_forward(x, w, bias):
    b, c, h, wd = x.shape
    cols = _im2col(x)
    w2 = w.reshape(w.shape[0], -1)
    out = np.matmul(w2, cols) + bias[:, None]
    return out.reshape(b, w.shape[0], h, wd), cols


def _conv_backward(dout, cols, w, x_shape):
    b = dout.shape[0]
    dout2 = dout.reshape(b, dout.shape[1], -1)
    w2 = w.reshape(w.shape[0], -1)
    dw = np.matmul(dout2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dout2.sum(axis=(0, 2))
    dcols = np.matmul(w2.T, dout2)
    dx = _col2im(dcols, x_shape)
    return dx, dw, db


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _silu_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


def time_embedding(t, dim):
    """Sinusoidal embedding of integer steps; shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class EpsNet:
    """epsilon_theta(x_t, t, c) over single slices or batches of slices."""

    def __init__(self, channels=36, blocks=4, emb_dim=36, trained_T=1000, seed=0):
        self.channels = channels
        self.blocks = blocks
        self.emb_dim = emb_dim
        self.trained_T = trained_T
        self.params = {}
        rng = Rng(seed)
        c = channels

        def conv_init(name, cout, cin):
            std = np.sqrt(2.0 / (cin * 9))
            self.params[f"{name}.w"] = std * rng.randn(cout, cin, 3, 3)
            self.params[f"{name}.b"] = np.zeros(cout)

        conv_init("conv_in", c, 1)
        for i in range(blocks):
            conv_init(f"block{i}.conv1", c, c)
            self.params[f"block{i}.proj.w"] = (
                rng.randn(c, emb_dim) / np.sqrt(emb_dim))
            self.params[f"block{i}.proj.b"] = np.zeros(c)
            conv_init(f"block{i}.conv2", c, c)
        conv_init("conv_out", 1, c)
        self.params["class_emb"] = 0.1 * rng.randn(2, emb_dim)
        self._tape = None

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        dup = EpsNet.__new__(EpsNet)
        dup.channels = self.channels
        dup.blocks = self.blocks
        dup.emb_dim = self.emb_dim
        dup.trained_T = self.trained_T
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup._tape = None
        return dup

    def _prep(self, x_t, t, c):
        x = np.asarray(x_t, dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.ndim != 3:
            raise ValueError(f"expected (H, W) or (B, H, W), got {x.shape}")
        b = x.shape[0]
        t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (b,))
        c = np.broadcast_to(np.atleast_1d(np.asarray(c, dtype=np.int64)), (b,))
        if np.any(t < 1) or np.any(t > self.trained_T):
            raise ValueError(f"timestep outside [1, {self.trained_T}]")
        if np.any((c != REAL) & (c != RECON)):
            raise ValueError("label must be 0 (real) or 1 (recon)")
        return x, t, c, squeeze

    def forward(self, x_t, t, c):
        x, t, c, squeeze = self._prep(x_t, t, c)
        p = self.params
        cond = time_embedding(t, self.emb_dim) + p["class_emb"][c]
        tape = {"cond": cond, "labels": c, "x_shape": x.shape, "blocks": []}

        cur = x[:, None]
        f, cols = _conv_forward(cur, p["conv_in.w"], p["conv_in.b"])
        tape["conv_in"] = (cols, cur.shape)
        cur = f
        for i in range(self.blocks):
            a, cols1 = _conv_forward(cur, p[f"block{i}.conv1.w"],
                                     p[f"block{i}.conv1.b"])
            bias = cond @ p[f"block{i}.proj.w"].T + p[f"block{i}.proj.b"]
            a = a + bias[:, :, None, None]
            s, sig = _silu(a)
            h, cols2 = _conv_forward(s, p[f"block{i}.conv2.w"],
                                     p[f"block{i}.conv2.b"])
            tape["blocks"].append((cols1, cur.shape, a, sig, cols2, s.shape))
            cur = cur + h
        g, sig_out = _silu(cur)
        out, cols_out = _conv_forward(g, p["conv_out.w"], p["conv_out.b"])
        tape["head"] = (cur, sig_out, cols_out, g.shape)
        self._tape = tape
        out = out[:, 0]
        return out[0] if squeeze else out

    def backward(self, dout):
        """Gradients of a scalar loss wrt all parameters, given the loss
        adjoint at the network output (same shape as the output)."""
        if self._tape is None:
            raise RuntimeError("backward called before any forward pass")
        p = self.params
        tape = self._tape
        d = np.asarray(dout, dtype=np.float64)
        if d.ndim == 2:
            d = d[None]
        grads = {}

        cur_pre, sig_out, cols_out, g_shape = tape["head"]
        dg, dw, db = _conv_backward(d[:, None], cols_out, p["conv_out.w"], g_shape)
        grads["conv_out.w"] = dw
        grads["conv_out.b"] = db
        dcur = dg * _silu_grad(cur_pre, sig_out)

        dcond = np.zeros_like(tape["cond"])
        for i in reversed(range(self.blocks)):
            cols1, in_shape, a, sig, cols2, s_shape = tape["blocks"][i]
            ds, dw2, db2 = _conv_backward(dcur, cols2, p[f"block{i}.conv2.w"],
                                          s_shape)
            grads[f"block{i}.conv2.w"] = dw2
            grads[f"block{i}.conv2.b"] = db2
            da = ds * _silu_grad(a, sig)
            dbias = da.sum(axis=(2, 3))
            grads[f"block{i}.proj.w"] = dbias.T @ tape["cond"]
            grads[f"block{i}.proj.b"] = dbias.sum(axis=0)
            dcond += dbias @ p[f"block{i}.proj.w"]
            dx1, dw1, db1 = _conv_backward(da, cols1, p[f"block{i}.conv1.w"],
                                           in_shape)
            grads[f"block{i}.conv1.w"] = dw1
            grads[f"block{i}.conv1.b"] = db1
            dcur = dcur + dx1

        cols_in, in_shape = tape["conv_in"]
        _, dw0, db0 = _conv_backward(dcur, cols_in, p["conv_in.w"], in_shape)
        grads["conv_in.w"] = dw0
        grads["conv_in.b"] = db0

        demb = np.zeros_like(p["class_emb"])
        np.add.at(demb, tape["labels"], dcond)
        grads["class_emb"] = demb
        return grads


def eps_forward(net, x_t, t, c):
    """Predict the noise content of x_t at step t under label c."""
    return net.forward(x_t, t, c)


def eps_backward(net, dout):
    """Reverse-mode parameter gradients for the most recent forward pass."""
    return net.backward(dout)


def schedule_hash(sched):
    return hashlib.sha256(np.ascontiguousarray(sched.beta).tobytes()).hexdigest()


def save_checkpoint(net, path, sched=None):
    """float32 little-endian parameter blob + JSON manifest at path + '.json'."""
    names = sorted(net.params)
    with open(path, "wb") as f:
        for name in names:
            f.write(net.params[name].astype("<f4").tobytes())
    manifest = {
        "layers": [{"name": n, "shape": list(net.params[n].shape)} for n in names],
        "channels": net.channels,
        "blocks": net.blocks,
        "emb_dim": net.emb_dim,
        "trained_T": net.trained_T,
        "labels": ["real", "recon"],
        "schedule_hash": schedule_hash(sched) if sched is not None else None,
    }
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


def load_checkpoint(path):
    with open(path + ".json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    net = EpsNet(channels=manifest["channels"], blocks=manifest["blocks"],
                 emb_dim=manifest["emb_dim"], trained_T=manifest["trained_T"])
    blob = np.fromfile(path, dtype="<f4")
    pos = 0
    for layer in manifest["layers"]:
        shape = tuple(layer["shape"])
        n = int(np.prod(shape))
        net.params[layer["name"]] = blob[pos:pos + n].astype(np.float64).reshape(shape)
        pos += n
    if pos != blob.size:
        raise ValueError(f"checkpoint blob length {blob.size} != manifest total {pos}")
    return net
