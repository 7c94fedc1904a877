"""A small float64 rectifier MLP for velocity regression.

Inputs are (x, t, log t); the output is clamped componentwise to the
schedule-dependent envelope

    D * (|sigma'_t| * sqrt(log n) + |m'_t|),

which every teaching vector obeys up to constants, so the clamp costs nothing
at the optimum but caps the network class.  Gradients are exact reverse-mode
(the clamp back-propagates zero outside the active band), the optimizer is
Adam, and everything is deterministic given the seed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .schedules import Schedule, Family
from .seeding import substream


class TrainingDivergence(RuntimeError):
    pass


def width_for_basis_count(basis_count: int, scale: float = 8.0) -> int:
    """Hidden width ~ scale * sqrt(N'), keeping parameter count ~ N' up to constants."""
    return max(4, int(round(scale * math.sqrt(max(basis_count, 1)))))


@dataclass
class TrainConfig:
    steps: int = 1000
    batch: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cosine_decay: bool = True  # anneal lr to zero over the run
    tail_average: float = 0.25  # Polyak-average this final fraction of steps
    # keep training times off the singular edge t=1 where m' of the
    # variance-preserving family blows up; the excluded sliver contributes
    # O(guard) to the loss integral but produces 1e4-scale teacher outliers
    # that poison the optimizer state
    edge_guard: float = 1e-4
    trace_every: int = 25
    seed: int = 0


@dataclass
class LossTrace:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.loss[0]

    @property
    def final(self) -> float:
        return self.loss[-1]


class VelocityNet:
    """Fully-connected rectifier net with a time embedding and output clamp."""

    def __init__(
        self,
        dim: int,
        hidden: tuple[int, ...],
        schedule: Schedule,
        clamp_d: float = 5.0,
        n_train: int = 2,
        seed: int = 0,
    ):
        self.dim = dim
        self.hidden = tuple(int(w) for w in hidden)
        self.schedule = schedule
        self.clamp_d = float(clamp_d)
        self.n_train = max(int(n_train), 2)
        widths = [2 * dim + 2, *self.hidden, dim]
        rng = substream(seed, 0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            scale = math.sqrt(2.0 / fan_in)
            self.weights.append(rng.standard_normal((fan_out, fan_in)) * scale)
            self.biases.append(np.zeros(fan_out))

    # -- introspection ------------------------------------------------------

    @property
    def layer_widths(self) -> list[int]:
        return [self.weights[0].shape[1], *[w.shape[0] for w in self.weights]]

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def max_weight_magnitude(self) -> float:
        return max(
            max(float(np.abs(w).max()), float(np.abs(b).max()) if b.size else 0.0)
            for w, b in zip(self.weights, self.biases)
        )

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    # -- forward / backward -------------------------------------------------

    def _coeffs(self, t) -> tuple:
        """(sigma, dsigma, dm) with t broadcast to a column-ready 1d array."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        sigma, _, dsigma, dm = self.schedule.eval_arrays(t_arr)
        return t_arr, sigma, dsigma, dm

    def envelope(self, t) -> np.ndarray:
        """Componentwise output bound D(|sigma'| sqrt(log n) + |m'|) at time t."""
        _, _, dsigma, dm = self._coeffs(t)
        return self._envelope_from(dsigma, dm)

    def _envelope_from(self, dsigma, dm) -> np.ndarray:
        return self.clamp_d * (np.abs(dsigma) * math.sqrt(math.log(self.n_train)) + np.abs(dm))

    def _forward_raw(self, x: np.ndarray, t_arr: np.ndarray, sigma: np.ndarray):
        if t_arr.size == 1 and x.shape[0] > 1:
            t_col = np.full((x.shape[0], 1), t_arr[0])
            sig_col = np.full((x.shape[0], 1), sigma[0])
        else:
            t_col = t_arr[:, None]
            sig_col = sigma[:, None]
        # the whitened coordinate x/sigma_t makes conditional fields near-linear
        h = np.concatenate([x, x / sig_col, t_col, np.log(t_col)], axis=1)
        pre = []
        acts = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w.T + b
            pre.append(z)
            acts.append(np.maximum(z, 0.0) if i < len(self.weights) - 1 else z)
        return acts, pre

    def forward(self, x, t) -> np.ndarray:
        """Clamped output at (x, t); x is (B, d) or (d,), t scalar or (B,)."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        pts = np.atleast_2d(x)
        t_arr, sigma, dsigma, dm = self._coeffs(t)
        acts, _ = self._forward_raw(pts, t_arr, sigma)
        bound = self._envelope_from(dsigma, dm)
        bound = bound[:, None] if np.ndim(t) else bound[0]
        out = np.clip(acts[-1], -bound, bound)
        return out[0] if squeeze else out

    __call__ = forward

    def grad(self, x: np.ndarray, t, targets: np.ndarray):
        """Mean-squared-error loss and its exact gradient over a batch.

        Loss = (1/B) sum_i |clamp(net(x_i, t_i)) - v_i|^2.  Saturated clamp
        components receive zero gradient.
        """
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.atleast_2d(np.asarray(targets, dtype=float))
        if pts.shape[0] == 0:
            raise ValueError("empty batch")
        t_arr, sigma, dsigma, dm = self._coeffs(t)
        acts, pre = self._forward_raw(pts, t_arr, sigma)
        bound = self._envelope_from(dsigma, dm)
        bound = bound[:, None] if np.ndim(t) else bound[0]
        raw = acts[-1]
        out = np.clip(raw, -bound, bound)
        resid = out - v
        loss = float((resid**2).sum(axis=1).mean())
        g = 2.0 * resid / pts.shape[0]
        g = g * (np.abs(raw) < bound)  # stop-at-boundary
        grads_w = [np.empty_like(w) for w in self.weights]
        grads_b = [np.empty_like(b) for b in self.biases]
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = g.T @ acts[i]
            grads_b[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i]) * (pre[i - 1] > 0)
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads.extend([gw, gb])
        return loss, grads

    # -- Lipschitz ---------------------------------------------------------

    def lipschitz_upper(self, t: float = 1.0, iters: int = 50) -> float:
        """Product of per-layer spectral norms (power iteration).

        The first factor is the exact x-Jacobian block of the input layer at
        time t (raw plus whitened columns), so the value bounds the Lipschitz
        constant of x -> net(x, t) for the unclamped map at that time.
        """
        sigma, _, _, _ = self.schedule.eval(t)
        prod = 1.0
        for i, w in enumerate(self.weights):
            if i == 0:
                mat = w[:, : self.dim] + w[:, self.dim : 2 * self.dim] / sigma
            else:
                mat = w
            prod *= _spectral_norm(mat, iters)
        return prod


def _spectral_norm(mat: np.ndarray, iters: int) -> float:
    if not np.any(mat):
        return 0.0
    rng = substream(1234, mat.shape[0], mat.shape[1])
    v = rng.standard_normal(mat.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        u = mat @ v
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        v = mat.T @ (u / nu)
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v /= nv
    return float(np.linalg.norm(mat @ v))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class _Adam:
    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]):
        c = self.cfg
        self.step_count += 1
        lr = c.lr
        if c.cosine_decay:
            lr *= 0.5 * (1.0 + math.cos(math.pi * (self.step_count - 1) / max(c.steps, 1)))
        b1t = 1.0 - c.beta1**self.step_count
        b2t = 1.0 - c.beta2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g**2
            p -= lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)


def train_velocity_net(
    net: VelocityNet,
    data: np.ndarray,
    schedule: Schedule,
    t_lo: float,
    t_hi: float,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> LossTrace:
    """Regress the net onto conditional velocity targets on [t_lo, t_hi].

    Each step draws a minibatch of data points, uniform times in the interval
    and Gaussian eps, forms (x_t, v_target), and takes one Adam step on the
    clamped MSE.  Mutates the net in place and returns the loss trace
    (window-smoothed, recorded every `trace_every` steps).
    """
    if not (0.0 < t_lo < t_hi <= 1.0):
        raise ValueError(f"invalid interval [{t_lo}, {t_hi}]")
    pts = np.asarray(data, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n, d = pts.shape
    if rng is None:
        rng = substream(cfg.seed, 0)
    opt = _Adam(net.parameters(), cfg)
    trace = LossTrace()
    window: list[float] = []
    params = net.parameters()
    avg_start = cfg.steps - max(int(cfg.tail_average * cfg.steps), 1) if cfg.tail_average > 0 else cfg.steps
    avg_sum = [np.zeros_like(p) for p in params] if cfg.tail_average > 0 else None
    avg_count = 0
    t_hi_eff = min(t_hi, 1.0 - cfg.edge_guard) if t_hi >= 1.0 - cfg.edge_guard else t_hi
    t_hi_eff = max(t_hi_eff, t_lo * (1.0 + 1e-9))
    for step in range(cfg.steps):
        idx = rng.integers(0, n, cfg.batch)
        t = t_lo + (t_hi_eff - t_lo) * rng.random(cfg.batch)
        eps = rng.standard_normal((cfg.batch, d))
        sigma, m, dsigma, dm = schedule.eval_arrays(t)
        x_t = sigma[:, None] * eps + m[:, None] * pts[idx]
        v = dsigma[:, None] * eps + dm[:, None] * pts[idx]
        if cfg.lr > 0:
            loss, grads = net.grad(x_t, t, v)
            opt.update(params, grads)
        else:
            out = net.forward(x_t, t)
            loss = float(((out - v) ** 2).sum(axis=1).mean())
        if not math.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at step {step}")
        if avg_sum is not None and step >= avg_start:
            for acc, p in zip(avg_sum, params):
                acc += p
            avg_count += 1
        window.append(loss)
        if step % cfg.trace_every == 0 or step == cfg.steps - 1:
            trace.steps.append(step)
            trace.loss.append(float(np.mean(window)))
            window = []
    if avg_sum is not None and avg_count > 0 and cfg.lr > 0:
        for p, acc in zip(params, avg_sum):
            p[...] = acc / avg_count
    return trace


# ---------------------------------------------------------------------------
# Checkpoints: little-endian binary, documented in the README
# ---------------------------------------------------------------------------

_MAGIC = b"FMVN"
_VERSION = 1


def save_net(net: VelocityNet, path) -> None:
    """magic 'FMVN', u32 version, u32 header length, JSON header, float64 LE params."""
    header = {
        "dim": net.dim,
        "hidden": list(net.hidden),
        "clamp_d": net.clamp_d,
        "n_train": net.n_train,
        "schedule": net.schedule.to_config(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for p in net.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_net(path) -> VelocityNet:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a velocity-net checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        net = VelocityNet(
            dim=header["dim"],
            hidden=tuple(header["hidden"]),
            schedule=Schedule.from_config(header["schedule"]),
            clamp_d=header["clamp_d"],
            n_train=header["n_train"],
        )
        for p in net.parameters():
            buf = fh.read(p.size * 8)
            p[...] = np.frombuffer(buf, dtype="<f8").reshape(p.shape)
    return net
