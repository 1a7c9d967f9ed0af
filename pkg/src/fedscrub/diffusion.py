"""Denoising-diffusion scrubber for concatenated triple embeddings.

A linear variance schedule corrupts a vector step by step; a small MLP learns
to predict the injected noise; the reverse chain then generates replacement
vectors. Generation starts from a linear reparameterization of the fully
noised input (w = x_T W_mu + (x_T W_sigma) * z0) rather than pure noise,
which keeps replacements on the same scale as the embeddings they overwrite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import textio
from .rng import SeedLike, as_rng

START_MODES = ("reparam", "pure_noise")


@dataclass
class DiffusionSchedule:
    """Linear beta schedule with cached alpha and cumulative-alpha arrays."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=float)
        if self.betas.ndim != 1 or self.betas.size < 1:
            raise ValueError("need a 1-D, non-empty beta array")
        if ((self.betas <= 0) | (self.betas >= 1)).any():
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def steps(self) -> int:
        return self.betas.size

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ValueError(f"t must lie in [1, {self.steps}], got {t}")


def make_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if steps < 1:
        raise ValueError("need at least one step")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, steps))


def forward_step(x_prev, t: int, schedule: DiffusionSchedule, z) -> np.ndarray:
    """x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) z."""
    schedule.check_t(t)
    x_prev = np.asarray(x_prev, dtype=float)
    a = schedule.alphas[t - 1]
    return np.sqrt(a) * x_prev + np.sqrt(1.0 - a) * np.asarray(z, dtype=float)


def forward_to(x0, t: int, schedule: DiffusionSchedule, z) -> np.ndarray:
    """Jump straight to x_t given a single standard-normal draw z.

    The signal part multiplies the per-step sqrt(alpha) factors one at a time
    so the result matches a chain of forward_step calls bit-for-bit when
    z = 0; a closed-form sqrt(alpha_bar) coefficient would drift in the last
    ulp. The noise enters once with scale sqrt(1 - alpha_bar_t).
    """
    schedule.check_t(t)
    x = np.asarray(x0, dtype=float).copy()
    for s in range(t):
        x = np.sqrt(schedule.alphas[s]) * x
    return x + np.sqrt(1.0 - schedule.alpha_bars[t - 1]) * np.asarray(z, dtype=float)


class NoiseNet:
    """Two-hidden-layer tanh MLP predicting the injected noise.

    Input is the noised vector with t/t_max appended; output has the vector's
    dimension. Backprop is written out by hand and checked against finite
    differences in the tests.
    """

    def __init__(self, dim: int, width: int, t_max: int, seed: SeedLike,
                 init_scale: float = 1.0):
        if dim < 1 or width < 1 or t_max < 1:
            raise ValueError("dim, width and t_max must be positive")
        if init_scale < 0:
            raise ValueError("init_scale must be nonnegative")
        self.dim = dim
        self.width = width
        self.t_max = t_max
        rng = as_rng(seed)
        d_in = dim + 1
        self.w1 = init_scale * rng.standard_normal((d_in, width)) / np.sqrt(d_in)
        self.b1 = np.zeros(width)
        self.w2 = init_scale * rng.standard_normal((width, width)) / np.sqrt(width)
        self.b2 = np.zeros(width)
        self.w3 = init_scale * rng.standard_normal((width, dim)) / np.sqrt(width)
        self.b3 = np.zeros(dim)

    @property
    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    def _forward(self, x: np.ndarray, ts: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected (batch, {self.dim}) input, got {x.shape}")
        inp = np.concatenate([x, ts[:, None] / self.t_max], axis=1)
        a1 = np.tanh(inp @ self.w1 + self.b1)
        a2 = np.tanh(a1 @ self.w2 + self.b2)
        out = a2 @ self.w3 + self.b3
        return inp, a1, a2, out

    def predict(self, x, t: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ValueError("predict expects a single vector")
        _, _, _, out = self._forward(x[None, :], np.asarray([t], dtype=float))
        return out[0]

    def predict_batch(self, x: np.ndarray, ts: np.ndarray) -> np.ndarray:
        _, _, _, out = self._forward(np.asarray(x, dtype=float),
                                     np.asarray(ts, dtype=float))
        return out

    def loss_and_grads(self, x: np.ndarray, ts: np.ndarray, targets: np.ndarray):
        """Mean-squared noise-prediction error and its parameter gradients."""
        x = np.asarray(x, dtype=float)
        targets = np.asarray(targets, dtype=float)
        inp, a1, a2, out = self._forward(x, np.asarray(ts, dtype=float))
        diff = out - targets
        loss = float((diff * diff).mean())
        d_out = 2.0 * diff / diff.size
        g_w3 = a2.T @ d_out
        g_b3 = d_out.sum(axis=0)
        d_a2 = d_out @ self.w3.T
        d_z2 = d_a2 * (1.0 - a2 * a2)
        g_w2 = a1.T @ d_z2
        g_b2 = d_z2.sum(axis=0)
        d_a1 = d_z2 @ self.w2.T
        d_z1 = d_a1 * (1.0 - a1 * a1)
        g_w1 = inp.T @ d_z1
        g_b1 = d_z1.sum(axis=0)
        grads = {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2,
                 "w3": g_w3, "b3": g_b3}
        return loss, grads

    def apply_grads(self, grads: dict, lr: float) -> None:
        for name, p in self.params.items():
            p -= lr * grads[name]

    def input_vjp(self, x, t: int, v: np.ndarray) -> np.ndarray:
        """J_f(x, t)^T v, the gradient of v . f(x, t) with respect to x."""
        x = np.asarray(x, dtype=float)
        inp, a1, a2, _ = self._forward(x[None, :], np.asarray([t], dtype=float))
        d_a2 = np.asarray(v, dtype=float)[None, :] @ self.w3.T
        d_z2 = d_a2 * (1.0 - a2 * a2)
        d_a1 = d_z2 @ self.w2.T
        d_z1 = d_a1 * (1.0 - a1 * a1)
        d_inp = d_z1 @ self.w1.T
        return d_inp[0, :self.dim]  # drop the time slot


def noise_net_forward(net: NoiseNet, x_t, t: int) -> np.ndarray:
    """Predicted noise for one vector at step t."""
    return net.predict(x_t, t)


@dataclass
class ReparamHeads:
    """Linear heads mapping x_T to the mean and scale of the reverse start."""

    w_mu: np.ndarray
    w_sigma: np.ndarray

    def __post_init__(self):
        self.w_mu = np.asarray(self.w_mu, dtype=float)
        self.w_sigma = np.asarray(self.w_sigma, dtype=float)
        if self.w_mu.shape != self.w_sigma.shape or self.w_mu.ndim != 2 \
                or self.w_mu.shape[0] != self.w_mu.shape[1]:
            raise ValueError("heads must be square matrices of equal shape")


def make_heads(dim: int, sigma_scale: float = 0.01) -> ReparamHeads:
    """Defaults: identity mean head, sigma_scale * identity scale head."""
    return ReparamHeads(np.eye(dim), sigma_scale * np.eye(dim))


def reparameterize(x_t, heads: ReparamHeads, z0) -> np.ndarray:
    """w = x_t W_mu + (x_t W_sigma) * z0, elementwise product on the scale."""
    x_t = np.asarray(x_t, dtype=float)
    z0 = np.asarray(z0, dtype=float)
    if x_t.shape != z0.shape or x_t.shape[0] != heads.w_mu.shape[0]:
        raise ValueError("dimension mismatch in reparameterization")
    return x_t @ heads.w_mu + (x_t @ heads.w_sigma) * z0


def diffusion_train_step(batch_x0: np.ndarray, net: NoiseNet,
                         schedule: DiffusionSchedule, lr: float,
                         rng: np.random.Generator) -> float:
    """One SGD step of noise prediction on a batch of clean vectors."""
    batch_x0 = np.asarray(batch_x0, dtype=float)
    if batch_x0.ndim != 2 or batch_x0.shape[0] < 1:
        raise ValueError("need a non-empty (batch, dim) array")
    b = batch_x0.shape[0]
    ts = rng.integers(1, schedule.steps + 1, size=b)
    noise = rng.standard_normal(batch_x0.shape)
    x_t = np.stack([forward_to(batch_x0[i], int(ts[i]), schedule, noise[i])
                    for i in range(b)])
    loss, grads = net.loss_and_grads(x_t, ts, noise)
    net.apply_grads(grads, lr)
    return loss


def reverse_step(x_t, t: int, net, schedule: DiffusionSchedule, z) -> np.ndarray:
    """One ancestral sampling step; injected noise is forced to zero at t = 1."""
    schedule.check_t(t)
    x_t = np.asarray(x_t, dtype=float)
    eps = net.predict(x_t, t)
    alpha = schedule.alphas[t - 1]
    abar = schedule.alpha_bars[t - 1]
    beta = schedule.betas[t - 1]
    coeff = (1.0 - alpha) / np.sqrt(1.0 - abar)
    mean = (x_t - coeff * eps) / np.sqrt(alpha)
    if t == 1:
        return mean
    return mean + np.sqrt(beta) * np.asarray(z, dtype=float)


def generate_replacement(x0, net: NoiseNet, heads: ReparamHeads,
                         schedule: DiffusionSchedule, rng: np.random.Generator,
                         start_from: str = "reparam") -> np.ndarray:
    """Noise x0 to x_T, reparameterize the start, then run the reverse chain."""
    if start_from not in START_MODES:
        raise ValueError(f"start_from must be one of {START_MODES}")
    x0 = np.asarray(x0, dtype=float)
    steps = schedule.steps
    if start_from == "pure_noise":
        x = rng.standard_normal(x0.shape)
    else:
        z = rng.standard_normal(x0.shape)
        x_big = forward_to(x0, steps, schedule, z)
        z0 = rng.standard_normal(x0.shape)
        x = reparameterize(x_big, heads, z0)
    for t in range(steps, 0, -1):
        z2 = rng.standard_normal(x0.shape) if t > 1 else np.zeros_like(x0)
        x = reverse_step(x, t, net, schedule, z2)
    return x


def train_heads_step(batch_x0: np.ndarray, net: NoiseNet, heads: ReparamHeads,
                     schedule: DiffusionSchedule, lr: float,
                     rng: np.random.Generator) -> float:
    """Optional reconstruction step for the reparameterization heads.

    Runs the generator on each vector, measures mean squared reconstruction
    error against the input, and backpropagates through the whole reverse
    chain (treating noise draws as constants) into W_mu and W_sigma only.
    """
    batch_x0 = np.asarray(batch_x0, dtype=float)
    if batch_x0.ndim != 2 or batch_x0.shape[0] < 1:
        raise ValueError("need a non-empty (batch, dim) array")
    b, dim = batch_x0.shape
    steps = schedule.steps
    g_mu = np.zeros_like(heads.w_mu)
    g_sigma = np.zeros_like(heads.w_sigma)
    total = 0.0
    for i in range(b):
        x0 = batch_x0[i]
        z = rng.standard_normal(dim)
        x_big = forward_to(x0, steps, schedule, z)
        z0 = rng.standard_normal(dim)
        x = reparameterize(x_big, heads, z0)
        trace = []
        for t in range(steps, 0, -1):
            trace.append((x, t))
            z2 = rng.standard_normal(dim) if t > 1 else np.zeros(dim)
            x = reverse_step(x, t, net, schedule, z2)
        diff = x - x0
        total += float((diff * diff).mean())
        g = 2.0 * diff / dim
        for x_t, t in reversed(trace):
            alpha = schedule.alphas[t - 1]
            abar = schedule.alpha_bars[t - 1]
            coeff = (1.0 - alpha) / np.sqrt(1.0 - abar)
            g = (g - coeff * net.input_vjp(x_t, t, g)) / np.sqrt(alpha)
        g_mu += np.outer(x_big, g)
        g_sigma += np.outer(x_big, g * z0)
    heads.w_mu -= lr * g_mu / b
    heads.w_sigma -= lr * g_sigma / b
    return total / b


def save_diffusion_model(net: NoiseNet, schedule: DiffusionSchedule, directory) -> Path:
    """Text checkpoint: manifest with sizes and beta range, one file per tensor."""
    d = textio.ensure_dir(directory)
    textio.write_manifest(d / "manifest.txt", {
        "dim": net.dim,
        "width": net.width,
        "t_max": net.t_max,
        "steps": schedule.steps,
        "beta_start": format(schedule.betas[0], textio.FLOAT_FMT),
        "beta_end": format(schedule.betas[-1], textio.FLOAT_FMT),
    })
    for name, p in net.params.items():
        textio.write_matrix(d / f"{name}.txt", p)
    return d


def load_diffusion_model(directory):
    d = Path(directory)
    man = textio.read_manifest(d / "manifest.txt")
    net = NoiseNet(int(man["dim"]), int(man["width"]), int(man["t_max"]), seed=0,
                   init_scale=0.0)
    for name in net.params:
        mat = textio.read_matrix(d / f"{name}.txt")
        target = net.params[name]
        target[...] = mat[0] if target.ndim == 1 else mat
    schedule = make_schedule(int(man["steps"]), float(man["beta_start"]),
                             float(man["beta_end"]))
    return net, schedule
