"""Base-model training with the epsilon-prediction diffusion loss."""
from __future__ import annotations

import logging
import math
import time

import numpy as np

from . import tensor as T
from .model import DenoiserModel, add_noise
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A NaN/inf appeared in a loss or gradient."""


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, state: dict[str, np.ndarray] | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        if state:
            self.load_state(state)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            p = self.params[k]
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam/t": np.array([self.t], dtype=np.int64)}
        for k in self.m:
            out[f"adam/m/{k}"] = self.m[k]
            out[f"adam/v/{k}"] = self.v[k]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if "adam/t" in state:
            self.t = int(state["adam/t"][0])
        for k in self.m:
            if f"adam/m/{k}" in state:
                self.m[k] = state[f"adam/m/{k}"].astype(self.m[k].dtype)
                self.v[k] = state[f"adam/v/{k}"].astype(self.v[k].dtype)


def diffusion_loss(model: DenoiserModel, x0, c, t, noise, hooks=None) -> Tensor:
    """Mean squared error between true and predicted noise."""
    z = add_noise(x0, noise, t, model.schedule).astype(model.dtype)
    eps, _ = model.forward(Tensor(z), c, t, hooks)
    diff = T.broadcast_add(eps, Tensor(-np.asarray(noise, dtype=model.dtype)))
    return T.mean(T.mul(diff, diff))


def to_model_space(images) -> np.ndarray:
    """Map images in [0, 1] to the model's [-1, 1] latent range."""
    return 2.0 * np.asarray(images) - 1.0


def to_image_space(latent) -> np.ndarray:
    return np.clip((np.asarray(latent) + 1.0) / 2.0, 0.0, 1.0)


def fixed_eval_batch(model: DenoiserModel, images, captions, seed: int, size: int = 32):
    """Deterministic (x0, captions, t, noise) batch for before/after loss comparisons.

    Captions are embedded at evaluation time, since base training also moves
    the text table.
    """
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(images), size=min(size, len(images)), replace=False)
    x0 = to_model_space(np.stack([images[i] for i in idx]))
    caps = [captions[i] for i in idx]
    t = rng.integers(0, model.config.train_timesteps, size=len(idx))
    noise = rng.standard_normal(x0.shape)
    return x0, caps, t, noise


def eval_loss(model: DenoiserModel, batch, hooks=None) -> float:
    x0, caps, t, noise = batch
    c = model.embedder.encode_batch(caps)
    return float(diffusion_loss(model, x0, c, t, noise, hooks).data)


def train_base(model: DenoiserModel, images, captions, steps: int, lr: float = 1e-3,
               batch_size: int = 16, seed: int = 0, cond_drop: float = 0.1,
               optimizer_state: dict | None = None, log_every: int = 100,
               callback=None) -> tuple[DenoiserModel, dict]:
    """Train every weight of ``model`` in place; returns ``(model, history)``.

    ``model.step`` counts optimizer steps across resumed runs; the data
    stream for step ``k`` depends only on ``(seed, k)``, so training in two
    resumed chunks equals one uninterrupted run.
    """
    if not images:
        raise ValueError("training set is empty")
    emb = model.embedder
    ids = np.array([emb.token_ids(cap) for cap in captions])
    data = to_model_space(np.stack(images))
    opt = Adam(model.params, lr=lr, state=optimizer_state)
    history = {"step": [], "loss": [], "seconds": 0.0}
    start = time.perf_counter()
    null_ids = np.array(emb.token_ids([]))
    for _ in range(steps):
        k = model.step
        rng = np.random.default_rng([seed, k])
        idx = rng.integers(0, len(data), size=batch_size)
        t = rng.integers(0, model.config.train_timesteps, size=batch_size)
        noise = rng.standard_normal((batch_size,) + model.config.latent_shape)
        drop = rng.random(batch_size) < cond_drop
        tok = np.where(drop[:, None], null_ids[None], ids[idx])
        with Tape() as tape:
            tape.watch(*model.params.values())
            # embedding lookup stays on the tape so the text table trains too
            c = T.take(model.params["text/table"], tok.reshape(-1), axis=0)
            c = T.reshape(c, tok.shape + (model.config.text_dim,))
            loss = diffusion_loss(model, data[idx], c, t, noise)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"training loss became {value} at step {k}")
        grads = T.backward(tape, loss)
        opt.step({name: grads[p.node_id] for name, p in model.params.items()})
        model.step += 1
        if k % log_every == 0 or model.step == steps:
            history["step"].append(k)
            history["loss"].append(value)
            log.info("step %d loss %.5f", k, value)
        if callback is not None:
            callback(k, value)
    history["seconds"] = time.perf_counter() - start
    history["optimizer"] = opt
    return model, history
