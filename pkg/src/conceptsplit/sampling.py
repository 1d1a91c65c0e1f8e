"""Plain DDIM sampling with classifier-free guidance."""
from __future__ import annotations

import numpy as np

from .loda import AttentionAggregate, aggregate_attention
from .model import DenoiserModel, Hooks, cfg_combine, ddim_step, initial_latent


def sample(model: DenoiserModel, prompt, seed: int = 0, steps: int = 50, guidance: float = 7.5,
           hooks: Hooks | None = None, tokens=None, z_T=None, record: bool = True):
    """Generate one latent; returns ``(z_0, [AttentionAggregate per step])``.

    ``tokens`` selects the recorded attention columns (default: every word of
    the prompt).  The unconditional branch never sees ``hooks``.
    """
    cfg = model.config
    emb = model.embedder
    words = prompt.split() if isinstance(prompt, str) else list(prompt)
    c = emb.encode(words).astype(model.dtype)[None]
    c_null = emb.null().astype(model.dtype)[None]
    if z_T is None:
        z_T = initial_latent(seed, cfg.latent_shape, model.dtype)
    z = np.asarray(z_T, dtype=model.dtype).reshape((1,) + cfg.latent_shape)
    if tokens is None:
        tokens = range(len(words))
    tokens = tuple(tokens)
    timesteps = model.schedule.inference_timesteps(steps)
    trace: list[AttentionAggregate] = []
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
        eps_u, _ = model.forward(z, c_null, t)
        eps_c, maps = model.forward(z, c, t, hooks)
        if record and tokens:
            trace.append(aggregate_attention(maps, tokens, cfg.height, cfg.width, len(words), t))
        z = ddim_step(z, cfg_combine(eps_u.data, eps_c.data, guidance), t, t_prev, model.schedule)
    return z[0], trace
