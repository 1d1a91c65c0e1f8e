"""Toy text-conditioned latent denoiser with inspectable cross-attention.

The "latent" is the image grid itself (no autoencoder).  Each of the ``L``
transformer blocks runs self-attention over the ``H*W`` latent tokens,
cross-attention from latent tokens to the prompt tokens, and a GELU
feed-forward, all pre-norm.  Self-attention and feed-forward update the
spatial stream; cross-attention outputs are summed into a separate text
stream that joins the spatial one only in the output head, so queries in
every block are independent of the value projections.  Cross-attention probabilities
of every block are returned from :meth:`DenoiserModel.forward` so that
callers can aggregate them, differentiate through them, or edit the
pre-softmax logits via hooks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .container import load_container, save_container
from .tensor import ContractError, Tensor
from .text import VOCAB, TextEmbedder

FORMAT_KIND = "checkpoint"


@dataclass
class ModelConfig:
    height: int = 16
    width: int = 16
    channels: int = 4
    dim: int = 64          # latent token width
    text_dim: int = 32     # d
    attn_dim: int = 64     # query/key width, split over heads
    value_dim: int = 64    # v
    heads: int = 2
    blocks: int = 4
    ff_mult: int = 2
    max_len: int = 12      # n
    train_timesteps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.attn_dim % self.heads or self.value_dim % self.heads:
            raise ContractError("attn_dim and value_dim must be divisible by heads")

    @property
    def tokens(self) -> int:
        return self.height * self.width

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.height, self.width, self.channels


class NoiseSchedule:
    """Cosine schedule of cumulative signal fractions ``alpha_bar[t]``."""

    def __init__(self, timesteps: int = 200, s: float = 0.008, max_beta: float = 0.999):
        self.timesteps = timesteps
        f = lambda u: math.cos((u / timesteps + s) / (1 + s) * math.pi / 2) ** 2
        betas = [min(1 - f(t + 1) / f(t), max_beta) for t in range(timesteps)]
        self.alpha_bar = np.cumprod(1.0 - np.array(betas))

    def __getitem__(self, t: int) -> float:
        # t = -1 denotes the clean end of the trajectory
        return 1.0 if t < 0 else float(self.alpha_bar[t])

    def inference_timesteps(self, steps: int) -> list[int]:
        if not 1 <= steps <= self.timesteps:
            raise ContractError(f"steps must be in [1, {self.timesteps}], got {steps}")
        ratio = self.timesteps // steps
        return [i * ratio for i in reversed(range(steps))]


def ddim_step(z_t, eps, t: int, t_prev: int, schedule: NoiseSchedule, eta: float = 0.0):
    """Deterministic DDIM update from timestep ``t`` to ``t_prev`` (``-1`` = clean)."""
    if eta != 0.0:
        raise ContractError("only the deterministic sampler (eta=0) is supported")
    if t_prev > t:
        raise ContractError(f"ddim_step needs t >= t_prev, got t={t}, t_prev={t_prev}")
    z_t = np.asarray(z_t)
    if t_prev == t:
        return z_t.copy()
    a_t, a_prev = schedule[t], schedule[t_prev]
    x0 = predict_x0(z_t, eps, t, schedule)
    return math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * np.asarray(eps)


def predict_x0(z_t, eps, t: int, schedule: NoiseSchedule):
    a_t = schedule[t]
    return (np.asarray(z_t) - math.sqrt(1.0 - a_t) * np.asarray(eps)) / math.sqrt(a_t)


def add_noise(x0, eps, t, schedule: NoiseSchedule):
    a = np.asarray([schedule[int(ti)] for ti in np.atleast_1d(t)])
    a = a.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


class Hooks:
    """No-op attention hooks; subclasses override what they edit.

    ``key``/``value`` receive the projected ``(B, n, a)`` / ``(B, n, v)``
    tensors of cross-attention block ``block``; ``logits`` receives the
    scaled pre-softmax scores ``(B, heads, H*W, n)``.
    """

    def key(self, block: int, K: Tensor, c: Tensor) -> Tensor:
        return K

    def value(self, block: int, V: Tensor, c: Tensor) -> Tensor:
        return V

    def logits(self, block: int, L: Tensor) -> Tensor:
        return L

    def token_positions(self) -> list[int]:
        return []


class HookChain(Hooks):
    def __init__(self, *hooks: Hooks | None):
        self.hooks = [h for h in hooks if h is not None]

    def key(self, block, K, c):
        for h in self.hooks:
            K = h.key(block, K, c)
        return K

    def value(self, block, V, c):
        for h in self.hooks:
            V = h.value(block, V, c)
        return V

    def logits(self, block, L):
        for h in self.hooks:
            L = h.logits(block, L)
        return L

    def token_positions(self):
        return [p for h in self.hooks for p in h.token_positions()]


def _init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    p: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out, zero=False):
        p[name] = np.zeros((fan_in, fan_out)) if zero else rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, fan_out))

    D = cfg.dim
    p["text/table"] = rng.normal(0, 1.0, (len(VOCAB), cfg.text_dim))
    lin("in/W", cfg.channels, D)
    p["in/b"] = np.zeros(D)
    p["pos"] = rng.normal(0, 0.5, (cfg.tokens, D))
    # sinusoidal start for the learned timestep table
    half = D // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    ang = np.arange(cfg.train_timesteps)[:, None] * freqs[None]
    p["temb"] = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    for l in range(cfg.blocks):
        pre = f"block{l}/"
        for ln in ("ln1", "ln2", "ln3"):
            p[pre + ln + "/g"] = np.ones(D)
            p[pre + ln + "/b"] = np.zeros(D)
        lin(pre + "self/Wq", D, cfg.attn_dim)
        lin(pre + "self/Wk", D, cfg.attn_dim)
        lin(pre + "self/Wv", D, cfg.value_dim)
        lin(pre + "self/Wo", cfg.value_dim, D)
        lin(pre + "cross/Wq", D, cfg.attn_dim)
        lin(pre + "cross/Wk", cfg.text_dim, cfg.attn_dim)
        lin(pre + "cross/Wv", cfg.text_dim, cfg.value_dim)
        lin(pre + "cross/Wo", cfg.value_dim, D)
        lin(pre + "ff/W1", D, D * cfg.ff_mult)
        p[pre + "ff/b1"] = np.zeros(D * cfg.ff_mult)
        lin(pre + "ff/W2", D * cfg.ff_mult, D)
        p[pre + "ff/b2"] = np.zeros(D)
    # head: merges the spatial and text streams
    for ln in ("out/mix_ln", "out/ln"):
        p[ln + "/g"] = np.ones(D)
        p[ln + "/b"] = np.zeros(D)
    lin("out/ff/W1", D, D * cfg.ff_mult)
    p["out/ff/b1"] = np.zeros(D * cfg.ff_mult)
    lin("out/ff/W2", D * cfg.ff_mult, D)
    p["out/ff/b2"] = np.zeros(D)
    lin("out/W", D, cfg.channels)
    p["out/b"] = np.zeros(cfg.channels)
    return p


class DenoiserModel:
    """Noise predictor ``eps(z_t, c, t)`` returning per-block attention maps."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 step: int = 0):
        self.config = config
        raw = _init_params(config) if params is None else params
        dt = T.get_dtype()
        self.params: dict[str, Tensor] = {k: Tensor(np.array(v, dtype=dt)) for k, v in raw.items()}
        self.schedule = NoiseSchedule(config.train_timesteps)
        self.step = step

    # -- helpers
    @property
    def embedder(self) -> TextEmbedder:
        return TextEmbedder(self.params["text/table"].data, self.config.max_len)

    @property
    def dtype(self):
        return self.params["pos"].data.dtype

    def cast(self, dtype=None) -> "DenoiserModel":
        """Convert weights in place to ``dtype`` (defaults to the active mode's)."""
        dt = dtype or T.get_dtype()
        for k, t in self.params.items():
            if t.data.dtype != dt:
                self.params[k] = Tensor(t.data.astype(dt))
        return self

    def copy(self) -> "DenoiserModel":
        m = DenoiserModel.__new__(DenoiserModel)
        m.config = self.config
        m.params = {k: Tensor(v.data.copy(), dtype=v.data.dtype) for k, v in self.params.items()}
        m.schedule = self.schedule
        m.step = self.step
        return m

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # -- forward
    def forward(self, z, c, t, hooks: Hooks | None = None):
        """Predict noise for latents ``z`` ``(B, H, W, C)`` under text features ``c`` ``(B, n, d)``.

        Returns ``(eps, maps)`` where ``maps[l]`` holds block ``l``'s
        cross-attention probabilities with shape ``(B, heads, H*W, n)``.
        """
        cfg = self.config
        P = self.params
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        c = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=self.dtype))
        if z.ndim == 3:
            z = T.reshape(z, (1,) + z.shape)
        if c.ndim == 2:
            c = T.reshape(c, (1,) + c.shape)
        B = z.shape[0]
        if z.shape[1:] != cfg.latent_shape:
            raise T.DimensionError(f"latent shape {z.shape[1:]} != model {cfg.latent_shape}")
        n = c.shape[1]
        t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.intp)), (B,))
        if t.min() < 0 or t.max() >= cfg.train_timesteps:
            raise ContractError(f"timestep {t.tolist()} outside [0, {cfg.train_timesteps})")
        hooks = hooks or Hooks()
        bad = [p for p in hooks.token_positions() if not 0 <= p < n]
        if bad:
            raise ContractError(f"hook targets token index {bad} but prompt has n={n} tokens")

        N = cfg.tokens
        x = T.reshape(z, (B, N, cfg.channels))
        x = T.broadcast_add(T.matmul(x, P["in/W"]), P["in/b"])
        x = T.broadcast_add(x, P["pos"])
        temb = T.reshape(T.take(P["temb"], t, axis=0), (B, 1, cfg.dim))
        x = T.broadcast_add(x, temb)

        # x is the spatial stream (self-attention and feed-forward only); the
        # cross-attention outputs accumulate in a separate text stream y that
        # only the head reads.  Queries therefore never depend on values, so
        # value-side edits leave every block's attention maps untouched.
        maps = []
        y = None
        for l in range(cfg.blocks):
            pre = f"block{l}/"
            h = self._ln(x, pre + "ln1")
            x = T.add(x, self._self_attention(h, pre))
            h = self._ln(x, pre + "ln2")
            out, attn = self._cross_attention(h, c, l, hooks)
            maps.append(attn)
            y = out if y is None else T.add(y, out)
            h = self._ln(x, pre + "ln3")
            x = T.add(x, self._ff(h, pre + "ff"))

        h = T.add(x, y)
        h = T.add(h, self._ff(self._ln(h, "out/mix_ln"), "out/ff"))
        h = self._ln(h, "out/ln")
        eps = T.broadcast_add(T.matmul(h, P["out/W"]), P["out/b"])
        return T.reshape(eps, (B,) + cfg.latent_shape), maps

    __call__ = forward

    def _ff(self, h, pre):
        P = self.params
        f = T.gelu(T.broadcast_add(T.matmul(h, P[pre + "/W1"]), P[pre + "/b1"]))
        return T.broadcast_add(T.matmul(f, P[pre + "/W2"]), P[pre + "/b2"])

    def _ln(self, x, name):
        return T.broadcast_add(T.mul(T.layer_norm(x), self.params[name + "/g"]), self.params[name + "/b"])

    def _heads(self, x, width):
        B, L, _ = x.shape
        h = self.config.heads
        return T.transpose(T.reshape(x, (B, L, h, width // h)), (0, 2, 1, 3))

    def _merge(self, x):
        B, h, L, dh = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, h * dh))

    def _self_attention(self, h, pre):
        P, cfg = self.params, self.config
        q = self._heads(T.matmul(h, P[pre + "self/Wq"]), cfg.attn_dim)
        k = self._heads(T.matmul(h, P[pre + "self/Wk"]), cfg.attn_dim)
        v = self._heads(T.matmul(h, P[pre + "self/Wv"]), cfg.value_dim)
        s = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(cfg.attn_dim // cfg.heads))
        o = T.matmul(T.softmax(s), v)
        return T.matmul(self._merge(o), P[pre + "self/Wo"])

    def cross_projections(self, c, block: int, hooks: Hooks | None = None):
        """Key and value matrices of one cross-attention block, after hooks."""
        P = self.params
        pre = f"block{block}/"
        c = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=self.dtype))
        K = T.matmul(c, P[pre + "cross/Wk"])
        V = T.matmul(c, P[pre + "cross/Wv"])
        if hooks is not None:
            K = hooks.key(block, K, c)
            V = hooks.value(block, V, c)
        return K, V

    def _cross_attention(self, h, c, block, hooks):
        P, cfg = self.params, self.config
        pre = f"block{block}/"
        q = self._heads(T.matmul(h, P[pre + "cross/Wq"]), cfg.attn_dim)
        K, V = self.cross_projections(c, block, hooks)
        k = self._heads(K, cfg.attn_dim)
        v = self._heads(V, cfg.value_dim)
        s = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(cfg.attn_dim // cfg.heads))
        s = hooks.logits(block, s)
        attn = T.softmax(s)
        o = T.matmul(attn, v)
        return T.matmul(self._merge(o), P[pre + "cross/Wo"]), attn

    # -- persistence
    def save(self, path, extra: dict | None = None, arrays: dict | None = None) -> None:
        cfg = {"kind": FORMAT_KIND, "model": asdict(self.config), "step": self.step,
               "dtype": str(self.dtype)}
        cfg.update(extra or {})
        data = {f"param/{k}": v for k, v in self.numpy_params().items()}
        data.update(arrays or {})
        save_container(path, cfg, data)

    @classmethod
    def load(cls, path, with_extras: bool = False):
        cfg, arrays = load_container(path)
        if cfg.get("kind") != FORMAT_KIND:
            raise ContractError(f"{path}: not a model checkpoint (kind={cfg.get('kind')!r})")
        params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
        model = cls.__new__(cls)
        model.config = ModelConfig(**cfg["model"])
        model.params = {k: Tensor(v, dtype=v.dtype) for k, v in params.items()}
        model.schedule = NoiseSchedule(model.config.train_timesteps)
        model.step = cfg.get("step", 0)
        if with_extras:
            extras = {k: v for k, v in arrays.items() if not k.startswith("param/")}
            return model, cfg, extras
        return model


def cfg_combine(eps_uncond, eps_cond, w: float):
    """Classifier-free guidance; ``w`` of 0 or 1 returns the branch itself."""
    if w == 0.0:
        return np.array(eps_uncond, copy=True)
    if w == 1.0:
        return np.array(eps_cond, copy=True)
    return eps_uncond + w * (eps_cond - eps_uncond)


def initial_latent(seed: int, shape, dtype=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape).astype(dtype or T.get_dtype())
