"""Latent optimization for disentangled attention, plus attention-fixing guidance.

Stage 1 (the first ``N`` sampler steps) takes one gradient step on the
input latent per step to push the target tokens' cross-attention
distributions apart, measured by the harmonic mean of their pairwise KL
divergences.  Stage 2 (remaining steps) thresholds each token's smoothed
attention at a percentile and edits the pre-softmax cross-attention logits
so every token keeps its own region and is shut out of the others'.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from itertools import permutations

import numpy as np

from . import tensor as T
from .analysis import attention_entropy, mask_iou
from .model import DenoiserModel, HookChain, Hooks, cfg_combine, ddim_step
from .tensor import ContractError, Tape, Tensor
from .train import NumericError

log = logging.getLogger(__name__)

EPS_FLOOR = 1e-12
HM_EPS = 1e-12


@dataclass
class InferenceConfig:
    N: int = 10                 # stage-1 step budget
    tau: float = 1.0            # ReLU threshold on the KL harmonic mean
    gamma: float = 0.9          # AFG percentile
    p: float = 3.0              # AFG amplification
    m: float = -1e8             # AFG suppression
    eta_base: float = 40.0
    eta_slope: float = 20.0
    steps: int = 50
    guidance: float = 7.5
    seed: int = 0
    stage1: bool | None = None  # None: on when at least two target tokens
    afg: bool = True
    blur_size: int = 3
    blur_sigma: float = 1.0

    def validate(self) -> list[str]:
        errors = []
        if not 0 <= self.N <= self.steps:
            errors.append(f"N: must satisfy 0 <= N <= steps ({self.steps}), got {self.N}")
        if not 0 < self.gamma < 1:
            errors.append(f"gamma: must lie in (0, 1), got {self.gamma}")
        if not math.isfinite(self.p):
            errors.append(f"p: must be finite, got {self.p}")
        if not self.m < -1e3:
            errors.append(f"m: must be strongly negative (< -1e3), got {self.m}")
        if self.steps < 1:
            errors.append(f"steps: must be >= 1, got {self.steps}")
        if self.tau < 0:
            errors.append(f"tau: must be >= 0, got {self.tau}")
        if self.blur_size < 1 or self.blur_size % 2 == 0:
            errors.append(f"blur_size: must be a positive odd integer, got {self.blur_size}")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionAggregate:
    map: Tensor            # (H, W, k)
    tokens: tuple[int, ...]
    t: int | None = None

    def slice(self, j: int) -> np.ndarray:
        return self.map.data[..., j]

    def numpy(self) -> np.ndarray:
        return self.map.data


@dataclass
class AFGMaskSet:
    tokens: tuple[int, ...]
    thresholds: np.ndarray   # (k,)
    masks: np.ndarray        # (k, H, W) bool

    def counts(self) -> list[int]:
        return [int(m.sum()) for m in self.masks]


# ---------------------------------------------------------------- aggregation

def aggregate_attention(maps, S, height: int, width: int, n_words: int | None = None,
                        t: int | None = None) -> AttentionAggregate:
    """Mean over blocks and heads of single-sample maps ``(1, heads, H*W, n)``, columns ``S``."""
    S = tuple(int(s) for s in S)
    if not maps:
        raise ContractError("no attention maps to aggregate")
    n = maps[0].shape[-1]
    if n_words is not None and any(s >= n_words for s in S):
        raise ContractError(f"token indices {list(S)} include pad positions (prompt has {n_words} words)")
    if any(not 0 <= s < n for s in S):
        raise ContractError(f"token indices {list(S)} outside [0, {n})")
    maps = [m if isinstance(m, Tensor) else Tensor(m) for m in maps]
    if maps[0].shape[0] != 1:
        raise ContractError("aggregate_attention expects single-sample maps")
    total = maps[0]
    for m in maps[1:]:
        total = T.add(total, m)
    avg = T.mean(T.scale(total, 1.0 / len(maps)), axis=1)       # (1, HW, n)
    cols = T.take(avg, list(S), axis=-1)                           # (1, HW, k)
    return AttentionAggregate(T.reshape(cols, (height, width, len(S))), S, t)


# ---------------------------------------------------------------- stage 1 math

def smooth_and_normalize(slice_, size: int = 3, sigma: float = 1.0) -> Tensor:
    """Blur a nonnegative map over its last two axes, floor it and rescale to sum 1.

    An all-zero input becomes the uniform distribution (the floor dominates).
    """
    x = slice_ if isinstance(slice_, Tensor) else Tensor(slice_)
    blurred = T.gaussian_blur_2d(x, size, sigma)
    floored = T.broadcast_add(blurred, Tensor(np.asarray(EPS_FLOOR, dtype=x.data.dtype)))
    total = T.sum_(T.sum_(floored, axis=-1, keepdims=True), axis=-2, keepdims=True)
    return T.div(floored, total)


def pairwise_kl(P, Q) -> Tensor:
    """``sum P log(P / Q)`` over all cells."""
    P = P if isinstance(P, Tensor) else Tensor(P)
    Q = Q if isinstance(Q, Tensor) else Tensor(Q)
    return T.sum_(T.mul(P, T.add(T.log(P), T.scale(T.log(Q), -1.0))))


def harmonic_mean(values) -> Tensor:
    """``count / sum(1 / v)``, with each value clamped from below at 1e-12."""
    vals = [v if isinstance(v, Tensor) else Tensor(v) for v in values]
    if not vals:
        raise ContractError("harmonic_mean of an empty set")
    eps = Tensor(np.asarray(HM_EPS, dtype=vals[0].data.dtype))
    one = Tensor(np.asarray(1.0, dtype=vals[0].data.dtype))
    acc = None
    for v in vals:
        # max(v, eps) = eps + relu(v - eps)
        clamped = T.broadcast_add(T.relu(T.broadcast_add(v, T.scale(eps, -1.0))), eps)
        r = T.div(one, clamped)
        acc = r if acc is None else T.add(acc, r)
    return T.div(Tensor(np.asarray(float(len(vals)), dtype=acc.data.dtype)), acc)


def kl_loss(klh, tau: float) -> Tensor:
    """``ReLU(tau - klh)``: zero, with zero gradient, once the divergence reaches tau."""
    klh = klh if isinstance(klh, Tensor) else Tensor(klh)
    return T.relu(T.broadcast_add(T.scale(klh, -1.0), Tensor(np.asarray(tau, dtype=klh.data.dtype))))


def eta_schedule(t: float, total: float, base: float = 40.0, slope: float = 20.0) -> float:
    """Linear step size ``base - slope * t / total``."""
    if not 0 <= t <= total:
        raise ContractError(f"eta_schedule needs 0 <= t <= T, got t={t}, T={total}")
    return base - slope * (t / total)


def token_distributions(agg: AttentionAggregate, size=3, sigma=1.0) -> Tensor:
    """Per-token distributions ``(k, H, W)`` from an aggregate."""
    return smooth_and_normalize(T.transpose(agg.map, (2, 0, 1)), size, sigma)


def klh_of(agg: AttentionAggregate, size=3, sigma=1.0) -> Tensor:
    """Harmonic mean of KL over all ordered token pairs ``(i, j), i != j``."""
    k = len(agg.tokens)
    if k < 2:
        raise ContractError("KL harmonic mean needs at least two target tokens")
    P = token_distributions(agg, size, sigma)
    rows = [T.reshape(T.take(P, [i], axis=0), P.shape[1:]) for i in range(k)]
    return harmonic_mean([pairwise_kl(rows[i], rows[j]) for i, j in permutations(range(k), 2)])


def lkl_loss(model: DenoiserModel, z, c, t: int, S, config: InferenceConfig,
             hooks: Hooks | None = None, n_words: int | None = None):
    """Forward the conditional branch and return ``(L_KL, KL^H, aggregate)``."""
    cfg = model.config
    _, maps = model.forward(z, c, t, hooks)
    agg = aggregate_attention(maps, S, cfg.height, cfg.width, n_words, t)
    klh = klh_of(agg, config.blur_size, config.blur_sigma)
    return kl_loss(klh, config.tau), klh, agg


def stage1_update(model: DenoiserModel, z, c, t: int, S, config: InferenceConfig,
                  hooks: Hooks | None = None, n_words: int | None = None, eta: float | None = None):
    """One gradient step on ``L_KL`` with respect to the latent.

    Returns ``(z_new, info)``.  When the loss is exactly zero the input array
    is returned unchanged (same values, no arithmetic applied).
    """
    z = np.asarray(z, dtype=model.dtype)
    if eta is None:
        eta = eta_schedule(t, model.config.train_timesteps, config.eta_base, config.eta_slope)
    leaf = Tensor(z.copy())
    with Tape() as tape:
        tape.watch(leaf)
        loss, klh, agg = lkl_loss(model, leaf, c, t, S, config, hooks, n_words)
    info = {"klh": float(klh.data), "lkl": float(loss.data), "eta": float(eta), "aggregate": agg}
    if float(loss.data) == 0.0:
        info["updated"] = False
        return z, info
    grad = T.backward(tape, loss)[leaf.node_id]
    if not np.all(np.isfinite(grad)):
        dump = {"klh": info["klh"], "maps": agg.numpy().tolist()}
        raise NumericError(f"non-finite latent gradient at t={t}; attention dump: {dump}")
    info["updated"] = True
    info["grad_norm"] = float(np.linalg.norm(grad))
    return (z - eta * grad).astype(z.dtype), info


# ---------------------------------------------------------------- stage 2

def nearest_rank_threshold(values: np.ndarray, gamma: float) -> float:
    """Value at position ``ceil(gamma * count)`` (1-based) of the ascending sort."""
    flat = np.sort(np.asarray(values).reshape(-1))
    rank = max(1, math.ceil(round(gamma * flat.size, 9)))
    return float(flat[rank - 1])


def blur_map(slice_: np.ndarray, size: int = 3, sigma: float = 1.0) -> np.ndarray:
    a = np.asarray(slice_)
    H, W = a.shape[-2:]
    Gh = T.gaussian_kernel_matrix(H, size, sigma, a.dtype)
    Gw = T.gaussian_kernel_matrix(W, size, sigma, a.dtype)
    return Gh @ a @ Gw.T


def compute_afg_masks(agg, gamma: float, size: int = 3, sigma: float = 1.0,
                      tokens=None) -> AFGMaskSet:
    """Blur each token slice and keep the cells at or above its percentile value."""
    if isinstance(agg, AttentionAggregate):
        arr, tokens = agg.numpy(), agg.tokens
    else:
        arr = np.asarray(agg)
        tokens = tuple(range(arr.shape[-1])) if tokens is None else tuple(tokens)
    k = arr.shape[-1]
    thresholds = np.empty(k)
    masks = np.empty((k,) + arr.shape[:2], dtype=bool)
    for j in range(k):
        sm = blur_map(arr[..., j], size, sigma)
        thresholds[j] = nearest_rank_threshold(sm, gamma)
        masks[j] = sm >= thresholds[j]
    return AFGMaskSet(tuple(tokens), thresholds, masks)


def afg_offsets(masks: AFGMaskSet, p: float, m: float) -> np.ndarray:
    """Logit offsets ``(H*W, k)``: ``p`` on a token's own mask, ``m`` per other token's mask."""
    M = masks.masks.reshape(len(masks.tokens), -1).astype(np.float64)
    total = M.sum(axis=0)
    return (p * M + m * (total[None] - M)).T


def apply_afg(logits, masks: AFGMaskSet, p: float, m: float) -> Tensor:
    """Add the AFG offsets to the target-token columns of pre-softmax logits ``(..., H*W, n)``."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if not masks.tokens:
        return logits
    cells = masks.masks.shape[1] * masks.masks.shape[2]
    if logits.shape[-2] != cells:
        raise ContractError(f"mask resolution {masks.masks.shape[1:]} ({cells} cells) does not "
                            f"match {logits.shape[-2]} latent tokens")
    off = Tensor(afg_offsets(masks, p, m).astype(logits.data.dtype))
    return T.index_add(logits, list(masks.tokens), off, axis=-1)


class AFGHook(Hooks):
    """Installs :func:`apply_afg` in every cross-attention block."""

    def __init__(self, masks: AFGMaskSet, p: float, m: float):
        self.masks, self.p, self.m = masks, p, m

    def logits(self, block, L):
        return apply_afg(L, self.masks, self.p, self.m)

    def token_positions(self):
        return list(self.masks.tokens)


# ---------------------------------------------------------------- sampler

@dataclass
class StepRecord:
    step: int
    t: int
    stage1: bool
    afg: bool
    klh: float | None
    lkl: float | None
    eta: float | None
    entropy: list[float]
    mask_counts: list[int]
    iou: list[list[float]]
    afg_mask_counts: list[int] | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        d["type"] = "step"
        return d


def iou_matrix(masks: np.ndarray) -> list[list[float]]:
    k = len(masks)
    return [[mask_iou(masks[i], masks[j]) for j in range(k)] for i in range(k)]


def loda_sample(model: DenoiserModel, z_T, prompt, S, config: InferenceConfig,
                adapters: Hooks | None = None, keep_maps: bool = False):
    """Run the full sampler with optional stage-1 latent updates and AFG.

    Returns ``(z_0, records, final)`` where ``records`` holds one
    :class:`StepRecord` per step and ``final`` the last step's effective
    aggregate and masks (plus per-step maps when ``keep_maps``).
    """
    errs = config.validate()
    if errs:
        raise ContractError("; ".join(errs))
    S = tuple(int(s) for s in S)
    if not S:
        raise ContractError("target token set S is empty")
    stage1 = config.stage1
    if stage1 is None:
        stage1 = len(S) >= 2
    elif stage1 and len(S) < 2:
        raise ContractError("stage 1 requested but it needs at least two target tokens")
    cfg = model.config
    emb = model.embedder
    words = prompt.split() if isinstance(prompt, str) else list(prompt)
    n_words = len(words)
    c = emb.encode(words).astype(model.dtype)[None]
    c_null = emb.null().astype(model.dtype)[None]
    z = np.asarray(z_T, dtype=model.dtype).reshape((1,) + cfg.latent_shape)
    timesteps = model.schedule.inference_timesteps(config.steps)
    records: list[StepRecord] = []
    history = []
    agg_eff = None
    for step, t in enumerate(timesteps):
        t_prev = timesteps[step + 1] if step + 1 < len(timesteps) else -1
        klh = lkl = eta = None
        in_stage1 = stage1 and step < config.N
        if in_stage1:
            z, info = stage1_update(model, z, c, t, S, config, adapters, n_words)
            klh, lkl, eta = info["klh"], info["lkl"], info["eta"]
        eps_u, _ = model.forward(z, c_null, t)
        afg_on = config.afg and step >= config.N
        afg_counts = None
        if afg_on:
            _, probe = model.forward(z, c, t, adapters)
            masks = compute_afg_masks(aggregate_attention(probe, S, cfg.height, cfg.width, n_words, t),
                                      config.gamma, config.blur_size, config.blur_sigma)
            afg_counts = masks.counts()
            eps_c, maps = model.forward(z, c, t, HookChain(adapters, AFGHook(masks, config.p, config.m)))
        else:
            eps_c, maps = model.forward(z, c, t, adapters)
        agg_eff = aggregate_attention(maps, S, cfg.height, cfg.width, n_words, t)
        if klh is None and len(S) >= 2:
            kh = klh_of(agg_eff, config.blur_size, config.blur_sigma)
            klh = float(kh.data)
            lkl = float(kl_loss(kh, config.tau).data)
        eff_masks = compute_afg_masks(agg_eff, config.gamma, config.blur_size, config.blur_sigma)
        records.append(StepRecord(
            step=step, t=t, stage1=bool(in_stage1), afg=bool(afg_on), klh=klh, lkl=lkl, eta=eta,
            entropy=[attention_entropy(agg_eff.slice(j)) for j in range(len(S))],
            mask_counts=eff_masks.counts(), iou=iou_matrix(eff_masks.masks),
            afg_mask_counts=afg_counts))
        if keep_maps:
            history.append(agg_eff.numpy().copy())
        eps = cfg_combine(eps_u.data, eps_c.data, config.guidance)
        z = ddim_step(z, eps, t, t_prev, model.schedule)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"latent became non-finite at step {step} (t={t})")
    final = {"aggregate": agg_eff.numpy(), "masks": eff_masks.masks, "tokens": S}
    if keep_maps:
        final["history"] = history
    return z[0], records, final
