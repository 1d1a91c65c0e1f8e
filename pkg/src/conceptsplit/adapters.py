"""Token-wise value adaptation (ToVA) and the adapter baselines it is compared to.

A :class:`ConceptAdapter` holds one low-rank pair ``(A, B)`` per
cross-attention block for each projection it targets.  An
:class:`AdapterSet` attaches adapters to token positions of a prompt and is
itself a :class:`~conceptsplit.model.Hooks`, so it plugs straight into the
denoiser forward pass:

* token-wise mode adds ``B A c_i`` to row ``i`` of the value matrix only;
* merged mode adds ``sum_k lambda_k B_k A_k c`` to every row (the mixing
  baseline);
* adapters whose target includes ``"key"`` apply the same row routing to
  the key matrix (ablation variants only).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .container import load_container, save_container
from .model import DenoiserModel, Hooks
from .tensor import ContractError, DimensionError, Tape, Tensor
from .text import TEMPLATES
from .train import Adam, NumericError, diffusion_loss, to_model_space

log = logging.getLogger(__name__)

VARIANTS = {"value": ("value",), "key": ("key",), "key+value": ("key", "value")}
DB_KIND = "adapterdb"


@dataclass
class ConceptAdapter:
    name: str
    word: str
    rank: int
    variant: str = "value"
    # target -> per-block list of (A: (r, d), B: (out, r))
    weights: dict[str, list[tuple[Tensor, Tensor]]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, name: str, word: str, model: DenoiserModel, rank: int = 8,
              variant: str = "value", seed: int = 0) -> "ConceptAdapter":
        """Adapter with random ``A`` and zero ``B``, so it starts as an exact no-op."""
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        cfg = model.config
        rng = np.random.default_rng(seed)
        dt = model.dtype
        weights = {}
        for target in VARIANTS[variant]:
            out = cfg.value_dim if target == "value" else cfg.attn_dim
            weights[target] = [
                (Tensor(rng.normal(0, 1 / math.sqrt(cfg.text_dim), (rank, cfg.text_dim)), dtype=dt),
                 Tensor(np.zeros((out, rank)), dtype=dt))
                for _ in range(cfg.blocks)
            ]
        return cls(name, word, rank, variant, weights)

    @property
    def targets(self) -> tuple[str, ...]:
        return VARIANTS[self.variant]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for target, pairs in self.weights.items():
            for l, (A, B) in enumerate(pairs):
                out[f"{target}/block{l}/A"] = A
                out[f"{target}/block{l}/B"] = B
        return out

    def cast(self, dtype) -> "ConceptAdapter":
        for target, pairs in self.weights.items():
            self.weights[target] = [(Tensor(A.data.astype(dtype)), Tensor(B.data.astype(dtype)))
                                    for A, B in pairs]
        return self

    def dense(self, block: int, target: str = "value") -> np.ndarray:
        """The full-rank update ``B @ A`` of one block."""
        A, B = self.weights[target][block]
        return B.data @ A.data


def adapter_forward(adapter: ConceptAdapter, c_i, block: int = 0, target: str = "value") -> Tensor:
    """``B (A c_i)`` for embedding rows ``c_i`` of shape ``(..., d)``."""
    if target not in adapter.weights:
        raise ContractError(f"adapter {adapter.name!r} has no {target} weights")
    pairs = adapter.weights[target]
    if not 0 <= block < len(pairs):
        raise DimensionError(f"adapter {adapter.name!r}: no weights for block {block}")
    A, B = pairs[block]
    c_i = c_i if isinstance(c_i, Tensor) else Tensor(c_i)
    if c_i.shape[-1] != A.shape[1]:
        raise DimensionError(f"adapter {adapter.name!r}, block {block}: embedding width "
                             f"{c_i.shape[-1]} != adapter input {A.shape[1]}")
    return T.matmul(T.matmul(c_i, T.transpose(A)), T.transpose(B))


class AdapterSet(Hooks):
    """Adapters bound to token positions of the current prompt."""

    def __init__(self, entries=(), mode: str = "token-wise", lambdas=None):
        if mode not in ("token-wise", "merged"):
            raise ContractError(f"unknown adapter mode {mode!r}")
        self.entries: list[tuple[ConceptAdapter, int]] = list(entries)
        self.mode = mode
        self.lambdas = list(lambdas) if lambdas is not None else [1.0] * len(self.entries)
        if len(self.lambdas) != len(self.entries):
            raise ContractError("one merge weight per adapter required")
        if mode == "token-wise":
            pos = [p for _, p in self.entries]
            if len(set(pos)) != len(pos):
                raise ContractError(f"duplicate token positions {pos} in token-wise mode")

    def __len__(self):
        return len(self.entries)

    def token_positions(self) -> list[int]:
        return [p for _, p in self.entries]

    @classmethod
    def bind(cls, adapters, prompt_positions: dict[str, list[int]], mode="token-wise", lambdas=None):
        """Attach each adapter to the first occurrence of its bound word."""
        entries = []
        for ad in adapters:
            if ad.word not in prompt_positions:
                raise ContractError(f"bound word {ad.word!r} of adapter {ad.name!r} not in prompt "
                                    f"tokens {sorted(prompt_positions)}")
            entries.append((ad, prompt_positions[ad.word][0]))
        return cls(entries, mode, lambdas)

    def _apply(self, target, M, c, block):
        active = [(a, p, lam) for (a, p), lam in zip(self.entries, self.lambdas) if target in a.weights]
        if not active:
            return M
        if self.mode == "merged":
            return _merged(M, active, c, block, target)
        return _token_wise(M, active, c, block, target)

    def value(self, block, V, c):
        return self._apply("value", V, c, block)

    def key(self, block, K, c):
        return self._apply("key", K, c, block)


def _token_wise(M, active, c, block, target):
    for adapter, pos, _ in active:
        if not 0 <= pos < M.shape[-2]:
            raise ContractError(f"token position {pos} outside prompt of length {M.shape[-2]}")
        c_i = T.take(c, [pos], axis=-2)
        M = T.index_add(M, [pos], adapter_forward(adapter, c_i, block, target), axis=-2)
    return M


def _merged(M, active, c, block, target):
    for adapter, _, lam in active:
        if lam == 0.0:
            continue
        M = T.add(M, T.scale(adapter_forward(adapter, c, block, target), lam))
    return M


def apply_token_wise(V, adapter_set: AdapterSet, c, block: int = 0) -> Tensor:
    """Add each adapter's output to the value row of its own token only."""
    if adapter_set.mode != "token-wise":
        raise ContractError("apply_token_wise needs a token-wise AdapterSet")
    V = V if isinstance(V, Tensor) else Tensor(V)
    c = c if isinstance(c, Tensor) else Tensor(c)
    return adapter_set.value(block, V, c)


def apply_merged(V, adapter_set: AdapterSet, c, block: int = 0) -> Tensor:
    """Add the lambda-weighted sum of all adapters' outputs to every value row."""
    V = V if isinstance(V, Tensor) else Tensor(V)
    c = c if isinstance(c, Tensor) else Tensor(c)
    active = [(a, p, lam) for (a, p), lam in zip(adapter_set.entries, adapter_set.lambdas)
              if "value" in a.weights]
    return _merged(V, active, c, block, "value")


# ------------------------------------------------------------------ training

def train_adapter(model: DenoiserModel, images, word: str, name: str | None = None,
                  variant: str = "value", iters: int = 300, lr: float = 5e-3, rank: int = 8,
                  batch_size: int = 4, seed: int = 0, ablation: bool = False,
                  templates=TEMPLATES, eval_size: int = 32) -> tuple[ConceptAdapter, dict]:
    """Fit a concept adapter on a few-shot image set with the base model frozen.

    Iteration ``k`` captions its batch with ``templates[k % len(templates)]``
    (prompt regularization); the adapter is routed to the bound word's row.
    History holds the concept-set loss on a fixed evaluation batch before and
    after training.
    """
    if variant != "value" and not ablation:
        raise ContractError(f"variant {variant!r} reproduces a pathology; pass ablation=True")
    if len(images) < 3:
        raise ContractError(f"need at least 3 concept images, got {len(images)}")
    adapter = ConceptAdapter.fresh(name or word, word, model, rank, variant, seed)
    params = adapter.parameters()
    opt = Adam(params, lr=lr)
    emb = model.embedder
    data = to_model_space(np.stack(images))

    ev_rng = np.random.default_rng([seed, 1 << 20])
    ev_idx = ev_rng.integers(0, len(data), size=eval_size)
    ev_caps = [templates[i % len(templates)].format(word) for i in range(eval_size)]
    ev_t = ev_rng.integers(0, model.config.train_timesteps, size=eval_size)
    ev_noise = ev_rng.standard_normal((eval_size,) + model.config.latent_shape)

    def concept_loss() -> float:
        total = 0.0
        for i in range(eval_size):
            hooks = AdapterSet.bind([adapter], emb.positions(ev_caps[i]))
            loss = diffusion_loss(model, data[ev_idx[i]:ev_idx[i] + 1], emb.encode(ev_caps[i])[None],
                                  ev_t[i:i + 1], ev_noise[i:i + 1], hooks)
            total += float(loss.data)
        return total / eval_size

    history = {"initial_loss": concept_loss(), "loss": []}
    for k in range(iters):
        caption = templates[k % len(templates)].format(word)
        rng = np.random.default_rng([seed, k])
        idx = rng.integers(0, len(data), size=batch_size)
        t = rng.integers(0, model.config.train_timesteps, size=batch_size)
        noise = rng.standard_normal((batch_size,) + model.config.latent_shape)
        c = np.broadcast_to(emb.encode(caption), (batch_size,) + emb.null().shape)
        hooks = AdapterSet.bind([adapter], emb.positions(caption))
        with Tape() as tape:
            tape.watch(*params.values())
            loss = diffusion_loss(model, data[idx], c, t, noise, hooks)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"adapter loss became {value} at iteration {k}")
        grads = T.backward(tape, loss)
        opt.step({n: grads[p.node_id] for n, p in params.items()})
        history["loss"].append(value)
    history["final_loss"] = concept_loss()
    adapter.meta = {"iters": iters, "lr": lr, "seed": seed,
                    "initial_loss": history["initial_loss"], "final_loss": history["final_loss"]}
    log.info("adapter %s: concept loss %.5f -> %.5f", adapter.name,
             history["initial_loss"], history["final_loss"])
    return adapter, history


# ------------------------------------------------------------------ database

class AdapterDB:
    """File-backed collection of concept adapters, addressed by concept name."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.adapters: dict[str, ConceptAdapter] = {}
        if self.path is not None and self.path.exists():
            self._read()

    def __contains__(self, name):
        return name in self.adapters

    def __getitem__(self, name) -> ConceptAdapter:
        try:
            return self.adapters[name]
        except KeyError:
            raise KeyError(f"no adapter named {name!r}; known: {sorted(self.adapters)}") from None

    def names(self) -> list[str]:
        return sorted(self.adapters)

    def put(self, adapter: ConceptAdapter, overwrite: bool = False) -> None:
        if adapter.name in self.adapters and not overwrite:
            raise ContractError(f"concept {adapter.name!r} already in database (use overwrite)")
        self.adapters[adapter.name] = adapter

    def listing(self) -> list[dict]:
        return [{"name": a.name, "word": a.word, "variant": a.variant, "rank": a.rank}
                for a in (self.adapters[n] for n in self.names())]

    def save(self, path=None) -> None:
        path = Path(path) if path is not None else self.path
        concepts, arrays = {}, {}
        for name, ad in self.adapters.items():
            concepts[name] = {"word": ad.word, "rank": ad.rank, "variant": ad.variant,
                              "blocks": len(next(iter(ad.weights.values()))), "meta": ad.meta}
            for key, t in ad.parameters().items():
                arrays[f"{name}/{key}"] = t.data
        save_container(path, {"kind": DB_KIND, "concepts": concepts}, arrays)

    def _read(self) -> None:
        cfg, arrays = load_container(self.path)
        if cfg.get("kind") != DB_KIND:
            raise ContractError(f"{self.path}: not an adapter database (kind={cfg.get('kind')!r})")
        for name, info in cfg["concepts"].items():
            weights = {}
            for target in VARIANTS[info["variant"]]:
                weights[target] = [
                    (Tensor(arrays[f"{name}/{target}/block{l}/A"], dtype=arrays[f"{name}/{target}/block{l}/A"].dtype),
                     Tensor(arrays[f"{name}/{target}/block{l}/B"], dtype=arrays[f"{name}/{target}/block{l}/B"].dtype))
                    for l in range(info["blocks"])
                ]
            self.adapters[name] = ConceptAdapter(name, info["word"], info["rank"], info["variant"],
                                                 weights, info.get("meta", {}))
