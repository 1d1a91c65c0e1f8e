"""Glue between trained artifacts and the sampler: one inference run, its metrics,
and the diagnostics file format."""
from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adapters import AdapterSet
from .analysis import entropy_delta, entropy_series_from_records
from .loda import InferenceConfig, loda_sample
from .model import DenoiserModel, initial_latent

DIAG_SCHEMA = "conceptsplit.diagnostics"
DIAG_VERSION = 1
REPORT_SCHEMA = "conceptsplit.report"
REPORT_VERSION = 1

MODES = ("baseline", "stage1", "full")


def preset(config: InferenceConfig, mode: str) -> InferenceConfig:
    """Named run variants: no LODA, stage 1 alone, stage 1 followed by AFG."""
    if mode == "baseline":
        return replace(config, N=0, stage1=False, afg=False)
    if mode == "stage1":
        return replace(config, afg=False)
    if mode == "full":
        return replace(config, afg=True)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def target_positions(model: DenoiserModel, prompt: str, words) -> list[int]:
    pos = model.embedder.positions(prompt)
    missing = [w for w in words if w not in pos]
    if missing:
        raise ValueError(f"target words {missing} absent from prompt tokens {prompt.split()}")
    return [pos[w][0] for w in words]


def run_id(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def infer_one(model: DenoiserModel, prompt: str, target_words, seed: int, config: InferenceConfig,
              adapters=(), adapter_mode: str = "token-wise", keep_maps: bool = False) -> dict:
    """Sample one seed and collect everything the reports need."""
    S = target_positions(model, prompt, target_words)
    hooks = None
    if adapters:
        hooks = AdapterSet.bind(adapters, model.embedder.positions(prompt), mode=adapter_mode)
    z_T = initial_latent(seed, model.config.latent_shape, model.dtype)
    z0, records, final = loda_sample(model, z_T, prompt, S, config, hooks, keep_maps=keep_maps)
    k = len(S)
    iou = records[-1].iou
    pair = [iou[i][j] for i in range(k) for j in range(i + 1, k)]
    series = entropy_series_from_records([r.to_json() for r in records], target_words)
    return {
        "seed": seed,
        "latent": z0,
        "records": records,
        "final": final,
        "tokens": S,
        "words": list(target_words),
        "iou": float(np.mean(pair)) if pair else None,
        "nonempty": all(c > 0 for c in records[-1].mask_counts),
        "entropy_delta": [entropy_delta(s) for s in series],
        "final_klh": records[-1].klh,
    }


def write_diagnostics(path, result: dict, header: dict) -> Path:
    """JSON lines: a header with the resolved config, one record per step, a final record."""
    path = Path(path)
    lines = [json.dumps({"type": "header", "schema": DIAG_SCHEMA, "version": DIAG_VERSION,
                         "tokens": result["tokens"], "words": result["words"],
                         "seed": result["seed"], **header}, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in result["records"]]
    final = result["final"]
    lines.append(json.dumps({"type": "final", "aggregate": np.asarray(final["aggregate"]).tolist(),
                             "masks": np.asarray(final["masks"]).astype(int).tolist()},
                            sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    return path


class DiagnosticsError(ValueError):
    pass


def read_diagnostics(path) -> tuple[dict, list[dict], dict | None]:
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise DiagnosticsError(f"{path}: empty diagnostics file")
    header, steps, final = None, [], None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DiagnosticsError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(rec, dict) or "type" not in rec:
            raise DiagnosticsError(f"{path}:{lineno}: record without a type field")
        kind = rec["type"]
        if kind == "header":
            if rec.get("schema") != DIAG_SCHEMA:
                raise DiagnosticsError(f"{path}:{lineno}: unknown schema {rec.get('schema')!r}")
            if rec.get("version", 0) > DIAG_VERSION:
                raise DiagnosticsError(f"{path}:{lineno}: diagnostics version {rec['version']} "
                                       f"is newer than supported {DIAG_VERSION}")
            header = rec
        elif kind == "step":
            for key in ("step", "entropy", "iou", "mask_counts"):
                if key not in rec:
                    raise DiagnosticsError(f"{path}:{lineno}: step record missing {key!r}")
            steps.append(rec)
        elif kind == "final":
            final = rec
        else:
            raise DiagnosticsError(f"{path}:{lineno}: unknown record type {kind!r}")
    if header is None:
        raise DiagnosticsError(f"{path}: no header record")
    if not steps:
        raise DiagnosticsError(f"{path}: no step records")
    return header, steps, final


def build_report(header: dict, steps: list[dict]) -> dict:
    labels = header.get("words") or [str(t) for t in header["tokens"]]
    series = entropy_series_from_records(steps, labels)
    return {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "run_id": header.get("run_id"),
        "tokens": labels,
        "entropy": {s.label: {"steps": s.steps, "values": s.values} for s in series},
        "entropy_delta": {s.label: (entropy_delta(s) if len(s) >= 2 else None) for s in series},
        "iou": steps[-1]["iou"],
    }
