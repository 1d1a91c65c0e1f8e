"""Command-line entry point: ``conceptsplit <command> [options]``.

Commands: gen-data, train-base, train-adapter, infer, ablate, analyze.
Exit status is 0 on success, 2 on configuration errors and 3 on numeric
failure (NaN/inf).  Every command writes ``resolved_config.json`` into its
output directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from . import tensor as T
from .adapters import AdapterDB, train_adapter
from .analysis import export_map, write_ppm
from .config import ConfigError, inference_config, load, model_config, resolve
from .container import FormatError, save_container
from .data import (DEFAULT_CONCEPTS, PlacementError, gen_base_dataset, gen_concept_set, read_manifest,
                   write_manifest)
from .model import DenoiserModel
from .pipeline import (DiagnosticsError, build_report, infer_one, preset, read_diagnostics,
                       run_id, write_diagnostics)
from .rng import derive
from .tensor import ContractError
from .text import VocabularyError
from .train import NumericError, eval_loss, fixed_eval_batch, to_image_space, train_base

log = logging.getLogger("conceptsplit")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _out_dir(cfg: dict, sub: str | None = None) -> Path:
    out = Path(cfg["output_dir"])
    if sub:
        out = out / sub
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return out


def _overrides(args, mapping: dict) -> dict:
    """Nested override dict from argparse attributes that were actually given."""
    out: dict = {}
    for attr, dotted in mapping.items():
        val = getattr(args, attr, None)
        if val is None:
            continue
        node = out
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = val
    return out


def _config(args, mapping: dict) -> dict:
    user = load(args.config) if getattr(args, "config", None) else {}
    return resolve(user, _overrides(args, mapping))


def _load_model(cfg: dict) -> DenoiserModel:
    if "checkpoint" not in cfg:
        raise ConfigError("checkpoint: required (path to a trained base model)")
    path = Path(cfg["checkpoint"])
    if not path.exists():
        raise ConfigError(f"checkpoint: file {path} not found")
    return DenoiserModel.load(path).cast()


def _dataset(cfg: dict):
    ds = cfg.get("dataset")
    if ds is None:
        raise ConfigError("dataset: required for base training")
    if ds["kind"] == "manifest":
        if "path" not in ds:
            raise ConfigError("dataset.path: required when kind is 'manifest'")
        if not Path(ds["path"]).exists():
            raise ConfigError(f"dataset.path: manifest {ds['path']} not found")
        return read_manifest(ds["path"])
    scenes = _scenes(cfg, ds)
    return [s.canvas for s in scenes], [s.caption for s in scenes]


def _scenes(cfg: dict, ds: dict):
    try:
        return gen_base_dataset(ds.get("seed", 0), ds.get("count", 4000), tuple(ds.get("objects", [1, 2])),
                                cfg["model"]["height"], cfg["model"]["width"])
    except PlacementError as exc:
        raise ConfigError(f"dataset.objects: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    args.kind = "synthetic"   # gen-data only ever writes synthetic scenes
    cfg = _config(args, {"out": "output_dir", "kind": "dataset.kind", "seed": "dataset.seed",
                         "count": "dataset.count"})
    ds = cfg["dataset"]
    out = _out_dir(cfg)
    seed, count = ds.get("seed", 0), ds.get("count", 4000)
    scenes = _scenes(cfg, ds)
    seeds = [derive(seed, i) for i in range(count)]
    manifest = write_manifest(scenes, seeds, out)
    print(f"wrote {count} scenes to {manifest}")
    return 0


def cmd_train_base(args) -> int:
    cfg = _config(args, {"out": "output_dir", "steps": "train.steps", "seed": "train.seed",
                         "lr": "train.lr", "mode": "mode"})
    T.set_mode(cfg["mode"])
    images, captions = _dataset(cfg)
    out = _out_dir(cfg)
    opt_state = None
    if args.resume:
        model, saved, extras = DenoiserModel.load(args.resume, with_extras=True)
        model.cast()
        opt_state = extras
    else:
        model = DenoiserModel(model_config(cfg))
    tr = cfg["train"]
    batch = fixed_eval_batch(model, images, captions, seed=tr["seed"] + 7919)
    before = eval_loss(model, batch)
    model, hist = train_base(model, images, captions, tr["steps"], tr["lr"], tr["batch_size"],
                             tr["seed"], tr["cond_drop"], optimizer_state=opt_state)
    after = eval_loss(model, batch)
    opt = hist.pop("optimizer")
    ckpt = out / "checkpoint.csc"
    model.save(ckpt, extra={"train": tr}, arrays=opt.state())
    log_doc = {"steps_total": model.step, "heldout_loss_before": before, "heldout_loss_after": after,
               "history": hist, "config": cfg}
    (out / "train_log.json").write_text(json.dumps(log_doc, indent=1))
    print(f"checkpoint {ckpt} at step {model.step}; held-out loss {before:.5f} -> {after:.5f}")
    return 0


def cmd_train_adapter(args) -> int:
    cfg = _config(args, {"out": "output_dir", "checkpoint": "checkpoint", "db": "adapter_db",
                         "concept": "adapter.concept", "name": "adapter.name", "word": "adapter.word",
                         "variant": "adapter.variant", "rank": "adapter.rank", "iters": "adapter.iters",
                         "lr": "adapter.lr", "mode": "mode"})
    if "adapter_db" not in cfg:
        raise ConfigError("adapter_db: required (database file to create or extend)")
    db = AdapterDB(cfg["adapter_db"])
    if args.list:
        for row in db.listing():
            print(f"{row['name']}\tword={row['word']}\tvariant={row['variant']}\trank={row['rank']}")
        return 0
    ad_cfg = cfg["adapter"]
    concept = ad_cfg.get("concept")
    if concept not in DEFAULT_CONCEPTS:
        raise ConfigError(f"adapter.concept: {concept!r} is not a known concept "
                          f"({sorted(DEFAULT_CONCEPTS)})")
    variant = ad_cfg["variant"]
    if variant != "value" and not args.ablation:
        raise ConfigError(f"adapter.variant: {variant!r} is an ablation variant; pass --ablation")
    spec = DEFAULT_CONCEPTS[concept]
    name = ad_cfg.get("name") or (concept if variant == "value" else f"{concept}-{variant}")
    if name in db and not args.overwrite:
        raise ConfigError(f"adapter.name: concept {name!r} already in {cfg['adapter_db']} (use --overwrite)")
    T.set_mode(cfg["mode"])
    model = _load_model(cfg)
    images = gen_concept_set(spec, ad_cfg["images"], model.config.height, model.config.width)
    adapter, hist = train_adapter(model, images, ad_cfg.get("word", spec.word), name=name,
                                  variant=variant, iters=ad_cfg["iters"], lr=ad_cfg["lr"],
                                  rank=ad_cfg["rank"], batch_size=ad_cfg["batch_size"],
                                  seed=ad_cfg["seed"], ablation=args.ablation)
    db.put(adapter, overwrite=args.overwrite)
    db.save()
    out = _out_dir(cfg)
    (out / f"adapter_{name}_log.json").write_text(json.dumps(
        {"name": name, "variant": variant, "initial_loss": hist["initial_loss"],
         "final_loss": hist["final_loss"], "loss": hist["loss"]}, indent=1))
    print(f"stored {name!r} ({variant}, rank {adapter.rank}) in {cfg['adapter_db']}; "
          f"concept loss {hist['initial_loss']:.5f} -> {hist['final_loss']:.5f}")
    return 0


def _bindings(cfg: dict, db: AdapterDB | None, variant: str = "value"):
    adapters = []
    for concept, word in (cfg.get("bindings") or {}).items():
        name = concept if variant == "value" else f"{concept}-{variant}"
        if db is None or name not in db:
            raise ConfigError(f"bindings.{concept}: adapter {name!r} not found in database")
        ad = db[name]
        if ad.word != word:
            ad = type(ad)(ad.name, word, ad.rank, ad.variant, ad.weights, ad.meta)
        adapters.append(ad.cast(T.get_dtype()))
    return adapters


def _targets(cfg: dict) -> list[str]:
    if cfg.get("targets"):
        return list(cfg["targets"])
    words = list((cfg.get("bindings") or {}).values())
    if not words:
        raise ConfigError("targets: give target words (or bindings) to select attention tokens")
    return words


def _check_prompt(cfg: dict, model: DenoiserModel):
    prompt = cfg.get("prompt")
    if not prompt:
        raise ConfigError("prompt: required")
    try:
        model.embedder.token_ids(prompt)
    except VocabularyError as exc:
        raise ConfigError(f"prompt: {exc}") from None
    tokens = prompt.split()
    for w in _targets(cfg):
        if w not in tokens:
            raise ConfigError(f"bindings/targets: word {w!r} absent from prompt tokens {tokens}")
    return prompt


def _infer_mapping():
    return {"out": "output_dir", "checkpoint": "checkpoint", "db": "adapter_db", "prompt": "prompt",
            "seeds": "seeds", "mode": "mode", "N": "inference.N", "gamma": "inference.gamma",
            "p": "inference.p", "m": "inference.m", "tau": "inference.tau", "steps": "inference.steps",
            "guidance": "inference.guidance", "targets": "targets"}


def _parse_bind(values) -> dict | None:
    if not values:
        return None
    out = {}
    for item in values:
        if "=" not in item:
            raise ConfigError(f"bindings: expected CONCEPT=WORD, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def _run_mode(args) -> str:
    if args.no_loda:
        return "baseline"
    if args.stage1_only:
        return "stage1"
    return "full"


def cmd_infer(args) -> int:
    mapping = _infer_mapping()
    user = load(args.config) if args.config else {}
    ov = _overrides(args, mapping)
    bind = _parse_bind(args.bind)
    if bind is not None:
        ov["bindings"] = bind
    if args.no_adapters:
        ov["use_adapters"] = False
    if args.merged:
        ov["adapter_mode"] = "merged"
    if args.dump_maps:
        ov["dump_maps"] = True
    cfg = resolve(user, ov)
    T.set_mode(cfg["mode"])
    model = _load_model(cfg)
    prompt = _check_prompt(cfg, model)
    db = AdapterDB(cfg["adapter_db"]) if cfg.get("adapter_db") else None
    adapters = _bindings(cfg, db) if cfg["use_adapters"] else []
    mode = _run_mode(args)
    icfg = preset(inference_config(cfg), mode)
    cfg["run_mode"] = mode
    out = _out_dir(cfg)
    targets = _targets(cfg)
    summary = []
    for seed in cfg["seeds"]:
        res = infer_one(model, prompt, targets, seed, icfg, adapters, cfg["adapter_mode"])
        sdir = out / f"seed_{seed}"
        sdir.mkdir(exist_ok=True)
        header = {"run_id": run_id({"config": cfg, "seed": seed}), "config": cfg, "prompt": prompt,
                  "mode": mode}
        write_diagnostics(sdir / "diagnostics.jsonl", res, header)
        write_ppm(sdir / "image.ppm", to_image_space(res["latent"]))
        save_container(sdir / "latent.csc", {"kind": "latent", "seed": seed, "prompt": prompt},
                       {"latent": np.asarray(res["latent"])})
        if cfg["dump_maps"]:
            agg, masks = res["final"]["aggregate"], res["final"]["masks"]
            export_map([agg[..., j] for j in range(agg.shape[-1])], sdir / "attention.pgm")
            export_map([m.astype(float) for m in masks], sdir / "masks.pgm")
        summary.append({"seed": seed, "iou": res["iou"], "final_klh": res["final_klh"],
                        "entropy_delta": res["entropy_delta"]})
        print(f"seed {seed}: iou={res['iou']:.4f} klh={res['final_klh']:.4f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return 0


def cmd_ablate(args) -> int:
    user = load(args.config) if args.config else {}
    ov = _overrides(args, _infer_mapping())
    bind = _parse_bind(args.bind)
    if bind is not None:
        ov["bindings"] = bind
    if args.axis is not None:
        ov["ablate"] = {"axis": args.axis, "values": _axis_values(args.axis, args.values or [])}
    cfg = resolve(user, ov)
    if "ablate" not in cfg:
        raise ConfigError("ablate: give --axis and --values (or an 'ablate' config section)")
    T.set_mode(cfg["mode"])
    model = _load_model(cfg)
    prompt = _check_prompt(cfg, model)
    db = AdapterDB(cfg["adapter_db"]) if cfg.get("adapter_db") else None
    axis, values = cfg["ablate"]["axis"], cfg["ablate"]["values"]
    modes = cfg["ablate"].get("modes") or (["baseline", "full"] if axis == "variant" else ["full"])
    base_icfg = inference_config(cfg)
    targets = _targets(cfg)
    out = _out_dir(cfg)
    rows = []
    for value in values:
        adapters = []
        icfg = base_icfg
        if axis == "variant":
            adapters = _bindings(cfg, db, variant=value) if cfg["use_adapters"] else []
        else:
            from dataclasses import replace
            icfg = replace(base_icfg, **{axis: value})
            errs = icfg.validate()
            if errs:
                raise ConfigError([f"ablate.values ({axis}={value}): {e}" for e in errs])
            adapters = _bindings(cfg, db) if cfg["use_adapters"] else []
        for mode in modes:
            for seed in cfg["seeds"]:
                res = infer_one(model, prompt, targets, seed, preset(icfg, mode), adapters,
                                cfg["adapter_mode"])
                rows.append({"axis": axis, "value": value, "mode": mode, "seed": seed,
                             "iou": res["iou"], "final_klh": res["final_klh"],
                             "mean_entropy_delta": float(np.mean(res["entropy_delta"])),
                             "max_lkl": max((r.lkl or 0.0) for r in res["records"])})
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    (out / "sweep.json").write_text(json.dumps({"axis": axis, "values": values, "rows": rows}, indent=1))
    plotting.sweep_plot(rows, axis, "iou", out / "sweep_iou.png")
    plotting.sweep_plot(rows, axis, "mean_entropy_delta", out / "sweep_entropy.png")
    print(f"{len(rows)} rows written to {out / 'sweep.csv'}")
    return 0


def _axis_values(axis: str, raw: list[str]):
    if axis == "variant":
        return list(raw)
    if axis == "N":
        try:
            return [int(v) for v in raw]
        except ValueError:
            raise ConfigError(f"ablate.values: N values must be integers, got {raw}") from None
    try:
        return [float(v) for v in raw]
    except ValueError:
        raise ConfigError(f"ablate.values: {axis} values must be numbers, got {raw}") from None


def cmd_analyze(args) -> int:
    header, steps, final = read_diagnostics(args.diagnostics)
    out = Path(args.out) if args.out else Path(args.diagnostics).parent / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(header, steps)
    (out / "report.json").write_text(json.dumps(report, indent=1))
    with open(out / "entropy_delta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token", "mean_entropy_change"])
        for tok, val in report["entropy_delta"].items():
            w.writerow([tok, repr(val)])
    labels = report["tokens"]
    from .analysis import EntropySeries
    series = [EntropySeries(k, v["steps"], v["values"]) for k, v in report["entropy"].items()]
    plotting.entropy_curves(series, out / "entropy.png")
    plotting.iou_heatmap(report["iou"], labels, out / "iou.png")
    if final is not None:
        agg = np.asarray(final["aggregate"])
        masks = np.asarray(final["masks"])
        export_map([agg[..., j] for j in range(agg.shape[-1])], out / "attention.pgm")
        export_map([m.astype(float) for m in masks], out / "masks.pgm")
        plotting.map_grid([agg[..., j] for j in range(agg.shape[-1])], masks, labels, out / "maps.png")
    print(json.dumps(report["entropy_delta"]))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conceptsplit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", help="output directory (default: $CONCEPTSPLIT_OUT or ./runs)")
        sp.add_argument("--mode", choices=["fast", "verify"], help="numeric mode")

    g = sub.add_parser("gen-data", help="write the synthetic base dataset and manifest")
    common(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-base", help="train the toy denoiser")
    common(t)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train_base)

    a = sub.add_parser("train-adapter", help="train a concept adapter into an adapter database")
    common(a)
    a.add_argument("--checkpoint")
    a.add_argument("--db")
    a.add_argument("--concept", help=f"one of {sorted(DEFAULT_CONCEPTS)}")
    a.add_argument("--name")
    a.add_argument("--word")
    a.add_argument("--variant", choices=["value", "key", "key+value"])
    a.add_argument("--rank", type=int)
    a.add_argument("--iters", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--ablation", action="store_true", help="allow key-modifying variants")
    a.add_argument("--overwrite", action="store_true")
    a.add_argument("--list", action="store_true", help="list database contents and exit")
    a.set_defaults(func=cmd_train_adapter)

    def infer_args(sp):
        common(sp)
        sp.add_argument("--checkpoint")
        sp.add_argument("--db")
        sp.add_argument("--prompt")
        sp.add_argument("--bind", nargs="+", metavar="CONCEPT=WORD")
        sp.add_argument("--targets", nargs="+", metavar="WORD")
        sp.add_argument("--seeds", nargs="+", type=int)
        sp.add_argument("--N", type=int)
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--p", type=float)
        sp.add_argument("--m", type=float)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--guidance", type=float)

    i = sub.add_parser("infer", help="sample with adapters and optional LODA")
    infer_args(i)
    lo = i.add_mutually_exclusive_group()
    lo.add_argument("--no-loda", action="store_true", help="plain sampling")
    lo.add_argument("--stage1-only", action="store_true", help="latent optimization without AFG")
    lo.add_argument("--afg", action="store_true", help="stage 1 followed by AFG (default)")
    i.add_argument("--no-adapters", action="store_true")
    i.add_argument("--merged", action="store_true", help="merged-adapter baseline")
    i.add_argument("--dump-maps", action="store_true", help="write attention/mask PGMs")
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("ablate", help="sweep one hyperparameter over seeds")
    infer_args(s)
    s.add_argument("--axis", choices=["gamma", "p", "m", "N", "variant"])
    s.add_argument("--values", nargs="+")
    s.set_defaults(func=cmd_ablate)

    z = sub.add_parser("analyze", help="entropy/IoU report from a diagnostics file")
    z.add_argument("diagnostics")
    z.add_argument("--out")
    z.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, FormatError, DiagnosticsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
