import csv
import json

import numpy as np
import pytest

from conceptsplit.cli import main
from conceptsplit.container import load_container
from conceptsplit.model import DenoiserModel
from conceptsplit.pipeline import DIAG_VERSION, REPORT_VERSION, read_diagnostics

TINY = {"model": {"height": 8, "width": 8, "dim": 16, "text_dim": 8, "attn_dim": 8, "value_dim": 8,
                  "blocks": 2},
        "dataset": {"kind": "synthetic", "count": 40, "objects": [1]},
        "train": {"steps": 4, "batch_size": 4},
        "adapter": {"iters": 3, "images": 4, "batch_size": 2},
        "inference": {"steps": 4, "N": 1}}

PROMPT = ["--prompt", "a square and a circle"]
BIND = ["--bind", "orange_checker_square=square", "purple_striped_circle=circle"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train-base", "--config", str(cfg), "--out", str(root / "base")]) == 0
    ckpt = root / "base" / "checkpoint.csc"
    for concept in ("orange_checker_square", "purple_striped_circle"):
        assert main(["train-adapter", "--config", str(cfg), "--checkpoint", str(ckpt),
                     "--db", str(root / "db.csc"), "--concept", concept, "--out", str(root / "ad")]) == 0
    return root, cfg, ckpt


def _infer(ws, out, *extra):
    root, cfg, ckpt = ws
    return main(["infer", "--config", str(cfg), "--checkpoint", str(ckpt), "--db", str(root / "db.csc"),
                 "--out", str(root / out), *PROMPT, *BIND, *extra])


def test_train_base_outputs(workspace):
    root, _, ckpt = workspace
    log = json.loads((root / "base" / "train_log.json").read_text())
    assert log["steps_total"] == 4
    assert json.loads((root / "base" / "resolved_config.json").read_text())["train"]["steps"] == 4
    assert DenoiserModel.load(ckpt).config.height == 8


def test_train_base_is_reproducible(workspace, tmp_path):
    _, cfg, ckpt = workspace
    assert main(["train-base", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    _, a = load_container(ckpt)
    _, b = load_container(tmp_path / "checkpoint.csc")
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_resume_continues_step_count(workspace, tmp_path):
    _, cfg, ckpt = workspace
    assert main(["train-base", "--config", str(cfg), "--out", str(tmp_path), "--resume", str(ckpt)]) == 0
    assert DenoiserModel.load(tmp_path / "checkpoint.csc").step == 8


def test_missing_dataset_is_config_error(tmp_path, capsys):
    assert main(["train-base", "--out", str(tmp_path)]) == 2
    assert "dataset" in capsys.readouterr().err


def test_adapter_db_listing_and_guards(workspace, capsys):
    root, cfg, ckpt = workspace
    db = str(root / "db.csc")
    assert main(["train-adapter", "--db", db, "--list"]) == 0
    out = capsys.readouterr().out
    assert "orange_checker_square\tword=square\tvariant=value\trank=8" in out
    args = ["train-adapter", "--config", str(cfg), "--checkpoint", str(ckpt), "--db", db,
            "--out", str(root / "ad")]
    assert main(args + ["--concept", "orange_checker_square"]) == 2
    assert "--overwrite" in capsys.readouterr().err
    assert main(args + ["--concept", "orange_checker_square", "--variant", "key"]) == 2
    assert main(args + ["--concept", "orange_checker_square", "--variant", "key", "--ablation"]) == 0
    main(["train-adapter", "--db", db, "--list"])
    assert "orange_checker_square-key\tword=square\tvariant=key" in capsys.readouterr().out


def test_infer_outputs_and_analyze(workspace):
    root = workspace[0]
    assert _infer(workspace, "inf", "--seeds", "0", "1", "--dump-maps") == 0
    sdir = root / "inf" / "seed_0"
    for name in ("diagnostics.jsonl", "image.ppm", "latent.csc", "attention.pgm", "masks.pgm"):
        assert (sdir / name).exists(), name
    header, steps, final = read_diagnostics(sdir / "diagnostics.jsonl")
    assert header["version"] == DIAG_VERSION and header["config"]["prompt"] == "a square and a circle"
    assert [s["stage1"] for s in steps] == [True, False, False, False]
    assert np.asarray(final["masks"]).shape == (2, 8, 8)
    assert main(["analyze", str(sdir / "diagnostics.jsonl"), "--out", str(root / "rep")]) == 0
    report = json.loads((root / "rep" / "report.json").read_text())
    assert report["version"] == REPORT_VERSION
    iou = report["iou"]
    assert len(iou) == 2 and iou[0][0] == 1.0 and iou[1][1] == 1.0
    for name in ("entropy.png", "iou.png", "maps.png", "entropy_delta.csv", "masks.pgm"):
        assert (root / "rep" / name).exists(), name
    rows = list(csv.reader(open(root / "rep" / "entropy_delta.csv")))
    assert rows[0] == ["token", "mean_entropy_change"] and [r[0] for r in rows[1:]] == ["square", "circle"]


def test_infer_is_deterministic_in_verify_mode(workspace):
    root = workspace[0]
    assert _infer(workspace, "v1", "--mode", "verify") == 0
    assert _infer(workspace, "v1b", "--mode", "verify") == 0
    a = (root / "v1" / "seed_0" / "diagnostics.jsonl").read_text()
    b = (root / "v1b" / "seed_0" / "diagnostics.jsonl").read_text()
    # the header embeds the output directory; everything else must match
    strip = lambda s: [l for l in s.splitlines() if '"type": "header"' not in l]
    assert strip(a) == strip(b)


@pytest.mark.parametrize("flags,mode", [(["--no-loda", "--no-adapters"], "baseline"),
                                        (["--stage1-only"], "stage1"), (["--merged"], "full")])
def test_infer_mode_flags(workspace, flags, mode):
    root = workspace[0]
    out = "m_" + mode + str(len(flags))
    assert _infer(workspace, out, *flags) == 0
    cfg = json.loads((root / out / "resolved_config.json").read_text())
    assert cfg["run_mode"] == mode
    if "--merged" in flags:
        assert cfg["adapter_mode"] == "merged"


def test_bound_word_absent_lists_tokens(workspace, capsys):
    root, cfg, ckpt = workspace
    code = main(["infer", "--config", str(cfg), "--checkpoint", str(ckpt), "--db", str(root / "db.csc"),
                 "--out", str(root / "bad"), "--prompt", "a square and a triangle", *BIND])
    assert code == 2
    err = capsys.readouterr().err
    assert "circle" in err and "'triangle'" in err


def test_ablate_writes_tables(workspace):
    root, cfg, ckpt = workspace
    base = ["ablate", "--config", str(cfg), "--checkpoint", str(ckpt), "--db", str(root / "db.csc"),
            *PROMPT, *BIND]
    assert main(base + ["--out", str(root / "ab"), "--axis", "gamma", "--values", "0.5", "0.9",
                        "--seeds", "0", "1"]) == 0
    rows = list(csv.DictReader(open(root / "ab" / "sweep.csv")))
    assert len(rows) == 4 and {r["value"] for r in rows} == {"0.5", "0.9"}
    assert (root / "ab" / "sweep_iou.png").exists()
    doc = json.loads((root / "ab" / "sweep.json").read_text())
    assert doc["axis"] == "gamma" and len(doc["rows"]) == 4
    assert main(base + ["--out", str(root / "ab1"), "--axis", "N", "--values", "0"]) == 0
    assert len(list(csv.DictReader(open(root / "ab1" / "sweep.csv")))) == 1
    assert main(base + ["--out", str(root / "ab2"), "--axis", "N", "--values", "1.5"]) == 2


def test_analyze_errors(tmp_path, capsys):
    p = tmp_path / "d.jsonl"
    p.write_text("")
    assert main(["analyze", str(p)]) == 2
    p.write_text('{"type": "header", "schema": "conceptsplit.diagnostics", "version": 1}\n{oops\n')
    assert main(["analyze", str(p)]) == 2
    assert ":2:" in capsys.readouterr().err
    p.write_text('{"type": "header", "schema": "conceptsplit.diagnostics", "version": 99}\n')
    assert main(["analyze", str(p)]) == 2
    assert "newer" in capsys.readouterr().err


def test_numeric_failure_exit_code(workspace, tmp_path):
    root, cfg, ckpt = workspace
    model = DenoiserModel.load(ckpt)
    model.params["block0/cross/Wq"].data[:] = np.nan
    model.save(tmp_path / "nan.csc")
    with np.errstate(all="ignore"):
        code = main(["infer", "--config", str(cfg), "--checkpoint", str(tmp_path / "nan.csc"),
                     "--out", str(tmp_path / "o"), *PROMPT, "--targets", "square", "circle",
                     "--no-adapters"])
    assert code == 3


def test_canvas_too_small_is_config_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "dataset": {"kind": "synthetic", "count": 4}}))
    assert main(["train-base", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_gen_data_manifest(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--count", "5"]) == 0
    entries = json.loads((tmp_path / "manifest.json").read_text())
    assert len(entries) == 5 and entries[0]["file"].startswith("images.csc:")
