import json
import shutil

import pytest
from click.testing import CliRunner

from mixq.cli import main
from mixq.pipeline import STAGES, strip_timings

TINY = {
    "seed": 5,
    "model": {"num_blocks": 1, "embed_dim": 8, "heads": 2, "mlp_dim": 16, "classes": 3,
              "patch_size": 4, "image_height": 8, "image_width": 8, "channels": 3},
    "dataset": {"train": 64, "eval": 32, "blob_radius": 1.5, "jitter": 0.5},
    "train": {"epochs": 1, "batch_size": 32},
    "calibration": {"samples": 8},
    "lrp": {"samples": 8, "batch_size": 8},
    "qsa": {"baseline_bits": 4, "candidate_bits": [2, 4], "samples": 8},
    "allocator": {"bits": [2, 4], "b_fixed": 4},
}


def invoke(config, out, *args, stage_cache=None):
    argv = ["--config", str(config), "--out", str(out)]
    if stage_cache is not None:
        argv += ["--stage-cache", str(stage_cache)]
    return CliRunner().invoke(main, argv + list(args))


def error_line(result):
    lines = result.stderr.strip().splitlines()
    return lines[-1]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "out"
    for stage in STAGES:
        res = invoke(cfg, out, stage)
        assert res.exit_code == 0, res.output
        assert res.stdout.strip().endswith(f"ok {stage}")
    return root, cfg, out


def test_full_chain_writes_artifacts(tiny_run):
    _, _, out = tiny_run
    report = json.loads((out / "report.json").read_text())
    assert report["format"] == "mixq-run-report" and report["seed"] == 5
    for name in ("importance_heatmap.csv", "sensitivity.csv", "allocation.csv", "importance.txt"):
        assert (out / name).exists()
    ev = report["evaluation"]
    assert set(ev) >= {"fp", "fixed", "mixed", "budget_ratio"}
    assert ev["mixed"]["size_bits"] <= ev["fixed"]["size_bits"]
    assert ev["mixed"]["bitops"] <= ev["fixed"]["bitops"]
    for stage in STAGES[:-1]:
        man = json.loads((out / "stages" / stage / "manifest.json").read_text())
        assert man["stage"] == stage and len(man["hash"]) == 16


def test_rerun_is_deterministic(tiny_run):
    root, cfg, out = tiny_run
    again = root / "again"
    for stage in STAGES:
        assert invoke(cfg, again, stage).exit_code == 0
    a = json.loads((out / "report.json").read_text())
    b = json.loads((again / "report.json").read_text())
    assert strip_timings(a) == strip_timings(b)
    for split in ("train", "eval"):
        assert ((out / "stages/synth-data" / f"{split}.bin").read_bytes()
                == (again / "stages/synth-data" / f"{split}.bin").read_bytes())


def test_missing_upstream_exits_3(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    res = invoke(cfg, tmp_path / "out", "calibrate")
    assert res.exit_code == 3
    line = error_line(res)
    assert line.startswith("error E_MISSING_ARTIFACT:") and "mixq synth-data" in line


def test_stale_upstream_exits_3(tiny_run, tmp_path):
    _, _, out = tiny_run
    changed = dict(TINY, train={"epochs": 2, "batch_size": 32})
    cfg = tmp_path / "changed.json"
    cfg.write_text(json.dumps(changed))
    res = invoke(cfg, tmp_path / "o", "calibrate", stage_cache=out / "stages")
    assert res.exit_code == 3
    assert error_line(res).startswith("error E_HASH_MISMATCH:")


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"allocator": {"b_fixed": 7}}))
    res = invoke(bad, tmp_path / "o", "synth-data")
    assert res.exit_code == 2
    assert error_line(res).startswith("error E_CONFIG:")
    res = CliRunner().invoke(main, ["--ablation", "nope", "synth-data"])
    assert res.exit_code == 2 and error_line(res).startswith("error E_CONFIG:")
    res = CliRunner().invoke(main, ["--config", str(tmp_path / "none.json"), "synth-data"])
    assert res.exit_code == 2


def test_infeasible_budget_exits_4(tiny_run, tmp_path):
    _, _, out = tiny_run
    cache = tmp_path / "stages"
    shutil.copytree(out / "stages", cache)
    doc = dict(TINY, allocator=dict(TINY["allocator"], budget={"size": 1, "bitops": 1}))
    cfg = tmp_path / "tight.json"
    cfg.write_text(json.dumps(doc))
    res = invoke(cfg, tmp_path / "o", "allocate", stage_cache=cache)
    assert res.exit_code == 4
    assert error_line(res).startswith("error E_INFEASIBLE:")


def test_omega_only_ablation(tiny_run, tmp_path):
    _, cfg, out = tiny_run
    cache = tmp_path / "stages"
    shutil.copytree(out / "stages", cache)
    for stage in ("allocate", "quantize", "eval", "report"):
        res = CliRunner().invoke(main, [
            "--config", str(cfg), "--out", str(tmp_path / "o"), "--stage-cache", str(cache),
            "--ablation", "omega-only", stage])
        assert res.exit_code == 0, res.output
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["allocation"]["ablation"] == "omega-only"
    assert report["allocation"]["instance"]["lambda"] == []


def test_seed_override_changes_hash(tiny_run, tmp_path):
    _, cfg, out = tiny_run
    res = CliRunner().invoke(main, ["--config", str(cfg), "--seed", "6", "--out",
                                    str(tmp_path / "o"), "--stage-cache", str(out / "stages"),
                                    "calibrate"])
    assert res.exit_code == 3


def test_help_lists_every_stage():
    res = CliRunner().invoke(main, ["--help"])
    assert res.exit_code == 0
    for stage in STAGES:
        assert stage in res.output
