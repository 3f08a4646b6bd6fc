import json
from pathlib import Path

import numpy as np
import pytest

from ffcac.cli import main, stats_report
from ffcac.config import RunConfig
from ffcac.errors import InvalidConfig, RequiresTwoMethods
from ffcac.frontend import FrontendConfig, load_manifest, random_classes
from ffcac.stats import MethodResults, average_accuracy
from ffcac.utils import read_jsonl


def small_spec(n, prefix, seed):
    classes = random_classes(np.geomspace(200, 1600, n), prefix, seed)
    return {"classes": [{"label": c.label, "fundamental": c.fundamental,
                         "harmonic_weights": list(c.harmonic_weights), "noise_level": c.noise_level}
                        for c in classes],
            "clip_len_s": 0.2, "clips_per_class": 6, "seed": seed}


def shrink(config_path: Path):
    """Turn a generated config into one a test can run in seconds."""
    doc = json.loads(config_path.read_text())
    frames = FrontendConfig(clip_len_s=0.2).n_frames(16000)
    doc["frontend"]["n_mels"] = 16
    doc["encoder"].update(n_mels=16, n_frames=frames, patch_h=8, patch_w=8, model_dim=8, depth=2, n_heads=2)
    doc["protocol"].update(M=3, N=2, K=2, test_per_class=3, repeats=2)
    doc["training"]["epochs"] = 2
    doc["reconstruction"]["samples_per_class"] = 4
    doc["pretrain"].update(epochs=2, batch_size=8)
    config_path.write_text(json.dumps(doc))
    return config_path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"protocol": small_spec(8, "p", 1), "pretrain": small_spec(4, "q", 2)}))
    assert main(["generate", "--spec", str(spec), "--out", str(root / "data")]) == 0
    cfg = shrink(root / "data" / "config.json")
    assert main(["pretrain", "--config", str(cfg)]) == 0
    return root, cfg


# ---------------------------------------------------------------- config documents


def test_config_defaults_and_digest():
    cfg = RunConfig()
    assert cfg.encoder.n_frames == cfg.frontend.n_frames(16000)
    assert cfg.digest() == RunConfig.from_dict(cfg.to_dict()).digest()
    assert cfg.digest() != cfg.with_values("training", lam=0.5).digest()
    # output location does not change results
    assert cfg.digest() == cfg.with_values("output", name="elsewhere").digest()


def test_config_rejects_unknown(tmp_path):
    with pytest.raises(InvalidConfig, match="unknown config section"):
        RunConfig.from_dict({"optimiser": {}})
    with pytest.raises(InvalidConfig, match="lr"):
        RunConfig.from_dict({"training": {"lr": 0.1}})
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict({"protocol": {"M": 0}})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(InvalidConfig, match="invalid JSON"):
        RunConfig.load(bad)
    with pytest.raises(InvalidConfig, match="not found"):
        RunConfig.load(tmp_path / "missing.json")


def test_config_load_resolves_relative_paths(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"data": {"protocol_manifest": "p/manifest.jsonl"},
                                                  "output": {"root": "out"}}))
    cfg = RunConfig.load(tmp_path / "c.json")
    assert cfg.data.protocol_manifest == str((tmp_path / "p/manifest.jsonl").resolve())
    assert cfg.output.resolved_root() == (tmp_path / "out").resolve()


def test_output_root_from_environment(monkeypatch):
    monkeypatch.setenv("FFCAC_OUTPUT_ROOT", "/somewhere")
    assert RunConfig().output.resolved_root() == Path("/somewhere")


# ---------------------------------------------------------------- generate


def test_generate_default_preset(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
    entries = load_manifest(tmp_path / "a" / "protocol" / "manifest.jsonl")
    assert len(entries) == 25 * 40 and len({e.label for e in entries}) == 25
    assert len(load_manifest(tmp_path / "a" / "pretrain" / "manifest.jsonl")) == 15 * 40
    cfg = RunConfig.load(tmp_path / "a" / "config.json")
    assert Path(cfg.data.protocol_manifest).is_file()


def test_generate_same_seed_same_bytes(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps(small_spec(3, "x", 0)))
    for name in ("a", "b"):
        assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / name), "--seed", "9"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 3 * 6 + 3
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)


@pytest.mark.parametrize("patch,field", [
    ({"clips_per_class": 0}, "clips_per_class"),
    ({"bogus": 1}, "bogus"),
    ({"f0_jitter": 0.7}, "f0_jitter"),
])
def test_generate_malformed_spec(tmp_path, capsys, patch, field):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({**small_spec(2, "x", 0), **patch}))
    assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 1
    assert field in capsys.readouterr().err


def test_generate_missing_class_field(tmp_path, capsys):
    doc = small_spec(2, "x", 0)
    del doc["classes"][1]["fundamental"]
    (tmp_path / "s.json").write_text(json.dumps(doc))
    assert main(["generate", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == 1
    assert "classes.fundamental" in capsys.readouterr().err


# ---------------------------------------------------------------- pretrain / run / bench


def test_pretrain_outputs(workspace):
    root, cfg = workspace
    ckpt = root / "data" / "pretrained.ckpt"
    assert ckpt.is_file() and (root / "data" / "pretrained.log.jsonl").is_file()
    assert len(read_jsonl(root / "data" / "pretrained.log.jsonl")) == 2


def test_pretrain_refuses_overwrite(workspace, capsys):
    root, cfg = workspace
    before = (root / "data" / "pretrained.ckpt").read_bytes()
    assert main(["pretrain", "--config", str(cfg)]) == 1
    assert "--force" in capsys.readouterr().err
    assert (root / "data" / "pretrained.ckpt").read_bytes() == before


def test_pretrain_force_is_reproducible(workspace):
    root, cfg = workspace
    before = (root / "data" / "pretrained.ckpt").read_bytes()
    assert main(["pretrain", "--config", str(cfg), "--force"]) == 0
    assert (root / "data" / "pretrained.ckpt").read_bytes() == before


def test_run_dry_run(workspace, capsys):
    _, cfg = workspace
    assert main(["run", "--config", str(cfg), "--dry-run", "--variant", "F_ONLY"]) == 0
    out = capsys.readouterr().out
    assert '"variant": "F_ONLY"' in out and "digest " in out


def test_run_writes_artifacts(workspace, tmp_path):
    _, cfg = workspace
    assert main(["run", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "r")]) == 0
    rec = read_jsonl(tmp_path / "r" / "report.jsonl")[0]
    assert rec["complete"] and len(rec["accuracies"]) == 3
    assert rec["aa"] == pytest.approx(average_accuracy(rec["accuracies"]), abs=1e-12)
    assert RunConfig.load(tmp_path / "r" / "config.json").digest() == rec["config_digest"]
    for m in range(3):
        assert (tmp_path / "r" / f"session_{m}" / "class_stats.bin").is_file()


def test_run_missing_manifest(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"data": {"protocol_manifest": "nope.jsonl"}}))
    assert main(["run", "--config", str(tmp_path / "c.json")]) == 1
    assert "manifest not found" in capsys.readouterr().err


def test_bench_stats_report(workspace, tmp_path, capsys):
    _, cfg = workspace
    ede, ft = tmp_path / "ede.jsonl", tmp_path / "ft.jsonl"
    assert main(["bench", "--config", str(cfg), "--repeats", "3", "--out", str(ede)]) == 0
    assert main(["bench", "--config", str(cfg), "--repeats", "3", "--method", "finetune", "--out", str(ft)]) == 0
    rows = read_jsonl(ede)
    assert [r["repeat"] for r in rows] == [0, 1, 2] and {r["method"] for r in rows} == {"P_PLUS_EXPANDED_F"}
    assert [r["seed"] for r in rows] == [0, 1, 2]
    capsys.readouterr()

    assert main(["stats", "--inputs", str(ede), str(ft), "--out", str(tmp_path / "s.json")]) == 0
    assert "Friedman chi2" in capsys.readouterr().out
    rep = json.loads((tmp_path / "s.json").read_text())
    assert rep["methods"] == ["P_PLUS_EXPANDED_F", "FINETUNE"] and rep["observations"] == 3

    assert main(["report", "--run", str(ede), "--delimiter", ","]) == 0
    line = capsys.readouterr().out.splitlines()[1].split(",")
    assert line[0] == "P_PLUS_EXPANDED_F"
    assert float(line[-1].split("±")[0]) == pytest.approx(100 * np.mean([r["aa"] for r in rows]), abs=0.005)


def test_stats_needs_two_inputs(tmp_path, capsys):
    f = tmp_path / "a.jsonl"
    f.write_text(json.dumps({"method": "a", "repeat": 0, "accuracies": [0.5]}) + "\n")
    assert main(["stats", "--inputs", str(f)]) == 1
    assert "two methods" in capsys.readouterr().err


def test_stats_identical_inputs_no_significance():
    r = MethodResults("a", np.random.default_rng(0).uniform(size=(10, 5)))
    rep = stats_report([r, MethodResults("a#2", r.accuracies.copy())])
    assert rep["significant_pairs"] == [] and rep["friedman"]["chi2"] == 0.0
    assert rep["sign_tests"]["a > a#2"]["non_tied"] == 0
    with pytest.raises(RequiresTwoMethods):
        stats_report([r])


def test_stats_duplicate_names_are_suffixed(tmp_path):
    f = tmp_path / "a.jsonl"
    f.write_text("".join(json.dumps({"method": "a", "repeat": i, "accuracies": [0.5, 0.6 + i / 10]}) + "\n"
                         for i in range(3)))
    out = tmp_path / "s.json"
    assert main(["stats", "--inputs", str(f), str(f), "--per-session", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["methods"] == ["a", "a#2"] and rep["observations"] == 6
