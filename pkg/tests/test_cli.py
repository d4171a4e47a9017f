import json
import subprocess
import sys

import pytest
import yaml

from mkws.cli import main
from mkws.net import build_base, save_checkpoint


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_lab_is_deterministic(tmp_path):
    assert main(["gen-lab", "--records", "12", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-lab", "--records", "12", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a.keys() == b.keys()
    diff = [k for k in a if a[k] != b[k] and k != "resolved_config.yaml"]
    assert diff == []
    rows = (tmp_path / "a" / "manifest.jsonl").read_text().splitlines()
    assert len(rows) == 12
    resolved = yaml.safe_load((tmp_path / "a" / "resolved_config.yaml").read_text())
    assert resolved["records"] == 12 and resolved["seed"] == 7 and resolved["command"] == "gen-lab"


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"seed": 3, "gen-lab": {"records": 6, "out": str(tmp_path / "c")}}))
    assert main(["gen-lab", "--config", str(cfg), "--records", "8"]) == 0
    resolved = yaml.safe_load((tmp_path / "c" / "resolved_config.yaml").read_text())
    assert resolved["records"] == 8 and resolved["seed"] == 3


def test_config_errors_exit_2(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump({"gen-lab": {"recrods": 6}}))
    assert main(["gen-lab", "--config", str(cfg)]) == 2
    assert main(["train-base", "--scale", "galaxy", "--data", str(tmp_path)]) in (2, 3)
    assert main(["gen-train", "--splits", "train,holdout", "--out", str(tmp_path / "g")]) == 2


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["gen-lab", "--no-such-flag", "1"])
    assert exc.value.code != 0


def test_missing_files_exit_3(tmp_path):
    assert main(["calibrate", "--model", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "o")]) == 3
    assert main(["gen-lab", "--config", str(tmp_path / "none.yaml")]) == 3
    assert main(["export-plots", "--run", str(tmp_path / "nowhere")]) == 3
    assert main(["compare", "--models", str(tmp_path)]) == 3


def test_unreachable_target_exits_4(tmp_path, easy_corpus):
    net = build_base("desk", seed=0)
    params = net.parameters()
    params["out.w"][:] = 0.0
    params["out.b"][:] = 60.0  # posterior pinned at 1 on every frame
    save_checkpoint(tmp_path / "base.ckpt", net, {"approach": "base", "channel": "omni"})
    code = main(["calibrate", "--model", str(tmp_path / "base.ckpt"), "--dev", str(easy_corpus.root),
                 "--out", str(tmp_path / "cal")])
    assert code == 4
    result = json.loads((tmp_path / "cal" / "base_thresholds.json").read_text())
    assert result["violated"] and result["thresholds"] == [0.999]


def test_evaluate_meets_the_target(tmp_path, easy_corpus):
    save_checkpoint(tmp_path / "base.ckpt", build_base("desk", seed=2), {"approach": "base"})
    code = main(["evaluate", "--approach", "base", "--model", str(tmp_path / "base.ckpt"), "--dev",
                 str(easy_corpus.root), "--target-fah", "0.1", "--out", str(tmp_path / "ev")])
    assert code == 0
    text = (tmp_path / "ev" / "base_report.csv").read_text().splitlines()
    row = dict(zip(text[0].split(","), text[1].split(",")))
    assert float(row["fa_per_hour"]) <= 0.1


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "mkws", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-lab", "gen-train", "train-base", "finetune", "train-attention", "calibrate", "evaluate",
                "snr-curves", "compare", "bench", "export-plots"):
        assert cmd in out.stdout
