"""Config parsing and the command-line surface (exit codes, idempotence)."""

import json
import os

import numpy as np
import pytest

from tpp.checkpoint import Checkpoint
from tpp.cli import main
from tpp.config import ExperimentConfig
from tpp.errors import ConfigError
from tpp.peft import AdapterSpec, LoraSpec
from tpp.registry import ParamGroup


BASE_CFG = """
[model]
image_size = 16
patch_size = 4
embed_dim = 16
depth = 2
num_heads = 2

[peft]
method = adapter
bottleneck = 4

[data]
kind = synthetic_cls
num_classes = 2
train_count = 16
val_count = 8
test_count = 8

[stage]
iterations = 6
batch_size = 8
lr = 0.001
warmup_epochs = 0
weight_decay = 0.0
"""


class TestConfigParsing:
    def test_defaults_are_complete(self):
        cfg = ExperimentConfig()
        assert cfg.get("model", "embed_dim") == 64
        assert cfg.get("pretext", "mask_ratio") == 0.75
        assert cfg.get("peft", "method") == "adapter"

    def test_file_values_override_defaults(self):
        cfg = ExperimentConfig.parse(BASE_CFG)
        assert cfg.get("model", "embed_dim") == 16
        assert cfg.get("stage", "iterations") == 6

    def test_unknown_key_is_hard_error(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("[model]\nembed_dims = 64\n")

    def test_unknown_section_is_hard_error(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("[modell]\nembed_dim = 64\n")

    def test_type_errors_are_config_errors(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("[model]\nembed_dim = sixty-four\n")

    def test_comments_and_blank_lines_ignored(self):
        cfg = ExperimentConfig.parse("# top\n[model]\n# note\nembed_dim = 8  # inline\n\n")
        assert cfg.get("model", "embed_dim") == 8

    def test_key_outside_section_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("embed_dim = 8\n")

    def test_effective_snapshot_is_flat_and_covers_everything(self):
        cfg = ExperimentConfig.parse(BASE_CFG)
        flat = cfg.effective()
        assert flat["model.embed_dim"] == 16
        assert flat["pretext.teacher_temp"] == 0.04
        assert all("." in k for k in flat)

    def test_peft_spec_builders(self):
        cfg = ExperimentConfig.parse(BASE_CFG)
        assert cfg.peft_spec() == AdapterSpec(bottleneck=4)
        assert cfg.peft_spec("lora") == LoraSpec(rank=4, alpha=4.0,
                                                 targets=("query", "value"))
        assert cfg.peft_spec("none") is None

    def test_vit_config_roundtrip(self):
        cfg = ExperimentConfig.parse(BASE_CFG)
        vit = cfg.vit_config()
        assert vit.embed_dim == 16 and vit.depth == 2


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One shared S1 checkpoint for the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "exp.cfg"
    cfg_path.write_text(BASE_CFG)
    code = main(["pretrain-backbone", "--config", str(cfg_path), "--seed", "3",
                 "--out", str(root / "s1")])
    assert code == 0
    return {"root": root, "cfg": str(cfg_path),
            "backbone": str(root / "s1" / "backbone.tppc")}


class TestCli:
    def test_pretrain_writes_loadable_checkpoint(self, workspace):
        ckpt = Checkpoint.load(workspace["backbone"])
        assert ckpt.meta["stage"] == "backbone_pretrain"
        assert any(name.startswith("pretext.mae.") for name in ckpt.entries)
        assert any(name.startswith("backbone.") for name in ckpt.entries)

    def test_tpp_writes_target_only_checkpoint_and_passes_audit(self, workspace, capsys):
        out = workspace["root"] / "s2"
        code = main(["tpp", "--config", workspace["cfg"], "--seed", "3",
                     "--backbone", workspace["backbone"], "--out", str(out)])
        captured = capsys.readouterr().out
        assert code == 0
        assert "trainable ratio:" in captured
        assert "PASS" in captured
        target = Checkpoint.load(str(out / "target.tppc"))
        assert target.names()
        assert all(e.group is ParamGroup.TARGET for e in target.entries.values())
        assert all(not n.startswith("pretext.") for n in target.entries)
        assert all(n.startswith("adapter.") for n in target.entries)

    def test_finetune_consumes_tpp_checkpoint(self, workspace, capsys):
        s2 = workspace["root"] / "s2b"
        assert main(["tpp", "--config", workspace["cfg"], "--seed", "3",
                     "--backbone", workspace["backbone"], "--out", str(s2)]) == 0
        capsys.readouterr()
        s3 = workspace["root"] / "s3"
        code = main(["finetune", "--config", workspace["cfg"], "--seed", "3",
                     "--backbone", workspace["backbone"],
                     "--target-init", str(s2 / "target.tppc"), "--out", str(s3)])
        assert code == 0
        out = capsys.readouterr().out
        assert "test:" in out and "acc=" in out
        log_lines = (s3 / "finetune.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in log_lines]
        assert any(r.get("split") == "test" for r in records)
        assert any(r.get("event") == "effective_config" for r in records)

    def test_audit_exit_codes(self, workspace, capsys):
        s3 = workspace["root"] / "s3"
        if not (s3 / "finetune.tppc").exists():
            pytest.skip("finetune output not present")
        code = main(["audit", workspace["backbone"], str(s3 / "finetune.tppc"),
                     "--groups", "backbone"])
        assert code == 0
        assert "PASS" in capsys.readouterr().out
        # target group differs between those two checkpoints structurally
        code = main(["audit", workspace["backbone"], str(s3 / "finetune.tppc"),
                     "--groups", "target"])
        assert code == 2  # structural difference, not a hash failure

    def test_audit_detects_a_changed_backbone(self, workspace, tmp_path, capsys):
        ckpt = Checkpoint.load(workspace["backbone"])
        name = "backbone.cls_token"
        entry = ckpt.entries[name]
        entry.data[0] += 1.0
        from tpp.checkpoint import _hash_array
        entry.content_hash = _hash_array(entry.data)
        mutated = str(tmp_path / "mutated.tppc")
        ckpt.save(mutated)
        code = main(["audit", workspace["backbone"], mutated, "--groups", "backbone"])
        assert code == 3
        out = capsys.readouterr().out
        assert "FAIL" in out and name in out

    def test_finetune_rerun_is_bit_identical(self, workspace):
        outs = []
        for tag in ("r1", "r2"):
            out = workspace["root"] / f"repeat_{tag}"
            assert main(["finetune", "--config", workspace["cfg"], "--seed", "7",
                         "--backbone", workspace["backbone"], "--out", str(out)]) == 0
            outs.append(out)
        log1 = (outs[0] / "finetune.jsonl").read_bytes()
        log2 = (outs[1] / "finetune.jsonl").read_bytes()
        assert log1 == log2
        c1 = Checkpoint.load(str(outs[0] / "finetune.tppc"))
        c2 = Checkpoint.load(str(outs[1] / "finetune.tppc"))
        assert c1.hashes() == c2.hashes()

    def test_grid_flag_prints_ranked_table(self, workspace, capsys):
        out = workspace["root"] / "grid"
        code = main(["finetune", "--config", workspace["cfg"], "--seed", "5",
                     "--backbone", workspace["backbone"],
                     "--grid", "0.001,0.003", "--out", str(out)])
        assert code == 0
        text = capsys.readouterr().out
        assert "grid search" in text
        assert text.count("lr=") >= 2

    def test_missing_config_is_exit_1(self, tmp_path, capsys):
        code = main(["finetune", "--config", str(tmp_path / "nope.cfg"), "--seed", "0",
                     "--backbone", "x", "--out", str(tmp_path / "o")])
        assert code == 1

    def test_unknown_config_key_is_exit_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[model]\nfoo = 1\n")
        code = main(["pretrain-backbone", "--config", str(bad), "--seed", "0",
                     "--out", str(tmp_path / "o")])
        assert code == 1

    def test_divergent_run_is_exit_2(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "diverge.cfg"
        cfg.write_text(BASE_CFG.replace("lr = 0.001", "lr = 1e200")
                       .replace("weight_decay = 0.0", "weight_decay = 1.0"))
        code = main(["finetune", "--config", str(cfg), "--seed", "0",
                     "--backbone", workspace["backbone"], "--out", str(tmp_path / "o")])
        assert code == 2

    def test_peft_none_rejected_for_tpp(self, workspace, tmp_path, capsys):
        code = main(["tpp", "--config", workspace["cfg"], "--seed", "0",
                     "--backbone", workspace["backbone"], "--peft", "none",
                     "--out", str(tmp_path / "o")])
        assert code == 1

    def test_bitfit_tpp_allowed_with_warning(self, workspace, tmp_path, capsys):
        code = main(["tpp", "--config", workspace["cfg"], "--seed", "0",
                     "--backbone", workspace["backbone"], "--peft", "bitfit",
                     "--out", str(tmp_path / "bitfit")])
        captured = capsys.readouterr()
        assert code == 0
        assert "warning" in captured.err.lower()

    def test_report_aggregates_runs(self, workspace, tmp_path, capsys):
        logs = []
        for seed in ("11", "12"):
            out = workspace["root"] / f"rep{seed}"
            assert main(["finetune", "--config", workspace["cfg"], "--seed", seed,
                         "--backbone", workspace["backbone"], "--out", str(out)]) == 0
            logs.append(str(out / "finetune.jsonl"))
        capsys.readouterr()
        csv_path = str(tmp_path / "table.csv")
        code = main(["report", *logs, "--csv", csv_path])
        assert code == 0
        table = capsys.readouterr().out
        assert "| Method" in table and "Ratio" in table
        assert "exp" in table
        rows = [line for line in table.splitlines() if line.startswith("| exp")]
        assert len(rows) == 1  # two seeds aggregate into one row
        assert "2" in rows[0].split("|")[2]
        csv = open(csv_path).read().splitlines()
        assert csv[0].startswith("Method,Seeds")
        # mean over seeds equals the arithmetic mean of the per-seed accs
        accs = []
        for log_path in logs:
            recs = [json.loads(l) for l in open(log_path)]
            accs.append(next(r["value"] for r in recs
                             if r.get("split") == "test" and r["metric"] == "acc"))
        mean_str = rows[0].split("|")[3].strip()
        assert mean_str == f"{np.mean(accs):.2f}"

    def test_single_log_report_is_one_row(self, workspace, capsys):
        out = workspace["root"] / "rep11"
        if not (out / "finetune.jsonl").exists():
            pytest.skip("needs previous test's log")
        code = main(["report", str(out / "finetune.jsonl")])
        assert code == 0
        table = capsys.readouterr().out
        assert len([l for l in table.splitlines() if l.startswith("| exp")]) == 1
