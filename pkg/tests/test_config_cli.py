"""Config grammar, flag overrides, CLI commands and their artifacts."""

import json
import os

import numpy as np
import pytest

from slimfit.cli import main
from slimfit.config import resolve
from slimfit.errors import ConfigError


def write_config(tmp_path, body):
    path = tmp_path / "run.ini"
    path.write_text(body)
    return str(path)


SMALL = """\
[model]
blocks = 1
hidden = 8
heads = 2
max_seq = 6

[task]
kind = cluster-tokens
vocab = 16
seq_len = 6
num_classes = 2
train_size = 96
val_size = 32
seed = 5
noise = 0.3

[train]
scheduler = ils
freeze_rate = 0.5
epochs = 1
batch_size = 16
seed = 3
lr = 0.002
warmup = 0.0
pretrain_steps = 0

[output]
dir = {out}
plots = off
"""


class TestConfigParsing:
    def test_round_trip(self, tmp_path):
        res = resolve(write_config(tmp_path, SMALL.format(out=tmp_path / "o")))
        assert res.model.blocks == 1
        assert res.task.kind == "cluster-tokens"
        assert res.run.freeze_rate == 0.5
        assert res.run.seed == 3

    def test_unknown_key_line_anchored(self, tmp_path):
        body = "[model]\nblocks = 1\nwat = 2\n"
        with pytest.raises(ConfigError, match=r"run\.ini:3: unknown key 'wat'"):
            resolve(write_config(tmp_path, body))

    def test_unknown_section_line_anchored(self, tmp_path):
        with pytest.raises(ConfigError, match=r"run\.ini:1: unknown section"):
            resolve(write_config(tmp_path, "[mystery]\n"))

    def test_bad_value_line_anchored(self, tmp_path):
        body = SMALL.format(out=tmp_path) + "\n[train]\nepochs = many\n"
        lineno = body.rstrip("\n").count("\n") + 1
        with pytest.raises(ConfigError, match=rf"run\.ini:{lineno}: epochs must be an integer"):
            resolve(write_config(tmp_path, body))

    def test_freeze_rate_range_enforced(self, tmp_path):
        body = SMALL.format(out=tmp_path).replace("freeze_rate = 0.5", "freeze_rate = 1.0")
        with pytest.raises(ConfigError, match=r"freeze_rate must be < 1.0"):
            resolve(write_config(tmp_path, body))

    def test_seed_required(self, tmp_path):
        body = SMALL.format(out=tmp_path).replace("seed = 3\n", "")
        with pytest.raises(ConfigError, match="seed is required"):
            resolve(write_config(tmp_path, body))

    def test_missing_assignment_syntax(self, tmp_path):
        with pytest.raises(ConfigError, match=r"run\.ini:2: expected 'key = value'"):
            resolve(write_config(tmp_path, "[model]\nblocks\n"))

    def test_flag_overrides_file(self, tmp_path):
        path = write_config(tmp_path, SMALL.format(out=tmp_path / "o"))
        res = resolve(path, {"seed": 99, "freeze_rate": 0.25, "scheduler": "random"})
        assert res.run.seed == 99
        assert res.run.freeze_rate == 0.25
        assert res.run.scheduler == "random"

    def test_quant_flag_fans_out(self, tmp_path):
        path = write_config(tmp_path, SMALL.format(out=tmp_path / "o"))
        res = resolve(path, {"quant": "on"})
        c = res.run.compression
        assert c.quant_dense and c.quant_matmul_softmax and c.quant_gelu
        assert not c.prune_layernorm

    def test_no_codecs_means_none(self, tmp_path):
        res = resolve(write_config(tmp_path, SMALL.format(out=tmp_path / "o")))
        assert res.run.compression is None


def read_body(path):
    """CSV content with the metadata header line stripped."""
    return "".join(l for l in open(path) if not l.startswith("#"))


class TestTrainCommand:
    def test_writes_four_csvs_and_echo(self, tmp_path):
        out = tmp_path / "run_out"
        path = write_config(tmp_path, SMALL.format(out=out))
        assert main(["train", "--config", path]) == 0
        for name in ("metrics.csv", "schedule.csv", "heatmap.csv", "memory.csv",
                     "resolved_config.ini"):
            assert (out / name).exists(), name

    def test_reproducible_bodies(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        path = write_config(tmp_path, SMALL.format(out=out1))
        assert main(["train", "--config", path]) == 0
        assert main(["train", "--config", path, "--out-dir", str(out2)]) == 0
        for name in ("metrics.csv", "schedule.csv", "heatmap.csv", "memory.csv"):
            assert read_body(out1 / name) == read_body(out2 / name), name

    def test_seed_override_changes_schedule(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        path = write_config(tmp_path, SMALL.format(out=out1))
        main(["train", "--config", path])
        main(["train", "--config", path, "--seed", "17", "--out-dir", str(out2)])
        assert read_body(out1 / "schedule.csv") != read_body(out2 / "schedule.csv")

    def test_high_rate_smoke(self, tmp_path):
        out = tmp_path / "hi"
        path = write_config(tmp_path, SMALL.format(out=out))
        assert main(["train", "--config", path, "--freeze-rate", "0.9",
                     "--scheduler", "ils"]) == 0

    def test_plots_rendered_when_on(self, tmp_path):
        out = tmp_path / "plots"
        path = write_config(tmp_path, SMALL.format(out=out))
        assert main(["train", "--config", path, "--plots", "on"]) == 0
        assert (out / "metrics.png").exists()
        assert (out / "update_heatmap.png").exists()
        assert (out / "memory_trace.png").exists()

    def test_bad_config_nonzero_exit(self, tmp_path, capsys):
        path = write_config(tmp_path, "[model]\nblocks = zero\n[train]\nseed = 1\n")
        assert main(["train", "--config", path]) == 2
        assert "run.ini:2" in capsys.readouterr().err


class TestSweepCommand:
    def test_cardinality_and_merge(self, tmp_path):
        out = tmp_path / "sw"
        body = SMALL.format(out=out) + (
            "\n[sweep]\nschedulers = ils, random, progressive\nfreeze_rates = 0, 0.5, 0.9\n")
        path = write_config(tmp_path, body)
        assert main(["sweep", "--config", path]) == 0
        rows = read_body(out / "sweep.csv").splitlines()
        assert rows[0] == "scheduler,F,final_accuracy"
        assert len(rows) - 1 == 9
        assert (out / "sweep_tradeoff.png").exists() is False  # plots off in SMALL

    def test_ils_at_zero_matches_none_baseline(self, tmp_path):
        out = tmp_path / "sw0"
        body = SMALL.format(out=out) + "\n[sweep]\nschedulers = ils, none\nfreeze_rates = 0\n"
        path = write_config(tmp_path, body)
        assert main(["sweep", "--config", path]) == 0
        rows = [l.split(",") for l in read_body(out / "sweep.csv").splitlines()[1:]]
        accs = {r[0]: float(r[2]) for r in rows}
        assert accs["ils"] == accs["none"]


class TestMemoryReportCommand:
    def test_encoder_scale_report(self, tmp_path, capsys):
        out = tmp_path / "mem"
        body = f"""\
[model]
blocks = 12
hidden = 768
heads = 12
max_seq = 128

[task]
vocab = 30522
num_classes = 2

[train]
seed = 0
batch_size = 32
freeze_rate = 0.95

[compression]
quant_dense = on
quant_matmul_softmax = on
quant_gelu = on
prune_layernorm = on

[output]
dir = {out}
plots = on
"""
        path = write_config(tmp_path, body)
        assert main(["memory-report", "--config", path]) == 0
        captured = capsys.readouterr().out
        assert "imbalance ratio: 4.0" in captured
        doc = json.load(open(out / "memory_report.json"))
        assert doc["imbalance_ratio"] == 4.0
        # batch scaling is exactly linear
        rows = doc["batch_scaling"]
        assert rows[1]["baseline_bytes"] == 2 * rows[0]["baseline_bytes"]
        assert rows[2]["baseline_bytes"] == 4 * rows[0]["baseline_bytes"]
        assert (out / "memory_breakdown.png").exists()
        # activation reduction at F=0.95 with all codecs is substantial
        assert doc["reduction_factor"] > 5.0

    def test_stable_keys(self, tmp_path):
        out = tmp_path / "mem2"
        body = SMALL.format(out=out)
        path = write_config(tmp_path, body)
        assert main(["memory-report", "--config", path]) == 0
        doc = json.load(open(out / "memory_report.json"))
        assert set(doc) >= {"records", "totals", "aside", "baseline_total",
                            "reduction_factor", "imbalance_ratio", "batch_scaling"}
        assert set(doc["totals"]) == {"dynamic", "static", "semi_static",
                                      "activations_total"}


class TestGradcheckCommand:
    def test_fresh_build_passes(self, capsys):
        assert main(["gradcheck", "--instances", "2"]) == 0
        assert "all passed" in capsys.readouterr().out

    def test_corrupted_backward_fails(self, monkeypatch, capsys):
        import slimfit.tensor as Tmod
        real = Tmod.layernorm

        def corrupted(x, gamma, beta, eps=1e-5, **kw):
            out = real(x, gamma, beta, eps, **kw)
            if out.node is not None:
                orig = out.node.backward_fn
                out.node.backward_fn = lambda g: orig(g * 1.01)
            return out

        monkeypatch.setattr(Tmod, "layernorm", corrupted)
        assert main(["gradcheck", "--instances", "1"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestBundledConfigs:
    def test_toy_config_resolves(self):
        res = resolve("configs/toy.ini")
        assert res.model.blocks == 3
        assert res.pretrain_steps == 2000

    def test_memory_config_resolves(self):
        res = resolve("configs/encoder_base_memory.ini")
        assert res.model.hidden == 768
