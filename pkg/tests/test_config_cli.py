"""Config parsing/validation and CLI subcommand behavior."""

import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from rcfvis.cli import EXIT_CONFIG, EXIT_IO, build_parser, main
from rcfvis.config import REGISTRY, RunConfig, load_config
from rcfvis.errors import ConfigError


class TestConfig:
    def test_defaults_validate(self):
        RunConfig().validate()

    def test_file_plus_overrides(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\nlr0 = 0.001\nnum_slots=12\n")
        cfg = load_config(p, ["num_slots=8"])
        assert cfg.lr0 == 0.001
        assert cfg.num_slots == 8

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("learning_rate=3\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            load_config(p)

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigError, match="valid range"):
            load_config(None, ["num_slots=100"])

    def test_bad_parse_rejected(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(None, ["iter_max=ten"])

    def test_cross_field_checks(self):
        with pytest.raises(ConfigError):
            load_config(None, ["gen_min_sprites=5", "gen_max_sprites=2"])
        with pytest.raises(ConfigError):
            load_config(None, ["token_dim=24", "heads=16"])

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("RCFVIS_SEED", "99")
        cfg = load_config(None, ["seed=5"])
        assert cfg.seed == 99

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.cfg")


class TestCLIBasics:
    def test_help_lists_every_config_key(self, capsys):
        parser = build_parser()
        help_text = parser.format_help()
        for field in REGISTRY:
            assert field.name in help_text, field.name
            assert field.valid in help_text

    def test_bench_latency_paper_row(self, capsys):
        rc = main(["bench-latency", "--fps-stream", "6", "--fps-model", "89.4", "--clip", "36"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "6.40 s" in out

    def test_bench_latency_bad_input(self, capsys):
        rc = main(["bench-latency", "--fps-stream", "0", "--fps-model", "10"])
        assert rc == EXIT_CONFIG
        assert "code=2" in capsys.readouterr().err

    def test_unknown_config_key_exit_2(self, capsys, tmp_path):
        rc = main(["gen-data", "--out", str(tmp_path), "--set", "bogus=1"])
        assert rc == EXIT_CONFIG

    def test_missing_checkpoint_exit_3(self, capsys, tmp_path):
        rc = main(["eval", "--ckpt", str(tmp_path / "none"), "--data", str(tmp_path)])
        assert rc == EXIT_IO


TINY = [
    "--set", "train_clips=2", "--set", "val_clips=1", "--set", "probe_clips=1",
    "--set", "gen_frames=4", "--set", "image_h=32", "--set", "image_w=48",
    "--set", "gen_max_sprites=2",
]


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestCLIPipelines:
    def test_gen_data_bit_identical(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "a"), "--seed", "7", *TINY]) == 0
        assert main(["gen-data", "--out", str(tmp_path / "b"), "--seed", "7", *TINY]) == 0
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a.keys() == b.keys()
        assert all(a[k] == b[k] for k in a)

    def test_train_then_eval_scores_in_range(self, tmp_path, capsys):
        args = TINY + ["--set", "iter_max=4", "--set", "ckpt_every=4"]
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--seed", "3", *TINY]) == 0
        assert main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--seed", "3", *args]) == 0
        rc = main([
            "eval", "--ckpt", str(tmp_path / "r" / "ckpt_final"),
            "--data", str(tmp_path / "d"), "--split", "val", "--out", str(tmp_path / "score.csv"),
        ])
        assert rc == 0
        rows = (tmp_path / "score.csv").read_text().strip().splitlines()[1:]
        values = {row.split(",")[0]: float(row.split(",")[1]) for row in rows}
        assert set(values) == {"AP", "AP50", "AP75", "AR@1", "AR@10"}
        assert all(0.0 <= v <= 1.0 for v in values.values())

    def test_infer_dump_and_probe_and_attention(self, tmp_path, capsys):
        args = TINY + ["--set", "iter_max=2", "--set", "ckpt_every=2"]
        main(["gen-data", "--out", str(tmp_path / "d"), "--seed", "4", *TINY])
        main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--seed", "4", *args])
        ckpt = str(tmp_path / "r" / "ckpt_final")
        clip = str(tmp_path / "d" / "val" / "clip_00000")

        assert main(["infer", "--ckpt", ckpt, "--clip", clip, "--out", str(tmp_path / "pred")]) == 0
        manifest = json.loads((tmp_path / "pred" / "prediction.json").read_text())
        assert manifest["format_version"] == 1
        assert (tmp_path / "pred" / "masks" / "tensors.bin").is_file()

        assert main(["probe-order", "--ckpt", ckpt, "--clip", clip, "--out", str(tmp_path / "probe.csv")]) == 0
        lines = (tmp_path / "probe.csv").read_text().splitlines()
        assert "model=trained" in lines[0]
        assert lines[1].startswith("clip,t,eps")

        assert main(["dump-attention", "--ckpt", ckpt, "--clip", clip, "--out", str(tmp_path / "attn")]) == 0
        pgms = list((tmp_path / "attn").glob("*.pgm"))
        assert pgms and (tmp_path / "attn" / "segment_mass.csv").is_file()
        header = pgms[0].read_bytes()[:2]
        assert header == b"P5"

        assert main(["analyze-lipschitz", "--ckpt", ckpt, "--p", "2", "--out", str(tmp_path / "lip.csv")]) == 0
        text = (tmp_path / "lip.csv").read_text()
        assert "product/backbone" in text and "local_ratio/encoder" in text

    def test_probe_needs_clip_or_data(self, capsys):
        assert main(["probe-order"]) == EXIT_CONFIG

    def test_infer_deterministic(self, tmp_path, capsys):
        args = TINY + ["--set", "iter_max=2", "--set", "ckpt_every=2"]
        main(["gen-data", "--out", str(tmp_path / "d"), "--seed", "5", *TINY])
        main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--seed", "5", *args])
        ckpt = str(tmp_path / "r" / "ckpt_final")
        clip = str(tmp_path / "d" / "val" / "clip_00000")
        main(["infer", "--ckpt", ckpt, "--clip", clip, "--out", str(tmp_path / "p1")])
        main(["infer", "--ckpt", ckpt, "--clip", clip, "--out", str(tmp_path / "p2")])
        a, b = tree_bytes(tmp_path / "p1"), tree_bytes(tmp_path / "p2")
        assert a.keys() == b.keys()
        assert all(a[k] == b[k] for k in a)
