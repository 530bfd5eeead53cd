"""Flat key=value configuration: parsing, typing, precedence, manifests."""

import pytest

from mnrv.config import (
    RunConfig,
    manifest_text,
    parse_assignments,
    read_config_file,
    resolve,
)
from mnrv.errors import ConfigError


class TestDefaults:
    def test_architecture_defaults(self):
        cfg = RunConfig()
        assert cfg.strides == (5, 2, 2, 2, 2, 2, 2)
        assert cfg.kernels == (1, 5, 5, 3, 3, 3, 3)
        assert cfg.embedding == (16, 2, 4)
        assert cfg.target_size == 1_480_000
        assert cfg.min_width == 12
        assert cfg.r == 1.2
        assert cfg.grn and cfg.multilayer and cfg.header_layer

    def test_training_defaults(self):
        cfg = RunConfig()
        assert cfg.epochs == 100
        assert cfg.batch_size == 2
        assert cfg.lr == 0.001
        assert (cfg.beta1, cfg.beta2) == (0.9, 0.999)
        assert cfg.alpha == 0.7
        assert cfg.warmup_frac == 0.05
        assert cfg.schedule == "cosine"

    def test_arch_conversion_round_trip(self):
        arch = RunConfig().arch()
        assert arch.strides == (5, 2, 2, 2, 2, 2, 2)
        assert arch.target_size == 1_480_000

    def test_train_conversion_packs_betas(self):
        train = RunConfig(beta1=0.5, beta2=0.9).train()
        assert train.betas == (0.5, 0.9)


class TestParsing:
    def test_types_follow_field_defaults(self):
        got = parse_assignments([
            "epochs=7", "lr=0.25", "grn=false", "strides=5,4", "schedule=constant",
        ])
        assert got == {
            "epochs": 7,
            "lr": 0.25,
            "grn": False,
            "strides": (5, 4),
            "schedule": "constant",
        }

    @pytest.mark.parametrize("text,value", [
        ("true", True), ("1", True), ("yes", True), ("on", True),
        ("false", False), ("0", False), ("no", False), ("off", False),
        ("TRUE", True), ("Off", False),
    ])
    def test_bool_spellings(self, text, value):
        assert parse_assignments([f"grn={text}"]) == {"grn": value}

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="stride_list"):
            parse_assignments(["stride_list=5,4"])

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_assignments(["epochs"])

    def test_bad_int(self):
        with pytest.raises(ConfigError, match="epochs"):
            parse_assignments(["epochs=three"])

    def test_bad_bool(self):
        with pytest.raises(ConfigError, match="grn"):
            parse_assignments(["grn=maybe"])

    def test_empty_tuple_rejected(self):
        with pytest.raises(ConfigError, match="strides"):
            parse_assignments(["strides="])

    def test_whitespace_tolerated(self):
        assert parse_assignments([" epochs = 3 "]) == {"epochs": 3}


class TestFileAndResolve:
    def test_file_skips_comments_and_blanks(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# a comment\n\nepochs=4\nlr=0.01\n")
        assert read_config_file(p) == {"epochs": 4, "lr": 0.01}

    def test_file_bad_line_reports_number(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("epochs=4\nnonsense\n")
        with pytest.raises(ConfigError, match=":2:"):
            read_config_file(p)

    def test_overrides_beat_file_beats_defaults(self):
        cfg = resolve({"epochs": 4, "lr": 0.01}, {"epochs": 9})
        assert cfg.epochs == 9          # override wins
        assert cfg.lr == 0.01           # file wins over default
        assert cfg.batch_size == 2      # untouched default

    def test_resolve_empty_is_defaults(self):
        assert resolve() == RunConfig()


class TestManifest:
    def test_lists_every_key_with_command(self):
        text = manifest_text(RunConfig(), "0.1.0", "train")
        assert "# mnrv 0.1.0" in text
        assert "# command: train" in text
        assert "strides=5,2,2,2,2,2,2" in text
        assert "target_size=1480000" in text
        assert "alpha=0.7" in text
        # one line per field plus the two header lines
        from dataclasses import fields
        assert len(text.strip().splitlines()) == len(fields(RunConfig)) + 2

    def test_reflects_overrides(self):
        text = manifest_text(resolve(None, {"epochs": 3}), "0.1.0", "plan")
        assert "epochs=3" in text
