import pytest

from tactwin.config import ConfigError, RunConfig, dump_config, load_config, parse_config_text


class TestParsing:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert parse_config_text(dump_config(cfg)) == cfg

    def test_overrides(self):
        cfg = parse_config_text("mesh_spacing = 1.0\nn_locations = 42\nprofile = hertz\n")
        assert cfg.mesh_spacing == 1.0
        assert cfg.n_locations == 42
        assert cfg.profile == "hertz"

    def test_comments_and_blanks(self):
        cfg = parse_config_text("# a comment\n\nseed = 9  # trailing\n")
        assert cfg.seed == 9

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("not_a_key = 3\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_text("seed = banana\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("just some text\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.cfg")

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("mesh_spacing = 3.5\n", encoding="utf-8")
        assert load_config(path).mesh_spacing == 3.5
