import dataclasses
from importlib import resources

import pytest

from toys2st.config import RunConfig, apply_override, dump_config, load_config
from toys2st.errors import ConfigError

EXAMPLE = resources.files("toys2st").joinpath("examples/desk.yaml")


def test_example_config_loads():
    cfg = load_config(EXAMPLE)
    assert cfg == dataclasses.replace(RunConfig(), run_dir="runs/desk")


def test_dump_load_round_trip(tmp_path):
    cfg = load_config(None, ["model.width=64", "corpus.words=[2, 4]"])
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert cfg.corpus.words == (2, 4)


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\nmodel:\n  width: 32\n")
    cfg = load_config(path, ["model.width=16", "model.heads=2"])
    assert (cfg.seed, cfg.model.width, cfg.model.heads) == (3, 16, 2)
    assert cfg.model.layers == RunConfig().model.layers


def test_list_index_override():
    cfg = load_config(None, ["schedule.phases.1.epochs=1"])
    assert [p.epochs for p in cfg.schedule.phases] == [3.0, 1, 3.0]


@pytest.mark.parametrize("override", ["model.depth=3", "nothing", "schedule.phases.9.epochs=1", "seed.x=1"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_unknown_file_key(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("model:\n  depth: 3\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.yaml")


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        load_config(None, ["sampler.temperature=0"])
    with pytest.raises(ConfigError):
        load_config(None, ["model.max_positions=64"]).model_config(RunConfig().build_codec())


def test_apply_override_does_not_mutate():
    doc = {"a": {"b": 1}}
    out = apply_override(doc, "a.b=2")
    assert doc == {"a": {"b": 1}} and out == {"a": {"b": 2}}


def test_default_vocabulary_sized_to_codec():
    codec = RunConfig().build_codec()
    ranges = codec.layout.ranges
    chars = 16 + 16 + 2  # both alphabets, space, silence
    assert ranges["linguistic"][1] == chars
    assert ranges["semantic"][1] == chars * 4 * codec.config.speaker_parity
    assert ranges["text:en"][1] == ranges["text:zh"][1] == 17  # letters and space
