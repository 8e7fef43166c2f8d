import pytest

from pixnet.config import RunConfig, apply_overrides, dump_config, load_config, parse_config_text
from pixnet.errors import NonDivisibleGeometry


def test_defaults():
    cfg = RunConfig()
    assert (cfg.tiling.grid_rows, cfg.tiling.grid_cols, cfg.tiling.halo) == (4, 4, 8)
    assert cfg.net.heartbeat_interval == 2.0 and cfg.net.heartbeat_timeout == 5.0
    assert cfg.net.retry_budget == 3
    assert cfg.trigger2.max_reduced_chi2 == 2.0 and cfg.trigger2.min_delta_chi2 == 25.0


def test_parse_text_with_comments():
    cfg = parse_config_text("""
        # desk run
        synth.width = 256   # pixels
        synth.bands = ["R", "B"]
        trigger1.n_sigma = 4
        sinks = ["stdout"]
        run_id = nightly
    """)
    assert cfg.synth.width == 256
    assert cfg.synth.bands == ("R", "B")
    assert cfg.trigger1.n_sigma == 4.0
    assert cfg.sinks == ("stdout",)
    assert cfg.run_id == "nightly"


@pytest.mark.parametrize("text", ["bogus.key = 1", "synth.nope = 1", "synth.width = 2.5", "no equals sign",
                                  "trigger2.use_color = 1"])
def test_bad_config_lines(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


def test_geometry_must_tile():
    with pytest.raises(NonDivisibleGeometry):
        apply_overrides(RunConfig(), {"synth.width": 510})


def test_dump_round_trip(tmp_path):
    cfg = apply_overrides(RunConfig(), {"synth.bands": ["R", "B"], "seed": 9, "sinks": ["stdout"]})
    path = tmp_path / "c.txt"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_digest_tracks_science_settings():
    base = RunConfig()
    assert base.digest == RunConfig().digest
    assert apply_overrides(base, {"seed": 3}).digest == base.digest
    assert apply_overrides(base, {"trigger1.n_sigma": 4}).digest != base.digest
