"""Tests for the key=value run configuration."""

import pytest

import numpy as np

from pairvol.config import (
    RunConfig,
    config_from_mapping,
    config_snapshot,
    load_config,
    parse_config_text,
    schedule_for,
)
from pairvol.errors import ConfigError
from pairvol.schedule import make_default_schedule


def test_parse_types_comments_and_blanks():
    text = """
# full-line comment
run.seed = 7
schedule.T = 200        # trailing comment
train.lr_init = 2.5e-4
ofg.markovian_baseline = true
train.skip_set = 1, 2, 8

phantom.depth_range = 16,48
"""
    m = parse_config_text(text)
    assert m["run.seed"] == 7
    assert m["schedule.T"] == 200
    assert m["train.lr_init"] == pytest.approx(2.5e-4)
    assert m["ofg.markovian_baseline"] is True
    assert m["train.skip_set"] == (1, 2, 8)
    assert m["phantom.depth_range"] == (16, 48)


def test_parse_reports_line_numbers():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("run.seed = 1\nnot a key value line\n")


def test_parse_rejects_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError, match="run.sede"):
        parse_config_text("run.sede = 1\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("run.seed = 1\nrun.seed = 2\n")


@pytest.mark.parametrize(
    "line,needle",
    [
        ("run.seed = x", "integer"),
        ("train.lr_init = fast", "number"),
        ("ofg.markovian_baseline = yes", "true or false"),
        ("train.skip_set = 1,two", "integers"),
    ],
)
def test_parse_rejects_bad_values(line, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config_text(line)


def test_mapping_builds_defaults():
    cfg = config_from_mapping({})
    assert cfg.seed == 0
    assert cfg.t_steps == 100
    assert cfg.denoiser.n_classes == cfg.phantom.n_classes == 3


def test_master_seed_fans_out():
    cfg = config_from_mapping({"run.seed": 42})
    assert cfg.seed == 42
    assert cfg.train.seed == 42
    assert cfg.ofg.seed == 42
    assert cfg.phantom.seed == 42


def test_with_seed_reseeds_every_module():
    cfg = RunConfig().with_seed(9)
    assert (cfg.seed, cfg.train.seed, cfg.ofg.seed, cfg.phantom.seed) == (9, 9, 9, 9)


def test_cross_field_class_count_mismatch_names_both():
    with pytest.raises(ConfigError) as exc:
        config_from_mapping({"phantom.n_classes": 8})
    assert "phantom.n_classes" in str(exc.value)
    assert "denoiser.n_classes" in str(exc.value)
    # consistent override is accepted
    cfg = config_from_mapping({"phantom.n_classes": 8, "denoiser.n_classes": 8})
    assert cfg.denoiser.n_classes == 8


def test_cross_field_ddim_steps_vs_schedule():
    with pytest.raises(ConfigError) as exc:
        config_from_mapping({"schedule.T": 10, "ofg.ddim_steps": 11})
    msg = str(exc.value)
    assert "ofg.ddim_steps" in msg and "schedule.T" in msg
    cfg = config_from_mapping({"schedule.T": 10, "ofg.ddim_steps": 10})
    assert cfg.ofg.ddim_steps == 10


def test_cross_field_pairing_dims_must_match_denoiser():
    with pytest.raises(ConfigError) as exc:
        config_from_mapping({"pairing.d_pos": 32})
    msg = str(exc.value)
    assert "pairing.d_pos" in msg and "denoiser.d_pos" in msg
    cfg = config_from_mapping({"pairing.d_pos": 64, "pairing.d_text": 64})
    assert cfg.denoiser.d_pos == 64


def test_depth_range_needs_two_values():
    with pytest.raises(ConfigError, match="two integers"):
        config_from_mapping({"phantom.depth_range": (8, 16, 32)})


def test_load_config_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")


def test_load_config_reads_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("run.seed = 3\nschedule.T = 64\n")
    cfg = load_config(p)
    assert cfg.seed == 3 and cfg.t_steps == 64


def test_snapshot_roundtrips():
    cfg = config_from_mapping(
        {
            "run.seed": 11,
            "schedule.T": 64,
            "denoiser.base_width": 8,
            "denoiser.d_model": 16,
            "denoiser.d_pos": 8,
            "denoiser.c_f": 8,
            "denoiser.d_text": 16,
            "train.epochs": 3,
            "train.lr_init": 5e-4,
            "train.skip_set": (1, 3),
            "ofg.ddim_steps": 5,
            "ofg.guide_next_from_first": True,
            "phantom.h": 16,
            "phantom.w": 16,
            "phantom.depth_range": (8, 12),
            "phantom.noise_level": 0.02,
        }
    )
    text = config_snapshot(cfg)
    again = config_from_mapping(parse_config_text(text))
    assert again == cfg


def test_beta_endpoints_build_linear_schedule():
    cfg = config_from_mapping(
        {"schedule.T": 50, "schedule.beta_start": 3e-4, "schedule.beta_end": 0.06}
    )
    sched = schedule_for(cfg)
    assert sched.T == 50
    assert np.isclose(sched.betas[0], 3e-4) and np.isclose(sched.betas[-1], 0.06)


def test_beta_endpoints_default_to_rescaled_schedule():
    cfg = config_from_mapping({"schedule.T": 50})
    assert cfg.beta_start is None
    sched = schedule_for(cfg)
    assert np.array_equal(sched.betas, make_default_schedule(50).betas)


def test_beta_endpoints_must_come_together():
    with pytest.raises(ConfigError, match="together"):
        config_from_mapping({"schedule.beta_start": 1e-4})


@pytest.mark.parametrize("start,end", [(0.0, 0.5), (0.5, 0.1), (1e-4, 1.0)])
def test_beta_endpoint_bounds(start, end):
    with pytest.raises(ConfigError, match="beta"):
        config_from_mapping({"schedule.beta_start": start, "schedule.beta_end": end})


def test_snapshot_roundtrips_with_beta_endpoints():
    cfg = config_from_mapping(
        {"schedule.beta_start": 2e-4, "schedule.beta_end": 0.05, "run.seed": 4}
    )
    again = config_from_mapping(parse_config_text(config_snapshot(cfg)))
    assert again == cfg
