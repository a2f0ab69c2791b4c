"""Configuration parsing, validation, defaults, and round trips."""

import json

import numpy as np
import pytest

from earshot.config import (ConfigError, GmmConfig, MicSpec, PipelineConfig,
                            detect_planarity, parse_config, serialize_config)

from conftest import circular_mics, corner_cube_mics, pipeline_config


def test_defaults_fill_in():
    cfg = pipeline_config(circular_mics(4))
    assert cfg.general.frame_size_samples == 512
    assert cfg.mcra.alpha_s == pytest.approx(0.95)
    assert cfg.ssl.coarse_level == 2 and cfg.ssl.fine_level == 4
    assert cfg.sst.n_confirm == 7 and cfg.sst.n_forget == 50
    assert cfg.sss.method == "delay_and_sum"
    assert cfg.sss.postfilter.enabled is False


def test_frame_dt_property():
    cfg = pipeline_config(circular_mics(4))
    assert cfg.frame_dt_s == pytest.approx(256 / 16000)


def test_planarity_detection():
    assert detect_planarity(circular_mics(8)) is True
    assert detect_planarity(corner_cube_mics()) is False


def test_half_sphere_auto_resolution():
    planar = pipeline_config(circular_mics(8))
    assert planar.ssl.scan_half_sphere is True
    solid = pipeline_config(corner_cube_mics())
    assert solid.ssl.scan_half_sphere is False


def test_mapping_must_be_unique_and_in_range():
    cfg = pipeline_config(circular_mics(4)).model_dump()
    cfg["mapping"] = [0, 1, 2, 2]
    with pytest.raises((ConfigError, ValueError)):
        PipelineConfig.model_validate(cfg)
    cfg["mapping"] = [0, 1, 2, 7]
    with pytest.raises((ConfigError, ValueError)):
        PipelineConfig.model_validate(cfg)


def test_mics_must_match_mapping_length():
    cfg = pipeline_config(circular_mics(4)).model_dump()
    cfg["general"]["mics"] = cfg["general"]["mics"][:3]
    with pytest.raises((ConfigError, ValueError)):
        PipelineConfig.model_validate(cfg)


def test_frame_size_power_of_two():
    cfg = pipeline_config(circular_mics(4)).model_dump()
    cfg["general"]["frame_size_samples"] = 500
    with pytest.raises((ConfigError, ValueError)):
        PipelineConfig.model_validate(cfg)


def test_gmm_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        GmmConfig(weights=[0.7, 0.7], means=[0.1, 0.2], variances=[0.01, 0.01])
    with pytest.raises(ValueError):
        GmmConfig(weights=[1.0], means=[0.1, 0.2], variances=[0.01, 0.01])


def test_fixed_doas_must_be_unit_vectors():
    cfg = pipeline_config(circular_mics(4)).model_dump()
    cfg["sss"]["fixed_doas"] = [[2.0, 0.0, 0.0]]
    with pytest.raises((ConfigError, ValueError)):
        PipelineConfig.model_validate(cfg)
    cfg["sss"]["fixed_doas"] = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]
    parsed = PipelineConfig.model_validate(cfg)
    assert np.linalg.norm(parsed.sss.fixed_doas[0]) == pytest.approx(1.0)


def test_parse_error_reports_position():
    with pytest.raises(ConfigError) as exc:
        parse_config('{"raw": {"sample_rate_hz": }}')
    assert "line" in str(exc.value) or "column" in str(exc.value)


def test_parse_error_reports_field_path():
    cfg = pipeline_config(circular_mics(4)).model_dump()
    cfg["raw"]["bits_per_sample"] = 12
    with pytest.raises(ConfigError) as exc:
        parse_config(json.dumps(cfg))
    assert "bits_per_sample" in str(exc.value)


def test_serialize_parse_round_trip():
    cfg = pipeline_config(circular_mics(8))
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_micspec_defaults():
    m = MicSpec(position_m=(1.0, 0.0, 0.0))
    assert tuple(m.orientation) == (0.0, 0.0, 1.0)
    assert m.fov_deg == 360.0
    assert m.sigma_pos_m == 0.0
