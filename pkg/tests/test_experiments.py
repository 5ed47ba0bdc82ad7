import dataclasses
import json

import pytest
from hypothesis import given, settings, strategies as st

from abpdcnet.errors import ConfigError
from abpdcnet.experiments import (PRESETS, ExperimentConfig, run_generate, run_register,
                                  run_train)

TINY = ExperimentConfig(input_shape=(8, 16, 16), stage_channels=(2, 2, 3, 3),
                        stage_strides=((2, 2, 2), (1, 2, 2), (1, 1, 1), (1, 1, 1)),
                        ncc_window=3, epochs=2, batch_size=2, train_cases=4, test_cases=2,
                        register_steps=3, log_every=1, gen_psi_max=1.0, lr=1e-3)


def test_text_round_trip_default_and_tiny():
    for cfg in (ExperimentConfig(), TINY):
        text = cfg.to_text()
        assert ExperimentConfig.from_text(text) == cfg
        assert ExperimentConfig.from_text(text).to_text() == text


@given(st.integers(0, 2 ** 31), st.floats(1e-6, 1.0), st.booleans(),
       st.sampled_from(["standard", "fixed", "adaptive"]), st.integers(1, 64))
@settings(max_examples=30)
def test_text_round_trip_property(seed, lr, fpran, mode, batch):
    cfg = dataclasses.replace(TINY, seed=seed, lr=lr, fpran=fpran, abpdc_mode=mode, batch_size=batch)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_text_format_details():
    cfg = ExperimentConfig.from_text("# comment\nseed = 7  # trailing\n\nfpran = FALSE\n"
                                     "stage_strides = 1,1,1; 2,2,2; 1,2,2; 1,2,2\n")
    assert cfg.seed == 7 and cfg.fpran is False
    assert cfg.stage_strides == ((1, 1, 1), (2, 2, 2), (1, 2, 2), (1, 2, 2))
    for bad in ("nope = 1", "seed", "seed = 1.5", "fpran = maybe", "lr = fast", "lr = 0"):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentConfig.load("/nonexistent/config.txt")


def test_presets():
    assert set(PRESETS) == {"baseline", "+F", "+A", "+A+F"}
    base = TINY.with_preset("baseline")
    assert base.abpdc_mode == "standard" and not base.fpran
    full = TINY.with_preset("+A+F")
    assert full.abpdc_mode == "adaptive" and full.fpran
    with pytest.raises(ConfigError):
        TINY.with_preset("+Z")


def test_generator_fields_reach_gen_config():
    cfg = dataclasses.replace(TINY, gen_n_blobs=7, gen_lesion_amplitude=2.5, gen_lesion_sigma=0.3)
    g = cfg.gen_config()
    assert (g.n_blobs, g.lesion_amplitude, g.lesion_sigma) == (7, 2.5, 0.3)
    assert g.divisor == (2, 4, 4)


def test_generate_writes_cases(tmp_path):
    m = run_generate(TINY, tmp_path)
    assert len(m["cases"]) == 6
    assert (tmp_path / "train_000_ct.vol5").exists() and (tmp_path / "test_001_psi.vol5").exists()
    assert json.loads((tmp_path / "manifest.json").read_text()) == m


def test_train_without_registration_omits_registration_metrics(tmp_path):
    cfg = dataclasses.replace(TINY, fpran=False, lambda_sim=0.0, lambda_reg=0.0)
    report = run_train(cfg, tmp_path)
    assert set(report) >= {"accuracy", "f1", "auc", "train_acc"}
    assert "mean_endpoint_error" not in report and "ncc_after" not in report
    log = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1]
    assert all(r["loss_sim"] is None for r in log)


def test_train_report_is_reproducible(tmp_path):
    run_train(TINY, tmp_path / "a")
    run_train(TINY, tmp_path / "b")
    for name in ("report.json", "train_log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert {"mean_endpoint_error", "ncc_after"} <= set(report)


def test_max_steps_caps_training():
    report = run_train(dataclasses.replace(TINY, max_steps=1, test_cases=0), write=False)
    assert report["steps"] == 1


def test_register_requires_fpran():
    with pytest.raises(ConfigError):
        run_register(dataclasses.replace(TINY, fpran=False), write=False)


def test_register_nothing_to_recover(tmp_path):
    cfg = dataclasses.replace(TINY, gen_displacement="none", gen_rotation=False, use_rotation=False,
                              register_steps=40, gen_noise=0.0)
    r = run_register(cfg, tmp_path)
    assert r["initial_ncc"] > 0.99
    assert r["initial_endpoint_error"] == 0.0
    assert r["final_endpoint_error"] < 0.1
    for name in ("psi1.vol5", "ct_warped.vol5", "register_log.jsonl", "report.json"):
        assert (tmp_path / name).exists()
