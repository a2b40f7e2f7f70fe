import dataclasses
import json

import numpy as np
import pytest

from sslasr.encoder import init_encoder, streaming_plan
from sslasr.errors import ConfigError
from sslasr.formats import read_checkpoint_file
from sslasr.pipeline import (Pipeline, PipelineConfig, PipelineStateError, checksum, load_pipeline_config,
                             plan_sampler, streaming_variant)
from sslasr.transducer import init_transducer, load_transducer

TINY = {
    "iterations": "1", "stage1_epochs": "1", "pretrain_epochs": "1", "finetune_epochs": "1",
    "k": "6", "warmup_steps": "5", "kmeans_iters": "20", "batch_frames": "3000",
    "synth.n_symbols": "4", "synth.hours_pretrain": "0.01", "synth.hours_finetune": "0.005",
    "synth.hours_test": "0.004", "synth.utterance_length_range": "4,6",
    "encoder.d_model": "8", "encoder.n_heads": "2", "encoder.stack_downsample": "1,2,1",
    "predictor.embed_dim": "4", "predictor.pred_hidden": "8", "predictor.joint_hidden": "8",
}


def tiny(tmp_path, **over):
    values = dict(TINY, workdir=str(tmp_path / "work"))
    values.update({k: str(v) for k, v in over.items()})
    return PipelineConfig.from_kv(values)


def test_config_round_trip_and_errors(tmp_path):
    cfg = tiny(tmp_path, chunk_choices_ms="320,full")
    back = PipelineConfig.from_kv(cfg.to_kv())
    assert back == cfg
    assert back.chunk_choices_ms == (320.0, float("inf"))
    with pytest.raises(ConfigError):
        tiny(tmp_path, bogus="1")
    with pytest.raises(ConfigError):
        tiny(tmp_path, **{"nosuch.key": "1"})
    with pytest.raises(ConfigError):
        tiny(tmp_path, label_source="wav2vec")
    with pytest.raises(ConfigError):
        tiny(tmp_path, iterations=0)


def test_schedules_and_lineage_rule(tmp_path):
    cfg = tiny(tmp_path, iterations=3, pretrain_epochs="9,18", selectors="stack3,final")
    assert [cfg.pretrain_epochs_at(i) for i in (1, 2, 3)] == [9, 18, 18]
    assert [cfg.selector_at(i) for i in (1, 2, 3)] == ["stack3", "final", "final"]
    assert [cfg.source_at(i) for i in (1, 2, 3)] == ["asr", "it1/stage4", "it2/stage4"]
    assert tiny(tmp_path, label_source="fbank").source_at(1) == "fbank"


def test_one_iteration_runs_exactly_four_stages_then_resumes(tmp_path):
    cfg = tiny(tmp_path)
    p = Pipeline(cfg)
    report = p.run()
    stages = [s for s in p.executed if s.startswith("it")]
    assert stages == ["it0/stage1", "it1/stage2", "it1/stage3", "it1/stage4"]
    assert [r["name"] for r in report["rows"]] == ["from-scratch", "iteration 1"]
    root = tmp_path / "work"
    assert (root / "report.json").exists() and (root / "report.txt").exists()
    assert not (root / "pipeline.lock").exists()
    again = Pipeline(cfg)
    again.run()
    assert again.executed == []


def test_interrupt_after_stage3_and_resume(tmp_path):
    cfg = tiny(tmp_path)
    p = Pipeline(cfg)
    p.run(stop_after="it1/stage3")
    ckpt = tmp_path / "work" / "it1" / "stage3.ckpt"
    before = checksum(ckpt)
    q = Pipeline(cfg)
    q.run()
    assert q.executed == ["it1/stage4"]
    assert checksum(ckpt) == before


def test_provenance_and_stage4_starts_from_stage3(tmp_path):
    cfg = tiny(tmp_path, finetune_epochs=0)
    p = Pipeline(cfg)
    p.run()
    root = tmp_path / "work"
    state = json.loads((root / "state.json").read_text())["stages"]
    h4, _ = read_checkpoint_file(root / "it1" / "stage4.ckpt", header_only=True)
    assert h4["lineage"] == "it1/stage4"
    assert h4["inputs"]["encoder"] == p._digest("it1/stage3")
    # with zero fine-tuning epochs the encoder is exactly the Stage-3 encoder
    _, p3 = read_checkpoint_file(root / "it1" / "stage3.ckpt")
    m4 = load_transducer(root / "it1" / "stage4.ckpt")
    for k, v in m4.encoder.params.items():
        np.testing.assert_array_equal(v.data, p3["encoder." + k])
    assert "it0/stage1" in state["it1/stage2"]["inputs"]["source"]


def test_zero_epoch_stage1_is_initialisation(tmp_path):
    from sslasr.pipeline import stage_seed

    cfg = tiny(tmp_path, stage1_epochs=0)
    p = Pipeline(cfg)
    p.run(stop_after="it0/stage1")
    m = load_transducer(tmp_path / "work" / "it0" / "stage1.ckpt")
    ref = init_transducer(init_encoder(cfg.encoder, stage_seed(cfg.seed, 0, 1)),
                          cfg.predictor.for_vocab(m.cfg.vocab_size), stage_seed(cfg.seed, 0, 2))
    for k, v in ref.all_params().items():
        np.testing.assert_array_equal(v.data, m.all_params()[k].data)


def test_spectral_source_skips_stage1(tmp_path):
    cfg = tiny(tmp_path, label_source="fbank", run_stage1="false")
    p = Pipeline(cfg)
    report = p.run()
    assert "it0/stage1" not in p.executed
    assert report["rows"][0]["source"] == "fbank"
    assert 0.0 < report["rows"][0]["purity"] <= 1.0


def test_corrupt_state_and_lock_are_refused(tmp_path):
    cfg = tiny(tmp_path)
    Pipeline(cfg).run(stop_after="it0/stage1")
    root = tmp_path / "work"
    (root / "pipeline.lock").write_text("1\n")
    with pytest.raises(PipelineStateError, match="another run"):
        Pipeline(cfg).run()
    (root / "pipeline.lock").unlink()
    state = root / "state.json"
    good = state.read_text()
    state.write_text(good[: len(good) // 2])
    with pytest.raises(PipelineStateError, match="recover"):
        Pipeline(cfg).run()
    state.write_text(good)
    ckpt = root / "it0" / "stage1.ckpt"
    ckpt.write_bytes(ckpt.read_bytes()[:-1] + b"\x00")
    with pytest.raises(PipelineStateError, match="checksum"):
        Pipeline(cfg).run()


def test_rerun_is_byte_identical(tmp_path):
    a = tiny(tmp_path / "a")
    b = tiny(tmp_path / "b")
    Pipeline(a).run()
    Pipeline(b).run()
    for rel in ("it0/stage1.ckpt", "it1/codebook.bin", "it1/labels", "it1/stage3.ckpt",
                "it1/stage4.ckpt", "report.json", "report.txt"):
        assert checksum(tmp_path / "a" / "work" / rel) == checksum(tmp_path / "b" / "work" / rel), rel


def test_streaming_requires_causal_encoder(tmp_path):
    with pytest.raises(ConfigError):
        tiny(tmp_path, streaming="true")
    with pytest.raises(ConfigError):
        streaming_variant(tiny(tmp_path))


def test_plan_sampler_uniform_over_grid(tmp_path):
    cfg = tiny(tmp_path, **{"encoder.causal": "true", "streaming": "true"})
    sample = plan_sampler(cfg)
    rng = np.random.default_rng(0)
    n = 1000
    draws = [sample(rng) for _ in range(n)]
    grid = [(c, x) for c in cfg.chunk_choices_ms for x in cfg.context_choices_ms]
    assert len(grid) == 16
    p = 1 / 16
    sigma = np.sqrt(n * p * (1 - p))
    for cell in grid:
        assert abs(draws.count(cell) - n * p) <= 3 * sigma
    assert set(draws) == set(grid)
    assert plan_sampler(tiny(tmp_path)) is None


def test_decode_plan_frames():
    from sslasr.encoder import EncoderConfig

    cfg = EncoderConfig(causal=True)
    plan = streaming_plan(400, 640.0, 5120.0, cfg)
    out = plan.scaled(200, cfg.output_downsample_factor)
    assert (out.chunk, out.left) == (16, 128)


def test_streaming_run_logs_and_is_causal(tmp_path):
    from sslasr import autodiff as ad
    from sslasr.encoder import forward

    cfg = tiny(tmp_path, **{"encoder.causal": "true"})
    report = streaming_variant(cfg)
    assert report["streaming"] is True
    m = load_transducer(tmp_path / "work" / "it1" / "stage4.ckpt")
    rng = np.random.default_rng(1)
    T = 400
    x = rng.standard_normal((1, T, 80)).astype(np.float32)
    plan = streaming_plan(T // 2, 640.0, 5120.0, m.encoder.cfg)
    with ad.no_grad():
        base = forward(m.encoder, x, plan).final.data[0]
        y = x.copy()
        y[0, 300:] += 5.0
        pert = forward(m.encoder, y, plan).final.data[0]
    # output frame t covers input frames [4t, 4t+4); chunks are 16 output frames
    first_touched = 300 // 4
    safe = (first_touched // 16) * 16
    np.testing.assert_array_equal(base[:safe], pert[:safe])
    assert not np.array_equal(base, pert)


def test_load_pipeline_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\niterations = 2\nencoder.d_model = 16\n")
    cfg = load_pipeline_config(path, {"k": "12"})
    assert (cfg.iterations, cfg.encoder.d_model, cfg.k) == (2, (16,), 12)
