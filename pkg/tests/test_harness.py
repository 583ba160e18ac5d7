import json
from dataclasses import replace

import numpy as np
import pytest

from sparsevt.checkpoint import Checkpoint
from sparsevt.cli import main
from sparsevt.config import RunConfig
from sparsevt.curriculum import ExpansionSchedule, Stage
from sparsevt.data import generate_corpus, load_corpus, sample_frames, to_model_input
from sparsevt.evaluate import (evaluate_retrieval, export_masks, recall_from_similarity,
                               temporal_probe)
from sparsevt.model import ModelConfig, SparseVideoText, SparsityConfig, inflate_pos_embed
from sparsevt.pruning import keep_count, read_keep_mask_csv
from sparsevt.train import METRIC_HEADER, NumericalFailure, TrainConfig, train_schedule, train_stage

SMALL = dict(frames=2, frame_size=32, patch=16, dim=16, heads=2, visual_depth=3, text_depth=3,
             multimodal_depth=2, text_len=8, vocab=32, prune_layers=(1, 2))
STAGE = Stage(2, q_v=0.7, q_m=0.5, k_local=1, k_random=1, block_size=2, epochs=2, lr=1e-3, batch=8)


def small_cfg(**kw):
    return ModelConfig(**{**SMALL, **kw})


# ------------------------------------------------------------------ retrieval


def test_recall_identity_is_perfect():
    r = recall_from_similarity(np.eye(7))
    assert (r.r1, r.r5, r.r10) == (100.0, 100.0, 100.0)


def test_recall_hand_example():
    sim = np.array([[0.1, 0.9, 0.0], [0.5, 0.4, 0.3], [0.0, 0.0, 1.0]])
    r = recall_from_similarity(sim)
    assert list(r.ranks) == [1, 1, 0]
    assert r.r1 == pytest.approx(100 / 3) and r.r5 == 100.0
    assert r.mean == pytest.approx((r.r1 + r.r5 + r.r10) / 3)


def test_random_similarity_near_chance():
    rng = np.random.default_rng(0)
    r1 = [recall_from_similarity(rng.standard_normal((100, 100))).r1 for _ in range(200)]
    assert abs(np.mean(r1) - 1.0) < 0.3


def test_recall_bounds_on_model(tiny_corpus):
    model = SparseVideoText(small_cfg(sparsity=STAGE.sparsity))
    r = evaluate_retrieval(model, tiny_corpus)
    assert 0 <= r.r1 <= r.r5 <= r.r10 <= 100
    with pytest.raises(ValueError):
        recall_from_similarity(np.zeros((0, 0)))
    with pytest.raises(ValueError):
        evaluate_retrieval(model, tiny_corpus, split="nope")


def test_probe_identity_permutation(tiny_corpus):
    model = SparseVideoText(small_cfg(sparsity=STAGE.sparsity), seed=1)
    n = len(tiny_corpus.indices("test"))
    p = temporal_probe(model, tiny_corpus, perms=[np.arange(2)] * n)
    assert p.delta == 0.0 and np.array_equal(p.normal.ranks, p.shuffled.ranks)


def test_probe_order_invariant_model(tiny_corpus):
    cfg = small_cfg(frames=4, attention_impl="dense", prune_layers=())
    model = SparseVideoText(cfg, seed=2)
    hw = cfg.grid[1] * cfg.grid[2]
    pos = model.params["vis.pos"].data
    pos[...] = inflate_pos_embed(pos[:1 + hw], cfg.frames)
    for l in range(cfg.visual_depth):
        table = model.params[f"vis.{l}.relpos"].data
        table[...] = table[:, cfg.frames - 1:cfg.frames]     # same bias for every time offset
    p = temporal_probe(model, tiny_corpus, seed=5)
    assert abs(p.delta) < 1e-9


def test_probe_needs_two_frames(tiny_corpus):
    with pytest.raises(ValueError):
        temporal_probe(SparseVideoText(small_cfg(frames=1, prune_layers=())), tiny_corpus)


def test_motion_only_subset(tiny_corpus):
    model = SparseVideoText(small_cfg(sparsity=STAGE.sparsity))
    p = temporal_probe(model, tiny_corpus, motion_only=True)
    mask = tiny_corpus.motion_mask()[tiny_corpus.indices("test")]
    assert len(p.normal.ranks) == mask.sum()


# ------------------------------------------------------------------ keep masks


def _clip(corpus, cfg, i=0):
    return to_model_input(corpus.frames[i][sample_frames(corpus.frames.shape[1], cfg.frames)])


def test_export_all_ones_without_pruning(tiny_corpus, tmp_path):
    cfg = small_cfg()
    rows = export_masks(SparseVideoText(cfg), _clip(tiny_corpus, cfg), tmp_path / "m.csv",
                        caption=tiny_corpus.tokens[0])
    assert all(r[-1] == 1 for r in rows)
    assert {r[0] for r in rows} == {1, 2, cfg.visual_depth + 1}
    assert read_keep_mask_csv(tmp_path / "m.csv") == rows


def test_export_half_keep_single_layer(tiny_corpus, tmp_path):
    cfg = small_cfg(frames=4, prune_layers=(1,), sparsity=SparsityConfig(q_v=0.5))
    model = SparseVideoText(cfg, seed=3)
    rows = export_masks(model, _clip(tiny_corpus, cfg, 3), tmp_path / "m.csv")
    assert sum(r[-1] for r in rows) == keep_count(cfg.n_tokens, 0.5)
    again = export_masks(model, _clip(tiny_corpus, cfg, 3))
    assert again == rows


def test_export_counts_follow_recurrence(tiny_corpus):
    cfg = small_cfg(frames=4, sparsity=SparsityConfig(1, 1, 4, q_v=0.7, q_m=0.5))
    rows = export_masks(SparseVideoText(cfg, seed=4), _clip(tiny_corpus, cfg), caption=[4, 5])
    kept = {}
    for layer, *_, k in rows:
        kept[layer] = kept.get(layer, 0) + k
    n1 = keep_count(cfg.n_tokens, 0.7)
    n2 = keep_count(n1, 0.7)
    assert kept == {1: n1, 2: n2, cfg.visual_depth + 1: keep_count(n2, 0.5)}


# ------------------------------------------------------------------ training


def test_lr_zero_leaves_weights(tiny_corpus):
    stage = replace(STAGE, lr=0.0, epochs=1)
    init = Checkpoint.from_model(SparseVideoText(small_cfg(sparsity=stage.sparsity), seed=0))
    res = train_stage(small_cfg(), stage, tiny_corpus, init)
    for k, v in init.tensors.items():
        assert np.array_equal(res.checkpoint.tensors[k], v), k
    assert res.checkpoint.meta["step"] == len(res.rows) == 4


def test_metrics_csv(tiny_corpus, tmp_path):
    res = train_stage(small_cfg(), STAGE, tiny_corpus, out_dir=tmp_path)
    lines = res.metrics_path.read_text().splitlines()
    assert lines[0] == ",".join(METRIC_HEADER)
    assert len(lines) == 1 + len(res.rows)
    first = [float(x) for x in lines[1].split(",")]
    assert first[1] == pytest.approx(first[2] + first[3] + first[4], rel=1e-6)


def test_resume_replays_same_trajectory(tiny_corpus, tmp_path):
    tcfg = TrainConfig(checkpoint_every=4)
    stage = replace(STAGE, epochs=2)
    full = train_stage(small_cfg(), stage, tiny_corpus, seed=9, out_dir=tmp_path / "a", tcfg=tcfg)
    mid = Checkpoint.load(tmp_path / "a" / "stage0_step4.svtt")
    resumed = train_stage(small_cfg(), stage, tiny_corpus, mid, seed=9, out_dir=tmp_path / "b",
                          tcfg=tcfg)
    assert resumed.rows == full.rows[4:]
    assert resumed.checkpoint.to_bytes() == full.checkpoint.to_bytes()


def test_non_finite_aborts_with_last_good(tiny_corpus, tmp_path):
    model = SparseVideoText(small_cfg(sparsity=STAGE.sparsity))
    model.params["txt.head.w"].data[0, 0] = np.nan
    with pytest.raises(NumericalFailure) as info:
        train_stage(small_cfg(), STAGE, tiny_corpus, Checkpoint.from_model(model), out_dir=tmp_path)
    assert info.value.checkpoint_path.exists()


def test_schedule_rejects_invalid(tiny_corpus):
    bad = ExpansionSchedule((STAGE, replace(STAGE, frames=4, q_v=0.8)))
    with pytest.raises(ValueError):
        train_schedule(small_cfg(), bad, tiny_corpus)


def test_two_stage_schedule(tiny_corpus, tmp_path):
    sched = ExpansionSchedule((replace(STAGE, epochs=1), replace(STAGE, frames=4, q_v=0.6, epochs=1)))
    res = train_schedule(small_cfg(), sched, tiny_corpus, out_dir=tmp_path)
    assert res[1].checkpoint.config.frames == 4
    assert res[1].checkpoint.meta["expanded_from"] == 2
    assert (tmp_path / "metrics_stage1.csv").exists()


@pytest.mark.slow
def test_loss_decreases_over_200_steps(tmp_path):
    corpus = load_corpus(generate_corpus(tmp_path, 64, n_frames=8, seed=1, n_test=0))
    stage = Stage(4, q_v=0.7, q_m=0.5, k_local=1, k_random=3, block_size=56, epochs=25,
                  lr=2e-4, batch=8)
    res = train_stage(ModelConfig(), stage, corpus)
    assert len(res.rows) == 200
    assert res.rows[-1][1] < res.rows[0][1]
    assert np.mean([r[1] for r in res.rows[-20:]]) < np.mean([r[1] for r in res.rows[:20]])


# ------------------------------------------------------------------ command line


@pytest.fixture
def cli_env(tmp_path):
    cfg = RunConfig(model=small_cfg(), schedule=ExpansionSchedule(
        (replace(STAGE, epochs=1), replace(STAGE, frames=4, q_v=0.6, epochs=1))))
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(cfg.to_json())
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(data), "--n-clips", "40",
                 "--frames", "8", "--n-test", "8"]) == 0
    return cfg_path, data


def _train(cli_env, out):
    cfg_path, data = cli_env
    assert main(["train", "--config", str(cfg_path), "--seed", "4", "--out", str(out),
                 "--data", str(data)]) == 0


def test_cli_end_to_end(cli_env, tmp_path, capsys):
    cfg_path, data = cli_env
    out = tmp_path / "run"
    _train(cli_env, out)
    ck = out / "stage1.svtt"
    assert ck.exists() and (out / "metrics_stage0.csv").exists()
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(ck), "--data", str(data)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n"] == 8 and res["r1"] <= res["r5"] <= res["r10"]
    assert main(["probe", "--ckpt", str(ck), "--data", str(data), "--motion-only"]) == 0
    assert "delta" in json.loads(capsys.readouterr().out)
    assert main(["export-masks", "--ckpt", str(ck), "--data", str(data), "--out", str(out),
                 "--with-caption"]) == 0
    assert read_keep_mask_csv(out / "masks_clip0.csv")
    assert main(["expand", "--config", str(cfg_path), "--ckpt", str(out / "stage0.svtt"),
                 "--frames", "4", "--out", str(out)]) == 0
    assert Checkpoint.load(out / "expanded_T4.svtt").config.frames == 4


def test_cli_determinism(cli_env, tmp_path):
    _train(cli_env, tmp_path / "a")
    _train(cli_env, tmp_path / "b")
    for name in ("metrics_stage0.csv", "metrics_stage1.csv", "stage0.svtt", "stage1.svtt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_cost(capsys):
    assert main(["cost", "--paper-dims", "--frames", "4", "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["total_edges"] == 7_470_060
    assert main(["cost", "--paper-dims", "--k-local", "1", "--k-random", "3", "--q-v", "0.7",
                 "--q-m", "0.1", "--format", "table"]) == 0
    assert "sparsity" in capsys.readouterr().out


def test_cli_validate_schedule(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps([{"frames": 4, "q_v": 0.7, "k_local": 1, "k_random": 3},
                                {"frames": 8, "q_v": 0.6, "k_local": 1, "k_random": 3}]))
    assert main(["validate-schedule", str(good)]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps([{"frames": 4, "q_v": 0.6, "k_local": 1, "k_random": 3},
                               {"frames": 8, "q_v": 0.7, "k_local": 1, "k_random": 3}]))
    capsys.readouterr()
    assert main(["validate-schedule", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert [v["constraint"] for v in err] == ["keep-rate-decreasing"]


def test_cli_bad_config_exit_code(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"dim": 10, "heads": 3}}))
    assert main(["cost", "--config", str(path)]) == 2
    path.write_text(json.dumps({"surprise": {}}))
    assert main(["cost", "--config", str(path)]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "missing.svtt"), "--data", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_numerical_failure_exit_code(cli_env, tmp_path):
    cfg_path, data = cli_env
    model = SparseVideoText(small_cfg(sparsity=STAGE.sparsity))
    model.params["vis.head.w"].data[:] = np.inf
    bad = Checkpoint.from_model(model).save(tmp_path / "bad.svtt")
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--stage", "0",
                 "--init", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert (tmp_path / "o" / "stage0_last_good.svtt").exists()


def test_run_config_roundtrip(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert RunConfig.load(path) == cfg
    with pytest.raises(ValueError):
        RunConfig.from_dict({"train": {"lr_typo": 1}})
