import csv
import json

import numpy as np
import pytest

from meetalign import checkpoint as ckpt
from meetalign import pipeline as pl
from meetalign.data import PreferenceExample
from meetalign.diffcore import Parameter, SeededRng

from conftest import small_run_config


@pytest.fixture(scope="module")
def small():
    cfg = small_run_config()
    ds = pl.build_dataset(cfg)
    return cfg, ds, pl.pretrain_base(cfg, ds)


def test_adam_first_step_is_lr_sized():
    p = Parameter("p", np.array([1.0, -1.0]))
    opt = pl.Adam([p], 0.1)
    opt.step({"p": np.array([0.5, -2.0])})
    # bias-corrected first step moves each coordinate by about lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)
    assert opt.t == 1


def test_stage_plan_validation():
    with pytest.raises(ValueError):
        pl.StagePlan("pet", 1e-3, 0, 16)
    with pytest.raises(ValueError):
        pl.StagePlan("rlhf", 1e-3, 1, 16)
    with pytest.raises(ValueError):
        pl.TrainPlan("meet", [pl.StagePlan("cg", 1e-3, 1, 4)], 0)


def test_make_plan_defaults():
    from meetalign.config import RunConfig

    plan = pl.make_plan("meet", RunConfig())
    assert [(s.objective, s.learning_rate, s.epochs, s.batch_size) for s in plan.stages] == \
        [("pet", 1e-3, 5, 16), ("cg", 2e-5, 5, 16)]
    assert [s.objective for s in pl.make_plan("second_only", RunConfig()).stages] == ["cg"]
    with pytest.raises(ValueError):
        pl.make_plan("ppo", RunConfig())


def test_optimize_rejects_empty_and_nonfinite(small):
    cfg, ds, base = small
    state = base.copy()
    ts = pl.make_token_set("meet", cfg, state, ds)
    plan = pl.StagePlan("pet", 1e-3, 1, 4)
    with pytest.raises(ValueError):
        pl.optimize(state, ts, plan, [], SeededRng(0, "x"))
    ts.good.rows.data[0, 0] = np.nan
    with pytest.raises(pl.TrainingAborted, match="batch 0"):
        pl.optimize(state, ts, plan, ds.train, SeededRng(0, "x"))


def test_trace_length_and_stage_isolation(small):
    cfg, ds, base = small
    state = base.copy()
    ts = pl.make_token_set("meet", cfg, state, ds)
    before = state.snapshot()
    trace = pl.optimize(state, ts, pl.StagePlan("pet", 1e-2, 2, 8), ds.train, SeededRng(0, "s"))
    assert len(trace) == 2 * -(-len(ds.train) // 8)
    for n, v in before.items():
        assert np.array_equal(state[n].data, v)


def test_clipping_bounds_update(small):
    cfg, ds, base = small
    state = base.copy()
    ts = pl.make_token_set("meet", cfg, state, ds)
    rows = ts.good.rows.data.copy()
    pl.optimize(state, ts, pl.StagePlan("pet", 1e-3, 1, 64, clip_grad=1e-9), ds.train[:4], SeededRng(0, "c"))
    assert np.abs(ts.good.rows.data - rows).max() < 2e-3


def test_variant_algebra_and_moment_reset(small):
    cfg, ds, base = small
    meet = pl.run_variant("meet", ds, cfg, base=base)
    first = pl.run_variant("first_only", ds, cfg, base=base)
    assert meet.stage_checkpoints[0] == first.stage_checkpoints[0]
    assert meet.stage_start_moments == [0.0, 0.0]
    assert len({s for s, *_ in meet.loss_trace}) == 2


def test_second_only_starts_from_initialization(small):
    cfg, ds, base = small
    fresh = pl.make_token_set("second_only", cfg, base.copy(), ds)
    seen = []
    orig = pl.optimize

    def spy(state, token_set, plan, *a, **k):
        seen.append(token_set.good.rows.data.copy())
        return orig(state, token_set, plan, *a, **k)

    pl.optimize, saved = spy, pl.optimize
    try:
        rec = pl.run_variant("second_only", ds, cfg, base=base)
    finally:
        pl.optimize = saved
    assert len(seen) == 1 and np.array_equal(seen[0], fresh.good.rows.data)
    assert rec.kind == "second_only"


def test_handcrafted_rejected_for_meet(small):
    cfg, ds, base = small
    cfg2 = small_run_config(adapter="handcrafted")
    with pytest.raises(ValueError):
        pl.run_variant("meet", ds, cfg2, base=base)


def test_coh_and_dpo_run(small):
    cfg, ds, base = small
    coh = pl.run_variant("coh", ds, cfg, base=base)
    assert coh.token_set.kind == "handcrafted"
    dpo = pl.run_variant("dpo", ds, cfg, base=base)
    assert dpo.token_set is None and pl.default_choice(dpo) == "none"


def test_determinism_and_persistence(small, tmp_path):
    cfg, ds, base = small
    a = pl.run_variant("meet", ds, cfg, base=base, out_dir=tmp_path / "a")
    b = pl.run_variant("meet", ds, cfg, base=base, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["kind"] == "meet" and len(manifest["stage_plans"]) == 2
    with open(tmp_path / "a" / "loss_trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["stage", "epoch", "batch", "loss"] and len(rows) == 1 + len(a.loss_trace)
    other = small_run_config(seed=1)
    c = pl.run_variant("meet", ds, other, base=base)
    assert c.checkpoint_bytes() != b.checkpoint_bytes()
    loaded = pl.load_run(tmp_path / "a")
    assert loaded.kind == "meet" and loaded.config_hash == cfg.hash()


def test_base_cache_reused(small, monkeypatch):
    cfg, ds, _ = small
    first = pl.load_or_pretrain_base(cfg, ds)
    monkeypatch.setattr(pl, "pretrain_base", lambda *a, **k: pytest.fail("cache miss"))
    again = pl.load_or_pretrain_base(cfg, ds)
    assert ckpt.to_bytes(first) == ckpt.to_bytes(again)


def test_base_corpus_avoids_validation_prompts(small):
    cfg, ds, _ = small
    held = {e.prompt for e in ds.validation}
    assert not held & {x for x, _ in pl.base_corpus(ds, 500, 0)}


def test_eval_dump(small, tmp_path):
    cfg, ds, base = small
    rec = pl.run_variant("first_only", ds, cfg, base=base)
    prompts = [e.prompt for e in ds.validation]
    rows = pl.generate_eval_dump(rec, prompts, "bad", 0.0, tmp_path / "d.jsonl", max_len=6)
    assert rows == pl.generate_eval_dump(rec, prompts, "bad", 0.0, max_len=6)
    assert set(rows[0]) == {"prompt", "response", "adapter", "temperature"}
    assert pl.read_dump(tmp_path / "d.jsonl") == rows
    with pytest.raises(ValueError):
        pl.generate_eval_dump(rec, prompts, "level3")


def test_pointwise_run_needs_levels():
    cfg = small_run_config()
    cfg.data.kind = "pointwise"
    ds = pl.build_dataset(cfg)
    base = pl.pretrain_base(cfg, ds)
    with pytest.raises(ValueError):
        pl.run_variant("second_only", ds, cfg, base=base)
    cfg.adapter.levels = 2
    rec = pl.run_variant("meet", ds, cfg, base=base)
    assert len(rec.token_set.levels) == 2
    assert pl.generate_eval_dump(rec, ["abc"], "level1", max_len=4)[0]["adapter"] == "level1"


def test_base_warm_start_is_deterministic(small):
    cfg, ds, base = small
    again = pl.pretrain_base(cfg, ds)
    assert ckpt.to_bytes(again) == ckpt.to_bytes(base)
    assert all(not p.trainable for p in again.parameters())
