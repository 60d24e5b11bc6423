import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meetalign.data import (Dataset, PreferenceExample, SchemaError, SyntheticTask, gen_synthetic, get_task,
                            load_jsonl, split_validation, write_jsonl)
from meetalign.diffcore import SeededRng


def test_example_validation():
    with pytest.raises(ValueError):
        PreferenceExample("", chosen="a", rejected="b")
    with pytest.raises(ValueError):
        PreferenceExample("p", chosen="a")
    with pytest.raises(ValueError):
        PreferenceExample("p", response="a")  # pointwise needs a score
    e = PreferenceExample("p", chosen="a", rejected="b")
    assert e.pairwise and (e.x, e.y_w, e.y_l) == ("p", "a", "b")


def test_sort_reward_values():
    t = get_task("sort")
    assert t.reward("cab", "abc") == 1.0
    assert t.reward("cab", "cba") == 0.0
    assert t.reward("cab", "acb") == 0.5
    assert t.reward("cab", "abd") == 0.0    # wrong letters
    assert t.reward("cab", "ab") == 0.0


def test_upper_reward_values():
    t = get_task("upper")
    assert t.reward("abc", "ABC") == 1.0
    assert t.reward("abc", "AbC") == pytest.approx(2 / 3)
    assert t.reward("abc", "AB") == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from(["sort", "upper"]))
def test_rejected_is_strictly_worse(seed, name):
    t = get_task(name)
    rng = SeededRng(seed, "t")
    x = t.draw_prompt(rng)
    y_l = t.draw_rejected(x, rng)
    assert t.reward(x, t.best(x)) == 1.0
    assert t.reward(x, y_l) < 1.0
    if name == "sort":
        assert Counter(y_l) == Counter(x)


def test_task_validation():
    with pytest.raises(ValueError):
        SyntheticTask("reverse")
    with pytest.raises(ValueError):
        SyntheticTask("sort", min_len=5, max_len=3)
    with pytest.raises(ValueError):
        get_task("nope")


def test_gen_synthetic_split_and_determinism():
    a = gen_synthetic("sort", 50, seed=3)
    b = gen_synthetic("sort", 50, seed=3)
    assert (len(a.train), len(a.validation)) == (45, 5)
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != gen_synthetic("sort", 50, seed=4).content_hash()
    assert len({e.prompt for e in a.examples}) == 50


def test_gen_synthetic_pointwise():
    ds = gen_synthetic("upper", 20, seed=0, pointwise=True)
    assert ds.kind == "pointwise" and len(ds.train) == 36
    assert {e.score for e in ds.train[:2]} >= {1.0}


def test_split_overlap_rejected():
    e = PreferenceExample("p", chosen="a", rejected="b")
    with pytest.raises(ValueError):
        Dataset([e], [e], "pairwise", "test")


def _write(tmp_path, rows):
    p = tmp_path / "d.jsonl"
    p.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in rows) + "\n")
    return p


def test_load_jsonl_round_trip(tmp_path):
    ds = gen_synthetic("sort", 30, seed=1)
    write_jsonl(ds.train, tmp_path / "t.jsonl")
    back = load_jsonl(tmp_path / "t.jsonl")
    assert back.train == ds.train


def test_load_jsonl_schema_errors_name_lines(tmp_path):
    p = _write(tmp_path, [{"prompt": "a", "chosen": "b", "rejected": "c"}, {"prompt": "a", "chosen": 3},
                          "not json"])
    with pytest.raises(SchemaError) as info:
        load_jsonl(p)
    assert "line 2" in str(info.value) and "line 3" in str(info.value)


def test_load_jsonl_dedup_and_drop(tmp_path):
    row = {"prompt": "a", "chosen": "b", "rejected": "c"}
    long = {"prompt": "x" * 300, "chosen": "b", "rejected": "c"}
    ds = load_jsonl(_write(tmp_path, [row, row, long]))
    assert len(ds.train) == 1 and ds.deduplicated == 1 and ds.dropped == 1
    assert ds.manifest()["dropped"] == 1


def test_load_jsonl_pointwise(tmp_path):
    ds = load_jsonl(_write(tmp_path, [{"prompt": "a", "response": "b", "score": 2}]), kind="pointwise")
    assert ds.train[0].score == 2.0
    with pytest.raises(SchemaError):
        load_jsonl(_write(tmp_path, [{"prompt": "a", "response": "b", "score": True}]), kind="pointwise")


def test_empty_file_is_an_error(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    with pytest.raises(SchemaError):
        load_jsonl(p)


def test_split_validation_keeps_prompts_together(tmp_path):
    rows = [PreferenceExample(f"p{i // 2}", response=f"r{i}", score=float(i)) for i in range(20)]
    ds = split_validation(Dataset(rows, [], "pointwise", "t"))
    assert len(ds.validation) == 2 and ds.validation[0].prompt == ds.validation[1].prompt


def test_manifest_file(tmp_path):
    ds = gen_synthetic("sort", 10, seed=0)
    ds.write_manifest(tmp_path / "m.json")
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["counts"] == {"train": 9, "validation": 1} and m["hash"] == ds.content_hash()
