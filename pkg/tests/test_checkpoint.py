import numpy as np
import pytest

from meetalign.adapters import make_handcrafted_set, make_lora_set, make_soft_prompt_set
from meetalign.checkpoint import CheckpointError, from_bytes, load_checkpoint, read_header, save_checkpoint, to_bytes
from meetalign.diffcore import SeededRng


@pytest.mark.parametrize("kind", ["none", "soft", "lora", "handcrafted", "levels"])
def test_round_trip_is_byte_identical(tiny_state, kind):
    sets = {
        "none": lambda: None,
        "soft": lambda: make_soft_prompt_set(tiny_state, 3),
        "lora": lambda: make_lora_set(tiny_state, 2, SeededRng(0, "l")),
        "handcrafted": lambda: make_handcrafted_set("synthetic"),
        "levels": lambda: make_soft_prompt_set(tiny_state, 2, levels=3),
    }
    ts = sets[kind]()
    raw = to_bytes(tiny_state, ts, extra={"seed": 1})
    state, ts2, extra = from_bytes(raw)
    assert extra == {"seed": 1}
    assert to_bytes(state, ts2, extra={"seed": 1}) == raw
    for n in tiny_state.params:
        np.testing.assert_array_equal(state[n].data, tiny_state[n].data)


def test_file_helpers(tmp_path, tiny_state):
    save_checkpoint(tmp_path / "c.bin", tiny_state)
    state, ts, _ = load_checkpoint(tmp_path / "c.bin")
    assert ts is None and state.config == tiny_state.config
    header, _ = read_header((tmp_path / "c.bin").read_bytes())
    assert header["format_version"] == 1


def test_bad_magic():
    with pytest.raises(CheckpointError):
        from_bytes(b"NOTACKPT" + bytes(20))
