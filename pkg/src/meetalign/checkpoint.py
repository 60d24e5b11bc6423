"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MEETCKPT" | u32 format version | u64 header length | header JSON | tensor data

The header records the model config, every tensor's name, section, shape
and byte offset, and each adapter's kind and hyperparameters.  Tensor data
is float64 '<f8' in row-major order.  No timestamps are stored, so equal
inputs give byte-identical files.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .adapters import ControlTokenSet, HandcraftedPrefix, LoRAAdapter, SoftPrompt
from .diffcore import Parameter
from .model import ModelConfig, ModelState, Tokenizer

MAGIC = b"MEETCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _adapter_tensors(choice: str, adapter) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    meta = adapter.meta()
    tensors = []
    if adapter.kind == "soft_prompt":
        meta["name"] = adapter.name
        tensors.append((f"adapter/{choice}/rows", adapter.rows.data))
    elif adapter.kind == "lora":
        meta["name"] = adapter.name
        for target in sorted(adapter.pairs):
            a, b = adapter.pairs[target]
            tensors.append((f"adapter/{choice}/{target}/A", a.data))
            tensors.append((f"adapter/{choice}/{target}/B", b.data))
    return meta, tensors


def to_bytes(state: ModelState, token_set: ControlTokenSet | None = None, extra: dict | None = None) -> bytes:
    tensors = [(f"model/{n}", p.data) for n, p in state.params.items()]
    adapters = {}
    if token_set is not None:
        for choice, adapter in token_set.named().items():
            meta, ts = _adapter_tensors(choice, adapter)
            adapters[choice] = meta
            tensors.extend(ts)
    entries, blob, offset = [], io.BytesIO(), 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blob.write(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "tensors": entries,
        "adapters": adapters,
        "merged_adapters": state.merged_adapters,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + blob.getvalue()


def save_checkpoint(path: str | Path, state: ModelState, token_set: ControlTokenSet | None = None,
                    extra: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(state, token_set, extra))


def read_header(raw: bytes) -> tuple[dict, int]:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    return header, 20 + hlen


def from_bytes(raw: bytes) -> tuple[ModelState, ControlTokenSet | None, dict]:
    header, start = read_header(raw)
    arrays = {}
    for e in header["tensors"]:
        lo = start + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw[lo:lo + e["nbytes"]], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    config = ModelConfig(**header["config"])
    params = {n[len("model/"):]: Parameter(n[len("model/"):], a) for n, a in arrays.items() if n.startswith("model/")}
    state = ModelState(config, params)
    state.merged_adapters = list(header.get("merged_adapters", []))
    token_set = None
    if header["adapters"]:
        tok = Tokenizer(config.vocab_size)
        built = {}
        for choice, meta in header["adapters"].items():
            kind = meta["kind"]
            if kind == "handcrafted":
                built[choice] = HandcraftedPrefix(meta["text"], tok)
            elif kind == "soft_prompt":
                built[choice] = SoftPrompt(meta["name"], arrays[f"adapter/{choice}/rows"], meta.get("init_word"))
            elif kind == "lora":
                ad = LoRAAdapter(meta["name"], meta["rank"], meta["alpha"])
                for target in meta["targets"]:
                    ad.pairs[target] = (
                        Parameter(f"{ad.name}.{target}.A", arrays[f"adapter/{choice}/{target}/A"]),
                        Parameter(f"{ad.name}.{target}.B", arrays[f"adapter/{choice}/{target}/B"]),
                    )
                built[choice] = ad
            else:
                raise CheckpointError(f"unknown adapter kind {kind!r}")
        levels = [built[f"level{k}"] for k in range(len(built)) if f"level{k}" in built]
        token_set = ControlTokenSet(built["good"], built["bad"], levels)
    return state, token_set, header.get("extra", {})


def load_checkpoint(path: str | Path) -> tuple[ModelState, ControlTokenSet | None, dict]:
    return from_bytes(Path(path).read_bytes())
