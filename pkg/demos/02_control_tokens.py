# Three kinds of control token on one micro transformer.
import numpy as np

from meetalign.adapters import make_handcrafted_set, make_lora_set, make_soft_prompt_set, merge_lora
from meetalign.diffcore import SeededRng
from meetalign.model import ModelConfig, ModelState, forward_batch, lm_loss

state = ModelState.init(ModelConfig(), SeededRng(0, "demo"))
print("micro model parameters:", state.n_parameters())

# hand-crafted prefixes are just text
coh = make_handcrafted_set("synthetic")
print(coh.good.text, "|", coh.bad.text)

# soft prompts start as the word's byte embeddings, repeated to length L
soft = make_soft_prompt_set(state, 5)
emb = state["tok_emb"].data
print("row 4 wraps back to 'g':", np.array_equal(soft.good.rows.data[4], emb[ord("g")]))

# LoRA starts neutral because B = 0
lora = make_lora_set(state, rank=4, rng=SeededRng(0, "lora"))
ids = np.array([[256] + list(b"dcba") + [259]])
print("fresh LoRA is neutral:", np.array_equal(forward_batch(state, ids).data, forward_batch(state, ids, lora.good).data))

# give B some weight and fold it into the base matrices
for _, b in lora.good.pairs.values():
    b.data[:] = SeededRng(1, "b").normal(b.shape, 0.05)
merged = merge_lora(state, lora.good)
gap = np.abs(forward_batch(merged, ids).data - forward_batch(state, ids, lora.good).data).max()
print("merged vs adapter max gap:", gap)

for name, adapter in [("none", None), ("coh", coh.good), ("soft", soft.good), ("lora", lora.good)]:
    print(f"{name:5s} NLL of 'abcd':", round(lm_loss(state, "dcba", "abcd", adapter).item(), 4))
