# MEET on the SORT task: a base warm start, a parameter-efficient stage, then joint tuning.
# Set MEETALIGN_DEMO_FULL=1 for the full-size run (a few minutes). The default toy run only shows the
# mechanics; its model is too undertrained to sort, so rewards stay near zero.
import os

from meetalign import pipeline as pl
from meetalign.config import RunConfig
from meetalign.data import get_task

cfg = RunConfig(seed=1)
if not os.environ.get("MEETALIGN_DEMO_FULL"):
    cfg.data.n = 300
    cfg.train.base_steps = 300
    cfg.train.epochs = 2

dataset = pl.build_dataset(cfg)
base = pl.load_or_pretrain_base(cfg, dataset)
record = pl.run_variant("meet", dataset, cfg, base=base)
print("stage losses per epoch:", [round(v, 3) for v in record.epoch_means(0)], [round(v, 3) for v in record.epoch_means(1)])

task = get_task("sort")
prompts = [e.prompt for e in dataset.validation][:100]
for choice in ("good", "bad"):
    rows = pl.generate_eval_dump(record, prompts, choice, max_len=16)
    mean = sum(task.reward(r["prompt"], r["response"]) for r in rows) / len(rows)
    print(f"{choice:4s} mean reward {mean:.3f}  e.g. {rows[0]['prompt']!r} -> {rows[0]['response']!r}")
