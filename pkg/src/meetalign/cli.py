"""Command-line entry point: ``meetalign <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails.  Output directories default to ``$MEETALIGN_OUT`` (or
``./runs``).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from . import evaluation as ev
from . import pipeline as pl
from .config import RunConfig, load_config
from .data import write_jsonl
from .judge import TEMPLATES, JudgeClient

log = logging.getLogger("meetalign")

CAPACITY_GRIDS = {
    "paper-soft_prompt": (1, 20, 50, 100),
    "paper-lora": (1, 4, 64),
    "desk": (1, 8, 32),
}
ABLATION_KINDS = ("meet", "first_only", "second_only", "coh", "dpo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def default_out() -> Path:
    return Path(os.environ.get("MEETALIGN_OUT", "runs"))


# ------------------------------------------------------------------ tables


def _color(text: str, value: float, enabled: bool) -> str:
    if not enabled or value == 0:
        return text
    return f"\x1b[{32 if value > 0 else 31}m{text}\x1b[0m"


def format_table(reports: Sequence[ev.WinRateReport], color: bool = False) -> str:
    head = ["candidate", "baseline", "evaluator", "n", "win%", "lose%", "tie%", "delta"]
    rows = [[r.candidate, r.baseline, r.evaluator, str(r.n), f"{r.win_pct:.2f}", f"{r.lose_pct:.2f}",
             f"{r.tie_pct:.2f}", f"{r.delta:+.2f}"] for r in reports]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r, row in zip(reports, rows):
        cells = [c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
        cells[-1] = _color(cells[-1], r.delta, color)
        lines.append("  ".join(cells))
    return "\n".join(lines)


def _use_color(args) -> bool:
    return {"always": True, "never": False}.get(args.color, sys.stdout.isatty())


# ----------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            cfg.override(key.strip(), value.strip())
        except (KeyError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
    for flag, key in (("seed", "seed"), ("task", "data.task"), ("data", "data.path"), ("kind", "train.kind")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.override(key, value)
    return cfg


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def _write_dump_meta(dump: Path, rec: pl.RunRecord) -> None:
    meta = {"kind": rec.kind, "seed": rec.seed, "config_hash": rec.config_hash, "checkpoint": rec.checkpoint_path}
    Path(str(dump) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_dump_meta(dump: str | Path) -> dict:
    p = Path(str(dump) + ".meta.json")
    return json.loads(p.read_text()) if p.exists() else {}


def _train_one(kind: str, cfg: RunConfig, out: Path) -> dict:
    dataset = pl.build_dataset(cfg)
    base = pl.load_or_pretrain_base(cfg, dataset)
    run_cfg = copy.deepcopy(cfg)
    run_cfg.train.kind = kind
    rec = pl.run_variant(kind, dataset, run_cfg, base=base, out_dir=out)
    run_cfg.write(out / "config.ini")
    prompts = [e.prompt for e in _validation_prompts(dataset)]
    dump = out / "eval_greedy.jsonl"
    pl.generate_eval_dump(rec, prompts, pl.default_choice(rec), 0.0, dump, cfg.eval.max_len, cfg.seed)
    _write_dump_meta(dump, rec)
    return {"kind": kind, "dir": str(out), "config_hash": rec.config_hash, "dump": str(dump),
            "wall_time": rec.wall_time}


def _validation_prompts(dataset):
    seen, out = set(), []
    for e in dataset.validation:
        if e.prompt not in seen:
            seen.add(e.prompt)
            out.append(e)
    return out


def _rewarder(name: str):
    try:
        return ev.rewarder_for(name)
    except ValueError as exc:
        raise UsageError(f"unknown rewarder {name!r}") from exc


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    from .data import gen_synthetic

    out = Path(args.out or default_out() / f"data-{args.task}-{args.seed}")
    out.mkdir(parents=True, exist_ok=True)
    ds = gen_synthetic(args.task, args.n, args.seed, pointwise=args.pointwise)
    write_jsonl(ds.train, out / "train.jsonl")
    write_jsonl(ds.validation, out / "validation.jsonl")
    ds.write_manifest(out / "manifest.json")
    print(f"wrote {len(ds.train)} train / {len(ds.validation)} validation examples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or default_out() / f"{cfg.train.kind}-seed{cfg.seed}")
    info = _train_one(cfg.train.kind, cfg, out)
    print(f"{info['kind']}: run saved to {info['dir']} (config {info['config_hash']}, {info['wall_time']:.1f}s)")
    return 0


def cmd_generate(args) -> int:
    run_dir = Path(args.run)
    rec = pl.load_run(run_dir)
    cfg_path = run_dir / "config.ini" if run_dir.is_dir() else None
    cfg = load_config(cfg_path if cfg_path and cfg_path.exists() else None)
    if args.prompts:
        prompts = [row["prompt"] for row in pl.read_dump(args.prompts)] if args.prompts.endswith(".jsonl") \
            else Path(args.prompts).read_text().splitlines()
    else:
        prompts = [e.prompt for e in _validation_prompts(pl.build_dataset(cfg))]
    choice = args.adapter or pl.default_choice(rec)
    out = Path(args.out or (run_dir if run_dir.is_dir() else run_dir.parent) / f"dump_{choice}_t{args.temperature}.jsonl")
    pl.generate_eval_dump(rec, prompts, choice, args.temperature, out, args.max_len or cfg.eval.max_len, args.seed)
    _write_dump_meta(out, rec)
    print(f"wrote {len(prompts)} responses to {out}")
    return 0


def cmd_eval(args) -> int:
    a, b = pl.read_dump(args.a), pl.read_dump(args.b)
    labels = {"candidate": args.label_a or Path(args.a).stem, "baseline": args.label_b or Path(args.b).stem}
    if args.judge:
        client = JudgeClient(args.judge, args.template, timeout=args.timeout)
        if [r["prompt"] for r in a] != [r["prompt"] for r in b]:
            raise ValueError("dumps are not aligned on identical prompts")
        res = client.judge_many([r["prompt"] for r in a], [r["response"] for r in a], [r["response"] for r in b])
        report = res.report(evaluator=f"judge:{args.template}", **labels)
    else:
        report = ev.winrate(a, b, _rewarder(args.rewarder), evaluator=f"oracle:{args.rewarder}", **labels)
    extra = {"inputs": {"a": {"path": args.a, **_read_dump_meta(args.a)}, "b": {"path": args.b, **_read_dump_meta(args.b)}}}
    ev.write_reports([report], args.json, args.csv, extra)
    print(format_table([report], _use_color(args)))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(args.out or default_out() / f"ablate-{cfg.data.task}-seed{cfg.seed}")
    dataset = pl.build_dataset(cfg)
    pl.load_or_pretrain_base(cfg, dataset, progress=args.verbose)   # warm the cache before any fan-out
    jobs = [(k, cfg, out / k) for k in ABLATION_KINDS]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            infos = list(pool.map(_train_one, *zip(*jobs)))
    else:
        infos = [_train_one(*j) for j in jobs]
    reports = _compare_dumps(infos, cfg)
    ev.write_reports(reports, out / "comparison.json", out / "comparison.csv",
                     {"runs": {i["kind"]: i for i in infos}})
    print(format_table(reports, _use_color(args)))
    return 0


def _compare_dumps(infos: Sequence[dict], cfg: RunConfig) -> list[ev.WinRateReport]:
    by_kind = {i["kind"]: pl.read_dump(i["dump"]) for i in infos}
    rewarder = _rewarder(cfg.data.task)
    return [ev.winrate(by_kind["meet"], by_kind[k], rewarder, candidate="meet", baseline=k,
                       evaluator=f"oracle:{cfg.data.task}") for k in ABLATION_KINDS if k != "meet"]


def cmd_sweep_temp(args) -> int:
    run_dir = Path(args.run)
    rec = pl.load_run(run_dir)
    cfg_path = run_dir / "config.ini"
    cfg = load_config(cfg_path if cfg_path.exists() else None)
    dataset = pl.build_dataset(cfg)
    val = _validation_prompts(dataset)
    prompts = [e.prompt for e in val]
    if args.baseline:
        baseline = pl.read_dump(args.baseline)
    else:
        baseline = [(e.prompt, e.y_w if e.pairwise else e.response) for e in val]
    temps = _parse_floats(args.temps or cfg.eval.temps)
    adapter = None if rec.token_set is None else rec.token_set.select(args.adapter)
    rows = ev.temperature_sweep(rec.state, adapter, prompts, temps, _rewarder(args.rewarder or cfg.data.task),
                                baseline, seed=args.seed, max_len=cfg.eval.max_len)
    out = Path(args.out or run_dir / "sweep_temp.csv")
    ev.write_sweep_csv(rows, out)
    for t, d in rows:
        print(f"T={t:<5g} delta={_color(f'{d:+.2f}', d, _use_color(args))}")
    print(f"wrote {out}")
    return 0


def cmd_sweep_capacity(args) -> int:
    cfg = _config(args)
    cfg.adapter.kind = args.adapter_kind
    grid = _capacity_grid(args.grid, args.adapter_kind)
    seeds = [int(s) for s in _parse_floats(args.seeds)] if args.seeds else [cfg.seed]
    out = Path(args.out or default_out() / f"capacity-{args.adapter_kind}")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    rewarder = _rewarder(cfg.data.task)
    for seed in seeds:
        cfg.seed = seed
        coh = _train_one("coh", cfg, out / f"seed{seed}" / "coh")
        for size in grid:
            if args.adapter_kind == "soft_prompt":
                cfg.adapter.prompt_length = size
            else:
                cfg.adapter.rank = size
            info = _train_one("meet", cfg, out / f"seed{seed}" / f"meet-{size}")
            rep = ev.winrate(pl.read_dump(info["dump"]), pl.read_dump(coh["dump"]), rewarder)
            rows.append((seed, size, rep.delta, info["config_hash"], coh["config_hash"]))
            print(f"seed {seed} capacity {size:>3} delta vs coh {_color(f'{rep.delta:+.2f}', rep.delta, _use_color(args))}")
    with open(out / "capacity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "capacity", "delta", "config_hash", "baseline_config_hash"])
        w.writerows(rows)
    print(f"wrote {out / 'capacity.csv'}")
    return 0


def _capacity_grid(name: str, kind: str) -> tuple[int, ...]:
    if name == "paper":
        return CAPACITY_GRIDS[f"paper-{kind}"]
    if name == "desk":
        return CAPACITY_GRIDS["desk"]
    sizes = tuple(int(v) for v in _parse_floats(name))
    if not sizes or min(sizes) < 1:
        raise UsageError("capacity grid entries must be positive integers")
    return sizes


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meetalign", description="Control-token preference alignment on a micro transformer.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--color", choices=("auto", "always", "never"), default="auto")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--task", choices=("sort", "upper"))
        sp.add_argument("--data", help="JSONL preference file instead of a synthetic task")
        sp.add_argument("--out")

    g = sub.add_parser("gen-data", help="write a synthetic preference dataset")
    g.add_argument("--task", choices=("sort", "upper"), default="sort")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--pointwise", action="store_true")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    with_config(t)
    t.add_argument("--kind", choices=pl.RUN_KINDS)
    t.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", help="dump responses from a trained run")
    gen.add_argument("--run", required=True, help="run directory or checkpoint file")
    gen.add_argument("--adapter", help="good, bad, level<k> or none")
    gen.add_argument("--temperature", type=float, default=0.0)
    gen.add_argument("--max-len", type=int, default=0)
    gen.add_argument("--prompts", help="prompt file (one per line) or JSONL with a prompt field")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out")
    gen.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="win rate of dump A against dump B")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e.add_argument("--rewarder", default="sort")
    e.add_argument("--judge", metavar="URL", help="remote judge endpoint instead of an oracle rewarder")
    e.add_argument("--template", choices=sorted(TEMPLATES), default="dialogue")
    e.add_argument("--timeout", type=float, default=30.0)
    e.add_argument("--label-a")
    e.add_argument("--label-b")
    e.add_argument("--json")
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train all five variants and compare them against meet")
    with_config(a)
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep-temp", help="delta against a fixed baseline across sampling temperatures")
    s.add_argument("--run", required=True)
    s.add_argument("--temps")
    s.add_argument("--adapter", default="good")
    s.add_argument("--baseline", help="baseline dump; defaults to the preferred validation responses")
    s.add_argument("--rewarder")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep_temp)

    c = sub.add_parser("sweep-capacity", help="delta against CoH across prompt lengths or LoRA ranks")
    with_config(c)
    c.add_argument("--adapter-kind", choices=("soft_prompt", "lora"), default="soft_prompt")
    c.add_argument("--grid", default="desk", help="desk, paper, or a comma list of sizes")
    c.add_argument("--seeds", help="comma list of seeds")
    c.set_defaults(func=cmd_sweep_capacity)
    return p


def cli_main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help
        return 0 if not exc.code else 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2


def main() -> None:
    sys.exit(cli_main())
