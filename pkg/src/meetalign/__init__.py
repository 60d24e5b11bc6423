"""Two-step control-token alignment (parameter-efficient, then joint) on a numpy micro transformer."""

from .adapters import ControlTokenSet, make_handcrafted_set, make_lora_set, make_soft_prompt_set, merge_lora
from .config import RunConfig, load_config
from .data import Dataset, PreferenceExample, gen_synthetic, load_jsonl
from .evaluation import Verdict, WinRateReport, compare, rouge_l, winrate
from .model import ModelConfig, ModelState, Tokenizer
from .pipeline import generate_eval_dump, run_variant

__version__ = "0.1.0"

__all__ = [
    "ControlTokenSet", "Dataset", "ModelConfig", "ModelState", "PreferenceExample", "RunConfig", "Tokenizer",
    "Verdict", "WinRateReport", "compare", "gen_synthetic", "generate_eval_dump", "load_config", "load_jsonl",
    "make_handcrafted_set", "make_lora_set", "make_soft_prompt_set", "merge_lora", "rouge_l", "run_variant",
    "winrate",
]
