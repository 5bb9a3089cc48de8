"""Compress-and-merge soft prompts for frozen language models.

Documents are independently compressed into fixed-size soft prompts by an
adapter-tuned frozen backbone, merged by mean pooling into one order-agnostic
prefix, and fed to the same frozen backbone for response generation. The
package ships the full desk-scale stack: a reverse-mode autodiff core, a tiny
pretrainable backbone, the compression/merging/generation pipeline, a
prompt-tuning baseline, synthetic datasets, a training harness, metrics, and
CSV/SVG experiment reports.
"""

from .backbone import Backbone, BackboneConfig, LoraAdapter, LoraConfig, SoftInput
from .compressor import Compression, CompressionEmbeddings, compress, compress_batch
from .data import Example, gen_knowledge_dataset, gen_pretrain_example, gen_skill_dataset
from .evaluation import EvalResult, evaluate, powerlaw_fit, rouge_l
from .generator import build_input_commer, build_input_prompt_tuning, decode_greedy
from .merger import CompressionStore, compress_concat_docs, merge_concat, merge_mean, store_add
from .training import Checkpoint, RunConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "Checkpoint", "Compression",
    "CompressionEmbeddings", "CompressionStore", "EvalResult", "Example",
    "LoraAdapter", "LoraConfig", "RunConfig", "SoftInput",
    "build_input_commer", "build_input_prompt_tuning", "compress",
    "compress_batch", "compress_concat_docs", "decode_greedy", "evaluate",
    "gen_knowledge_dataset", "gen_pretrain_example", "gen_skill_dataset",
    "load_checkpoint", "merge_concat", "merge_mean", "powerlaw_fit",
    "rouge_l", "save_checkpoint", "store_add", "train",
]
