"""Command-line entry point wiring data generation, pretraining, training,
stores, evaluation, and reports.

Configuration comes from TOML files with -O key=value overrides; every run
directory receives a manifest capturing the resolved config, seed, git
describe string, and input hashes, so a run can be reproduced byte for byte.
"""

from __future__ import annotations

import os

# Kernel parallelism must be pinned before numpy loads its BLAS.
_threads = os.environ.get("COMMER_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import hashlib
import itertools
import json
import subprocess
import sys

import click

from . import data as data_mod
from . import evaluation, merger
from .backbone import Backbone, BackboneConfig, pretrain_backbone
from .compressor import compress
from .errors import CommerError, ConfigError
from .pipeline import decode_example
from .toml_io import load_toml, loads_toml
from .training import (RunConfig, load_checkpoint, parts_from_checkpoint,
                       pretrain_compressor, save_checkpoint, train)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(out_dir, config: dict, seed, inputs: dict) -> None:
    manifest = {
        "config": config,
        "seed": seed,
        "git": _git_describe(),
        "inputs": {k: _sha256_file(v) for k, v in inputs.items()},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


class RunLock:
    """One concurrent invocation per run directory."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, "lock")

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"run directory is locked: {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass
        return False


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        try:
            out[key] = loads_toml(f"v = {value}")["v"]
        except Exception:
            out[key] = value
    return out


def _load_run_config(config_path, overrides) -> RunConfig:
    d = load_toml(config_path) if config_path else {}
    d.update(_parse_overrides(overrides))
    return RunConfig.from_dict(d)


def _load_split(data_dir, split) -> list:
    examples, dropped = data_mod.load_jsonl(os.path.join(data_dir, f"{split}.jsonl"))
    if dropped:
        click.echo(f"dropped {dropped} over-length examples from {split}", err=True)
    return examples


@click.group()
def cli():
    """Compress-and-merge personalization toolkit."""


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------


@cli.group("gen-data")
def gen_data():
    """Generate synthetic datasets."""


def _write_splits(splits, out_dir, params: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name in ("train", "val", "test"):
        data_mod.save_jsonl(os.path.join(out_dir, f"{name}.jsonl"),
                            getattr(splits, name))
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump({"params": params, "meta": {k: v for k, v in splits.meta.items()
                                              if k not in ("styles", "doc_bases")}},
                  f, indent=1, sort_keys=True)


@gen_data.command("skill")
@click.option("--users", type=int, default=64, show_default=True)
@click.option("--docs", type=int, default=8, show_default=True)
@click.option("--examples-per-user", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", "out_dir", required=True)
def gen_skill(users, docs, examples_per_user, seed, out_dir):
    """Personalized paraphrasing with per-user style transforms."""
    splits = data_mod.gen_skill_dataset(users, docs, seed,
                                        examples_per_user=examples_per_user)
    _write_splits(splits, out_dir, {"task": "skill", "users": users, "docs": docs,
                                    "examples_per_user": examples_per_user, "seed": seed})
    click.echo(f"wrote {len(splits.train)}/{len(splits.val)}/{len(splits.test)} "
               f"examples to {out_dir}")


@gen_data.command("knowledge")
@click.option("--users", type=int, default=48, show_default=True)
@click.option("--facts", type=int, default=6, show_default=True)
@click.option("--docs", type=int, default=4, show_default=True)
@click.option("--examples-per-user", type=int, default=6, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", "out_dir", required=True)
def gen_knowledge(users, facts, docs, examples_per_user, seed, out_dir):
    """Per-user fact QA where answers live verbatim in one document."""
    splits = data_mod.gen_knowledge_dataset(users, facts, docs, seed,
                                            examples_per_user=examples_per_user)
    _write_splits(splits, out_dir, {"task": "knowledge", "users": users,
                                    "facts": facts, "docs": docs,
                                    "examples_per_user": examples_per_user, "seed": seed})
    click.echo(f"wrote {len(splits.train)}/{len(splits.val)}/{len(splits.test)} "
               f"examples to {out_dir}")


@gen_data.command("pretrain")
@click.option("--examples", "n_examples", type=int, default=600, show_default=True)
@click.option("--max-docs", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", "out_dir", required=True)
def gen_pretrain(n_examples, max_docs, seed, out_dir):
    """Multi-document reconstruction examples for compressor pretraining."""
    examples = data_mod.gen_pretrain_dataset(n_examples, seed, max_docs=max_docs)
    os.makedirs(out_dir, exist_ok=True)
    data_mod.save_jsonl(os.path.join(out_dir, "train.jsonl"), examples)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump({"params": {"task": "pretrain", "examples": n_examples,
                              "max_docs": max_docs, "seed": seed}}, f, indent=1)
    click.echo(f"wrote {len(examples)} examples to {out_dir}")


@gen_data.command("backbone-corpus")
@click.option("--lines", type=int, default=40000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", "out_path", required=True)
def gen_corpus(lines, seed, out_path):
    """Mixed-format text corpus for backbone pretraining (JSON string per line)."""
    gen = data_mod.gen_backbone_corpus(seed)
    with open(out_path, "w", encoding="utf-8") as f:
        for line in itertools.islice(gen, lines):
            f.write(json.dumps(line) + "\n")
    click.echo(f"wrote {lines} corpus lines to {out_path}")


# --------------------------------------------------------------------------
# pretraining and training
# --------------------------------------------------------------------------


def _read_corpus(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


@cli.command("pretrain-backbone")
@click.option("--corpus", "corpus_path", required=True)
@click.option("--steps", type=int, default=4000, show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--lr", type=float, default=3e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--d-model", type=int, default=64, show_default=True)
@click.option("--n-layers", type=int, default=4, show_default=True)
@click.option("--n-heads", type=int, default=4, show_default=True)
@click.option("--d-ff", type=int, default=256, show_default=True)
@click.option("--max-positions", type=int, default=512, show_default=True)
@click.option("--log-every", type=int, default=200, show_default=True)
@click.option("-o", "--out", "out_dir", required=True)
def cmd_pretrain_backbone(corpus_path, steps, batch_size, lr, seed, d_model,
                          n_layers, n_heads, d_ff, max_positions, log_every, out_dir):
    """Train the frozen backbone on next-token prediction, then freeze it."""
    config = BackboneConfig(d_model=d_model, n_layers=n_layers, n_heads=n_heads,
                            d_ff=d_ff, max_positions=max_positions)
    os.makedirs(out_dir, exist_ok=True)
    with RunLock(out_dir):
        bb = pretrain_backbone(_read_corpus(corpus_path), config, steps, seed,
                               batch_size=batch_size, peak_lr=lr, log_every=log_every)
        path = os.path.join(out_dir, "backbone.cmmr")
        bb.save(path)
        write_manifest(out_dir, {"backbone": config.to_dict(), "steps": steps,
                                 "batch_size": batch_size, "lr": lr}, seed,
                       {"corpus": corpus_path})
    click.echo(f"backbone saved to {path} (hash {bb.weight_hash()[:12]}..)")


def _train_like(config_path, overrides, data_dir, backbone_path, out_dir,
                init_path, log_every, pretrain_mode):
    config = _load_run_config(config_path, overrides)
    bb = Backbone.load(backbone_path)
    os.makedirs(out_dir, exist_ok=True)
    with RunLock(out_dir):
        inputs = {"backbone": backbone_path}
        if config_path:
            inputs["config"] = config_path
        if pretrain_mode:
            examples = _load_split(data_dir, "train")
            inputs["train"] = os.path.join(data_dir, "train.jsonl")
            write_manifest(out_dir, config.to_dict(), config.seed, inputs)
            ckpt, _ = pretrain_compressor(config, examples, bb, log_every=log_every)
            save_checkpoint(ckpt, os.path.join(out_dir, "ckpt.bin"))
            from .training import write_config_toml
            write_config_toml(os.path.join(out_dir, "config.toml"), config)
        else:
            train_set = _load_split(data_dir, "train")
            val_set = _load_split(data_dir, "val")
            inputs["train"] = os.path.join(data_dir, "train.jsonl")
            inputs["val"] = os.path.join(data_dir, "val.jsonl")
            init_from = None
            if init_path:
                init_from = load_checkpoint(init_path, bb)
                inputs["init"] = init_path
            write_manifest(out_dir, config.to_dict(), config.seed, inputs)
            ckpt, _ = train(config, train_set, val_set, bb, init_from=init_from,
                            out_dir=out_dir, log_every=log_every)
    click.echo(f"run complete: best val perplexity "
               f"{ckpt.best_perplexity:.4f} at step {ckpt.best_step} -> {out_dir}")


@cli.command("pretrain")
@click.option("--config", "config_path", default=None)
@click.option("-O", "--override", "overrides", multiple=True)
@click.option("--data", "data_dir", required=True)
@click.option("--backbone", "backbone_path", required=True)
@click.option("--log-every", type=int, default=0)
@click.option("-o", "--out", "out_dir", required=True)
def cmd_pretrain(config_path, overrides, data_dir, backbone_path, log_every, out_dir):
    """One-epoch compressor pretraining on reconstruction examples."""
    _train_like(config_path, overrides, data_dir, backbone_path, out_dir,
                None, log_every, pretrain_mode=True)


@cli.command("train")
@click.option("--config", "config_path", default=None)
@click.option("-O", "--override", "overrides", multiple=True)
@click.option("--data", "data_dir", required=True)
@click.option("--backbone", "backbone_path", required=True)
@click.option("--init", "init_path", default=None,
              help="checkpoint to initialize trainable tensors from")
@click.option("--log-every", type=int, default=0)
@click.option("-o", "--out", "out_dir", required=True)
def cmd_train(config_path, overrides, data_dir, backbone_path, init_path,
              log_every, out_dir):
    """Fine-tune a personalization method on a generated dataset."""
    _train_like(config_path, overrides, data_dir, backbone_path, out_dir,
                init_path, log_every, pretrain_mode=False)


# --------------------------------------------------------------------------
# evaluation / generation / reports
# --------------------------------------------------------------------------


@cli.command("eval")
@click.option("--ckpt", "ckpt_path", required=True)
@click.option("--backbone", "backbone_path", required=True)
@click.option("--data", "data_dir", required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--n-docs", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--rouge", "rouge_examples", type=int, default=0,
              help="decode this many examples for ROUGE-L (0 disables)")
@click.option("-o", "--out", "out_path", default=None,
              help="append the result row to this CSV")
def cmd_eval(ckpt_path, backbone_path, data_dir, split, n_docs, seed,
             rouge_examples, out_path):
    """Perplexity (and optional ROUGE-L) of a checkpoint on a dataset split."""
    bb = Backbone.load(backbone_path)
    ckpt = load_checkpoint(ckpt_path, bb)
    examples = _load_split(data_dir, split)
    result = evaluation.evaluate(ckpt, bb, examples, n_docs, seed=seed,
                                 rouge_examples=rouge_examples or None)
    row = {k: getattr(result, k) for k in evaluation.RESULT_FIELDS}
    click.echo(json.dumps(row))
    if out_path:
        existing = []
        if os.path.exists(out_path):
            existing = evaluation.read_results_csv(out_path)
        evaluation.write_results_csv(out_path, existing + [result])


@cli.command("generate")
@click.option("--ckpt", "ckpt_path", required=True)
@click.option("--backbone", "backbone_path", required=True)
@click.option("--doc", "docs", multiple=True, help="document text (repeatable)")
@click.option("--instruction", "-x", required=True)
@click.option("--max-new-tokens", type=int, default=96, show_default=True)
def cmd_generate(ckpt_path, backbone_path, docs, instruction, max_new_tokens):
    """Greedy decoding for one instruction over the given documents."""
    bb = Backbone.load(backbone_path)
    ckpt = load_checkpoint(ckpt_path, bb)
    parts = parts_from_checkpoint(ckpt, bb)
    ex = data_mod.Example(user_id="cli", docs=list(docs), x=instruction, y="")
    click.echo(decode_example(parts, ex, list(docs), max_new_tokens))


@cli.group("report")
def report():
    """Render CSV + SVG reports from evaluation results."""


@report.command("tradeoff")
@click.option("--results", "results_paths", multiple=True, required=True)
@click.option("-o", "--out", "out_dir", required=True)
def report_tradeoff(results_paths, out_dir):
    """Cost/quality curves and the budget-crossover summary."""
    results = []
    for p in results_paths:
        results.extend(evaluation.read_results_csv(p))
    h = hashlib.sha256(json.dumps(sorted(
        [[getattr(r, k) for k in evaluation.RESULT_FIELDS] for r in results],
        key=str)).encode()).hexdigest()[:16]
    out = evaluation.tradeoff_report(results, out_dir, config_hash=h)
    if out["missing_cells"]:
        click.echo(f"missing grid cells: {len(out['missing_cells'])}", err=True)
    click.echo(f"budget crossover: {out['budget_crossover']}")


@report.command("matrix")
@click.option("--ckpt", "ckpt_specs", multiple=True, required=True,
              help="n_docs=path, repeatable")
@click.option("--backbone", "backbone_path", required=True)
@click.option("--data", "data_dir", required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--grid", default="1,2,4,8", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", "out_dir", required=True)
def report_matrix(ckpt_specs, backbone_path, data_dir, split, grid, seed, out_dir):
    """Generalization matrix over train/test document counts."""
    bb = Backbone.load(backbone_path)
    ckpts = {}
    for spec in ckpt_specs:
        j, path = spec.split("=", 1)
        ckpts[int(j)] = load_checkpoint(path, bb)
    examples = _load_split(data_dir, split)
    gm = evaluation.gen_matrix(ckpts, bb, examples,
                               [int(g) for g in grid.split(",")], seed=seed)
    paths = evaluation.matrix_report(gm, out_dir)
    click.echo(f"wrote {paths['csv']} and {paths['svg']}")


@report.command("scaling")
@click.option("--results", "results_paths", multiple=True, required=True)
@click.option("-o", "--out", "out_dir", required=True)
def report_scaling(results_paths, out_dir):
    """Perplexity vs document count with power-law fits, per method/m."""
    results = []
    for p in results_paths:
        results.extend(evaluation.read_results_csv(p))
    series: dict = {}
    for r in results:
        if r.n_docs_test >= 1:
            series.setdefault(f"{r.method} m={r.m}", []).append(
                (r.n_docs_test, r.perplexity))
    out = evaluation.scaling_report(series, out_dir)
    for label, fit in out["fits"].items():
        click.echo(f"{label}: exponent {fit.exponent:.4f}, R2 {fit.r2:.4f}")


# --------------------------------------------------------------------------
# store
# --------------------------------------------------------------------------


@cli.group("store")
def store():
    """Per-user compression stores with O(1) incremental updates."""


@store.command("add")
@click.option("--dir", "store_dir", required=True)
@click.option("--user", "user_id", default=None)
@click.option("--doc-file", type=click.Path(exists=True), default=None)
@click.option("--text", default=None)
@click.option("--ckpt", "ckpt_path", required=True)
@click.option("--backbone", "backbone_path", required=True)
@click.option("--keep-texts", is_flag=True, default=False,
              help="retain document text for audit mode")
def store_add_cmd(store_dir, user_id, doc_file, text, ckpt_path, backbone_path,
                  keep_texts):
    """Compress one document and fold it into the user's aggregate."""
    if (doc_file is None) == (text is None):
        raise ConfigError("provide exactly one of --doc-file or --text")
    if doc_file:
        with open(doc_file, encoding="utf-8") as f:
            text = f.read()
    bb = Backbone.load(backbone_path)
    ckpt = load_checkpoint(ckpt_path, bb)
    parts = parts_from_checkpoint(ckpt, bb)
    if os.path.exists(os.path.join(store_dir, "manifest.json")):
        st = merger.CompressionStore.load(store_dir)
    else:
        if user_id is None:
            raise ConfigError("--user is required when creating a new store")
        st = merger.CompressionStore(user_id=user_id, m=ckpt.config.m,
                                     d_model=bb.config.d_model,
                                     keep_texts=keep_texts, directory=store_dir)
    comp = compress(text, parts.embeddings, bb, parts.lora)
    merger.store_add(st, comp, doc_text=text)
    click.echo(f"store {st.user_id}: {st.doc_count} documents, version {st.version}")


@store.command("show")
@click.option("--dir", "store_dir", required=True)
def store_show(store_dir):
    st = merger.CompressionStore.load(store_dir)
    click.echo(json.dumps({"user_id": st.user_id, "n": st.doc_count,
                           "version": st.version, "m": st.m, "d_model": st.d_model,
                           "duplicates": len(st.duplicates),
                           "audit_mode": st.keep_texts}, indent=1))


@store.command("audit")
@click.option("--dir", "store_dir", required=True)
@click.option("--ckpt", "ckpt_path", required=True)
@click.option("--backbone", "backbone_path", required=True)
@click.option("--tol", type=float, default=1e-6, show_default=True)
def store_audit_cmd(store_dir, ckpt_path, backbone_path, tol):
    """Recompress retained documents and verify the aggregate mean."""
    bb = Backbone.load(backbone_path)
    ckpt = load_checkpoint(ckpt_path, bb)
    parts = parts_from_checkpoint(ckpt, bb)
    st = merger.CompressionStore.load(store_dir)
    ok, diff = merger.store_audit(st, parts.embeddings, bb, parts.lora, tol=tol)
    click.echo(f"audit {'PASS' if ok else 'FAIL'}: max abs deviation {diff:.3e}")
    if not ok:
        sys.exit(1)


def main(argv=None) -> int:
    try:
        cli(args=argv, standalone_mode=False)
    except click.exceptions.UsageError as e:
        e.show()
        return 2
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    except CommerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
