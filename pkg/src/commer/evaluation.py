"""Metrics and experiment reports.

Perplexity is exp(total target NLL / total target tokens), computed from the
same per-token NLLs the generator's loss produces, so the metric has a single
source of truth. ROUGE-L is token-level F1 over the longest common
subsequence with lowercased whitespace tokenization (the variant matters for
absolute values; it is pinned here). Reports emit CSV next to SVG figures.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .backbone import Backbone
from .data import Example
from .errors import ContractViolation
from .pipeline import (ModelParts, decode_example, example_nll,
                       example_prompt_tokens, pick_docs)
from .training import Checkpoint, parts_from_checkpoint

RESULT_FIELDS = ("method", "m", "n_docs_train", "n_docs_test", "prompt_tokens",
                 "perplexity", "rouge_l", "n_examples", "seed")


@dataclass
class EvalResult:
    method: str
    m: int
    n_docs_train: int
    n_docs_test: int
    prompt_tokens: int          # mean reported prompt length, rounded
    perplexity: float
    rouge_l: float | None
    n_examples: int
    seed: int

    def __post_init__(self):
        if self.perplexity < 1.0 - 1e-9:
            raise ContractViolation("perplexity below 1")
        if self.rouge_l is not None and not 0.0 <= self.rouge_l <= 1.0:
            raise ContractViolation("rouge_l outside [0, 1]")


# --------------------------------------------------------------------------
# ROUGE-L
# --------------------------------------------------------------------------


def _lcs_len(a: list[str], b: list[str]) -> int:
    """Two-row dynamic program for the longest common subsequence length."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, yv in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == yv else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS F1 over lowercased whitespace tokens; empty/empty is 1 by convention."""
    cand = candidate.lower().split()
    ref = reference.lower().split()
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = _lcs_len(cand, ref)
    if lcs == 0:
        return 0.0
    r = lcs / len(ref)
    p = lcs / len(cand)
    return 2.0 * r * p / (r + p)


# --------------------------------------------------------------------------
# Perplexity and full evaluations
# --------------------------------------------------------------------------


def dataset_perplexity(parts: ModelParts, examples: list[Example], n_docs: int,
                       seed: int = 0) -> tuple[float, float, int]:
    """Corpus-level perplexity over target tokens, teacher forced.

    Returns (perplexity, mean prompt tokens, n_examples). Document subsets
    are chosen deterministically from `seed` and the example index.
    """
    if not examples:
        raise ContractViolation("empty evaluation set")
    total_nll, total_tokens, total_prompt = 0.0, 0, 0
    for idx, ex in enumerate(examples):
        docs = pick_docs(ex, n_docs, seed, idx)
        nll = example_nll(parts, ex, docs)
        total_nll += float(nll.sum(dtype=np.float64))
        total_tokens += nll.shape[0]
        total_prompt += example_prompt_tokens(parts, ex, docs)
    ppl = math.exp(total_nll / total_tokens)
    return ppl, total_prompt / len(examples), len(examples)


def mean_rouge(parts: ModelParts, examples: list[Example], n_docs: int,
               seed: int = 0, max_examples: int | None = None,
               max_new_tokens: int = 96) -> float:
    cap = max_examples or len(examples)
    scores = []
    for idx, ex in enumerate(examples[:cap]):
        docs = pick_docs(ex, n_docs, seed, idx)
        scores.append(rouge_l(decode_example(parts, ex, docs, max_new_tokens), ex.y))
    return float(np.mean(scores))


def evaluate(ckpt: Checkpoint, backbone: Backbone, examples: list[Example],
             n_docs_test: int, seed: int = 0, rouge_examples: int | None = None
             ) -> EvalResult:
    """Evaluate a checkpoint on a dataset at a given test-time document count."""
    parts = parts_from_checkpoint(ckpt, backbone)
    ppl, mean_prompt, n = dataset_perplexity(parts, examples, n_docs_test, seed)
    rouge = None
    if rouge_examples:
        rouge = mean_rouge(parts, examples, n_docs_test, seed, rouge_examples)
    return EvalResult(method=ckpt.config.method, m=ckpt.config.m,
                      n_docs_train=ckpt.config.n_docs, n_docs_test=n_docs_test,
                      prompt_tokens=round(mean_prompt), perplexity=ppl,
                      rouge_l=rouge, n_examples=n, seed=seed)


# --------------------------------------------------------------------------
# Power-law fit (quality vs document count)
# --------------------------------------------------------------------------


@dataclass
class PowerLawFit:
    intercept: float  # a in log(ppl) = a + b log(n)
    exponent: float   # b
    r2: float


def powerlaw_fit(points: list[tuple[int, float]]) -> PowerLawFit:
    """Least squares of log(ppl) on log(n_docs)."""
    if len({n for n, _ in points}) < 3:
        raise ContractViolation("need at least 3 distinct document counts")
    for n, p in points:
        if n < 1 or p <= 1.0:
            raise ContractViolation("power-law fit needs n >= 1 and perplexity > 1")
    lx = np.log([float(n) for n, _ in points])
    ly = np.log([float(p) for _, p in points])
    sxx = float(((lx - lx.mean()) ** 2).sum())
    if sxx == 0.0:
        raise ContractViolation("degenerate document counts")
    b = float(((lx - lx.mean()) * (ly - ly.mean())).sum()) / sxx
    a = float(ly.mean() - b * lx.mean())
    resid = ly - (a + b * lx)
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return PowerLawFit(intercept=a, exponent=b, r2=r2)


# --------------------------------------------------------------------------
# Generalization matrix
# --------------------------------------------------------------------------


@dataclass
class GenMatrix:
    grid: list[int]
    delta: dict          # (i, j) -> float, absent cells missing
    perplexity: dict     # (i, j) -> float

    def cell(self, i: int, j: int) -> float | None:
        return self.delta.get((i, j))


def gen_matrix(ckpts: dict[int, Checkpoint], backbone: Backbone,
               examples: list[Example], grid: list[int], seed: int = 0) -> GenMatrix:
    """delta[i][j] = perplexity(test with i docs, model trained with j docs)
    minus the j-docs diagonal; the diagonal itself is zero by construction."""
    ms = {c.config.m for c in ckpts.values()}
    methods = {c.config.method for c in ckpts.values()}
    if len(ms) > 1 or len(methods) > 1:
        raise ContractViolation("generalization matrix requires a shared m and method")
    ppl: dict = {}
    for j, ckpt in sorted(ckpts.items()):
        parts = parts_from_checkpoint(ckpt, backbone)
        for i in grid:
            ppl[(i, j)], _, _ = dataset_perplexity(parts, examples, i, seed)
    delta = {}
    for j in sorted(ckpts):
        if (j, j) not in ppl:
            continue
        for i in grid:
            if (i, j) in ppl:
                delta[(i, j)] = 0.0 if i == j else ppl[(i, j)] - ppl[(j, j)]
    return GenMatrix(grid=list(grid), delta=delta, perplexity=ppl)


# --------------------------------------------------------------------------
# CSV + figure reports
# --------------------------------------------------------------------------


def _csv_val(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(path, results: list[EvalResult]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(RESULT_FIELDS) + "\n")
        for r in results:
            f.write(",".join(_csv_val(getattr(r, k)) for k in RESULT_FIELDS) + "\n")


def read_results_csv(path) -> list[EvalResult]:
    out = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        if tuple(header) != RESULT_FIELDS:
            raise ContractViolation(f"{path}: unexpected results header {header}")
        for line in f:
            vals = line.rstrip("\n").split(",")
            d = dict(zip(RESULT_FIELDS, vals))
            out.append(EvalResult(
                method=d["method"], m=int(d["m"]),
                n_docs_train=int(d["n_docs_train"]), n_docs_test=int(d["n_docs_test"]),
                prompt_tokens=int(d["prompt_tokens"]), perplexity=float(d["perplexity"]),
                rouge_l=float(d["rouge_l"]) if d["rouge_l"] else None,
                n_examples=int(d["n_examples"]), seed=int(d["seed"])))
    return out


def _median_curves(results: list[EvalResult]):
    """Median over seeds for each (method, n_docs_test, m) cell, returned as
    one cost/quality curve per (method, n_docs_test), ordered by m."""
    cells: dict = {}
    for r in results:
        cells.setdefault((r.method, r.n_docs_test, r.m), []).append(r)
    curves: dict = {}
    for (method, nd, m), rs in sorted(cells.items()):
        ppl = float(np.median([r.perplexity for r in rs]))
        cost = float(np.median([r.prompt_tokens for r in rs]))
        rouges = [r.rouge_l for r in rs if r.rouge_l is not None]
        rouge = float(np.median(rouges)) if rouges else None
        curves.setdefault((method, nd), []).append(
            {"m": m, "prompt_tokens": cost, "perplexity": ppl, "rouge_l": rouge})
    return curves


def budget_crossover(results: list[EvalResult]) -> int | None:
    """Largest prompt-token budget at which the best compression-based result
    within budget still beats the best prompt-tuning result within budget."""
    commer = [r for r in results if r.method != "prompt_tuning"]
    pt = [r for r in results if r.method == "prompt_tuning"]
    if not commer or not pt:
        return None
    budgets = sorted({r.prompt_tokens for r in results})
    best = None
    for b in budgets:
        cs = [r.perplexity for r in commer if r.prompt_tokens <= b]
        ps = [r.perplexity for r in pt if r.prompt_tokens <= b]
        if cs and (not ps or min(cs) < min(ps)):
            best = b
    return best


def tradeoff_report(results: list[EvalResult], out_dir,
                    m_grid: tuple = (4, 8, 16, 32, 64, 128),
                    config_hash: str = "") -> dict:
    """Cost/quality trade-off: results.csv plus one SVG per quality metric,
    with perplexity drawn so quality increases upward. Returns artifact paths
    and any missing (method, n_docs, m) grid cells."""
    from .plots import new_figure, save_svg

    os.makedirs(out_dir, exist_ok=True)
    paths = {"results_csv": os.path.join(out_dir, "results.csv")}
    write_results_csv(paths["results_csv"], results)

    have = {(r.method, r.n_docs_test, r.m) for r in results}
    missing = []
    for method in sorted({r.method for r in results}):
        for nd in sorted({r.n_docs_test for r in results if r.method == method}):
            for m in m_grid:
                if (method, nd, m) not in have:
                    missing.append({"method": method, "n_docs": nd, "m": m})

    curves = _median_curves(results)
    fig, ax = new_figure("prompt tokens", "perplexity", "cost vs quality")
    for (method, nd), pts in sorted(curves.items()):
        xs = [p["prompt_tokens"] for p in pts]
        ys = [p["perplexity"] for p in pts]
        ax.plot(xs, ys, marker="o", label=f"{method}, {nd} docs")
    ax.invert_yaxis()
    ax.set_xscale("log")
    ax.legend(fontsize=7)
    paths["perplexity_svg"] = os.path.join(out_dir, "tradeoff_perplexity.svg")
    save_svg(fig, paths["perplexity_svg"], config_hash)

    if any(r.rouge_l is not None for r in results):
        fig, ax = new_figure("prompt tokens", "ROUGE-L", "cost vs quality")
        for (method, nd), pts in sorted(curves.items()):
            pts = [p for p in pts if p["rouge_l"] is not None]
            if pts:
                ax.plot([p["prompt_tokens"] for p in pts],
                        [p["rouge_l"] for p in pts], marker="o",
                        label=f"{method}, {nd} docs")
        ax.set_xscale("log")
        ax.legend(fontsize=7)
        paths["rouge_svg"] = os.path.join(out_dir, "tradeoff_rouge.svg")
        save_svg(fig, paths["rouge_svg"], config_hash)

    summary = {"budget_crossover": budget_crossover(results),
               "missing_cells": missing}
    paths["crossover_json"] = os.path.join(out_dir, "crossover.json")
    with open(paths["crossover_json"], "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    return {"paths": paths, **summary}


def matrix_report(gm: GenMatrix, out_dir, config_hash: str = "") -> dict:
    """Generalization matrix: matrix.csv (i, j, delta) and a heatmap SVG."""
    from .plots import save_svg
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "matrix.csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("i,j,delta\n")
        for (i, j), v in sorted(gm.delta.items()):
            f.write(f"{i},{j},{v!r}\n")

    grid = gm.grid
    js = sorted({j for _, j in gm.delta})
    arr = np.full((len(grid), len(js)), np.nan)
    for (i, j), v in gm.delta.items():
        arr[grid.index(i), js.index(j)] = v
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    im = ax.imshow(arr, cmap="RdBu_r", aspect="auto")
    ax.set_xticks(range(len(js)), [str(j) for j in js])
    ax.set_yticks(range(len(grid)), [str(i) for i in grid])
    ax.set_xlabel("documents at training")
    ax.set_ylabel("documents at test")
    for r in range(len(grid)):
        for c in range(len(js)):
            if not np.isnan(arr[r, c]):
                ax.text(c, r, f"{arr[r, c]:.3f}", ha="center", va="center", fontsize=7)
    fig.colorbar(im, ax=ax, label="perplexity delta vs diagonal")
    svg_path = os.path.join(out_dir, "matrix.svg")
    save_svg(fig, svg_path, config_hash)
    return {"csv": csv_path, "svg": svg_path}


def scaling_report(points_by_label: dict, out_dir, config_hash: str = "") -> dict:
    """Document-count scaling: scaling.csv plus a log-log SVG with the fitted
    power law per labeled series."""
    from .plots import new_figure, save_svg

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "scaling.csv")
    fits = {}
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("label,n_docs,perplexity\n")
        for label, pts in sorted(points_by_label.items()):
            for n, p in pts:
                f.write(f"{label},{n},{p!r}\n")
    fig, ax = new_figure("documents", "perplexity", "document-count scaling")
    for label, pts in sorted(points_by_label.items()):
        xs = [n for n, _ in pts]
        ys = [p for _, p in pts]
        ax.plot(xs, ys, marker="o", linestyle="none", label=label)
        try:
            fit = powerlaw_fit(pts)
        except ContractViolation:
            continue
        fits[label] = fit
        xf = np.linspace(min(xs), max(xs), 50)
        ax.plot(xf, np.exp(fit.intercept) * xf ** fit.exponent, linestyle="--",
                label=f"{label} fit: b={fit.exponent:.3f}, R2={fit.r2:.3f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    svg_path = os.path.join(out_dir, "scaling.svg")
    save_svg(fig, svg_path, config_hash)
    return {"csv": csv_path, "svg": svg_path, "fits": fits}
