"""Diagnostics over trained models: step entropy, attention mass on
thinking tokens, feature-collapse geometry via hand-rolled PCA, and the
difficulty-versus-latent-count table.

Everything here is read-only over a frozen model and works on plain numpy
arrays. CSV emitters pair each table with a JSON metadata header echoing
the configuration that produced it. Entropies use the natural logarithm.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tz
from .corpus import Problem, Vocabulary, difficulty_score, prompt_ids
from .latent import FusionConfig, GenerationConfig, build_fused_step, generate
from .model import Model


def step_entropy(dist) -> float:
    """Natural-log entropy -sum(p log p), with 0 log 0 = 0."""
    p = np.asarray(dist, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def thinking_attention_share(attn: np.ndarray, latent_positions) -> float:
    """Head-averaged attention mass on the latent key positions.

    attn is [heads, 1, key_len] (a single query row, rows summing to 1).
    """
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim != 3 or a.shape[1] != 1:
        raise ValueError(f"expected [heads, 1, key_len] attention, got {list(a.shape)}")
    key_len = a.shape[2]
    positions = [int(p) for p in latent_positions]
    if any(p < 0 or p >= key_len for p in positions):
        raise ValueError(f"latent position out of range for key length {key_len}")
    if not positions:
        return 0.0
    return float(a[:, 0, :].mean(axis=0)[positions].sum())


# -- PCA -------------------------------------------------------------------------


@dataclass
class PCAResult:
    projections: np.ndarray        # [n, c]
    explained_variance: np.ndarray  # [c] ratios of total variance, non-increasing
    components: np.ndarray          # [c, d] orthonormal rows


def pca_project(vectors: np.ndarray, n_components: int, tol: float = 1e-9,
                max_iter: int = 10000) -> PCAResult:
    """Top principal components via power iteration with deflation.

    Data is centered; each component is re-orthogonalized against earlier
    ones every iteration, so the returned basis is orthonormal even when
    eigenvalues cluster. Sign convention: the first nonzero coordinate of
    each component is positive. Zero-variance data yields zero projections
    and zero ratios.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca_project needs at least two vectors")
    n, d = x.shape
    if not 1 <= n_components <= min(n - 1, d):
        raise ValueError(f"n_components must lie in [1, {min(n - 1, d)}], got {n_components}")

    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / n
    total = float(np.trace(cov))
    components = np.zeros((n_components, d))
    eigenvalues = np.zeros(n_components)
    if total <= 0.0:
        return PCAResult(np.zeros((n, n_components)), eigenvalues, components)

    work = cov.copy()
    for c in range(n_components):
        v = np.zeros(d)
        v[int(np.argmax(np.diag(work)))] = 1.0
        lam = 0.0
        for _ in range(max_iter):
            w = work @ v
            for prev in components[:c]:
                w -= (w @ prev) * prev
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            v = w / norm
            new_lam = float(v @ work @ v)
            if abs(new_lam - lam) <= tol * max(abs(new_lam), 1e-300):
                lam = new_lam
                break
            lam = new_lam
        first = np.flatnonzero(np.abs(v) > 1e-12)
        if first.size and v[first[0]] < 0:
            v = -v
        components[c] = v
        eigenvalues[c] = max(lam, 0.0)
        work = work - lam * np.outer(v, v)

    return PCAResult(centered @ components.T, eigenvalues / total, components)


# -- feature collapse -------------------------------------------------------------


@dataclass
class CollapseReport:
    """Per latent-step-index geometry across samples: mean pairwise distance
    between the fused input vectors, their PCA projections, and the explained
    variance ratios."""

    mode: str
    n_latent: int
    mean_pairwise_distance: list[float]
    projections: list[np.ndarray]
    explained_variance: list[np.ndarray]


def _mean_pairwise_distance(vectors: np.ndarray) -> float:
    n = vectors.shape[0]
    total = 0.0
    count = 0
    for i in range(n):
        for j in range(i + 1, n):
            total += float(np.linalg.norm(vectors[i] - vectors[j]))
            count += 1
    return total / count


def collapse_report(model: Model, prompts, cfg: FusionConfig, n_latent: int = 6,
                    n_components: int = 3) -> CollapseReport:
    """Force n_latent consecutive thinking steps after each prompt and study
    how the fused inputs spread across samples at every step index."""
    prompts = [list(p) for p in prompts]
    if len(prompts) < 2:
        raise ValueError("collapse_report needs at least two prompts")
    if n_latent < 1:
        raise ValueError("n_latent must be positive")

    fused = np.zeros((len(prompts), n_latent, model.config.d_model))
    with tz.no_grad():
        for pi, prompt in enumerate(prompts):
            res = model.forward(model.embed(prompt))
            for step in range(n_latent):
                position = res.cache.cached_len
                feed, record = build_fused_step(model, cfg, res.hidden, res.logits, position)
                fused[pi, step] = record.e_fusion
                res = model.forward(feed, res.cache)

    c = min(n_components, len(prompts) - 1, model.config.d_model)
    distances = []
    projections = []
    ratios = []
    for step in range(n_latent):
        step_vectors = fused[:, step, :]
        distances.append(_mean_pairwise_distance(step_vectors))
        pca = pca_project(step_vectors, c)
        projections.append(pca.projections)
        ratios.append(pca.explained_variance)
    return CollapseReport(cfg.mode, n_latent, distances, projections, ratios)


# -- difficulty scaling -------------------------------------------------------------


@dataclass
class DifficultyRow:
    bucket: int
    count: int
    mean_latents: float | None
    stderr: float | None


def difficulty_scaling_stats(model: Model, problems, vocab: Vocabulary,
                             cfg: FusionConfig, scorer_model: Model | None = None,
                             n_samples: int = 5, sampling_seed: int = 0,
                             max_new_tokens: int = 160):
    """Bucket problems by consistency-based difficulty (count of wrong
    stochastic decodes, 0..n_samples) and report the mean / standard error of
    greedy-generation latent counts per bucket.

    Returns (rows, per_example) where per_example holds (index, bucket,
    latent_count) for recomputation.
    """
    scorer = scorer_model if scorer_model is not None else model
    gen = GenerationConfig(max_new_tokens=max_new_tokens, eos_id=vocab.eos_id,
                           stop_on_answer=True, token_text=vocab.token_text)
    per_example = []
    for i, problem in enumerate(problems):
        bucket = difficulty_score(scorer, problem, vocab, cfg, n_samples=n_samples,
                                  sampling_seed=sampling_seed + i,
                                  max_new_tokens=max_new_tokens)
        trace = generate(model, prompt_ids(problem, vocab), cfg, gen)
        per_example.append((i, bucket, trace.latent_count()))

    rows = []
    for bucket in range(n_samples + 1):
        counts = [latents for _, b, latents in per_example if b == bucket]
        if not counts:
            rows.append(DifficultyRow(bucket, 0, None, None))
            continue
        mean = float(np.mean(counts))
        stderr = float(np.std(counts, ddof=1) / math.sqrt(len(counts))) if len(counts) > 1 else 0.0
        rows.append(DifficultyRow(bucket, len(counts), mean, stderr))
    return rows, per_example


# -- CSV emission --------------------------------------------------------------------


def _write_metadata(path, cfg: FusionConfig, extra: dict | None = None):
    meta = {"fusion_config": asdict(cfg), "entropy_log_base": "e"}
    if extra:
        meta.update(extra)
    with open(path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def write_trace_csv(out_dir, traces, cfg: FusionConfig):
    """Per-step entropy and latent attention share for a batch of traces."""
    os.makedirs(out_dir, exist_ok=True)
    _write_metadata(os.path.join(out_dir, "trace_metadata.json"), cfg,
                    {"n_examples": len(traces)})
    with open(os.path.join(out_dir, "trace_steps.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["example", "step", "mode", "entropy", "thinking_attention_share"])
        for ei, trace in enumerate(traces):
            for si, tok in enumerate(trace.tokens):
                w.writerow([ei, si, tok.mode, repr(trace.entropies[si]),
                            repr(trace.thinking_attention_share[si])])


def write_collapse_csv(out_dir, report: CollapseReport, cfg: FusionConfig):
    os.makedirs(out_dir, exist_ok=True)
    _write_metadata(os.path.join(out_dir, "collapse_metadata.json"), cfg,
                    {"n_latent": report.n_latent})
    with open(os.path.join(out_dir, "collapse_distances.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "mean_pairwise_distance"] +
                   [f"explained_variance_{i}" for i in range(len(report.explained_variance[0]))])
        for step, dist in enumerate(report.mean_pairwise_distance):
            w.writerow([step, repr(dist)] + [repr(float(r)) for r in report.explained_variance[step]])
    with open(os.path.join(out_dir, "collapse_projections.csv"), "w", newline="") as f:
        w = csv.writer(f)
        n_comp = report.projections[0].shape[1]
        w.writerow(["step", "sample"] + [f"pc{i}" for i in range(n_comp)])
        for step, proj in enumerate(report.projections):
            for si in range(proj.shape[0]):
                w.writerow([step, si] + [repr(float(v)) for v in proj[si]])


def write_difficulty_csv(out_dir, rows, per_example, cfg: FusionConfig):
    os.makedirs(out_dir, exist_ok=True)
    _write_metadata(os.path.join(out_dir, "difficulty_metadata.json"), cfg,
                    {"n_examples": len(per_example)})
    with open(os.path.join(out_dir, "difficulty_buckets.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bucket", "count", "mean_latents", "stderr"])
        for r in rows:
            w.writerow([r.bucket, r.count,
                        "" if r.mean_latents is None else repr(r.mean_latents),
                        "" if r.stderr is None else repr(r.stderr)])
    with open(os.path.join(out_dir, "difficulty_examples.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["example", "bucket", "latent_count"])
        for i, bucket, latents in per_example:
            w.writerow([i, bucket, latents])
