"""Continuous thinking tokens: construction, the segmented forward pass,
and the greedy decoding loop that emits and consumes them.

A thinking token occupies a normal sequence position, but its input
embedding is built from the model itself instead of the vocabulary table:
the previous position's layer-I hidden state (context) is blended with a
probability-weighted embedding of the filtered next-token distribution
(prediction). Four modes cover the method and its ablations:

  fusion      alpha * context + (1 - alpha) * prediction
  raw_hidden  context only (optionally adapted)
  pause       the static learned embedding of the thinking id
  text_only   thinking disabled entirely
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .model import KVCache, Model
from .tensor import Tensor

TEXT = "text"
LATENT = "latent"

MODES = ("fusion", "raw_hidden", "pause", "text_only")

# cumulative-mass comparisons tolerate float summation noise at the boundary
TOP_P_EPS = 1e-12


@dataclass
class FusionConfig:
    """Knobs for building thinking-token inputs.

    context_layer indexes the per-layer hidden states like a Python list:
    -1 is the last block's output, -2 the penultimate, 0 the embedding
    stream. max_latent_run should normally match the curriculum's per-insert
    cap k. post_norm_context applies the final output norm to a last-layer
    context vector; detach_fused stops gradients at the fused input
    (ablation only, off by default so the recurrence trains end to end).
    """

    alpha: float = 0.6
    temperature: float = 1.0
    top_p: float = 0.8
    context_layer: int = -2
    thinking_id: int = 2
    max_latent_run: int = 2
    mode: str = "fusion"
    use_adapter: bool = False
    post_norm_context: bool = False
    detach_fused: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.max_latent_run < 1:
            raise ValueError(f"max_latent_run must be >= 1, got {self.max_latent_run}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.thinking_id < 0:
            raise ValueError("thinking_id must be a valid token id")


@dataclass
class AnnotatedExample:
    """Token sequence with per-position text/latent markers and a loss mask.

    loss_mask[i] says whether ids[i] participates as a prediction target
    (question positions are excluded). anchors records, in pre-insertion
    coordinates, the uncertain positions that triggered insertion.
    """

    ids: list[int]
    modes: list[str]
    loss_mask: list[bool]
    anchors: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.ids) == len(self.modes) == len(self.loss_mask)):
            raise ValueError("ids, modes and loss_mask must have equal length")
        if self.modes and self.modes[0] == LATENT:
            raise ValueError("latent token cannot lead the sequence")
        for m in self.modes:
            if m not in (TEXT, LATENT):
                raise ValueError(f"unknown mode marker {m!r}")

    def validate(self, thinking_id: int, max_run: int | None = None):
        for i, (tok, m) in enumerate(zip(self.ids, self.modes)):
            if (m == LATENT) != (tok == thinking_id):
                raise ValueError(f"position {i}: mode {m} inconsistent with id {tok}")
        if max_run is not None:
            run = 0
            for m in self.modes:
                run = run + 1 if m == LATENT else 0
                if run > max_run:
                    raise ValueError(f"latent run exceeds cap {max_run}")

    def latent_positions(self) -> list[int]:
        return [i for i, m in enumerate(self.modes) if m == LATENT]

    @staticmethod
    def all_text(ids, loss_mask) -> "AnnotatedExample":
        ids = list(ids)
        return AnnotatedExample(ids, [TEXT] * len(ids), list(loss_mask))


@dataclass
class FusedStep:
    """One thinking-token construction. distribution is the filtered,
    thinking-masked vector; it is None whenever the prediction branch is
    unused (raw_hidden, pause, or the alpha=1 fusion endpoint). e_fusion
    excludes the positional embedding added at feed time."""

    position: int
    distribution: np.ndarray | None
    e_pred: np.ndarray | None
    h_ctx: np.ndarray | None
    e_fusion: np.ndarray


@dataclass
class TraceToken:
    id: int
    mode: str


@dataclass
class GenerationTrace:
    tokens: list[TraceToken]
    entropies: list[float]
    thinking_attention_share: list[float]
    fused_steps: list[FusedStep]
    stop_reason: str

    def text_token_ids(self) -> list[int]:
        return [t.id for t in self.tokens if t.mode == TEXT]

    def latent_count(self) -> int:
        return sum(1 for t in self.tokens if t.mode == LATENT)

    def to_json_dict(self, token_text=None, include_latents: bool = False) -> dict:
        def render(tok: TraceToken) -> str:
            if tok.mode == LATENT:
                return "<thinking>"
            return token_text(tok.id) if token_text is not None else ""

        out = {
            "tokens": [{"id": t.id, "mode": t.mode, "text": render(t)} for t in self.tokens],
            "entropies": self.entropies,
            "attention_shares": self.thinking_attention_share,
            "stop_reason": self.stop_reason,
        }
        if include_latents:
            out["fused_embeddings"] = [
                {"position": s.position, "e_fusion": s.e_fusion.tolist()} for s in self.fused_steps
            ]
        return out

    def to_json(self, token_text=None, include_latents: bool = False) -> str:
        return json.dumps(self.to_json_dict(token_text, include_latents))


@dataclass
class GenerationConfig:
    max_new_tokens: int
    eos_id: int
    stop_on_answer: bool = False
    token_text: object | None = None  # callable id -> str, needed for stop_on_answer


# -- distribution ops ----------------------------------------------------------


def temperature_scale(logits: Tensor, temperature: float) -> Tensor:
    """softmax(logits / T)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return tz.softmax(tz.div(logits, float(temperature)), axis=-1)


def nucleus_keep_mask(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Boolean mask of the shortest descending-probability prefix reaching
    cumulative mass >= top_p (crossing entry included; ties keep lower ids
    first). Pure numpy so the selection never enters the graph."""
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cutoff = int(np.searchsorted(csum, top_p - TOP_P_EPS, side="left"))
    keep = np.zeros(probs.shape, dtype=bool)
    keep[order[: cutoff + 1]] = True
    return keep


def top_p_filter(dist: Tensor, top_p: float) -> Tensor:
    """Zero everything outside the nucleus, renormalize to sum 1.

    Differentiable through the kept entries; which entries are kept is a
    data-dependent, non-differentiable decision. When the nucleus covers
    every entry the input is returned unchanged (no renormalization noise).
    """
    dist = dist if isinstance(dist, Tensor) else Tensor(dist)
    keep = nucleus_keep_mask(dist.data, top_p)
    if keep.all():
        return dist
    kept = dist * Tensor(keep.astype(np.float64))
    return tz.div(kept, kept.sum())


def mask_thinking(dist: Tensor, thinking_id: int) -> Tensor:
    """Zero the thinking entry and renormalize."""
    dist = dist if isinstance(dist, Tensor) else Tensor(dist)
    if dist.data[thinking_id] == 0.0:
        return dist
    residual = dist.data.sum() - dist.data[thinking_id]
    if residual < 1e-12:
        raise ValueError("degenerate thinking-only distribution")
    hold = np.ones(dist.shape, dtype=np.float64)
    hold[thinking_id] = 0.0
    kept = dist * Tensor(hold)
    return tz.div(kept, kept.sum())


def predictive_embedding(dist: Tensor, embedding_matrix: Tensor) -> Tensor:
    """Probability-weighted mix of embedding rows: sum_w P(w) * E(w)."""
    v = embedding_matrix.shape[0]
    if dist.shape != (v,):
        raise ValueError(f"distribution shape {list(dist.shape)} does not match vocab {v}")
    return (dist.reshape((1, v)) @ embedding_matrix).reshape((embedding_matrix.shape[1],))


def fuse(h_ctx: Tensor | None, e_pred: Tensor | None, cfg: FusionConfig, model: Model) -> Tensor:
    """Blend context and prediction into the thinking-token input vector.

    The alpha endpoints are exact identities, returned without building the
    dead branch: alpha=1 yields the (possibly adapted) context bitwise,
    alpha=0 yields the predictive vector bitwise.
    """
    if cfg.mode == "text_only":
        raise ValueError("fusion disabled")
    if cfg.mode == "pause":
        return model.token_embedding[cfg.thinking_id]
    if cfg.mode == "fusion" and cfg.alpha == 0.0:
        if e_pred is None:
            raise ValueError("fusion mode requires a predictive vector")
        return e_pred
    if h_ctx is None:
        raise ValueError(f"mode {cfg.mode} requires a context vector")
    ctx = model.adapter_apply(h_ctx) if cfg.use_adapter else h_ctx
    if cfg.mode == "raw_hidden" or cfg.alpha == 1.0:
        return ctx
    if e_pred is None:
        raise ValueError("fusion mode requires a predictive vector")
    return ctx * cfg.alpha + e_pred * (1.0 - cfg.alpha)


# -- thinking-step construction -------------------------------------------------


def _filtered_distribution(logits_row: Tensor, cfg: FusionConfig) -> Tensor:
    """Temperature -> nucleus -> thinking mask -> renormalize.

    If the nucleus collapses onto the thinking token alone, fall back to
    masking before filtering for this step so decoding/training can proceed.
    """
    scaled = temperature_scale(logits_row, cfg.temperature)
    filtered = top_p_filter(scaled, cfg.top_p)
    try:
        return mask_thinking(filtered, cfg.thinking_id)
    except ValueError:
        return top_p_filter(mask_thinking(scaled, cfg.thinking_id), cfg.top_p)


def build_fused_step(model: Model, cfg: FusionConfig, hidden: list[Tensor],
                     logits: Tensor, position: int) -> tuple[Tensor, FusedStep]:
    """Construct the thinking input for `position` from the previous
    position's outputs (the last row of the most recent segment).

    Returns the [1, d] embedding to feed (positional row included) and the
    FusedStep record (positional row excluded).
    """
    if cfg.mode == "pause":
        e_fusion = fuse(None, None, cfg, model)
        step = FusedStep(position, None, None, None, np.array(e_fusion.data))
    else:
        h_ctx = hidden[cfg.context_layer][-1]
        resolved = cfg.context_layer if cfg.context_layer >= 0 else len(hidden) + cfg.context_layer
        if cfg.post_norm_context and resolved == len(hidden) - 1:
            h_ctx = model.final_norm(h_ctx.reshape((1, -1))).reshape((h_ctx.shape[0],))
        if cfg.mode == "raw_hidden" or cfg.alpha == 1.0:
            # alpha=1 fusion degenerates to the context branch; building the
            # dead prediction subgraph would reorder backward accumulation
            e_fusion = fuse(h_ctx, None, cfg, model)
            step = FusedStep(position, None, None, np.array(h_ctx.data), np.array(e_fusion.data))
        else:
            dist = _filtered_distribution(logits[-1], cfg)
            e_pred = predictive_embedding(dist, model.token_embedding)
            e_fusion = fuse(h_ctx, e_pred, cfg, model)
            step = FusedStep(position, np.array(dist.data), np.array(e_pred.data),
                             np.array(h_ctx.data), np.array(e_fusion.data))
    if cfg.detach_fused:
        e_fusion = e_fusion.detach()
    feed = e_fusion.reshape((1, e_fusion.shape[0])) + model.position_row(position)
    return feed, step


# -- segmented forward (training path) ------------------------------------------


@dataclass
class LatentForwardResult:
    logits: Tensor  # [T, vocab]
    fused_steps: list[FusedStep]


def lt_forward(model: Model, example: AnnotatedExample, cfg: FusionConfig,
               extra_breaks=(), start_offset: int = 0) -> LatentForwardResult:
    """Forward a mixed text/latent sequence, returning logits at every position.

    Text runs go through the cached forward in contiguous segments; at each
    latent position the input embedding is built from the immediately
    preceding position's outputs and spliced in. The whole pass is one
    differentiation graph, so training propagates through the fused inputs
    into both branches and back through earlier segments.

    extra_breaks adds segment boundaries inside text runs; any contiguous
    re-chunking produces the same logits (cache equivalence). start_offset
    shifts every absolute position (training-time jitter over the learned
    positional table).
    """
    ids = list(example.ids)
    n = len(ids)
    if n == 0:
        raise ValueError("empty sequence")
    if start_offset < 0 or start_offset + n > model.config.max_seq_len:
        raise ValueError(
            f"sequence length {start_offset + n} exceeds max_seq_len {model.config.max_seq_len}"
        )
    example.validate(cfg.thinking_id)
    if example.modes[0] == LATENT:
        raise ValueError("latent token cannot lead the sequence")
    latents = set(example.latent_positions())
    if cfg.mode == "text_only" and latents:
        raise ValueError("fusion disabled")

    if not latents or (cfg.mode == "pause" and not extra_breaks):
        # pause tokens use their static embedding, so this is a plain forward
        res = model.forward(model.embed(ids, offset=start_offset))
        return LatentForwardResult(res.logits, [])

    breaks = set(int(b) for b in extra_breaks)
    cache: KVCache | None = None
    last = None
    pieces: list[Tensor] = []
    fused_steps: list[FusedStep] = []
    idx = 0
    while idx < n:
        k = idx
        while k < n and k not in latents:
            k += 1
        # text segment [idx, k), possibly re-chunked at the requested breaks
        seg_bounds = [idx] + sorted(b for b in breaks if idx < b < k) + [k]
        for lo, hi in zip(seg_bounds[:-1], seg_bounds[1:]):
            if lo == hi:
                continue
            last = model.forward(model.embed(ids[lo:hi], offset=start_offset + lo), cache)
            cache = last.cache
            pieces.append(last.logits)
        if k == n:
            break
        feed, step = build_fused_step(model, cfg, last.hidden, last.logits, start_offset + k)
        fused_steps.append(step)
        last = model.forward(feed, cache)
        cache = last.cache
        pieces.append(last.logits)
        idx = k + 1
    logits = pieces[0] if len(pieces) == 1 else tz.concat(pieces, axis=0)
    return LatentForwardResult(logits, fused_steps)


# -- decoding --------------------------------------------------------------------


def _plain_softmax(row: np.ndarray) -> np.ndarray:
    e = np.exp(row - row.max())
    return e / e.sum()


def _entropy(probs: np.ndarray) -> float:
    nz = probs[probs > 0]
    return float(-(nz * np.log(nz)).sum())


def _latent_attention_share(attn_last_layer: np.ndarray, latent_positions: list[int]) -> float:
    if not latent_positions:
        return 0.0
    row = attn_last_layer[:, -1, :]  # [heads, key_len] for the current query
    return float(row.mean(axis=0)[latent_positions].sum())


def _answer_complete(text: str) -> bool:
    marker = text.rfind("### ")
    if marker < 0:
        return False
    tail = text[marker + 4 :]
    newline = tail.find("\n")
    if newline < 0:
        return False
    return any(c.isdigit() for c in tail[:newline])


def generate(model: Model, prompt_ids, cfg: FusionConfig, gen: GenerationConfig,
             rng: np.random.Generator | None = None,
             sample_temperature: float = 1.0, sample_top_p: float = 1.0) -> GenerationTrace:
    """Greedy decoding that takes a latent step whenever the model elects the
    thinking token; the fused vector is fed as the next input and no discrete
    token reaches the text output.

    A run of consecutive latent steps is capped at cfg.max_latent_run: once
    hit, the thinking id is barred from selection until a text token lands.
    Passing rng switches token selection to nucleus sampling at
    (sample_temperature, sample_top_p); everything else is unchanged.
    """
    prompt = list(prompt_ids)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if gen.max_new_tokens <= 0:
        raise ValueError(f"max_new_tokens must be positive, got {gen.max_new_tokens}")

    tokens: list[TraceToken] = []
    entropies: list[float] = []
    shares: list[float] = []
    fused_steps: list[FusedStep] = []
    latent_positions: list[int] = []
    emitted: list[str] = []
    stop_reason = "max_len"

    with tz.no_grad():
        res = model.forward(model.embed(prompt))
        consecutive = 0
        for _ in range(gen.max_new_tokens):
            row = res.logits.data[-1]
            probs = _plain_softmax(row)
            entropy = _entropy(probs)
            share = _latent_attention_share(res.attentions[-1], latent_positions)

            forbid_thinking = cfg.mode == "text_only" or consecutive >= cfg.max_latent_run
            if rng is None:
                if forbid_thinking:
                    masked = probs.copy()
                    masked[cfg.thinking_id] = -1.0
                    token = int(np.argmax(masked))
                else:
                    token = int(np.argmax(probs))
            else:
                pool = tz.softmax(Tensor(row / sample_temperature)).data
                if forbid_thinking:
                    pool = pool.copy()
                    pool[cfg.thinking_id] = 0.0
                    pool /= pool.sum()
                keep = nucleus_keep_mask(pool, sample_top_p)
                pool = pool * keep
                pool /= pool.sum()
                token = int(rng.choice(pool.size, p=pool))

            position = res.cache.cached_len
            if token == cfg.thinking_id and not forbid_thinking:
                if position >= model.config.max_seq_len:
                    stop_reason = "max_len"  # no room left to process a latent step
                    break
                consecutive += 1
                feed, step = build_fused_step(model, cfg, res.hidden, res.logits, position)
                entropies.append(entropy)
                shares.append(share)
                fused_steps.append(step)
                latent_positions.append(position)
                tokens.append(TraceToken(cfg.thinking_id, LATENT))
                res = model.forward(feed, res.cache)
                continue

            consecutive = 0
            entropies.append(entropy)
            shares.append(share)
            tokens.append(TraceToken(token, TEXT))
            if token == gen.eos_id:
                stop_reason = "eos"
                break
            if gen.token_text is not None:
                emitted.append(gen.token_text(token))
                if gen.stop_on_answer and _answer_complete("".join(emitted)):
                    stop_reason = "answer_emitted"
                    break
            if position >= model.config.max_seq_len:
                stop_reason = "max_len"
                break
            res = model.forward(model.embed([token], offset=position), res.cache)

    return GenerationTrace(tokens, entropies, shares, fused_steps, stop_reason)
