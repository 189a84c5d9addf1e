"""Three-stage training pipeline.

Stage 1 fine-tunes on explicit worked solutions. Stage 2 inserts thinking
tokens wherever the stage-1 model was unsure about the next target token
and trains with raw hidden-state latents. Stage 3 re-annotates against the
stage-2 model and trains with the full context-prediction fusion.

Everything is a pure function of (corpus, configs, seeds): shuffles,
insertion draws and optimizer state all come off seeded generators, so
repeated runs produce bitwise-identical checkpoints and metrics.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tz
from .corpus import TrainingExample
from .latent import LATENT, TEXT, AnnotatedExample, FusionConfig, lt_forward
from .model import Model, ModelConfig, checkpoint_sha256, init_model, save_checkpoint
from .tensor import Tensor

ABLATIONS = (None, "no_stage2", "no_stage3", "pause", "no_tt_latent", "text_only")


@dataclass
class CurriculumConfig:
    tau: float = 0.7
    k: int = 2
    stage_epochs: tuple[int, int, int] = (1, 2, 4)
    learning_rates: tuple[float, float, float] = (3e-3, 1e-3, 1e-3)
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    warmup_steps: int = 0
    plain_mix_ratio: float = 0.0  # fraction of un-annotated examples mixed into stages 2/3
    position_jitter: bool = True  # random absolute-position offset per example per epoch
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if len(self.stage_epochs) != 3 or len(self.learning_rates) != 3:
            raise ValueError("stage_epochs and learning_rates must have three entries")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.plain_mix_ratio <= 1.0:
            raise ValueError("plain_mix_ratio must lie in [0, 1]")


class SequenceOverflow(ValueError):
    """Raised when thinking-token insertion would exceed max_seq_len."""


# -- optimizer -----------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam with bias correction."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 weight_decay: float = 0.01, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None):
        """One update; params with no gradient are left untouched."""
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps)), optional linear warmup."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# -- annotation -----------------------------------------------------------------


def plain_annotation(example: TrainingExample) -> AnnotatedExample:
    ids = example.full_ids()
    q = example.question_len
    return AnnotatedExample.all_text(ids, [i >= q for i in range(len(ids))])


def compute_confidences(model: Model, example: TrainingExample) -> np.ndarray:
    """Teacher-forced probability of each true next token over the plain
    (un-annotated) sequence: conf[i] = p(ids[i+1] | ids[:i+1])."""
    ids = example.full_ids()
    with tz.no_grad():
        logits = model.forward(model.embed(ids)).logits.data
    z = logits[:-1]
    e = np.exp(z - z.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[np.arange(len(ids) - 1), ids[1:]]


def insert_thinking(example: TrainingExample, confidences: np.ndarray, tau: float,
                    k: int, rng_seed: int, thinking_id: int, max_seq_len: int) -> AnnotatedExample:
    """Insert 0..k thinking tokens before every low-confidence target.

    Anchors are exactly the target positions with confidence < tau; the
    insertion count is Binomial(k, q) with q = clamp((tau - conf)/tau, 0, 1),
    so lower confidence draws more latents. Deterministic per rng_seed.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    ids = example.full_ids()
    q_len = example.question_len
    if len(confidences) != len(ids) - 1:
        raise ValueError("confidences must cover every target position")
    rng = np.random.Generator(np.random.PCG64(rng_seed))

    new_ids: list[int] = list(ids[:q_len])
    new_modes: list[str] = [TEXT] * q_len
    new_mask: list[bool] = [False] * q_len
    anchors: list[int] = []
    for t in range(q_len, len(ids)):
        conf = float(confidences[t - 1])
        if conf < tau:
            anchors.append(t)
            q_prob = min(max((tau - conf) / tau, 0.0), 1.0)
            n = int(rng.binomial(k, q_prob))
            new_ids.extend([thinking_id] * n)
            new_modes.extend([LATENT] * n)
            new_mask.extend([True] * n)
        new_ids.append(ids[t])
        new_modes.append(TEXT)
        new_mask.append(True)
    if len(new_ids) > max_seq_len:
        raise SequenceOverflow(
            f"annotated length {len(new_ids)} exceeds max_seq_len {max_seq_len}"
        )
    return AnnotatedExample(new_ids, new_modes, new_mask, anchors=anchors)


def static_annotation(example: TrainingExample, k: int, thinking_id: int,
                      max_seq_len: int) -> AnnotatedExample:
    """Fixed allocation (the no-stage-2 ablation): one run of k thinking
    tokens right after the question, no confidence involved."""
    ids = example.full_ids()
    q = example.question_len
    new_ids = ids[:q] + [thinking_id] * k + ids[q:]
    modes = [TEXT] * q + [LATENT] * k + [TEXT] * (len(ids) - q)
    mask = [False] * q + [True] * (k + len(ids) - q)
    if len(new_ids) > max_seq_len:
        raise SequenceOverflow(
            f"annotated length {len(new_ids)} exceeds max_seq_len {max_seq_len}"
        )
    return AnnotatedExample(new_ids, modes, mask, anchors=[q])


def annotate_corpus(model: Model, corpus, ccfg: CurriculumConfig, thinking_id: int,
                    max_seq_len: int, seed: int, static: bool = False):
    """Annotate every example; overflowing ones are dropped, not truncated.

    Returns (annotated list, dropped count). Per-example insertion seeds
    derive from (seed, index) so the result is order-stable and replayable.
    """
    out: list[AnnotatedExample] = []
    dropped = 0
    for i, ex in enumerate(corpus):
        try:
            if static:
                out.append(static_annotation(ex, ccfg.k, thinking_id, max_seq_len))
            else:
                conf = compute_confidences(model, ex)
                sub_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
                out.append(insert_thinking(ex, conf, ccfg.tau, ccfg.k, sub_seed,
                                           thinking_id, max_seq_len))
        except SequenceOverflow:
            dropped += 1
    return out, dropped


# -- training loops ---------------------------------------------------------------


def _example_loss(model: Model, ann: AnnotatedExample, fusion_cfg: FusionConfig,
                  start_offset: int = 0) -> Tensor:
    res = lt_forward(model, ann, fusion_cfg, start_offset=start_offset)
    ids = ann.ids
    return tz.cross_entropy(res.logits[:-1], ids[1:], ann.loss_mask[1:])


def _batched_plain_loss(model: Model, batch, offsets) -> Tensor:
    """Mean NLL per unmasked token over a padded batch of latent-free examples."""
    bsz = len(batch)
    t_max = max(len(a.ids) for a in batch)
    vocab = model.config.vocab_size
    rows = []
    valid = np.zeros((bsz, t_max), dtype=bool)
    targets = np.zeros((bsz, t_max), dtype=np.int64)
    mask = np.zeros((bsz, t_max), dtype=bool)
    for i, (ann, off) in enumerate(zip(batch, offsets)):
        n = len(ann.ids)
        padded = list(ann.ids) + [0] * (t_max - n)
        rows.append(model.embed(padded, offset=off).reshape((1, t_max, model.config.d_model)))
        valid[i, :n] = True
        targets[i, : n - 1] = ann.ids[1:]
        mask[i, : n - 1] = ann.loss_mask[1:]
    embs = rows[0] if bsz == 1 else tz.concat(rows, axis=0)
    logits = model.forward_batch(embs, valid)
    return tz.cross_entropy(logits.reshape((bsz * t_max, vocab)),
                            targets.reshape(-1), mask.reshape(-1))


def _trainable_params(model: Model, fusion_cfg: FusionConfig, include_adapter: bool):
    params = []
    for name, p in model.named_parameters():
        if name.startswith("adapter_") and not (include_adapter and fusion_cfg.use_adapter):
            continue
        params.append(p)
    return params


def _train_stage(model: Model, annotated, fusion_cfg: FusionConfig, ccfg: CurriculumConfig,
                 epochs: int, base_lr: float, rng: np.random.Generator,
                 include_adapter: bool, stage_name: str, history: list) -> None:
    """Shuffled mini-batch AdamW with a per-stage cosine schedule. Losses are
    averaged per batch (each example's loss is pre-scaled by 1/batch size)."""
    if not annotated:
        raise ValueError("empty corpus")
    opt = AdamW(_trainable_params(model, fusion_cfg, include_adapter), base_lr,
                ccfg.beta1, ccfg.beta2, ccfg.weight_decay)
    n = len(annotated)
    steps_per_epoch = math.ceil(n / ccfg.batch_size)
    total_steps = max(epochs * steps_per_epoch, 1)
    step = 0
    max_len = model.config.max_seq_len
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            batch = [annotated[int(i)] for i in order[b * ccfg.batch_size : (b + 1) * ccfg.batch_size]]
            lr = cosine_lr(step, total_steps, base_lr, ccfg.warmup_steps)
            opt.zero_grad()
            if not any(a.latent_positions() for a in batch):
                # latent-free batches run as one padded forward
                t_max = max(len(a.ids) for a in batch)
                room = max_len - t_max
                offsets = [int(rng.integers(0, room + 1)) if ccfg.position_jitter and room > 0 else 0
                           for _ in batch]
                loss = _batched_plain_loss(model, batch, offsets)
                loss.backward()
                batch_loss = loss.item()
            else:
                # per-token batch mean: each example weighted by its unmasked count
                counts = [sum(a.loss_mask[1:]) for a in batch]
                total_tokens = sum(counts)
                batch_loss = 0.0
                for ann, count in zip(batch, counts):
                    offset = 0
                    if ccfg.position_jitter:
                        room = max_len - len(ann.ids)
                        if room > 0:
                            offset = int(rng.integers(0, room + 1))
                    loss = _example_loss(model, ann, fusion_cfg, start_offset=offset) * (count / total_tokens)
                    loss.backward()
                    batch_loss += loss.item()
            opt.step(lr)
            step += 1
            history.append({"step": step, "stage": stage_name, "lr": lr, "loss": batch_loss})


def stage1_train(model: Model, corpus, ccfg: CurriculumConfig,
                 fusion_cfg: FusionConfig | None = None, epochs: int | None = None):
    """Explicit worked-solution fine-tuning; question positions masked out."""
    if not corpus:
        raise ValueError("empty corpus")
    fusion_cfg = fusion_cfg or FusionConfig()
    annotated = [plain_annotation(ex) for ex in corpus]
    history: list[dict] = []
    rng = np.random.Generator(np.random.PCG64(ccfg.seed))
    _train_stage(model, annotated, fusion_cfg, ccfg,
                 ccfg.stage_epochs[0] if epochs is None else epochs,
                 ccfg.learning_rates[0], rng, include_adapter=False,
                 stage_name="stage1", history=history)
    return model, history


def stage2_train(model: Model, annotated, fusion_cfg: FusionConfig,
                 ccfg: CurriculumConfig, epochs: int | None = None):
    """Hidden-state latents: teacher-forced segmented forward, mode raw_hidden."""
    history: list[dict] = []
    rng = np.random.Generator(np.random.PCG64(ccfg.seed))
    _train_stage(model, annotated, fusion_cfg, ccfg,
                 ccfg.stage_epochs[1] if epochs is None else epochs,
                 ccfg.learning_rates[1], rng, include_adapter=True,
                 stage_name="stage2", history=history)
    return model, history


def stage3_train(model: Model, annotated, fusion_cfg: FusionConfig,
                 ccfg: CurriculumConfig, epochs: int | None = None):
    """Full context-prediction fusion training."""
    history: list[dict] = []
    rng = np.random.Generator(np.random.PCG64(ccfg.seed))
    _train_stage(model, annotated, fusion_cfg, ccfg,
                 ccfg.stage_epochs[2] if epochs is None else epochs,
                 ccfg.learning_rates[2], rng, include_adapter=True,
                 stage_name="stage3", history=history)
    return model, history


def corpus_loss(model: Model, annotated, fusion_cfg: FusionConfig) -> float:
    """Mean per-example loss under teacher forcing (no grad)."""
    with tz.no_grad():
        losses = [_example_loss(model, a, fusion_cfg).item() for a in annotated]
    return float(np.mean(losses))


# -- full pipeline ------------------------------------------------------------------


@dataclass
class CurriculumResult:
    model: Model
    manifest: dict
    history: list = field(default_factory=list)


def run_curriculum(corpus, model_cfg: ModelConfig, ccfg: CurriculumConfig,
                   fusion_cfg: FusionConfig, out_dir=None, ablation: str | None = None,
                   val_examples=None) -> CurriculumResult:
    """Stage 1, annotate, stage 2, re-annotate, stage 3.

    Ablations:
      no_stage2    static annotation after stage 1, skip stage-2 training
      no_stage3    stage-3 slot trains with raw hidden states (same budget)
      pause        thinking tokens keep their static embedding throughout
      no_tt_latent full training, but inference runs text-only
      text_only    no thinking tokens anywhere (budget-matched plain baseline)

    Writes checkpoints, losses.csv and manifest.json under out_dir when given.
    The manifest carries no timestamps or absolute paths so repeated runs are
    byte-identical.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    if not corpus:
        raise ValueError("empty corpus")
    thinking_id = fusion_cfg.thinking_id
    if thinking_id >= model_cfg.vocab_size:
        raise ValueError("thinking_id outside the model vocabulary")
    val = val_examples if val_examples is not None else corpus[: min(16, len(corpus))]
    val_plain = [plain_annotation(ex) for ex in val]
    text_cfg = FusionConfig(**{**asdict(fusion_cfg), "mode": "text_only"})

    def _mode_cfg(mode: str) -> FusionConfig:
        return FusionConfig(**{**asdict(fusion_cfg), "mode": mode})

    if ablation == "pause":
        stage2_mode, stage3_mode = "pause", "pause"
    elif ablation == "no_stage3":
        stage2_mode, stage3_mode = "raw_hidden", "raw_hidden"
    else:
        stage2_mode, stage3_mode = "raw_hidden", fusion_cfg.mode

    eval_mode = "text_only" if ablation in ("no_tt_latent", "text_only") else stage3_mode

    model = init_model(model_cfg)
    history: list[dict] = []
    stages: list[dict] = []
    dropped_counts = {}

    def _mix_plain(annotated, plain, rng):
        if ccfg.plain_mix_ratio <= 0.0:
            return annotated
        n_extra = int(round(ccfg.plain_mix_ratio * len(plain)))
        picks = rng.choice(len(plain), size=n_extra, replace=False)
        return annotated + [plain[int(i)] for i in picks]

    def _record(name, stage_history, mode, ann_count):
        entry = {
            "name": name,
            "mode": mode,
            "examples": ann_count,
            "steps": len(stage_history),
            "initial_loss": stage_history[0]["loss"] if stage_history else None,
            "final_loss": stage_history[-1]["loss"] if stage_history else None,
            "val_text_loss": corpus_loss(model, val_plain, text_cfg),
        }
        if out_dir is not None:
            ckpt = os.path.join(out_dir, f"{name}.ltt")
            save_checkpoint(model, ckpt)
            entry["checkpoint"] = f"{name}.ltt"
            entry["sha256"] = checkpoint_sha256(ckpt)
        stages.append(entry)
        history.extend(stage_history)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    plain_all = [plain_annotation(ex) for ex in corpus]

    # stage 1: explicit reasoning
    _, h1 = stage1_train(model, corpus, ccfg)
    _record("stage1", h1, "text", len(corpus))

    if ablation == "text_only":
        # same remaining budget, no thinking tokens anywhere
        _, h2 = stage2_train(model, plain_all, text_cfg, ccfg)
        _record("stage2", h2, "text_only", len(plain_all))
        _, h3 = stage3_train(model, plain_all, text_cfg, ccfg)
        _record("stage3", h3, "text_only", len(plain_all))
    elif ablation == "no_stage2":
        ann, dropped = annotate_corpus(model, corpus, ccfg, thinking_id,
                                       model_cfg.max_seq_len, ccfg.seed + 101, static=True)
        dropped_counts["stage3"] = dropped
        mix_rng = np.random.Generator(np.random.PCG64(ccfg.seed + 301))
        ann = _mix_plain(ann, plain_all, mix_rng)
        _, h3 = stage3_train(model, ann, _mode_cfg(stage3_mode), ccfg)
        _record("stage3", h3, stage3_mode, len(ann))
    else:
        ann2, dropped2 = annotate_corpus(model, corpus, ccfg, thinking_id,
                                         model_cfg.max_seq_len, ccfg.seed + 101)
        dropped_counts["stage2"] = dropped2
        mix_rng = np.random.Generator(np.random.PCG64(ccfg.seed + 301))
        ann2 = _mix_plain(ann2, plain_all, mix_rng)
        _, h2 = stage2_train(model, ann2, _mode_cfg(stage2_mode), ccfg)
        _record("stage2", h2, stage2_mode, len(ann2))

        ann3, dropped3 = annotate_corpus(model, corpus, ccfg, thinking_id,
                                         model_cfg.max_seq_len, ccfg.seed + 102)
        dropped_counts["stage3"] = dropped3
        mix_rng3 = np.random.Generator(np.random.PCG64(ccfg.seed + 302))
        ann3 = _mix_plain(ann3, plain_all, mix_rng3)
        _, h3 = stage3_train(model, ann3, _mode_cfg(stage3_mode), ccfg)
        _record("stage3", h3, stage3_mode, len(ann3))

    manifest = {
        "ablation": ablation,
        "model_config": asdict(model_cfg),
        "curriculum_config": asdict(ccfg),
        "fusion_config": asdict(fusion_cfg),
        "stage_modes": {"stage2": stage2_mode, "stage3": stage3_mode},
        "eval_mode": eval_mode,
        "dropped_examples": dropped_counts,
        "stages": stages,
    }
    if out_dir is not None:
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "losses.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "stage", "lr", "loss"])
            for row in history:
                writer.writerow([row["step"], row["stage"], repr(row["lr"]), repr(row["loss"])])
    return CurriculumResult(model, manifest, history)
