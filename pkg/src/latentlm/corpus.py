"""Synthetic chained-arithmetic corpus, character tokenizer, answer
extraction, and the consistency-based difficulty scorer.

Problems are left-to-right chains like "12+7-3*2". The worked solution
restates the question, then reduces it one operation per line, so every
suffix of a solution is itself a smaller problem in the same format. The
restatement makes the first reply line a verbatim copy for any question
length, and mixed 2-4 step training forces the "when to stop reducing"
decision to be content-based rather than line-counting:

    12+7-3*2=
    12+7-3*2=
    19-3*2=
    16*2=
    32
    The final answer is:
    ### 32

Character-level tokenization keeps the vocabulary tiny (~50 symbols) while
making multi-digit numbers genuine multi-token work.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from .latent import FusionConfig, GenerationConfig, generate
from .model import Model

PAD_ID = 0
EOS_ID = 1
THINKING_ID = 2
_N_SPECIALS = 3

CHARSET = "0123456789+-*= \n#:.abcdefghijklmnopqrstuvwxyzT"

ANSWER_TEMPLATE = "The final answer is:\n### "

_NUMBER_RE = re.compile(r"[-+]?\d+(?:\.\d+)?")


class Vocabulary:
    """Character-to-id map with reserved PAD / EOS / thinking ids."""

    def __init__(self, charset: str = CHARSET):
        self.charset = charset
        self.char_to_id = {c: i + _N_SPECIALS for i, c in enumerate(charset)}
        self.id_to_char = {i + _N_SPECIALS: c for i, c in enumerate(charset)}
        self.pad_id = PAD_ID
        self.eos_id = EOS_ID
        self.thinking_id = THINKING_ID

    @property
    def size(self) -> int:
        return _N_SPECIALS + len(self.charset)

    def tokenize(self, text: str) -> list[int]:
        unknown = sorted({c for c in text if c not in self.char_to_id})
        if unknown:
            raise ValueError(f"unknown characters: {unknown!r}")
        return [self.char_to_id[c] for c in text]

    def detokenize(self, ids, markers: bool = False) -> str:
        """Map ids back to text. Specials render as '' by default; with
        markers=True the thinking id renders as the literal '<thinking>'."""
        parts = []
        for i in ids:
            i = int(i)
            if i in self.id_to_char:
                parts.append(self.id_to_char[i])
            elif i == THINKING_ID and markers:
                parts.append("<thinking>")
            elif i in (PAD_ID, EOS_ID, THINKING_ID):
                continue
            else:
                raise ValueError(f"id {i} is outside the vocabulary")
        return "".join(parts)

    def token_text(self, token_id: int) -> str:
        return self.detokenize([token_id])


@dataclass
class TaskSpec:
    """Operation/operand pairs are sampled so every intermediate value stays
    within +-intermediate_cap (falling back to whatever moves the value back
    toward zero). Unbounded 2-4 step chains reach five digits, far past what
    a desk-scale model can learn from a couple thousand examples."""

    n_steps_range: tuple[int, int] = (2, 4)
    operand_range: tuple[int, int] = (2, 7)
    ops: tuple[str, ...] = ("+", "-", "*")
    n_examples: int = 2000
    seed: int = 0
    intermediate_cap: int = 20

    def __post_init__(self):
        lo, hi = self.n_steps_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad n_steps_range {self.n_steps_range}")
        a, b = self.operand_range
        if a >= b:
            raise ValueError(f"operand_range must satisfy lo < hi, got {self.operand_range}")
        if not self.ops or any(o not in ("+", "-", "*") for o in self.ops):
            raise ValueError(f"ops must be a non-empty subset of +, -, *, got {self.ops}")
        if self.n_examples < 1:
            raise ValueError("n_examples must be positive")
        if self.intermediate_cap < 1:
            raise ValueError("intermediate_cap must be positive")


@dataclass
class Problem:
    question: str  # the bare expression, e.g. "12+7-3*2"
    cot: str       # worked steps, one "a<op>b=c" line per operation
    answer: float


@dataclass
class TrainingExample:
    """Tokenized problem: question (with '=\\n'), worked steps plus the
    answer template, and the answer digits followed by EOS."""

    question_ids: list[int]
    cot_ids: list[int]
    answer_ids: list[int]

    def __post_init__(self):
        if not (self.question_ids and self.cot_ids and self.answer_ids):
            raise ValueError("question, worked steps and answer must all be non-empty")

    def full_ids(self) -> list[int]:
        return self.question_ids + self.cot_ids + self.answer_ids

    @property
    def question_len(self) -> int:
        return len(self.question_ids)


def _format_number(x) -> str:
    xf = float(x)
    return str(int(xf)) if xf == int(xf) else str(xf)


def generate_problem(spec: TaskSpec, rng: np.random.Generator) -> Problem:
    lo_s, hi_s = spec.n_steps_range
    lo, hi = spec.operand_range
    n_steps = int(rng.integers(lo_s, hi_s + 1))

    def apply(value, op, operand):
        return value + operand if op == "+" else value - operand if op == "-" else value * operand

    acc = int(rng.integers(lo, hi + 1))
    question = str(acc)
    tail: list[str] = []  # rendered "op operand" pieces not yet applied
    values = [acc]
    for _ in range(n_steps):
        operand = int(rng.integers(lo, hi + 1))
        allowed = [o for o in spec.ops if abs(apply(acc, o, operand)) <= spec.intermediate_cap]
        if not allowed:
            # pull back toward zero with the best available op
            allowed = [min(spec.ops, key=lambda o: abs(apply(acc, o, operand)))]
        op = str(rng.choice(allowed))
        acc = apply(acc, op, operand)
        question += op + str(operand)
        tail.append(op + str(operand))
        values.append(acc)

    # reduction chain: value_i followed by the not-yet-applied remainder
    lines = [str(values[i]) + "".join(tail[i:]) + "=" for i in range(1, n_steps)]
    lines.append(str(values[n_steps]))
    return Problem(question=question, cot="\n".join(lines), answer=float(acc))


def generate_corpus(spec: TaskSpec) -> list[Problem]:
    """Deterministic per seed; per-example streams derive from (seed, index)."""
    out = []
    for i in range(spec.n_examples):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, i])))
        out.append(generate_problem(spec, rng))
    return out


def render_problem(problem: Problem) -> str:
    return (
        f"{problem.question}=\n{problem.question}=\n{problem.cot}\n"
        f"{ANSWER_TEMPLATE}{_format_number(problem.answer)}"
    )


def encode_problem(problem: Problem, vocab: Vocabulary) -> TrainingExample:
    return TrainingExample(
        question_ids=vocab.tokenize(problem.question + "=\n"),
        cot_ids=vocab.tokenize(problem.question + "=\n" + problem.cot + "\n" + ANSWER_TEMPLATE),
        answer_ids=vocab.tokenize(_format_number(problem.answer)) + [vocab.eos_id],
    )


def prompt_ids(problem: Problem, vocab: Vocabulary) -> list[int]:
    return vocab.tokenize(problem.question + "=\n")


def save_jsonl(problems, path):
    with open(path, "w") as f:
        for p in problems:
            ans = int(p.answer) if float(p.answer) == int(p.answer) else p.answer
            f.write(json.dumps({"question": p.question, "cot": p.cot, "answer": ans}) + "\n")


def load_jsonl(path) -> list[Problem]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(Problem(rec["question"], rec["cot"], float(rec["answer"])))
    return out


def extract_answer(text: str) -> float | None:
    """Last maximal numeric substring (optional sign, digits, optional
    decimal part), or None when the text contains no number."""
    matches = _NUMBER_RE.findall(text)
    if not matches:
        return None
    return float(matches[-1])


def difficulty_score(model: Model, problem: Problem, vocab: Vocabulary,
                     cfg: FusionConfig, n_samples: int = 5, sampling_seed: int = 0,
                     max_new_tokens: int = 160) -> int:
    """Count of stochastic decodes whose extracted answer misses the gold one.

    Sampling at temperature 1.0 / top-p 0.95 lives only inside this scorer;
    evaluation elsewhere stays greedy. Deterministic per sampling_seed.
    """
    prompt = prompt_ids(problem, vocab)
    gen = GenerationConfig(max_new_tokens=max_new_tokens, eos_id=vocab.eos_id,
                           stop_on_answer=True, token_text=vocab.token_text)
    wrong = 0
    for i in range(n_samples):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([sampling_seed, i])))
        trace = generate(model, prompt, cfg, gen, rng=rng,
                         sample_temperature=1.0, sample_top_p=0.95)
        got = extract_answer(vocab.detokenize(trace.text_token_ids()))
        if got is None or got != problem.answer:
            wrong += 1
    return wrong
