"""Command-line surface: corpus generation, curriculum training, generation,
evaluation, and the analysis suite, all driven by one JSON config.

    latentlm gen-corpus --config run.json --out runs/a
    latentlm train      --config run.json --out runs/a
    latentlm generate   --config run.json --out runs/a --prompt "12+7-3*2"
    latentlm eval       --config run.json --out runs/a
    latentlm analyze    --config run.json --out runs/a --which collapse

Individual fields override via repeated --set dotted.path=value (values are
parsed as JSON, falling back to strings). LTT_SEED overrides the global
seed. Exit codes: 0 success, 1 usage or config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from .analysis import (
    collapse_report,
    difficulty_scaling_stats,
    write_collapse_csv,
    write_difficulty_csv,
    write_trace_csv,
)
from .corpus import (
    Problem,
    TaskSpec,
    Vocabulary,
    encode_problem,
    extract_answer,
    generate_corpus,
    load_jsonl,
    prompt_ids,
    save_jsonl,
)
from .curriculum import ABLATIONS, CurriculumConfig, run_curriculum
from .latent import FusionConfig, GenerationConfig, generate
from .model import Model, ModelConfig, load_checkpoint
from . import tensor as tz


class ConfigError(Exception):
    """Anything wrong with the config file or CLI usage (exit code 1)."""


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "ablation": None,
    "model": {
        "n_layers": 4,
        "n_heads": 4,
        "d_model": 128,
        "d_ff": 512,
        "vocab_size": None,  # null: derive from the built-in character vocabulary
        "max_seq_len": 256,
        "tied_embeddings": False,
        "adapter_hidden_dim": 32,
    },
    "curriculum": {
        "tau": 0.7,
        "k": 2,
        "stage_epochs": [20, 2, 3],
        "learning_rates": [2.2e-3, 5e-4, 5e-4],
        "batch_size": 8,
        "beta1": 0.9,
        "beta2": 0.999,
        "weight_decay": 0.01,
        "warmup_steps": 150,
        "plain_mix_ratio": 0.0,
        "position_jitter": True,
    },
    "fusion": {
        "alpha": 0.6,
        "temperature": 1.0,
        "top_p": 0.8,
        "context_layer": -2,
        "max_latent_run": 2,
        "mode": "fusion",
        "use_adapter": True,
        "post_norm_context": False,
        "detach_fused": False,
    },
    "task": {
        "n_steps_range": [2, 4],
        "operand_range": [2, 7],
        "ops": ["+", "-", "*"],
        "n_examples": 2000,
        "intermediate_cap": 20,
    },
    "eval": {"n_test": 200, "max_new_tokens": 192},
    "paths": {"corpus": "corpus", "checkpoints": "checkpoints", "metrics": "metrics"},
}


@dataclass
class RunConfig:
    seed: int
    ablation: str | None
    model: ModelConfig
    curriculum: CurriculumConfig
    fusion: FusionConfig
    task: TaskSpec
    n_test: int
    max_new_tokens: int
    paths: dict
    raw: dict


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"config: unknown field '{where}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _parse_set(assignments) -> dict:
    tree: dict = {}
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"--set expects dotted.path=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = tree
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return tree


def load_run_config(config_path: str | None, set_args=None) -> RunConfig:
    merged = DEFAULT_CONFIG
    if config_path is not None:
        try:
            with open(config_path) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path} line {e.lineno} column {e.colno}: {e.msg}")
        if not isinstance(user, dict):
            raise ConfigError(f"{config_path}: top level must be a JSON object")
        merged = _merge(merged, user)
    overrides = _parse_set(set_args)
    if overrides:
        merged = _merge(merged, overrides)

    env_seed = os.environ.get("LTT_SEED")
    if env_seed is not None:
        try:
            merged["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"LTT_SEED must be an integer, got {env_seed!r}")

    seed = merged["seed"]
    vocab = Vocabulary()
    model_d = dict(merged["model"])
    if model_d.get("vocab_size") is None:
        model_d["vocab_size"] = vocab.size
    model_d.setdefault("seed", seed)
    task_d = dict(merged["task"])
    task_d["n_steps_range"] = tuple(task_d["n_steps_range"])
    task_d["operand_range"] = tuple(task_d["operand_range"])
    task_d["ops"] = tuple(task_d["ops"])
    task_d.setdefault("seed", seed + 1)
    curriculum_d = dict(merged["curriculum"])
    curriculum_d["stage_epochs"] = tuple(curriculum_d["stage_epochs"])
    curriculum_d["learning_rates"] = tuple(curriculum_d["learning_rates"])
    curriculum_d.setdefault("seed", seed)
    fusion_d = dict(merged["fusion"])
    fusion_d.setdefault("thinking_id", vocab.thinking_id)

    ablation = merged["ablation"]
    if ablation not in ABLATIONS:
        raise ConfigError(f"config: ablation must be one of {ABLATIONS}, got {ablation!r}")
    try:
        return RunConfig(
            seed=seed,
            ablation=ablation,
            model=ModelConfig(**model_d),
            curriculum=CurriculumConfig(**curriculum_d),
            fusion=FusionConfig(**fusion_d),
            task=TaskSpec(**task_d),
            n_test=int(merged["eval"]["n_test"]),
            max_new_tokens=int(merged["eval"]["max_new_tokens"]),
            paths=dict(merged["paths"]),
            raw=merged,
        )
    except TypeError as e:
        raise ConfigError(f"config: {e}")
    except ValueError as e:
        raise ConfigError(f"config: {e}")


# -- shared helpers ----------------------------------------------------------------


def _out_path(args, cfg: RunConfig, section: str, *parts) -> str:
    return os.path.join(args.out, cfg.paths[section], *parts)


def _test_task(cfg: RunConfig) -> TaskSpec:
    d = asdict(cfg.task)
    d["n_examples"] = cfg.n_test
    d["seed"] = cfg.task.seed + 1000
    d["n_steps_range"] = tuple(d["n_steps_range"])
    d["operand_range"] = tuple(d["operand_range"])
    d["ops"] = tuple(d["ops"])
    return TaskSpec(**d)


def _load_split(args, cfg: RunConfig, name: str) -> list[Problem]:
    path = _out_path(args, cfg, "corpus", f"{name}.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing corpus file {path}; run gen-corpus first")
    return load_jsonl(path)


def _eval_fusion_cfg(args, cfg: RunConfig) -> FusionConfig:
    """Inference-time fusion mode: honour the trained manifest when present
    (the no-tt-latent ablation trains with latents but decodes text-only)."""
    manifest_path = _out_path(args, cfg, "checkpoints", "manifest.json")
    mode = cfg.fusion.mode
    if os.path.exists(manifest_path):
        with open(manifest_path) as f:
            mode = json.load(f).get("eval_mode", mode)
    d = asdict(cfg.fusion)
    d["mode"] = mode
    return FusionConfig(**d)


def _final_checkpoint(args, cfg: RunConfig) -> Model:
    base = _out_path(args, cfg, "checkpoints")
    for name in ("stage3.ltt", "stage2.ltt", "stage1.ltt"):
        path = os.path.join(base, name)
        if os.path.exists(path):
            return load_checkpoint(path)
    raise FileNotFoundError(f"no checkpoint found under {base}; run train first")


def evaluate_split(model: Model, problems, vocab: Vocabulary, fusion_cfg: FusionConfig,
                   max_new_tokens: int) -> dict:
    """Greedy generation accuracy via answer extraction, plus latent usage."""
    gen = GenerationConfig(max_new_tokens=max_new_tokens, eos_id=vocab.eos_id,
                           stop_on_answer=True, token_text=vocab.token_text)
    correct = 0
    latent_counts = []
    for p in problems:
        trace = generate(model, prompt_ids(p, vocab), fusion_cfg, gen)
        got = extract_answer(vocab.detokenize(trace.text_token_ids()))
        if got is not None and got == p.answer:
            correct += 1
        latent_counts.append(trace.latent_count())
    return {
        "n": len(problems),
        "accuracy": correct / len(problems) if problems else 0.0,
        "mean_latent_count": float(np.mean(latent_counts)) if latent_counts else 0.0,
        "eval_mode": fusion_cfg.mode,
    }


# -- subcommands --------------------------------------------------------------------


def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    out = _out_path(args, cfg, "corpus")
    os.makedirs(out, exist_ok=True)
    train = generate_corpus(cfg.task)
    test = generate_corpus(_test_task(cfg))
    save_jsonl(train, os.path.join(out, "train.jsonl"))
    save_jsonl(test, os.path.join(out, "test.jsonl"))
    print(f"wrote {len(train)} train / {len(test)} test problems to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    vocab = Vocabulary()
    problems = _load_split(args, cfg, "train")
    corpus = [encode_problem(p, vocab) for p in problems]
    out = _out_path(args, cfg, "checkpoints")
    started = time.time()
    result = run_curriculum(corpus, cfg.model, cfg.curriculum, cfg.fusion,
                            out_dir=out, ablation=cfg.ablation)
    elapsed = time.time() - started
    metrics_dir = _out_path(args, cfg, "metrics")
    os.makedirs(metrics_dir, exist_ok=True)
    with open(os.path.join(metrics_dir, "run_config.json"), "w") as f:
        json.dump(cfg.raw, f, indent=2, sort_keys=True)
    for stage in result.manifest["stages"]:
        print(f"{stage['name']}: mode={stage['mode']} loss {stage['initial_loss']:.4f}"
              f" -> {stage['final_loss']:.4f} ({stage['steps']} steps)")
    print(f"training finished in {elapsed:.1f}s; artifacts under {out}")
    return 0


def cmd_generate(args, cfg: RunConfig) -> int:
    vocab = Vocabulary()
    model = _final_checkpoint(args, cfg)
    fusion_cfg = _eval_fusion_cfg(args, cfg)
    prompt = vocab.tokenize(args.prompt + "=\n")
    gen = GenerationConfig(max_new_tokens=cfg.max_new_tokens, eos_id=vocab.eos_id,
                           stop_on_answer=True, token_text=vocab.token_text)
    trace = generate(model, prompt, fusion_cfg, gen)
    rendered = vocab.detokenize([t.id for t in trace.tokens], markers=True)
    print(args.prompt + "=")
    print(rendered)
    answer = extract_answer(vocab.detokenize(trace.text_token_ids()))
    print(f"[extracted answer: {answer}; latent steps: {trace.latent_count()};"
          f" stop: {trace.stop_reason}]")
    if args.trace_json:
        with open(args.trace_json, "w") as f:
            f.write(trace.to_json(token_text=vocab.token_text,
                                  include_latents=args.dump_latents))
        print(f"trace written to {args.trace_json}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    vocab = Vocabulary()
    model = _final_checkpoint(args, cfg)
    fusion_cfg = _eval_fusion_cfg(args, cfg)
    problems = _load_split(args, cfg, "test")
    metrics = evaluate_split(model, problems, vocab, fusion_cfg, cfg.max_new_tokens)
    out = _out_path(args, cfg, "metrics")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "eval.json"), "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
    print(f"accuracy {metrics['accuracy']:.3f} on {metrics['n']} problems"
          f" (mean latent count {metrics['mean_latent_count']:.2f},"
          f" mode {metrics['eval_mode']})")
    return 0


def cmd_analyze(args, cfg: RunConfig) -> int:
    vocab = Vocabulary()
    model = _final_checkpoint(args, cfg)
    fusion_cfg = _eval_fusion_cfg(args, cfg)
    problems = _load_split(args, cfg, "test")[: args.n_examples]
    out = _out_path(args, cfg, "metrics", args.which)

    if args.which in ("entropy", "attention"):
        gen = GenerationConfig(max_new_tokens=cfg.max_new_tokens, eos_id=vocab.eos_id,
                               stop_on_answer=True, token_text=vocab.token_text)
        traces = [generate(model, prompt_ids(p, vocab), fusion_cfg, gen) for p in problems]
        write_trace_csv(out, traces, fusion_cfg)
    elif args.which == "collapse":
        prompts = [prompt_ids(p, vocab) for p in problems]
        report = collapse_report(model, prompts, fusion_cfg, n_latent=args.n_latent)
        write_collapse_csv(out, report, fusion_cfg)
    elif args.which == "difficulty":
        rows, per_example = difficulty_scaling_stats(
            model, problems, vocab, fusion_cfg,
            sampling_seed=cfg.seed, max_new_tokens=cfg.max_new_tokens)
        write_difficulty_csv(out, rows, per_example, fusion_cfg)
    else:
        raise ConfigError(f"unknown analysis {args.which!r}")
    print(f"analysis '{args.which}' written to {out}")
    return 0


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentlm", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run config (defaults built in)")
        p.add_argument("--set", action="append", dest="set_args", metavar="PATH=VALUE",
                       help="override a config field via dotted path")
        p.add_argument("--out", default="out", help="artifact directory root")

    common(sub.add_parser("gen-corpus", help="write train/test JSONL problem files"))
    common(sub.add_parser("train", help="run the three-stage curriculum"))

    p_gen = sub.add_parser("generate", help="decode one prompt and render the trace")
    common(p_gen)
    p_gen.add_argument("--prompt", required=True, help="bare expression, e.g. 12+7-3*2")
    p_gen.add_argument("--trace-json", default=None, help="also write the trace as JSON")
    p_gen.add_argument("--dump-latents", action="store_true",
                       help="include fused embeddings in the JSON trace")

    common(sub.add_parser("eval", help="held-out accuracy and latent usage"))

    p_an = sub.add_parser("analyze", help="entropy / attention / collapse / difficulty")
    common(p_an)
    p_an.add_argument("--which", required=True,
                      choices=["entropy", "attention", "collapse", "difficulty"])
    p_an.add_argument("--n-examples", type=int, default=20)
    p_an.add_argument("--n-latent", type=int, default=6)
    return parser


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cfg = load_run_config(args.config, args.set_args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
