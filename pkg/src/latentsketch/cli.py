"""Reproduction harness: dataset generation, SFT and RL training, evaluation,
ablation suites, the latency benchmark, and attention-map export.

Exit codes: 0 success, 2 validation error, 3 runtime failure.  The env var
LATENT_SKETCH_SEED overrides the config seed.  Every artifact directory gets
the resolved config and the code-version string; file writes are atomic.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time

import numpy as np

from . import CODE_VERSION
from . import autodiff as ad
from . import backbone as bb
from . import diffusion as df
from . import grpo
from . import inference as inf
from . import sft
from . import toyvision as tv
from . import vocab
from .model import Model, ModelConfig, build_model, load_model, save_model
from .util import atomic_write_text, fmt_float, seeded_rng


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 7,
    "model": {
        "layers": 4, "heads": 4, "d": 64, "vocab": 96, "max_len": 256, "k_latent": 4,
        "t_steps": 50, "beta_start": 1e-4, "beta_end": 0.28, "head": "diffusion",
    },
    "data": {
        "task": "grid_rotation", "train_count": 8000, "train_seed": 7,
        "text_only_fraction": 0.0, "file": None,
    },
    "sft": {
        "mode": "joint", "lambda": 1.0, "lr_backbone": 1e-3, "lr_diffusion": 2e-2,
        "steps": 4000, "batch_size": 8, "m_latent": 4, "weight_decay": 0.01,
        "warmup_frac": 0.03, "floor_frac": 0.1, "clip_norm": 1.0,
        "encoder_pretrain_steps": 200, "encoder_lr": 1e-2, "checkpoint_interval": 0,
        "latent_noise": 0.0, "sampled_block_fraction": 0.0, "align_pattern_tokens": True,
    },
    "rl": {
        "group_size": 8, "clip_eps": 0.2, "lr": 1e-4, "temperature": 0.8,
        "max_new_items": 48, "iters": 300, "queries_per_iter": 4, "groups_per_step": 2,
        "ratio_variant": "token", "weight_decay": 0.0, "clip_norm": 1.0,
    },
    "eval": {"n": 1000, "seed": 7000, "mode": "mixed", "max_new_items": 48},
    "paths": {"out_dir": "runs/latest"},
}


def _merge_validate(user: dict, defaults: dict, path: str = "") -> dict:
    """Defaults-applied deep merge; unknown keys are rejected."""
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be a section")
            out[key] = _merge_validate(val, defaults[key], where)
        else:
            out[key] = val
    return out


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            user = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = _merge_validate(user, DEFAULT_CONFIG)
    env_seed = os.environ.get("LATENT_SKETCH_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    return cfg


def write_run_manifest(out_dir: str, cfg: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    resolved = dict(cfg)
    resolved["code_version"] = CODE_VERSION
    atomic_write_text(os.path.join(out_dir, "config.resolved.json"),
                      json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def model_config_from(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    if m["vocab"] != vocab.VOCAB_SIZE:
        raise ConfigError(f"model.vocab must be {vocab.VOCAB_SIZE} (the committed vocabulary)")
    return ModelConfig(layers=m["layers"], heads=m["heads"], d=m["d"], vocab=m["vocab"],
                       max_len=m["max_len"], k_latent=m["k_latent"], t_steps=m["t_steps"],
                       beta_start=m["beta_start"], beta_end=m["beta_end"], head=m["head"])


def sft_config_from(cfg: dict) -> sft.SftConfig:
    s = cfg["sft"]
    return sft.SftConfig(mode=s["mode"], lam=s["lambda"], lr_backbone=s["lr_backbone"],
                         lr_diffusion=s["lr_diffusion"], steps=s["steps"],
                         batch_size=s["batch_size"], m_latent=s["m_latent"], seed=cfg["seed"],
                         weight_decay=s["weight_decay"], warmup_frac=s["warmup_frac"],
                         floor_frac=s["floor_frac"], clip_norm=s["clip_norm"],
                         checkpoint_interval=s["checkpoint_interval"],
                         latent_noise=s["latent_noise"],
                         sampled_block_fraction=s["sampled_block_fraction"])


def rl_config_from(cfg: dict) -> grpo.GrpoConfig:
    r = cfg["rl"]
    return grpo.GrpoConfig(group_size=r["group_size"], clip_eps=r["clip_eps"], lr=r["lr"],
                           temperature=r["temperature"], max_new_items=r["max_new_items"],
                           iters=r["iters"], seed=cfg["seed"],
                           queries_per_iter=r["queries_per_iter"],
                           groups_per_step=r["groups_per_step"],
                           ratio_variant=r["ratio_variant"], weight_decay=r["weight_decay"],
                           clip_norm=r["clip_norm"])


def load_training_data(cfg: dict) -> list[tv.AnnotatedTrace]:
    d = cfg["data"]
    if d["file"]:
        with open(d["file"], "r", encoding="utf-8") as f:
            traces = tv.load_dataset(f.read())
    else:
        traces = tv.generate_dataset(d["task"], d["train_count"], d["train_seed"])
    frac = d["text_only_fraction"]
    if frac > 0:
        traces = [tv.strip_images(t) if seeded_rng(d["train_seed"], "textonly", i).random() < frac
                  else t for i, t in enumerate(traces)]
    return traces


# -- evaluation ---------------------------------------------------------------------


def evaluate(model: Model, traces: list[tv.AnnotatedTrace], mode: str, seed: int,
             max_new_items: int = 48, dump_path: str | None = None) -> dict:
    """Greedy exact-match evaluation; returns the report dict."""
    correct = 0
    t0 = time.time()
    dump_lines = []
    gen_cfg = inf.GenerationConfig(mode=mode, max_new_items=max_new_items, temperature=0.0)
    for i, trace in enumerate(traces):
        rng = seeded_rng(seed, "eval", i)
        res = inf.generate(inf.build_prompt(model, trace), model, gen_cfg, rng)
        pred = inf.extract_answer(res.seq)
        gold = inf.gold_answer(trace)
        ok = grpo.reward(pred, gold) == 1.0
        correct += ok
        dump_lines.append(json.dumps({
            "example": i, "correct": bool(ok),
            "predicted": pred, "gold": gold,
            "generated": res.seq.detokenize(), "truncated": res.truncated,
        }, separators=(",", ":")))
    wall = time.time() - t0
    report = {
        "task": traces[0].task_id if traces else "unknown",
        "mode": mode,
        "checkpoint": None,
        "n_examples": len(traces),
        "exact_match_accuracy": correct / len(traces),
        "per_seed": {str(seed): correct / len(traces)},
        "wall_time": wall,
    }
    if dump_path:
        atomic_write_text(dump_path, "\n".join(dump_lines) + "\n")
    return report


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    if os.path.exists(args.out) and not args.force:
        raise ConfigError(f"{args.out} exists; pass --force to overwrite")
    traces = tv.generate_dataset(args.task, args.count, args.seed)
    atomic_write_text(args.out, tv.dump_dataset(traces))
    if args.pgm:
        pgm_dir = args.out + ".pgm"
        os.makedirs(pgm_dir, exist_ok=True)
        for i, t in enumerate(traces[: args.pgm_limit]):
            with open(os.path.join(pgm_dir, f"trace{i}_input.pgm"), "wb") as f:
                f.write(tv.render_pgm(t.input_image))
            for j, s in enumerate(t.steps):
                if s.image is not None:
                    with open(os.path.join(pgm_dir, f"trace{i}_step{j}.pgm"), "wb") as f:
                        f.write(tv.render_pgm(s.image))
    print(f"wrote {len(traces)} traces to {args.out}")
    return 0


def run_sft_pipeline(cfg: dict, out_dir: str, resume: str | None = None) -> Model:
    write_run_manifest(out_dir, cfg)
    traces = load_training_data(cfg)
    scfg = sft_config_from(cfg)
    start_step = 0
    if resume:
        model, start_step = load_model(resume)
    else:
        mcfg = model_config_from(cfg)
        if scfg.mode == "similarity":
            mcfg.head = "similarity"
        model = build_model(mcfg, cfg["seed"])
        tv.pretrain_encoder(model.store, cfg["sft"]["encoder_pretrain_steps"],
                            cfg["sft"]["encoder_lr"], cfg["seed"])
        if cfg["sft"]["align_pattern_tokens"]:
            tv.align_pattern_tokens(model.store)
    sft.train_sft(model, traces, scfg,
                  metrics_path=os.path.join(out_dir, "metrics.csv"),
                  checkpoint_path=os.path.join(out_dir, "checkpoint.lsk"),
                  start_step=start_step)
    return model


def cmd_train_sft(args) -> int:
    cfg = load_config(args.config)
    out_dir = cfg["paths"]["out_dir"]
    run_sft_pipeline(cfg, out_dir, resume=args.resume)
    print(f"sft run complete: {out_dir}")
    return 0


def cmd_train_rl(args) -> int:
    cfg = load_config(args.config)
    out_dir = cfg["paths"]["out_dir"]
    write_run_manifest(out_dir, cfg)
    model, _ = load_model(args.from_checkpoint)
    traces = load_training_data(cfg)
    rcfg = rl_config_from(cfg)
    grpo.train_rl(model, traces, rcfg,
                  metrics_path=os.path.join(out_dir, "rl_metrics.csv"),
                  checkpoint_path=os.path.join(out_dir, "rl_checkpoint.lsk"),
                  rollout_dump_path=os.path.join(out_dir, "rollouts.txt") if args.dump_rollouts else None)
    print(f"rl run complete: {out_dir}")
    return 0


def cmd_eval(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    model, _ = load_model(args.checkpoint)
    if model.bcfg.vocab != vocab.VOCAB_SIZE:
        raise ConfigError("checkpoint vocabulary does not match this build")
    traces = tv.generate_dataset(args.task, args.n, args.seed)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    dump_path = os.path.join(out_dir, f"eval_{args.task}_{args.mode}_{args.seed}.dump.jsonl")
    report = evaluate(model, traces, args.mode, args.seed,
                      max_new_items=args.max_new_items, dump_path=dump_path)
    report["checkpoint"] = os.path.abspath(args.checkpoint)
    report_path = os.path.join(out_dir, f"eval_{args.task}_{args.mode}_{args.seed}.json")
    atomic_write_text(report_path, json.dumps(report, indent=2) + "\n")
    print(f"exact_match_accuracy {report['exact_match_accuracy']:.4f} on {args.n} examples "
          f"({args.task}, {args.mode}) -> {report_path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out_dir = cfg["paths"]["out_dir"]
    write_run_manifest(out_dir, cfg)
    eval_n, eval_seed = cfg["eval"]["n"], cfg["eval"]["seed"]
    eval_traces = tv.generate_dataset(cfg["data"]["task"], eval_n, eval_seed)
    rows = []
    if args.suite == "table3":
        for mode in ("joint", "text_only", "similarity"):
            sub = copy.deepcopy(cfg)
            sub["sft"]["mode"] = mode
            sub["paths"]["out_dir"] = os.path.join(out_dir, f"table3_{mode}")
            model = run_sft_pipeline(sub, sub["paths"]["out_dir"])
            eval_mode = "language_only" if mode == "text_only" else "mixed"
            rep = evaluate(model, eval_traces, eval_mode, eval_seed,
                           max_new_items=cfg["eval"]["max_new_items"])
            rows.append((mode, eval_mode, rep["exact_match_accuracy"]))
        header = "method,eval_mode,exact_match_accuracy"
        path = os.path.join(out_dir, "table3.csv")
    elif args.suite == "lambda":
        for lam in (0.1, 1.0, 10.0):
            sub = copy.deepcopy(cfg)
            sub["sft"]["lambda"] = lam
            sub["paths"]["out_dir"] = os.path.join(out_dir, f"lambda_{lam}")
            model = run_sft_pipeline(sub, sub["paths"]["out_dir"])
            rep = evaluate(model, eval_traces, "mixed", eval_seed,
                           max_new_items=cfg["eval"]["max_new_items"])
            rows.append((lam, "mixed", rep["exact_match_accuracy"]))
        header = "lambda,eval_mode,exact_match_accuracy"
        path = os.path.join(out_dir, "lambda.csv")
    elif args.suite == "budget":
        for m in (1, 2, 4, 8, 16):
            sub = copy.deepcopy(cfg)
            sub["sft"]["m_latent"] = m
            sub["model"]["k_latent"] = m
            sub["paths"]["out_dir"] = os.path.join(out_dir, f"budget_{m}")
            model = run_sft_pipeline(sub, sub["paths"]["out_dir"])
            rep = evaluate(model, eval_traces, "mixed", eval_seed,
                           max_new_items=cfg["eval"]["max_new_items"])
            rows.append((m, "mixed", rep["exact_match_accuracy"]))
        header = "latent_tokens,eval_mode,exact_match_accuracy"
        path = os.path.join(out_dir, "budget.csv")
    else:
        raise ConfigError(f"unknown suite {args.suite!r}")
    lines = [header] + [",".join(str(x) if not isinstance(x, float) else fmt_float(x) for x in r)
                        for r in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")
    print(f"suite {args.suite} -> {path}")
    return 0


# reference latencies of the full-scale system on an H100, recorded for
# comparison only; never asserted (desk hardware differs by orders of magnitude)
REFERENCE_LATENCY_S = {"text32": 1.0311, "tool_call": 8.3575, "latent32": 3.1001}


def _timed_text_span(model: Model, prompt, n_tokens: int) -> None:
    """Append n greedy non-control tokens (EOS masked) — raw generation cost."""
    work = prompt.copy()
    store, bcfg = model.store, model.bcfg
    from . import sequence as sq
    for _ in range(n_tokens):
        ids, text_mask, latents = sq.to_arrays(work, bcfg.d)
        with ad.no_grad():
            _, logits, _ = bb.forward_batch(store, bcfg, ids[None], text_mask[None], latents[None])
        row = logits.data[0, -1].copy()
        row[list(vocab.CONTROL_IDS)] = -np.inf
        work.append(sq.MixedItem.text(int(np.argmax(row))))


def _timed_latent_block(model: Model, prompt, k: int, t_steps: int, seed: int) -> int:
    """Emit one k-latent block at the given denoise step count; returns sampler calls."""
    from . import sequence as sq
    sched = df.linear_schedule(t_steps, model.cfg.beta_start, model.cfg.beta_end)
    work = prompt.copy()
    work.append(sq.MixedItem.ctrl(sq.START))
    rng = seeded_rng(seed, "bench")
    before = df.CALLS["sample_latent"]
    store, bcfg = model.store, model.bcfg
    for _ in range(k):
        ids, text_mask, latents = sq.to_arrays(work, bcfg.d)
        with ad.no_grad():
            hidden, _, _ = bb.forward_batch(store, bcfg, ids[None], text_mask[None], latents[None])
            c = hidden.data[0, -1] @ store["diffusion_head/cond_w"].data
            e = df.sample_latent(c, store, sched, rng)
        work.append(sq.MixedItem.latent(e))
    return df.CALLS["sample_latent"] - before


def _timed_tool_cycle(model: Model, prompt, trace: tv.AnnotatedTrace, span: int) -> None:
    """Simulated tool call: generate a code span, apply a host-side transform,
    re-encode the edited image, and prefill it through the backbone."""
    from . import sequence as sq
    _timed_text_span(model, prompt, span)
    edited = tv.ToyImage(trace.input_image.height, trace.input_image.width,
                         tv.rotate_quarter(trace.input_image.cells, 1))
    emb = tv.encode_image(model.store, edited, "intermediate")
    work = prompt.copy()
    for row in emb.tokens:
        work.append(sq.MixedItem.latent(row))
    ids, text_mask, latents = sq.to_arrays(work, model.bcfg.d)
    with ad.no_grad():
        bb.forward_batch(model.store, model.bcfg, ids[None], text_mask[None], latents[None])


def cmd_bench_latency(args) -> int:
    if args.repeat < 3:
        raise ConfigError("--repeat must be >= 3")
    model, _ = load_model(args.checkpoint)
    trace = tv.generate_dataset("grid_rotation", 1, 123)[0]
    prompt = inf.build_prompt(model, trace)
    if len(prompt) + max(args.k + 1, args.tool_span) + 1 > model.bcfg.max_len:
        raise ConfigError("prompt plus benchmark span exceeds max_len")

    def median_time(fn) -> float:
        fn()  # warmup
        times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    rows = []
    t_text = median_time(lambda: _timed_text_span(model, prompt, 32))
    rows.append(("text", "32 tokens", "", t_text, REFERENCE_LATENCY_S["text32"]))
    calls = _timed_latent_block(model, prompt, args.k, args.t_steps, 0)
    if calls != args.k:
        raise RuntimeError(f"latent path made {calls} sampler calls, expected {args.k}")
    for t_steps in sorted({10, 25, args.t_steps, 100}):
        t_lat = median_time(lambda ts=t_steps: _timed_latent_block(model, prompt, args.k, ts, 0))
        ref = REFERENCE_LATENCY_S["latent32"] if (args.k == 32 and t_steps == 50) else ""
        rows.append(("latent", f"{args.k} latent steps", t_steps, t_lat, ref))
    t_tool = median_time(lambda: _timed_tool_cycle(model, prompt, trace, args.tool_span))
    rows.append(("tool", f"single tool call ({args.tool_span}-token code span)", "",
                 t_tool, REFERENCE_LATENCY_S["tool_call"]))

    lines = ["path,scope,t_steps,median_s,reference_full_scale_s"]
    for r in rows:
        lines.append(",".join(fmt_float(x) if isinstance(x, float) else str(x) for x in r))
    out = args.out or "bench_latency.csv"
    atomic_write_text(out, "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_export_attn(args) -> int:
    model, _ = load_model(args.checkpoint)
    traces = tv.generate_dataset(args.task, args.example_id + 1, args.seed)
    trace = traces[args.example_id]
    layer = args.layer if args.layer is not None else model.bcfg.layers // 2
    gen_cfg = inf.GenerationConfig(mode="mixed", max_new_items=args.max_new_items, temperature=0.0)
    res = inf.generate(inf.build_prompt(model, trace), model, gen_cfg, seeded_rng(args.seed, "attn", args.example_id))
    inf.export_attention(res.seq, model, layer, args.out)
    print(f"attention heatmap -> {args.out} (+ .values.json)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentsketch",
                                description="mixed text/latent chain-of-thought trainer")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic task dataset")
    g.add_argument("--task", required=True, choices=tv.TASKS)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--pgm", action="store_true", help="also render images as PGM (debug)")
    g.add_argument("--pgm-limit", type=int, default=8)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-sft", help="supervised fine-tuning")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.set_defaults(fn=cmd_train_sft)

    r = sub.add_parser("train-rl", help="GRPO refinement from an SFT checkpoint")
    r.add_argument("--config", required=True)
    r.add_argument("--from-checkpoint", required=True, dest="from_checkpoint")
    r.add_argument("--dump-rollouts", action="store_true")
    r.set_defaults(fn=cmd_train_rl)

    e = sub.add_parser("eval", help="greedy exact-match evaluation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", required=True, choices=tv.TASKS)
    e.add_argument("--mode", default="mixed", choices=("mixed", "language_only"))
    e.add_argument("--n", type=int, required=True)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--max-new-items", type=int, default=48)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("--suite", required=True, choices=("table3", "lambda", "budget"))
    a.add_argument("--config", required=True)
    a.set_defaults(fn=cmd_ablate)

    b = sub.add_parser("bench-latency", help="latency comparison of generation paths")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--k", type=int, default=32)
    b.add_argument("--t-steps", type=int, default=50, dest="t_steps")
    b.add_argument("--repeat", type=int, default=5)
    b.add_argument("--tool-span", type=int, default=128, dest="tool_span",
                   help="code-span length of the simulated tool call")
    b.add_argument("--out", default=None)
    b.set_defaults(fn=cmd_bench_latency)

    x = sub.add_parser("export-attn", help="export a latent-attention heatmap")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--task", default="visual_search", choices=tv.TASKS)
    x.add_argument("--example-id", type=int, required=True, dest="example_id")
    x.add_argument("--seed", type=int, default=9000)
    x.add_argument("--layer", type=int, default=None)
    x.add_argument("--max-new-items", type=int, default=48)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_attn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - harness boundary
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
