"""Supervised fine-tuning on annotated interleaved traces.

The joint objective couples text cross-entropy over the positions whose next
item is text-or-control (START, END and EOS transitions included) with the
diffusion noise-regression loss over gold latent rows, weighted by lambda.
Two ablation modes: text_only drops the latent blocks from the sequences
entirely; similarity swaps the diffusion term for a cosine loss on a linear
projection of the hidden state.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import diffusion as df
from . import sequence as sq
from . import toyvision as tv
from . import vocab
from .autodiff import Tensor
from .model import Model
from .optim import LrSchedule, adamw_step, clip_grad_norm, cosine_lr
from .util import fmt_float, seeded_rng

MODES = ("joint", "text_only", "similarity")

METRICS_HEADER = "step,ce_loss,diff_loss,total_loss,lr_backbone,lr_diffusion,grad_norm"


@dataclass
class SftConfig:
    mode: str = "joint"
    lam: float = 1.0
    lr_backbone: float = 1e-3
    lr_diffusion: float = 2e-2
    steps: int = 4000
    batch_size: int = 8
    m_latent: int = 4
    seed: int = 7
    weight_decay: float = 0.01
    warmup_frac: float = 0.03
    floor_frac: float = 0.1
    clip_norm: float = 1.0
    checkpoint_interval: int = 0
    latent_noise: float = 0.0
    sampled_block_fraction: float = 0.0  # scheduled sampling: train on own samples

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown sft mode {self.mode!r}")


@dataclass
class SupervisedExample:
    seq: sq.MixedSequence
    text_positions: np.ndarray    # positions whose next item is trained by CE
    ce_targets: np.ndarray        # token ids, aligned with text_positions
    cond_positions: np.ndarray    # positions conditioning each gold latent row
    latent_targets: np.ndarray    # [n_rows, d] pooled encoder rows
    blocks: int = 0


def build_example(trace: tv.AnnotatedTrace, model: Model, m: int,
                  mode: str = "joint", latent_noise: float = 0.0,
                  noise_rng: np.random.Generator | None = None) -> SupervisedExample:
    """Assemble the teacher-forced sequence and its supervision indices.

    latent_noise > 0 perturbs the spliced (context) copies of the gold latents
    so downstream reads stay robust to sampler error at decode time; the
    regression targets themselves remain the clean gold rows.  Raises
    ValueError on max_len overflow; callers drop and count such traces.
    """
    store, cfg = model.store, model.bcfg
    ctx = tv.encode_image(store, trace.input_image).tokens
    items = [sq.MixedItem.ctrl(sq.BOS)]
    items.extend(sq.MixedItem.latent(row) for row in ctx)
    items.extend(sq.MixedItem.text(t) for t in trace.question)
    targets: list[np.ndarray] = []
    n_blocks = 0
    for step in trace.steps:
        items.extend(sq.MixedItem.text(t) for t in step.text)
        if step.image is None or mode == "text_only":
            continue
        pooled = tv.compress_latents(tv.encode_image(store, step.image, "intermediate"), m)
        spliced = pooled
        if latent_noise > 0.0 and noise_rng is not None:
            spliced = pooled + latent_noise * noise_rng.standard_normal(pooled.shape)
        items.append(sq.MixedItem.ctrl(sq.START))
        items.extend(sq.MixedItem.latent(row) for row in spliced)
        items.append(sq.MixedItem.ctrl(sq.END))
        targets.append(pooled)
        n_blocks += 1
    items.extend(sq.MixedItem.text(t) for t in trace.answer)
    items.append(sq.MixedItem.ctrl(sq.EOS))
    if len(items) > cfg.max_len:
        raise ValueError(f"example length {len(items)} overflows max_len {cfg.max_len}")

    text_pos, ce_targets, cond_pos = [], [], []
    n_ctx = 1 + ctx.shape[0]
    prompt_len = n_ctx + len(trace.question)
    # CE supervises the response only (the prompt is conditioning, not a target)
    for i in range(prompt_len - 1, len(items) - 1):
        nxt = items[i + 1]
        if nxt.kind == sq.TEXT or (nxt.kind == sq.CTRL and nxt.value in (sq.START, sq.END, sq.EOS)):
            text_pos.append(i)
            ce_targets.append(nxt.token_id())
        elif nxt.kind == sq.LATENT and i + 1 >= n_ctx:
            cond_pos.append(i)
    latent_targets = np.concatenate(targets, axis=0) if targets else np.zeros((0, cfg.d))
    if len(cond_pos) != latent_targets.shape[0]:
        raise AssertionError("condition positions out of sync with latent targets")
    return SupervisedExample(sq.MixedSequence(items), np.array(text_pos, dtype=np.int64),
                             np.array(ce_targets, dtype=np.int64),
                             np.array(cond_pos, dtype=np.int64), latent_targets, n_blocks)


def _collate(examples: list[SupervisedExample], d: int):
    B = len(examples)
    L = max(len(ex.seq) for ex in examples)
    ids = np.full((B, L), vocab.PAD_ID, dtype=np.int64)
    text_mask = np.ones((B, L), dtype=np.float64)
    latents = np.zeros((B, L, d), dtype=np.float64)
    for b, ex in enumerate(examples):
        e_ids, e_mask, e_lat = sq.to_arrays(ex.seq, d)
        n = len(ex.seq)
        ids[b, :n] = e_ids
        text_mask[b, :n] = e_mask
        latents[b, :n] = e_lat
    return ids, text_mask, latents, L


def joint_loss(examples: list[SupervisedExample], model: Model, lam: float,
               rng: np.random.Generator, draws=None, mode: str = "joint"):
    """Batch loss: mean CE over each example's text positions plus lambda times
    the mean per-row latent term, each batch-averaged.

    Returns (total Tensor, ce float, latent-term float).
    """
    if not examples:
        raise ValueError("empty batch")
    if all(ex.text_positions.size == 0 for ex in examples):
        raise ValueError("batch has no supervised text positions")
    store, cfg = model.store, model.bcfg
    B = len(examples)
    ids, text_mask, latents, L = _collate(examples, cfg.d)
    hidden, logits, _ = bb.forward_batch(store, cfg, ids, text_mask, latents)

    ce_pos, ce_tgt, ce_w = [], [], []
    lat_pos, lat_tgt, lat_w = [], [], []
    for b, ex in enumerate(examples):
        ce_pos.append(b * L + ex.text_positions)
        ce_tgt.append(ex.ce_targets)
        ce_w.append(np.full(ex.text_positions.size, 1.0 / (B * ex.text_positions.size)))
        rows = ex.latent_targets.shape[0]
        if rows and mode != "text_only":
            lat_pos.append(b * L + ex.cond_positions)
            lat_tgt.append(ex.latent_targets)
            lat_w.append(np.full(rows, 1.0 / (B * rows)))
    logits_flat = ad.reshape(logits, (B * L, cfg.vocab))
    ce_rows = ad.cross_entropy(ad.take_rows(logits_flat, np.concatenate(ce_pos)),
                               np.concatenate(ce_tgt))
    ce = ad.sum_(ad.mul(ce_rows, Tensor(np.concatenate(ce_w))))

    if not lat_pos:
        return ce, ce.item(), 0.0

    hidden_flat = ad.reshape(hidden, (B * L, cfg.d))
    h_cond = ad.take_rows(hidden_flat, np.concatenate(lat_pos))
    c = ad.matmul(h_cond, store["diffusion_head/cond_w"])
    tgt = np.concatenate(lat_tgt)
    weights = Tensor(np.concatenate(lat_w))
    if mode == "similarity":
        row_term = _cosine_rows(ad.add(ad.matmul(h_cond, store["diffusion_head/sim_w"]),
                                       store["diffusion_head/sim_b"]), tgt)
    else:
        n_rows = tgt.shape[0]
        if draws is None:
            t = rng.integers(1, model.sched.t_steps + 1, size=n_rows)
            eps = rng.standard_normal(tgt.shape)
        else:
            t, eps = draws
        z_t = df.noisify(tgt, t, eps, model.sched)
        pred = df.eps_forward(store, model.sched, z_t, t, c)
        resid = ad.sub(pred, Tensor(eps))
        row_term = ad.mean_(ad.mul(resid, resid), axis=1)
    latent_term = ad.sum_(ad.mul(row_term, weights))
    total = ad.add(ce, ad.mul(latent_term, lam))
    return total, ce.item(), latent_term.item()


def _cosine_rows(pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-row 1 - cosine(pred, target) with 1e-8 added to the norm denominators."""
    t = Tensor(target)
    dot = ad.sum_(ad.mul(pred, t), axis=1)
    pn = ad.add(ad.sqrt(ad.sum_(ad.mul(pred, pred), axis=1)), 1e-8)
    tn = np.sqrt(np.sum(target * target, axis=1)) + 1e-8
    return ad.sub(1.0, ad.div(dot, ad.mul(pn, Tensor(tn))))


def similarity_loss(examples: list[SupervisedExample], model: Model) -> Tensor:
    """The ablation head's latent term alone: mean over rows of 1 - cosine."""
    store, cfg = model.store, model.bcfg
    B = len(examples)
    ids, text_mask, latents, L = _collate(examples, cfg.d)
    hidden, _, _ = bb.forward_batch(store, cfg, ids, text_mask, latents)
    hidden_flat = ad.reshape(hidden, (B * L, cfg.d))
    lat_pos, lat_tgt, lat_w = [], [], []
    for b, ex in enumerate(examples):
        rows = ex.latent_targets.shape[0]
        if rows:
            lat_pos.append(b * L + ex.cond_positions)
            lat_tgt.append(ex.latent_targets)
            lat_w.append(np.full(rows, 1.0 / (B * rows)))
    if not lat_pos:
        return Tensor(0.0)
    h_cond = ad.take_rows(hidden_flat, np.concatenate(lat_pos))
    pred = ad.add(ad.matmul(h_cond, store["diffusion_head/sim_w"]), store["diffusion_head/sim_b"])
    rows = _cosine_rows(pred, np.concatenate(lat_tgt))
    return ad.sum_(ad.mul(rows, Tensor(np.concatenate(lat_w))))


# -- training loop ------------------------------------------------------------------


def resample_blocks(examples: list[SupervisedExample], model: Model, fraction: float,
                    rng: np.random.Generator) -> None:
    """Scheduled sampling: with the given probability per example, replace the
    spliced gold-latent context rows with rows sampled from the diffusion head,
    conditioned on the teacher-forced hidden states.

    The regression targets stay gold.  Rows are sampled in parallel from the
    gold-prefix conditions (no within-block feedback), which is enough to
    expose the text pathway to its own decoder's output distribution.
    """
    if model.cfg.head != "diffusion":
        return
    picked = [ex for ex in examples
              if ex.latent_targets.shape[0] and rng.random() < fraction]
    if not picked:
        return
    store, cfg = model.store, model.bcfg
    ids, text_mask, latents, L = _collate(picked, cfg.d)
    with ad.no_grad():
        hidden, _, _ = bb.forward_batch(store, cfg, ids, text_mask, latents)
        for b, ex in enumerate(picked):
            h = hidden.data[b][ex.cond_positions]
            c = h @ store["diffusion_head/cond_w"].data
            sampled = df.sample_latent(c, store, model.sched, rng)
            for pos, row in zip(ex.cond_positions, np.atleast_2d(sampled)):
                ex.seq.items[pos + 1] = sq.MixedItem.latent(row)


def periodic_checkpoint_path(final_path: str, step: int) -> str:
    base, ext = os.path.splitext(final_path)
    return f"{base}_{step:06d}{ext}"


def batch_indices(step: int, batch_size: int, n: int, seed: int) -> np.ndarray:
    """Stateless per-step batch selection: seeded per-epoch permutation, wrapping."""
    out = []
    pos = step * batch_size
    while len(out) < batch_size:
        epoch, off = divmod(pos, n)
        perm = seeded_rng(seed, "epoch", epoch).permutation(n)
        take = min(batch_size - len(out), n - off)
        out.extend(perm[off : off + take])
        pos += take
    return np.asarray(out, dtype=np.int64)


def train_sft(model: Model, traces: list[tv.AnnotatedTrace], cfg: SftConfig,
              metrics_path: str | None = None, checkpoint_path: str | None = None,
              start_step: int = 0, end_step: int | None = None) -> list[dict]:
    """Run the selected mode's objective; returns the per-step metrics rows.

    Deterministic under a fixed config: batches and sampling draws are derived
    statelessly from (seed, step), so a resumed run is bitwise identical to an
    uninterrupted one.
    """
    from .model import save_model  # local import to avoid a cycle

    if not traces:
        raise ValueError("empty dataset")
    if not model.frozen_encoder:
        raise RuntimeError("vision encoder must be frozen before SFT (run the encoder pre-pass)")
    if cfg.mode == "similarity" and "diffusion_head/sim_w" not in model.store.entries:
        raise ValueError("similarity mode requires a model built with the similarity head")

    warmup = int(round(cfg.warmup_frac * cfg.steps))
    scheds = {
        "backbone": LrSchedule(cfg.lr_backbone, cfg.floor_frac * cfg.lr_backbone, warmup, max(cfg.steps, 1)),
        "diffusion_head": LrSchedule(cfg.lr_diffusion, cfg.floor_frac * cfg.lr_diffusion, warmup, max(cfg.steps, 1)),
    }
    n = len(traces)
    dropped = 0
    metrics: list[dict] = []
    mf = None
    if metrics_path is not None:
        mode = "a" if start_step > 0 and os.path.exists(metrics_path) else "w"
        mf = open(metrics_path, mode, encoding="utf-8")
        if mode == "w":
            mf.write(METRICS_HEADER + "\n")

    stop = cfg.steps if end_step is None else min(end_step, cfg.steps)
    try:
        for step in range(start_step, stop):
            idx = batch_indices(step, cfg.batch_size, n, cfg.seed)
            noise_rng = seeded_rng(cfg.seed, "latent-noise", step) if cfg.latent_noise > 0 else None
            examples = []
            for i in idx:
                try:
                    examples.append(build_example(traces[i], model, cfg.m_latent, cfg.mode,
                                                  cfg.latent_noise, noise_rng))
                except ValueError:
                    dropped += 1
            if not examples:
                continue
            rng = seeded_rng(cfg.seed, "sft-step", step)
            if cfg.sampled_block_fraction > 0.0 and cfg.mode == "joint":
                resample_blocks(examples, model, cfg.sampled_block_fraction,
                                seeded_rng(cfg.seed, "resample", step))
            lam = 0.0 if cfg.mode == "text_only" else cfg.lam
            try:
                total, ce, diff = joint_loss(examples, model, lam, rng, mode=cfg.mode)
                model.store.zero_grad()
                ad.backward(total, model.store)
            except FloatingPointError as e:
                raise FloatingPointError(f"non-finite loss at step {step}: {e}") from e
            grad_norm = clip_grad_norm(model.store, cfg.clip_norm)
            lr_b = cosine_lr(step + 1, scheds["backbone"])
            lr_d = cosine_lr(step + 1, scheds["diffusion_head"])
            adamw_step(model.store, {"backbone": lr_b, "diffusion_head": lr_d, "vision_encoder": 0.0},
                       weight_decay=cfg.weight_decay)
            row = {"step": step, "ce_loss": ce, "diff_loss": diff, "total_loss": total.item(),
                   "lr_backbone": lr_b, "lr_diffusion": lr_d, "grad_norm": grad_norm}
            metrics.append(row)
            if mf is not None:
                mf.write(",".join([str(step)] + [fmt_float(row[k]) for k in
                                                 ("ce_loss", "diff_loss", "total_loss",
                                                  "lr_backbone", "lr_diffusion", "grad_norm")]) + "\n")
                mf.flush()
            if checkpoint_path and cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                save_model(periodic_checkpoint_path(checkpoint_path, step + 1), model, step=step + 1)
    finally:
        if mf is not None:
            mf.close()
    if checkpoint_path:
        save_model(checkpoint_path, model, step=stop)
    if dropped:
        print(f"[sft] dropped {dropped} over-length examples")
    return metrics
