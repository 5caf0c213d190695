"""Group-relative policy optimization over modal-mixed rollouts.

For each query, G trajectories are sampled from the frozen behavior policy,
scored with an exact-match reward, and group-normalized into advantages.  The
clipped-ratio surrogate is ascended on text-token positions only: latent
positions carry no log-probability, so the diffusion head receives exactly
zero gradient by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import inference as inf
from . import sequence as sq
from . import toyvision as tv
from . import vocab
from .autodiff import Tensor
from .model import Model
from .optim import adamw_step, clip_grad_norm
from .util import fmt_float, seeded_rng

METRICS_HEADER = "iter,mean_reward,clip_fraction,frac_degenerate,mean_len"


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    lr: float = 1e-4
    temperature: float = 0.8
    max_new_items: int = 48
    iters: int = 300
    seed: int = 0
    queries_per_iter: int = 4
    groups_per_step: int = 2
    ratio_variant: str = "token"    # "token" (per-position ratios) or "sequence"
    weight_decay: float = 0.0
    clip_norm: float = 1.0

    def __post_init__(self):
        if not 0 <= self.clip_eps < 1:
            raise ValueError("clip_eps must be in [0, 1)")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.ratio_variant not in ("token", "sequence"):
            raise ValueError(f"unknown ratio variant {self.ratio_variant!r}")


@dataclass
class Rollout:
    seq: sq.MixedSequence
    emissions: list[inf.Emission]
    answer: list[int]
    reward: float
    logprobs_old: np.ndarray | None = None
    new_items: int = 0


@dataclass
class RolloutGroup:
    query_id: int
    rollouts: list[Rollout]
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def degenerate(self) -> bool:
        return bool(np.all(self.advantages == 0.0))


def canonical_answer(tokens: list[int]) -> tuple[int, ...]:
    """Strip surrounding whitespace tokens and case-fold letter tokens."""
    toks = list(tokens)
    while toks and toks[0] in vocab.WHITESPACE_IDS:
        toks.pop(0)
    while toks and toks[-1] in vocab.WHITESPACE_IDS:
        toks.pop()
    return tuple(vocab.CASEFOLD.get(t, t) for t in toks)


def reward(answer_tokens: list[int], gold_tokens: list[int]) -> float:
    """1 iff the canonicalized answer equals the canonicalized gold, else 0."""
    if not gold_tokens:
        raise ValueError("gold answer must be non-empty")
    if not answer_tokens:
        return 0.0
    return 1.0 if canonical_answer(answer_tokens) == canonical_answer(gold_tokens) else 0.0


def advantages(rewards: np.ndarray) -> np.ndarray:
    """(r - mean) / population std; a degenerate group (std ~ 0) gets all zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages require a group of at least 2")
    std = float(np.std(r))
    if std < 1e-8:
        return np.zeros_like(r)
    return (r - np.mean(r)) / std


def score_rollout(model: Model, rollout: Rollout, temperature: float) -> Tensor:
    """Log-probabilities of the scored emissions under the current parameters,
    using the same masked, tempered distribution the sampler drew from."""
    if not rollout.emissions:
        raise ValueError("rollout has no scored emissions")
    store, bcfg = model.store, model.bcfg
    ids, text_mask, latents = sq.to_arrays(rollout.seq, bcfg.d)
    _, logits, _ = bb.forward_batch(store, bcfg, ids[None], text_mask[None], latents[None])
    flat = ad.getitem(logits, 0)
    pos = np.array([e.position - 1 for e in rollout.emissions], dtype=np.int64)
    tok = np.array([e.token_id for e in rollout.emissions], dtype=np.int64)
    mask_add = np.stack([np.where(e.mask, inf.MASK_NEG, 0.0) for e in rollout.emissions])
    rows = ad.take_rows(flat, pos)
    scaled = ad.add(ad.mul(rows, 1.0 / (temperature if temperature > 0 else 1.0)), Tensor(mask_add))
    return ad.mul(ad.cross_entropy(scaled, tok), -1.0)


def grpo_objective(group: RolloutGroup, model: Model, clip_eps: float, temperature: float,
                   variant: str = "token", stats: dict | None = None) -> Tensor:
    """The clipped surrogate to MAXIMIZE, averaged over the group.

    Token variant: per-position ratios with the rollout's advantage; sequence
    variant: a single ratio from summed log-probabilities (numerically fragile
    for long traces, kept for fidelity runs).
    """
    if group.advantages.size != len(group.rollouts):
        raise ValueError("advantages not computed for this group")
    terms = []
    clipped_active = 0
    positions = 0
    for rollout, adv in zip(group.rollouts, group.advantages):
        if rollout.logprobs_old is None:
            raise ValueError("rollout is missing behavior-policy log-probabilities")
        a = float(adv)
        new_lp = score_rollout(model, rollout, temperature)
        old_lp = rollout.logprobs_old
        if variant == "sequence":
            rho = ad.exp(ad.sub(ad.sum_(new_lp), float(np.sum(old_lp))))
            term = ad.minimum(ad.mul(rho, a), ad.mul(ad.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps), a))
            rho_vals = np.array([rho.data.item()])
        else:
            rho = ad.exp(ad.sub(new_lp, Tensor(old_lp)))
            per_tok = ad.minimum(ad.mul(rho, a), ad.mul(ad.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps), a))
            term = ad.mean_(per_tok)
            rho_vals = rho.data
        if a > 0:
            clipped_active += int(np.sum(rho_vals > 1.0 + clip_eps))
        elif a < 0:
            clipped_active += int(np.sum(rho_vals < 1.0 - clip_eps))
        positions += rho_vals.size
        terms.append(term)
    if stats is not None:
        stats["clipped"] = stats.get("clipped", 0) + clipped_active
        stats["positions"] = stats.get("positions", 0) + positions
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.mul(acc, 1.0 / len(group.rollouts))


def sample_group(model: Model, trace, cfg: GrpoConfig, iteration: int, query_index: int,
                 query_id: int) -> RolloutGroup:
    """Sample G rollouts for one query from the current (behavior) parameters."""
    gen_cfg = inf.GenerationConfig(mode="mixed", max_new_items=cfg.max_new_items,
                                   temperature=cfg.temperature)
    prompt = inf.build_prompt(model, trace)
    gold = inf.gold_answer(trace)
    rollouts = []
    for g in range(cfg.group_size):
        rng = seeded_rng(cfg.seed, "rollout", iteration, query_index, g)
        res = inf.generate(prompt, model, gen_cfg, rng)
        ans = inf.extract_answer(res.seq)
        rollouts.append(Rollout(res.seq, res.emissions, ans, reward(ans, gold),
                                new_items=res.new_items))
    group = RolloutGroup(query_id, rollouts)
    group.advantages = advantages(np.array([r.reward for r in rollouts]))
    with ad.no_grad():
        for r in rollouts:
            r.logprobs_old = score_rollout(model, r, cfg.temperature).data.copy()
    return group


def train_rl(model: Model, traces: list[tv.AnnotatedTrace], cfg: GrpoConfig,
             metrics_path: str | None = None, checkpoint_path: str | None = None,
             rollout_dump_path: str | None = None) -> list[dict]:
    """GRPO loop: per iteration, sample groups under the frozen behavior policy,
    then ascend the surrogate over minibatches of groups (one inner epoch)."""
    from .model import save_model

    if not traces:
        raise ValueError("empty task dataset")
    metrics: list[dict] = []
    mf = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    dumpf = open(rollout_dump_path, "w", encoding="utf-8") if rollout_dump_path else None
    if mf:
        mf.write(METRICS_HEADER + "\n")
    consecutive_degenerate = 0
    try:
        for iteration in range(cfg.iters):
            order = seeded_rng(cfg.seed, "rl-queries", iteration).permutation(len(traces))
            picks = order[: cfg.queries_per_iter]
            groups = [sample_group(model, traces[q], cfg, iteration, qi, int(q))
                      for qi, q in enumerate(picks)]

            rewards_flat = [r.reward for g in groups for r in g.rollouts]
            lens = [r.new_items for g in groups for r in g.rollouts]
            n_degenerate = sum(g.degenerate for g in groups)
            stats: dict = {}
            for lo in range(0, len(groups), cfg.groups_per_step):
                chunk = groups[lo : lo + cfg.groups_per_step]
                live = [g for g in chunk if not g.degenerate]
                if not live:
                    continue  # pure-degenerate minibatch: no learning signal, no step
                objs = [grpo_objective(g, model, cfg.clip_eps, cfg.temperature,
                                       cfg.ratio_variant, stats) for g in chunk]
                acc = objs[0]
                for o in objs[1:]:
                    acc = ad.add(acc, o)
                loss = ad.mul(acc, -1.0 / len(chunk))
                model.store.zero_grad()
                ad.backward(loss, model.store)
                clip_grad_norm(model.store, cfg.clip_norm)
                adamw_step(model.store, {"backbone": cfg.lr, "diffusion_head": cfg.lr,
                                         "vision_encoder": 0.0},
                           weight_decay=cfg.weight_decay)

            if dumpf:
                for g in groups:
                    for r in g.rollouts:
                        dumpf.write(f"iter={iteration} query={g.query_id} reward={int(r.reward)} "
                                    f"| {r.seq.detokenize()}\n")
            row = {
                "iter": iteration,
                "mean_reward": float(np.mean(rewards_flat)),
                "clip_fraction": stats.get("clipped", 0) / max(stats.get("positions", 0), 1),
                "frac_degenerate": n_degenerate / len(groups),
                "mean_len": float(np.mean(lens)),
            }
            metrics.append(row)
            if mf:
                mf.write(",".join([str(iteration)] + [fmt_float(row[k]) for k in
                                                      ("mean_reward", "clip_fraction",
                                                       "frac_degenerate", "mean_len")]) + "\n")
                mf.flush()
            consecutive_degenerate = consecutive_degenerate + 1 if n_degenerate == len(groups) else 0
            if consecutive_degenerate >= 50:
                raise RuntimeError(
                    "all rollout groups degenerate for 50 consecutive iterations: "
                    "rewards carry no signal (task too easy or too hard for this policy)")
    finally:
        if mf:
            mf.close()
        if dumpf:
            dumpf.close()
    if checkpoint_path:
        save_model(checkpoint_path, model, step=cfg.iters)
    return metrics
