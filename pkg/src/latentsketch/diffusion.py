"""Conditional diffusion latent decoder: DDPM noise schedule, stacked-MLP
epsilon predictor with sinusoidal timestep embeddings, ancestral sampler, the
noising/regression training loss, and autoregressive block emission with
feedback through the backbone.

Variance-preserving convention throughout: the forward noising uses
sqrt(alpha_bar[t]) and sqrt(1 - alpha_bar[t]), and the reverse step is the
standard epsilon-parameterized update

    z_{t-1} = (z_t - (1 - alpha_t)/sqrt(1 - alpha_bar_t) * eps(z_t, t, c)) / sqrt(alpha_t)
              + sigma_t * xi

with sigma_t = sqrt(beta_t) for t > 1 and sigma_1 = 0 (last step noiseless).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import sequence as sq
from .autodiff import Tensor
from .optim import ParamStore

T_EMBED_DIM = 32

# instrumented call counter: the language-only generation mode must never touch this module
CALLS = {"sample_latent": 0, "denoise_step": 0}


def reset_call_counter() -> None:
    CALLS["sample_latent"] = 0
    CALLS["denoise_step"] = 0


@dataclass
class NoiseSchedule:
    """Per-timestep coefficients, 1-indexed; index 0 is the no-noise boundary."""

    t_steps: int
    beta: np.ndarray = field(repr=False)        # [T+1], beta[0] = 0
    alpha: np.ndarray = field(repr=False)       # 1 - beta
    alpha_bar: np.ndarray = field(repr=False)   # running product, alpha_bar[0] = 1
    sigma: np.ndarray = field(repr=False)       # sampler noise scale, sigma[1] = 0

    def __post_init__(self):
        b = self.beta[1:]
        if np.any(b <= 0.0) or np.any(np.diff(b) < 0.0):
            raise ValueError("beta must be strictly positive and non-decreasing")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.any(self.alpha_bar[1:] >= 1.0):
            raise ValueError("alpha_bar must stay below 1 for t >= 1")
        if self.sigma[1] != 0.0:
            raise ValueError("sigma[1] must be zero: the final denoise step is deterministic")


def linear_schedule(t_steps: int, beta_start: float = 1e-4, beta_end: float = 0.28) -> NoiseSchedule:
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, t_steps)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    sigma[1] = 0.0
    return NoiseSchedule(t_steps, beta, alpha, alpha_bar, sigma)


# -- epsilon network -------------------------------------------------------------


def sinusoidal_table(t_steps: int, dim: int = T_EMBED_DIM) -> np.ndarray:
    """Fixed timestep embedding table [T+1, dim]."""
    t = np.arange(t_steps + 1, dtype=np.float64)[:, None]
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)[None, :]
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def init_epsilon_net(store: ParamStore, d: int, d_c: int, rng: np.random.Generator,
                     prefix: str = "diffusion_head/eps", width: int | None = None) -> None:
    """Three GELU hidden layers of width 4d (overridable) over concat(z_t, t_embed, c)."""
    wid = 4 * d if width is None else width
    dims = [d + T_EMBED_DIM + d_c, wid, wid, wid]
    for i in range(3):
        store.add(f"{prefix}/w{i}", rng.normal(0.0, 1.0 / np.sqrt(dims[i]), (dims[i], dims[i + 1])), "diffusion_head")
        store.add(f"{prefix}/b{i}", np.zeros(dims[i + 1]), "diffusion_head")
    store.add(f"{prefix}/w_out", rng.normal(0.0, 1.0 / np.sqrt(wid), (wid, d)), "diffusion_head")
    store.add(f"{prefix}/b_out", np.zeros(d), "diffusion_head")


def eps_forward(store: ParamStore, sched: NoiseSchedule, z_t, t_idx: np.ndarray, c,
                prefix: str = "diffusion_head/eps") -> Tensor:
    """Predict the injected noise from (z_t, t, c); rows are independent."""
    t_idx = np.atleast_1d(np.asarray(t_idx, dtype=np.int64))
    if t_idx.min() < 1 or t_idx.max() > sched.t_steps:
        raise ValueError(f"timestep outside [1, {sched.t_steps}]")
    table = sinusoidal_table(sched.t_steps)
    x = ad.concat([ad.as_tensor(z_t), Tensor(table[t_idx]), ad.as_tensor(c)], axis=-1)
    for i in range(3):
        x = ad.gelu(ad.affine(x, store[f"{prefix}/w{i}"], store[f"{prefix}/b{i}"]))
    return ad.affine(x, store[f"{prefix}/w_out"], store[f"{prefix}/b_out"])


# -- forward noising and reverse sampling -----------------------------------------


def noisify(z: np.ndarray, t: int | np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(alpha_bar_t) z + sqrt(1 - alpha_bar_t) eps (t = 0 allowed as identity)."""
    t = np.asarray(t, dtype=np.int64)
    if t.min() < 0 or t.max() > sched.t_steps:
        raise ValueError(f"timestep outside [0, {sched.t_steps}]")
    ab = sched.alpha_bar[t]
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps


def denoise_step(z_t: np.ndarray, t: int, c: np.ndarray, xi: np.ndarray,
                 store: ParamStore, sched: NoiseSchedule,
                 eps_prefix: str = "diffusion_head/eps", eps_fn=None) -> np.ndarray:
    """One reverse step t -> t-1; xi is injected for testability."""
    if not 1 <= t <= sched.t_steps:
        raise ValueError(f"timestep {t} outside [1, {sched.t_steps}]")
    CALLS["denoise_step"] += 1
    z2 = np.atleast_2d(z_t)
    c2 = np.atleast_2d(c)
    tt = np.full(z2.shape[0], t, dtype=np.int64)
    if eps_fn is not None:
        eps = np.atleast_2d(eps_fn(z2, tt, c2))
    else:
        with ad.no_grad():
            eps = eps_forward(store, sched, z2, tt, c2, eps_prefix).data
    coef = (1.0 - sched.alpha[t]) / np.sqrt(1.0 - sched.alpha_bar[t])
    out = (z2 - coef * eps) / np.sqrt(sched.alpha[t]) + sched.sigma[t] * np.atleast_2d(xi)
    return out.reshape(np.shape(z_t))


def sample_latent(c: np.ndarray, store: ParamStore, sched: NoiseSchedule,
                  rng: np.random.Generator, eps_prefix: str = "diffusion_head/eps",
                  eps_fn=None, d: int | None = None) -> np.ndarray:
    """Ancestral sampling from pure noise down to z^(0); deterministic given (c, rng)."""
    CALLS["sample_latent"] += 1
    c2 = np.atleast_2d(np.asarray(c, dtype=np.float64))
    n = c2.shape[0]
    if d is None:
        d = store[f"{eps_prefix}/b_out"].data.shape[0] if eps_fn is None else c2.shape[1]
    z = rng.standard_normal((n, d))
    for t in range(sched.t_steps, 0, -1):
        xi = rng.standard_normal((n, d)) if sched.sigma[t] > 0.0 else np.zeros((n, d))
        z = denoise_step(z, t, c2, xi, store, sched, eps_prefix, eps_fn)
    return z.reshape(np.shape(c)[:-1] + (d,)) if np.ndim(c) > 1 else z[0]


# -- training loss and block emission ----------------------------------------------


def diffusion_loss(z_clean: np.ndarray, c, store: ParamStore, sched: NoiseSchedule,
                   rng: np.random.Generator, draws: tuple[np.ndarray, np.ndarray] | None = None,
                   eps_prefix: str = "diffusion_head/eps") -> Tensor:
    """Noise-regression loss, mean over all K*d residual scalars.

    Each row independently draws t ~ Uniform{1..T} and eps ~ N(0, I); `draws`
    lets tests inject the (t, eps) pair.  Differentiable w.r.t. the net and c.
    """
    z_clean = np.atleast_2d(np.asarray(z_clean, dtype=np.float64))
    k = z_clean.shape[0]
    if draws is None:
        t = rng.integers(1, sched.t_steps + 1, size=k)
        eps = rng.standard_normal(z_clean.shape)
    else:
        t, eps = draws
    z_t = noisify(z_clean, t, eps, sched)
    pred = eps_forward(store, sched, z_t, t, c, eps_prefix)
    return ad.mse(pred, Tensor(eps))


@dataclass
class LatentBlock:
    vectors: np.ndarray     # [K, d]
    conditions: np.ndarray  # [K, d_c]


def emit_block(prefix_seq: sq.MixedSequence, store: ParamStore, cfg: bb.BackboneConfig,
               sched: NoiseSchedule, rng: np.random.Generator, head: str = "diffusion",
               cache: "bb.DecodeCache | None" = None) -> LatentBlock:
    """Emit K latents autoregressively: each condition comes from the backbone's
    last hidden state over the prefix plus the latents emitted so far.

    When a DecodeCache is supplied it must already hold the prefix (including
    the trailing START); incremental appends then replace full re-forwards.
    """
    items = prefix_seq.items
    if not items or items[-1].kind != sq.CTRL or items[-1].value != sq.START:
        raise ValueError("emit_block requires a prefix ending in START")
    if len(items) + cfg.k_latent + 1 > cfg.max_len:
        raise ValueError("latent block would overflow max_len")
    if cache is not None and cache.length != len(items):
        raise ValueError("decode cache out of sync with the prefix")
    work = prefix_seq.copy()
    vectors, conditions = [], []
    for _ in range(cfg.k_latent):
        with ad.no_grad():
            if cache is None:
                ids, text_mask, latents = sq.to_arrays(work, cfg.d)
                hidden, _, _ = bb.forward_batch(store, cfg, ids[None], text_mask[None], latents[None])
                h_last = hidden.data[0, -1]
            else:
                h_last = cache.last_hidden
            c = h_last @ store["diffusion_head/cond_w"].data
            if head == "similarity":
                e = h_last @ store["diffusion_head/sim_w"].data + store["diffusion_head/sim_b"].data
            else:
                e = sample_latent(c, store, sched, rng)
        item = sq.MixedItem.latent(e)
        work.append(item)
        if cache is not None:
            cache.append_seq_items([item])
        vectors.append(e)
        conditions.append(c)
    return LatentBlock(np.array(vectors), np.array(conditions))
