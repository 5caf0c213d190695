"""Decoder-only transformer over mixed text/latent/control sequences.

Pre-norm residual blocks with causal self-attention and a GELU MLP of width
4d.  Text and control items go through the token-embedding table; latent items
are injected unchanged (they already live in model space by construction).
Logits at position i predict item i+1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import autodiff as ad
from . import sequence as sq
from .autodiff import Tensor
from .optim import ParamStore

MASK_VALUE = -1e30  # additive causal mask; exp underflows to exactly 0


@dataclass
class BackboneConfig:
    layers: int = 4
    heads: int = 4
    d: int = 64
    vocab: int = 96
    max_len: int = 256
    k_latent: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("model width must be divisible by head count")
        if self.k_latent < 1:
            raise ValueError("k_latent must be >= 1")


def init_backbone(store: ParamStore, cfg: BackboneConfig, rng: np.random.Generator) -> None:
    d, v = cfg.d, cfg.vocab
    std = 0.02

    def lin(name, shape):
        store.add(name, rng.normal(0.0, std, shape), "backbone")

    lin("backbone/tok_emb", (v, d))
    lin("backbone/pos_emb", (cfg.max_len, d))
    for i in range(cfg.layers):
        p = f"backbone/layer{i}"
        store.add(f"{p}/ln1/g", np.ones(d), "backbone")
        store.add(f"{p}/ln1/b", np.zeros(d), "backbone")
        lin(f"{p}/attn/wqkv", (d, 3 * d))
        store.add(f"{p}/attn/bqkv", np.zeros(3 * d), "backbone")
        lin(f"{p}/attn/wo", (d, d))
        store.add(f"{p}/attn/bo", np.zeros(d), "backbone")
        store.add(f"{p}/ln2/g", np.ones(d), "backbone")
        store.add(f"{p}/ln2/b", np.zeros(d), "backbone")
        lin(f"{p}/mlp/w1", (d, 4 * d))
        store.add(f"{p}/mlp/b1", np.zeros(4 * d), "backbone")
        lin(f"{p}/mlp/w2", (4 * d, d))
        store.add(f"{p}/mlp/b2", np.zeros(d), "backbone")
    store.add("backbone/ln_f/g", np.ones(d), "backbone")
    store.add("backbone/ln_f/b", np.zeros(d), "backbone")
    lin("backbone/lm_head/w", (d, v))
    store.add("backbone/lm_head/b", np.zeros(v), "backbone")
    # conditioning projection c = W h feeding the latent decoder
    store.add("diffusion_head/cond_w", rng.normal(0.0, std, (d, d)), "diffusion_head")


_MASK_CACHE: dict[int, np.ndarray] = {}


def causal_mask(L: int) -> np.ndarray:
    m = _MASK_CACHE.get(L)
    if m is None:
        m = np.triu(np.full((L, L), MASK_VALUE), k=1)
        _MASK_CACHE[L] = m
    return m


def embed_batch(store: ParamStore, cfg: BackboneConfig, ids: np.ndarray,
                text_mask: np.ndarray, latents: np.ndarray) -> Tensor:
    L = ids.shape[-1]
    if L > cfg.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if ids.max(initial=0) >= cfg.vocab:
        raise ValueError("token id outside vocabulary")
    return ad.mixed_embed(store["backbone/tok_emb"], store["backbone/pos_emb"],
                          ids, text_mask, latents)


def forward_batch(store: ParamStore, cfg: BackboneConfig, ids: np.ndarray,
                  text_mask: np.ndarray, latents: np.ndarray,
                  capture_attn_layer: int | None = None):
    """Returns (hidden [B,L,d], text_logits [B,L,V], attn [B,heads,L,L] or None)."""
    B, L = ids.shape
    d, h = cfg.d, cfg.heads
    hd = d // h
    x = embed_batch(store, cfg, ids, text_mask, latents)
    mask = causal_mask(L)
    scale = 1.0 / np.sqrt(hd)
    captured = None
    for i in range(cfg.layers):
        p = f"backbone/layer{i}"
        a_in = ad.layer_norm(x, store[f"{p}/ln1/g"], store[f"{p}/ln1/b"])
        qkv = ad.affine(a_in, store[f"{p}/attn/wqkv"], store[f"{p}/attn/bqkv"])
        q = ad.swapaxes(ad.reshape(qkv[:, :, 0:d], (B, L, h, hd)), 1, 2)
        k = ad.swapaxes(ad.reshape(qkv[:, :, d : 2 * d], (B, L, h, hd)), 1, 2)
        v = ad.swapaxes(ad.reshape(qkv[:, :, 2 * d : 3 * d], (B, L, h, hd)), 1, 2)
        att = ad.scaled_masked_softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)), scale, mask)
        if capture_attn_layer == i:
            captured = att.data.copy()
        ctx = ad.reshape(ad.swapaxes(ad.matmul(att, v), 1, 2), (B, L, d))
        x = ad.add(x, ad.affine(ctx, store[f"{p}/attn/wo"], store[f"{p}/attn/bo"]))
        m_in = ad.layer_norm(x, store[f"{p}/ln2/g"], store[f"{p}/ln2/b"])
        hmid = ad.gelu(ad.affine(m_in, store[f"{p}/mlp/w1"], store[f"{p}/mlp/b1"]))
        x = ad.add(x, ad.affine(hmid, store[f"{p}/mlp/w2"], store[f"{p}/mlp/b2"]))
    hidden = ad.layer_norm(x, store["backbone/ln_f/g"], store["backbone/ln_f/b"])
    logits = ad.affine(hidden, store["backbone/lm_head/w"], store["backbone/lm_head/b"])
    return hidden, logits, captured


def embed(store: ParamStore, cfg: BackboneConfig, seq: sq.MixedSequence) -> Tensor:
    ids, text_mask, latents = sq.to_arrays(seq, cfg.d)
    return ad.getitem(embed_batch(store, cfg, ids[None], text_mask[None], latents[None]), 0)


def forward(store: ParamStore, cfg: BackboneConfig, seq: sq.MixedSequence):
    """Single-sequence forward: (hidden [L,d], text_logits [L,V]) as Tensors."""
    ids, text_mask, latents = sq.to_arrays(seq, cfg.d)
    hidden, logits, _ = forward_batch(store, cfg, ids[None], text_mask[None], latents[None])
    return ad.getitem(hidden, 0), ad.getitem(logits, 0)


def condition(store: ParamStore, hidden: Tensor) -> Tensor:
    """Conditioning vector(s) for the latent decoder: a single linear map, no bias."""
    h = hidden if hidden.data.ndim >= 2 else ad.reshape(hidden, (1, hidden.data.shape[0]))
    c = ad.matmul(h, store["diffusion_head/cond_w"])
    return ad.getitem(c, 0) if hidden.data.ndim == 1 else c


def _ln_np(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


class DecodeCache:
    """Per-generation-stream incremental decoding state (keys/values per layer).

    Appending n rows costs O(n * L) attention instead of re-running the full
    O(L^2) forward; the arithmetic mirrors forward_batch row for row.
    """

    def __init__(self, store: ParamStore, cfg: BackboneConfig):
        self.store = store
        self.cfg = cfg
        hd = cfg.d // cfg.heads
        self.k = np.zeros((cfg.layers, cfg.heads, cfg.max_len, hd))
        self.v = np.zeros((cfg.layers, cfg.heads, cfg.max_len, hd))
        self.length = 0
        self.last_hidden: np.ndarray | None = None

    def append(self, ids: np.ndarray, text_mask: np.ndarray, latents: np.ndarray) -> np.ndarray:
        """Process new items; returns hidden rows [n, d] and caches their K/V."""
        store, cfg = self.store, self.cfg
        d, h = cfg.d, cfg.heads
        hd = d // h
        n = len(ids)
        lo, hi = self.length, self.length + n
        if hi > cfg.max_len:
            raise ValueError(f"sequence length {hi} exceeds max_len {cfg.max_len}")
        x = store["backbone/tok_emb"].data[ids] * text_mask[:, None] + latents \
            + store["backbone/pos_emb"].data[lo:hi]
        scale = 1.0 / np.sqrt(hd)
        for i in range(cfg.layers):
            p = f"backbone/layer{i}"
            a_in = _ln_np(x, store[f"{p}/ln1/g"].data, store[f"{p}/ln1/b"].data)
            qkv = a_in @ store[f"{p}/attn/wqkv"].data + store[f"{p}/attn/bqkv"].data
            q = qkv[:, 0:d].reshape(n, h, hd).transpose(1, 0, 2)
            self.k[i, :, lo:hi] = qkv[:, d : 2 * d].reshape(n, h, hd).transpose(1, 0, 2)
            self.v[i, :, lo:hi] = qkv[:, 2 * d : 3 * d].reshape(n, h, hd).transpose(1, 0, 2)
            scores = q @ self.k[i, :, :hi].swapaxes(-1, -2) * scale
            for j in range(n):
                scores[:, j, lo + j + 1 :] = MASK_VALUE
            z = scores - scores.max(axis=-1, keepdims=True)
            np.exp(z, out=z)
            z /= z.sum(axis=-1, keepdims=True)
            ctx = (z @ self.v[i, :, :hi]).transpose(1, 0, 2).reshape(n, d)
            x = x + ctx @ store[f"{p}/attn/wo"].data + store[f"{p}/attn/bo"].data
            m_in = _ln_np(x, store[f"{p}/ln2/g"].data, store[f"{p}/ln2/b"].data)
            hmid = m_in @ store[f"{p}/mlp/w1"].data + store[f"{p}/mlp/b1"].data
            hmid = hmid * 0.5 * (1.0 + erf(hmid / np.sqrt(2.0)))
            x = x + hmid @ store[f"{p}/mlp/w2"].data + store[f"{p}/mlp/b2"].data
        self.length = hi
        hidden = _ln_np(x, store["backbone/ln_f/g"].data, store["backbone/ln_f/b"].data)
        self.last_hidden = hidden[-1]
        return hidden

    def logits_for(self, hidden: np.ndarray) -> np.ndarray:
        return hidden @ self.store["backbone/lm_head/w"].data + self.store["backbone/lm_head/b"].data

    def append_seq_items(self, items) -> np.ndarray:
        """Append MixedItems; returns hidden rows for them."""
        n = len(items)
        d = self.cfg.d
        ids = np.zeros(n, dtype=np.int64)
        text_mask = np.zeros(n)
        latents = np.zeros((n, d))
        for i, it in enumerate(items):
            if it.kind == sq.LATENT:
                latents[i] = it.value
            else:
                ids[i] = it.token_id()
                text_mask[i] = 1.0
        return self.append(ids, text_mask, latents)


def attention_maps(store: ParamStore, cfg: BackboneConfig, seq: sq.MixedSequence, layer: int) -> np.ndarray:
    """Post-softmax attention weights [heads, L, L] at one layer."""
    if not 0 <= layer < cfg.layers:
        raise ValueError(f"layer {layer} out of range [0, {cfg.layers})")
    ids, text_mask, latents = sq.to_arrays(seq, cfg.d)
    with ad.no_grad():
        _, _, att = forward_batch(store, cfg, ids[None], text_mask[None], latents[None],
                                  capture_attn_layer=layer)
    return att[0]
