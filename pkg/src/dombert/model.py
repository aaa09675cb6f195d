"""Small post-norm transformer encoder with two heads.

Masked-token prediction has two routes: a sparse path that gathers only the
positions carrying prediction targets before touching the vocabulary
projection (early apply of labels), and a dense reference path that projects
every position. The domain head composes two linear maps with no intermediate
nonlinearity: logits = D @ (W @ h_cls + b).

Forward passes record everything reverse mode needs; the matching backward
routines live here too, so the architecture is defined in exactly one place.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .nputil import gelu, gelu_grad, softmax

LN_EPS = 1e-12
INIT_STD = 0.02
_NEG = -1e9  # additive key mask; exp() underflows to exactly zero attention

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_domains: int               # n + 1, target included
    max_len: int = 128
    d_hidden: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    d_domain: int = 64           # width of the domain-embedding rows
    dropout_p: float = 0.1
    dropout_enabled: bool = False
    dtype: str = "float32"

    def __post_init__(self) -> None:
        sizes = (self.vocab_size, self.n_domains, self.max_len, self.d_hidden,
                 self.n_layers, self.n_heads, self.d_ff, self.d_domain)
        if min(sizes) < 1:
            raise ConfigError("all model sizes must be >= 1")
        if self.d_hidden % self.n_heads != 0:
            raise ConfigError("d_hidden must be divisible by n_heads")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


CONFIG_FIELDS = [f.name for f in dataclasses.fields(ModelConfig)]


def set_dropout(config: ModelConfig, enabled: bool) -> ModelConfig:
    """Copy of the config with every dropout layer toggled to identity/off."""
    return dataclasses.replace(config, dropout_enabled=enabled)


def param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; fixes init draw order and file layout."""
    d, ff = config.d_hidden, config.d_ff
    specs: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (config.vocab_size, d)),
        ("pos_emb", (config.max_len, d)),
        ("emb_ln_g", (d,)),
        ("emb_ln_b", (d,)),
    ]
    for i in range(config.n_layers):
        p = f"layer{i}."
        specs += [
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "w1", (d, ff)), (p + "b1", (ff,)),
            (p + "w2", (ff, d)), (p + "b2", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
        ]
    specs += [
        ("mlm_w", (d, d)), ("mlm_b", (d,)),
        ("mlm_ln_g", (d,)), ("mlm_ln_b", (d,)),
        ("mlm_out_b", (config.vocab_size,)),
        ("cls_w", (config.d_domain, d)),
        ("cls_b", (config.d_domain,)),
        ("dom_emb", (config.n_domains, config.d_domain)),
    ]
    return specs


def _is_gain(name: str) -> bool:
    return name.endswith("_g")


def _is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf.endswith("_b") or leaf.startswith("b")


def init_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    """Weights ~ N(0, 0.02^2); biases 0; layer-norm gain 1, bias 0."""
    params: Params = {}
    for name, shape in param_specs(config):
        if _is_gain(name):
            arr = np.ones(shape)
        elif _is_bias(name):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = arr.astype(config.np_dtype)
    return params


def zero_grads(config: ModelConfig) -> Params:
    return {name: np.zeros(shape, dtype=config.np_dtype)
            for name, shape in param_specs(config)}


# ---------------------------------------------------------------------------
# Vocabulary-projection work counter (rows pushed through the tied projection)

_vocab_rows = 0


def reset_vocab_rows() -> None:
    global _vocab_rows
    _vocab_rows = 0


def vocab_rows() -> int:
    return _vocab_rows


def _count_rows(n: int) -> None:
    global _vocab_rows
    _vocab_rows += n


# ---------------------------------------------------------------------------
# Layer norm

@dataclass
class LnCache:
    xhat: np.ndarray
    inv: np.ndarray


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, LnCache]:
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, LnCache(xhat=xhat, inv=inv)

def _ln_backward(dy: np.ndarray, cache: LnCache, g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * cache.xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * cache.xhat).mean(-1, keepdims=True)
    dx = cache.inv * (dxhat - m1 - cache.xhat * m2)
    return dx, dg, db


def _dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator,
                  dtype: np.dtype) -> np.ndarray:
    # Inverted dropout: surviving units scaled by 1/(1-p) so activation
    # expectations are preserved.
    return (rng.random(shape) >= p).astype(dtype) / (1.0 - p)


# ---------------------------------------------------------------------------
# Encoder

@dataclass
class LayerCache:
    a_in: np.ndarray             # residual input to attention (B, L, d)
    q: np.ndarray                # (B, h, L, dk)
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray            # softmax output, pre-dropout (B, h, L, L)
    attn_drop: np.ndarray | None
    ctx: np.ndarray              # merged heads, pre-output-projection (B, L, d)
    ao_drop: np.ndarray | None
    ln1: LnCache
    x1: np.ndarray               # post-LN1, residual input to the FF block
    z1: np.ndarray               # pre-GELU
    z2: np.ndarray               # post-GELU
    ff_drop: np.ndarray | None
    ln2: LnCache


@dataclass
class ForwardCache:
    input_ids: np.ndarray
    valid_lens: np.ndarray
    key_bias: np.ndarray         # (B, 1, 1, L) additive mask
    emb_ln: LnCache
    emb_drop: np.ndarray | None
    layers: list[LayerCache]
    h: np.ndarray                # final hidden states (B, L, d)

    @property
    def h_cls(self) -> np.ndarray:
        return self.h[:, 0, :]


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dk)


def encode(
    input_ids: np.ndarray,
    valid_lens: np.ndarray,
    params: Params,
    config: ModelConfig,
    dropout_rng: np.random.Generator | None = None,
) -> ForwardCache:
    """Post-norm transformer encoding of token + position embeddings.

    Padding positions are excluded from attention (as keys) in every layer,
    so non-pad outputs are independent of pad contents. Dropout is applied
    only when config.dropout_enabled, in which case dropout_rng is required.
    """
    input_ids = np.asarray(input_ids)
    b, l = input_ids.shape
    if l > config.max_len:
        raise InputError(f"sequence length {l} exceeds max_len {config.max_len}")
    if input_ids.min() < 0 or input_ids.max() >= config.vocab_size:
        raise InputError("token id out of vocabulary range")
    if config.dropout_enabled and dropout_rng is None:
        raise ConfigError("dropout is enabled but no dropout rng was given")
    dt = config.np_dtype
    drop = config.dropout_enabled
    p = config.dropout_p

    key_valid = np.arange(l)[None, :] < np.asarray(valid_lens)[:, None]
    key_bias = np.where(key_valid, 0.0, _NEG).astype(dt)[:, None, None, :]

    x0 = params["tok_emb"][input_ids] + params["pos_emb"][:l]
    x, emb_ln = _ln_forward(x0, params["emb_ln_g"], params["emb_ln_b"])
    emb_drop = None
    if drop:
        emb_drop = _dropout_mask(x.shape, p, dropout_rng, dt)
        x = x * emb_drop

    dk = config.d_hidden // config.n_heads
    scale = dt.type(1.0 / np.sqrt(dk))
    layers: list[LayerCache] = []
    for i in range(config.n_layers):
        pre = f"layer{i}."
        a_in = x
        q = _split_heads(a_in @ params[pre + "wq"] + params[pre + "bq"], config.n_heads)
        k = _split_heads(a_in @ params[pre + "wk"] + params[pre + "bk"], config.n_heads)
        v = _split_heads(a_in @ params[pre + "wv"] + params[pre + "bv"], config.n_heads)
        scores = (q @ k.swapaxes(-1, -2)) * scale + key_bias
        probs = softmax(scores, axis=-1)
        attn_drop = None
        probs_used = probs
        if drop:
            attn_drop = _dropout_mask(probs.shape, p, dropout_rng, dt)
            probs_used = probs * attn_drop
        ctx = _merge_heads(probs_used @ v)
        ao = ctx @ params[pre + "wo"] + params[pre + "bo"]
        ao_drop = None
        if drop:
            ao_drop = _dropout_mask(ao.shape, p, dropout_rng, dt)
            ao = ao * ao_drop
        x1, ln1 = _ln_forward(a_in + ao, params[pre + "ln1_g"], params[pre + "ln1_b"])
        z1 = x1 @ params[pre + "w1"] + params[pre + "b1"]
        z2 = gelu(z1)
        fo = z2 @ params[pre + "w2"] + params[pre + "b2"]
        ff_drop = None
        if drop:
            ff_drop = _dropout_mask(fo.shape, p, dropout_rng, dt)
            fo = fo * ff_drop
        x, ln2 = _ln_forward(x1 + fo, params[pre + "ln2_g"], params[pre + "ln2_b"])
        layers.append(LayerCache(
            a_in=a_in, q=q, k=k, v=v, probs=probs, attn_drop=attn_drop,
            ctx=ctx, ao_drop=ao_drop, ln1=ln1, x1=x1, z1=z1, z2=z2,
            ff_drop=ff_drop, ln2=ln2,
        ))

    return ForwardCache(
        input_ids=input_ids, valid_lens=np.asarray(valid_lens),
        key_bias=key_bias, emb_ln=emb_ln, emb_drop=emb_drop,
        layers=layers, h=x,
    )


def encode_backward(
    d_h: np.ndarray,
    cache: ForwardCache,
    params: Params,
    config: ModelConfig,
    grads: Params,
) -> None:
    """Accumulate encoder gradients for upstream d_h into `grads`."""
    dk = config.d_hidden // config.n_heads
    scale = 1.0 / np.sqrt(dk)
    dx = d_h
    for i in reversed(range(config.n_layers)):
        pre = f"layer{i}."
        lc = cache.layers[i]
        dres2, dg2, db2_ = _ln_backward(dx, lc.ln2, params[pre + "ln2_g"])
        grads[pre + "ln2_g"] += dg2
        grads[pre + "ln2_b"] += db2_

        dfo = dres2 if lc.ff_drop is None else dres2 * lc.ff_drop
        z2f = lc.z2.reshape(-1, config.d_ff)
        grads[pre + "w2"] += z2f.T @ dfo.reshape(-1, config.d_hidden)
        grads[pre + "b2"] += dfo.sum(axis=(0, 1))
        dz2 = dfo @ params[pre + "w2"].T
        dz1 = dz2 * gelu_grad(lc.z1)
        x1f = lc.x1.reshape(-1, config.d_hidden)
        grads[pre + "w1"] += x1f.T @ dz1.reshape(-1, config.d_ff)
        grads[pre + "b1"] += dz1.sum(axis=(0, 1))
        dx1 = dres2 + dz1 @ params[pre + "w1"].T

        dres1, dg1, db1_ = _ln_backward(dx1, lc.ln1, params[pre + "ln1_g"])
        grads[pre + "ln1_g"] += dg1
        grads[pre + "ln1_b"] += db1_

        dao = dres1 if lc.ao_drop is None else dres1 * lc.ao_drop
        ctxf = lc.ctx.reshape(-1, config.d_hidden)
        grads[pre + "wo"] += ctxf.T @ dao.reshape(-1, config.d_hidden)
        grads[pre + "bo"] += dao.sum(axis=(0, 1))
        dctx = _split_heads(dao @ params[pre + "wo"].T, config.n_heads)

        probs_used = lc.probs if lc.attn_drop is None else lc.probs * lc.attn_drop
        dv = probs_used.swapaxes(-1, -2) @ dctx
        dprobs = dctx @ lc.v.swapaxes(-1, -2)
        if lc.attn_drop is not None:
            dprobs = dprobs * lc.attn_drop
        dscores = lc.probs * (dprobs - (dprobs * lc.probs).sum(-1, keepdims=True))
        dq = (dscores @ lc.k) * scale
        dk_ = (dscores.swapaxes(-1, -2) @ lc.q) * scale

        da_in = dres1
        a_inf = lc.a_in.reshape(-1, config.d_hidden)
        for name, dmat in (("wq", dq), ("wk", dk_), ("wv", dv)):
            dfull = _merge_heads(dmat)
            grads[pre + name] += a_inf.T @ dfull.reshape(-1, config.d_hidden)
            grads[pre + "b" + name[1]] += dfull.sum(axis=(0, 1))
            da_in = da_in + dfull @ params[pre + name].T
        dx = da_in

    if cache.emb_drop is not None:
        dx = dx * cache.emb_drop
    dx0, dg, db = _ln_backward(dx, cache.emb_ln, params["emb_ln_g"])
    grads["emb_ln_g"] += dg
    grads["emb_ln_b"] += db
    np.add.at(grads["tok_emb"], cache.input_ids.reshape(-1),
              dx0.reshape(-1, config.d_hidden))
    grads["pos_emb"][: dx0.shape[1]] += dx0.sum(axis=0)


# ---------------------------------------------------------------------------
# Domain head

def domain_logits(h_cls: np.ndarray, params: Params) -> np.ndarray:
    """logits = D @ (W @ h_cls + b), two linear maps and nothing between."""
    a = h_cls @ params["cls_w"].T + params["cls_b"]
    return a @ params["dom_emb"].T


def domain_head_backward(
    dlogits: np.ndarray,
    h_cls: np.ndarray,
    params: Params,
    grads: Params,
) -> np.ndarray:
    """Accumulate head gradients; returns d h_cls."""
    a = h_cls @ params["cls_w"].T + params["cls_b"]
    grads["dom_emb"] += dlogits.T @ a
    da = dlogits @ params["dom_emb"]
    grads["cls_w"] += da.T @ h_cls
    grads["cls_b"] += da.sum(axis=0)
    return da @ params["cls_w"]


# ---------------------------------------------------------------------------
# Masked-token head

@dataclass
class EalCache:
    ex_idx: np.ndarray
    positions: np.ndarray
    g: np.ndarray                # gathered hidden states (T, d)
    z1: np.ndarray
    z2: np.ndarray
    z3: np.ndarray               # post-LN rows entering the tied projection
    ln: LnCache


def mlm_logits_eal(
    cache: ForwardCache,
    ex_idx: np.ndarray,
    positions: np.ndarray,
    params: Params,
) -> tuple[np.ndarray, EalCache]:
    """Vocabulary logits at target positions only (T_total x V).

    Hidden states are gathered before the output transform, so the expensive
    tied projection touches exactly T_total rows.
    """
    g = cache.h[ex_idx, positions]
    z1 = g @ params["mlm_w"] + params["mlm_b"]
    z2 = gelu(z1)
    z3, ln = _ln_forward(z2, params["mlm_ln_g"], params["mlm_ln_b"])
    logits = z3 @ params["tok_emb"].T + params["mlm_out_b"]
    _count_rows(g.shape[0])
    return logits, EalCache(ex_idx=ex_idx, positions=positions,
                            g=g, z1=z1, z2=z2, z3=z3, ln=ln)


def mlm_logits_full(cache: ForwardCache, params: Params) -> np.ndarray:
    """Vocabulary logits at every position (B x L x V); reference path."""
    h = cache.h
    z1 = h @ params["mlm_w"] + params["mlm_b"]
    z2 = gelu(z1)
    z3, _ = _ln_forward(z2, params["mlm_ln_g"], params["mlm_ln_b"])
    logits = z3 @ params["tok_emb"].T + params["mlm_out_b"]
    _count_rows(h.shape[0] * h.shape[1])
    return logits


def mlm_head_backward(
    dlogits: np.ndarray,
    ealc: EalCache,
    d_h: np.ndarray,
    params: Params,
    grads: Params,
) -> None:
    """Accumulate masked-token head gradients; scatters into d_h in place.

    The tied projection contributes to the token-embedding gradient here;
    the input-embedding contribution is added later by encode_backward.
    """
    grads["tok_emb"] += dlogits.T @ ealc.z3
    grads["mlm_out_b"] += dlogits.sum(axis=0)
    dz3 = dlogits @ params["tok_emb"]
    dz2, dg, db = _ln_backward(dz3, ealc.ln, params["mlm_ln_g"])
    grads["mlm_ln_g"] += dg
    grads["mlm_ln_b"] += db
    dz1 = dz2 * gelu_grad(ealc.z1)
    grads["mlm_w"] += ealc.g.T @ dz1
    grads["mlm_b"] += dz1.sum(axis=0)
    dg_rows = dz1 @ params["mlm_w"].T
    np.add.at(d_h, (ealc.ex_idx, ealc.positions), dg_rows)
