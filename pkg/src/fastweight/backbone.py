"""Small causal transformer producing context vectors h_1..h_T.

Pre-norm residual blocks, learned absolute positional embeddings, GELU
feed-forward, final LayerNorm. Optional segment recurrence: keys and values
additionally cover cached activations of the previous segment, which are
treated as constants (no gradient flows into them).

Forward passes keep full caches so the backward is an exact hand-written VJP;
`encode_backward` returns gradients for every parameter plus the embedded
inputs.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import LN_EPS, ConfigError, InputError, ShapeError, as_f64

_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh-approximate GELU and its derivative."""
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
    return y, dy


@dataclass
class BackboneConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    memory_len: int = 0
    seed: int = 0

    def validate(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.memory_len < 0:
            raise ConfigError(f"memory_len must be >= 0, got {self.memory_len}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        return self


@dataclass
class LayerParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class BackboneParams:
    cfg: BackboneConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerParams]
    lnf_g: np.ndarray
    lnf_b: np.ndarray

    def named(self):
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, lp in enumerate(self.layers):
            for f in lp.__dataclass_fields__:
                yield f"layers.{i}.{f}", getattr(lp, f)
        yield "lnf_g", self.lnf_g
        yield "lnf_b", self.lnf_b

    def get(self, key: str) -> np.ndarray:
        if key.startswith("layers."):
            _, i, f = key.split(".")
            return getattr(self.layers[int(i)], f)
        return getattr(self, key)

    def set(self, key: str, value: np.ndarray) -> None:
        if key.startswith("layers."):
            _, i, f = key.split(".")
            setattr(self.layers[int(i)], f, value)
        else:
            setattr(self, key, value)

    def copy(self) -> "BackboneParams":
        out = init_backbone(self.cfg)
        for k, v in self.named():
            out.set(k, v.copy())
        return out


def init_backbone(config: BackboneConfig) -> BackboneParams:
    """Deterministic init: embeddings N(0, 0.02), weights N(0, 1/fan_in)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, dff = config.d_model, config.d_ff
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            ln1_g=np.ones(d), ln1_b=np.zeros(d),
            wq=rng.normal(0, 1 / np.sqrt(d), (d, d)),
            wk=rng.normal(0, 1 / np.sqrt(d), (d, d)),
            wv=rng.normal(0, 1 / np.sqrt(d), (d, d)),
            wo=rng.normal(0, 1 / np.sqrt(d), (d, d)),
            bq=np.zeros(d), bk=np.zeros(d), bv=np.zeros(d), bo=np.zeros(d),
            ln2_g=np.ones(d), ln2_b=np.zeros(d),
            w1=rng.normal(0, 1 / np.sqrt(d), (d, dff)), b1=np.zeros(dff),
            w2=rng.normal(0, 1 / np.sqrt(dff), (dff, d)), b2=np.zeros(d),
        ))
    return BackboneParams(
        cfg=config,
        tok_emb=rng.normal(0, 0.02, (config.vocab_size, d)),
        pos_emb=rng.normal(0, 0.02, (config.max_seq_len, d)),
        layers=layers,
        lnf_g=np.ones(d), lnf_b=np.zeros(d),
    )


def param_count(config: BackboneConfig) -> int:
    d, dff = config.d_model, config.d_ff
    per_layer = 4 * (d * d + d) + 2 * 2 * d + d * dff + dff + dff * d + d
    return (config.vocab_size * d + config.max_seq_len * d
            + config.n_layers * per_layer + 2 * d)


@dataclass
class SegmentMemory:
    """Per-layer cached activations of the previous segment (constants)."""

    activations: list[np.ndarray]  # n_layers entries, each (M, d_model)

    @staticmethod
    def empty(config: BackboneConfig) -> "SegmentMemory":
        return SegmentMemory([np.zeros((0, config.d_model)) for _ in range(config.n_layers)])


def _ln_rows(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    c = x - mu
    var = np.mean(c * c, axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = c * istd
    return xhat * g + b, (xhat, istd)


def _ln_rows_bwd(cache, g, dy):
    xhat, istd = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxh = dy * g
    m1 = dxh.mean(axis=1, keepdims=True)
    m2 = (dxh * xhat).mean(axis=1, keepdims=True)
    dx = istd * (dxh - m1 - xhat * m2)
    return dx, dg, db


def _split_heads(x, n_heads):
    T, d = x.shape
    return x.reshape(T, n_heads, d // n_heads)


def _attention(lp: LayerParams, x, mem, cfg):
    """Pre-norm causal attention over [mem; x]. Returns (out, cache)."""
    M = mem.shape[0]
    xm = np.vstack([mem, x]) if M else x
    y, ln_cache = _ln_rows(xm, lp.ln1_g, lp.ln1_b)
    q = y[M:] @ lp.wq + lp.bq
    k = y @ lp.wk + lp.bk
    v = y @ lp.wv + lp.bv
    T = x.shape[0]
    hd = cfg.d_model // cfg.n_heads
    qh, kh, vh = (_split_heads(t, cfg.n_heads) for t in (q, k, v))
    scores = np.einsum("thd,shd->hts", qh, kh) / np.sqrt(hd)
    # query t may see memory plus current positions <= t
    mask = np.tril(np.ones((T, M + T)), k=M)
    scores = np.where(mask[None, :, :] > 0, scores, -np.inf)
    w = np.exp(scores - scores.max(axis=2, keepdims=True))
    w /= w.sum(axis=2, keepdims=True)
    ctx = np.einsum("hts,shd->thd", w, vh).reshape(T, cfg.d_model)
    out = ctx @ lp.wo + lp.bo
    cache = (xm, y, ln_cache, q, k, v, w, ctx, M)
    return out, cache


def _attention_bwd(lp: LayerParams, cfg, cache, dout):
    """Gradients of _attention; the memory rows of xm receive none."""
    xm, y, ln_cache, q, k, v, w, ctx, M = cache
    T = dout.shape[0]
    hd = cfg.d_model // cfg.n_heads
    grads = {}
    grads["wo"] = ctx.T @ dout
    grads["bo"] = dout.sum(axis=0)
    dctx = (dout @ lp.wo.T).reshape(T, cfg.n_heads, hd)
    qh, kh, vh = (_split_heads(t, cfg.n_heads) for t in (q, k, v))
    dw = np.einsum("thd,shd->hts", dctx, vh)
    dvh = np.einsum("hts,thd->shd", w, dctx)
    ds = w * (dw - (w * dw).sum(axis=2, keepdims=True))
    dqh = np.einsum("hts,shd->thd", ds, kh) / np.sqrt(hd)
    dkh = np.einsum("hts,thd->shd", ds, qh) / np.sqrt(hd)
    dq = dqh.reshape(T, cfg.d_model)
    dk = dkh.reshape(M + T, cfg.d_model)
    dv = dvh.reshape(M + T, cfg.d_model)
    grads["wq"] = y[M:].T @ dq
    grads["bq"] = dq.sum(axis=0)
    grads["wk"] = y.T @ dk
    grads["bk"] = dk.sum(axis=0)
    grads["wv"] = y.T @ dv
    grads["bv"] = dv.sum(axis=0)
    dy = dk @ lp.wk.T + dv @ lp.wv.T
    dy[M:] += dq @ lp.wq.T
    dxm, dg, db = _ln_rows_bwd(ln_cache, lp.ln1_g, dy)
    grads["ln1_g"] = dg
    grads["ln1_b"] = db
    return dxm[M:], grads  # memory rows dropped: stop-gradient


def _ff(lp: LayerParams, x):
    y, ln_cache = _ln_rows(x, lp.ln2_g, lp.ln2_b)
    h1 = y @ lp.w1 + lp.b1
    act, dact = gelu(h1)
    out = act @ lp.w2 + lp.b2
    return out, (y, ln_cache, h1, act, dact)


def _ff_bwd(lp: LayerParams, cache, dout):
    y, ln_cache, h1, act, dact = cache
    grads = {}
    grads["w2"] = act.T @ dout
    grads["b2"] = dout.sum(axis=0)
    dact_out = dout @ lp.w2.T
    dh1 = dact_out * dact
    grads["w1"] = y.T @ dh1
    grads["b1"] = dh1.sum(axis=0)
    dy = dh1 @ lp.w1.T
    dx, dg, db = _ln_rows_bwd(ln_cache, lp.ln2_g, dy)
    grads["ln2_g"] = dg
    grads["ln2_b"] = db
    return dx, grads


def _check_tokens(params: BackboneParams, tokens: np.ndarray):
    cfg = params.cfg
    if tokens.ndim != 1 or tokens.shape[0] == 0:
        raise InputError(f"expected a non-empty 1-d token sequence, got shape {tokens.shape}")
    if tokens.shape[0] > cfg.max_seq_len:
        raise InputError(
            f"sequence length {tokens.shape[0]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError(f"token id out of vocabulary (size {cfg.vocab_size})")


def encode_with_cache(params: BackboneParams, tokens,
                      memory: SegmentMemory | None = None):
    """Returns (H (T, d_model), cache, new SegmentMemory or None)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(params, tokens)
    cfg = params.cfg
    T = tokens.shape[0]
    x = params.tok_emb[tokens] + params.pos_emb[:T]
    mems = memory.activations if memory is not None else [
        np.zeros((0, cfg.d_model))] * cfg.n_layers
    if memory is not None and len(mems) != cfg.n_layers:
        raise ShapeError(f"memory has {len(mems)} layers, config wants {cfg.n_layers}")
    layer_caches = []
    new_mem = []
    for li, lp in enumerate(params.layers):
        if cfg.memory_len:
            new_mem.append(np.vstack([mems[li], x])[-cfg.memory_len:].copy())
        attn, a_cache = _attention(lp, x, mems[li], cfg)
        x1 = x + attn
        ff, f_cache = _ff(lp, x1)
        x2 = x1 + ff
        layer_caches.append((a_cache, f_cache))
        x = x2
    H, lnf_cache = _ln_rows(x, params.lnf_g, params.lnf_b)
    cache = (tokens, layer_caches, lnf_cache)
    out_mem = SegmentMemory(new_mem) if cfg.memory_len else None
    return H, cache, out_mem


def encode(params: BackboneParams, tokens) -> np.ndarray:
    """Context vectors; h_t depends only on tokens at positions <= t."""
    H, _, _ = encode_with_cache(params, tokens)
    return H


def encode_segment(params: BackboneParams, tokens, memory: SegmentMemory):
    """Segment-recurrent encode. Returns (H, new SegmentMemory)."""
    H, _, new_mem = encode_with_cache(params, tokens, memory)
    if new_mem is None:
        new_mem = SegmentMemory.empty(params.cfg)
    return H, new_mem


def encode_backward(params: BackboneParams, cache, dH):
    """VJP of encode_with_cache. Returns dict key -> gradient array."""
    tokens, layer_caches, lnf_cache = cache
    cfg = params.cfg
    grads = {k: np.zeros_like(v) for k, v in params.named()}
    dx, dg, db = _ln_rows_bwd(lnf_cache, params.lnf_g, as_f64(dH))
    grads["lnf_g"] += dg
    grads["lnf_b"] += db
    for li in range(cfg.n_layers - 1, -1, -1):
        a_cache, f_cache = layer_caches[li]
        dff_in, fgrads = _ff_bwd(params.layers[li], f_cache, dx)
        dx1 = dx + dff_in
        dattn_in, agrads = _attention_bwd(params.layers[li], cfg, a_cache, dx1)
        dx = dx1 + dattn_in
        for name, g in {**fgrads, **agrads}.items():
            grads[f"layers.{li}.{name}"] += g
    T = tokens.shape[0]
    np.add.at(grads["tok_emb"], tokens, dx)
    grads["pos_emb"][:T] += dx
    return grads
