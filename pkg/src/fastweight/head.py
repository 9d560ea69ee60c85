"""The fast-weight head: slow pass, per-position gradients, parallel fast pass.

The head is an MLP (hidden layer with squared ReLU, projection, LayerNorm)
feeding an output softmax. In the fast pass every selected parameter tensor at
position t is the slow tensor minus learned step sizes times the sum of the
t-1 previous per-position gradients. Matrix terms are evaluated without ever
materializing gradient matrices: the per-position gradient of a weight matrix
is the outer product of its input and the upstream gradient row, so the update
term collapses to causal linear attention (queries = fast-pass inputs, keys =
slow-pass inputs, values = upstream gradient rows). Vector terms are exclusive
cumulative sums of gradient rows.
"""

from dataclasses import dataclass

import numpy as np

from . import linear_attention as la
from .numerics import (
    ShapeError,
    StateError,
    as_f64,
    exclusive_cumsum_rows,
    relu2,
    softmax,
    softmax_xent_rows,
    LN_EPS,
)

TENSOR_NAMES = ("U", "a", "W", "b", "ln_gain", "ln_bias", "E", "c")
MATRIX_TENSORS = ("U", "W", "E")
VECTOR_TENSORS = ("a", "b", "ln_gain", "ln_bias", "c")

MASK_ALL = TENSOR_NAMES
MASK_BIAS_ONLY = ("c",)
MASK_VECTORS = VECTOR_TENSORS
MASK_MATRICES = MATRIX_TENSORS


@dataclass
class HeadParams:
    """Slow weights of the head and output softmax.

    Shapes: U (d_model, d_hidden), a (d_hidden,), W (d_hidden, d_model),
    b (d_model,), ln_gain/ln_bias (d_model,), E (d_model, vocab), c (vocab,).
    """

    U: np.ndarray
    a: np.ndarray
    W: np.ndarray
    b: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    E: np.ndarray
    c: np.ndarray

    @property
    def d_model(self) -> int:
        return self.U.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.U.shape[1]

    @property
    def vocab(self) -> int:
        return self.c.shape[0]

    def tensor(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def named(self):
        for name in TENSOR_NAMES:
            yield name, getattr(self, name)

    def copy(self) -> "HeadParams":
        return HeadParams(**{k: v.copy() for k, v in self.named()})


def init_head(d_model: int, d_hidden: int, vocab: int, seed: int = 0) -> HeadParams:
    rng = np.random.default_rng(seed)
    return HeadParams(
        U=rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_hidden)),
        a=np.zeros(d_hidden),
        W=rng.normal(0.0, 1.0 / np.sqrt(d_hidden), (d_hidden, d_model)),
        b=np.zeros(d_model),
        ln_gain=np.ones(d_model),
        ln_bias=np.zeros(d_model),
        E=rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, vocab)),
        c=np.zeros(vocab),
    )


@dataclass
class StepSizes:
    """One learned step size per head tensor plus the fast-weight mask."""

    alpha: dict[str, float]
    mask: tuple[str, ...] = MASK_ALL

    def __post_init__(self):
        bad = [n for n in self.mask if n not in TENSOR_NAMES]
        if bad:
            raise ShapeError(f"unknown tensors in fast-weight mask: {bad}")
        missing = [n for n in self.mask if n not in self.alpha]
        if missing:
            raise ShapeError(f"step sizes missing for masked tensors: {missing}")

    @staticmethod
    def uniform(value: float, mask: tuple[str, ...] = MASK_ALL) -> "StepSizes":
        return StepSizes({n: float(value) for n in TENSOR_NAMES}, tuple(mask))


@dataclass
class PositionTape:
    """Slow-pass activations, one row per position."""

    h: np.ndarray          # (T, d)
    targets: np.ndarray    # (T,) int
    z: np.ndarray          # (T, m) pre-activation
    v: np.ndarray          # (T, m) squared-relu output
    relu_mask: np.ndarray  # (T, m) derivative 2*max(z, 0)
    o: np.ndarray          # (T, d) projection before bias
    pre_ln: np.ndarray     # (T, d) o + b
    xhat: np.ndarray       # (T, d) normalized pre_ln
    istd: np.ndarray       # (T, 1)
    u: np.ndarray          # (T, d) LayerNorm output
    logits: np.ndarray     # (T, V)
    probs: np.ndarray      # (T, V)
    losses: np.ndarray     # (T,)


@dataclass
class PositionGrads:
    """Per-position gradients of each position's own loss (upstream rows).

    Full matrix gradients are rank one: dU_t = h_t^T g_z_t, dW_t = v_t^T g_o_t,
    dE_t = u_t^T g_logits_t. Vector gradients are stored directly; the bias
    rows alias their upstream counterparts (g_a = g_z, g_b = g_o, g_c =
    g_logits, g_ln_bias = g_u).
    """

    g_logits: np.ndarray   # (T, V)
    g_u: np.ndarray        # (T, d)
    g_o: np.ndarray        # (T, d)
    g_z: np.ndarray        # (T, m)
    g_ln_gain: np.ndarray  # (T, d)

    @property
    def g_c(self):
        return self.g_logits

    @property
    def g_ln_bias(self):
        return self.g_u

    @property
    def g_b(self):
        return self.g_o

    @property
    def g_a(self):
        return self.g_z

    def rows(self, name: str) -> np.ndarray:
        return {
            "U": self.g_z, "a": self.g_z,
            "W": self.g_o, "b": self.g_o,
            "ln_gain": self.g_ln_gain, "ln_bias": self.g_u,
            "E": self.g_logits, "c": self.g_logits,
        }[name]


def tensor_shape(head: HeadParams, name: str) -> tuple:
    return head.tensor(name).shape


@dataclass
class StreamState:
    """Accumulated fast-weight deltas carried across segments.

    Matrix entries hold the key-value accumulator sum(key_i^T value_i), which
    has the tensor's own shape; vector entries hold summed gradient rows.
    Treated as constant under differentiation.
    """

    acc: dict[str, np.ndarray]

    @staticmethod
    def zeros(head: HeadParams, mask: tuple[str, ...]) -> "StreamState":
        return StreamState({n: np.zeros(tensor_shape(head, n)) for n in mask})

    def copy(self) -> "StreamState":
        return StreamState({k: v.copy() for k, v in self.acc.items()})


def _check_state(state: StreamState, head: HeadParams, mask) -> None:
    for name in mask:
        if name not in state.acc:
            raise StateError(f"stream state missing accumulator for {name!r}")
        want = tensor_shape(head, name)
        got = state.acc[name].shape
        if got != want:
            raise StateError(f"stream accumulator {name!r} has shape {got}, expected {want}")


def slow_forward(head: HeadParams, H: np.ndarray, targets) -> tuple[PositionTape, np.ndarray]:
    """First pass with slow weights; targets[t] is the token predicted at t."""
    H = as_f64(H)
    targets = np.asarray(targets, dtype=np.int64)
    if H.ndim != 2 or H.shape[1] != head.d_model:
        raise ShapeError(f"H {H.shape} does not match head d_model {head.d_model}")
    if targets.shape != (H.shape[0],):
        raise ShapeError(f"targets {targets.shape} do not match {H.shape[0]} positions")
    z = H @ head.U + head.a
    v, relu_mask = relu2(z)
    o = v @ head.W
    pre_ln = o + head.b
    mu = pre_ln.mean(axis=1, keepdims=True)
    cdev = pre_ln - mu
    var = np.mean(cdev * cdev, axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = cdev * istd
    u = xhat * head.ln_gain + head.ln_bias
    logits = u @ head.E + head.c
    losses, _, probs = softmax_xent_rows(logits, targets)
    tape = PositionTape(H, targets, z, v, relu_mask, o, pre_ln, xhat, istd,
                        u, logits, probs, losses)
    return tape, losses


def per_position_grads(head: HeadParams, tape: PositionTape,
                       targets=None) -> PositionGrads:
    """Gradient of each L_t alone w.r.t. the head tensors, as upstream rows.

    All T rows come out of one vectorized backward because L_t depends only
    on h_t; there is no cross-position mixing.
    """
    if targets is None:
        targets = tape.targets
    targets = np.asarray(targets, dtype=np.int64)
    T = tape.h.shape[0]
    g_logits = tape.probs.copy()
    g_logits[np.arange(T), targets] -= 1.0
    g_u = g_logits @ head.E.T
    dxh = g_u * head.ln_gain
    m1 = dxh.mean(axis=1, keepdims=True)
    m2 = (dxh * tape.xhat).mean(axis=1, keepdims=True)
    g_o = tape.istd * (dxh - m1 - tape.xhat * m2)
    g_ln_gain = g_u * tape.xhat
    g_v = g_o @ head.W.T
    g_z = g_v * tape.relu_mask
    return PositionGrads(g_logits, g_u, g_o, g_z, g_ln_gain)


@dataclass
class FastCache:
    """Fast-pass intermediates kept for the training backward."""

    att: dict[str, np.ndarray]      # linear-attention terms, incl. stream init
    cum: dict[str, np.ndarray]      # cumulative vector terms, incl. stream acc
    z: np.ndarray
    relu_mask: np.ndarray
    v: np.ndarray
    o: np.ndarray
    pre_ln: np.ndarray
    xhat: np.ndarray
    istd: np.ndarray
    gain_rows: np.ndarray           # (T, d) per-position effective gain
    bias_rows: np.ndarray           # (T, d)
    u: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class FastResult:
    losses: np.ndarray
    logits: np.ndarray
    cache: FastCache | None = None


def fast_forward(head: HeadParams, steps: StepSizes, H: np.ndarray,
                 tape: PositionTape, grads: PositionGrads,
                 state: StreamState | None = None, chunk_size: int = 64,
                 return_cache: bool = False) -> FastResult:
    """Second pass with evolving fast weights, computed in parallel.

    Layers are recomposed in order (U/a, squared ReLU, W/b, LayerNorm, E/c) so
    each matrix term's queries come from fast activations while keys and
    values come from the slow pass. With an empty mask this returns the slow
    losses unchanged; with all step sizes zero it matches them exactly.
    """
    H = as_f64(H)
    mask = set(steps.mask)
    alpha = steps.alpha
    if state is not None:
        _check_state(state, head, mask)

    def acc(name):
        if state is not None and name in state.acc:
            return state.acc[name]
        return None

    def mat_term(name, q, k, vv):
        init = acc(name)
        init_state = la.KVState(init) if init is not None else None
        out, _ = la.chunked_causal_linear_attention(q, k, vv, chunk_size, init_state)
        return out

    def vec_term(name, rows):
        out = exclusive_cumsum_rows(rows)
        a0 = acc(name)
        if a0 is not None:
            out = out + a0
        return out

    att: dict[str, np.ndarray] = {}
    cum: dict[str, np.ndarray] = {}
    T = H.shape[0]

    dirty = False
    z = tape.z
    if "U" in mask:
        att["U"] = mat_term("U", H, tape.h, grads.g_z)
        z = z - alpha["U"] * att["U"]
        dirty = True
    if "a" in mask:
        cum["a"] = vec_term("a", grads.g_z)
        z = z - alpha["a"] * cum["a"]
        dirty = True

    if dirty:
        v, relu_mask = relu2(z)
    else:
        v, relu_mask = tape.v, tape.relu_mask

    if dirty or "W" in mask:
        o = v @ head.W
        if "W" in mask:
            att["W"] = mat_term("W", v, tape.v, grads.g_o)
            o = o - alpha["W"] * att["W"]
        dirty = True
    else:
        o = tape.o

    pre_ln = o + head.b
    if "b" in mask:
        cum["b"] = vec_term("b", grads.g_o)
        pre_ln = pre_ln - alpha["b"] * cum["b"]
        dirty = True

    gain_rows = np.broadcast_to(head.ln_gain, (T, head.d_model))
    if "ln_gain" in mask:
        cum["ln_gain"] = vec_term("ln_gain", grads.g_ln_gain)
        gain_rows = head.ln_gain - alpha["ln_gain"] * cum["ln_gain"]
    bias_rows = np.broadcast_to(head.ln_bias, (T, head.d_model))
    if "ln_bias" in mask:
        cum["ln_bias"] = vec_term("ln_bias", grads.g_u)
        bias_rows = head.ln_bias - alpha["ln_bias"] * cum["ln_bias"]

    if dirty or "ln_gain" in mask or "ln_bias" in mask:
        mu = pre_ln.mean(axis=1, keepdims=True)
        cdev = pre_ln - mu
        var = np.mean(cdev * cdev, axis=1, keepdims=True)
        istd = 1.0 / np.sqrt(var + LN_EPS)
        xhat = cdev * istd
        u = gain_rows * xhat + bias_rows
        dirty = True
    else:
        xhat, istd, u = tape.xhat, tape.istd, tape.u

    if dirty or "E" in mask or "c" in mask:
        logits = u @ head.E + head.c
        if "E" in mask:
            att["E"] = mat_term("E", u, tape.u, grads.g_logits)
            logits = logits - alpha["E"] * att["E"]
        if "c" in mask:
            cum["c"] = vec_term("c", grads.g_logits)
            logits = logits - alpha["c"] * cum["c"]
        losses, _, probs = softmax_xent_rows(logits, tape.targets)
    else:
        logits, probs, losses = tape.logits, tape.probs, tape.losses

    cache = None
    if return_cache:
        cache = FastCache(att, cum, z, relu_mask, v, o, pre_ln, xhat, istd,
                          np.array(gain_rows), np.array(bias_rows), u, logits, probs)
    return FastResult(losses, logits, cache)


def segment_grad_sums(tape: PositionTape, grads: PositionGrads,
                      mask: tuple[str, ...]) -> dict[str, np.ndarray]:
    """Summed per-position gradients of one segment, per masked tensor."""
    sums = {}
    for name in mask:
        rows = grads.rows(name)
        if name in MATRIX_TENSORS:
            keys = {"U": tape.h, "W": tape.v, "E": tape.u}[name]
            sums[name] = keys.T @ rows
        else:
            sums[name] = rows.sum(axis=0)
    return sums


def update_stream_state(state: StreamState, grads: PositionGrads,
                        tape: PositionTape, gammas: dict[str, float]) -> StreamState:
    """Decay each accumulator by its gamma, then add the segment's summed
    gradients. The result is a plain value: constant under differentiation."""
    mask = tuple(state.acc.keys())
    sums = segment_grad_sums(tape, grads, mask)
    new = {}
    for name in mask:
        g = float(gammas.get(name, 1.0))
        new[name] = g * state.acc[name] + sums[name]
    return StreamState(new)


def head_forward_single(params_like, h: np.ndarray):
    """Head forward for one position. params_like maps tensor name -> array.

    Returns (logits, cache) where cache holds (z, v_act, relu_mask, xhat, istd, u).
    """
    U, a = params_like["U"], params_like["a"]
    W, b = params_like["W"], params_like["b"]
    gain, bias = params_like["ln_gain"], params_like["ln_bias"]
    E, c = params_like["E"], params_like["c"]
    z = h @ U + a
    v_act, relu_mask = relu2(z)
    p = v_act @ W + b
    mu = p.mean()
    cdev = p - mu
    var = np.mean(cdev * cdev)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = cdev * istd
    u = gain * xhat + bias
    logits = u @ E + c
    return logits, (z, v_act, relu_mask, xhat, istd, u)


def head_grads_single(head: HeadParams, h: np.ndarray, target: int) -> dict[str, np.ndarray]:
    """Full gradients of one position's slow loss, keyed by tensor name."""
    params = {n: t for n, t in head.named()}
    logits, (z, v_act, relu_mask, xhat, istd, u) = head_forward_single(params, h)
    p = softmax(logits)
    g_logits = p.copy()
    g_logits[target] -= 1.0
    g_u = g_logits @ head.E.T
    dxh = g_u * head.ln_gain
    m1 = dxh.mean()
    m2 = (dxh * xhat).mean()
    g_o = istd * (dxh - m1 - xhat * m2)
    g_v = g_o @ head.W.T
    g_z = g_v * relu_mask
    return {
        "U": np.outer(h, g_z), "a": g_z,
        "W": np.outer(v_act, g_o), "b": g_o,
        "ln_gain": g_u * xhat, "ln_bias": g_u,
        "E": np.outer(u, g_logits), "c": g_logits,
    }


def sample_token(logits: np.ndarray, temperature: float, rng) -> int:
    """Temperature 0 is argmax with ties to the lowest id."""
    if temperature == 0.0:
        return int(np.argmax(logits))
    p = softmax(logits / temperature)
    return int(rng.choice(p.shape[0], p=p))


@dataclass
class GenStep:
    token: int
    offsets: StreamState
    fast_loss: float
    fast_logits: np.ndarray


def generate_step(head: HeadParams, steps: StepSizes, offsets: StreamState,
                  h: np.ndarray, temperature: float, rng) -> GenStep:
    """One sequential generation step.

    Samples from the fast-weight distribution (slow tensors offset by the
    accumulated gradients), then folds the gradient of predicting the sampled
    token -- computed against the slow weights -- into the offsets.
    """
    _check_state(offsets, head, steps.mask)
    fast_params = {n: t for n, t in head.named()}
    for name in steps.mask:
        fast_params[name] = fast_params[name] - steps.alpha[name] * offsets.acc[name]
    logits, _ = head_forward_single(fast_params, as_f64(h))
    token = sample_token(logits, temperature, rng)
    fast_loss = float(-np.log(softmax(logits)[token]))
    grads = head_grads_single(head, as_f64(h), token)
    new_acc = dict(offsets.acc)
    for name in steps.mask:
        new_acc[name] = offsets.acc[name] + grads[name]
    return GenStep(token, StreamState(new_acc), fast_loss, logits)
