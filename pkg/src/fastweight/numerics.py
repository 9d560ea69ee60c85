"""Dense float64 primitives with hand-written backward passes.

Everything downstream (head, backbone, training) is assembled from these
closed forms, so second-order training gradients come out of differentiating
the explicit compositions rather than a tape-based autodiff.

Conventions: row-major, positions are rows; weight matrices are laid out
(d_in, d_out) so the forward is `x @ W`.
"""

import numpy as np

LN_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class ConfigError(ValueError):
    """A configuration field is invalid."""


class InputError(ValueError):
    """An input sequence violates a precondition (length, vocab range)."""


class StateError(ValueError):
    """A carried state does not match the model shapes."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a (n, k) @ b (k, m) -> (n, m), with an explicit shape check."""
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def relu2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """y = max(x, 0)^2 and its derivative mask 2*max(x, 0). Elementwise."""
    x = as_f64(x)
    r = np.maximum(x, 0.0)
    return r * r, 2.0 * r


def layernorm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    """Normalize the last axis: y = gain * (x - mean) / sqrt(var + eps) + bias.

    Works on (d,) vectors or (T, d) rows. Returns (y, cache) where cache is
    (xhat, istd) needed by layernorm_bwd.
    """
    x = as_f64(x)
    gain = as_f64(gain)
    bias = as_f64(bias)
    if gain.shape != bias.shape or gain.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"layernorm gain/bias {gain.shape}/{bias.shape} do not match input {x.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    cdev = x - mu
    var = np.mean(cdev * cdev, axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = cdev * istd
    return gain * xhat + bias, (xhat, istd, gain)


def layernorm_bwd(cache, dy: np.ndarray):
    """Exact gradients for layernorm_fwd. Returns (dx, dgain, dbias).

    For row inputs dgain/dbias are summed over rows. The dx formula folds the
    mean and variance paths: dx = istd * (dxh - mean(dxh) - xhat * mean(dxh*xhat))
    with dxh = dy * gain.
    """
    xhat, istd, gain = cache
    dy = as_f64(dy)
    if dy.shape != xhat.shape:
        raise ShapeError(f"dy {dy.shape} does not match forward input {xhat.shape}")
    dxh = dy * gain
    m1 = dxh.mean(axis=-1, keepdims=True)
    m2 = (dxh * xhat).mean(axis=-1, keepdims=True)
    dx = istd * (dxh - m1 - xhat * m2)
    if dy.ndim == 1:
        dgain = dy * xhat
        dbias = dy.copy()
    else:
        dgain = (dy * xhat).sum(axis=0)
        dbias = dy.sum(axis=0)
    return dx, dgain, dbias


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis."""
    logits = as_f64(logits)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """loss = -log softmax(logits)[target]; dlogits = softmax - onehot.

    Computed as logsumexp(logits) - logits[target] so the loss stays finite
    even when the target probability underflows.
    """
    logits = as_f64(logits)
    if not 0 <= target < logits.shape[-1]:
        raise IndexError(f"target {target} out of range for {logits.shape[-1]} logits")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    loss = lse - logits[target]
    d = softmax(logits)
    d[target] -= 1.0
    return float(loss), d


def softmax_xent_rows(logits: np.ndarray, targets: np.ndarray):
    """Row-wise cross entropy. logits (T, V), targets (T,) ints.

    Returns (losses (T,), dlogits (T, V), probs (T, V)).
    """
    logits = as_f64(logits)
    targets = np.asarray(targets)
    T, V = logits.shape
    if targets.shape != (T,):
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= V:
        raise IndexError("target id out of vocabulary range")
    rows = np.arange(T)
    m = logits.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=-1))
    losses = lse - logits[rows, targets]
    p = softmax(logits)
    d = p.copy()
    d[rows, targets] -= 1.0
    return losses, d, p


def exclusive_cumsum_rows(g: np.ndarray) -> np.ndarray:
    """out[t] = sum_{i<t} g[i]; row 0 is zero. g (T, d) -> (T, d)."""
    g = as_f64(g)
    out = np.zeros_like(g)
    if g.shape[0] > 1:
        np.cumsum(g[:-1], axis=0, out=out[1:])
    return out


def reverse_exclusive_cumsum_rows(g: np.ndarray) -> np.ndarray:
    """out[i] = sum_{t>i} g[t]; the transpose of exclusive_cumsum_rows."""
    g = as_f64(g)
    out = np.zeros_like(g)
    if g.shape[0] > 1:
        out[:-1] = np.cumsum(g[:0:-1], axis=0)[::-1]
    return out


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar f at x, component by component."""
    x = as_f64(x)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = f(x)
        xf[i] = orig - eps
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * eps)
    return g


def check_finite(arr: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what} encountered")
    return arr
