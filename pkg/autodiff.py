"""
Reverse-mode automatic differentiation over numpy arrays.

Only the layers the asymmetric U-Net needs are provided, together with the
BCE/Dice losses, Adam and a finite-difference gradient checker.
"""

import logging
from enum import Enum
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from errors import NumericError, ShapeError
from schemas import AdamConfig, LossConfig

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


class Precision(str, Enum):
    F32 = "f32"  # training
    F64 = "f64"  # gradient checks

    @property
    def dtype(self):
        return np.float32 if self == Precision.F32 else np.float64


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A node of the computation graph; leaves have no parents"""

    __slots__ = ("data", "grad", "parents", "op", "kink", "_backward")

    def __init__(self, data, parents: Tuple["Tensor", ...] = (), backward: Optional[BackwardFn] = None,
                 op: str = "leaf", kink: Optional[np.ndarray] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.op = op
        self.kink = kink  # branch decisions of non-smooth ops (relu masks, pool argmax, clamps)
        self._backward = backward

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.data.dtype})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def precision(self) -> Precision:
        return Precision.F64 if self.data.dtype == np.float64 else Precision.F32

    def item(self) -> float:
        return float(self.data)

    def graph(self) -> List["Tensor"]:
        """Nodes reachable from self in topological order (parents first)"""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def kinks(self) -> List[np.ndarray]:
        return [node.kink for node in self.graph() if node.kink is not None]

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Fill .grad on every node of the graph; each node is visited once"""
        order = self.graph()
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node._backward(node.grad)):
                if g is None:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient flowing out of {node.op}")
                parent.grad = g if parent.grad is None else parent.grad + g


def tensor(data, precision: Precision = Precision.F32) -> Tensor:
    return Tensor(np.asarray(data, dtype=precision.dtype))


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardFn, op: str,
            kink: Optional[np.ndarray] = None) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced NaN or Inf")
    return Tensor(data, parents, backward, op, kink)


# Layers
def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 2D cross-correlation: x [C_in,H,W], w [C_out,C_in,kh,kw], b [C_out]"""
    if x.data.ndim != 3 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ShapeError(f"conv2d expects x[C,H,W], w[O,C,kh,kw], b[O]; got {x.shape}, {w.shape}, {b.shape}")
    c_out, c_in, kh, kw = w.shape
    if c_in != x.shape[0] or b.shape[0] != c_out:
        raise ShapeError(f"conv2d channel mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel {kh}x{kw} must be odd")
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))  # [C, H, W, kh, kw]
    out = np.tensordot(w.data, windows, axes=([1, 2, 3], [0, 3, 4])) + b.data[:, None, None]

    def backward(g):
        dw = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        db = g.sum(axis=(1, 2))
        g_windows = sliding_window_view(np.pad(g, ((0, 0), (ph, ph), (pw, pw))), (kh, kw), axis=(1, 2))
        dx = np.tensordot(w.data[:, :, ::-1, ::-1], g_windows, axes=([0, 2, 3], [0, 3, 4]))
        return dx, dw, db

    return _result(out, (x, w, b), backward, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu", kink=mask)


def maxpool2d(x: Tensor, window: Tuple[int, int] = (2, 2)) -> Tensor:
    """Non-overlapping max pool; ties go to the first index in row-major order"""
    fh, fw = window
    c, h, w = x.shape
    if h % fh or w % fw:
        raise ShapeError(f"maxpool2d window {window} does not divide {h}x{w}")
    blocks = x.data.reshape(c, h // fh, fh, w // fw, fw).transpose(0, 1, 3, 2, 4).reshape(c, h // fh, w // fw, fh * fw)
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, arg, g[..., None], axis=-1)
        return (routed.reshape(c, h // fh, w // fw, fh, fw).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return _result(out, (x,), backward, "maxpool2d", kink=arg[..., 0])


def upsample_nearest(x: Tensor, factor: Tuple[int, int] = (2, 2)) -> Tensor:
    fh, fw = factor
    c, h, w = x.shape
    out = x.data.repeat(fh, axis=1).repeat(fw, axis=2)
    return _result(out, (x,), lambda g: (g.reshape(c, h, fh, w, fw).sum(axis=(2, 4)),), "upsample_nearest")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    split = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return _result(out, (a, b), lambda g: (g[:split], g[split:]), "concat_channels")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def dot_const(x: Tensor, c: np.ndarray) -> Tensor:
    """sum(x * c) for a constant array c; turns any op into a scalar for checks"""
    c = np.asarray(c, dtype=x.data.dtype)
    if c.shape != x.shape:
        raise ShapeError(f"dot_const shape mismatch: {x.shape} vs {c.shape}")
    return _result(np.sum(x.data * c), (x,), lambda g: (g * c,), "dot_const")


def pixel(x: Tensor, index: Tuple[int, ...]) -> Tensor:
    """Select one element as a scalar"""
    if len(index) != x.data.ndim or any(not 0 <= i < n for i, n in zip(index, x.shape)):
        raise ShapeError(f"index {index} outside tensor of shape {x.shape}")

    def backward(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return _result(x.data[index], (x,), backward, "pixel")


# Losses
def bce_loss(o: Tensor, g: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with o clamped to [1e-7, 1 - 1e-7]"""
    g = np.asarray(g, dtype=o.data.dtype)
    if g.shape != o.shape:
        raise ShapeError(f"bce_loss shape mismatch: {o.shape} vs {g.shape}")
    inside = (o.data >= BCE_CLAMP) & (o.data <= 1 - BCE_CLAMP)
    oc = np.clip(o.data, BCE_CLAMP, 1 - BCE_CLAMP)
    n = o.data.size
    value = -np.mean(g * np.log(oc) + (1 - g) * np.log(1 - oc))

    def backward(grad):
        return (grad * inside * (-(g / oc) + (1 - g) / (1 - oc)) / n,)

    return _result(np.asarray(value, dtype=o.data.dtype), (o,), backward, "bce_loss", kink=inside)


def dice_loss(o: Tensor, g: np.ndarray, epsilon: float = 1e-6) -> Tensor:
    """1 - (2 sum(o g) + eps) / (sum(o^2) + sum(g^2) + eps)"""
    g = np.asarray(g, dtype=o.data.dtype)
    if g.shape != o.shape:
        raise ShapeError(f"dice_loss shape mismatch: {o.shape} vs {g.shape}")
    num = 2 * np.sum(o.data * g) + epsilon
    den = np.sum(o.data * o.data) + np.sum(g * g) + epsilon
    value = 1 - num / den

    def backward(grad):
        return (grad * -(2 * g * den - num * 2 * o.data) / (den * den),)

    return _result(np.asarray(value, dtype=o.data.dtype), (o,), backward, "dice_loss")


def combined_loss(o: Tensor, g: np.ndarray, cfg: LossConfig) -> Tensor:
    """bce_weight * BCE + dice_weight * Dice; zero-weight terms are not built"""
    terms = []
    if cfg.bce_weight > 0:
        bce = bce_loss(o, g)
        terms.append(bce if cfg.bce_weight == 1 else scale(bce, cfg.bce_weight))
    if cfg.dice_weight > 0:
        dice = dice_loss(o, g, cfg.dice_epsilon)
        terms.append(dice if cfg.dice_weight == 1 else scale(dice, cfg.dice_weight))
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total


# Optimizer
class AdamState:
    """First/second moment estimates keyed like the parameters, plus the step counter"""

    def __init__(self, m: Optional[Dict[str, np.ndarray]] = None, v: Optional[Dict[str, np.ndarray]] = None,
                 t: int = 0):
        self.m = m or {}
        self.v = v or {}
        self.t = t

    @classmethod
    def zeros_like(cls, params: Dict[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState,
              cfg: AdamConfig) -> AdamState:
    """One bias-corrected Adam update, applied in place in key order"""
    if not state.m:
        state = AdamState.zeros_like(params)
    state.t += 1
    c1 = 1 - cfg.beta1 ** state.t
    c2 = 1 - cfg.beta2 ** state.t
    for name, p in params.items():
        g = grads[name].astype(p.data.dtype, copy=False)
        state.m[name] = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p.data = (p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.data.dtype)
    return state


# Verification
class GradCheckResult(NamedTuple):
    max_error: float
    n_checked: int
    n_excluded: int


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-12)


def _same_kinks(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(build: Callable[[], Tensor], leaves: Dict[str, Tensor], h: float = 1e-5, n_coords: int = 20,
               seed: int = 0, min_magnitude: float = 0.0) -> GradCheckResult:
    """Central differences against backward() at randomly drawn leaf coordinates.

    `build` recomputes a scalar from the current leaf values. Leaves are cast to
    f64. Coordinates where a relu mask, pool argmax or clamp changes between
    x - h and x + h sit on a non-differentiable point and are excluded, as are
    coordinates whose gradient is below `min_magnitude`.
    """
    for leaf in leaves.values():
        leaf.data = leaf.data.astype(np.float64)
    out = build()
    out.backward()
    analytic = {k: np.array(v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in leaves.items()}
    base_kinks = out.kinks()

    rng = np.random.default_rng(seed)
    names = list(leaves)
    sizes = np.array([leaves[k].data.size for k in names])
    candidates = rng.permutation(int(sizes.sum()))
    bounds = np.cumsum(sizes)

    worst, checked, excluded = 0.0, 0, 0
    for flat in candidates:
        if checked >= n_coords:
            break
        which = int(np.searchsorted(bounds, flat, side="right"))
        name = names[which]
        local = int(flat - (bounds[which - 1] if which else 0))
        leaf = leaves[name]
        idx = np.unravel_index(local, leaf.shape)
        original = leaf.data[idx]

        leaf.data[idx] = original + h
        plus = build()
        leaf.data[idx] = original - h
        minus = build()
        leaf.data[idx] = original

        if not (_same_kinks(plus.kinks(), base_kinks) and _same_kinks(minus.kinks(), base_kinks)):
            excluded += 1
            continue
        a = float(analytic[name][idx])
        n = (plus.item() - minus.item()) / (2 * h)
        if max(abs(a), abs(n)) < min_magnitude:
            excluded += 1
            continue
        worst = max(worst, relative_error(a, n))
        checked += 1

    if excluded:
        logger.warning(f"grad_check excluded {excluded} coordinates at non-differentiable or negligible points")
    return GradCheckResult(worst, checked, excluded)


def adjoint_gap(linear: Callable[[Tensor], Tensor], x_shape: Iterable[int], seed: int = 0) -> float:
    """|<A x, y> - <x, A^T y>| for a linear op A, with A^T y taken from backward()"""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(tuple(x_shape)))
    ax = linear(x)
    y = rng.standard_normal(ax.shape)
    dot_const(ax, y).backward()
    return abs(float(np.sum(ax.data * y)) - float(np.sum(x.data * x.grad)))
