"""Array primitives with hand-written backward passes.

Every layer works on numpy arrays laid out as ``[batch, channel, time]``
(or ``[batch, features]`` after pooling). Forward functions return
``(output, cache)``; backward functions consume the cache and return input
gradients. The :class:`Module` wrappers hold :class:`Parameter` objects and
accumulate parameter gradients into ``Parameter.grad``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an input does not match the expected layout."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op = op
        self.axis = axis
        super().__init__(f"{op}: {axis} axis mismatch (expected {expected}, got {got})")


class UsageError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# Deterministic random streams
# ---------------------------------------------------------------------------

def _derive_key(root_seed: int, purpose_tag: str) -> int:
    digest = hashlib.blake2b(
        f"{int(root_seed) & 0xFFFFFFFFFFFFFFFF}:{purpose_tag}".encode(), digest_size=16
    ).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class SeededRng:
    """A named, counter-based random stream.

    Streams are Philox generators keyed by a hash of ``(root_seed, purpose_tag)``,
    so two streams with different tags never share draws and the same pair
    produces the same sequence on every platform.
    """

    root_seed: int
    purpose_tag: str

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=_derive_key(self.root_seed, self.purpose_tag)))

    def child(self, tag: str) -> "SeededRng":
        return SeededRng(self.root_seed, f"{self.purpose_tag}/{tag}")


def rng_for(root_seed: int, purpose_tag: str) -> np.random.Generator:
    return SeededRng(root_seed, purpose_tag).generator()


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Parameter:
    """A trainable tensor with its gradient accumulator and Adam moments.

    ``decay`` marks tensors that receive the L2 penalty (conv/dense weights).
    """

    name: str
    value: np.ndarray
    decay: bool = False
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)


def _check_rank(op: str, x: np.ndarray, rank: int) -> None:
    if x.ndim != rank:
        raise ShapeError(op, "rank", rank, x.ndim)


# ---------------------------------------------------------------------------
# Functional forward/backward pairs
# ---------------------------------------------------------------------------

def conv1d_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None):
    """Stride-1 'same' convolution (cross-correlation) of ``x[B,Cin,T]`` with ``w[Cout,Cin,K]``.

    Out-of-range samples read as zero. Implemented as K shifted matrix
    products so no im2col buffer is materialised.
    """
    _check_rank("conv1d", x, 3)
    _check_rank("conv1d", w, 3)
    B, cin, T = x.shape
    cout, wcin, K = w.shape
    if wcin != cin:
        raise ShapeError("conv1d", "channel", wcin, cin)
    if K % 2 == 0:
        raise ShapeError("conv1d", "kernel", "odd length", K)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv1d", "bias", (cout,), bias.shape)
    pad = (K - 1) // 2
    if pad:
        xp = np.zeros((B, cin, T + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + T] = x
    else:
        xp = x
    wk = np.ascontiguousarray(w.transpose(2, 0, 1))
    y = np.matmul(wk[0], xp[:, :, 0:T])
    for k in range(1, K):
        y += np.matmul(wk[k], xp[:, :, k:k + T])
    if bias is not None:
        y += bias[None, :, None]
    return y, (xp, wk, pad, T, bias is not None)


def conv1d_backward(cache, dy: np.ndarray):
    """Return ``(dx, dw, dbias)``; ``dbias`` is None when the forward had no bias."""
    if cache is None:
        raise UsageError("conv1d_backward called before conv1d_forward")
    xp, wk, pad, T, has_bias = cache
    K, cout, cin = wk.shape
    if dy.shape != (xp.shape[0], cout, T):
        raise ShapeError("conv1d_backward", "output", (xp.shape[0], cout, T), dy.shape)
    dw = np.empty((cout, cin, K), dtype=dy.dtype)
    for k in range(K):
        dw[:, :, k] = np.matmul(dy, xp[:, :, k:k + T].transpose(0, 2, 1)).sum(axis=0)
    if pad:
        dyp = np.zeros((dy.shape[0], cout, T + 2 * pad), dtype=dy.dtype)
        dyp[:, :, pad:pad + T] = dy
    else:
        dyp = dy
    # dx[t] = sum_k W_k^T dy[t + pad - k]
    dx = np.matmul(wk[K - 1].T, dyp[:, :, 0:T])
    for k in range(K - 2, -1, -1):
        s = K - 1 - k
        dx += np.matmul(wk[k].T, dyp[:, :, s:s + T])
    db = dy.sum(axis=(0, 2)) if has_bias else None
    return dx, dw, db


@dataclass
class RunningStats:
    """Batch-norm running moments; ``None`` until the first train-mode batch."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.mean is not None


def batchnorm_forward(x, gamma, beta, running: RunningStats, training: bool,
                      momentum: float = 0.99, eps: float = 1e-3):
    _check_rank("batchnorm", x, 3)
    C = x.shape[1]
    if gamma.shape != (C,):
        raise ShapeError("batchnorm", "channel", gamma.shape[0], C)
    if training:
        if x.shape[0] * x.shape[2] < 2:
            raise ShapeError("batchnorm", "batch*time", ">= 2", x.shape[0] * x.shape[2])
        mean = x.mean(axis=(0, 2))
        xhat = x - mean[None, :, None]
        var = np.einsum("bct,bct->c", xhat, xhat) / (x.shape[0] * x.shape[2])
        if running.initialized:
            running.mean = momentum * running.mean + (1.0 - momentum) * mean
            running.var = momentum * running.var + (1.0 - momentum) * var
        else:
            running.mean = mean.copy()
            running.var = var.copy()
    else:
        if not running.initialized:
            raise UsageError("batchnorm in eval mode before any train-mode update")
        mean = running.mean.astype(x.dtype, copy=False)
        var = running.var.astype(x.dtype, copy=False)
        xhat = x - mean[None, :, None]
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat *= inv_std[None, :, None]
    y = xhat * gamma[None, :, None]
    y += beta[None, :, None]
    return y, (xhat, inv_std, gamma, training)


def batchnorm_backward(cache, dy):
    if cache is None:
        raise UsageError("batchnorm_backward called before batchnorm_forward")
    xhat, inv_std, gamma, training = cache
    dgamma = np.einsum("bct,bct->c", dy, xhat)
    dbeta = dy.sum(axis=(0, 2))
    scale = (gamma * inv_std)[None, :, None]
    if not training:
        return dy * scale, dgamma, dbeta
    n = dy.shape[0] * dy.shape[2]
    dx = xhat * (-dgamma / n)[None, :, None]
    dx += dy
    dx -= (dbeta / n)[None, :, None]
    dx *= scale
    return dx, dgamma, dbeta


def relu(x):
    """Return ``(max(0, x), mask)``; the subgradient at 0 is 0."""
    return np.maximum(x, 0), x > 0


def relu_backward(cache, dy):
    if cache is None:
        raise UsageError("relu_backward called before relu")
    return dy * cache


def global_max_pool(x):
    _check_rank("global_max_pool", x, 3)
    if x.shape[2] == 0:
        raise ShapeError("global_max_pool", "time", ">= 1", 0)
    idx = np.argmax(x, axis=2)
    y = np.take_along_axis(x, idx[:, :, None], axis=2)[:, :, 0]
    return y, (idx, x.shape)


def global_max_pool_backward(cache, dy):
    if cache is None:
        raise UsageError("global_max_pool_backward called before forward")
    idx, shape = cache
    dx = np.zeros(shape, dtype=dy.dtype)
    np.put_along_axis(dx, idx[:, :, None], dy[:, :, None], axis=2)
    return dx


def dense_forward(x, w, b=None):
    _check_rank("dense", x, 2)
    if x.shape[1] != w.shape[0]:
        raise ShapeError("dense", "feature", w.shape[0], x.shape[1])
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def dense_backward(cache, dy):
    if cache is None:
        raise UsageError("dense_backward called before dense_forward")
    x, w, has_bias = cache
    return dy @ w.T, x.T @ dy, (dy.sum(axis=0) if has_bias else None)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``logits[B,K]`` against integer ``labels``.

    Returns ``(loss, dlogits)`` with ``dlogits = (softmax - onehot) / B``.
    """
    _check_rank("softmax_cross_entropy", logits, 2)
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError("softmax_cross_entropy", "batch", B, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(B), labels] - lse
    loss = -float(np.mean(logp))
    probs = np.exp(z - lse[:, None])
    probs[np.arange(B), labels] -= 1.0
    return loss, probs / B


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class Module:
    """Base layer: ``forward`` caches what ``backward`` needs."""

    name: str = ""

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        pass

    def forward(self, x, training: bool = False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, training: bool = False):
        return self.forward(x, training)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, *, bias=False,
                 rng=None, name="conv", dtype=DEFAULT_DTYPE):
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.weight = Parameter(
            f"{name}.weight",
            kaiming_normal(rng, (out_channels, in_channels, kernel_size), in_channels * kernel_size, dtype),
            decay=True,
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels, dtype)) if bias else None
        self._cache = None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, training=False):
        y, self._cache = conv1d_forward(x, self.weight.value, None if self.bias is None else self.bias.value)
        return y

    def backward(self, dy):
        dx, dw, db = conv1d_backward(self._cache, dy)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class BatchNorm1d(Module):
    def __init__(self, channels, *, momentum=0.99, eps=1e-3, name="bn", dtype=DEFAULT_DTYPE):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype))
        self.running = RunningStats()
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        if not self.running.initialized:
            return {}
        return {f"{self.name}.running_mean": self.running.mean,
                f"{self.name}.running_var": self.running.var}

    def load_buffers(self, values):
        key = f"{self.name}.running_mean"
        if key in values:
            self.running.mean = values[key].copy()
            self.running.var = values[f"{self.name}.running_var"].copy()

    def astype(self, dtype):
        super().astype(dtype)
        if self.running.initialized:
            self.running.mean = self.running.mean.astype(dtype)
            self.running.var = self.running.var.astype(dtype)
        return self

    def forward(self, x, training=False):
        y, self._cache = batchnorm_forward(
            x, self.gamma.value, self.beta.value, self.running, training, self.momentum, self.eps
        )
        return y

    def backward(self, dy):
        dx, dgamma, dbeta = batchnorm_backward(self._cache, dy)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class ReLU(Module):
    def __init__(self, name="relu"):
        self.name = name
        self._cache = None

    def forward(self, x, training=False):
        y, self._cache = relu(x)
        return y

    def backward(self, dy):
        return relu_backward(self._cache, dy)


class GlobalMaxPool(Module):
    def __init__(self, name="pool"):
        self.name = name
        self._cache = None

    def forward(self, x, training=False):
        y, self._cache = global_max_pool(x)
        return y

    def backward(self, dy):
        return global_max_pool_backward(self._cache, dy)


class Dense(Module):
    def __init__(self, in_features, out_features, *, rng=None, name="dense", init_scale=1.0,
                 dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        w = kaiming_normal(rng, (in_features, out_features), in_features, dtype) * init_scale
        self.weight = Parameter(f"{name}.weight", w.astype(dtype), decay=True)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, dtype))
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False):
        y, self._cache = dense_forward(x, self.weight.value, self.bias.value)
        return y

    def backward(self, dy):
        dx, dw, db = dense_backward(self._cache, dy)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Sequential(Module):
    def __init__(self, *layers, name="seq"):
        self.name = name
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def load_buffers(self, values):
        for layer in self.layers:
            layer.load_buffers(values)

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam with an L2 term folded into the gradient of decayed tensors."""

    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay_l2=0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay_l2 = weight_decay_l2

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay_l2)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay_l2=0.0) -> None:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for p in params:
        g = p.grad
        if weight_decay_l2 and p.decay:
            g = g + weight_decay_l2 * p.value
        p.step_count += 1
        t = p.step_count
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        mhat = p.m / (1.0 - beta1 ** t)
        vhat = p.v / (1.0 - beta2 ** t)
        p.value -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype, copy=False)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def relative_error(analytic, numeric) -> float:
    """``max |a - n| / max(1e-8, |a| + |n|)``; NaN entries in ``numeric`` are skipped."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    keep = ~np.isnan(numeric)
    if not keep.any():
        return 0.0
    a, n = analytic[keep], numeric[keep]
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def kink_pattern(module: "Module") -> bytes:
    """Fingerprint of the piecewise branch taken by the last forward pass.

    Collects ReLU masks, intra-link chain signs and max-pool argmax indices
    from ``module`` and everything it holds. Two forward passes with the same
    fingerprint lie on the same smooth piece of the network.
    """
    out = []
    seen = set()

    def walk(obj):
        if id(obj) in seen:
            return
        seen.add(id(obj))
        if isinstance(obj, (list, tuple)):
            for o in obj:
                walk(o)
            return
        if not isinstance(obj, Module):
            return
        cache = getattr(obj, "_cache", None)
        kind = type(obj).__name__
        if cache is not None and kind == "ReLU":
            out.append(np.packbits(cache).tobytes())
        elif cache is not None and kind == "IntraLinkReLU":
            out.append(np.packbits(cache[0] > 0).tobytes())
        elif cache is not None and kind == "GlobalMaxPool":
            out.append(np.ascontiguousarray(cache[0]).tobytes())
        for v in vars(obj).values():
            walk(v)

    walk(module)
    return b"".join(out)


def numeric_gradient(loss_fn, array: np.ndarray, h: float = 1e-5, name: str = "loss",
                     pattern_fn=None, coords=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to ``array`` (perturbed in place).

    With ``pattern_fn`` (called right after each loss evaluation) a
    coordinate whose two probes land on different smooth pieces is returned
    as NaN: the central difference straddles a kink there. ``coords``
    restricts the probe to some flat indices; the others come back as NaN.
    """
    flat = array.reshape(-1)
    grad = np.zeros(array.shape, dtype=np.float64) if coords is None else np.full(array.shape, np.nan)
    g = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        pp = pattern_fn() if pattern_fn else None
        flat[i] = orig - h
        fm = loss_fn()
        pm = pattern_fn() if pattern_fn else None
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite loss while differentiating {name}")
        g[i] = np.nan if pp != pm else (fp - fm) / (2.0 * h)
    return grad


def finite_diff_check(loss_fn, arrays: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
                      h: float = 1e-5, pattern_fn=None, report: dict | None = None,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic gradients and central differences.

    ``arrays`` maps names to the float64 arrays ``loss_fn`` reads (they are
    perturbed in place and restored); ``analytic`` holds the matching
    gradients. Returns ``max |a - n| / max(1e-8, |a| + |n|)``. Coordinates
    flagged as kink crossings by ``pattern_fn`` are excluded and counted in
    ``report["kinks"]``; ``report["checked"]`` counts the rest.

    With ``max_coords`` each array larger than that is probed at a random
    sample of ``max_coords`` coordinates drawn from ``rng``.
    """
    worst = 0.0
    for key, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 arrays ({key} is {arr.dtype})")
        coords = None
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        num = numeric_gradient(loss_fn, arr, h, key, pattern_fn, coords)
        worst = max(worst, relative_error(analytic[key], num))
        if report is not None:
            probed = arr.size if coords is None else len(coords)
            kinks = probed - int((~np.isnan(num)).sum())
            report["kinks"] = report.get("kinks", 0) + kinks
            report["checked"] = report.get("checked", 0) + probed - kinks
    return worst


def check_module_gradients(module: Module, x: np.ndarray, rng: np.random.Generator,
                           training: bool = True, h: float = 1e-5,
                           include_input: bool = True, report: dict | None = None) -> float:
    """Gradient-check a module against the scalar loss ``sum(r * module(x))``.

    ``r`` is a fixed random projection, so every output element contributes.
    """
    out = module.forward(x, training)
    r = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(r * module.forward(x, training)))

    module.zero_grad()
    module.forward(x, training)
    dx = module.backward(r)
    arrays, analytic = {}, {}
    if include_input:
        arrays["input"] = x
        analytic["input"] = dx
    for p in module.parameters():
        arrays[p.name] = p.value
        analytic[p.name] = p.grad.copy()
    return finite_diff_check(loss, arrays, analytic, h, lambda: kink_pattern(module), report)
