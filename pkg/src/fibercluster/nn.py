"""A small float64 convolutional encoder with hand-written backprop and an
Adamax optimizer.

Tensors are laid out NHWC. Convolutions use an im2col matmul; the col2im
scatter loops over kernel offsets in a fixed order, so gradients are
bit-stable for a given input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    filters: int
    stride: int
    pad: int


@dataclass(frozen=True)
class EncoderConfig:
    convs: tuple[ConvSpec, ...] = (
        ConvSpec(5, 32, 2, 2),
        ConvSpec(5, 64, 2, 2),
        ConvSpec(3, 128, 2, 0),
    )
    embedding_dim: int = 10
    input_size: int = 28
    in_channels: int = 3

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """(H, W, C) after each conv layer."""
        size, shapes = self.input_size, []
        for spec in self.convs:
            size = conv_output_size(size, spec.kernel, spec.stride, spec.pad)
            shapes.append((size, size, spec.filters))
        return shapes

    @property
    def flat_dim(self) -> int:
        h, w, c = self.feature_shapes()[-1]
        return h * w * c


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - kernel + 2 * pad) // stride + 1


# ---------------------------------------------------------------- layers

def _im2col(x, kernel, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    b, ho, wo, c = win.shape[:4]
    # (B, Ho, Wo, C, K, K) -> rows ordered like a (F, C, K, K) kernel
    return win.reshape(b * ho * wo, c * kernel * kernel), (b, ho, wo)


def conv_forward(x, weight, bias, stride, pad):
    """Returns output (B, Ho, Wo, F) and a cache for :func:`conv_backward`."""
    f, c, k, _ = weight.shape
    if x.shape[3] != c:
        raise ValueError(f"conv expects {c} input channels, got {x.shape[3]}")
    col, (b, ho, wo) = _im2col(x, k, stride, pad)
    out = col @ weight.reshape(f, -1).T + bias
    return out.reshape(b, ho, wo, f), (x.shape, col, weight, stride, pad)


def conv_backward(dout, cache, need_input_grad=True):
    x_shape, col, weight, stride, pad = cache
    f, c, k, _ = weight.shape
    b, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, f)
    dw = (d2.T @ col).reshape(weight.shape)
    db = d2.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    dcol = (d2 @ weight.reshape(f, -1)).reshape(b, ho, wo, c, k, k)
    dcol = np.ascontiguousarray(dcol.transpose(4, 5, 0, 1, 2, 3))
    _, h, w, _ = x_shape
    dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    for ki in range(k):
        for kj in range(k):
            dxp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :] += dcol[ki, kj]
    return dxp[:, pad:pad + h, pad:pad + w, :], dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def linear_forward(x, weight, bias):
    return x @ weight.T + bias


def linear_backward(dout, x, weight):
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def mse(pred, target):
    """Mean squared error and its gradient wrt ``pred``."""
    diff = np.asarray(pred) - np.asarray(target)
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------- params

@dataclass
class ParamStore:
    """Named float64 parameters plus Adamax moment state."""

    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        for name, value in self.params.items():
            self.m.setdefault(name, np.zeros_like(value))
            self.u.setdefault(name, np.zeros_like(value))

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.u.items()},
            self.t,
        )

    def add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.m[name] = np.zeros_like(self.params[name])
        self.u[name] = np.zeros_like(self.params[name])

    def reset_state(self) -> None:
        for name, value in self.params.items():
            self.m[name] = np.zeros_like(value)
            self.u[name] = np.zeros_like(value)
        self.t = 0


def init_encoder(config: EncoderConfig = EncoderConfig(), seed: int = 0) -> ParamStore:
    """Kaiming-uniform (fan-in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    c_in = config.in_channels
    for i, spec in enumerate(config.convs, start=1):
        fan_in = c_in * spec.kernel * spec.kernel
        bound = np.sqrt(6.0 / fan_in)
        params[f"conv{i}.weight"] = rng.uniform(-bound, bound, (spec.filters, c_in, spec.kernel, spec.kernel))
        params[f"conv{i}.bias"] = np.zeros(spec.filters)
        c_in = spec.filters
    bound = np.sqrt(6.0 / config.flat_dim)
    params["fc.weight"] = rng.uniform(-bound, bound, (config.embedding_dim, config.flat_dim))
    params["fc.bias"] = np.zeros(config.embedding_dim)
    return ParamStore(params)


# ---------------------------------------------------------------- encoder

def encoder_forward(x, store: ParamStore, config: EncoderConfig = EncoderConfig(), return_cache=False):
    """Embed a batch of FiberMaps ``(B, 28, 28, 3)`` -> ``(B, embedding_dim)``."""
    x = np.asarray(x, dtype=np.float64)
    expected = (config.input_size, config.input_size, config.in_channels)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"encoder expects input (B, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    caches = []
    h = x
    for i, spec in enumerate(config.convs, start=1):
        h, conv_cache = conv_forward(h, store[f"conv{i}.weight"], store[f"conv{i}.bias"], spec.stride, spec.pad)
        h, mask = relu_forward(h)
        caches.append((conv_cache, mask))
    feat_shape = h.shape
    flat = h.reshape(len(h), -1)
    z = linear_forward(flat, store["fc.weight"], store["fc.bias"])
    if return_cache:
        return z, (caches, feat_shape, flat)
    return z


def encoder_backward(dz, cache, store: ParamStore) -> dict[str, np.ndarray]:
    """Parameter gradients given the upstream gradient wrt the embeddings."""
    caches, feat_shape, flat = cache
    grads = {}
    dflat, grads["fc.weight"], grads["fc.bias"] = linear_backward(np.asarray(dz, dtype=np.float64), flat, store["fc.weight"])
    dh = dflat.reshape(feat_shape)
    for i in range(len(caches), 0, -1):
        conv_cache, mask = caches[i - 1]
        dh = relu_backward(dh, mask)
        dh, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = conv_backward(dh, conv_cache, need_input_grad=i > 1)
    return grads


# ---------------------------------------------------------------- optimizer

ADAMAX_BETA1 = 0.9
ADAMAX_BETA2 = 0.999
ADAMAX_EPS = 1e-8


def adamax_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
                beta1=ADAMAX_BETA1, beta2=ADAMAX_BETA2, eps=ADAMAX_EPS) -> ParamStore:
    """One in-place Adamax update; returns ``store`` for chaining.

    Parameters without an entry in ``grads`` are left untouched, but the
    shared step counter still advances.
    """
    store.t += 1
    step = lr / (1.0 - beta1 ** store.t)
    for name, g in grads.items():
        m = store.m[name]
        m *= beta1
        m += (1.0 - beta1) * g
        u = np.maximum(beta2 * store.u[name], np.abs(g))
        store.u[name] = u
        store.params[name] -= step * m / (u + eps)
    return store


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tol: float
    worst: tuple[str, tuple[int, ...]] | None
    kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def relu_signature(x, store: ParamStore, config: EncoderConfig = EncoderConfig()) -> bytes:
    """Packed ReLU on/off pattern of the encoder for input ``x``."""
    _, (caches, _, _) = encoder_forward(x, store, config, return_cache=True)
    return b"".join(np.packbits(mask).tobytes() for _, mask in caches)


def grad_check(loss_fn, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               eps: float = 1e-4, tol: float = 1e-4, samples: int = 100, seed: int = 0,
               signature=None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` must recompute the scalar loss from the current contents of
    ``params``; entries are perturbed in place and restored. Parameters are
    drawn uniformly over all scalar entries.

    If ``signature()`` is given it should return the activation pattern of the
    network. A perturbation that changes it straddles a ReLU kink, where the
    central difference does not estimate the derivative; such entries are
    counted in ``kinks`` and replaced by further draws.
    """
    rng = np.random.default_rng(seed)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    order = rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    base = signature() if signature is not None else None
    worst, worst_err, checked, kinks = None, 0.0, 0, 0
    for flat_idx in order:
        if checked >= samples:
            break
        which = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name = names[which]
        idx = np.unravel_index(int(flat_idx - offsets[which]), params[name].shape)
        arr = params[name]
        orig = arr[idx]
        arr[idx] = orig + eps
        plus = loss_fn()
        crossed = base is not None and signature() != base
        arr[idx] = orig - eps
        minus = loss_fn()
        crossed = crossed or (base is not None and signature() != base)
        arr[idx] = orig
        if crossed:
            kinks += 1
            continue
        numeric = (plus - minus) / (2 * eps)
        err = relative_error(float(grads[name][idx]), numeric)
        checked += 1
        if err >= worst_err:
            worst_err, worst = err, (name, tuple(int(i) for i in idx))
    return GradCheckReport(worst_err, checked, tol, worst, kinks)
