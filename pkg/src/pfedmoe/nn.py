"""Small numpy neural-network engine.

Layers are sequential; each layer's ``forward`` returns its output and a cache,
and ``backward`` consumes that cache, accumulates parameter gradients and
returns the gradient with respect to the layer input. A :class:`Network`
strings layers together and records a :class:`Tape` in train mode.

Arrays are ``(batch, ...)``; images are ``(batch, channels, height, width)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64
CE_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in {what}")
    return arr


def stable_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def conv_out_dim(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - kernel + 2 * padding) // stride + 1


class Layer:
    """Base layer. Parameters and buffers are keyed by short local names."""

    kind = "layer"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray, train: bool, update_stats: bool = True):
        raise NotImplementedError

    def backward(self, cache, gy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def flops(self, in_shape: tuple[int, ...]) -> int:
        """Per-sample forward FLOPs; element-wise layers count one per output."""
        return int(np.prod(self.out_shape(in_shape)))

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE, bias: bool = True) -> None:
        super().__init__()
        self.n_in, self.n_out, self.bias = n_in, n_out, bias
        a = np.sqrt(1.0 / n_in)
        if rng is None:
            w = np.zeros((n_out, n_in), dtype=dtype)
        else:
            w = rng.uniform(-a, a, size=(n_out, n_in)).astype(dtype)
        self._add_param("weight", w)
        if bias:
            self._add_param("bias", np.zeros(n_out, dtype=dtype))

    def out_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise ShapeError(f"Dense expects ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def forward(self, x, train, update_stats=True):
        y = x @ self.params["weight"].T
        if self.bias:
            y += self.params["bias"]
        return y, x

    def backward(self, x, gy):
        self.grads["weight"] += gy.T @ x
        if self.bias:
            self.grads["bias"] += gy.sum(axis=0)
        return gy @ self.params["weight"]

    def flops(self, in_shape):
        return 2 * self.n_in * self.n_out

    def __repr__(self):
        return f"Dense({self.n_in}, {self.n_out}{'' if self.bias else ', bias=False'})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 5, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_ch * kernel * kernel
        shape = (out_ch, in_ch, kernel, kernel)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            a = np.sqrt(1.0 / fan_in)
            w = rng.uniform(-a, a, size=shape).astype(dtype)
        self._add_param("weight", w)
        self._add_param("bias", np.zeros(out_ch, dtype=dtype))

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"Conv2d expects ({self.in_ch}, H, W), got {in_shape}")
        _, h, w = in_shape
        ho = conv_out_dim(h, self.kernel, self.stride, self.padding)
        wo = conv_out_dim(w, self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv2d output would be {ho}x{wo} for input {h}x{w}")
        return (self.out_ch, ho, wo)

    def forward(self, x, train, update_stats=True):
        k, s, p = self.kernel, self.stride, self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        b, c, h, w = x.shape
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        y = cols @ wmat.T + self.params["bias"]
        y = y.reshape(b, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, cache, gy):
        cols, xshape = cache
        k, s, p = self.kernel, self.stride, self.padding
        b, o, ho, wo = gy.shape
        g2 = gy.transpose(0, 2, 3, 1).reshape(-1, o)
        self.grads["weight"] += (g2.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] += g2.sum(axis=0)
        dcols = (g2 @ self.params["weight"].reshape(o, -1)).reshape(b, ho, wo, self.in_ch, k, k)
        dx = np.zeros(xshape, dtype=gy.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return dx

    def flops(self, in_shape):
        _, ho, wo = self.out_shape(in_shape)
        return 2 * self.kernel * self.kernel * self.in_ch * self.out_ch * ho * wo

    def __repr__(self):
        return f"Conv2d({self.in_ch}, {self.out_ch}, k={self.kernel}, s={self.stride}, p={self.padding})"


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, size: int = 2, stride: int = 2) -> None:
        super().__init__()
        self.size, self.stride = size, stride

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"MaxPool2d expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        ho = conv_out_dim(h, self.size, self.stride, 0)
        wo = conv_out_dim(w, self.size, self.stride, 0)
        if ho < 1 or wo < 1:
            raise ShapeError(f"MaxPool2d output would be {ho}x{wo} for input {h}x{w}")
        return (c, ho, wo)

    def forward(self, x, train, update_stats=True):
        k, s = self.size, self.stride
        b, c, h, w = x.shape
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        win = win.reshape(b, c, ho, wo, k * k)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, cache, gy):
        idx, xshape = cache
        k, s = self.size, self.stride
        b, c, ho, wo = gy.shape
        dwin = np.zeros((b, c, ho, wo, k * k), dtype=gy.dtype)
        np.put_along_axis(dwin, idx[..., None], gy[..., None], axis=-1)
        dwin = dwin.reshape(b, c, ho, wo, k, k)
        dx = np.zeros(xshape, dtype=gy.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dwin[..., i, j]
        return dx

    def __repr__(self):
        return f"MaxPool2d({self.size}, {self.stride})"


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train, update_stats=True):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, gy):
        return gy.reshape(shape)

    def flops(self, in_shape):
        return 0


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, update_stats=True):
        mask = x > 0
        return np.where(mask, x, 0.0).astype(x.dtype, copy=False), mask

    def backward(self, mask, gy):
        return np.where(mask, gy, 0.0).astype(gy.dtype, copy=False)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train, update_stats=True):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y

    def backward(self, y, gy):
        return gy * y * (1.0 - y)


class Softmax(Layer):
    """Softmax over the last (class) axis."""

    kind = "softmax"

    def forward(self, x, train, update_stats=True):
        y = stable_softmax(x, axis=-1)
        return y, y

    def backward(self, y, gy):
        return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


class BatchNorm(Layer):
    """Batch normalization over ``(batch, features)`` inputs."""

    kind = "batchnorm"

    def __init__(self, features: int, eps: float = 1e-5, momentum: float = 0.1, affine: bool = True,
                 dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.features, self.eps, self.momentum, self.affine = features, eps, momentum, affine
        if affine:
            self._add_param("weight", np.ones(features, dtype=dtype))
            self._add_param("bias", np.zeros(features, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(features, dtype=dtype)
        self.buffers["running_var"] = np.ones(features, dtype=dtype)

    def out_shape(self, in_shape):
        if in_shape != (self.features,):
            raise ShapeError(f"BatchNorm expects ({self.features},), got {in_shape}")
        return in_shape

    def forward(self, x, train, update_stats=True):
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if update_stats:
                n = x.shape[0]
                unbiased = var * n / (n - 1) if n > 1 else var
                m = self.momentum
                self.buffers["running_mean"] *= 1.0 - m
                self.buffers["running_mean"] += m * mean
                self.buffers["running_var"] *= 1.0 - m
                self.buffers["running_var"] += m * unbiased
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        y = xhat * self.params["weight"] + self.params["bias"] if self.affine else xhat
        return y, (xhat, inv, train)

    def backward(self, cache, gy):
        xhat, inv, train = cache
        if self.affine:
            self.grads["weight"] += (gy * xhat).sum(axis=0)
            self.grads["bias"] += gy.sum(axis=0)
            gxhat = gy * self.params["weight"]
        else:
            gxhat = gy
        if not train:
            return gxhat * inv
        n = gy.shape[0]
        return inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))

    def __repr__(self):
        return f"BatchNorm({self.features})"


class SwitchNorm(Layer):
    """Switchable normalization for ``(batch, features)`` inputs.

    Mixes batch statistics (per feature) with layer statistics (per sample)
    through two softmax-weighted pairs, one for means and one for variances.
    Instance statistics coincide with layer statistics for flat inputs, so
    they are folded into the layer branch. Eval mode swaps the batch branch
    for running averages.
    """

    kind = "switchnorm"

    def __init__(self, features: int, eps: float = 1e-5, momentum: float = 0.1, affine: bool = True,
                 center: bool = True, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.features, self.eps, self.momentum, self.affine = features, eps, momentum, affine
        self.center = affine and center
        if affine:
            self._add_param("weight", np.ones(features, dtype=dtype))
        if self.center:
            self._add_param("bias", np.zeros(features, dtype=dtype))
        self._add_param("mean_weight", np.zeros(2, dtype=dtype))
        self._add_param("var_weight", np.zeros(2, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(features, dtype=dtype)
        self.buffers["running_var"] = np.ones(features, dtype=dtype)

    def out_shape(self, in_shape):
        if in_shape != (self.features,):
            raise ShapeError(f"SwitchNorm expects ({self.features},), got {in_shape}")
        return in_shape

    def forward(self, x, train, update_stats=True):
        n = x.shape[0]
        if train:
            mb = x.mean(axis=0)
            vb = x.var(axis=0)
            if update_stats:
                unbiased = vb * n / (n - 1) if n > 1 else vb
                m = self.momentum
                self.buffers["running_mean"] *= 1.0 - m
                self.buffers["running_mean"] += m * mb
                self.buffers["running_var"] *= 1.0 - m
                self.buffers["running_var"] += m * unbiased
        else:
            mb, vb = self.buffers["running_mean"], self.buffers["running_var"]
        ml = x.mean(axis=1)
        vl = x.var(axis=1)
        wm = stable_softmax(self.params["mean_weight"])
        wv = stable_softmax(self.params["var_weight"])
        mu = wm[0] * mb[None, :] + wm[1] * ml[:, None]
        var = wv[0] * vb[None, :] + wv[1] * vl[:, None]
        inv = 1.0 / np.sqrt(var + self.eps)
        centered = x - mu
        xhat = centered * inv
        y = xhat * self.params["weight"] if self.affine else xhat
        if self.center:
            y = y + self.params["bias"]
        return y, (x, mb, vb, ml, vl, wm, wv, inv, centered, xhat, train)

    def backward(self, cache, gy):
        x, mb, vb, ml, vl, wm, wv, inv, centered, xhat, train = cache
        n, f = x.shape
        if self.center:
            self.grads["bias"] += gy.sum(axis=0)
        if self.affine:
            self.grads["weight"] += (gy * xhat).sum(axis=0)
            gxhat = gy * self.params["weight"]
        else:
            gxhat = gy
        gmu = -gxhat * inv
        gvar = -0.5 * gxhat * centered * inv ** 3
        gwm = np.array([(gmu * mb[None, :]).sum(), (gmu * ml[:, None]).sum()])
        gwv = np.array([(gvar * vb[None, :]).sum(), (gvar * vl[:, None]).sum()])
        self.grads["mean_weight"] += wm * (gwm - (wm * gwm).sum())
        self.grads["var_weight"] += wv * (gwv - (wv * gwv).sum())
        gx = gxhat * inv
        gx += (wm[1] * gmu.sum(axis=1) / f)[:, None]
        gx += (wv[1] * gvar.sum(axis=1))[:, None] * 2.0 * (x - ml[:, None]) / f
        if train:
            gx += wm[0] * gmu.sum(axis=0) / n
            gx += wv[0] * gvar.sum(axis=0) * 2.0 * (x - mb[None, :]) / n
        return gx

    def __repr__(self):
        return f"SwitchNorm({self.features})"


@dataclass
class Tape:
    net: "Network"
    version: int
    entries: list = field(default_factory=list)


class Network:
    """Ordered layer pipeline with a flat, named view of its parameters.

    Parameter names are ``"<layer index>.<local name>"``. ``input_shape`` is
    the per-sample shape and is checked against every forward call.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, ...], name: str = "net") -> None:
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.version = 0
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.out_shape(shape)
            self.shapes.append(shape)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def _named(self, attr: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in getattr(layer, attr).items():
                out[f"{i}.{k}"] = v
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        return self._named("params")

    def gradients(self) -> dict[str, np.ndarray]:
        return self._named("grads")

    def buffers(self) -> dict[str, np.ndarray]:
        return self._named("buffers")

    def state(self) -> dict[str, np.ndarray]:
        """Copies of parameters followed by buffers (running statistics)."""
        out = {k: v.copy() for k, v in self.parameters().items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        targets = {**self.parameters(), **self.buffers()}
        if set(targets) != set(state):
            missing = sorted(set(targets) ^ set(state))
            raise KeyError(f"{self.name}: state keys differ: {missing[:5]}")
        for k, dst in targets.items():
            src = np.asarray(state[k])
            if src.shape != dst.shape:
                raise ShapeError(f"{self.name}.{k}: shape {src.shape} != {dst.shape}")
            dst[...] = src
        self.version += 1

    def zero_grads(self) -> None:
        for g in self.gradients().values():
            g.fill(0.0)

    def num_params(self) -> int:
        return sum(int(p.size) for p in self.parameters().values())

    def forward(self, x: np.ndarray, mode: str = "eval", update_stats: bool = True):
        return forward(self, x, mode, update_stats)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x, "eval")[0]

    def __repr__(self) -> str:
        return f"Network({self.name}: " + " -> ".join(map(repr, self.layers)) + ")"


def forward(net: Network, x: np.ndarray, mode: str = "eval", update_stats: bool = True):
    """Run ``net`` on a batch. Returns ``(y, tape)``; ``tape`` is None in eval mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError(f"{net.name}: expected input (batch, {net.input_shape}), got {x.shape}")
    train = mode == "train"
    tape = Tape(net, net.version) if train else None
    for i, layer in enumerate(net.layers):
        x, cache = layer.forward(x, train, update_stats)
        check_finite(x, f"{net.name} layer {i} ({layer!r}) output")
        if train:
            tape.entries.append((layer, cache))
    return x, tape


def backward(tape: Tape, loss_grad: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients from ``tape``; returns the input gradient."""
    if tape is None:
        raise TapeError("backward needs a train-mode tape")
    if tape.version != tape.net.version:
        raise TapeError(f"{tape.net.name}: parameters changed since the forward pass")
    g = loss_grad
    for layer, cache in reversed(tape.entries):
        g = layer.backward(cache, g)
    return g


@dataclass
class Sgd:
    lr: float

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")

    def step(self, net: Network) -> Network:
        return sgd_step(self, net)


def sgd_step(opt: Sgd, net: Network) -> Network:
    grads = net.gradients()
    for name, p in net.parameters().items():
        check_finite(grads[name], f"{net.name}.{name} gradient")
        p -= opt.lr * grads[name]
    net.version += 1
    return net


def cross_entropy(pred: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of probability rows against integer labels.

    Probabilities are clamped to ``[1e-12, 1]`` before the log; the returned
    gradient is zero wherever the clamp is active.
    """
    single = pred.ndim == 1
    p = pred[None, :] if single else pred
    y = np.atleast_1d(np.asarray(labels))
    n, k = p.shape
    if y.shape != (n,):
        raise ShapeError(f"{n} predictions but labels of shape {y.shape}")
    if np.any(y < 0) or np.any(y >= k):
        raise IndexError(f"label out of range [0, {k})")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("pred rows must be probability vectors")
    rows = np.arange(n)
    picked = p[rows, y]
    clamped = np.clip(picked, CE_CLAMP, 1.0)
    loss = -np.log(clamped).mean()
    # keep extended precision for finite-difference oracles
    loss = float(loss) if p.dtype == np.float64 else loss
    grad = np.zeros_like(p)
    active = (picked >= CE_CLAMP) & (picked <= 1.0)
    grad[rows, y] = np.where(active, -1.0 / (clamped * n), 0.0)
    return loss, grad[0] if single else grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    refined: int
    worst: tuple | None = None  # (name, index, analytic, numeric)


REFINE_ABOVE = 1e-7


def kink_signature(tape: Tape | None) -> list[np.ndarray]:
    """ReLU masks and max-pool winners: the branch choices of a forward pass."""
    if tape is None:
        return []
    sig = []
    for layer, cache in tape.entries:
        if layer.kind == "relu":
            sig.append(cache)
        elif layer.kind == "maxpool2d":
            sig.append(cache[0])
    return sig


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def promote(net: Network, dtype) -> Network:
    """Deep copy of ``net`` with parameters, gradients and buffers cast to ``dtype``."""
    out = copy.deepcopy(net)
    for layer in out.layers:
        for store in (layer.params, layer.grads, layer.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)
    return out


def check_gradients(evaluate: Callable[[], tuple[float, list]], params: dict[str, np.ndarray],
                    grads: dict[str, np.ndarray], h: float = 1e-5, max_coords: int | None = None,
                    rng: np.random.Generator | None = None, precise=None) -> GradCheckReport:
    """Compare ``grads`` with central differences of ``evaluate``.

    ``evaluate`` reads ``params`` in place and returns ``(loss, branches)``
    where ``branches`` is a :func:`kink_signature`. Coordinates whose
    perturbation flips a ReLU or max-pool branch are skipped: the difference
    quotient straddles a kink there. ``precise`` is an optional
    ``(evaluate, params)`` pair mirroring the model in extended precision; any
    coordinate whose error exceeds ``REFINE_ABOVE`` is re-measured with it,
    which removes float64 cancellation noise on very small gradients.
    """
    if not h > 0:
        raise ValueError(f"finite-difference step must be > 0, got {h}")
    rng = rng or np.random.default_rng(0)

    def central(ev, flat, i, base_sig):
        old = flat[i]
        flat[i] = old + h
        lp, sp = ev()
        flat[i] = old - h
        lm, sm = ev()
        flat[i] = old
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteError(f"non-finite loss at coordinate {i}")
        kinked = not (_same_branches(sp, base_sig) and _same_branches(sm, base_sig))
        return (lp - lm) / (2 * h), kinked

    _, base = evaluate()
    if precise is not None:
        p_eval, p_params = precise
        _, p_base = p_eval()
    worst, checked, skipped, refined, where = 0.0, 0, 0, 0, None
    for name, p in params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = range(flat.size)
        for i in coords:
            num, kinked = central(evaluate, flat, i, base)
            if kinked:
                skipped += 1
                continue
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-12)
            if err > REFINE_ABOVE and precise is not None:
                num, kinked = central(p_eval, p_params[name].reshape(-1), i, p_base)
                refined += 1
                if kinked:
                    skipped += 1
                    continue
                err = float(abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-12))
            checked += 1
            if err >= worst:
                worst, where = float(err), (name, int(i), float(g[i]), float(num))
    return GradCheckReport(worst, checked, skipped, refined, where)


MAX_GRAD_CHECK_PARAMS = 100_000


def grad_check_report(net: Network, x: np.ndarray, label, h: float = 1e-5, max_coords: int | None = None,
                      extended: bool = True, seed: int = 0) -> GradCheckReport:
    if not h > 0:
        raise ValueError(f"finite-difference step must be > 0, got {h}")
    if max_coords is None and net.num_params() > MAX_GRAD_CHECK_PARAMS:
        raise ValueError(f"{net.num_params()} parameters exceed {MAX_GRAD_CHECK_PARAMS}; pass max_coords")

    def evaluator(model, inputs):
        def run():
            y, tape = forward(model, inputs, "train", update_stats=False)
            return cross_entropy(y, label)[0], kink_signature(tape)
        return run

    net.zero_grads()
    y, tape = forward(net, x, "train", update_stats=False)
    loss, g = cross_entropy(y, label)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    backward(tape, g)
    precise = None
    if extended:
        ext = promote(net, np.longdouble)
        precise = (evaluator(ext, x.astype(np.longdouble)), ext.parameters())
    return check_gradients(evaluator(net, x), net.parameters(), net.gradients(), h, max_coords,
                           np.random.default_rng(seed), precise)


def grad_check(net: Network, x: np.ndarray, label, h: float = 1e-5, max_coords: int | None = None) -> float:
    """Max relative finite-difference error of ``net`` under cross-entropy on its output.

    The network must end in a probability layer. Running statistics are
    frozen while checking.
    """
    return grad_check_report(net, x, label, h, max_coords).max_rel_error
