"""Model zoo: the five heterogeneous CNNs, the gate, and the per-client MoE.

Every CNN is ``conv(5x5,16) relu pool conv(5x5,c2) relu pool flatten
fc1 relu fc2(500) relu fc3 softmax`` with valid convolutions and 2x2/2
pooling. The extractor is everything up to and including the ReLU after
``fc2``; the header is ``fc3 + softmax``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

REPR_DIM = 500
SPLIT_INDEX = 11  # layers[:11] is the extractor

# variant id -> (fc1 width, conv2 filters)
CNN_TABLE = {
    1: (2000, 32),
    2: (2000, 16),
    3: (1000, 32),
    4: (800, 32),
    5: (500, 32),
}


@dataclass(frozen=True)
class CnnVariant:
    id: int
    fc1_width: int
    conv2_filters: int

    @classmethod
    def get(cls, spec) -> "CnnVariant":
        """Accepts 1..5, ``"cnn1"``..``"cnn5"`` or a CnnVariant."""
        if isinstance(spec, CnnVariant):
            return spec
        if isinstance(spec, str):
            key = spec.lower()
            if not key.startswith("cnn") or not key[3:].isdigit():
                raise ValueError(f"unknown model name {spec!r}; expected cnn1..cnn5")
            spec = int(key[3:])
        if spec not in CNN_TABLE:
            raise ValueError(f"unknown CNN variant {spec!r}; expected 1..5")
        fc1, c2 = CNN_TABLE[spec]
        return cls(spec, fc1, c2)

    @property
    def name(self) -> str:
        return f"cnn{self.id}"


def variant_for_client(client_id: int) -> CnnVariant:
    return CnnVariant.get(client_id % 5 + 1)


def min_input_size() -> int:
    # two (conv5, pool2) stages with floor division need 16 pixels
    return 16


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def build_cnn(variant, input_dims=(3, 32, 32), num_classes: int = 10, seed=0,
              dtype=nn.DEFAULT_DTYPE) -> nn.Network:
    v = CnnVariant.get(variant)
    c, h, w = input_dims
    if min(h, w) < min_input_size():
        raise ValueError(f"input {h}x{w} too small for {v.name}; need at least "
                         f"{min_input_size()}x{min_input_size()}")
    rng = _rng(seed)
    conv1 = nn.Conv2d(c, 16, 5, rng=rng, dtype=dtype)
    conv2 = nn.Conv2d(16, v.conv2_filters, 5, rng=rng, dtype=dtype)
    h2 = ((h - 4) // 2 - 4) // 2
    w2 = ((w - 4) // 2 - 4) // 2
    flat = v.conv2_filters * h2 * w2
    layers = [
        conv1, nn.ReLU(), nn.MaxPool2d(2, 2),
        conv2, nn.ReLU(), nn.MaxPool2d(2, 2),
        nn.Flatten(),
        nn.Dense(flat, v.fc1_width, rng, dtype), nn.ReLU(),
        nn.Dense(v.fc1_width, REPR_DIM, rng, dtype), nn.ReLU(),
        nn.Dense(REPR_DIM, num_classes, rng, dtype), nn.Softmax(),
    ]
    return nn.Network(layers, tuple(input_dims), name=v.name)


@dataclass
class SplitModel:
    extractor: nn.Network
    header: nn.Network


def split_extractor_header(net: nn.Network) -> SplitModel:
    """Split a CNN after its fc2 activation. Both halves share ``net``'s layers."""
    kinds = [layer.kind for layer in net.layers]
    expected = ["conv2d", "relu", "maxpool2d", "conv2d", "relu", "maxpool2d", "flatten",
                "dense", "relu", "dense", "relu", "dense", "softmax"]
    if kinds != expected:
        raise ValueError(f"{net.name}: not a CNN from build_cnn ({kinds})")
    ex = nn.Network(net.layers[:SPLIT_INDEX], net.input_shape, name=f"{net.name}.extractor")
    hd = nn.Network(net.layers[SPLIT_INDEX:], ex.output_shape, name=f"{net.name}.header")
    return SplitModel(ex, hd)


def build_extractor(variant, input_dims, num_classes: int = 10, seed=0, dtype=nn.DEFAULT_DTYPE) -> nn.Network:
    return split_extractor_header(build_cnn(variant, input_dims, num_classes, seed, dtype)).extractor


def build_gating(input_dims, m: int = 64, seed=0, dtype=nn.DEFAULT_DTYPE) -> nn.Network:
    """Flatten, switch norm, dense(d->m), batch norm, sigmoid, dense(m->2), batch norm, softmax.

    The dense layers carry no bias and the switch norm no shift: each feeds a
    batch norm that cancels any per-feature constant, so those terms would
    receive an exactly-zero gradient forever.
    """
    if m < 2:
        raise ValueError(f"gate hidden width m must be >= 2, got {m}")
    rng = _rng(seed)
    d = int(np.prod(input_dims))
    layers = [
        nn.Flatten(),
        nn.SwitchNorm(d, center=False, dtype=dtype),
        nn.Dense(d, m, rng, dtype, bias=False),
        nn.BatchNorm(m, dtype=dtype),
        nn.Sigmoid(),
        nn.Dense(m, 2, rng, dtype, bias=False),
        nn.BatchNorm(2, dtype=dtype),
        nn.Softmax(),
    ]
    return nn.Network(layers, tuple(input_dims), name="gate")


@dataclass
class MoeModel:
    global_expert: nn.Network
    local_expert: nn.Network
    gate: nn.Network
    header: nn.Network

    def __post_init__(self):
        g, f = self.global_expert.output_shape, self.local_expert.output_shape
        if g != f:
            raise nn.ShapeError(f"expert output dims differ: global {g} vs local {f}")
        if self.header.input_shape != g:
            raise nn.ShapeError(f"header expects {self.header.input_shape}, experts emit {g}")
        if self.gate.output_shape != (2,):
            raise nn.ShapeError(f"gate must emit 2 weights, got {self.gate.output_shape}")

    def parts(self) -> dict[str, nn.Network]:
        return {"global": self.global_expert, "local": self.local_expert,
                "gate": self.gate, "header": self.header}

    def zero_grads(self) -> None:
        for net in self.parts().values():
            net.zero_grads()


@dataclass
class MoeOutput:
    y: np.ndarray
    alpha: np.ndarray  # (batch, 2): columns are (global, local)
    r_global: np.ndarray
    r_local: np.ndarray
    r_mixed: np.ndarray
    tape: "MoeTape | None"


@dataclass
class MoeTape:
    moe: MoeModel
    global_tape: nn.Tape
    local_tape: nn.Tape
    gate_tape: nn.Tape | None
    header_tape: nn.Tape
    alpha: np.ndarray
    r_global: np.ndarray
    r_local: np.ndarray


def moe_forward(moe: MoeModel, x: np.ndarray, mode: str = "eval", alpha=None,
                update_stats: bool = True) -> MoeOutput:
    """Mix both experts' representations per sample and classify the mixture.

    ``alpha`` forces the expert weights (a pair, or a ``(batch, 2)`` array);
    the gate is then not evaluated and receives no gradient.
    """
    r_g, t_g = nn.forward(moe.global_expert, x, mode, update_stats)
    r_f, t_f = nn.forward(moe.local_expert, x, mode, update_stats)
    if alpha is None:
        a, t_a = nn.forward(moe.gate, x, mode, update_stats)
    else:
        a = np.broadcast_to(np.asarray(alpha, dtype=r_g.dtype), (x.shape[0], 2))
        t_a = None
    mixed = a[:, 0:1] * r_g + a[:, 1:2] * r_f
    y, t_h = nn.forward(moe.header, mixed, mode, update_stats)
    tape = None
    if mode == "train":
        tape = MoeTape(moe, t_g, t_f, t_a, t_h, a, r_g, r_f)
    return MoeOutput(y, a, r_g, r_f, mixed, tape)


def moe_backward(tape: MoeTape, grad_y: np.ndarray) -> None:
    if tape is None:
        raise nn.TapeError("moe_backward needs a train-mode tape")
    g_mixed = nn.backward(tape.header_tape, grad_y)
    a = tape.alpha
    nn.backward(tape.global_tape, a[:, 0:1] * g_mixed)
    nn.backward(tape.local_tape, a[:, 1:2] * g_mixed)
    if tape.gate_tape is not None:
        g_alpha = np.stack([(g_mixed * tape.r_global).sum(axis=1),
                            (g_mixed * tape.r_local).sum(axis=1)], axis=1)
        nn.backward(tape.gate_tape, g_alpha)


def moe_params(moe: MoeModel) -> tuple[dict, dict]:
    params, grads = {}, {}
    for part, net in moe.parts().items():
        for k, v in net.parameters().items():
            params[f"{part}/{k}"] = v
        for k, v in net.gradients().items():
            grads[f"{part}/{k}"] = v
    return params, grads


def _promote_moe(moe: MoeModel, dtype) -> MoeModel:
    return MoeModel(*(nn.promote(net, dtype) for net in moe.parts().values()))


def moe_grad_check(moe: MoeModel, x: np.ndarray, labels, h: float = 1e-5,
                   max_coords: int | None = None, seed: int = 0,
                   extended: bool = True) -> nn.GradCheckReport:
    """Finite-difference check of the whole MoE under cross-entropy."""

    def evaluator(model, inputs):
        def run():
            out = moe_forward(model, inputs, "train", update_stats=False)
            t = out.tape
            sig = [s for tp in (t.global_tape, t.local_tape, t.gate_tape, t.header_tape)
                   for s in nn.kink_signature(tp)]
            return nn.cross_entropy(out.y, labels)[0], sig
        return run

    moe.zero_grads()
    out = moe_forward(moe, x, "train", update_stats=False)
    _, g = nn.cross_entropy(out.y, labels)
    moe_backward(out.tape, g)
    params, grads = moe_params(moe)
    precise = None
    if extended:
        ext = _promote_moe(moe, np.longdouble)
        precise = (evaluator(ext, x.astype(np.longdouble)), moe_params(ext)[0])
    return nn.check_gradients(evaluator(moe, x), params, grads, h, max_coords,
                              np.random.default_rng(seed), precise)


def param_count(net: nn.Network) -> int:
    """Trainable parameters; norm-layer running statistics are not counted."""
    return net.num_params()


def model_bytes(net: nn.Network, bytes_per_param: int = 4) -> int:
    return param_count(net) * bytes_per_param


def flops_forward(net: nn.Network, input_dims=None) -> int:
    """Per-sample forward FLOPs.

    Dense ``2*in*out``; conv ``2*k*k*cin*cout*hout*wout``; pooling, activations
    and norms one per output element; flatten free.
    """
    if input_dims is not None and tuple(input_dims) != net.input_shape:
        net = nn.Network(net.layers, tuple(input_dims), net.name)
    return sum(layer.flops(shape) for layer, shape in zip(net.layers, net.shapes))


TRAIN_FLOPS_MULTIPLIER = 3


def moe_flops_forward(moe: MoeModel) -> int:
    mix = 3 * moe.global_expert.output_shape[0]  # two scalings and one add per element
    return sum(flops_forward(n) for n in moe.parts().values()) + mix
