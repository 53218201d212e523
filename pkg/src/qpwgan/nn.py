"""Multi-layer perceptrons, Adam and weight clipping on top of :mod:`qpwgan.autodiff`.

Checkpoint format (version 1)
-----------------------------
One file: a single line of UTF-8 JSON terminated by ``\\n``, followed by the raw
parameters as little-endian float64. The header holds::

    {"format": "qpwgan-mlp", "version": 1, "dtype": "<f8",
     "layers": [{"in": 2, "out": 128, "activation": "relu",
                 "slope": 0.2, "dropout": 0.0}, ...],
     "n_values": <total float count>}

Parameters follow in layer order, each layer's weight matrix (``in x out``,
row-major) then its bias vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qpwgan.autodiff import Tensor, grad
from qpwgan.rng import SeededRng

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")
CHECKPOINT_FORMAT = "qpwgan-mlp"
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: str = "identity"
    slope: float = 0.2
    dropout: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpNetwork:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for p in self.parameters():
            n = p.data.size
            p.data = np.asarray(flat[pos : pos + n], dtype=float).reshape(p.shape).copy()
            pos += n
        if pos != len(flat):
            raise ValueError(f"expected {pos} values, got {len(flat)}")

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(
            [
                Layer(
                    Tensor(l.weight.data.copy(), True),
                    Tensor(l.bias.data.copy(), True),
                    l.activation,
                    l.slope,
                    l.dropout,
                )
                for l in self.layers
            ]
        )

    def __call__(self, x, mode: str = "eval", rng: SeededRng | None = None) -> Tensor:
        return forward(self, x, mode, rng)


def build_mlp(
    widths: list[int],
    activations: list[str],
    rng: SeededRng,
    dropouts: list[float] | None = None,
    slope: float = 0.2,
) -> MlpNetwork:
    """Fan-in scaled uniform initialization: ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``
    for weights and ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for biases."""
    if len(activations) != len(widths) - 1:
        raise ValueError("need one activation per layer")
    dropouts = dropouts or [0.0] * len(activations)
    layers = []
    for n_in, n_out, act, drop in zip(widths[:-1], widths[1:], activations, dropouts):
        bound = np.sqrt(6.0 / n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        b = rng.uniform(-1.0 / np.sqrt(n_in), 1.0 / np.sqrt(n_in), size=n_out)
        layers.append(Layer(Tensor(w, True), Tensor(b, True), act, slope, drop))
    return MlpNetwork(layers)


def toy_mlp(n_in: int, n_out: int, rng: SeededRng, hidden: int = 128) -> MlpNetwork:
    """Two ReLU hidden layers of width ``hidden``, linear output."""
    return build_mlp([n_in, hidden, hidden, n_out], ["relu", "relu", "identity"], rng)


def mnist_critic(rng: SeededRng, n_in: int = 784) -> MlpNetwork:
    return build_mlp(
        [n_in, 1024, 512, 256, 1],
        ["leaky_relu", "leaky_relu", "leaky_relu", "identity"],
        rng,
        dropouts=[0.3, 0.3, 0.3, 0.0],
    )


def mnist_generator(rng: SeededRng, n_noise: int = 128, n_out: int = 784) -> MlpNetwork:
    return build_mlp(
        [n_noise, 256, 512, 1024, n_out],
        ["leaky_relu", "leaky_relu", "tanh", "leaky_relu"],
        rng,
    )


def forward(net: MlpNetwork, x, mode: str = "eval", rng: SeededRng | None = None) -> Tensor:
    """Apply the network to a batch ``x`` of shape ``(batch, n_in)``.

    In ``"train"`` mode each layer with a nonzero dropout rate zeroes
    activations with that probability and rescales survivors by ``1/(1-rate)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.ndim != 2 or h.shape[1] != net.n_in:
        raise ValueError(f"input of shape {h.shape} does not match network input {net.n_in}")
    for layer in net.layers:
        h = h @ layer.weight + layer.bias
        if layer.activation == "relu":
            h = h.relu()
        elif layer.activation == "leaky_relu":
            h = h.leaky_relu(layer.slope)
        elif layer.activation == "tanh":
            h = h.tanh()
        if mode == "train" and layer.dropout > 0:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            keep = 1.0 - layer.dropout
            mask = (rng.random(h.shape) < keep) / keep
            h = h * Tensor(mask)
    return h


def grad_wrt_input(net: MlpNetwork, x, create_graph: bool = False):
    """Gradient of a scalar-output network with respect to each input row (eval mode)."""
    if net.n_out != 1:
        raise ValueError(f"input gradient needs a scalar-output network, got {net.n_out} outputs")
    xt = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float), True)
    if xt.ndim == 1:
        xt = Tensor(xt.data[None, :], True)
    out = forward(net, xt, "eval").sum()
    (g,) = grad(out, [xt], create_graph=create_graph)
    return g


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        shapes = [np.shape(p.data if isinstance(p, Tensor) else p) for p in params]
        return cls([np.zeros(s) for s in shapes], [np.zeros(s) for s in shapes], 0)


ADAM_EPS = 1e-8


def adam_step(
    params: list,
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta0: float = 0.5,
    beta1: float = 0.999,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam descent step, updating ``params`` and ``state`` in place.

    ``params`` may hold :class:`Tensor` leaves or numpy arrays. Ascent is
    descent on the negated gradient.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    state.t += 1
    c0 = 1.0 - beta0**state.t
    c1 = 1.0 - beta1**state.t
    for k, (p, g) in enumerate(zip(params, grads)):
        arr = p.data if isinstance(p, Tensor) else p
        g = np.asarray(g, dtype=float)
        if g.shape != arr.shape or state.m[k].shape != arr.shape:
            raise ValueError(f"shape mismatch at parameter {k}: {arr.shape} vs {g.shape}")
        state.m[k] = beta0 * state.m[k] + (1.0 - beta0) * g
        state.v[k] = beta1 * state.v[k] + (1.0 - beta1) * g * g
        mhat = state.m[k] / c0
        vhat = state.v[k] / c1
        arr -= lr * mhat / (np.sqrt(vhat) + eps)


def clip_weights(net: MlpNetwork, c: float) -> MlpNetwork:
    if c <= 0:
        raise ValueError(f"clip bound must be positive, got {c}")
    for p in net.parameters():
        np.clip(p.data, -c, c, out=p.data)
    return net


def save_checkpoint(net: MlpNetwork, path) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "layers": [
            {
                "in": l.n_in,
                "out": l.n_out,
                "activation": l.activation,
                "slope": l.slope,
                "dropout": l.dropout,
            }
            for l in net.layers
        ],
    }
    flat = net.get_flat().astype("<f8")
    header["n_values"] = int(flat.size)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(flat.tobytes())


def load_checkpoint(path) -> MlpNetwork:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    flat = np.frombuffer(raw[nl + 1 :], dtype="<f8").astype(float)
    if flat.size != header["n_values"]:
        raise ValueError(f"checkpoint truncated: {flat.size} of {header['n_values']} values")
    layers = [
        Layer(
            Tensor(np.zeros((spec["in"], spec["out"])), True),
            Tensor(np.zeros(spec["out"]), True),
            spec["activation"],
            spec["slope"],
            spec["dropout"],
        )
        for spec in header["layers"]
    ]
    net = MlpNetwork(layers)
    net.set_flat(flat)
    return net
