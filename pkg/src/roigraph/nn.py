"""Dense layers with analytic backward passes and the RGW1 weight format.

Computation is float64; weights are stored on disk as float32, so a
save/load round trip is bit-exact for float32-representable parameters
(everything produced by :func:`seeded_init` or :func:`load_weights`).
"""

from dataclasses import dataclass
import struct

import numpy as np

ACTIVATIONS = ("none", "relu", "sigmoid")
_ACT_CODE = {"none": 0, "relu": 1, "sigmoid": 2}
_MAGIC = b"RGW1"


class WeightFormatError(ValueError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError("bias length must equal weight rows")

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


class MlpParams:
    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.in_dim != a.out_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def dims(self):
        return [self.in_dim] + [l.out_dim for l in self.layers]

    def copy(self):
        return MlpParams([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def __eq__(self, other):
        if not isinstance(other, MlpParams) or len(self.layers) != len(other.layers):
            return NotImplemented
        return all(
            a.activation == b.activation and np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )

    def __call__(self, x):
        return mlp_forward(self, x)[0]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


sigmoid = _sigmoid


def _act(z, name):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid(z)
    return z


def mlp_forward(params, x):
    """Row-wise forward. Returns ``(y, cache)``; ``cache`` holds each layer's
    input and output."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"expected input (B, {params.in_dim}), got {x.shape}")
    cache = []
    h = x
    for layer in params.layers:
        z = h @ layer.weight.T + layer.bias
        y = _act(z, layer.activation)
        cache.append((h, y))
        h = y
    return h, cache


def mlp_backward(params, cache, grad_out):
    """Returns ``(grad_x, [(grad_w, grad_b), ...])``. ReLU uses subgradient 0
    at 0."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache[-1][1].shape:
        raise ValueError(f"grad_out shape {g.shape} does not match output {cache[-1][1].shape}")
    grads = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        h, y = cache[k]
        if layer.activation == "relu":
            g = g * (y > 0.0)
        elif layer.activation == "sigmoid":
            g = g * y * (1.0 - y)
        grads[k] = (g.T @ h, g.sum(axis=0))
        g = g @ layer.weight
    return g, grads


def zero_grads(params):
    return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers]


def add_grads(acc, grads):
    for (aw, ab), (gw, gb) in zip(acc, grads):
        aw += gw
        ab += gb
    return acc


def sgd_step(params, grads, lr):
    for layer, (gw, gb) in zip(params.layers, grads):
        layer.weight -= lr * gw
        layer.bias -= lr * gb


def make_rng(seed):
    """The single PRNG used for init, dropout and synthetic data."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def seeded_init(dims, seed=0, activations=None, final_activation="none"):
    """``U(-1/sqrt(in), 1/sqrt(in))`` weights and biases, rounded to float32.

    ``activations`` lists one activation per layer; by default every hidden
    layer is relu and the last uses ``final_activation``.
    """
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("dims needs input and output sizes")
    n = len(dims) - 1
    if activations is None:
        activations = ["relu"] * (n - 1) + [final_activation]
    if len(activations) != n:
        raise ValueError("one activation per layer")
    rng = make_rng(seed)
    layers = []
    for k in range(n):
        fan_in, fan_out = dims[k], dims[k + 1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(np.float32).astype(np.float64)
        b = rng.uniform(-bound, bound, size=fan_out).astype(np.float32).astype(np.float64)
        layers.append(Layer(w, b, activations[k]))
    return MlpParams(layers)


def zeros_like_mlp(params):
    return MlpParams([Layer(np.zeros_like(l.weight), np.zeros_like(l.bias), l.activation) for l in params.layers])


def dropout(x, drop, rng, training):
    """Inverted dropout. Returns ``(y, mask)``; identity when not training."""
    if not training or drop <= 0.0:
        return x, None
    keep = 1.0 - drop
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


# ---------------------------------------------------------------------------
# RGW1 container: magic, u32 layer count, then per layer
# u32 in, u32 out, u32 activation code, f32 weights (out x in, row-major), f32 bias


def dumps_weights(params):
    parts = [_MAGIC, struct.pack("<I", len(params.layers))]
    for layer in params.layers:
        parts.append(struct.pack("<III", layer.in_dim, layer.out_dim, _ACT_CODE[layer.activation]))
        parts.append(layer.weight.astype("<f4").tobytes(order="C"))
        parts.append(layer.bias.astype("<f4").tobytes())
    return b"".join(parts)


def loads_weights(data):
    if len(data) < 8 or data[:4] != _MAGIC:
        raise WeightFormatError("not an RGW1 weight file")
    (nlayers,) = struct.unpack_from("<I", data, 4)
    off = 8
    codes = {v: k for k, v in _ACT_CODE.items()}
    layers = []
    for _ in range(nlayers):
        if off + 12 > len(data):
            raise WeightFormatError("truncated layer header")
        din, dout, code = struct.unpack_from("<III", data, off)
        off += 12
        if code not in codes:
            raise WeightFormatError(f"unknown activation code {code}")
        nbytes = 4 * (din * dout + dout)
        if off + nbytes > len(data):
            raise WeightFormatError("truncated layer data")
        w = np.frombuffer(data, "<f4", din * dout, off).reshape(dout, din)
        off += 4 * din * dout
        b = np.frombuffer(data, "<f4", dout, off)
        off += 4 * dout
        layers.append(Layer(w.astype(np.float64), b.astype(np.float64), codes[code]))
    if off != len(data):
        raise WeightFormatError("trailing bytes after last layer")
    try:
        return MlpParams(layers)
    except ValueError as e:
        raise WeightFormatError(str(e)) from e


def save_weights(params, path):
    with open(path, "wb") as fh:
        fh.write(dumps_weights(params))


def load_weights(path):
    with open(path, "rb") as fh:
        return loads_weights(fh.read())
