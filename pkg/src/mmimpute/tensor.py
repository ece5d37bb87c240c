"""Dense layers with hand-written backward passes, Adam, seeded RNG and the
binary checkpoint container.

Everything is float64. Layers accept a single vector ``(in,)`` or a batch
``(B, in)``; gradients are summed over the batch.
"""
import json
import struct

import numpy as np

from .kernels import adam_update, all_finite
from .errors import FormatError, PoisonedGradientError, ShapeError, StateError

LEAKY_SLOPE = 0.01


class SeededRng:
    """Thin wrapper over a PCG64 generator so seeds are explicit everywhere."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: int) -> "SeededRng":
        """Independent child stream derived from (seed, key)."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        child = SeededRng.__new__(SeededRng)
        child.seed = self.seed
        child.gen = np.random.Generator(np.random.PCG64(ss))
        return child


def gaussian_sample(rng: SeededRng, n) -> np.ndarray:
    """``n`` i.i.d. standard normals (``n`` may be a shape tuple)."""
    return rng.gen.standard_normal(n)


def glorot_uniform(gen: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=(fan_out, fan_in))


class DenseLayer:
    def __init__(self, weights, bias):
        self.weights = np.array(weights, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match weights {self.weights.shape}")
        self.cached_input = None
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def init(cls, n_in: int, n_out: int, gen: np.random.Generator) -> "DenseLayer":
        return cls(glorot_uniform(gen, n_out, n_in), np.zeros(n_out))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim or x.ndim not in (1, 2):
            raise ShapeError(f"expected input (..., {self.in_dim}), got {x.shape}")
        self.cached_input = x
        return x @ self.weights.T + self.bias

    def infer(self, x):
        """Forward pass without touching the backward cache (safe to share across threads)."""
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias

    def backward(self, upstream, input_grad=True):
        if self.cached_input is None:
            raise StateError("backward called before forward")
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape[-1] != self.out_dim:
            raise ShapeError(f"expected upstream (..., {self.out_dim}), got {g.shape}")
        x = self.cached_input
        if g.ndim == 1:
            self.grad_weights = np.outer(g, x)
            self.grad_bias = g.copy()
        else:
            self.grad_weights = g.T @ x
            self.grad_bias = g.sum(axis=0)
        return g @ self.weights if input_grad else None

    def params(self):
        return {"weight": self.weights, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weights, "bias": self.grad_bias}


def dense_forward(layer: DenseLayer, x):
    return layer.forward(x)


def dense_backward(layer: DenseLayer, upstream):
    """Returns ``(input_grad, weight_grad, bias_grad)``."""
    input_grad = layer.backward(upstream)
    return input_grad, layer.grad_weights, layer.grad_bias


class LeakyReLU:
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope
        self._positive = None

    def forward(self, x):
        self._positive = x > 0
        return np.where(self._positive, x, self.slope * x)

    def infer(self, x):
        return np.where(x > 0, x, self.slope * x)

    def backward(self, g):
        if self._positive is None:
            raise StateError("backward called before forward")
        return np.where(self._positive, g, self.slope * g)

    def params(self):
        return {}

    def grads(self):
        return {}


def sigmoid(a):
    # split by sign to avoid overflow in exp
    out = np.empty_like(a, dtype=np.float64)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def softplus(a):
    return np.logaddexp(0.0, a)


class Mlp:
    """Fixed stack of dense layers with leaky activations between them.

    The last layer is left linear; callers apply any output nonlinearity.
    """

    def __init__(self, sizes, gen: np.random.Generator):
        self.layers = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.layers.append(DenseLayer.init(a, b, gen))
            if k < len(sizes) - 2:
                self.layers.append(LeakyReLU())

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def infer(self, x):
        for layer in self.layers:
            x = layer.infer(x)
        return x

    def backward(self, g, input_grad=True):
        """Backpropagate ``g``; ``input_grad=False`` skips the first layer's input gradient."""
        for k in range(len(self.layers) - 1, 0, -1):
            g = self.layers[k].backward(g)
        return self.layers[0].backward(g, input_grad)

    def dense_layers(self):
        return [l for l in self.layers if isinstance(l, DenseLayer)]

    def params(self):
        out = {}
        for k, layer in enumerate(self.dense_layers()):
            for name, arr in layer.params().items():
                out[f"{k}.{name}"] = arr
        return out

    def grads(self):
        out = {}
        for k, layer in enumerate(self.dense_layers()):
            for name, arr in layer.grads().items():
                out[f"{k}.{name}"] = arr
        return out


class AdamState:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = {}
        self.second_moment = {}


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One Adam update applied in place to every array in ``params``."""
    for name, g in grads.items():
        if not all_finite(g):
            raise PoisonedGradientError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    step_size = state.lr / (1.0 - state.beta1 ** t)
    inv_sqrt_c2 = 1.0 / np.sqrt(1.0 - state.beta2 ** t)
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        if not adam_update(p, g, m, v, step_size, state.beta1, state.beta2, inv_sqrt_c2, state.epsilon):
            raise PoisonedGradientError(f"parameter {name!r} became non-finite at step {t}")


# --- checkpoint container ----------------------------------------------------

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1
_TAG_ARRAY = b"A"
_TAG_JSON = b"J"


def write_container(path, arrays: dict, meta: dict) -> None:
    """Write named float64 arrays plus JSON metadata sections.

    ``meta`` maps section name to a JSON-serializable object. Records are
    written in sorted name order so identical content gives identical bytes.
    """
    with open(path, "wb") as fh:
        fh.write(pack_container(arrays, meta))


def pack_container(arrays: dict, meta: dict) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(arrays) + len(meta))]
    for name in sorted(meta):
        raw = json.dumps(meta[name], sort_keys=True).encode()
        key = name.encode()
        parts += [_TAG_JSON, struct.pack("<H", len(key)), key, struct.pack("<I", len(raw)), raw]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        key = name.encode()
        parts += [_TAG_ARRAY, struct.pack("<H", len(key)), key, struct.pack("<B", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def read_container(path):
    with open(path, "rb") as fh:
        return unpack_container(fh.read())


def unpack_container(buf: bytes):
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    try:
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 10
        arrays, meta = {}, {}
        for _ in range(count):
            tag = buf[pos:pos + 1]
            (klen,) = struct.unpack_from("<H", buf, pos + 1)
            name = buf[pos + 3:pos + 3 + klen].decode()
            pos += 3 + klen
            if tag == _TAG_JSON:
                (n,) = struct.unpack_from("<I", buf, pos)
                meta[name] = json.loads(buf[pos + 4:pos + 4 + n].decode())
                pos += 4 + n
            elif tag == _TAG_ARRAY:
                (ndim,) = struct.unpack_from("<B", buf, pos)
                shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
                pos += 1 + 4 * ndim
                n = int(np.prod(shape, dtype=np.int64)) * 8
                if pos + n > len(buf):
                    raise FormatError(f"array {name!r} runs past end of file")
                arrays[name] = np.frombuffer(buf, dtype="<f8", count=n // 8, offset=pos).reshape(shape).astype(np.float64)
                pos += n
            else:
                raise FormatError(f"unknown record tag {tag!r}")
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise FormatError("trailing bytes after last record")
    return arrays, meta
