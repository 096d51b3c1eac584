"""Three-block 3D CNN with a global-average-pool and single-logit head."""
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from hive3d.errors import ShapeError
from hive3d.tensor import (
    Kernel3D,
    Tensor,
    _sigmoid,
    conv3d,
    conv_output_shape,
    dense,
    global_avg_pool3d,
    maxpool3d,
    relu,
    sigmoid,
)

NORMAL, DDOS = 0, 1
LABELS = ("Normal", "DDoS")


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 1
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    pool: int = 2
    depth: int = 8
    height: int = 64
    width: int = 64

    @property
    def input_shape(self):
        return (self.in_channels, self.depth, self.height, self.width)

    def shape_trace(self):
        """Per-block output shapes (C, D, H, W) for a single sample."""
        pad = self.kernel // 2
        ext = (self.depth, self.height, self.width)
        trace = [self.input_shape]
        for c in self.channels:
            ext = conv_output_shape(ext, (self.kernel,) * 3, (pad,) * 3, (1, 1, 1))
            ext = conv_output_shape(ext, (self.pool,) * 3, (0,) * 3, (self.pool,) * 3)
            trace.append((c,) + ext)
        return trace

    def parameter_count(self):
        total, c_in = 0, self.in_channels
        for c in self.channels:
            total += c * c_in * self.kernel**3 + c
            c_in = c
        return total + c_in + 1

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "kernel": self.kernel,
            "pool": self.pool,
            "depth": self.depth,
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class ModelParams:
    arch: Architecture
    blocks: list
    head_weight: Tensor
    head_bias: Tensor
    meta: dict = field(default_factory=dict)

    def tensors(self):
        """Named parameter tensors in canonical (checkpoint) order."""
        out = []
        for i, k in enumerate(self.blocks, 1):
            out.append((f"block{i}.weight", k.weight))
            out.append((f"block{i}.bias", k.bias))
        out.append(("head.weight", self.head_weight))
        out.append(("head.bias", self.head_bias))
        return out

    def requires_grad_(self, flag=True):
        for _, t in self.tensors():
            t.requires_grad = flag
            t.grad = None
        return self

    def frozen(self):
        """A view sharing the same arrays with gradient tracking switched off."""
        blocks = [Kernel3D(Tensor(k.weight.data), Tensor(k.bias.data)) for k in self.blocks]
        return ModelParams(self.arch, blocks, Tensor(self.head_weight.data), Tensor(self.head_bias.data), self.meta)

    def copy(self):
        blocks = [Kernel3D(Tensor(k.weight.data.copy()), Tensor(k.bias.data.copy())) for k in self.blocks]
        return ModelParams(
            self.arch,
            blocks,
            Tensor(self.head_weight.data.copy()),
            Tensor(self.head_bias.data.copy()),
            dict(self.meta),
        )

    def count(self):
        return sum(t.data.size for _, t in self.tensors())


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init(seed, arch=None):
    """Kaiming-uniform (fan-in, ReLU gain) weights and zero biases."""
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    blocks, c_in = [], arch.in_channels
    for c in arch.channels:
        fan_in = c_in * arch.kernel**3
        w = _kaiming_uniform(rng, (c, c_in) + (arch.kernel,) * 3, fan_in)
        blocks.append(Kernel3D(Tensor(w), Tensor(np.zeros(c, np.float32))))
        c_in = c
    head_w = _kaiming_uniform(rng, (c_in, 1), c_in)
    return ModelParams(arch, blocks, Tensor(head_w), Tensor(np.zeros(1, np.float32)))


def logits(params, x, tape=None):
    """Raw head output, shape (B, 1)."""
    arch = params.arch
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 5 or x.shape[1:] != arch.input_shape:
        raise ShapeError(f"model expects B x {arch.input_shape}, got {x.shape}")
    with tape if tape is not None else nullcontext():
        h = x
        for k in params.blocks:
            h = conv3d(h, k, padding=arch.kernel // 2)
            h = relu(h)
            h = maxpool3d(h, arch.pool)
        return dense(global_avg_pool3d(h), params.head_weight, params.head_bias)


def forward(params, x, tape=None):
    """Probabilities of the DDoS class, shape (B, 1)."""
    z = logits(params, x, tape)
    with tape if tape is not None else nullcontext():
        return sigmoid(z)


def probabilities(params, x, batch_size=32):
    """Tape-free batched inference returning a float64 vector of P(DDoS)."""
    x = np.asarray(x, dtype=np.float32)
    frozen = params.frozen()
    out = []
    for i in range(0, len(x), batch_size):
        z = logits(frozen, Tensor(x[i : i + batch_size])).data
        out.append(_sigmoid(z.astype(np.float64)).reshape(-1))
    return np.concatenate(out) if out else np.zeros(0)


def decide(p):
    """(label, confidence) for a DDoS probability; p = 0.5 goes to DDoS."""
    label = DDOS if p >= 0.5 else NORMAL
    return label, max(p, 1.0 - p)


def predict(params, x):
    """Labels and confidences for every sample in ``x``."""
    return [decide(float(p)) for p in probabilities(params, x)]
