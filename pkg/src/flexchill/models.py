"""Model zoo: the desk-scale architectures and their checkpoint format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import ParamSet, Tensor
from .rng import stream

KINDS = ("mlp_femnist", "cnn2_cifar", "cnn1d_har", "logreg_2d", "mlp")

_DEFAULT_INPUT = {
    "mlp_femnist": (1, 28, 28),
    "cnn2_cifar": (3, 32, 32),
    "cnn1d_har": (1, 128),
    "logreg_2d": (2,),
}
_FIXED_CLASSES = {"mlp_femnist": 62, "cnn2_cifar": 10, "cnn1d_har": 6}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture selector.

    ``hidden`` is only read by the generic ``mlp`` kind (hidden layer widths,
    ReLU between layers). ``input_shape`` excludes the batch axis.
    """

    kind: str
    input_shape: tuple[int, ...] = ()
    num_classes: int = 0
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        shape = tuple(int(s) for s in self.input_shape) or _DEFAULT_INPUT.get(self.kind, ())
        classes = int(self.num_classes) or _FIXED_CLASSES.get(self.kind, 0)
        if not shape or any(s < 1 for s in shape):
            raise ValueError(f"{self.kind} needs a positive input_shape")
        if self.kind in _FIXED_CLASSES and classes != _FIXED_CLASSES[self.kind]:
            raise ValueError(f"{self.kind} has exactly {_FIXED_CLASSES[self.kind]} classes, got {classes}")
        if classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.kind == "mlp_femnist" and math.prod(shape) != 784:
            raise ValueError(f"mlp_femnist takes 784 input features, got shape {shape}")
        if self.kind == "cnn2_cifar" and shape != (3, 32, 32):
            raise ValueError(f"cnn2_cifar takes (3, 32, 32) input, got {shape}")
        if self.kind == "cnn1d_har" and (len(shape) != 2 or shape[0] != 1 or shape[1] < 8):
            raise ValueError(f"cnn1d_har takes (1, L) input with L >= 8, got {shape}")
        if self.kind == "logreg_2d" and len(shape) != 1:
            raise ValueError(f"logreg_2d takes flat (d,) input, got {shape}")
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "num_classes", classes)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class Layer:
    op: str
    params: tuple[str, ...] = ()
    opts: dict = field(default_factory=dict)
    block: int = 0


class _Builder:
    def __init__(self, rng):
        self.rng = rng
        self.params = ParamSet()
        self.layers: list[Layer] = []
        self.block = 1

    def _uniform(self, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def dense(self, name, n_in, n_out):
        self.params.add(f"{name}.weight", self._uniform((n_out, n_in), n_in), "dense")
        self.params.add(f"{name}.bias", Tensor(np.zeros(n_out), requires_grad=True), "bias")
        self.layers.append(Layer("dense", (f"{name}.weight", f"{name}.bias"), block=self.block))

    def conv(self, op, name, c_in, c_out, k, padding=0):
        ks = (k, k) if op == "conv2d" else (k,)
        fan_in = c_in * math.prod(ks)
        self.params.add(f"{name}.weight", self._uniform((c_out, c_in, *ks), fan_in), "conv")
        self.params.add(f"{name}.bias", Tensor(np.zeros(c_out), requires_grad=True), "bias")
        self.layers.append(
            Layer(op, (f"{name}.weight", f"{name}.bias"), {"padding": padding}, block=self.block)
        )

    def batchnorm(self, name, c):
        p = self.params
        p.add(f"{name}.weight", Tensor(np.ones(c), requires_grad=True), "batchnorm_affine")
        p.add(f"{name}.bias", Tensor(np.zeros(c), requires_grad=True), "batchnorm_affine")
        p.add(f"{name}.running_mean", Tensor(np.zeros(c)), "batchnorm_stat")
        p.add(f"{name}.running_var", Tensor(np.ones(c)), "batchnorm_stat")
        names = tuple(f"{name}.{s}" for s in ("weight", "bias", "running_mean", "running_var"))
        self.layers.append(Layer("batchnorm1d", names, block=self.block))

    def op(self, op, **opts):
        self.layers.append(Layer(op, (), opts, block=self.block))

    def end_block(self):
        self.block += 1


def _build_layers(spec: ModelSpec, b: _Builder) -> None:
    if spec.kind in ("mlp_femnist", "mlp"):
        widths = (512, 256, 128) if spec.kind == "mlp_femnist" else spec.hidden
        sizes = (math.prod(spec.input_shape), *widths, spec.num_classes)
        if len(spec.input_shape) > 1:
            b.op("flatten")
        for i in range(len(sizes) - 1):
            b.dense(f"fc{i + 1}", sizes[i], sizes[i + 1])
            if i < len(sizes) - 2:
                b.op("relu")
            b.end_block()
    elif spec.kind == "cnn2_cifar":
        b.conv("conv2d", "conv1", 3, 10, 5)
        b.op("relu")
        b.op("maxpool2d", kernel_size=2)
        b.end_block()
        b.conv("conv2d", "conv2", 10, 20, 5)
        b.op("relu")
        b.op("maxpool2d", kernel_size=2)
        b.op("flatten")
        b.end_block()
        b.dense("fc1", 500, 256)
        b.op("relu")
        b.end_block()
        b.dense("fc2", 256, 10)
    elif spec.kind == "cnn1d_har":
        plan = [(1, 16, 7, 3), (16, 32, 5, 2), (32, 64, 5, 2), (64, 128, 3, 1)]
        for i, (c_in, c_out, k, pad) in enumerate(plan, start=1):
            b.conv("conv1d", f"conv{i}", c_in, c_out, k, padding=pad)
            b.batchnorm(f"bn{i}", c_out)
            b.op("relu")
            if i < 4:
                b.op("maxpool1d", kernel_size=2)
            else:
                b.op("adaptive_avgpool1d", output_size=1)
                b.op("flatten")
            b.end_block()
        b.dense("fc", 128, 6)
    elif spec.kind == "logreg_2d":
        b.dense("linear", spec.input_shape[0], spec.num_classes)


class Model:
    """A layer plan plus its parameters.

    Layers are grouped into numbered blocks (1-based); ``forward`` can
    capture each block's output for representation analysis.
    """

    def __init__(self, spec: ModelSpec, params: ParamSet, layers: list[Layer]):
        self.spec = spec
        self.params = params
        self.layers = layers

    @property
    def num_blocks(self) -> int:
        return max(layer.block for layer in self.layers)

    def clone(self) -> "Model":
        return Model(self.spec, self.params.clone(), self.layers)

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != len(self.spec.input_shape) + 1 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ValueError(
                f"input shape {tuple(x.shape)} does not match (batch, *{self.spec.input_shape})"
            )

    def forward(self, x, train: bool = False, capture=()):
        """Compute logits. With ``capture`` (block ids), also return
        ``{block: activation}``."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(h.data)
        p = self.params
        feats = {}
        want = set(capture)
        for i, layer in enumerate(self.layers):
            op = layer.op
            if op == "dense":
                h = nn.dense(h, p[layer.params[0]], p[layer.params[1]])
            elif op == "relu":
                h = nn.relu(h)
            elif op == "conv2d":
                h = nn.conv2d(h, p[layer.params[0]], p[layer.params[1]], padding=layer.opts["padding"])
            elif op == "conv1d":
                h = nn.conv1d(h, p[layer.params[0]], p[layer.params[1]], padding=layer.opts["padding"])
            elif op == "maxpool2d":
                h = nn.maxpool2d(h, layer.opts["kernel_size"])
            elif op == "maxpool1d":
                h = nn.maxpool1d(h, layer.opts["kernel_size"])
            elif op == "batchnorm1d":
                g, bt, rm, rv = (p[n] for n in layer.params)
                h = nn.batchnorm1d(h, g, bt, rm, rv, train=train)
            elif op == "adaptive_avgpool1d":
                h = nn.adaptive_avgpool1d(h, layer.opts["output_size"])
            elif op == "flatten":
                h = nn.flatten(h)
            else:  # pragma: no cover - plans are built internally
                raise ValueError(f"unknown layer op {op!r}")
            last = i + 1 == len(self.layers) or self.layers[i + 1].block != layer.block
            if last and layer.block in want:
                feats[layer.block] = h.data.reshape(h.shape[0], -1)
        return (h, feats) if capture else h

    def logits(self, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
        """Eval-mode logits without any gradient bookkeeping."""
        x = np.asarray(x, dtype=np.float64)
        self.check_input(x)
        if len(x) <= batch_size:
            return self.forward(x).data
        return np.concatenate([self.forward(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)])

    def features(self, x: np.ndarray, blocks, batch_size: int = 2048) -> dict[int, np.ndarray]:
        blocks = tuple(blocks)
        bad = [b for b in blocks if not 1 <= b <= self.num_blocks]
        if bad:
            raise ValueError(f"invalid layer ids {bad}; model has blocks 1..{self.num_blocks}")
        x = np.asarray(x, dtype=np.float64)
        parts = [self.forward(x[i : i + batch_size], capture=blocks)[1] for i in range(0, len(x), batch_size)]
        return {b: np.concatenate([p[b] for p in parts]) for b in blocks}


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Construct ``spec`` with uniform(+-1/sqrt(fan_in)) weights and zero biases."""
    b = _Builder(stream(seed, "init"))
    _build_layers(spec, b)
    return Model(spec, b.params, b.layers)


def expected_param_count(spec: ModelSpec) -> int:
    """Closed-form trainable parameter count per kind."""
    if spec.kind in ("mlp_femnist", "mlp"):
        widths = (512, 256, 128) if spec.kind == "mlp_femnist" else spec.hidden
        sizes = (math.prod(spec.input_shape), *widths, spec.num_classes)
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if spec.kind == "cnn2_cifar":
        return (3 * 10 * 25 + 10) + (10 * 20 * 25 + 20) + (500 * 256 + 256) + (256 * 10 + 10)
    if spec.kind == "cnn1d_har":
        convs = [(1, 16, 7), (16, 32, 5), (32, 64, 5), (64, 128, 3)]
        return sum(ci * co * k + co + 2 * co for ci, co, k in convs) + 128 * 6 + 6
    d, c = spec.input_shape[0], spec.num_classes
    return d * c + c


def predict(model: Model, x) -> np.ndarray:
    """Argmax class per row; independent of any softmax temperature."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return model.logits(x).argmax(axis=1)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"FXCH"
VERSION = 1
_ROLE_CODES = {role: i for i, role in enumerate(nn.ROLES)}


def save_params(params: ParamSet, path) -> None:
    """Write the flat binary checkpoint (all integers and floats little-endian)."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for e in params:
        name = e.name.encode("utf-8")
        shape = e.tensor.shape
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<BB", _ROLE_CODES[e.role], len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(np.ascontiguousarray(e.tensor.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> ParamSet:
    """Read a checkpoint. Entries with role ``batchnorm_stat`` come back
    without ``requires_grad``; everything else is trainable."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    roles = nn.ROLES
    out = ParamSet()
    pos = 8
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            role_code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = math.prod(shape)
            if pos + 8 * count > len(buf):
                raise ValueError(f"{path}: truncated payload for {name!r}")
            data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * count
            role = roles[role_code]
            out.add(name, Tensor(data, requires_grad=role != "batchnorm_stat"), role)
    except (struct.error, IndexError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint") from exc
    return out


def load_model(path, spec: ModelSpec) -> Model:
    params = load_params(path)
    model = build_model(spec, seed=0)
    if not params.congruent(model.params):
        raise ValueError(f"{path}: checkpoint does not match model {spec.kind}")
    model.params = params
    return model
