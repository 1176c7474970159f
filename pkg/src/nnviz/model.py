"""Model specs, forward pass with feature capture, training, checkpoints.

Two architecture families matter here: "camnet" ends conv-relu-gap-linear-
head so class-weight heatmaps can be read straight off the final linear
layer, while "fcnet" inserts hidden fully connected layers after the conv
trunk, which breaks that readout (gradient-based maps still work). The
spec validator enforces whichever family a spec declares.

Checkpoints are a fixed little-endian container: magic "NNVZ", version
byte, length-prefixed canonical JSON payload, parameter blocks, CRC32
trailer. load(save(m)) is bit-exact.
"""

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import SplitMix64, derive

# ------------------------------------------------------------------ layers

_LAYER_KINDS = ("conv", "relu", "pool", "gap", "flatten", "linear",
                "sigmoid", "softmax")


@dataclass(frozen=True)
class Layer:
    kind: str
    out: int = 0      # conv: out channels; linear: out features
    k: int = 0        # conv kernel size
    stride: int = 1
    pad: int = 0

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv":
            d.update(out=self.out, k=self.k, stride=self.stride, pad=self.pad)
        elif self.kind == "linear":
            d.update(out=self.out)
        return d

    @staticmethod
    def from_json(d: dict) -> "Layer":
        return Layer(kind=d["kind"], out=d.get("out", 0), k=d.get("k", 0),
                     stride=d.get("stride", 1), pad=d.get("pad", 0))


def conv(out: int, k: int, stride: int = 1, pad: int = 0) -> Layer:
    return Layer("conv", out=out, k=k, stride=stride, pad=pad)


def lin(out: int) -> Layer:
    return Layer("linear", out=out)


RELU = Layer("relu")
POOL = Layer("pool")
GAP = Layer("gap")
FLATTEN = Layer("flatten")
SIGMOID = Layer("sigmoid")
SOFTMAX = Layer("softmax")


class SpecError(ValueError):
    """Model spec fails shape chaining or family rules."""


@dataclass(frozen=True)
class ModelSpec:
    name: str
    arch: str                      # camnet | fcnet | custom
    in_shape: tuple[int, int, int]  # C, H, W
    layers: tuple[Layer, ...]
    class_names: tuple[str, ...]
    capture_layer: str             # post-ReLU output of the last conv
    input_mean: float = 0.5        # mean training pixel; occlusion/letterbox fill

    def layer_names(self) -> tuple[str, ...]:
        return tuple(f"{l.kind}{i}" for i, l in enumerate(self.layers))

    def head(self) -> str:
        return self.layers[-1].kind

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "arch": self.arch,
            "in_shape": list(self.in_shape),
            "layers": [l.to_json() for l in self.layers],
            "class_names": list(self.class_names),
            "capture_layer": self.capture_layer,
            "input_mean": self.input_mean,
        }

    @staticmethod
    def from_json(d: dict) -> "ModelSpec":
        return ModelSpec(
            name=d["name"], arch=d["arch"], in_shape=tuple(d["in_shape"]),
            layers=tuple(Layer.from_json(x) for x in d["layers"]),
            class_names=tuple(d["class_names"]),
            capture_layer=d["capture_layer"],
            input_mean=float(d.get("input_mean", 0.5)))


def chain_shapes(spec: ModelSpec) -> list[tuple]:
    """Statically chase shapes through the layer list; raises SpecError
    naming the first layer that breaks."""
    shapes = []
    cur: tuple = spec.in_shape
    for i, l in enumerate(spec.layers):
        where = f"layer {i} ({l.kind})"
        if l.kind in ("conv", "pool", "gap") and len(cur) != 3:
            raise SpecError(f"{where}: needs CxHxW input, has {cur}")
        if l.kind == "conv":
            c, h, w = cur
            ho = (h + 2 * l.pad - l.k) // l.stride + 1
            wo = (w + 2 * l.pad - l.k) // l.stride + 1
            if ho < 1 or wo < 1:
                raise SpecError(f"{where}: output {ho}x{wo} collapses")
            cur = (l.out, ho, wo)
        elif l.kind == "relu":
            pass
        elif l.kind == "pool":
            c, h, w = cur
            if h % 2 or w % 2:
                raise SpecError(f"{where}: H,W must be even, got {h}x{w}")
            cur = (c, h // 2, w // 2)
        elif l.kind == "gap":
            cur = (cur[0],)
        elif l.kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif l.kind == "linear":
            if len(cur) != 1:
                raise SpecError(f"{where}: needs a flat vector input, has {cur}")
            cur = (l.out,)
        elif l.kind in ("sigmoid", "softmax"):
            if len(cur) != 1:
                raise SpecError(f"{where}: head needs a vector input, has {cur}")
        else:
            raise SpecError(f"{where}: unknown layer kind {l.kind!r}")
        shapes.append(cur)
    return shapes


def validate_spec(spec: ModelSpec) -> None:
    if not spec.class_names:
        raise SpecError("spec needs at least one class name")
    if len(spec.layers) < 3:
        raise SpecError("spec needs at least conv-trunk, linear, head")
    shapes = chain_shapes(spec)
    names = spec.layer_names()
    kinds = [l.kind for l in spec.layers]
    if spec.layers[-1].kind not in ("sigmoid", "softmax"):
        raise SpecError("spec must end in a sigmoid or softmax head")
    head_lin = len(spec.layers) - 2
    if kinds[head_lin] != "linear" or spec.layers[head_lin].out != len(spec.class_names):
        raise SpecError("layer before the head must be linear(num_classes)")

    if spec.capture_layer not in names:
        raise SpecError(f"capture_layer {spec.capture_layer!r} not in spec")
    ci = names.index(spec.capture_layer)
    if kinds[ci] != "relu" or ci == 0 or kinds[ci - 1] != "conv":
        raise SpecError("capture_layer must name a relu directly after a conv")
    if any(k in ("gap", "flatten") for k in kinds[:ci]):
        raise SpecError("capture_layer must precede any gap/flatten")
    if "conv" in kinds[ci + 1:]:
        raise SpecError("capture_layer must be the last conv's output")

    tail = kinds[ci + 1:]
    if spec.arch == "camnet":
        if tail != ["gap", "linear", spec.layers[-1].kind]:
            raise SpecError(
                "camnet must run conv-relu straight into gap-linear-head, "
                f"found tail {tail}")
    elif spec.arch == "fcnet":
        if tail.count("linear") < 2:
            raise SpecError("fcnet needs at least one hidden linear before "
                            "the class head")
    elif spec.arch != "custom":
        raise SpecError(f"unknown arch {spec.arch!r}")


def camnet_spec(class_names, in_shape=(1, 32, 32), name="camnet") -> ModelSpec:
    layers = (conv(8, 3, 1, 1), RELU, POOL,
              conv(16, 3, 1, 1), RELU, POOL,
              conv(16, 3, 1, 1), RELU,
              GAP, lin(len(class_names)), SIGMOID)
    return ModelSpec(name=name, arch="camnet", in_shape=tuple(in_shape),
                     layers=layers, class_names=tuple(class_names),
                     capture_layer="relu7")


def fcnet_spec(class_names, in_shape=(1, 32, 32), name="fcnet") -> ModelSpec:
    layers = (conv(8, 3, 1, 1), RELU, POOL,
              conv(16, 3, 1, 1), RELU, POOL,
              conv(16, 3, 1, 1), RELU,
              FLATTEN, lin(64), RELU, lin(len(class_names)), SIGMOID)
    return ModelSpec(name=name, arch="fcnet", in_shape=tuple(in_shape),
                     layers=layers, class_names=tuple(class_names),
                     capture_layer="relu7")


# ------------------------------------------------------------------- model

@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}


def _param_defs(spec: ModelSpec):
    """Yield (name, shape, fan_in) for every parameter, in layer order."""
    shapes = chain_shapes(spec)
    cur = spec.in_shape
    for i, l in enumerate(spec.layers):
        lname = f"{l.kind}{i}"
        if l.kind == "conv":
            fan_in = cur[0] * l.k * l.k
            yield f"{lname}.kernel", (l.out, cur[0], l.k, l.k), fan_in
            yield f"{lname}.bias", (l.out,), fan_in
        elif l.kind == "linear":
            fan_in = cur[0]
            yield f"{lname}.weight", (l.out, cur[0]), fan_in
            yield f"{lname}.bias", (l.out,), fan_in
        cur = shapes[i]


def build(spec: ModelSpec, seed: int) -> Model:
    """Uniform fan-in init (+-1/sqrt(fan_in)), deterministic per (spec, seed)."""
    validate_spec(spec)
    params = {}
    for idx, (name, shape, fan_in) in enumerate(_param_defs(spec)):
        bound = 1.0 / np.sqrt(fan_in)
        rng = SplitMix64(derive(seed, 0xB11D, idx))
        params[name] = rng.uniform_array(shape, -bound, bound)
    return Model(spec=spec, params=params)


@dataclass
class ClassScores:
    logits: np.ndarray            # (C,) raw class scores
    confidences: np.ndarray       # (C,) sigmoid, or softmax row
    class_names: tuple[str, ...]
    head: str                     # sigmoid | softmax
    logits_node: int = -1         # tape node of the (N,C) logits


@dataclass
class FeatureCapture:
    maps: np.ndarray              # (K, Hf, Wf) post-ReLU feature maps
    layer: str
    z: int                        # Hf * Wf
    grads: np.ndarray | None = None
    node: int = -1                # tape node of the (N,K,Hf,Wf) activation


@dataclass
class ForwardResult:
    scores: ClassScores
    capture: FeatureCapture
    tape: T.Tape
    image_node: int


def _forward_graph(model: Model, batch: np.ndarray, tape: T.Tape,
                   trace: dict | None = None):
    """Run the layer pipeline on a tape; returns (logits, confs, capture,
    image, param vars)."""
    x = tape.leaf(batch, name="input")
    image_var = x
    pvars = {name: tape.leaf(p, name=name) for name, p in model.params.items()}
    capture_var = None
    logits_var = None
    names = model.spec.layer_names()
    for i, l in enumerate(model.spec.layers):
        lname = names[i]
        if l.kind == "conv":
            x = T.conv2d(x, pvars[f"{lname}.kernel"], pvars[f"{lname}.bias"],
                         l.stride, l.pad)
        elif l.kind == "relu":
            x = T.relu(x)
        elif l.kind == "pool":
            x = T.maxpool2(x)
        elif l.kind == "gap":
            x = T.gap(x)
        elif l.kind == "flatten":
            x = T.flatten(x)
        elif l.kind == "linear":
            x = T.linear(x, pvars[f"{lname}.weight"], pvars[f"{lname}.bias"])
        elif l.kind == "sigmoid":
            logits_var = x
            x = T.sigmoid(x)
        elif l.kind == "softmax":
            logits_var = x
            x = T.softmax(x)
        if lname == model.spec.capture_layer:
            capture_var = x
        if trace is not None and l.kind in ("conv", "relu"):
            trace[lname] = x.value
    return logits_var, x, capture_var, image_var, pvars


def forward(model: Model, image) -> ForwardResult:
    """Single-image forward pass; keeps the tape alive for backpassing."""
    img = T.tensor(image)
    if img.shape != model.spec.in_shape:
        raise T.ShapeError(
            f"image shape {img.shape} != spec input {model.spec.in_shape}")
    tape = T.Tape()
    logits, confs, cap, image_var, _ = _forward_graph(model, img[None], tape)
    scores = ClassScores(
        logits=logits.value[0].copy(), confidences=confs.value[0].copy(),
        class_names=model.spec.class_names, head=model.spec.head(),
        logits_node=logits.id)
    capture = FeatureCapture(
        maps=cap.value[0].copy(), layer=model.spec.capture_layer,
        z=cap.value.shape[2] * cap.value.shape[3], node=cap.id)
    return ForwardResult(scores=scores, capture=capture, tape=tape,
                         image_node=image_var.id)


def forward_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    """Confidences for a batch, no capture plumbing."""
    tape = T.Tape()
    _, confs, _, _, _ = _forward_graph(model, T.tensor(batch), tape)
    return confs.value


def trace_layers(model: Model, image) -> dict[str, np.ndarray]:
    """Activations of every conv/relu layer for one image (N squeezed)."""
    trace: dict[str, np.ndarray] = {}
    tape = T.Tape()
    _forward_graph(model, T.tensor(image)[None], tape, trace=trace)
    return {k: v[0] for k, v in trace.items()}


def top_k(scores: ClassScores, k: int) -> list[tuple[str, float]]:
    """Descending by confidence; ties break toward the lower class index."""
    c = len(scores.class_names)
    if not 1 <= k <= c:
        raise ValueError(f"k must be in [1, {c}], got {k}")
    order = sorted(range(c), key=lambda i: (-float(scores.confidences[i]), i))
    return [(scores.class_names[i], float(scores.confidences[i]))
            for i in order[:k]]


# ---------------------------------------------------------------- training

@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    class_names: tuple[str, ...] = ()

    def add(self, epoch: int, loss: float, per_class_acc: np.ndarray) -> None:
        self.epochs.append({"epoch": epoch, "loss": float(loss),
                            "per_class_acc": [float(a) for a in per_class_acc]})

    def final_loss(self) -> float:
        return self.epochs[-1]["loss"]

    def to_csv(self) -> str:
        cols = ["epoch", "loss"] + [f"acc_{c}" for c in self.class_names]
        out = [",".join(cols)]
        for row in self.epochs:
            out.append(",".join(
                [str(row["epoch"]), f"{row['loss']:.6f}"]
                + [f"{a:.4f}" for a in row["per_class_acc"]]))
        return "\n".join(out) + "\n"


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray,
             batch: int = 256) -> tuple[float, np.ndarray]:
    """Mean BCE loss and per-class accuracy at the 0.5 threshold."""
    losses, hits = [], np.zeros(labels.shape[1], dtype=np.int64)
    for lo in range(0, len(images), batch):
        conf = forward_batch(model, images[lo:lo + batch])
        t = labels[lo:lo + batch]
        pc = np.clip(conf, 1e-7, 1 - 1e-7)
        losses.append(float(-(t * np.log(pc) + (1 - t) * np.log1p(-pc)).mean())
                      * len(t))
        hits += ((conf > 0.5) == (t > 0.5)).sum(axis=0)
    return sum(losses) / len(images), hits / len(images)


def train(model: Model, dataset, epochs: int, lr: float, batch: int = 32,
          seed: int = 0) -> TrainReport:
    """Plain SGD on sigmoid+BCE; deterministic for a fixed seed."""
    images, labels = dataset.images, dataset.labels
    if len(images) == 0:
        raise ValueError("train: dataset is empty")
    if lr < 0:
        raise ValueError("train: lr must be >= 0")
    labels = T.tensor(labels)
    report = TrainReport(class_names=model.spec.class_names)
    for epoch in range(epochs):
        order = SplitMix64(derive(seed, 0x5F10, epoch)).permutation(len(images))
        for lo in range(0, len(images), batch):
            idx = order[lo:lo + batch]
            tape = T.Tape()
            _, confs, _, _, pvars = _forward_graph(model, images[idx], tape)
            targets = tape.leaf(labels[idx], name="targets")
            loss = T.bce_loss(confs, targets)
            grads = T.backward(tape, loss, np.float32(1.0),
                               wanted=[v for v in pvars.values()])
            named = {name: grads[v.id] for name, v in pvars.items()}
            T.sgd_step(model.params, named, lr)
        ep_loss, ep_acc = evaluate(model, images, labels)
        report.add(epoch, ep_loss, ep_acc)
    return report


# -------------------------------------------------------------- checkpoint

_MAGIC = b"NNVZ"
_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def canonical_json(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def write_container(path, payload: dict, params: dict[str, np.ndarray]) -> None:
    """NNVZ v1 container: header, canonical JSON, parameter blocks, CRC32."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<B", _VERSION))
    blob = canonical_json(payload)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", crc))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def read_container(path) -> tuple[dict, dict[str, np.ndarray], int]:
    """Returns (payload, params, crc32). Raises a distinct CheckpointError
    subclass for bad magic, version, truncation and checksum damage."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise BadMagicError("bad magic: not an NNVZ checkpoint")
    if len(data) < 9:
        raise TruncatedError("checkpoint shorter than its fixed header")
    body, trailer = data[:-4], data[-4:]
    stored_crc = struct.unpack("<I", trailer)[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError("checksum failure: stored CRC32 does not match")
    r = _Reader(body)
    r.take(4)
    version = r.u8()
    if version != _VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    blob = r.take(r.u32())
    try:
        payload = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable spec JSON: {e}") from e
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode("utf-8")
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * count)
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes in body")
    return payload, params, stored_crc


def save(model: Model, path) -> None:
    write_container(path, {"kind": "model", "spec": model.spec.to_json()},
                    model.params)


def load(path) -> Model:
    payload, params, _ = read_container(path)
    if payload.get("kind") != "model":
        raise CheckpointError(
            f"checkpoint holds a {payload.get('kind')!r}, not a model")
    spec = ModelSpec.from_json(payload["spec"])
    validate_spec(spec)
    expected = {name: shape for name, shape, _ in _param_defs(spec)}
    if set(expected) != set(params):
        raise CheckpointError("parameter names do not match the spec")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(
                f"parameter {name} has shape {params[name].shape}, "
                f"spec wants {shape}")
    return Model(spec=spec, params=params)


def checkpoint_crc(path) -> int:
    """CRC32 from the container trailer (verified against the body)."""
    return read_container(path)[2]
