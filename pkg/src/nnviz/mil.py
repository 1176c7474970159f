"""Attention-based multiple instance learning on bags of image patches.

A small conv trunk embeds every patch, a tanh-gated two-layer scorer
produces one attention logit per instance, softmax turns those into
weights that pool the embeddings into a bag vector, and a linear+sigmoid
head scores the bag. Training sees bag labels only; the per-instance
ground truth stays in a test-only field. The attention weights double as
the explanation: patches are brightened in proportion to weight/max.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .datasets import Bag
from .model import (TrainReport, read_container, write_container)
from .rng import SplitMix64, derive


@dataclass(frozen=True)
class AmilSpec:
    patch: int = 16
    in_channels: int = 1
    conv_channels: tuple[int, int] = (8, 16)
    embed_dim: int = 32
    attn_hidden: int = 16

    def to_json(self) -> dict:
        return {"patch": self.patch, "in_channels": self.in_channels,
                "conv_channels": list(self.conv_channels),
                "embed_dim": self.embed_dim, "attn_hidden": self.attn_hidden}

    @staticmethod
    def from_json(d: dict) -> "AmilSpec":
        return AmilSpec(patch=d["patch"], in_channels=d["in_channels"],
                        conv_channels=tuple(d["conv_channels"]),
                        embed_dim=d["embed_dim"], attn_hidden=d["attn_hidden"])

    def flat_dim(self) -> int:
        if self.patch % 4:
            raise ValueError("patch side must be divisible by 4 (two pools)")
        return self.conv_channels[1] * (self.patch // 4) ** 2


@dataclass
class AmilModel:
    spec: AmilSpec
    params: dict[str, np.ndarray]


def _amil_param_defs(spec: AmilSpec):
    c1, c2 = spec.conv_channels
    yield "conv1.kernel", (c1, spec.in_channels, 3, 3), spec.in_channels * 9
    yield "conv1.bias", (c1,), spec.in_channels * 9
    yield "conv2.kernel", (c2, c1, 3, 3), c1 * 9
    yield "conv2.bias", (c2,), c1 * 9
    yield "embed.weight", (spec.embed_dim, spec.flat_dim()), spec.flat_dim()
    yield "embed.bias", (spec.embed_dim,), spec.flat_dim()
    yield "attn1.weight", (spec.attn_hidden, spec.embed_dim), spec.embed_dim
    yield "attn1.bias", (spec.attn_hidden,), spec.embed_dim
    yield "attn2.weight", (1, spec.attn_hidden), spec.attn_hidden
    yield "attn2.bias", (1,), spec.attn_hidden
    yield "clf.weight", (1, spec.embed_dim), spec.embed_dim
    yield "clf.bias", (1,), spec.embed_dim


def build_amil(spec: AmilSpec, seed: int) -> AmilModel:
    params = {}
    for idx, (name, shape, fan_in) in enumerate(_amil_param_defs(spec)):
        bound = 1.0 / np.sqrt(fan_in)
        rng = SplitMix64(derive(seed, 0xA111, idx))
        params[name] = rng.uniform_array(shape, -bound, bound)
    return AmilModel(spec=spec, params=params)


@dataclass
class AttentionMap:
    weights: np.ndarray          # (M,) softmax over instances, sums to 1
    grid: tuple[int, int] | None  # (rows, cols) when patches tile an image
    bag_score: float

    def to_json(self) -> dict:
        return {"weights": [float(w) for w in self.weights],
                "grid": list(self.grid) if self.grid else None,
                "bag_score": self.bag_score}


@dataclass
class AmilForward:
    score: float
    attention: AttentionMap
    tape: T.Tape
    score_var: T.Var
    pvars: dict[str, T.Var]


def shred(image: np.ndarray, patch: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Row-major non-overlapping tiling of a CxHxW image."""
    img = T.tensor(image)
    c, h, w = img.shape
    if h % patch or w % patch:
        raise T.ShapeError(
            f"image {h}x{w} not divisible by patch {patch}")
    rows, cols = h // patch, w // patch
    patches = (img.reshape(c, rows, patch, cols, patch)
               .transpose(1, 3, 0, 2, 4)
               .reshape(rows * cols, c, patch, patch))
    return np.ascontiguousarray(patches), (rows, cols)


def reassemble(patches: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Exact inverse of shred."""
    rows, cols = grid
    m, c, p, _ = patches.shape
    if m != rows * cols:
        raise T.ShapeError(f"{m} patches cannot fill a {rows}x{cols} grid")
    return np.ascontiguousarray(
        patches.reshape(rows, cols, c, p, p)
        .transpose(2, 0, 3, 1, 4)
        .reshape(c, rows * p, cols * p))


def amil_forward(model: AmilModel, bag,
                 grid: tuple[int, int] | None = None) -> AmilForward:
    """Embed instances, attention-pool, score the bag. Accepts a Bag or a
    raw (M,C,P,P) patch array; returns the live tape so training can
    backpass through the whole pipeline."""
    patches = T.tensor(bag.patches if isinstance(bag, Bag) else bag)
    if patches.ndim != 4 or patches.shape[0] < 1:
        raise ValueError("amil_forward wants a nonempty (M,C,P,P) batch")
    tape = T.Tape()
    pv = {name: tape.leaf(p, name=name) for name, p in model.params.items()}
    x = tape.leaf(patches, name="patches")
    x = T.relu(T.conv2d(x, pv["conv1.kernel"], pv["conv1.bias"], 1, 1))
    x = T.maxpool2(x)
    x = T.relu(T.conv2d(x, pv["conv2.kernel"], pv["conv2.bias"], 1, 1))
    x = T.maxpool2(x)
    h = T.linear(T.flatten(x), pv["embed.weight"], pv["embed.bias"])  # (M,D)
    e = T.linear(T.tanh(T.linear(h, pv["attn1.weight"], pv["attn1.bias"])),
                 pv["attn2.weight"], pv["attn2.bias"])                 # (M,1)
    a = T.softmax(T.reshape(e, (1, patches.shape[0])))                 # (1,M)
    z = T.matmul(a, h)                                                 # (1,D)
    s = T.sigmoid(T.linear(z, pv["clf.weight"], pv["clf.bias"]))       # (1,1)
    attn = AttentionMap(weights=a.value[0].copy(), grid=grid,
                        bag_score=float(s.value[0, 0]))
    return AmilForward(score=float(s.value[0, 0]), attention=attn,
                       tape=tape, score_var=s, pvars=pv)


def train_mil(model: AmilModel, bags: list[Bag], epochs: int, lr: float,
              seed: int = 0) -> TrainReport:
    """SGD on bag-level BCE; reads bag.patches and bag.label only."""
    if not bags:
        raise ValueError("train_mil: no bags")
    if lr < 0:
        raise ValueError("train_mil: lr must be >= 0")
    report = TrainReport(class_names=("bag",))
    for epoch in range(epochs):
        order = SplitMix64(derive(seed, 0x517A, epoch)).permutation(len(bags))
        losses = []
        hits = 0
        for bi in order:
            bag = bags[bi]
            fwd = amil_forward(model, bag.patches)
            target = fwd.tape.leaf(
                np.full((1, 1), bag.label, dtype=np.float32), name="target")
            loss = T.bce_loss(fwd.score_var, target)
            grads = T.backward(fwd.tape, loss, np.float32(1.0),
                               wanted=list(fwd.pvars.values()))
            named = {name: grads[v.id] for name, v in fwd.pvars.items()}
            T.sgd_step(model.params, named, lr)
            losses.append(float(loss.value))
            hits += int((fwd.score > 0.5) == bool(bag.label))
        report.add(epoch, float(np.mean(losses)),
                   np.array([hits / len(bags)]))
    return report


def evaluate_mil(model: AmilModel, bags: list[Bag]) -> dict:
    """Bag accuracy plus how often max attention lands on a true positive."""
    correct = 0
    pos_bags = 0
    pointed = 0
    for bag in bags:
        fwd = amil_forward(model, bag.patches)
        correct += int((fwd.score > 0.5) == bool(bag.label))
        if bag.label:
            pos_bags += 1
            top = int(np.argmax(fwd.attention.weights))
            pointed += int(bool(bag.instance_truth[top]))
    return {
        "bag_accuracy": correct / len(bags),
        "positive_bags": pos_bags,
        "attention_hit_rate": (pointed / pos_bags) if pos_bags else float("nan"),
    }


def highlight(image: np.ndarray, attn: AttentionMap) -> np.ndarray:
    """Scale each patch by weight/max-weight and reassemble."""
    if attn.grid is None:
        raise ValueError("highlight needs an AttentionMap with grid geometry")
    rows, cols = attn.grid
    if len(attn.weights) != rows * cols:
        raise T.ShapeError(
            f"{len(attn.weights)} weights cannot fill a {rows}x{cols} grid")
    img = T.tensor(image)
    patch = img.shape[1] // rows
    if img.shape[1] != rows * patch or img.shape[2] != cols * patch:
        raise T.ShapeError(
            f"image {img.shape} does not tile as {rows}x{cols} patches")
    patches, grid = shred(img, patch)
    ratios = (attn.weights / attn.weights.max()).astype(np.float32)
    return reassemble(patches * ratios[:, None, None, None], grid)


# ------------------------------------------------------------- checkpoints

def save_amil(model: AmilModel, path) -> None:
    write_container(path, {"kind": "amil", "spec": model.spec.to_json()},
                    model.params)


def load_amil(path) -> AmilModel:
    from .model import CheckpointError
    payload, params, _ = read_container(path)
    if payload.get("kind") != "amil":
        raise CheckpointError(
            f"checkpoint holds a {payload.get('kind')!r}, not an amil model")
    spec = AmilSpec.from_json(payload["spec"])
    expected = {name: shape for name, shape, _ in _amil_param_defs(spec)}
    if set(expected) != set(params) or any(
            params[n].shape != s for n, s in expected.items()):
        raise CheckpointError("parameters do not match the amil spec")
    return AmilModel(spec=spec, params=params)
