"""Synthetic multi-label shapes data with localization ground truth,
an IDX digit-file parser, and MIL bag assembly.

Every image is generated from its own SplitMix64 substream, so datasets
are bit-identical across platforms for a given (n, seed) and stable under
prefix extension. Bounding boxes are computed from the rendered pixels
(half-open x1/y1), so a box covers exactly the lit pixels of its shape.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import SplitMix64, derive

SHAPE_CLASSES = ("square", "circle", "cross")

_NOISE_AMP = 0.1
_MIN_SIZE, _MAX_SIZE = 8, 12
_MIN_INTENSITY = 0.7


@dataclass
class ShapesImage:
    pixels: np.ndarray           # (1, side, side) float32 in [0, 1]
    labels: np.ndarray           # (3,) uint8, 1 iff shape present
    boxes: dict[str, tuple[int, int, int, int]]  # class -> (x0,y0,x1,y1), x1/y1 exclusive
    seed: int


@dataclass
class LabeledSet:
    images: np.ndarray           # (N, C, H, W) float32
    labels: np.ndarray           # (N, K) float32 in {0,1}
    class_names: tuple[str, ...]
    boxes: list[dict] | None = None

    def __len__(self):
        return len(self.images)


def _shape_mask(kind: str, side: int, x0: int, y0: int, w: int) -> np.ndarray:
    m = np.zeros((side, side), dtype=bool)
    if kind == "square":
        m[y0:y0 + w, x0:x0 + w] = True
        m[y0 + 2:y0 + w - 2, x0 + 2:x0 + w - 2] = False
    elif kind == "circle":
        yy, xx = np.mgrid[0:side, 0:side]
        cy, cx = y0 + (w - 1) / 2.0, x0 + (w - 1) / 2.0
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= (w / 2.0) ** 2
    elif kind == "cross":
        t = 3
        vs = x0 + (w - t) // 2
        hs = y0 + (w - t) // 2
        m[y0:y0 + w, vs:vs + t] = True
        m[hs:hs + t, x0:x0 + w] = True
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return m


def _mask_box(m: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(m)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _boxes_overlap(a, b, margin=1) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return not (ax1 + margin <= bx0 or bx1 + margin <= ax0
                or ay1 + margin <= by0 or by1 + margin <= ay0)


@dataclass(frozen=True)
class Placement:
    kind: str
    x0: int
    y0: int
    w: int
    intensity: float


def place_shapes(rng: SplitMix64, side: int, kinds_to_place) -> list[Placement]:
    """Sample non-overlapping shape placements via rejection."""
    placements: list[Placement] = []
    occupied: list[tuple] = []
    for kind in kinds_to_place:
        for _ in range(60):
            w = _MIN_SIZE + rng.randint(_MAX_SIZE - _MIN_SIZE + 1)
            if w + 2 > side:
                w = side - 2
            x0 = 1 + rng.randint(side - w - 1)
            y0 = 1 + rng.randint(side - w - 1)
            cand = (x0, y0, x0 + w, y0 + w)
            if any(_boxes_overlap(cand, p) for p in occupied):
                continue
            placements.append(Placement(kind, x0, y0, w,
                                        rng.uniform(_MIN_INTENSITY, 1.0)))
            occupied.append(cand)
            break
    return placements


def rasterize(noise: np.ndarray, placements: list[Placement]) -> tuple[np.ndarray, dict]:
    """Burn placements onto a noise background; returns (pixels, boxes)."""
    side = noise.shape[0]
    pixels = noise.copy()
    boxes: dict[str, tuple] = {}
    for p in placements:
        mask = _shape_mask(p.kind, side, p.x0, p.y0, p.w)
        pixels = np.maximum(pixels, mask * np.float32(p.intensity))
        boxes[p.kind] = _mask_box(mask)
    return pixels.astype(np.float32), boxes


def gen_shapes(n: int, seed: int, max_shapes_per_image: int,
               side: int = 32, kinds=SHAPE_CLASSES,
               min_shapes: int = 1) -> list[ShapesImage]:
    """Deterministic multi-label shapes images.

    Each image holds between min_shapes and max_shapes_per_image distinct
    shapes (sampled uniformly), placed without overlap on uniform noise.
    """
    if n < 1:
        raise ValueError("gen_shapes: n must be >= 1")
    if not 1 <= min_shapes <= max_shapes_per_image <= len(kinds):
        raise ValueError("gen_shapes: need 1 <= min_shapes <= max_shapes "
                         f"<= {len(kinds)}")
    out = []
    for i in range(n):
        sub = derive(seed, 0xDA7A, i)
        rng = SplitMix64(sub)
        k = min_shapes + rng.randint(max_shapes_per_image - min_shapes + 1)
        pool = list(kinds)
        rng.shuffle(pool)
        chosen = pool[:k]
        noise = rng.uniform_array((side, side), 0.0, _NOISE_AMP)
        pixels, boxes = rasterize(noise, place_shapes(rng, side, chosen))
        labels = np.zeros(len(SHAPE_CLASSES), dtype=np.uint8)
        for kind in boxes:
            labels[SHAPE_CLASSES.index(kind)] = 1
        out.append(ShapesImage(pixels=pixels[None], labels=labels,
                               boxes=boxes, seed=sub))
    return out


def as_labeled_set(images: list[ShapesImage]) -> LabeledSet:
    return LabeledSet(
        images=np.stack([im.pixels for im in images]).astype(np.float32),
        labels=np.stack([im.labels for im in images]).astype(np.float32),
        class_names=SHAPE_CLASSES,
        boxes=[im.boxes for im in images])


# --------------------------------------------------------------------- IDX

class IdxError(ValueError):
    """Malformed IDX data."""


class IdxTypeError(IdxError):
    """Unknown IDX element type code."""


class IdxTruncatedError(IdxError):
    """Payload shorter than the header promises."""


_IDX_TYPES = {0x08: ("u1", 1), 0x0D: (">f4", 4)}


def parse_idx(data: bytes) -> np.ndarray:
    """Parse IDX bytes. Rank-3 u8 image files come back as N x 1 x H x W
    float32 scaled to [0,1]; rank-1 files come back as an int label vector."""
    if len(data) < 4:
        raise IdxTruncatedError("IDX header needs at least 4 bytes")
    magic, type_code, rank = struct.unpack(">HBB", data[:4])
    if magic != 0:
        raise IdxError(f"IDX magic must be 0, got {magic}")
    if type_code not in _IDX_TYPES:
        raise IdxTypeError(f"unknown IDX type code 0x{type_code:02X}")
    dtype, width = _IDX_TYPES[type_code]
    off = 4 + 4 * rank
    if len(data) < off:
        raise IdxTruncatedError("IDX header truncated inside the dims")
    dims = struct.unpack(f">{rank}I", data[4:off])
    count = int(np.prod(dims)) if dims else 1
    if len(data) - off < count * width:
        raise IdxTruncatedError(
            f"IDX payload holds {(len(data) - off) // width} elements, "
            f"dims promise {count}")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
    arr = arr.reshape(dims)
    if rank == 1:
        return arr.astype(np.int64) if type_code == 0x08 else arr.astype(np.float32)
    out = arr.astype(np.float32)
    if type_code == 0x08:
        out /= 255.0
    if rank == 3:
        out = out[:, None, :, :]
    return out


def write_idx(arr: np.ndarray, type_code: int = 0x08) -> bytes:
    """Writer twin of parse_idx, mainly for round-trip tests and fixtures."""
    if type_code not in _IDX_TYPES:
        raise IdxTypeError(f"unknown IDX type code 0x{type_code:02X}")
    dtype, _ = _IDX_TYPES[type_code]
    head = struct.pack(">HBB", 0, type_code, arr.ndim)
    head += struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


# --------------------------------------------------------------------- MIL

@dataclass
class Bag:
    patches: np.ndarray          # (M, C, P, P) float32
    label: int                   # 1 iff any instance is positive
    instance_truth: np.ndarray   # (M,) bool; test-only, never read in training


def make_bags(source: LabeledSet, positive_class, bag_size: int,
              positive_rate: float, seed: int,
              n_bags: int | None = None) -> list[Bag]:
    """Assemble bags of instances drawn from a labeled pool.

    A bag is positive (gets 1 to 3 positive instances) with probability
    positive_rate, negative bags hold no positives at all, so the bag
    label is exactly the OR of the hidden instance truths.
    """
    if bag_size < 1:
        raise ValueError("make_bags: bag_size must be >= 1")
    if not 0 < positive_rate < 1:
        raise ValueError("make_bags: positive_rate must be in (0, 1)")
    if isinstance(positive_class, str):
        positive_class = source.class_names.index(positive_class)
    is_pos = source.labels[:, positive_class] > 0.5
    pos_idx = np.nonzero(is_pos)[0]
    neg_idx = np.nonzero(~is_pos)[0]
    if len(pos_idx) == 0:
        raise ValueError("make_bags: source has no positive-class instances")
    if len(neg_idx) == 0:
        raise ValueError("make_bags: source has no negative instances")
    if n_bags is None:
        n_bags = len(source) // bag_size
    bags = []
    for b in range(n_bags):
        rng = SplitMix64(derive(seed, 0xBA65, b))
        positive = rng.uniform() < positive_rate
        n_pos = 0
        if positive:
            n_pos = min(bag_size, 1 + rng.randint(3))
        picks = [pos_idx[rng.randint(len(pos_idx))] for _ in range(n_pos)]
        picks += [neg_idx[rng.randint(len(neg_idx))]
                  for _ in range(bag_size - n_pos)]
        rng.shuffle(picks)
        picks = np.asarray(picks)
        bags.append(Bag(
            patches=source.images[picks].astype(np.float32),
            label=int(positive),
            instance_truth=is_pos[picks]))
    return bags


# ------------------------------------------------------------- directory IO

def export_shapes(images: list[ShapesImage], out_dir) -> None:
    """Write one P5 pixmap per image plus a JSON index (labels, boxes, seeds)."""
    from . import render
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"class_names": list(SHAPE_CLASSES), "images": []}
    for i, im in enumerate(images):
        fn = f"img_{i:05d}.pgm"
        gray = np.clip(im.pixels[0] * 255.0 + 0.5, 0, 255).astype(np.uint8)
        (out / fn).write_bytes(render.encode_pgm(gray))
        index["images"].append({
            "file": fn,
            "labels": [int(x) for x in im.labels],
            "boxes": {k: list(v) for k, v in im.boxes.items()},
            "seed": im.seed,
        })
    (out / "index.json").write_text(json.dumps(index, indent=2))


def load_shapes_dir(in_dir) -> LabeledSet:
    from . import render
    root = Path(in_dir)
    index = json.loads((root / "index.json").read_text())
    imgs, labels, boxes = [], [], []
    for entry in index["images"]:
        gray = render.decode_pgm((root / entry["file"]).read_bytes())
        imgs.append((gray.astype(np.float32) / 255.0)[None])
        labels.append(entry["labels"])
        boxes.append({k: tuple(v) for k, v in entry["boxes"].items()})
    return LabeledSet(images=np.stack(imgs), labels=np.asarray(labels, np.float32),
                      class_names=tuple(index["class_names"]), boxes=boxes)
