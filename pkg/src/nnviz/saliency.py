"""Explanation methods for trained models.

cam() reads class-weighted sums straight off a gap-linear head and
refuses anything else; gradcam() backpropagates a one-hot seed from the
raw class logit to the captured feature maps and channel-averages the
gradients, which on a gap-linear head collapses to cam/Z exactly (that
identity doubles as this module's master oracle). guided_backprop swaps
every ReLU backward for the both-positive gate; occlusion slides a
muting patch and records confidence drops. Targets are always raw
logits, never the squashed confidences, and maps for different classes
are independent (multi-label semantics throughout).
"""

from dataclasses import dataclass

import numpy as np

from . import render
from . import tensor as T
from .model import Model, ForwardResult, forward, forward_batch
from .render import Heatmap

__all__ = [
    "Heatmap", "OcclusionConfig", "OcclusionResult", "SaliencyResult",
    "TileGrid", "CamInapplicableError", "cam", "cam_signed", "gradcam",
    "guided_backprop", "guided_gradcam", "occlusion_map", "activation_grid",
    "filter_grid", "explain", "METHODS",
]

METHODS = ("cam", "gradcam", "guided_backprop", "guided_gradcam",
           "occlusion", "activation_grid")


class CamInapplicableError(Exception):
    """Model architecture has no gap-linear readout for CAM."""

    def __init__(self, layer: str):
        self.layer = layer
        super().__init__(
            f"CAM needs the captured conv to feed gap-linear-head directly; "
            f"layer {layer!r} breaks the pattern")


def _check_class(model: Model, class_id: int) -> None:
    if not 0 <= class_id < len(model.spec.class_names):
        raise ValueError(
            f"class index {class_id} out of range "
            f"[0, {len(model.spec.class_names)})")


def _cam_tail(model: Model) -> str:
    """Name of the final linear layer if the model is CAM-shaped, else raise."""
    names = model.spec.layer_names()
    kinds = [l.kind for l in model.spec.layers]
    ci = names.index(model.spec.capture_layer)
    tail = kinds[ci + 1:]
    if tail != ["gap", "linear", kinds[-1]]:
        raise CamInapplicableError(names[ci + 1])
    return names[ci + 2]


def cam_signed(model: Model, image, class_id: int) -> np.ndarray:
    """Raw signed class activation map w_c . A at feature resolution."""
    _check_class(model, class_id)
    lin_name = _cam_tail(model)
    fr = forward(model, image)
    w_row = model.params[f"{lin_name}.weight"][class_id]
    return np.tensordot(w_row, fr.capture.maps, axes=(0, 0)).astype(np.float32)


def cam(model: Model, image, class_id: int) -> Heatmap:
    """Class activation map, clamped at 0 (raw, feature resolution).

    Only defined for gap-linear heads; anything else raises
    CamInapplicableError naming the offending layer.
    """
    m = cam_signed(model, image, class_id)
    return Heatmap(grid=np.maximum(m, 0.0), resolution="feature",
                   method="cam", target_class=class_id)


def _onehot_seed(fr: ForwardResult, class_id: int) -> np.ndarray:
    seed = np.zeros((1, len(fr.scores.class_names)), dtype=np.float32)
    seed[0, class_id] = 1.0
    return seed


def gradcam(model: Model, image, class_id: int) -> tuple[Heatmap, ForwardResult]:
    """Gradient-weighted class activation map at feature resolution.

    Channel weights are the spatial means of d logit / d feature-map; the
    weighted sum is clamped at 0. Works for any architecture that captures
    a conv layer. Also hands back the forward pass (with capture gradients
    filled in) so callers can reuse the scores.
    """
    _check_class(model, class_id)
    fr = forward(model, image)
    grads = T.backward(fr.tape, fr.scores.logits_node,
                       _onehot_seed(fr, class_id), wanted=[fr.capture.node])
    ga = grads[fr.capture.node][0]          # (K, Hf, Wf)
    fr.capture.grads = ga
    alpha = ga.mean(axis=(1, 2))            # (K,)
    m = np.tensordot(alpha, fr.capture.maps, axes=(0, 0))
    hm = Heatmap(grid=np.maximum(m, 0.0).astype(np.float32),
                 resolution="feature", method="gradcam", target_class=class_id)
    return hm, fr


def guided_backprop(model: Model, image, class_id: int) -> np.ndarray:
    """Input-space saliency under the guided ReLU rule (C, H, W)."""
    _check_class(model, class_id)
    fr = forward(model, image)
    grads = T.backward(fr.tape, fr.scores.logits_node,
                       _onehot_seed(fr, class_id), wanted=[fr.image_node],
                       relu_rule="guided")
    return grads[fr.image_node][0]


def guided_gradcam(gradcam_up: Heatmap, gbp: np.ndarray) -> np.ndarray:
    """Pointwise product of an input-space unit-range map with guided
    backprop saliency; class-specific and high-resolution at once."""
    if gradcam_up.resolution != "input":
        raise ValueError("guided_gradcam needs an input-space heatmap "
                         f"(got {gradcam_up.resolution!r})")
    if not gradcam_up.normalized:
        raise ValueError("guided_gradcam needs a unit-range heatmap")
    if gbp.ndim != 3 or gbp.shape[1:] != gradcam_up.grid.shape:
        raise ValueError(
            f"saliency {gbp.shape} does not match heatmap "
            f"{gradcam_up.grid.shape}")
    return (gbp * gradcam_up.grid[None]).astype(np.float32)


# --------------------------------------------------------------- occlusion

@dataclass(frozen=True)
class OcclusionConfig:
    patch: int = 8
    stride: int = 4
    baseline: float | None = None   # None: model's training-mean pixel

    def validate(self, side: int) -> None:
        if not 1 <= self.patch <= side:
            raise ValueError(
                f"occlusion patch {self.patch} not in [1, {side}]")
        if not 1 <= self.stride <= self.patch:
            raise ValueError(
                f"occlusion stride {self.stride} not in [1, {self.patch}]")


@dataclass
class OcclusionResult:
    heatmap: Heatmap              # input-space, raw drops averaged per pixel
    baseline_confidence: float    # unoccluded confidence of the target class
    drops: np.ndarray             # (ny, nx) confidence drop per patch position
    patch: int
    stride: int


def occlusion_map(model: Model, image, class_id: int,
                  cfg: OcclusionConfig = OcclusionConfig()) -> OcclusionResult:
    """Mute every patch on the stride grid and record the confidence drop.

    drop = max(0, conf_orig - conf_muted); pixels covered by several
    patches average their drops. Visits the full grid of
    floor((side - patch)/stride) + 1 positions per axis.
    """
    _check_class(model, class_id)
    img = T.tensor(image)
    c, h, w = img.shape
    cfg.validate(min(h, w))
    fill = np.float32(model.spec.input_mean if cfg.baseline is None
                      else cfg.baseline)
    ny = (h - cfg.patch) // cfg.stride + 1
    nx = (w - cfg.patch) // cfg.stride + 1
    ys = [i * cfg.stride for i in range(ny)]
    xs = [j * cfg.stride for j in range(nx)]

    base_conf = float(forward_batch(model, img[None])[0, class_id])
    muted = np.repeat(img[None], ny * nx, axis=0)
    noop = np.zeros(ny * nx, dtype=bool)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            region = img[:, y:y + cfg.patch, x:x + cfg.patch]
            noop[i * nx + j] = bool(np.all(region == fill))
            muted[i * nx + j, :, y:y + cfg.patch, x:x + cfg.patch] = fill
    confs = np.empty(ny * nx, dtype=np.float64)
    for lo in range(0, len(muted), 64):
        confs[lo:lo + 64] = forward_batch(model, muted[lo:lo + 64])[:, class_id]
    # muting that does not change the image cannot change the confidence;
    # skipping it keeps no-op positions exactly zero regardless of how the
    # BLAS batch happens to round
    confs[noop] = base_conf
    drops = np.maximum(0.0, base_conf - confs).reshape(ny, nx).astype(np.float32)

    acc = np.zeros((h, w), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.int64)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            acc[y:y + cfg.patch, x:x + cfg.patch] += drops[i, j]
            cnt[y:y + cfg.patch, x:x + cfg.patch] += 1
    grid = (acc / np.maximum(cnt, 1)).astype(np.float32)
    hm = Heatmap(grid=grid, resolution="input", method="occlusion",
                 target_class=class_id)
    return OcclusionResult(heatmap=hm, baseline_confidence=base_conf,
                           drops=drops, patch=cfg.patch, stride=cfg.stride)


# ------------------------------------------------------------------- grids

@dataclass
class TileGrid:
    grid: np.ndarray              # (rows*th, cols*tw) float32 in [0,1]
    rows: int
    cols: int
    tile_h: int
    tile_w: int
    count: int                    # live tiles; the rest are black padding
    scales: list[tuple[float, float]]  # per-tile (min, max) before scaling


def _tile(maps: np.ndarray, degenerate_value: float) -> TileGrid:
    k, th, tw = maps.shape
    g = int(np.ceil(np.sqrt(k)))
    rows = cols = g
    out = np.zeros((rows * th, cols * tw), dtype=np.float32)
    scales = []
    for i in range(k):
        t = maps[i]
        lo, hi = float(t.min()), float(t.max())
        scales.append((lo, hi))
        if hi - lo < 1e-12:
            tile = np.full_like(t, degenerate_value, dtype=np.float32)
        else:
            tile = ((t - lo) / (hi - lo)).astype(np.float32)
        r, c = divmod(i, cols)
        out[r * th:(r + 1) * th, c * tw:(c + 1) * tw] = tile
    return TileGrid(grid=out, rows=rows, cols=cols, tile_h=th, tile_w=tw,
                    count=k, scales=scales)


def activation_grid(model: Model, image, layer: str,
                    channel: int | None = None) -> TileGrid:
    """Per-channel activation tiles of a conv/relu layer, each min-max
    scaled. A flat (e.g. all-zero) tile renders black."""
    from .model import trace_layers
    trace = trace_layers(model, image)
    if layer not in trace:
        raise ValueError(
            f"unknown activation layer {layer!r}; have {sorted(trace)}")
    maps = trace[layer]
    if channel is not None:
        if not 0 <= channel < maps.shape[0]:
            raise ValueError(f"channel {channel} out of range "
                             f"[0, {maps.shape[0]})")
        maps = maps[channel:channel + 1]
    return _tile(maps, degenerate_value=0.0)


def filter_grid(model: Model, layer: str) -> TileGrid:
    """First-layer kernels as tiles, min-max scaled per kernel. A constant
    kernel renders mid-gray. Deeper convs have no pixel-space reading and
    are refused."""
    names = model.spec.layer_names()
    first_conv = next(n for n, l in zip(names, model.spec.layers)
                      if l.kind == "conv")
    if layer != first_conv:
        raise ValueError(
            f"filter_grid reads pixel-space kernels only; ask for "
            f"{first_conv!r}, not {layer!r}")
    k = model.params[f"{layer}.kernel"]     # (O, I, kh, kw)
    tiles, scales = [], []
    for o in range(k.shape[0]):
        ker = k[o]
        lo, hi = float(ker.min()), float(ker.max())
        scales.append((lo, hi))
        if hi - lo < 1e-12:
            t = np.full(ker.shape[1:], 0.5, dtype=np.float32)
        else:
            t = ((ker - lo) / (hi - lo)).mean(axis=0).astype(np.float32)
        tiles.append(t)
    n_k, th, tw = len(tiles), tiles[0].shape[0], tiles[0].shape[1]
    g = int(np.ceil(np.sqrt(n_k)))
    out = np.zeros((g * th, g * tw), dtype=np.float32)
    for i, t in enumerate(tiles):
        r, c = divmod(i, g)
        out[r * th:(r + 1) * th, c * tw:(c + 1) * tw] = t
    return TileGrid(grid=out, rows=g, cols=g, tile_h=th, tile_w=tw,
                    count=n_k, scales=scales)


# ------------------------------------------------------------- dispatcher

@dataclass
class SaliencyResult:
    heatmap: Heatmap              # input-space, unit-range
    input_saliency: np.ndarray | None
    baseline_confidence: float | None
    model_name: str
    layer: str
    class_id: int
    class_name: str
    method: str


def _abs_channel_max(sal: np.ndarray) -> np.ndarray:
    return np.abs(sal).max(axis=0).astype(np.float32)


def explain(model: Model, image, method: str, class_id: int,
            occlusion_cfg: OcclusionConfig | None = None) -> SaliencyResult:
    """Run one method end to end and deliver a normalized input-space map."""
    img = T.tensor(image)
    in_hw = (img.shape[1], img.shape[2])
    input_saliency = None
    baseline_conf = None
    if method == "cam":
        hm = render.upsample_bilinear(cam(model, img, class_id), in_hw)
    elif method == "gradcam":
        fm, _ = gradcam(model, img, class_id)
        hm = render.upsample_bilinear(fm, in_hw)
    elif method == "guided_backprop":
        input_saliency = guided_backprop(model, img, class_id)
        hm = Heatmap(grid=_abs_channel_max(input_saliency),
                     resolution="input", method=method, target_class=class_id)
    elif method == "guided_gradcam":
        fm, _ = gradcam(model, img, class_id)
        up = render.normalize(render.upsample_bilinear(fm, in_hw))
        gbp = guided_backprop(model, img, class_id)
        input_saliency = guided_gradcam(up, gbp)
        hm = Heatmap(grid=_abs_channel_max(input_saliency),
                     resolution="input", method=method, target_class=class_id)
    elif method == "occlusion":
        occ = occlusion_map(model, img, class_id,
                            occlusion_cfg or OcclusionConfig())
        hm = occ.heatmap
        baseline_conf = occ.baseline_confidence
    else:
        raise ValueError(f"unknown method {method!r}")
    hm = render.normalize(hm)
    hm.method = method
    return SaliencyResult(
        heatmap=hm, input_saliency=input_saliency,
        baseline_confidence=baseline_conf, model_name=model.spec.name,
        layer=model.spec.capture_layer, class_id=class_id,
        class_name=model.spec.class_names[class_id], method=method)
