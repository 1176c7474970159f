"""Class impressions: gradient ascent on a raw class logit from noise.

Each iteration samples a fresh transform of the current image
(rotation+scale resample, per-channel jitter, crop-and-resize) and takes
the class-logit gradient at that transformed copy; evaluating gradients
under ever-changing transforms is what makes the synthesized image
robust to them. The total-variation prior acts on the actual iterate
(that is the image whose smoothness matters), and a proposed step is
kept only if it does not lower the maximized objective
logit - tv_weight * tv, so the per-iteration trace of the iterate's
logit climbs monotonically instead of jittering with the transforms.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Model, forward
from .render import resize_bilinear
from .rng import SplitMix64, derive


@dataclass(frozen=True)
class ImpressionConfig:
    iterations: int = 300
    step: float = 0.01
    tv_weight: float = 1e-3
    rotate_deg: float = 5.0
    scale: tuple[float, float] = (0.95, 1.05)
    jitter: float = 0.02
    crop_min: float = 0.9
    init: tuple[float, float] = (0.4, 0.6)
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.step < 0 or self.tv_weight < 0:
            raise ValueError("step and tv_weight must be >= 0")
        lo, hi = self.scale
        if not (0.5 < lo <= hi < 2.0):
            raise ValueError(f"scale interval {self.scale} must sit in (0.5, 2)")
        if not 0.5 < self.crop_min <= 1.0:
            raise ValueError(f"crop_min {self.crop_min} must sit in (0.5, 1]")
        if not 0.0 <= self.init[0] <= self.init[1] <= 1.0:
            raise ValueError(f"init interval {self.init} must sit in [0, 1]")


@dataclass
class ImpressionTrace:
    logits: np.ndarray           # per-iteration target logit
    tv: np.ndarray               # per-iteration total variation
    final_image: np.ndarray      # (C, H, W) in [0, 1]

    def to_csv(self) -> str:
        rows = ["iteration,logit,tv"]
        for i, (l, t) in enumerate(zip(self.logits, self.tv)):
            rows.append(f"{i},{l:.6f},{t:.6f}")
        return "\n".join(rows) + "\n"


def tv_loss(image: np.ndarray) -> tuple[float, np.ndarray]:
    """Isotropic squared-difference total variation and its gradient."""
    x = np.asarray(image, dtype=np.float32)
    if x.ndim != 3 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ValueError("tv_loss wants CxHxW with H, W >= 2")
    dy = x[:, 1:, :] - x[:, :-1, :]
    dx = x[:, :, 1:] - x[:, :, :-1]
    loss = float((dy.astype(np.float64) ** 2).sum()
                 + (dx.astype(np.float64) ** 2).sum())
    g = np.zeros_like(x)
    g[:, 1:, :] += 2.0 * dy
    g[:, :-1, :] -= 2.0 * dy
    g[:, :, 1:] += 2.0 * dx
    g[:, :, :-1] -= 2.0 * dx
    return loss, g


def _warp_rotate_scale(img: np.ndarray, deg: float, scale: float) -> np.ndarray:
    """Rotate about center and zoom, bilinear with zero fill outside."""
    c, h, w = img.shape
    th = np.deg2rad(deg)
    cos, sin = np.cos(th), np.sin(th)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yr, xr = yy - cy, xx - cx
    # inverse map: rotate by -theta, divide by scale
    sy = (cos * yr + sin * xr) / scale + cy
    sx = (-sin * yr + cos * xr) / scale + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0).astype(np.float32)
    fx = (sx - x0).astype(np.float32)
    out = np.zeros_like(img)
    for (oy, ox, wgt) in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                          (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc, xc = np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)
        out += img[:, yc, xc] * (wgt * ok)[None]
    return out.astype(np.float32)


def random_transform(image: np.ndarray, cfg: ImpressionConfig,
                     rng: SplitMix64) -> np.ndarray:
    """One sampled instance of rotate, scale, jitter, crop-resize."""
    img = np.asarray(image, dtype=np.float32)
    c, h, w = img.shape
    deg = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
    scale = rng.uniform(*cfg.scale)
    out = _warp_rotate_scale(img, deg, scale)
    jit = np.array([rng.uniform(-cfg.jitter, cfg.jitter) for _ in range(c)],
                   dtype=np.float32)
    out = out + jit[:, None, None]
    frac = rng.uniform(cfg.crop_min, 1.0)
    ch = max(2, int(round(frac * h)))
    cw = max(2, int(round(frac * w)))
    if (ch, cw) != (h, w):
        oy = rng.randint(h - ch + 1)
        ox = rng.randint(w - cw + 1)
        crop = out[:, oy:oy + ch, ox:ox + cw]
        out = np.stack([resize_bilinear(crop[ci], h, w) for ci in range(c)])
    return out.astype(np.float32)


def _logit_and_grad(model: Model, img: np.ndarray, class_id: int):
    fr = forward(model, img)
    seed = np.zeros((1, len(fr.scores.class_names)), dtype=np.float32)
    seed[0, class_id] = 1.0
    grads = T.backward(fr.tape, fr.scores.logits_node, seed,
                       wanted=[fr.image_node])
    return float(fr.scores.logits[class_id]), grads[fr.image_node][0]


def impress(model: Model, class_id: int,
            cfg: ImpressionConfig = ImpressionConfig()) -> ImpressionTrace:
    """Synthesize an input that maximizes one class logit.

    Greedy ascent: the gradient is taken at a freshly transformed copy,
    the step is applied to the untransformed iterate, and the step is
    kept only if logit - tv_weight*tv of the iterate does not drop. The
    trace records the iterate's logit and TV after each iteration.
    """
    if not 0 <= class_id < len(model.spec.class_names):
        raise ValueError(f"class index {class_id} out of range")
    cfg.validate()
    c, h, w = model.spec.in_shape
    rng = SplitMix64(derive(cfg.seed, 0x1335))
    x = rng.uniform_array((c, h, w), cfg.init[0], cfg.init[1])
    logits = np.zeros(cfg.iterations, dtype=np.float64)
    tvs = np.zeros(cfg.iterations, dtype=np.float64)
    step = np.float32(cfg.step)
    lam = np.float32(cfg.tv_weight)
    if cfg.iterations == 0:
        return ImpressionTrace(logits=logits, tv=tvs, final_image=x)
    logit_x = float(forward(model, x).scores.logits[class_id])
    tv_x, gtv_x = tv_loss(x)
    for it in range(cfg.iterations):
        xt = np.clip(random_transform(x, cfg, rng), 0.0, 1.0)
        _, g_logit = _logit_and_grad(model, xt, class_id)
        cand = np.clip(x + step * (g_logit - lam * gtv_x), 0.0, 1.0)
        fr = forward(model, cand)
        logit_c = float(fr.scores.logits[class_id])
        tv_c, gtv_c = tv_loss(cand)
        if logit_c - cfg.tv_weight * tv_c >= logit_x - cfg.tv_weight * tv_x:
            x, logit_x, tv_x, gtv_x = cand, logit_c, tv_c, gtv_c
        logits[it] = logit_x
        tvs[it] = tv_x
    return ImpressionTrace(logits=logits, tv=tvs, final_image=x)
