"""HTTP+JSON explanation service over one loaded checkpoint.

Stateless except for the in-memory impression job table: /predict and
/explain responses are pure functions of (checkpoint, request body), and
every error body is {code, message} from a closed code set. Uploaded
images are letterboxed (aspect preserved, padded with the training-mean
pixel) to the model input, never stretched.
"""

import base64
import binascii
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from starlette.exceptions import HTTPException as StarletteHTTPException

from . import model as M
from . import render
from . import saliency as S
from .impressions import ImpressionConfig, impress

MAX_IMAGE_BYTES = 4 * 1024 * 1024

ERROR_CODES = ("bad_image", "image_too_large", "unknown_method",
               "unknown_class", "cam_inapplicable", "bad_request",
               "unknown_job", "invalid_config", "not_found", "internal")


def _error(status: int, code: str, message: str) -> JSONResponse:
    assert code in ERROR_CODES
    return JSONResponse(status_code=status,
                        content={"code": code, "message": message})


class _ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        self.status, self.code, self.message = status, code, message


def decode_to_input(data: bytes, spec: M.ModelSpec) -> np.ndarray:
    """Decode an upload and letterbox it to the model's input tensor."""
    if len(data) > MAX_IMAGE_BYTES:
        raise _ApiError(413, "image_too_large",
                        f"image exceeds {MAX_IMAGE_BYTES} bytes")
    try:
        rgb = render.decode_image(data)
    except ValueError as e:
        raise _ApiError(400, "bad_image", str(e))
    c, th, tw = spec.in_shape
    px = rgb.pixels.astype(np.float32) / 255.0           # (H, W, 3)
    if c == 1:
        # ITU-R 601 luma
        px = (0.299 * px[:, :, 0] + 0.587 * px[:, :, 1]
              + 0.114 * px[:, :, 2])[:, :, None]
    h, w = px.shape[:2]
    scale = min(th / h, tw / w)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    resized = np.stack(
        [render.resize_bilinear(px[:, :, ch], nh, nw) for ch in range(c)])
    out = np.full((c, th, tw), spec.input_mean, dtype=np.float32)
    oy, ox = (th - nh) // 2, (tw - nw) // 2
    out[:, oy:oy + nh, ox:ox + nw] = resized
    return out


def _resolve_class(model: M.Model, target) -> int:
    names = model.spec.class_names
    if target is None:
        raise _ApiError(400, "unknown_class", "class missing")
    if isinstance(target, bool):
        raise _ApiError(400, "unknown_class", f"bad class {target!r}")
    if isinstance(target, int):
        if 0 <= target < len(names):
            return target
        raise _ApiError(400, "unknown_class",
                        f"class index {target} out of range")
    if isinstance(target, str):
        if target in names:
            return names.index(target)
        if target.isdigit() and 0 <= int(target) < len(names):
            return int(target)
        raise _ApiError(400, "unknown_class",
                        f"unknown class {target!r}; valid: {list(names)}")
    raise _ApiError(400, "unknown_class", f"bad class {target!r}")


@dataclass
class Job:
    id: str
    kind: str
    status: str                   # queued | running | done | failed
    config: dict
    created: float
    finished: float | None = None
    result: dict | None = None
    error: str | None = None

    def record(self) -> dict:
        out = {"id": self.id, "kind": self.kind, "status": self.status,
               "config": self.config, "created": self.created,
               "finished": self.finished}
        if self.status == "done":
            out["result"] = self.result
        if self.status == "failed":
            out["error"] = self.error
        return out


class JobTable:
    """In-memory job store with TTL eviction of finished jobs."""

    def __init__(self, ttl: float, workers: int = 2):
        self.ttl = ttl
        self.jobs: dict[str, Job] = {}
        self.lock = threading.Lock()
        self.pool = ThreadPoolExecutor(max_workers=workers)

    def _evict(self) -> None:
        now = time.monotonic()
        stale = [k for k, j in self.jobs.items()
                 if j.finished is not None and now - j.finished > self.ttl]
        for k in stale:
            del self.jobs[k]

    def submit(self, kind: str, config: dict, fn) -> str:
        jid = uuid.uuid4().hex[:12]
        job = Job(id=jid, kind=kind, status="queued", config=config,
                  created=time.time())
        with self.lock:
            self._evict()
            self.jobs[jid] = job

        def run():
            with self.lock:
                job.status = "running"
            try:
                result = fn()
                with self.lock:
                    job.result = result
                    job.status = "done"
                    job.finished = time.monotonic()
            except Exception as e:  # job failures must surface, not raise
                with self.lock:
                    job.error = f"{type(e).__name__}: {e}"
                    job.status = "failed"
                    job.finished = time.monotonic()

        self.pool.submit(run)
        return jid

    def get(self, jid: str) -> Job | None:
        with self.lock:
            self._evict()
            return self.jobs.get(jid)


def _png_b64(img: render.RgbImage) -> str:
    return base64.b64encode(render.encode_png(img)).decode("ascii")


def create_app(model_path, static_dir=None, job_ttl: float = 600.0,
               impress_workers: int = 2) -> FastAPI:
    model = M.load(model_path)
    crc = M.checkpoint_crc(model_path)
    app = FastAPI(title="nnviz", docs_url=None, redoc_url=None)
    jobs = JobTable(ttl=job_ttl, workers=impress_workers)
    app.state.model = model
    app.state.jobs = jobs

    @app.exception_handler(_ApiError)
    async def on_api_error(request: Request, exc: _ApiError):
        return _error(exc.status, exc.code, exc.message)

    @app.exception_handler(StarletteHTTPException)
    async def on_http_error(request: Request, exc: StarletteHTTPException):
        # framework-raised statuses (unknown routes, bad methods) still wear
        # the {code, message} envelope
        if exc.status_code == 404:
            return _error(404, "not_found", str(exc.detail))
        if 400 <= exc.status_code < 500:
            return _error(exc.status_code, "bad_request", str(exc.detail))
        return _error(exc.status_code, "internal", "internal error")

    @app.exception_handler(Exception)
    async def on_crash(request: Request, exc: Exception):
        # 500s never leak internals; details stay in the server log
        return _error(500, "internal", "internal error")

    def _read_image_field(body: dict) -> np.ndarray:
        img_b64 = body.get("image")
        if not isinstance(img_b64, str):
            raise _ApiError(400, "bad_image", "missing base-64 image field")
        if len(img_b64) > 2 * MAX_IMAGE_BYTES:
            raise _ApiError(413, "image_too_large", "image field too large")
        try:
            raw = base64.b64decode(img_b64, validate=True)
        except (binascii.Error, ValueError):
            raise _ApiError(400, "bad_image", "image is not valid base-64")
        return decode_to_input(raw, model.spec)

    @app.get("/api/model")
    async def model_card():
        return {
            "name": model.spec.name,
            "arch": model.spec.arch,
            "input_shape": list(model.spec.in_shape),
            "class_names": list(model.spec.class_names),
            "capture_layer": model.spec.capture_layer,
            "head": model.spec.head(),
            "checkpoint_crc32": f"{crc:08x}",
        }

    @app.post("/api/predict")
    async def predict(request: Request):
        body = await _json_body(request)
        img = _read_image_field(body)
        fr = M.forward(model, img)
        k = min(5, len(model.spec.class_names))
        return {
            "topk": [{"class": name, "confidence": conf}
                     for name, conf in M.top_k(fr.scores, k)],
            "all": [float(x) for x in fr.scores.confidences],
        }

    @app.post("/api/explain")
    async def explain(request: Request):
        body = await _json_body(request)
        img = _read_image_field(body)
        method = body.get("method", "gradcam")
        if method not in S.METHODS:
            raise _ApiError(400, "unknown_method",
                            f"unknown method {method!r}; valid: {list(S.METHODS)}")
        alpha = body.get("alpha", 0.5)
        if not isinstance(alpha, (int, float)) or not 0 <= alpha <= 1:
            raise _ApiError(400, "bad_request", "alpha must be in [0,1]")
        fr = M.forward(model, img)
        target = body.get("class")
        if target is None:
            cid = int(np.argmax(fr.scores.confidences))
        else:
            cid = _resolve_class(model, target)

        if method == "activation_grid":
            layer = body.get("layer", model.spec.capture_layer)
            try:
                tg = S.activation_grid(model, img, layer)
            except ValueError as e:
                raise _ApiError(400, "bad_request", str(e))
            grid_img = render.gray_to_rgb(tg.grid)
            return {
                "overlay": _png_b64(grid_img),
                "base": _png_b64(render.gray_to_rgb(img)),
                "raw_grid": {"width": tg.grid.shape[1],
                             "height": tg.grid.shape[0],
                             "values": [float(v) for v in tg.grid.ravel()]},
                "meta": {"method": method, "class": None, "layer": layer,
                         "resolution": "grid", "degenerate": False,
                         "alpha": alpha},
            }

        occ_cfg = None
        if method == "occlusion":
            try:
                occ_cfg = S.OcclusionConfig(
                    patch=int(body.get("occlusion_patch", 8)),
                    stride=int(body.get("occlusion_stride", 4)),
                    baseline=body.get("occlusion_baseline"))
                occ_cfg.validate(min(img.shape[1], img.shape[2]))
            except (TypeError, ValueError) as e:
                raise _ApiError(400, "bad_request", f"bad occlusion config: {e}")
        try:
            res = S.explain(model, img, method, cid, occlusion_cfg=occ_cfg)
        except S.CamInapplicableError as e:
            raise _ApiError(422, "cam_inapplicable", str(e))
        base = render.gray_to_rgb(img)
        heat = render.colorize(res.heatmap)
        over = render.overlay(base, heat, float(alpha))
        g = res.heatmap.grid
        return {
            "overlay": _png_b64(over),
            "base": _png_b64(base),
            "raw_grid": {"width": g.shape[1], "height": g.shape[0],
                         "values": [float(v) for v in g.ravel()]},
            "meta": {"method": method,
                     "class": model.spec.class_names[cid],
                     "class_index": cid,
                     "resolution": res.heatmap.resolution,
                     "degenerate": res.heatmap.degenerate,
                     "alpha": alpha,
                     "baseline_confidence": res.baseline_confidence},
        }

    @app.post("/api/impressions")
    async def impressions_submit(request: Request):
        body = await _json_body(request)
        cid = _resolve_class(model, body.get("class"))
        overrides = body.get("config", {})
        if not isinstance(overrides, dict):
            raise _ApiError(400, "invalid_config", "config must be an object")
        allowed = {"iterations", "step", "tv_weight", "rotate_deg", "jitter",
                   "crop_min", "seed"}
        bad = set(overrides) - allowed
        if bad:
            raise _ApiError(400, "invalid_config",
                            f"unknown config keys {sorted(bad)}")
        try:
            cfg = ImpressionConfig(**overrides)
            cfg.validate()
        except (TypeError, ValueError) as e:
            raise _ApiError(400, "invalid_config", str(e))

        def run():
            trace = impress(model, cid, cfg)
            final = render.gray_to_rgb(trace.final_image)
            fr = M.forward(model, trace.final_image)
            return {
                "class": model.spec.class_names[cid],
                "image": _png_b64(final),
                "logits": [float(x) for x in trace.logits],
                "tv": [float(x) for x in trace.tv],
                "final_confidence": float(fr.scores.confidences[cid]),
            }

        jid = jobs.submit("impression",
                          {"class": model.spec.class_names[cid],
                           "overrides": overrides}, run)
        return {"job_id": jid}

    @app.get("/api/jobs/{jid}")
    async def job_status(jid: str):
        job = jobs.get(jid)
        if job is None:
            raise _ApiError(404, "unknown_job", f"no job {jid!r}")
        return job.record()

    async def _json_body(request: Request) -> dict:
        try:
            body = await request.json()
        except Exception:
            raise _ApiError(400, "bad_request", "body must be JSON")
        if not isinstance(body, dict):
            raise _ApiError(400, "bad_request", "body must be a JSON object")
        return body

    if static_dir is not None:
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="ui")
    return app
