"""HTTP service for instantly tunable decoding.

Uploading an image runs the encoder+denoiser once per path and caches the two
latents under a content-hash id; every subsequent restore request is a
decoder-only blend, so sweeping alpha is cheap. The cache is a bounded LRU;
entries are immutable once created.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from PIL import Image

from .degradation import DegradationMap
from .model import LatentCode, MultipathModel, degradation_features, forward_path, load_model, model_sha256, tunable_decode

MAX_UPLOAD_BYTES = 8 * 1024 * 1024
CACHE_CAPACITY = 256


@dataclass
class LatentCacheEntry:
    image_id: str
    z_pos: LatentCode
    z_neu: LatentCode
    degradation: DegradationMap
    created_at: float


def _error(status: int, message: str, **context):
    return JSONResponse(status_code=status, content={"error": message, "context": context})


def _decode_upload(body: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(body)) as im:
        im.load()
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _encode_png(img: np.ndarray) -> bytes:
    q = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class LatentCache:
    """LRU keyed by content hash; per-key creation locks keep uploads race-safe."""

    def __init__(self, capacity: int = CACHE_CAPACITY):
        self.capacity = capacity
        self._entries: OrderedDict[str, LatentCacheEntry] = OrderedDict()
        self._lock = threading.Lock()
        self._creation_locks: dict = {}

    def get(self, image_id: str):
        with self._lock:
            entry = self._entries.get(image_id)
            if entry is not None:
                self._entries.move_to_end(image_id)
            return entry

    def creation_lock(self, image_id: str) -> threading.Lock:
        with self._lock:
            return self._creation_locks.setdefault(image_id, threading.Lock())

    def put(self, entry: LatentCacheEntry):
        with self._lock:
            self._entries[entry.image_id] = entry
            self._entries.move_to_end(entry.image_id)
            while len(self._entries) > self.capacity:
                evicted, _ = self._entries.popitem(last=False)
                self._creation_locks.pop(evicted, None)

    def __len__(self):
        return len(self._entries)


def create_app(model_path=None, cors: bool = False, model: MultipathModel | None = None, model_hash: str = "") -> FastAPI:
    app = FastAPI(title="tunable metalens restoration")
    if model is None and model_path is not None:
        model = load_model(model_path)
        model_hash = model_sha256(model_path)
    app.state.model = model
    app.state.model_hash = model_hash
    app.state.cache = LatentCache()

    if cors:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"])

    @app.post("/images")
    async def upload(request: Request):
        if app.state.model is None:
            return _error(503, "model not loaded")
        body = await request.body()
        if len(body) > MAX_UPLOAD_BYTES:
            return _error(413, f"upload exceeds {MAX_UPLOAD_BYTES} bytes", size=len(body))
        if not body:
            return _error(400, "empty body")
        image_id = hashlib.sha256(body).hexdigest()
        cache: LatentCache = app.state.cache
        if cache.get(image_id) is not None:
            return {"image_id": image_id}
        try:
            image = _decode_upload(body)
        except Exception as exc:
            return _error(400, f"cannot decode PNG: {exc}")
        with cache.creation_lock(image_id):
            if cache.get(image_id) is None:
                mdl = app.state.model
                dmap, _ = degradation_features(mdl, image)
                entry = LatentCacheEntry(
                    image_id=image_id,
                    z_pos=forward_path(mdl, image, "positive", dmap),
                    z_neu=forward_path(mdl, image, "neutral", dmap),
                    degradation=dmap,
                    created_at=time.time(),
                )
                cache.put(entry)
        return {"image_id": image_id}

    @app.get("/images/{image_id}/restore")
    def restore_endpoint(image_id: str, alpha: str = "0.75"):
        entry = app.state.cache.get(image_id)
        if entry is None:
            return _error(404, "unknown image id", image_id=image_id)
        try:
            alpha_val = float(alpha)
        except ValueError:
            return _error(422, f"alpha is not a number: {alpha!r}")
        cfg = app.state.model.config
        if not (cfg.alpha_min <= alpha_val <= cfg.alpha_max):
            return _error(422, f"alpha {alpha_val} outside [{cfg.alpha_min}, {cfg.alpha_max}]")
        img = tunable_decode(app.state.model, entry.z_pos, entry.z_neu, alpha_val)
        return Response(content=_encode_png(img), media_type="image/png", headers={"X-Alpha": repr(alpha_val)})

    @app.get("/images/{image_id}/degradation")
    def degradation_endpoint(image_id: str):
        entry = app.state.cache.get(image_id)
        if entry is None:
            return _error(404, "unknown image id", image_id=image_id)
        return Response(content=entry.degradation.to_json(), media_type="application/json")

    @app.get("/healthz")
    def healthz():
        status = "ok" if app.state.model is not None else "no-model"
        return {"status": status, "model_hash": app.state.model_hash}

    return app
