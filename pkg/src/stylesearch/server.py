"""HTTP retrieval service.

Read-only endpoints over an immutable (index, model) snapshot:

  POST /api/query      {"text": ..., "k": 10, "threshold": null} -> ranked results
  GET  /api/styles     registered styles with index counts
  GET  /api/clip/{id}  original WAV bytes
  GET  /api/health     index size and model dimension

Static UI files are mounted at / when a directory is configured.
Rankings are byte-for-byte the same as the CLI query path because both
call run_query.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .encoders import encode_text
from .index import EmbeddingIndex, query as index_query
from .prompts import PromptBank, normalize_words, tokenize
from .trainer import ModelBundle

DEFAULT_PORT = 8787
PORT_ENV_VAR = "STYLESEARCH_PORT"


@dataclass(frozen=True)
class QueryHit:
    id: str
    score: float
    style: str | None
    duration_s: float | None


def run_query(
    index: EmbeddingIndex,
    bundle: ModelBundle,
    text: str,
    k: int,
    threshold: float | None = None,
) -> list[QueryHit]:
    """Encode free-form text and rank index rows; shared by CLI and HTTP."""
    emb = encode_text(bundle.text, tokenize(bundle.vocab, text))
    hits = []
    for uid, score in index_query(index, emb, k, threshold):
        meta = index.metadata.get(uid) or {}
        hits.append(
            QueryHit(
                id=uid,
                score=score,
                style=meta.get("style"),
                duration_s=meta.get("duration_s"),
            )
        )
    return hits


def create_app(
    index: EmbeddingIndex,
    bundle: ModelBundle,
    bank: PromptBank,
    clip_root: str | Path | None = None,
    static_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="stylesearch", docs_url=None, redoc_url=None)
    clip_root = Path(clip_root) if clip_root is not None else None

    @app.post("/api/query")
    async def api_query(request: Request):
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError:
            return JSONResponse({"error": "body is not valid JSON"}, status_code=400)
        if not isinstance(body, dict):
            return JSONResponse({"error": "body must be a JSON object"}, status_code=400)
        text = body.get("text", "")
        if not isinstance(text, str) or not normalize_words(text):
            return JSONResponse({"error": "text must be a nonempty string"}, status_code=400)
        k = body.get("k", 10)
        if not isinstance(k, int) or isinstance(k, bool) or not 1 <= k <= len(index):
            return JSONResponse(
                {"error": f"k must be an integer in [1, {len(index)}]"}, status_code=422
            )
        threshold = body.get("threshold")
        if threshold is not None and not isinstance(threshold, (int, float)):
            return JSONResponse({"error": "threshold must be a number"}, status_code=400)
        hits = run_query(index, bundle, text, k, threshold)
        return {
            "results": [
                {"id": h.id, "score": h.score, "style": h.style, "duration_s": h.duration_s}
                for h in hits
            ],
            "query_echo": " ".join(normalize_words(text)),
            "model_d": index.d,
        }

    @app.get("/api/styles")
    def api_styles():
        counts: dict[str, int] = {}
        for meta in index.metadata.values():
            style = meta.get("style")
            if style:
                counts[style] = counts.get(style, 0) + 1
        return {
            "styles": [
                {"name": name, "count": counts.get(name, 0)}
                for name in bundle.registry
            ]
        }

    @app.get("/api/clip/{uid}")
    def api_clip(uid: str):
        meta = index.metadata.get(uid)
        if not meta or not meta.get("path"):
            return JSONResponse({"error": f"no clip for id {uid!r}"}, status_code=404)
        wav_path = Path(meta["path"])
        if not wav_path.is_absolute() and clip_root is not None:
            wav_path = clip_root / wav_path
        if not wav_path.exists():
            return JSONResponse({"error": f"clip file missing for {uid!r}"}, status_code=404)
        return Response(content=wav_path.read_bytes(), media_type="audio/wav")

    @app.get("/api/health")
    def api_health():
        return {"status": "ok", "rows": len(index), "d": index.d}

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app


def resolve_port(flag_value: int | None) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get(PORT_ENV_VAR)
    return int(env) if env else DEFAULT_PORT
