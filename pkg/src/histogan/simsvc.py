"""Similarity-explorer backend: persistent embedding indexes over generated
image sets, exact top-K cosine queries, and HTTP endpoints serving queries,
reward traces and t-SNE exports to the browser UI.

Index persistence is atomic: an index directory appears fully built or not
at all (temp dir + rename). Search is exact brute force; desk-scale index
sizes do not justify approximate structures.
"""

from __future__ import annotations

import datetime
import io
import json
import logging
import os
import shutil
import hashlib
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.responses import FileResponse, PlainTextResponse
from PIL import Image

from . import __version__
from .corpus import load_image
from .errors import ConfigurationError, InvalidInputError
from .gan import RewardTrace
from .snn import LayeredExtractor, embed_image, load_checkpoint

log = logging.getLogger(__name__)


@dataclass
class IndexEntry:
    image_id: str
    embedding: np.ndarray
    path: str


@dataclass
class SimilarityIndex:
    index_id: str
    extractor_digest: str
    entries: list[IndexEntry]
    created_at: str

    def embeddings(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries])


def build_index(image_dir: str | Path, extractor: LayeredExtractor,
                index_id: str, store_dir: str | Path) -> SimilarityIndex:
    """Embed every readable PNG under image_dir and persist atomically."""
    image_dir = Path(image_dir)
    files = sorted(image_dir.glob("*.png"))
    if not files:
        raise InvalidInputError(f"no PNG images under {image_dir}")
    entries = []
    for f in files:
        try:
            emb = embed_image(extractor, load_image(f))
        except Exception as exc:  # unreadable image: skip, keep building
            log.warning("skipping unreadable image %s: %s", f, exc)
            continue
        entries.append(IndexEntry(image_id=f.stem, embedding=emb.astype(np.float32),
                                  path=str(f.resolve())))
    if not entries:
        raise InvalidInputError(f"no readable images under {image_dir}")
    # callables without a digest (test stubs) build unpinned indexes
    digest = extractor.parameter_digest() \
        if hasattr(extractor, "parameter_digest") else "unpinned"
    index = SimilarityIndex(index_id=index_id,
                            extractor_digest=digest,
                            entries=entries,
                            created_at=datetime.datetime.now(
                                datetime.timezone.utc).isoformat())
    _persist_index(index, Path(store_dir))
    return index


def _persist_index(index: SimilarityIndex, store_dir: Path) -> None:
    store_dir.mkdir(parents=True, exist_ok=True)
    final = store_dir / index.index_id
    tmp = Path(tempfile.mkdtemp(dir=store_dir, prefix=f".{index.index_id}."))
    try:
        np.save(tmp / "embeddings.npy", index.embeddings())
        (tmp / "manifest.json").write_text(json.dumps({
            "index_id": index.index_id,
            "extractor_digest": index.extractor_digest,
            "created_at": index.created_at,
            "image_ids": [e.image_id for e in index.entries],
            "paths": [e.path for e in index.entries],
        }, indent=2))
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_index(store_dir: str | Path, index_id: str) -> SimilarityIndex:
    base = Path(store_dir) / index_id
    manifest_path = base / "manifest.json"
    if not manifest_path.is_file():
        raise InvalidInputError(f"no index named {index_id!r} under {store_dir}")
    manifest = json.loads(manifest_path.read_text())
    embs = np.load(base / "embeddings.npy")
    entries = [IndexEntry(image_id=i, embedding=e, path=p)
               for i, e, p in zip(manifest["image_ids"], embs, manifest["paths"])]
    return SimilarityIndex(index_id=manifest["index_id"],
                           extractor_digest=manifest["extractor_digest"],
                           entries=entries, created_at=manifest["created_at"])


def list_indexes(store_dir: str | Path) -> list[dict]:
    out = []
    store_dir = Path(store_dir)
    if not store_dir.is_dir():
        return out
    for d in sorted(store_dir.iterdir()):
        m = d / "manifest.json"
        if m.is_file():
            manifest = json.loads(m.read_text())
            out.append({"index_id": manifest["index_id"],
                        "size": len(manifest["image_ids"]),
                        "extractor_digest": manifest["extractor_digest"],
                        "created_at": manifest["created_at"]})
    return out


@dataclass
class QueryResult:
    results: list[tuple[str, float]]  # (image_id, score), scores non-increasing
    query_digest: str


def query_topk(index: SimilarityIndex, extractor, query_image: np.ndarray,
               k: int) -> QueryResult:
    """Top-k entries by cosine score (clamped to [0, 1]), descending, ties
    broken by image_id ascending. k beyond the index size returns everything."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if isinstance(extractor, LayeredExtractor) \
            and extractor.parameter_digest() != index.extractor_digest:
        raise ConfigurationError(
            "index was built with a different extractor (digest mismatch)")
    q = embed_image(extractor, query_image)
    nq = np.linalg.norm(q)
    embs = index.embeddings().astype(np.float64)
    norms = np.linalg.norm(embs, axis=1)
    if nq == 0 or (norms == 0).any():
        raise InvalidInputError("zero-norm embedding in query or index")
    scores = np.clip(embs @ q / (norms * nq), 0.0, 1.0)
    ranked = sorted(zip((e.image_id for e in index.entries), scores),
                    key=lambda t: (-t[1], t[0]))
    arr = np.round(np.asarray(query_image, dtype=np.float64) * 255).astype(np.uint8)
    digest = hashlib.sha256(arr.tobytes()).hexdigest()
    return QueryResult(results=[(i, float(s)) for i, s in ranked[:k]],
                       query_digest=digest)


# ---------------------------------------------------------------------------
# HTTP service
# ---------------------------------------------------------------------------

@dataclass
class ServiceConfig:
    store_dir: Path
    runs_dir: Path
    extractor_path: Path | None = None
    host: str = "127.0.0.1"
    port: int = 8008


def create_app(config: ServiceConfig):
    app = FastAPI(title="histogan similarity service")
    extractor: LayeredExtractor | None = None
    if config.extractor_path is not None:
        extractor, _ = load_checkpoint(config.extractor_path)
    index_cache: dict[str, SimilarityIndex] = {}
    build_locks: dict[str, threading.Lock] = {}
    locks_guard = threading.Lock()

    def get_index(index_id: str) -> SimilarityIndex:
        if index_id not in index_cache:
            try:
                index_cache[index_id] = load_index(config.store_dir, index_id)
            except InvalidInputError as exc:
                raise HTTPException(status_code=404, detail=str(exc))
        return index_cache[index_id]

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.get("/indexes")
    def indexes():
        return list_indexes(config.store_dir)

    @app.post("/indexes")
    def create_index(payload: dict):
        if extractor is None:
            raise HTTPException(status_code=409, detail="service has no extractor")
        image_dir = payload.get("image_dir")
        index_id = payload.get("index_id")
        if not image_dir or not index_id:
            raise HTTPException(status_code=422,
                                detail="image_dir and index_id required")
        with locks_guard:
            lock = build_locks.setdefault(index_id, threading.Lock())
        with lock:  # one writer per index_id
            try:
                index = build_index(image_dir, extractor, index_id, config.store_dir)
            except InvalidInputError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            index_cache[index_id] = index
        return {"index_id": index_id, "size": len(index.entries)}

    @app.post("/query")
    async def query(image: UploadFile = File(...), index_id: str = Form(...),
                    k: int = Form(5)):
        if extractor is None:
            raise HTTPException(status_code=409, detail="service has no extractor")
        index = get_index(index_id)
        data = await image.read()
        try:
            with Image.open(io.BytesIO(data)) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except Exception:
            raise HTTPException(status_code=400, detail="unreadable image upload")
        try:
            res = query_topk(index, extractor, pixels, k)
        except (InvalidInputError, ConfigurationError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"results": [{"image_id": i, "score": s,
                             "url": f"/images/{index_id}/{i}"}
                            for i, s in res.results],
                "query_digest": res.query_digest}

    @app.get("/images/{index_id}/{image_id}")
    def image_file(index_id: str, image_id: str):
        index = get_index(index_id)
        for e in index.entries:
            if e.image_id == image_id:
                return FileResponse(e.path, media_type="image/png")
        raise HTTPException(status_code=404, detail="unknown image id")

    @app.get("/runs")
    def runs():
        if not config.runs_dir.is_dir():
            return []
        return sorted(d.name for d in config.runs_dir.iterdir()
                      if (d / "reward_trace.csv").is_file())

    @app.get("/runs/{run_id}/rewards")
    def rewards(run_id: str):
        path = config.runs_dir / run_id / "reward_trace.csv"
        if not path.is_file():
            raise HTTPException(status_code=404, detail=f"no trace for run {run_id}")
        trace = RewardTrace.from_csv(path)
        return [{"iter": r.iter, "epoch": r.epoch, "l_d": r.l_d,
                 "reward": r.reward, "l_d_mod": r.l_d_mod, "l_g": r.l_g,
                 "mean_sim": r.mean_sim} for r in trace.rows]

    @app.get("/runs/{run_id}/tsne")
    def tsne(run_id: str):
        path = config.runs_dir / run_id / "tsne.csv"
        if not path.is_file():
            raise HTTPException(status_code=404, detail=f"no t-SNE export for {run_id}")
        return PlainTextResponse(path.read_text(), media_type="text/csv")

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port)
