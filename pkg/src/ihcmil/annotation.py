"""HTTP annotation service: serve tiles for weak labeling, persist labels.

Labels are event-sourced into an append-only JSONL log; undo appends a
tombstone record instead of deleting anything, so the effective label state
is always a pure fold over the log.
"""

from __future__ import annotations

import io
import json
import os
import threading
import time
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .errors import NothingToUndo
from .slide_io import (
    CohortManifest,
    SlideImage,
    TileRecord,
    load_slide,
    read_cohort,
    segment_tissue,
    tile_pixels,
    tile_slide,
)

PAGE_SIZE = 50


class LabelLog:
    """Append-only JSONL label log with tombstone undo.

    A single lock serializes writers; every append is flushed and fsynced
    before the HTTP response goes out.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: list[dict] = []
        self._next_seq = 0
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._records.append(rec)
                    self._next_seq = max(self._next_seq, rec["seq"] + 1)

    def _append(self, rec: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._records.append(rec)

    def append_label(self, slide: str, x: int, y: int, label: str, annotator: str) -> dict:
        with self._lock:
            rec = {
                "seq": self._next_seq,
                "slide": slide,
                "x": x,
                "y": y,
                "label": label,
                "annotator": annotator,
                "timestamp": time.time(),
            }
            self._next_seq += 1
            self._append(rec)
            return rec

    def undo_last(self, annotator: str) -> dict:
        """Tombstone the annotator's most recent still-live label record."""
        with self._lock:
            dead = {r["target_seq"] for r in self._records if r.get("undo")}
            target = None
            for rec in reversed(self._records):
                if rec.get("undo"):
                    continue
                if rec["annotator"] == annotator and rec["seq"] not in dead:
                    target = rec
                    break
            if target is None:
                raise NothingToUndo(f"no live label record for annotator {annotator!r}")
            rec = {
                "seq": self._next_seq,
                "undo": True,
                "target_seq": target["seq"],
                "annotator": annotator,
                "timestamp": time.time(),
            }
            self._next_seq += 1
            self._append(rec)
            return rec

    def effective_labels(self) -> dict[tuple[str, int, int], dict]:
        """Fold the log: last live label per tile wins."""
        dead = {r["target_seq"] for r in self._records if r.get("undo")}
        state: dict[tuple[str, int, int], dict] = {}
        for rec in self._records:
            if rec.get("undo") or rec["seq"] in dead:
                continue
            state[(rec["slide"], rec["x"], rec["y"])] = rec
        return state


def export_labels(log: LabelLog, path: str | Path) -> int:
    """Resolve the log to one label per tile and emit `labels.jsonl`."""
    state = log.effective_labels()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for key in sorted(state):
            rec = state[key]
            fh.write(
                json.dumps(
                    {
                        "slide_id": rec["slide"],
                        "grid_x": rec["x"],
                        "grid_y": rec["y"],
                        "label": rec["label"],
                        "annotator": rec["annotator"],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return len(state)


def read_label_snapshot(path: str | Path) -> dict[tuple[str, int, int], str]:
    labels = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            labels[(rec["slide_id"], rec["grid_x"], rec["grid_y"])] = rec["label"]
    return labels


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": code, "message": message})


def create_app(
    cohort_dir: str | Path,
    tile_size: int = 128,
    min_tissue_frac: float = 0.05,
    labels_path: str | Path | None = None,
    static_dir: str | Path | None = None,
) -> FastAPI:
    """Build the annotation app over a tiled cohort directory."""
    cohort_dir = Path(cohort_dir)
    manifest: CohortManifest = read_cohort(cohort_dir)
    labels_path = Path(labels_path) if labels_path else cohort_dir / "labels.log.jsonl"
    log = LabelLog(labels_path)

    slides: dict[str, SlideImage] = {}
    tiles: dict[tuple[str, int, int], TileRecord] = {}
    tiles_by_slide: dict[str, list[TileRecord]] = {}
    for patient in manifest.patients:
        for rel in patient.slides:
            slide = load_slide(cohort_dir / rel)
            slides[slide.slide_id] = slide
            recs = tile_slide(slide, segment_tissue(slide), tile_size, min_tissue_frac)
            tiles_by_slide[slide.slide_id] = recs
            for rec in recs:
                tiles[rec.key()] = rec

    png_cache: dict[tuple[str, int, int], bytes] = {}

    app = FastAPI(title="ihcmil annotation service")
    app.state.label_log = log
    app.state.n_tiles = len(tiles)

    @app.get("/api/cohort")
    def get_cohort():
        return {
            "version": 1,
            "patients": [
                {
                    "id": p.id,
                    "response": p.response,
                    "slides": [Path(rel).stem for rel in p.slides],
                }
                for p in manifest.patients
            ],
            "tile_size": tile_size,
            "n_tiles": len(tiles),
        }

    @app.get("/api/tiles")
    def get_tiles(slide: str | None = None, status: str = "all", page: int = 0):
        if slide is not None and slide not in tiles_by_slide:
            return _error(404, "unknown_slide", f"no slide {slide!r}")
        if status not in ("all", "labeled", "unlabeled"):
            return _error(400, "bad_status", f"bad status {status!r}")
        state = log.effective_labels()
        pool = (
            tiles_by_slide[slide]
            if slide is not None
            else [r for recs in tiles_by_slide.values() for r in recs]
        )
        rows = []
        for rec in pool:
            labeled = rec.key() in state
            if status == "labeled" and not labeled:
                continue
            if status == "unlabeled" and labeled:
                continue
            rows.append(
                {
                    "slide": rec.slide_id,
                    "x": rec.grid_x,
                    "y": rec.grid_y,
                    "tissue_fraction": rec.tissue_fraction,
                    "label": state[rec.key()]["label"] if labeled else None,
                    "image_url": f"/api/tile/{rec.slide_id}/{rec.grid_x}/{rec.grid_y}/image.png",
                }
            )
        # unlabeled first, stable within groups
        rows.sort(key=lambda r: (r["label"] is not None, r["slide"], r["y"], r["x"]))
        start = page * PAGE_SIZE
        return {
            "total": len(rows),
            "page": page,
            "page_size": PAGE_SIZE,
            "tiles": rows[start : start + PAGE_SIZE],
        }

    @app.get("/api/tile/{slide}/{x}/{y}/image.png")
    def get_tile_image(slide: str, x: int, y: int):
        key = (slide, x, y)
        if key not in tiles:
            return _error(404, "unknown_tile", f"no tile {key}")
        if key not in png_cache:
            px = tile_pixels(slides[slide], tiles[key])
            buf = io.BytesIO()
            Image.fromarray(px, mode="RGB").save(buf, format="PNG")
            png_cache[key] = buf.getvalue()
        return Response(content=png_cache[key], media_type="image/png")

    @app.post("/api/label")
    async def post_label(request: Request):
        body = await request.json()
        try:
            slide, x, y = body["slide"], int(body["x"]), int(body["y"])
            label = body["label"]
            annotator = body.get("annotator", "anonymous")
        except (KeyError, TypeError, ValueError):
            return _error(400, "bad_request", "need slide, x, y, label")
        if label not in ("tumor", "non_tumor"):
            return _error(400, "bad_label", f"bad label {label!r}")
        if (slide, x, y) not in tiles:
            return _error(404, "unknown_tile", f"no tile ({slide}, {x}, {y})")
        rec = log.append_label(slide, x, y, label, annotator)
        return {"ok": True, "seq": rec["seq"]}

    @app.post("/api/undo")
    async def post_undo(request: Request):
        body = await request.json()
        annotator = body.get("annotator", "anonymous")
        try:
            rec = log.undo_last(annotator)
        except NothingToUndo as exc:
            return _error(409, "nothing_to_undo", str(exc))
        return {"ok": True, "seq": rec["seq"], "target_seq": rec["target_seq"]}

    @app.get("/api/progress")
    def get_progress():
        return {"labeled": len(log.effective_labels()), "total": len(tiles)}

    if static_dir is None:
        candidate = Path(__file__).resolve().parents[3] / "frontend" / "dist"
        static_dir = candidate if candidate.exists() else None
    if static_dir is not None and Path(static_dir).exists():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app


def serve(
    cohort_dir: str | Path,
    port: int = 8080,
    host: str = "127.0.0.1",
    tile_size: int = 128,
    min_tissue_frac: float = 0.05,
    labels_path: str | Path | None = None,
) -> None:
    import uvicorn

    app = create_app(cohort_dir, tile_size, min_tissue_frac, labels_path)
    uvicorn.run(app, host=host, port=port, log_level="warning")
