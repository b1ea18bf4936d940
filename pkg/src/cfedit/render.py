"""Receptive-field geometry, highlight rendering, composites, and record I/O.

Feature cells are mapped back to input-pixel rectangles via the standard
layer-by-layer receptive-field recurrence.  Highlights overlay those
rectangles on the image (soft radial falloff by default, hard boxes for
bit-exact tests); the composite view pastes the distractor's highlighted
patch onto the query, center-aligned, using highlight intensity as per-pixel
alpha.  Explanation records are versioned JSON with stable key order;
rasters are binary PGM/PPM.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, UnsupportedLayerError
from .grids import EditList
from .search import ExplanationResult, SearchConfig

RECORD_VERSION = 1


# ---------------------------------------------------------------------------
# receptive fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReceptiveFieldMap:
    """Per-cell input rectangles for one extractor on one input size."""

    h: int  # feature grid rows
    w: int  # feature grid cols
    field: int  # unclipped field size (pixels, square)
    stride: int  # input-pixel step between adjacent cells
    offset: int  # unclipped start of cell (0,0)'s field (may be negative with padding)
    image_h: int
    image_w: int

    def rect(self, row: int, col: int) -> tuple[int, int, int, int]:
        """Clipped (top, left, bottom, right), bounds inclusive."""
        top = self.offset + row * self.stride
        left = self.offset + col * self.stride
        bottom = top + self.field - 1
        right = left + self.field - 1
        top, left = max(top, 0), max(left, 0)
        bottom, right = min(bottom, self.image_h - 1), min(right, self.image_w - 1)
        if top > bottom or left > right:
            raise ShapeError(f"cell ({row}, {col}) has an empty clipped receptive field")
        return (top, left, bottom, right)

    def rect_center(self, row: int, col: int) -> tuple[float, float]:
        t, l, b, r = self.rect(row, col)
        return ((t + b) / 2.0, (l + r) / 2.0)


def receptive_field_map(extractor_specs, image_h: int, image_w: int) -> ReceptiveFieldMap:
    """Run the field/jump recurrence over conv/pool/relu layers."""
    field, jump, offset = 1, 1, 0
    geom_h, geom_w = image_h, image_w
    for spec in extractor_specs:
        kind = spec.kind
        if kind == "relu":
            continue
        if kind == "conv2d":
            k, s, p = spec.kernel_size, spec.effective_stride(), spec.padding
        elif kind == "maxpool2d":
            k, s, p = spec.window, spec.effective_stride(), 0
        else:
            raise UnsupportedLayerError(
                f"layer kind {kind!r} has no receptive field; extractor must be conv/pool/relu"
            )
        field += (k - 1) * jump
        offset -= p * jump
        jump *= s
        geom_h = (geom_h + 2 * p - k) // s + 1
        geom_w = (geom_w + 2 * p - k) // s + 1
    return ReceptiveFieldMap(geom_h, geom_w, field, jump, offset, image_h, image_w)


def receptive_field(extractor_specs, cell: tuple, image_h: int, image_w: int):
    """Clipped pixel rectangle of one cell (top, left, bottom, right)."""
    rf = receptive_field_map(extractor_specs, image_h, image_w)
    return rf.rect(*cell)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def intensity_map(rf: ReceptiveFieldMap, cells, mode: str = "soft") -> np.ndarray:
    """Per-pixel highlight intensity in [0,1] for weighted cells; overlaps take
    the max.  `cells` is an iterable of ((row, col), weight)."""
    out = np.zeros((rf.image_h, rf.image_w))
    for (row, col), weight in cells:
        if not (0.0 <= weight <= 1.0):
            raise ShapeError(f"cell weight {weight} outside [0, 1]")
        t, l, b, r = rf.rect(row, col)
        if mode == "hard":
            patch = np.full((b - t + 1, r - l + 1), float(weight))
        elif mode == "soft":
            cy, cx = (t + b) / 2.0, (l + r) / 2.0
            ry, rx = (b - t) / 2.0 + 0.5, (r - l) / 2.0 + 0.5
            ys = np.arange(t, b + 1)[:, None]
            xs = np.arange(l, r + 1)[None, :]
            dist = np.sqrt(((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2)
            patch = weight * np.clip(1.0 - dist, 0.0, 1.0)
        else:
            raise ShapeError(f"unknown highlight mode {mode!r}")
        region = out[t : b + 1, l : r + 1]
        np.maximum(region, patch, out=region)
    return out


HIGHLIGHT_RGB = np.array([1.0, 0.1, 0.1])


def render_heatmap(image: np.ndarray, cells, rf: ReceptiveFieldMap, mode: str = "soft") -> np.ndarray:
    """Image with highlighted receptive-field rectangles; geometry preserved.

    Grayscale images blend toward white, color images toward red.
    """
    img = np.asarray(image, dtype=np.float64)
    alpha = intensity_map(rf, cells, mode)
    if img.ndim == 2 or (img.ndim == 3 and img.shape[2] == 1):
        flat = img if img.ndim == 2 else img[:, :, 0]
        out = (1.0 - alpha) * flat + alpha * 1.0
        return out if img.ndim == 2 else out[:, :, None]
    return (1.0 - alpha[:, :, None]) * img + alpha[:, :, None] * HIGHLIGHT_RGB


def render_composite(
    query: np.ndarray,
    distractor: np.ndarray,
    edit: tuple,
    rf_query: ReceptiveFieldMap,
    rf_distractor: ReceptiveFieldMap,
    mode: str = "soft",
) -> np.ndarray:
    """Paste the distractor's highlighted patch onto the query.

    The two receptive-field rectangle centers are aligned; the highlight
    intensity over the distractor is the per-pixel alpha.  Source pixels that
    fall outside either image are skipped.
    """
    q = np.asarray(query, dtype=np.float64)
    dimg = np.asarray(distractor, dtype=np.float64)
    if q.shape != dimg.shape:
        raise ShapeError(f"query shape {q.shape} != distractor shape {dimg.shape}")
    i, j, i2, j2 = edit
    cy_q, cx_q = rf_query.rect_center(i, j)
    cy_d, cx_d = rf_distractor.rect_center(i2, j2)
    dy = int(round(cy_q - cy_d))
    dx = int(round(cx_q - cx_d))
    alpha = intensity_map(rf_distractor, [((i2, j2), 1.0)], mode)

    out = q.copy()
    h, w = alpha.shape
    # destination window [dy, dy+h) x [dx, dx+w), clipped to the query image
    dst_t, dst_l = max(dy, 0), max(dx, 0)
    dst_b, dst_r = min(dy + h, q.shape[0]), min(dx + w, q.shape[1])
    if dst_t >= dst_b or dst_l >= dst_r:
        return out
    src_t, src_l = dst_t - dy, dst_l - dx
    src_b, src_r = dst_b - dy, dst_r - dx
    a = alpha[src_t:src_b, src_l:src_r]
    if q.ndim == 3:
        a = a[:, :, None]
    out[dst_t:dst_b, dst_l:dst_r] = (1.0 - a) * q[dst_t:dst_b, dst_l:dst_r] + a * dimg[
        src_t:src_b, src_l:src_r
    ]
    return out


@dataclass(frozen=True)
class RenderedExplanation:
    query_heatmap: np.ndarray
    distractor_heatmap: np.ndarray
    composite: np.ndarray
    result: ExplanationResult


def render_explanation(
    query_image, distractor_image, result: ExplanationResult, rf: ReceptiveFieldMap, mode="soft"
) -> RenderedExplanation:
    """Standard renders for one result: per-edit weights decay with rank."""
    n = max(len(result.edits), 1)
    weights = [1.0 - 0.5 * k / n for k in range(len(result.edits))]
    q_cells = [((i, j), wt) for (i, j, _, _), wt in zip(result.edits, weights)]
    d_cells = [((i2, j2), wt) for (_, _, i2, j2), wt in zip(result.edits, weights)]
    qh = render_heatmap(query_image, q_cells, rf, mode)
    dh = render_heatmap(distractor_image, d_cells, rf, mode)
    comp = np.asarray(query_image, dtype=np.float64).copy()
    for quad in result.edits:
        comp = render_composite(comp, distractor_image, quad, rf, rf, mode)
    return RenderedExplanation(qh, dh, comp, result)


# ---------------------------------------------------------------------------
# rasters: binary PGM (P5) / PPM (P6), maxval 255
# ---------------------------------------------------------------------------

def write_raster(path: str, raster: np.ndarray):
    arr = np.asarray(raster, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if np.any(arr < 0) or np.any(arr > 1):
        raise ShapeError("raster values must lie in [0, 1]")
    data = np.round(arr * 255.0).astype(np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"raster must be HxW or HxWx3, got shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_raster(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    channels = 3 if parts[0] == b"P6" else 1
    data = np.frombuffer(parts[4][: h * w * channels], dtype=np.uint8)
    if data.size != h * w * channels:
        raise FormatError(f"{path}: truncated pixel data")
    arr = data.reshape((h, w, 3) if channels == 3 else (h, w)).astype(np.float64) / 255.0
    return arr


# ---------------------------------------------------------------------------
# explanation records
# ---------------------------------------------------------------------------

def result_to_record(
    result: ExplanationResult,
    rf_query: ReceptiveFieldMap | None = None,
    rf_distractor: ReceptiveFieldMap | None = None,
    config: SearchConfig | None = None,
    extra: dict | None = None,
) -> dict:
    edits = []
    for (i, j, i2, j2) in result.edits:
        entry = {"cell": [i, j], "source": [i2, j2]}
        if rf_query is not None:
            entry["cell_rect"] = list(rf_query.rect(i, j))
        if rf_distractor is not None:
            entry["source_rect"] = list(rf_distractor.rect(i2, j2))
        edits.append(entry)
    record = {
        "record_version": RECORD_VERSION,
        "query_id": result.query_id,
        "distractor_id": result.distractor_id,
        "query_class": result.query_class,
        "target_class": result.target_class,
        "status": result.status,
        "grid": {"h": result.edits.h, "w": result.edits.w},
        "edits": edits,
        "trajectory": [[a, b] for a, b in result.trajectory],
    }
    if config is not None:
        record["config"] = config.to_json()
    if extra:
        record.update(extra)
    return record


def record_to_result(record: dict) -> ExplanationResult:
    for key in ("record_version", "grid", "edits", "trajectory", "status"):
        if key not in record:
            raise FormatError(f"record missing field {key!r}")
    if record["record_version"] != RECORD_VERSION:
        raise FormatError(f"unsupported record_version {record['record_version']!r}")
    g = record["grid"]
    quads = tuple(tuple(e["cell"]) + tuple(e["source"]) for e in record["edits"])
    return ExplanationResult(
        EditList(quads, g["h"], g["w"]),
        tuple((a, b) for a, b in record["trajectory"]),
        record["status"],
        record["query_class"],
        record["target_class"],
        record.get("query_id", ""),
        record.get("distractor_id", ""),
    )


def write_explanation(
    result: ExplanationResult,
    renders: RenderedExplanation | None,
    out_dir: str,
    rf_query: ReceptiveFieldMap | None = None,
    rf_distractor: ReceptiveFieldMap | None = None,
    config: SearchConfig | None = None,
    prefix: str = "explanation",
    extra: dict | None = None,
) -> dict:
    """Write record JSON plus rasters; returns {name: path}."""
    os.makedirs(out_dir, exist_ok=True)
    record = result_to_record(result, rf_query, rf_distractor, config, extra)
    paths = {"record": os.path.join(out_dir, f"{prefix}.json")}
    with open(paths["record"], "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
    if renders is not None:
        for name, raster in (
            ("query_heatmap", renders.query_heatmap),
            ("distractor_heatmap", renders.distractor_heatmap),
            ("composite", renders.composite),
        ):
            arr = np.asarray(raster)
            ext = "ppm" if arr.ndim == 3 and arr.shape[-1] == 3 else "pgm"
            paths[name] = os.path.join(out_dir, f"{prefix}_{name}.{ext}")
            write_raster(paths[name], raster)
    return paths


def read_explanation(record_path: str) -> tuple[ExplanationResult, dict]:
    try:
        with open(record_path) as fh:
            record = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{record_path}: invalid JSON: {exc}") from exc
    except OSError as exc:
        raise FormatError(f"{record_path}: {exc}") from exc
    return record_to_result(record), record
