"""Quantitative analysis of explanations.

Covers the measurement procedures used to audit the search: edit-count
statistics, agreement of the selected query cell across distractors (same
class vs cross class), fidelity of the relaxed solver against exhaustive
search, and hit rates of selected regions against segmentation masks and
keypoint annotations.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .grids import FeatureGrid
from .network import ModelBundle, forward_features
from .relaxed import RelaxOptConfig, best_edit_relaxed
from .render import ReceptiveFieldMap, read_raster
from .search import ExplanationResult, best_edit_exhaustive


@dataclass(frozen=True)
class Keypoint:
    name: str
    x: float
    y: float
    visible: bool


@dataclass
class ImageAnnotation:
    mask: np.ndarray  # (H, W) bool segmentation
    keypoints: list = field(default_factory=list)


@dataclass
class AnnotationSet:
    """Per-image segmentation masks and named keypoints, keyed by image id."""

    entries: dict = field(default_factory=dict)

    def __contains__(self, image_id):
        return image_id in self.entries

    def __getitem__(self, image_id) -> ImageAnnotation:
        return self.entries[image_id]

    def add(self, image_id: str, mask: np.ndarray, keypoints=()):
        mask = np.asarray(mask, dtype=bool)
        for kp in keypoints:
            if kp.visible and not (0 <= kp.y < mask.shape[0] and 0 <= kp.x < mask.shape[1]):
                raise ShapeError(f"visible keypoint {kp.name!r} at ({kp.x}, {kp.y}) outside image")
        self.entries[image_id] = ImageAnnotation(mask, list(keypoints))

    def save(self, path: str):
        """Index JSON plus one PGM mask per image, in path's directory."""
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        from .render import write_raster

        index = {}
        for image_id, ann in sorted(self.entries.items()):
            mask_name = f"mask_{image_id}.pgm"
            write_raster(os.path.join(os.path.dirname(path) or ".", mask_name), ann.mask.astype(float))
            index[image_id] = {
                "mask": mask_name,
                "keypoints": [[k.name, k.x, k.y, k.visible] for k in ann.keypoints],
            }
        with open(path, "w") as fh:
            json.dump({"annotation_version": 1, "images": index}, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "AnnotationSet":
        with open(path) as fh:
            data = json.load(fh)
        if data.get("annotation_version") != 1:
            raise FormatError("unsupported annotation_version")
        out = cls()
        base = os.path.dirname(path) or "."
        for image_id, entry in data["images"].items():
            mask = read_raster(os.path.join(base, entry["mask"])) > 0.5
            kps = [Keypoint(n, float(x), float(y), bool(v)) for n, x, y, v in entry["keypoints"]]
            out.add(image_id, mask, kps)
        return out


@dataclass
class MetricReport:
    name: str
    value: float | None
    count: int
    samples: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "count": self.count,
            "samples": self.samples,
            "extras": self.extras,
        }


# ---------------------------------------------------------------------------
# edit-count statistics
# ---------------------------------------------------------------------------

def avg_edit_count(results) -> MetricReport:
    results = list(results)
    if not results:
        raise ShapeError("no results supplied")
    flipped = [r.edit_count for r in results if r.status == "flipped"]
    flip_rate = len(flipped) / len(results)
    extras = {"flip_rate": flip_rate, "exhausted": len(results) - len(flipped)}
    if not flipped:
        return MetricReport("avg_edit_count", None, len(results), extras=extras)
    counts = np.array(flipped)
    hist = {}
    for c in counts:
        hist[int(c)] = hist.get(int(c), 0) + 1
    extras.update({"median": float(np.median(counts)), "histogram": hist})
    return MetricReport(
        "avg_edit_count",
        float(counts.mean()),
        len(results),
        samples=[r.edit_count if r.status == "flipped" else None for r in results],
        extras=extras,
    )


# ---------------------------------------------------------------------------
# query-cell agreement across distractors
# ---------------------------------------------------------------------------

def selected_query_cell(model: ModelBundle, query_image, distractor_image, target_class) -> int:
    """Query cell of the single best edit toward `target_class`."""
    F = forward_features(model, query_image)
    F2 = forward_features(model, distractor_image)
    i, _, _ = best_edit_exhaustive(model, F, F2, target_class)
    return i


def _pairwise_agreement(cells) -> tuple[int, int]:
    agree = total = 0
    for a in range(len(cells)):
        for b in range(a + 1, len(cells)):
            total += 1
            agree += cells[a] == cells[b]
    return agree, total


def agreement_same_class(model: ModelBundle, samples) -> MetricReport:
    """Agreement of the selected query cell across same-class distractors.

    `samples` is a list of (query_image, target_class, [distractor_images]).
    Queries with fewer than 2 distractors are skipped with a note.
    """
    agree = total = 0
    per_query = []
    skipped = 0
    for query_image, target_class, distractors in samples:
        if len(distractors) < 2:
            skipped += 1
            per_query.append(None)
            continue
        cells = [selected_query_cell(model, query_image, d, target_class) for d in distractors]
        a, t = _pairwise_agreement(cells)
        agree += a
        total += t
        per_query.append(a / t)
    if total == 0:
        raise ShapeError("no query had at least 2 usable distractors")
    return MetricReport(
        "agreement_same_class",
        agree / total,
        len(samples),
        samples=per_query,
        extras={"pairs": total, "skipped": skipped},
    )


def agreement_cross_class(model: ModelBundle, samples) -> MetricReport:
    """As agreement_same_class, with distractors drawn from different classes.

    `samples` is a list of (query_image, [(distractor_image, target_class)]);
    each query's distractors must span at least 2 classes.
    """
    agree = total = 0
    per_query = []
    for query_image, distractors in samples:
        classes = {c for _, c in distractors}
        if len(classes) < 2:
            raise ShapeError("cross-class agreement needs distractors from at least 2 classes")
        cells = [selected_query_cell(model, query_image, d, c) for d, c in distractors]
        a, t = _pairwise_agreement(cells)
        agree += a
        total += t
        per_query.append(a / t)
    if total == 0:
        raise ShapeError("no usable queries supplied")
    return MetricReport(
        "agreement_cross_class", agree / total, len(samples), samples=per_query, extras={"pairs": total}
    )


# ---------------------------------------------------------------------------
# relaxed-vs-exhaustive fidelity
# ---------------------------------------------------------------------------

def relaxation_fidelity(
    model: ModelBundle, instances, opt: RelaxOptConfig = RelaxOptConfig(), use_relaxed=True
) -> MetricReport:
    """Exact-match rate and discrete probability ratio of the relaxed solver
    against exhaustive search.

    `instances` is a list of (F, F2, target_class, excluded_query,
    excluded_source).  `use_relaxed=False` self-compares exhaustive search
    (a calibration identity).
    """
    matches = []
    ratios = []
    for F, F2, target_class, exq, exs in instances:
        ei, ej, escore = best_edit_exhaustive(model, F, F2, target_class, exq, exs)
        if use_relaxed:
            ri, rj, rscore, _ = best_edit_relaxed(model, F, F2, target_class, exq, exs, opt)
        else:
            ri, rj, rscore = ei, ej, escore
        matches.append((ri, rj) == (ei, ej))
        ratios.append(float(np.exp(rscore - escore)))
    if not matches:
        raise ShapeError("no instances supplied")
    return MetricReport(
        "relaxation_fidelity",
        float(np.mean(matches)),
        len(matches),
        samples=[{"match": bool(m), "prob_ratio": r} for m, r in zip(matches, ratios)],
        extras={"match_rate": float(np.mean(matches)), "mean_prob_ratio": float(np.mean(ratios))},
    )


# ---------------------------------------------------------------------------
# annotation hit rates
# ---------------------------------------------------------------------------

def _nearest_keypoint(kps, cy, cx):
    best = None
    best_d = np.inf
    for kp in kps:
        if not kp.visible:
            continue
        dist = np.hypot(kp.y - cy, kp.x - cx)
        if dist < best_d:
            best, best_d = kp, dist
    return best, best_d


def region_annotation_hit_rate(
    results,
    annotations: AnnotationSet,
    rf_query: ReceptiveFieldMap,
    rf_distractor: ReceptiveFieldMap,
    radius: float | None = None,
) -> MetricReport:
    """Segmentation and keypoint hit rates of selected cells.

    Rates reported: rectangle-center-in-mask for query and distractor cells,
    center-within-`radius`-of-a-visible-keypoint for both, and the fraction of
    edits whose query and distractor rectangles are nearest to the same
    keypoint name.  Default radius: half the receptive-field stride.
    """
    if radius is None:
        radius = rf_query.stride / 2.0
    seg_q, seg_d, kp_q, kp_d, same_kp = [], [], [], [], []
    skipped = 0
    per_edit = []
    for result in results:
        if result.query_id not in annotations or result.distractor_id not in annotations:
            skipped += 1
            continue
        ann_q = annotations[result.query_id]
        ann_d = annotations[result.distractor_id]
        for (i, j, i2, j2) in result.edits:
            cy_q, cx_q = rf_query.rect_center(i, j)
            cy_d, cx_d = rf_distractor.rect_center(i2, j2)
            seg_q.append(bool(ann_q.mask[int(round(cy_q)), int(round(cx_q))]))
            seg_d.append(bool(ann_d.mask[int(round(cy_d)), int(round(cx_d))]))
            nq, dq = _nearest_keypoint(ann_q.keypoints, cy_q, cx_q)
            nd, dd = _nearest_keypoint(ann_d.keypoints, cy_d, cx_d)
            kp_q.append(nq is not None and dq <= radius)
            kp_d.append(nd is not None and dd <= radius)
            same_kp.append(nq is not None and nd is not None and nq.name == nd.name)
            per_edit.append(
                {
                    "query_id": result.query_id,
                    "distractor_id": result.distractor_id,
                    "seg_query": seg_q[-1],
                    "seg_distractor": seg_d[-1],
                    "kp_query": kp_q[-1],
                    "kp_distractor": kp_d[-1],
                    "same_keypoint": same_kp[-1],
                }
            )
    if not seg_q:
        raise ShapeError("no edits with annotations available")

    def rate(xs):
        return float(np.mean(xs))

    extras = {
        "seg_query": rate(seg_q),
        "seg_distractor": rate(seg_d),
        "kp_query": rate(kp_q),
        "kp_distractor": rate(kp_d),
        "same_keypoint": rate(same_kp),
        "radius": radius,
        "skipped_results": skipped,
    }
    return MetricReport(
        "region_annotation_hit_rate", extras["seg_query"], len(seg_q), samples=per_edit, extras=extras
    )


# ---------------------------------------------------------------------------
# distractor selection policies
# ---------------------------------------------------------------------------

def pick_distractor_class_random(class_count: int, query_class: int, rng) -> int:
    choices = [c for c in range(class_count) if c != query_class]
    return int(rng.choice(choices))

def pick_distractor_class_nearest(attributes: dict, query_class: int) -> int:
    """Class whose mean attribute vector is nearest to the query class's."""
    ref = np.asarray(attributes[query_class], dtype=np.float64)
    best, best_d = None, np.inf
    for cls in sorted(attributes):
        if cls == query_class:
            continue
        dist = float(np.linalg.norm(np.asarray(attributes[cls], dtype=np.float64) - ref))
        if dist < best_d:
            best, best_d = cls, dist
    if best is None:
        raise ShapeError("attribute table needs at least 2 classes")
    return best


def pick_distractor_image_random(candidate_indices, rng) -> int:
    candidates = list(candidate_indices)
    if not candidates:
        raise ShapeError("no candidate distractor images")
    return int(rng.choice(candidates))


def pick_distractor_image_nearest_keypoints(
    annotations: AnnotationSet, query_id: str, candidate_ids
) -> str:
    """Candidate whose visible keypoints are closest to the query's, by mean
    distance over shared keypoint names."""
    q = {k.name: (k.y, k.x) for k in annotations[query_id].keypoints if k.visible}
    best, best_d = None, np.inf
    for cid in candidate_ids:
        c = {k.name: (k.y, k.x) for k in annotations[cid].keypoints if k.visible}
        shared = sorted(set(q) & set(c))
        if not shared:
            continue
        dist = float(np.mean([np.hypot(q[n][0] - c[n][0], q[n][1] - c[n][1]) for n in shared]))
        if dist < best_d:
            best, best_d = cid, dist
    if best is None:
        raise ShapeError("no candidate shares visible keypoints with the query")
    return best


def load_attribute_table(path: str) -> dict:
    """Per-class attribute vectors: JSON {class index: [floats]}."""
    with open(path) as fh:
        data = json.load(fh)
    return {int(k): [float(x) for x in v] for k, v in data.items()}
