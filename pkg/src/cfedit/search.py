"""Best-edit search over cell pairs and the greedy sequential edit loop.

One search step tries every non-excluded (query cell, distractor cell) pair,
scores the edited grid by the decision head's log-probability for the target
class, and keeps the best pair (ties broken by smallest query index, then
smallest source index).  The greedy loop repeats this on the evolving grid,
excluding already-used cells, until the model's decision flips to the target
class or the candidate budget runs out.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ExhaustedError, ShapeError
from .grids import EditList, FeatureGrid, single_edit
from .network import ModelBundle, forward_features, head_logprobs, head_logprobs_batch


@dataclass(frozen=True)
class SearchConfig:
    exclusion_policy: str = "query-and-distractor-cells"  # or "query-cells-only"
    max_edits: int | None = None  # default: hw
    strategy: str = "exhaustive"  # or "relaxed"
    stop_rule: str = "argmax"  # or "pairwise" (g_c' > g_c)
    relax: "object" = None  # RelaxOptConfig when strategy == "relaxed"

    def __post_init__(self):
        if self.exclusion_policy not in ("query-cells-only", "query-and-distractor-cells"):
            raise ValueError(f"unknown exclusion policy {self.exclusion_policy!r}")
        if self.strategy not in ("exhaustive", "relaxed"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.stop_rule not in ("argmax", "pairwise"):
            raise ValueError(f"unknown stop rule {self.stop_rule!r}")
        if self.max_edits is not None and self.max_edits <= 0:
            raise ValueError("max_edits must be positive")

    def to_json(self) -> dict:
        out = {
            "exclusion_policy": self.exclusion_policy,
            "max_edits": self.max_edits,
            "strategy": self.strategy,
            "stop_rule": self.stop_rule,
        }
        if self.relax is not None:
            out["relax"] = self.relax.to_json()
        return out


@dataclass(frozen=True)
class ExplanationResult:
    """Ordered edits, the log-prob trajectory around them, and how the loop ended."""

    edits: EditList
    trajectory: tuple  # (len(edits)+1) pairs of (logp_original_class, logp_target_class)
    status: str  # "flipped" | "exhausted"
    query_class: int
    target_class: int
    query_id: str = ""
    distractor_id: str = ""

    def __post_init__(self):
        traj = tuple((float(a), float(b)) for a, b in self.trajectory)
        if len(traj) != len(self.edits) + 1:
            raise ShapeError("trajectory must have one entry per edit plus the pre-edit state")
        if self.status not in ("flipped", "exhausted"):
            raise ShapeError(f"unknown status {self.status!r}")
        object.__setattr__(self, "trajectory", traj)

    @property
    def edit_count(self) -> int:
        return len(self.edits)


def best_edit_exhaustive(
    model: ModelBundle,
    F: FeatureGrid,
    F2: FeatureGrid,
    target_class: int,
    excluded_query=(),
    excluded_source=(),
) -> tuple[int, int, float]:
    """Single edit maximizing the target-class log-probability over all
    non-excluded (query cell, source cell) pairs. Returns (i, j2, score)."""
    if (F.h, F.w, F.d) != (F2.h, F2.w, F2.d):
        raise ShapeError("query and distractor grids must share geometry")
    n = F.cells
    scores = candidate_scores(model, F, F2, target_class)
    mask = np.zeros((n, n), dtype=bool)
    if len(excluded_query):
        mask[np.fromiter(excluded_query, dtype=int), :] = True
    if len(excluded_source):
        mask[:, np.fromiter(excluded_source, dtype=int)] = True
    if mask.all():
        raise ExhaustedError("all candidate edits are excluded")
    scores = np.where(mask, -np.inf, scores)
    flat = int(np.argmax(scores))  # first occurrence: smallest i, then smallest j2
    i, j2 = divmod(flat, n)
    return i, j2, float(scores[i, j2])


def candidate_scores(
    model: ModelBundle, F: FeatureGrid, F2: FeatureGrid, target_class: int
) -> np.ndarray:
    """Target-class log-probability of every single edit, as an (hw, hw) array
    indexed by (query cell, source cell)."""
    n = F.cells
    grids = np.broadcast_to(F.values, (n, n) + F.values.shape).copy()
    rows = np.arange(n)
    grids[rows[:, None], rows[None, :], rows[:, None], :] = F2.values[None, :, :]
    out = head_logprobs_batch(model, grids.reshape(n * n, n, F.d))
    return out[:, target_class].reshape(n, n)


def greedy_counterfactual(
    model: ModelBundle,
    query_image: np.ndarray,
    distractor_image: np.ndarray,
    target_class: int,
    config: SearchConfig = SearchConfig(),
    query_id: str = "",
    distractor_id: str = "",
) -> ExplanationResult:
    """Edit f(query) toward f(distractor) until the decision flips to
    `target_class` (Greedy Sequential Search)."""
    F = forward_features(model, query_image)
    F2 = forward_features(model, distractor_image)
    lp = head_logprobs(model, F)
    query_class = lp.argmax()
    distractor_class = head_logprobs(model, F2).argmax()
    if distractor_class != target_class:
        warnings.warn(
            f"distractor is predicted as class {distractor_class}, "
            f"not the requested target class {target_class}",
            stacklevel=2,
        )

    h, w = F.h, F.w
    if query_class == target_class:
        return ExplanationResult(
            EditList((), h, w),
            ((lp[query_class], lp[target_class]),),
            "flipped",
            query_class,
            target_class,
            query_id,
            distractor_id,
        )

    best_edit = _best_edit_fn(config)
    max_edits = config.max_edits if config.max_edits is not None else F.cells
    excluded_q: list[int] = []
    excluded_s: list[int] = []
    quads = []
    trajectory = [(lp[query_class], lp[target_class])]
    current = F
    status = "exhausted"
    while len(quads) < max_edits:
        try:
            i, j2, _score = best_edit(model, current, F2, target_class, excluded_q, excluded_s)
        except ExhaustedError:
            break
        current = single_edit(current, F2, i, j2)
        quads.append((i // w, i % w, j2 // w, j2 % w))
        excluded_q.append(i)
        if config.exclusion_policy == "query-and-distractor-cells":
            excluded_s.append(j2)
        lp = head_logprobs(model, current)
        trajectory.append((lp[query_class], lp[target_class]))
        if _flipped(lp, query_class, target_class, config.stop_rule):
            status = "flipped"
            break

    return ExplanationResult(
        EditList(tuple(quads), h, w),
        tuple(trajectory),
        status,
        query_class,
        target_class,
        query_id,
        distractor_id,
    )


def _flipped(lp, query_class, target_class, stop_rule) -> bool:
    if stop_rule == "pairwise":
        return lp[target_class] > lp[query_class]
    return lp.argmax() == target_class


def _best_edit_fn(config: SearchConfig):
    if config.strategy == "exhaustive":
        return best_edit_exhaustive
    from .relaxed import RelaxOptConfig, best_edit_relaxed

    opt = config.relax if config.relax is not None else RelaxOptConfig()

    def relaxed(model, F, F2, target_class, excluded_q, excluded_s):
        i, j2, score, _traj = best_edit_relaxed(
            model, F, F2, target_class, excluded_q, excluded_s, opt
        )
        return i, j2, score

    return relaxed
