"""Continuous relaxation of the best-edit problem.

The binary gate and permutation alignment are relaxed to a simplex vector and
a row-stochastic matrix, both parameterized through softmax so the constraints
hold by construction.  Plain gradient ascent maximizes the target-class
log-probability of the blended grid minus entropy penalties that sharpen the
distributions; the result is rounded back to a single discrete edit whose
score is re-evaluated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ExhaustedError, ShapeError
from .grids import FeatureGrid
from .network import ModelBundle, head_input_gradient, head_logprobs
from .grids import single_edit

MASK_LOGIT = -1e9


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_penalty(p: np.ndarray) -> float:
    """Shannon entropy -sum p ln p with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-terms.sum())


@dataclass(frozen=True)
class RelaxOptConfig:
    learning_rate: float = 0.3
    max_steps: int = 300
    entropy_weight_gate: float = 0.1
    entropy_weight_align: float = 0.1
    sharpness_stop: float = 0.95
    gate_align_entropy: bool = True  # weight each row's entropy term by its gate mass

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.entropy_weight_gate < 0 or self.entropy_weight_align < 0:
            raise ValueError("entropy weights must be nonnegative")
        if not (0 < self.sharpness_stop <= 1):
            raise ValueError("sharpness_stop must lie in (0, 1]")

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "max_steps": self.max_steps,
            "entropy_weight_gate": self.entropy_weight_gate,
            "entropy_weight_align": self.entropy_weight_align,
            "sharpness_stop": self.sharpness_stop,
            "gate_align_entropy": self.gate_align_entropy,
        }


def relaxed_objective_and_grads(
    model: ModelBundle,
    F: FeatureGrid,
    F2: FeatureGrid,
    target_class: int,
    alpha: np.ndarray,
    M: np.ndarray,
    opt: RelaxOptConfig,
):
    """Objective value and its analytic gradients w.r.t. the logits (alpha, M).

    objective = g_target(blend) - w_a * H(a) - w_P * sum_i r_i * H(p_i)
    where a = softmax(alpha), p_i = softmax(M[i]), and r_i is a_i when the
    align-entropy term is gate-weighted, else 1.
    """
    n, d = F.values.shape
    a = softmax(alpha)
    P = softmax(M)
    PF2 = P @ F2.values
    blended = FeatureGrid(F.h, F.w, F.d, (1.0 - a[:, None]) * F.values + a[:, None] * PF2)

    lp = head_logprobs(model, blended)
    G = head_input_gradient(model, blended, target_class)  # (n, d)

    log_a = np.log(np.where(a > 0, a, 1.0))
    log_P = np.log(np.where(P > 0, P, 1.0))
    H_a = float(-(a * log_a).sum())
    H_rows = -(P * log_P).sum(axis=1)
    row_weight = a if opt.gate_align_entropy else np.ones(n)
    objective = (
        lp[target_class]
        - opt.entropy_weight_gate * H_a
        - opt.entropy_weight_align * float(row_weight @ H_rows)
    )

    # d objective / d a
    da = (G * (PF2 - F.values)).sum(axis=1)
    da += opt.entropy_weight_gate * (log_a + 1.0)
    if opt.gate_align_entropy:
        da -= opt.entropy_weight_align * H_rows
    # d objective / d P
    dP = a[:, None] * (G @ F2.values.T)
    dP += opt.entropy_weight_align * row_weight[:, None] * (log_P + 1.0)

    # chain through softmax: for y = softmax(x), J^T g = y * (g - y.g)
    dalpha = a * (da - float(a @ da))
    dM = P * (dP - (P * dP).sum(axis=1, keepdims=True))
    return objective, dalpha, dM, a, P


def best_edit_relaxed(
    model: ModelBundle,
    F: FeatureGrid,
    F2: FeatureGrid,
    target_class: int,
    excluded_query=(),
    excluded_source=(),
    opt: RelaxOptConfig = RelaxOptConfig(),
) -> tuple[int, int, float, list]:
    """Relaxed best-edit: optimize the soft gate/alignment, round by argmax.

    Returns (query cell, source cell, discrete score, per-step objective values).
    The score is the target-class log-probability of the *discrete* rounded
    edit, so this drops into the greedy loop interchangeably with the
    exhaustive search.
    """
    if (F.h, F.w, F.d) != (F2.h, F2.w, F2.d):
        raise ShapeError("query and distractor grids must share geometry")
    n = F.cells
    q_mask = np.zeros(n)
    s_mask = np.zeros(n)
    for i in excluded_query:
        q_mask[int(i)] = MASK_LOGIT
    for j in excluded_source:
        s_mask[int(j)] = MASK_LOGIT
    if np.all(q_mask < 0) or np.all(s_mask < 0):
        raise ExhaustedError("all candidate edits are excluded")

    alpha = np.zeros(n)
    M = np.zeros((n, n))
    trajectory = []
    for _ in range(opt.max_steps):
        obj, dalpha, dM, a, P = relaxed_objective_and_grads(
            model, F, F2, target_class, alpha + q_mask, M + s_mask[None, :], opt
        )
        trajectory.append(obj)
        i_star = int(np.argmax(a))
        if a[i_star] >= opt.sharpness_stop and P[i_star].max() >= opt.sharpness_stop:
            break
        alpha += opt.learning_rate * dalpha
        M += opt.learning_rate * dM

    a = softmax(alpha + q_mask)
    P = softmax(M + s_mask[None, :])
    i = int(np.argmax(a))
    j2 = int(np.argmax(P[i]))
    score = head_logprobs(model, single_edit(F, F2, i, j2))[target_class]
    return i, j2, float(score), trajectory
