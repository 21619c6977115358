"""Global box-to-label assignment by entropic optimal transport.

Pipeline: :func:`build_cost` -> :func:`sinkhorn` -> :func:`extract_assignment`,
wrapped by :func:`match_with_refinement`, which adds padding for unequal
counts, confidence/cost gating and a candidate-regeneration fallback.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConvergenceError, ValidationError
from .geometry import BBox, box_iou

log = logging.getLogger(__name__)

LOG_DOMAIN_BELOW = 0.01


@dataclass(frozen=True)
class Prototype:
    """Expected position and/or embedding for one label."""

    box: Optional[BBox] = None
    feature: Optional[np.ndarray] = None
    label: Optional[str] = None


@dataclass
class TransportPlan:
    plan: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    converged: bool
    n_iter: int
    marginal_error: float

    @property
    def shape(self):
        return self.plan.shape


@dataclass
class Assignment:
    """Hard matching of predictions to labels.

    ``pairs`` holds ``(pred_index, label_index)``. Pairs recovered by the
    fallback refer to ``recovered_boxes`` with indices ``n_preds + k``.
    """

    pairs: list = field(default_factory=list)
    confidences: list = field(default_factory=list)
    unassigned_labels: list = field(default_factory=list)
    recovered_boxes: list = field(default_factory=list)
    n_preds: int = 0

    def label_of(self):
        return {p: l for p, l in self.pairs}

    def pred_of(self):
        return {l: p for p, l in self.pairs}

    def to_dict(self, labels=None):
        out = {
            "pairs": [[int(p), int(l)] for p, l in self.pairs],
            "confidences": [float(c) for c in self.confidences],
            "unassigned_labels": [int(l) for l in self.unassigned_labels],
            "recovered_boxes": [b.as_list() for b in self.recovered_boxes],
        }
        if labels is not None:
            out["labels"] = {str(int(p)): labels[l] for p, l in self.pairs}
            out["unassigned_label_names"] = [labels[l] for l in self.unassigned_labels]
        return out


@dataclass
class MatchConfig:
    reg: float = 0.05
    tol: float = 1e-6
    max_iter: int = 1000
    tau_conf: float = 0.5
    tau_cost_percentile: Optional[float] = 90.0
    w_spatial: float = 1.0
    w_semantic: float = 0.0
    reject_overlap: float = 0.5


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValidationError("cosine similarity of a zero vector")
    return float(np.dot(a, b) / (na * nb))


def build_cost(preds: Sequence[BBox], prototypes: Sequence[Prototype], weights=(1.0, 0.0), pred_features=None):
    """Cost ``C[i, j]`` of giving prediction ``i`` the label of prototype ``j``.

    Spatial term: L2 distance between box centers. Semantic term:
    ``1 - cosine`` between pred and prototype features, used only where both
    exist.
    """
    w_spatial, w_semantic = weights
    if w_spatial < 0 or w_semantic < 0 or w_spatial + w_semantic <= 0:
        raise ValidationError(f"cost weights must be nonnegative with positive sum, got {weights}")
    if not preds or not prototypes:
        raise ValidationError("build_cost needs at least one prediction and one prototype")
    cost = np.zeros((len(preds), len(prototypes)))
    for i, box in enumerate(preds):
        cx, cy = box.center
        for j, proto in enumerate(prototypes):
            c = 0.0
            if proto.box is not None and w_spatial:
                px, py = proto.box.center
                c += w_spatial * float(np.hypot(cx - px, cy - py))
            feat = None if pred_features is None else pred_features[i]
            if feat is not None and proto.feature is not None and w_semantic:
                c += w_semantic * (1.0 - _cosine(feat, proto.feature))
            cost[i, j] = c
    return cost


def _check_cost(C):
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.size == 0:
        raise ValidationError(f"cost matrix must be non-empty 2-D, got shape {C.shape}")
    if not np.all(np.isfinite(C)) or C.min() < 0:
        raise ValidationError("cost entries must be finite and nonnegative")
    return C


def _errors(P, a, b):
    return float(np.abs(P.sum(axis=1) - a).sum()), float(np.abs(P.sum(axis=0) - b).sum())


def _sinkhorn_scaling(C, a, b, reg, max_iter, tol, check_every=10):
    K = np.exp(-C / reg)
    u = np.ones_like(a)
    v = np.ones_like(b)
    err = prev = np.inf
    it = 0
    while it < max_iter:
        it += 1
        u = a / (K @ v)
        v = b / (K.T @ u)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ConvergenceError(
                f"non-finite scaling at iteration {it} with reg={reg}; use a larger reg"
            )
        if it % check_every and it != max_iter:
            continue
        P = u[:, None] * K * v[None, :]
        err = max(_errors(P, a, b))
        if err < tol:
            return P, True, it, err
        if err > 0.9 * prev:
            break
        prev = err
    if np.any(u <= 0) or np.any(v <= 0):
        return P, False, it, err
    P, ok, steps, err = _newton_polish(C, a, b, reg, reg * np.log(u), reg * np.log(v), tol)
    return P, ok, it + steps, err


def _lse_rows(M):
    top = M.max(axis=1)
    return top + np.log(np.exp(M - top[:, None]).sum(axis=1))


def _newton_polish(C, a, b, reg, f, g, tol, max_steps=50):
    """Newton ascent on the entropic dual, used when alternating scaling stalls.

    Near-ties between permutations make plain scaling converge sublinearly at
    small ``reg``; the dual Hessian is tiny here so a dense solve is cheap.
    """
    n = C.shape[0]

    def dual(f, g):
        with np.errstate(over="ignore"):
            P = np.exp((f[:, None] + g[None, :] - C) / reg)
        return a @ f + b @ g - reg * P.sum(), P

    value, P = dual(f, g)
    err = np.inf
    for step in range(max_steps + 1):
        r, c = P.sum(axis=1), P.sum(axis=0)
        err = max(float(np.abs(r - a).sum()), float(np.abs(c - b).sum()))
        if err < tol or step == max_steps:
            break
        grad = np.concatenate([a - r, b - c])
        hess = np.block([[np.diag(r), P], [P.T, np.diag(c)]])
        direction = reg * np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-12:
            nf, ng = f + t * direction[:n], g + t * direction[n:]
            nvalue, nP = dual(nf, ng)
            if nvalue >= value:
                break
            t *= 0.5
        else:
            break
        f, g, value, P = nf, ng, nvalue, nP
    return P, err < tol, step, err


def _sinkhorn_log(C, a, b, reg, max_iter, tol, check_every=10):
    log_a, log_b = np.log(a), np.log(b)
    Ct = C.T
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    # warm start by annealing reg down from the cost span
    eps = max(reg, float(C.max() - C.min()))
    while eps > reg:
        for _ in range(20):
            f = eps * (log_a - _lse_rows((g[None, :] - C) / eps))
            g = eps * (log_b - _lse_rows((f[None, :] - Ct) / eps))
        eps = max(reg, eps * 0.5)
    err = prev = np.inf
    it = 0
    while it < max_iter:
        it += 1
        f = reg * (log_a - _lse_rows((g[None, :] - C) / reg))
        g = reg * (log_b - _lse_rows((f[None, :] - Ct) / reg))
        if it % check_every and it != max_iter:
            continue
        P = np.exp((f[:, None] + g[None, :] - C) / reg)
        err = max(_errors(P, a, b))
        if err < tol:
            return P, True, it, err
        if err > 0.9 * prev:
            break
        prev = err
    P, ok, steps, err = _newton_polish(C, a, b, reg, f, g, tol)
    return P, ok, it + steps, err


def sinkhorn(C, reg=0.05, max_iter=1000, tol=1e-6, mu=None, nu=None) -> TransportPlan:
    """Entropic OT plan between uniform (or given) marginals.

    Stops once both marginal L1 errors fall below ``tol``. Uses multiplicative
    scaling, switching to log-domain updates for ``reg < 0.01``; in the log
    domain a stalled iteration is finished by Newton steps on the dual.
    """
    C = _check_cost(C)
    if reg <= 0:
        raise ValidationError(f"reg must be positive, got {reg}")
    n, m = C.shape
    a = np.full(n, 1.0 / n) if mu is None else np.asarray(mu, dtype=np.float64)
    b = np.full(m, 1.0 / m) if nu is None else np.asarray(nu, dtype=np.float64)
    if reg < LOG_DOMAIN_BELOW:
        P, ok, it, err = _sinkhorn_log(C, a, b, reg, max_iter, tol)
    else:
        P, ok, it, err = _sinkhorn_scaling(C, a, b, reg, max_iter, tol)
    if not ok:
        log.warning("sinkhorn stopped after %d iterations, marginal error %.3g", it, err)
    return TransportPlan(P, a, b, ok, it, err)


def extract_assignment(plan) -> Assignment:
    """Round a plan to the permutation carrying the most mass."""
    P = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    if not np.any(P > 0):
        raise ValidationError("cannot extract an assignment from an all-zero plan")
    rows, cols = linear_sum_assignment(P, maximize=True)
    n = P.shape[0]
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    conf = [float(min(max(n * P[r, c], 0.0), 1.0)) for r, c in pairs]
    assigned = {c for _, c in pairs}
    unassigned = [j for j in range(P.shape[1]) if j not in assigned]
    return Assignment(pairs, conf, unassigned, n_preds=n)


def independent_assignment(C) -> Assignment:
    """Baseline: each prediction takes its nearest prototype, duplicates allowed."""
    C = _check_cost(C)
    cols = np.argmin(C, axis=1)
    pairs = [(i, int(j)) for i, j in enumerate(cols)]
    assigned = set(int(j) for j in cols)
    return Assignment(pairs, [1.0] * len(pairs), [j for j in range(C.shape[1]) if j not in assigned], n_preds=C.shape[0])


@dataclass
class UnassignedRegion:
    """What a regeneration callback gets for one label that lost its box."""

    label_index: int
    prototype: Prototype
    occupied: list


def _pad(C):
    n, m = C.shape
    size = max(n, m)
    if n == m:
        return C
    out = np.full((size, size), C.max() + 1.0)
    out[:n, :m] = C
    return out


def match_cost(C, config: MatchConfig = None) -> Assignment:
    """Pad, transport and round a precomputed cost matrix, then apply the
    confidence/cost gates. Voided and dummy-matched labels end up in
    ``unassigned_labels``."""
    cfg = config or MatchConfig()
    C = _check_cost(C)
    n, m = C.shape
    tau_cost = np.inf if cfg.tau_cost_percentile is None else float(np.percentile(C, cfg.tau_cost_percentile))
    plan = sinkhorn(_pad(C), cfg.reg, cfg.max_iter, cfg.tol)
    raw = extract_assignment(plan)
    pairs, conf = [], []
    for (i, j), c in zip(raw.pairs, raw.confidences):
        if i >= n or j >= m:
            continue
        if c < cfg.tau_conf or C[i, j] > tau_cost:
            log.debug("voiding pair (%d, %d): confidence %.3f, cost %.3f", i, j, c, C[i, j])
            continue
        pairs.append((i, j))
        conf.append(c)
    open_labels = sorted(set(range(m)) - {j for _, j in pairs})
    return Assignment(pairs, conf, open_labels, n_preds=n)


def match_with_refinement(preds, prototypes, config: MatchConfig = None,
                          regenerate: Optional[Callable[[UnassignedRegion], Sequence[BBox]]] = None,
                          pred_features=None) -> Assignment:
    """Full matching: cost, transport, rounding, gating and fallback.

    Pairs whose confidence is below ``tau_conf`` or whose cost exceeds the
    ``tau_cost_percentile`` percentile of the cost matrix are voided. For
    every label left without a box, ``regenerate`` is asked for candidate
    boxes; candidates overlapping a confidently assigned box are discarded
    and the cheapest survivor is adopted. Callback failures leave the label
    in ``unassigned_labels``.
    """
    cfg = config or MatchConfig()
    preds = list(preds)
    prototypes = list(prototypes)
    n = len(preds)
    weights = (cfg.w_spatial, cfg.w_semantic)
    result = match_cost(build_cost(preds, prototypes, weights, pred_features), cfg)
    open_labels, result.unassigned_labels = result.unassigned_labels, []

    if regenerate is None:
        result.unassigned_labels = open_labels
        return result

    occupied = [preds[i] for i, _ in result.pairs]
    for j in open_labels:
        region = UnassignedRegion(j, prototypes[j], list(occupied))
        try:
            candidates = list(regenerate(region) or [])
        except Exception as exc:  # a broken callback must not abort matching
            log.warning("regeneration failed for label %d: %r", j, exc)
            result.unassigned_labels.append(j)
            continue
        candidates = [b for b in candidates
                      if all(box_iou(b, o) < cfg.reject_overlap for o in occupied)]
        if not candidates:
            result.unassigned_labels.append(j)
            continue
        costs = build_cost(candidates, [prototypes[j]], weights)[:, 0]
        best = int(np.argmin(costs))
        box = candidates[best]
        result.pairs.append((n + len(result.recovered_boxes), j))
        result.confidences.append(float(np.exp(-costs[best])))
        result.recovered_boxes.append(box)
        occupied.append(box)
    return result
