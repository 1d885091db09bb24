"""Training criteria: AAM-softmax, permutation assignment, and teacher-student losses.

The teacher-student loss measures, per frame, the squared Euclidean distance
between the (fixed) target embeddings and the student's frame embeddings
under the best slot permutation. ``ts_loss_tpit`` re-solves the assignment at
every frame; ``ts_loss_upit`` keeps one permutation for the whole utterance.
Both normalize by K*T and propagate gradients only through the selected
assignments. Distances are taken on unnormalized embeddings.

The classification baseline (``aam_pit_loss``) replaces the squared distance
with the AAM-softmax cost of scoring slot j's embedding against speaker label
c_k, again minimized over slot permutations.

Permutation search is exhaustive (K <= 3); ties resolve to the
lexicographically smallest permutation, and gradients follow that choice.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensorcore as tc
from .errors import DegenerateInputError, DimensionError, UnsupportedConfigError

MAX_SLOTS = 3


@dataclass
class AamHead:
    """Per-speaker prototype columns plus the AAM scale and margin."""

    weights: tc.Tensor  # [E, C], column c is speaker c's prototype
    scale: float = 30.0
    margin: float = 0.2

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise DimensionError(f"head weights must be [E, C], got shape {self.weights.shape}")
        if self.scale < 1.0:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.margin < 0.0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")

    @property
    def n_classes(self):
        return self.weights.shape[1]

    @classmethod
    def create(cls, embedding_dim, n_classes, seed=0, scale=30.0, margin=0.2):
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, 1.0 / np.sqrt(embedding_dim), size=(embedding_dim, n_classes))
        return cls(tc.parameter(w, dtype=tc.default_dtype()), scale=scale, margin=margin)


@dataclass
class LossValue:
    """Differentiable scalar plus the permutation(s) chosen (diagnostics)."""

    value: tc.Tensor
    permutations: object = None

    def item(self):
        return self.value.item()


def aam_loss(d: tc.Tensor, label: int, head: AamHead) -> LossValue:
    """Additive-angular-margin softmax cost of one embedding against its label.

    Stabilized with max-subtraction in the log-sum-exp; differentiable w.r.t.
    both the embedding and the prototype matrix.
    """
    if d.ndim != 1:
        raise DimensionError(f"aam_loss expects a 1-D embedding, got shape {d.shape}")
    n_classes = head.n_classes
    if not 0 <= label < n_classes:
        raise DimensionError(f"label {label} outside [0, {n_classes})")
    dn = tc.l2_normalize(d)
    wn = tc.l2_normalize_columns(head.weights)
    cos = tc.reshape(tc.matmul(tc.reshape(dn, (1, d.shape[0])), wn), (n_classes,))
    margin_vec = np.zeros(n_classes)
    margin_vec[label] = head.margin
    z = tc.mul(tc.sub(cos, tc.tensor(margin_vec, dtype=cos.dtype)), float(head.scale))
    m = float(np.max(z.data))
    lse = tc.add(tc.log(tc.sum_all(tc.exp(tc.sub(z, m)))), m)
    return LossValue(tc.sub(lse, tc.pick(z, label)))


def _permutations(k):
    if k > MAX_SLOTS:
        raise UnsupportedConfigError(f"permutation search supports K <= {MAX_SLOTS}, got K = {k}")
    return list(itertools.permutations(range(k)))


def pit_assign(cost):
    """Exhaustive assignment: returns (permutation, total cost) minimizing
    sum_k cost[k, perm[k]]; ties go to the lexicographically smallest permutation."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise DimensionError(f"cost must be a square matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    best_perm = None
    best_total = None
    for perm in _permutations(cost.shape[0]):
        total = float(sum(cost[k, perm[k]] for k in range(cost.shape[0])))
        if best_total is None or total < best_total:
            best_perm, best_total = perm, total
    return best_perm, best_total


def _coerce_targets(targets, dtype):
    if isinstance(targets, tc.Tensor):
        arr = targets.data
    else:
        rows = [np.asarray(getattr(t, "vector", t)) for t in targets] if isinstance(targets, (list, tuple)) else [np.asarray(targets)]
        arr = np.stack(rows) if len(rows) > 1 or rows[0].ndim == 1 else rows[0]
    arr = np.asarray(arr, dtype=dtype)
    if arr.ndim != 2:
        raise DimensionError(f"targets must be [K, E], got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def _perm_tables(k):
    perms = np.array(_permutations(k), dtype=np.int64)  # lexicographic order
    inverses = np.argsort(perms, axis=1)
    return perms, inverses


def _ts_loss(targets, frames, per_frame):
    if not isinstance(frames, tc.Tensor) or frames.ndim != 3:
        raise DimensionError("student frames must be a [T, K, E] tensor")
    fd = np.ascontiguousarray(frames.data)
    t_n, k_n, e_n = fd.shape
    if t_n < 1:
        raise DimensionError("ts loss needs at least one frame")
    d = _coerce_targets(targets, fd.dtype)
    if d.shape != (k_n, e_n):
        raise DimensionError(f"targets shape {d.shape} does not match frames slots {(k_n, e_n)}")
    perms, inverses = _perm_tables(k_n)
    cost = _kernels.pit_cost(d, fd)  # [T, K, K]
    rows = np.arange(k_n)
    totals = np.stack([cost[:, rows, perm].sum(axis=1) for perm in perms], axis=1)  # [T, P]
    if per_frame:
        choice = np.argmin(totals, axis=1)  # first minimum = lexicographically smallest
        total = float(np.sum(np.ascontiguousarray(totals[np.arange(t_n), choice])))
        chosen = [tuple(perms[c]) for c in choice]
        sel_inv = inverses[choice]  # [T, K]
    else:
        cands = [float(np.sum(np.ascontiguousarray(totals[:, p]))) for p in range(len(perms))]
        best = int(np.argmin(cands))
        total = cands[best]
        chosen = tuple(perms[best])
        sel_inv = np.tile(inverses[best], (t_n, 1))
    denom = float(k_n * t_n)
    value = np.asarray(total / denom, dtype=fd.dtype)
    aligned = d[sel_inv]  # [T, K, E]: target assigned to each slot

    def vjp(g):
        return (2.0 / denom) * g * (fd - aligned)

    out = tc._make("ts_loss", value, [(frames, vjp)])
    return LossValue(out, permutations=chosen)


def ts_loss_tpit(targets, frames: tc.Tensor) -> LossValue:
    """Frame-wise teacher-student loss with per-frame permutation assignment."""
    return _ts_loss(targets, frames, per_frame=True)


def ts_loss_upit(targets, frames: tc.Tensor) -> LossValue:
    """Teacher-student loss with one permutation for the whole utterance."""
    return _ts_loss(targets, frames, per_frame=False)


def ts_loss_utterance(targets, pooled: tc.Tensor) -> LossValue:
    """Utterance-level variant (negative-result experiment flag, not a shipped mode)."""
    if not isinstance(pooled, tc.Tensor) or pooled.ndim != 2:
        raise DimensionError("pooled embeddings must be a [K, E] tensor")
    return _ts_loss(targets, tc.reshape(pooled, (1,) + tuple(pooled.shape)), per_frame=True)


# ---------------------------------------------------------------------------
# classification-from-scratch baseline
# ---------------------------------------------------------------------------

def _softmax_rows(z):
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True), m


def _aam_pit_frames(frames, labels, head, per_frame):
    fd = np.ascontiguousarray(frames.data)
    t_n, j_n, e_n = fd.shape
    k_n = len(labels)
    if k_n != j_n:
        raise DimensionError(f"{k_n} labels for {j_n} slots")
    n_classes = head.n_classes
    for c in labels:
        if not 0 <= c < n_classes:
            raise DimensionError(f"label {c} outside [0, {n_classes})")
    wd = head.weights.data.astype(fd.dtype, copy=False)
    s = fd.dtype.type(head.scale)
    a = fd.dtype.type(head.margin)

    norms_f = np.linalg.norm(fd, axis=2)
    if np.any(norms_f <= tc.EPS_NORM):
        raise DegenerateInputError("aam_pit_loss: a frame embedding has near-zero norm")
    norms_w = np.linalg.norm(wd, axis=0)
    if np.any(norms_w <= tc.EPS_NORM):
        raise DegenerateInputError("aam_pit_loss: a prototype has near-zero norm")
    u = fd / norms_f[:, :, None]
    v = wd / norms_w
    cos = u @ v  # [T, J, C]

    labels_arr = np.asarray(labels)
    # cost[t, k, j]: AAM cross-entropy of slot j scored against label c_k
    z = np.repeat(cos[:, None, :, :], k_n, axis=1) * s  # [T, K, J, C]
    for k in range(k_n):
        z[:, k, :, labels_arr[k]] -= s * a
    zmax = z.max(axis=-1)
    lse = np.log(np.exp(z - zmax[..., None]).sum(axis=-1)) + zmax
    true_logit = np.take_along_axis(z, labels_arr[None, :, None, None].repeat(t_n, 0).repeat(j_n, 2), axis=-1)[..., 0]
    cost = lse - true_logit  # [T, K, J]

    perms, inverses = _perm_tables(k_n)
    rows = np.arange(k_n)
    totals = np.stack([cost[:, rows, perm].sum(axis=1) for perm in perms], axis=1)
    if per_frame:
        choice = np.argmin(totals, axis=1)
        total = float(np.sum(np.ascontiguousarray(totals[np.arange(t_n), choice])))
        chosen = [tuple(perms[c]) for c in choice]
        sel_inv = inverses[choice]
    else:
        cands = [float(np.sum(np.ascontiguousarray(totals[:, p]))) for p in range(len(perms))]
        best = int(np.argmin(cands))
        total = cands[best]
        chosen = tuple(perms[best])
        sel_inv = np.tile(inverses[best], (t_n, 1))
    denom = float(k_n * t_n)
    value = np.asarray(total / denom, dtype=fd.dtype)

    # slot j is scored against label c_{inv[j]} under the selected assignment
    sel_labels = labels_arr[sel_inv]  # [T, J]
    zsel = cos * s
    np.put_along_axis(zsel, sel_labels[:, :, None], np.take_along_axis(zsel, sel_labels[:, :, None], axis=-1) - s * a, axis=-1)
    p_sel, _ = _softmax_rows(zsel)  # [T, J, C]
    onehot = np.zeros_like(p_sel)
    np.put_along_axis(onehot, sel_labels[:, :, None], 1.0, axis=-1)
    g_cos_base = s * (p_sel - onehot)  # dcost/dcos for the selected pairs

    def vjp(g):
        g_cos = (g / denom) * g_cos_base
        gf = (g_cos @ v.T - (g_cos * cos).sum(axis=-1, keepdims=True) * u) / norms_f[:, :, None]
        gw_cols = np.einsum("tjc,tje->ec", g_cos, u) - v * (g_cos * cos).sum(axis=(0, 1))
        gw = (gw_cols / norms_w).astype(head.weights.data.dtype, copy=False)
        return gf, gw

    out = tc._make(
        "aam_pit_loss",
        value,
        [
            (frames, lambda g: vjp(g)[0]),
            (head.weights, lambda g: vjp(g)[1]),
        ],
    )
    return LossValue(out, permutations=chosen)


def _aam_pit_pooled(embs, labels, head):
    k_n = embs.shape[0]
    if len(labels) != k_n:
        raise DimensionError(f"{len(labels)} labels for {k_n} slots")
    nodes = [[aam_loss(tc.take_row(embs, j), c, head).value for j in range(k_n)] for c in labels]
    cost = np.array([[n.item() for n in row] for row in nodes])
    perm, _ = pit_assign(cost)
    total = nodes[0][perm[0]]
    for k in range(1, k_n):
        total = tc.add(total, nodes[k][perm[k]])
    return LossValue(tc.mul(total, 1.0 / k_n), permutations=perm)


def aam_pit_loss(student_out, labels, head: AamHead, permutation: str = "tpit") -> LossValue:
    """Classification loss with permutation-invariant label assignment.

    ``student_out`` is either frame embeddings [T, K, E] (cost per frame;
    tPIT assigns per frame, uPIT once per utterance; normalized by K*T) or
    pooled embeddings [K, E] (one assignment, normalized by K).
    """
    if permutation not in ("tpit", "upit"):
        raise ValueError(f"permutation must be 'tpit' or 'upit', got {permutation!r}")
    if not isinstance(student_out, tc.Tensor):
        raise DimensionError("student output must be a Tensor")
    if student_out.ndim == 3:
        if len(labels) > MAX_SLOTS:
            raise UnsupportedConfigError(f"K <= {MAX_SLOTS} supported, got {len(labels)}")
        return _aam_pit_frames(student_out, list(labels), head, per_frame=(permutation == "tpit"))
    if student_out.ndim == 2:
        return _aam_pit_pooled(student_out, list(labels), head)
    raise DimensionError(f"student output must be [T,K,E] or [K,E], got shape {student_out.shape}")
