"""Set-prediction losses: Hungarian matching, classification/mask/contrastive terms.

Matching runs tape-free on detached arrays (a discrete decision); the loss
terms are tape ops so gradients reach the model. Matched pairs are always
ordered by query index, which makes every loss value independent of the
order ground-truth targets arrive in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from . import tensor as T
from .tensor import OpError, ShapeError, Tensor


@dataclass
class LossWeights:
    cls: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    con: float = 1.0

    def __post_init__(self):
        if min(self.cls, self.bce, self.dice, self.con) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class MatchTargets:
    labels: np.ndarray  # (T,) class indices in [0, C)
    masks: np.ndarray  # (T, h, w) binary
    is_thing: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.masks = np.asarray(self.masks)
        if len(self.labels) != len(self.masks):
            raise ShapeError(f"{len(self.labels)} labels vs {len(self.masks)} masks")
        if self.is_thing is None:
            self.is_thing = np.ones(len(self.labels), dtype=bool)

    def __len__(self):
        return len(self.labels)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (query, target), ascending query index
    y: np.ndarray  # (N,) labels, no-object index for unmatched
    total_cost: float


# ---------------------------------------------------------------------------
# Hungarian matching


def _solve(cost: np.ndarray) -> float:
    if 0 in cost.shape:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def match_hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost injective assignment of min(n,m) pairs.

    Tie-break: among all minimum-cost assignments, returns the one whose
    per-row column vector (unmatched rows sorting last) is lexicographically
    smallest. Found by fixing rows greedily and re-solving the remainder.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost matrix must be 2D, got {cost.shape}")
    if np.isnan(cost).any():
        raise OpError("cost matrix contains NaN")
    n, m = cost.shape
    if n == 0 or m == 0:
        return [], 0.0

    budget = _solve(cost)
    total = budget
    tol = 1e-9 * max(1.0, abs(budget))
    avail = sorted(range(m))
    needed = min(n, m)
    pairs: list[tuple[int, int]] = []
    for r in range(n):
        if needed == 0:
            break
        rows_after = np.arange(r + 1, n)
        may_skip = (n - r - 1) >= needed
        chosen = None
        for c in avail:
            rest = [cc for cc in avail if cc != c]
            sub_total = _solve(cost[np.ix_(rows_after, rest)]) if needed > 1 else 0.0
            if cost[r, c] + sub_total <= budget + tol:
                chosen = c
                break
        if chosen is None:
            if not may_skip:
                raise RuntimeError("hungarian: no feasible column for a forced row")
            continue
        pairs.append((r, chosen))
        avail.remove(chosen)
        budget -= cost[r, chosen]
        needed -= 1
    rows = [p[0] for p in pairs]
    cols = [p[1] for p in pairs]
    return pairs, float(cost[rows, cols].sum()) if pairs else 0.0


def build_match_cost(c: np.ndarray, mask_logits: np.ndarray, targets: MatchTargets, w: LossWeights) -> np.ndarray:
    """N x T matching cost: -w.cls * class prob + w.bce * bce + w.dice * dice."""
    c = np.asarray(c, dtype=np.float64)
    z = np.asarray(mask_logits, dtype=np.float64).reshape(len(c), -1)
    if len(targets) == 0:
        return np.zeros((len(c), 0))
    tm = targets.masks.reshape(len(targets), -1).astype(np.float64)
    if tm.shape[1] != z.shape[1]:
        raise ShapeError(f"mask pixels {z.shape[1]} vs target pixels {tm.shape[1]}")
    if targets.labels.min() < 0 or targets.labels.max() >= c.shape[1] - 1:
        raise OpError(f"target label out of range [0, {c.shape[1] - 1})")

    ez = np.exp(c - c.max(axis=1, keepdims=True))
    prob = ez / ez.sum(axis=1, keepdims=True)
    cls_cost = -prob[:, targets.labels]

    # pairwise mean-per-pixel bce: constant part + cross term
    npx = z.shape[1]
    const = (np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))).sum(axis=1)
    bce_cost = (const[:, None] - z @ tm.T) / npx

    s = expit(z)
    inter = s @ tm.T
    dice_cost = 1.0 - (2 * inter + 1.0) / (s.sum(axis=1)[:, None] + tm.sum(axis=1)[None, :] + 1.0)

    return w.cls * cls_cost + w.bce * bce_cost + w.dice * dice_cost


def match_queries(c, mask_logits, targets: MatchTargets, w: LossWeights) -> MatchResult:
    """Hungarian assignment under the combined cost; unmatched queries get no-object."""
    c_arr = c.data if isinstance(c, Tensor) else np.asarray(c)
    z_arr = mask_logits.data if isinstance(mask_logits, Tensor) else np.asarray(mask_logits)
    no_object = c_arr.shape[1] - 1
    y = np.full(c_arr.shape[0], no_object, dtype=np.int64)
    if len(targets) == 0:
        return MatchResult([], y, 0.0)
    cost = build_match_cost(c_arr, z_arr, targets, w)
    pairs, total = match_hungarian(cost)
    for q, t in pairs:
        y[q] = targets.labels[t]
    return MatchResult(pairs, y, total)


# ---------------------------------------------------------------------------
# loss terms (tape ops)


def _log_softmax(x: Tensor, axis: int) -> Tensor:
    shift = Tensor(x.data.max(axis=axis, keepdims=True))  # detached, constant
    z = T.add(x, T.scale(shift, -1.0))
    lse = T.log(T.sum_(T.exp(z), axis=axis, keepdims=True))
    return T.add(z, T.scale(lse, -1.0))


def classification_loss(c: Tensor, y: np.ndarray, mode: str = "all") -> Tensor:
    """Cross-entropy over the C+1 classes; plain mean over all N queries, or
    mean over matched queries only (``positive_only``)."""
    if mode not in ("all", "positive_only"):
        raise OpError(f"unknown classification mode {mode!r}")
    y = np.asarray(y, dtype=np.int64)
    n, k = c.shape
    if y.shape != (n,):
        raise ShapeError(f"y shape {y.shape} != ({n},)")
    if y.min() < 0 or y.max() >= k:
        raise OpError(f"label out of range [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    logp = _log_softmax(c, axis=1)
    row_ce = T.scale(T.sum_(T.mul(logp, Tensor(onehot)), axis=1), -1.0)
    if mode == "all":
        return T.mean_(row_ce)
    positive = (y != k - 1).astype(np.float64)
    count = positive.sum()
    if count == 0:
        return Tensor(np.zeros(()), dtype=c.dtype)
    return T.scale(T.sum_(T.mul(row_ce, Tensor(positive))), 1.0 / count)


def _check_binary(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    vals = np.unique(t)
    if not np.isin(vals, (0, 1)).all():
        raise OpError(f"mask target must be binary, saw values {vals[:4]}")
    return t.astype(np.float64)


def _abs(x: Tensor) -> Tensor:
    return T.mul(x, Tensor(np.sign(x.data)))


def bce_mask_loss(matched_logits: Tensor, gt_masks: np.ndarray) -> Tensor:
    """Numerically stable sigmoid BCE in logit space, mean over matched pixels."""
    t = _check_binary(gt_masks)
    if matched_logits.shape != t.shape:
        raise ShapeError(f"logits {matched_logits.shape} vs targets {t.shape}")
    z = matched_logits
    # max(z,0) - z*t + log(1 + exp(-|z|))
    loss = T.add(
        T.add(T.relu(z), T.scale(T.mul(z, Tensor(t)), -1.0)),
        T.log(T.add(T.exp(T.scale(_abs(z), -1.0)), Tensor(np.ones_like(t)))),
    )
    return T.mean_(loss)


def dice_loss(matched_logits: Tensor, gt_masks: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - smoothed Dice coefficient, mean over matched queries."""
    t = _check_binary(gt_masks)
    if matched_logits.shape != t.shape:
        raise ShapeError(f"logits {matched_logits.shape} vs targets {t.shape}")
    k = matched_logits.shape[0]
    p = T.sigmoid(T.reshape(matched_logits, (k, -1)))
    tf = t.reshape(k, -1)
    num = T.add(T.scale(T.sum_(T.mul(p, Tensor(tf)), axis=1), 2.0), Tensor(np.full(k, smooth)))
    den = T.add(T.sum_(p, axis=1), Tensor(tf.sum(axis=1) + smooth))
    ratio = T.mul(num, T.exp(T.scale(T.log(den), -1.0)))
    return T.mean_(T.add(Tensor(np.ones(k)), T.scale(ratio, -1.0)))


def gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Row gather with gradient scatter; works on (N, ...) tensors."""
    n = x.shape[0]
    flat = T.reshape(x, (n, -1))
    picked = T.embedding_lookup(flat, np.asarray(rows, dtype=np.int64))
    return T.reshape(picked, (len(rows),) + x.shape[1:])


# ---------------------------------------------------------------------------
# contrastive terms


@dataclass
class SimilarityMatrix:
    s: Tensor  # (B, B) cosine / tau
    tau: float


def contrastive_sim(e_img: Tensor, e_text: Tensor, tau) -> SimilarityMatrix:
    """Pairwise cosine similarity divided by temperature.

    ``tau`` is a positive float or a log-parameterized scalar Tensor
    (tau = exp(log_tau), always positive).
    """
    if e_img.shape != e_text.shape or e_img.ndim != 2:
        raise ShapeError(f"embedding batches {e_img.shape} vs {e_text.shape}")
    for name, t in (("image", e_img), ("text", e_text)):
        norms = np.linalg.norm(t.data, axis=-1)
        if (norms <= 1e-12).any():
            raise OpError(f"zero-norm {name} embedding row")
    raw = T.matmul(T.l2_normalize(e_img, axis=-1), T.transpose(T.l2_normalize(e_text, axis=-1)))
    if isinstance(tau, Tensor):
        inv = T.exp(T.scale(tau, -1.0))
        return SimilarityMatrix(T.mul(raw, T.reshape(inv, ())), float(np.exp(tau.data.reshape(()))))
    if tau <= 0:
        raise OpError(f"temperature must be positive, got {tau}")
    return SimilarityMatrix(T.scale(raw, 1.0 / tau), float(tau))


def contrastive_loss(s) -> Tensor:
    """Symmetric InfoNCE over a square similarity matrix:
    -(1/2B) sum_i [log softmax_row(s)_ii + log softmax_col(s)_ii]."""
    st = s.s if isinstance(s, SimilarityMatrix) else s
    if st.ndim != 2 or st.shape[0] != st.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {st.shape}")
    b = st.shape[0]
    eye = Tensor(np.eye(b))
    diag_row = T.sum_(T.mul(_log_softmax(st, axis=1), eye))
    diag_col = T.sum_(T.mul(_log_softmax(st, axis=0), eye))
    return T.scale(T.add(diag_row, diag_col), -1.0 / (2 * b))


def _token_cos_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs token cosine: (P,D) x (L,D) -> (P,L)."""
    return T.matmul(T.l2_normalize(a, axis=-1), T.transpose(T.l2_normalize(b, axis=-1)))


def _max_rows(x: Tensor) -> Tensor:
    """Row-wise max via detached argmax gather (correct subgradient)."""
    idx = x.data.argmax(axis=1)
    pick = np.zeros(x.shape)
    pick[np.arange(x.shape[0]), idx] = 1.0
    return T.sum_(T.mul(x, Tensor(pick)), axis=1)


def filip_contrastive_loss(image_tokens: list[Tensor], text_tokens: list[Tensor], tau) -> Tensor:
    """Late-interaction contrastive loss (token-level max, then mean).

    For pair (i, j): the image-side similarity averages, over image tokens,
    the best-matching text token cosine; the text side does the symmetric
    aggregation. The symmetric InfoNCE of ``contrastive_loss`` is then applied
    (rows of the image-side matrix, columns of the text-side matrix).
    """
    b = len(image_tokens)
    if b == 0 or len(text_tokens) != b:
        raise ShapeError(f"batch sizes differ: {b} images vs {len(text_tokens)} texts")
    for toks in (*image_tokens, *text_tokens):
        if toks.ndim != 2 or toks.shape[0] == 0:
            raise OpError("empty token set")
    if isinstance(tau, Tensor):
        inv_tau = T.exp(T.scale(tau, -1.0))
    else:
        if tau <= 0:
            raise OpError(f"temperature must be positive, got {tau}")
        inv_tau = Tensor(np.asarray(1.0 / tau))

    img_side = []
    txt_side = []
    for i in range(b):
        img_row, txt_row = [], []
        for j in range(b):
            cos = _token_cos_matrix(image_tokens[i], text_tokens[j])  # (P, L)
            img_row.append(T.reshape(T.mean_(_max_rows(cos)), (1, 1)))
            txt_row.append(T.reshape(T.mean_(_max_rows(T.transpose(cos))), (1, 1)))
        img_side.append(T.concat(img_row, axis=1))
        txt_side.append(T.concat(txt_row, axis=1))
    s_img = T.mul(T.concat(img_side, axis=0), T.reshape(inv_tau, ()))
    s_txt = T.mul(T.concat(txt_side, axis=0), T.reshape(inv_tau, ()))

    eye = Tensor(np.eye(b))
    diag_row = T.sum_(T.mul(_log_softmax(s_img, axis=1), eye))
    diag_col = T.sum_(T.mul(_log_softmax(s_txt, axis=0), eye))
    return T.scale(T.add(diag_row, diag_col), -1.0 / (2 * b))


# ---------------------------------------------------------------------------
# weighted total


TASK_TERMS = {
    "panoptic": ("cls", "bce", "dice"),
    "detection": ("cls", "bce", "dice"),
    "caption": ("con",),
}


def total_loss(terms: dict, w: LossWeights, task: str) -> Tensor:
    """Weighted sum of the terms active for the task; absent terms contribute 0."""
    if task not in TASK_TERMS:
        raise OpError(f"unknown task {task!r}")
    total = None
    for name in TASK_TERMS[task]:
        if name not in terms or terms[name] is None:
            continue
        piece = T.scale(terms[name], getattr(w, name))
        total = piece if total is None else T.add(total, piece)
    return total if total is not None else Tensor(np.zeros(()))
