"""Structural (point-set) and lexical (n-gram) evaluation metrics."""
from __future__ import annotations

import math
import re
from collections import Counter

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import ValidationError

BLEU_EPSILON = 1e-9


def _points(a, what="point set") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or a.shape[0] < 1:
        raise ValidationError(f"{what} must be a non-empty n x 3 array, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValidationError(f"{what} contains non-finite coordinates")
    return a


def chamfer(a, b) -> float:
    """Mean squared nearest-neighbour distance from a to b plus from b to a."""
    a, b = _points(a), _points(b)
    # squared distances are recomputed from the matched pairs to avoid sqrt round-trips
    _, ia = cKDTree(b).query(a)
    _, ib = cKDTree(a).query(b)
    da = np.sum((a - b[ia]) ** 2, axis=1)
    db = np.sum((b - a[ib]) ** 2, axis=1)
    return float(da.mean() + db.mean())


def pairwise_distances(a, b) -> np.ndarray:
    return np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))


def emd(a, b) -> float:
    """Mean Euclidean distance under the optimal one-to-one matching."""
    a, b = _points(a), _points(b)
    if a.shape[0] != b.shape[0]:
        raise ValidationError(f"EMD needs equal-size point sets, got {a.shape[0]} and {b.shape[0]}")
    cost = pairwise_distances(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def psnr(a, b, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def tokenize(text: str) -> list[str]:
    return [t for t in re.split(r"[^0-9a-z]+", text.lower()) if t]


def _tokens(seq, what):
    toks = tokenize(seq) if isinstance(seq, str) else list(seq)
    if not toks:
        raise ValidationError(f"{what} has no tokens")
    return toks


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge1(hyp, ref) -> tuple[float, float, float]:
    """Unigram (recall, precision, F1) with clipped counts."""
    hyp, ref = _tokens(hyp, "hypothesis"), _tokens(ref, "reference")
    overlap = sum((Counter(hyp) & Counter(ref)).values())
    r = overlap / len(ref)
    p = overlap / len(hyp)
    f = 0.0 if r + p == 0 else 2 * p * r / (p + r)
    return r, p, f


def modified_precision(hyp, ref, n: int) -> tuple[int, int]:
    """Clipped n-gram matches and total hypothesis n-grams."""
    h, r = ngrams(hyp, n), ngrams(ref, n)
    return sum((h & r).values()), sum(h.values())


def bleu(hyp, ref, max_n: int = 4) -> list[float]:
    """Cumulative BLEU-1 .. BLEU-max_n against a single reference.

    Orders with no clipped matches contribute ``BLEU_EPSILON`` in place of a
    zero precision, so their cumulative scores come out near zero rather
    than undefined.  An order longer than both texts has nothing to match
    and counts as precision 1.
    """
    if not 1 <= max_n <= 4:
        raise ValidationError("max_n must be between 1 and 4")
    hyp, ref = _tokens(hyp, "hypothesis"), _tokens(ref, "reference")
    c, r = len(hyp), len(ref)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    log_p = []
    scores = []
    for n in range(1, max_n + 1):
        match, total = modified_precision(hyp, ref, n)
        if total == 0 and n > r:
            p = 1.0
        else:
            p = match / total if match > 0 else BLEU_EPSILON / max(total, 1)
        log_p.append(math.log(p))
        scores.append(bp * math.exp(sum(log_p) / n))
    return scores


def text_report(hyp: str, ref: str) -> dict:
    r, p, f = rouge1(hyp, ref)
    b = bleu(hyp, ref, 4)
    return {"rouge1_recall": r, "rouge1_precision": p, "rouge1_f1": f,
            **{f"bleu{n}": b[n - 1] for n in range(1, 5)}}


def pointset_report(a, b) -> dict:
    out = {"chamfer": chamfer(a, b)}
    a, b = np.asarray(a), np.asarray(b)
    out["emd"] = emd(a, b) if a.shape[0] == b.shape[0] else None
    return out
