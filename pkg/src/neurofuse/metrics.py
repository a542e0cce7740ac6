"""ROC/AUC evaluation, precision/recall, and weighted late fusion.

Class columns follow the stage order CN, MCI, AD.  An AUC that is undefined
(a class with no positives or no negatives) is reported as ``None``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

CLASS_NAMES = ("CN", "MCI", "AD")
OVR_KEYS = ("cn_vs_all", "mci_vs_all", "ad_vs_all")
REPORT_KEYS = OVR_KEYS + ("micro", "macro")
ALPHA_STEP = 0.01


def auc_binary(scores, labels) -> float | None:
    """Mann-Whitney AUC from average ranks: P(pos > neg) + P(tie) / 2."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) points, thresholding at each distinct score from high to low."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC curve needs at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    points = [(0.0, 0.0)]
    points += [(float(f / n_neg), float(t / n_pos)) for f, t in zip(fp, tp)]
    return points


def curve_area(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def _onehot(y, k: int = 3) -> np.ndarray:
    y = np.asarray(y, dtype=int)
    out = np.zeros((y.size, k), dtype=bool)
    out[np.arange(y.size), y] = True
    return out


def _check_preds(probs, y) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=int).ravel()
    if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] != y.size:
        raise ValueError(f"expected [N, 3] probabilities for {y.size} labels, got {p.shape}")
    if np.any((y < 0) | (y > 2)):
        raise ValueError("labels must be class indices 0..2")
    return p, y


def auc_ovr(probs, y) -> list[float | None]:
    p, y = _check_preds(probs, y)
    return [auc_binary(p[:, c], y == c) for c in range(3)]


def auc_micro(probs, y) -> float | None:
    """Pool every (probability, one-hot indicator) pair into a single binary problem."""
    p, y = _check_preds(probs, y)
    return auc_binary(p.ravel(), _onehot(y).ravel())


def macro_of(ovr) -> float | None:
    if any(v is None for v in ovr):
        return None
    return float(sum(ovr) / 3.0)


@dataclass
class AucReport:
    cn_vs_all: float | None
    mci_vs_all: float | None
    ad_vs_all: float | None
    micro: float | None
    macro: float | None
    curves: dict[str, list[tuple[float, float]]] = field(default_factory=dict, repr=False)

    def as_row(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in REPORT_KEYS}


def auc_report(probs, y, with_curves: bool = True) -> AucReport:
    p, y = _check_preds(probs, y)
    ovr = auc_ovr(p, y)
    curves = {}
    if with_curves:
        for c, key in enumerate(OVR_KEYS):
            if ovr[c] is not None:
                curves[key] = roc_curve(p[:, c], y == c)
        micro_y = _onehot(y).ravel()
        if micro_y.any() and not micro_y.all():
            curves["micro"] = roc_curve(p.ravel(), micro_y)
    return AucReport(*ovr, auc_micro(p, y), macro_of(ovr), curves)


def metric_values(probs, y) -> dict[str, float | None]:
    return auc_report(probs, y, with_curves=False).as_row()


def precision_recall(probs, y) -> dict[str, dict[str, float | None]]:
    """Per-class precision and recall of argmax decisions (ties -> lowest class index)."""
    p, y = _check_preds(probs, y)
    pred = np.argmax(p, axis=1)  # first maximum on ties
    out = {}
    for c, name in enumerate(CLASS_NAMES):
        tp = int(np.sum((pred == c) & (y == c)))
        n_pred = int(np.sum(pred == c))
        n_true = int(np.sum(y == c))
        out[name] = {
            "precision": tp / n_pred if n_pred else None,
            "recall": tp / n_true if n_true else None,
        }
    return out


def fuse(p_t1, p_fl, alpha: float) -> np.ndarray:
    """Class-wise convex combination alpha * p_t1 + (1 - alpha) * p_fl."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    a = np.asarray(p_t1, dtype=np.float64)
    b = np.asarray(p_fl, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse probabilities of shapes {a.shape} and {b.shape}")
    for name, p in (("T1", a), ("FLAIR", b)):
        if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
            raise ValueError(f"{name} probability rows must sum to 1")
    if alpha == 1.0:
        return a.copy()
    if alpha == 0.0:
        return b.copy()
    return alpha * a + (1.0 - alpha) * b


def alpha_grid(step: float = ALPHA_STEP) -> list[float]:
    n = int(round(1.0 / step))
    if not np.isclose(n * step, 1.0):
        raise ValueError(f"grid step {step} does not divide [0, 1]")
    return [i / n for i in range(n + 1)]


@dataclass
class AlphaSearch:
    metric: str
    alpha: float
    value: float
    sweep: list[dict[str, float | None]]


def alpha_sweep(probs_t1, probs_fl, y, step: float = ALPHA_STEP) -> list[dict[str, float | None]]:
    a, y = _check_preds(probs_t1, y)
    b, _ = _check_preds(probs_fl, y)
    rows = []
    for alpha in alpha_grid(step):
        row = {"alpha": alpha}
        row.update(metric_values(fuse(a, b, alpha), y))
        rows.append(row)
    return rows


def best_from_sweep(sweep, metric: str) -> dict:
    """Sweep row with the largest ``metric``; the earliest (lowest alpha) wins ties."""
    if metric not in REPORT_KEYS:
        raise ValueError(f"metric must be one of {REPORT_KEYS}, got {metric!r}")
    best = None
    for row in sweep:
        v = row[metric]
        if v is not None and (best is None or v > best[metric]):
            best = row
    if best is None:
        raise ValueError(f"{metric} is undefined for these labels")
    return best


def optimal_alpha(probs_t1, probs_fl, y, metric: str = "micro", step: float = ALPHA_STEP) -> AlphaSearch:
    """Grid-search the fusion weight maximizing ``metric``."""
    if np.shape(probs_t1) != np.shape(probs_fl):
        raise ValueError(f"misaligned prediction sets {np.shape(probs_t1)} vs {np.shape(probs_fl)}")
    sweep = alpha_sweep(probs_t1, probs_fl, y, step)
    best = best_from_sweep(sweep, metric)
    return AlphaSearch(metric, best["alpha"], best[metric], sweep)
