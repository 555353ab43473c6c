"""AUC-ROC and the in-source / out-of-source evaluation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import datapipe, model
from .autodiff import Tensor


class EvalError(ValueError):
    pass


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(np.intp)
        if self.scores.size != self.labels.size:
            raise EvalError(f"ScoredSet: {self.scores.size} scores vs {self.labels.size} labels")
        if self.scores.size == 0:
            raise EvalError("ScoredSet: empty")


def auc_roc(scored):
    """Mann-Whitney AUC with tie handling at exact score equality.

    Uses midranks, so it equals (#{pos above neg} + 0.5 * #ties) / (P * N)
    exactly while running in O(n log n).
    """
    scores, labels = scored.scores, scored.labels
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUC undefined: need at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def score_batches(params, images, batch_size=256):
    """Disease probabilities for an image array (N,1,H,W); inference only."""
    out = []
    for start in range(0, images.shape[0], batch_size):
        x = Tensor(images[start : start + batch_size])
        out.append(model.classify(params, model.extract(params, x)).data.ravel())
    return np.concatenate(out)


def evaluate(params, manifest):
    """Score every manifest record with classify(extract(x)); deterministic,
    no parameter mutation."""
    images, labels, _ = datapipe.load_examples(manifest)
    return ScoredSet(score_batches(params, images), labels)


@dataclass
class EvalReport:
    """Rows of per-fold, per-mode in/out AUC."""

    rows: list = field(default_factory=list)  # dicts

    def add(self, held_out, mode, auc_in, auc_out):
        self.rows.append(
            {
                "held_out": held_out,
                "mode": mode,
                "auc_in_source": float(auc_in),
                "auc_out_of_source": float(auc_out),
                "gap": float(auc_in) - float(auc_out),
            }
        )

    def to_json(self):
        return json.dumps({"rows": self.rows}, indent=2, sort_keys=True) + "\n"

    def to_table(self):
        """Aligned text table: rows = held-out source, columns =
        baseline/proposed x in/out."""
        by_fold = {}
        for row in self.rows:
            kind = "baseline" if row["mode"] == "baseline" else "proposed"
            by_fold.setdefault(row["held_out"], {})[kind] = row
        header = ["held-out", "baseline in", "baseline out", "proposed in", "proposed out"]
        lines = [header]
        for held_out, cells in by_fold.items():
            line = [held_out]
            for kind in ("baseline", "proposed"):
                row = cells.get(kind)
                if row is None:
                    line.extend(["-", "-"])
                else:
                    line.extend([f"{row['auc_in_source']:.2f}", f"{row['auc_out_of_source']:.2f}"])
            lines.append(line)
        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in lines) + "\n"
