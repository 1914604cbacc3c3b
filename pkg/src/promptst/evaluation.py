"""Accuracy, benefit ratio, seed aggregation, cluster analysis of [MASK]
representations, and vocabulary attribution for the trainable verbalizer.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Example, Vocabulary, apply_template, pad_batch
from .model import ModelParams, encoder_forward, mlm_logits_at
from .verbalizers import Head, N_SPECIALS, mav_class_scores

# std over seeds follows the sample convention (ddof=1); it reproduces the
# published per-seed aggregate where the population convention does not
STD_CONVENTION = "sample"


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0:
        raise ValueError("cannot score an empty prediction set")
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels are misaligned")
    return float((preds == labels).mean())


@dataclass
class BenefitInput:
    acc_small: float
    acc_semi: float
    acc_full: float


def benefit_ratio(b: BenefitInput) -> float:
    """(semi - small) / (full - small); nan when the denominator vanishes."""
    denom = b.acc_full - b.acc_small
    if denom == 0:
        return math.nan
    return (b.acc_semi - b.acc_small) / denom


@dataclass
class EvalReport:
    per_seed: list[float]
    mean: float
    std: float
    std_convention: str = STD_CONVENTION
    mode: str = ""
    head: str = ""
    dataset_id: str = ""

    def cell(self, scale: float = 1.0) -> str:
        return f"{self.mean * scale:.1f} ({self.std * scale:.1f})"

    def to_dict(self) -> dict:
        return {
            "per_seed": self.per_seed,
            "mean": self.mean,
            "std": self.std,
            "std_convention": self.std_convention,
            "mode": self.mode,
            "head": self.head,
            "dataset_id": self.dataset_id,
        }


def aggregate_seeds(
    accs: list[float], mode: str = "", head: str = "", dataset_id: str = ""
) -> EvalReport:
    if len(accs) < 2:
        raise ValueError("seed aggregation needs at least two seeds")
    arr = np.asarray(accs, dtype=np.float64)
    return EvalReport(
        per_seed=[float(a) for a in arr],
        mean=float(arr.mean()),
        std=float(arr.std(ddof=1)),
        mode=mode,
        head=head,
        dataset_id=dataset_id,
    )


# -- k-means and silhouette -----------------------------------------------


@dataclass
class ClusterReport:
    silhouette: float
    k: int
    inertia: float
    assignments: np.ndarray


def _kmeans_once(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100):
    n = points.shape[0]
    # k-means++ seeding
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        for j in range(k):
            members = points[new_assign == j]
            if members.size:
                centers[j] = members.mean(axis=0)
            else:
                # revive an empty cluster at the point farthest from its center
                worst = dists[np.arange(n), new_assign].argmax()
                centers[j] = points[worst]
                new_assign[worst] = j
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    inertia = float(((points - centers[assign]) ** 2).sum())
    return assign, inertia


def silhouette_score(points: np.ndarray, assignments: np.ndarray) -> float:
    """Mean over points of (b - a) / max(a, b); singleton clusters and
    zero-distance degeneracies score 0."""
    n = points.shape[0]
    labels = np.unique(assignments)
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    scores = np.zeros(n)
    for i in range(n):
        own = assignments[i]
        same = (assignments == own) & (np.arange(n) != i)
        if not same.any():
            continue  # singleton: scores[i] stays 0
        a = dist[i, same].mean()
        b = min(dist[i, assignments == other].mean() for other in labels if other != own)
        top = max(a, b)
        if top > 0:
            scores[i] = (b - a) / top
    return float(scores.mean())


def silhouette_kmeans(
    reps: np.ndarray, k: int, seed: int, restarts: int = 10
) -> ClusterReport:
    """K-means (k-means++ seeding, best inertia over restarts) followed by
    the silhouette score of the final assignment."""
    reps = np.asarray(reps, dtype=np.float64)
    if k < 2:
        raise ValueError("need at least two clusters")
    if reps.shape[0] < k:
        raise ValueError("need at least k points")
    rng = np.random.default_rng([seed, 0x61])
    best = None
    for _ in range(restarts):
        assign, inertia = _kmeans_once(reps, k, rng)
        if best is None or inertia < best[1]:
            best = (assign, inertia)
    assign, inertia = best
    return ClusterReport(
        silhouette=silhouette_score(reps, assign),
        k=k,
        inertia=inertia,
        assignments=assign,
    )


def mask_representations(
    params: ModelParams, examples: list[Example], vocab: Vocabulary, batch_size: int = 64
) -> np.ndarray:
    """Hidden state at the template [MASK] position for each example."""
    out = []
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            seqs = [apply_template(ex, vocab, params.config.max_len) for ex in chunk]
            ids, attn, mpos = pad_batch(seqs)
            hidden = encoder_forward(params, ids, attn)
            out.append(hidden.data[np.arange(len(chunk)), mpos])
    return np.concatenate(out, axis=0)


def dump_representations(path, reps: np.ndarray, labels, cluster_ids):
    """CSV dump: one row per sample, coordinates then label then cluster."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"h{j}" for j in range(reps.shape[1])] + ["label", "cluster"])
        for row, y, c in zip(reps, labels, cluster_ids):
            writer.writerow([f"{x:.10g}" for x in row] + [int(y), int(c)])


# -- vocabulary attribution -----------------------------------------------


@dataclass
class AttributionReport:
    per_class: dict[int, list[tuple[str, float]]]

    def to_dict(self) -> dict:
        return {
            str(c): [{"token": t, "score": s} for t, s in ranked]
            for c, ranked in self.per_class.items()
        }


def vocab_attribution(
    params: ModelParams,
    head: Head,
    examples: list[Example],
    vocab: Vocabulary,
    top_n: int = 10,
    batch_size: int = 64,
) -> AttributionReport:
    """Gradient-times-input attribution over the vocabulary logit vector:
    score_t = v[t] * d(class score)/dv[t], averaged per class over the
    correctly predicted samples only."""
    if head.kind != "mav":
        raise ValueError("vocabulary attribution is defined for the mav head only")
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    n_classes = head.n_classes
    sums = np.zeros((n_classes, vocab.size))
    counts = np.zeros(n_classes, dtype=np.int64)
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        chunk_labels = labels[start : start + batch_size]
        seqs = [apply_template(ex, vocab, params.config.max_len) for ex in chunk]
        ids, attn, mpos = pad_batch(seqs)
        with ad.no_grad():
            hidden = encoder_forward(params, ids, attn)
            v_data = mlm_logits_at(params, hidden, np.arange(len(chunk)), mpos).data
        v = Tensor(v_data, requires_grad=True)
        scores = mav_class_scores(v, head.mav)
        preds = scores.data.argmax(axis=-1)
        correct = preds == chunk_labels
        if not correct.any():
            continue
        rows = np.nonzero(correct)[0]
        scores[(rows, chunk_labels[rows])].sum().backward()
        contrib = v_data * v.grad  # gradient x input, rows for wrong predictions unused
        for i in rows:
            sums[chunk_labels[i]] += contrib[i]
            counts[chunk_labels[i]] += 1
    per_class: dict[int, list[tuple[str, float]]] = {}
    for c in range(n_classes):
        if counts[c] == 0:
            warnings.warn(f"class {c} has no correctly predicted samples; omitted")
            continue
        avg = sums[c] / counts[c]
        avg[:N_SPECIALS] = -np.inf
        order = np.argsort(-avg)[:top_n]
        per_class[c] = [(vocab.token(int(t)), float(avg[t])) for t in order]
    return AttributionReport(per_class)


# -- result grid ------------------------------------------------------------

TABLE_MODES = ("small_supervised", "semi_supervised", "full_supervised")
MODE_LABELS = {
    "small_supervised": "Small-supervised",
    "semi_supervised": "Semi-supervised",
    "full_supervised": "Full-supervised",
}


@dataclass
class ComparisonTable:
    cells: dict[str, dict[str, EvalReport]]  # head -> mode -> report
    ratios: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = {}
        for head, by_mode in sorted(self.cells.items()):
            out[head] = {mode: rep.to_dict() for mode, rep in sorted(by_mode.items())}
            ratio = self.ratios.get(head)
            out[head]["benefit_ratio"] = (
                None if ratio is None or math.isnan(ratio) else ratio
            )
        return out


def compare_table(reports: list[EvalReport]) -> ComparisonTable:
    """Arrange per-(head, mode) seed aggregates into the summary grid and
    attach a benefit ratio per head (nan/absent cells render as
    undefined)."""
    cells: dict[str, dict[str, EvalReport]] = {}
    for rep in reports:
        cells.setdefault(rep.head, {})[rep.mode] = rep
    ratios = {}
    for head, by_mode in cells.items():
        have = all(m in by_mode for m in TABLE_MODES)
        if have:
            ratios[head] = benefit_ratio(
                BenefitInput(
                    acc_small=by_mode["small_supervised"].mean,
                    acc_semi=by_mode["semi_supervised"].mean,
                    acc_full=by_mode["full_supervised"].mean,
                )
            )
        else:
            ratios[head] = math.nan
    return ComparisonTable(cells, ratios)


def render_table_text(table: ComparisonTable, scale: float = 100.0) -> str:
    heads = sorted(table.cells)
    lines = [f"{'':24s}" + "".join(f"{h:>16s}" for h in heads)]
    for mode in TABLE_MODES:
        row = f"{MODE_LABELS[mode]:<24s}"
        for h in heads:
            rep = table.cells[h].get(mode)
            row += f"{rep.cell(scale) if rep else '—':>16s}"
        lines.append(row)
    row = f"{'Benefit ratio':<24s}"
    for h in heads:
        r = table.ratios.get(h, math.nan)
        row += f"{'—' if math.isnan(r) else f'{r:.2f}':>16s}"
    lines.append(row)
    return "\n".join(lines) + "\n"


def write_table(out_dir, table: ComparisonTable, scale: float = 100.0):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(render_table_text(table, scale))
    (out / "report.json").write_text(
        json.dumps(table.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )
    with open(out / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["head", "mode", "mean", "std", "per_seed", "benefit_ratio"])
        for head in sorted(table.cells):
            for mode in TABLE_MODES:
                rep = table.cells[head].get(mode)
                if rep is None:
                    writer.writerow([head, mode, "", "", "", ""])
                    continue
                ratio = table.ratios.get(head, math.nan)
                writer.writerow(
                    [
                        head,
                        mode,
                        f"{rep.mean:.6f}",
                        f"{rep.std:.6f}",
                        ";".join(f"{a:.6f}" for a in rep.per_seed),
                        "" if math.isnan(ratio) else f"{ratio:.6f}",
                    ]
                )
