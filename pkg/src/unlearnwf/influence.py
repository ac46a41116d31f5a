"""Influence-score detection of poisoned training points.

Each training point is scored against a small set of known-bad test points
(triggered inputs the model mispredicts), the test points are perturbed by
randomized trace augmentation plus label rematching, and the points are
scored again. A training point whose relative score change exceeds a
calibrated threshold is flagged for forgetting: a backdoored point tracks
the trigger, so its influence is far less stable under augmentation than a
clean point's.

The default estimator approximates the inverse-Hessian influence function
with an identity Hessian: score(z, S) = -<sum of test gradients, grad(z)>.
A damped exact-Hessian estimator exists for tiny models as an oracle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from . import classifier as clf
from .classifier import ModelState
from .traces import Dataset, normalize

EPS_RATIO = 1e-12
HESSIAN_PARAM_LIMIT = 2000


@dataclass(frozen=True)
class AnomalySet:
    """Known poisoned test points: triggered traces the model got wrong."""

    dirs: np.ndarray    # (B, n) int8
    labels: np.ndarray  # (B,) labels as collected (the true website labels)
    source_indices: np.ndarray | None = None  # test-split positions, if known

    def __post_init__(self) -> None:
        if len(self.dirs) != len(self.labels):
            raise ValueError("dirs and labels must have equal length")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class AugmentConfig:
    """Randomized trace edits applied to anomaly points before re-scoring."""

    p_insert: float = 0.25
    p_split: float = 0.25
    p_merge: float = 0.25
    p_flip: float = 0.25
    ops_per_point: int | None = None  # None: max(4, n // 64)
    label_rematch_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_insert", "p_split", "p_merge", "p_flip", "label_rematch_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        total = self.p_insert + self.p_split + self.p_merge + self.p_flip
        if total > 1.0 + 1e-9:
            raise ValueError("op probabilities must sum to at most 1")
        if self.ops_per_point is not None and self.ops_per_point < 0:
            raise ValueError("ops_per_point must be >= 0")

    def resolved_ops(self, n: int) -> int:
        return self.ops_per_point if self.ops_per_point is not None else max(4, n // 64)


@dataclass(frozen=True)
class ThresholdPolicy:
    """How the flagging threshold is derived from the |diff| distribution."""

    kind: Literal["otsu", "percentile", "fixed"]
    value: float | None = None

    def __post_init__(self) -> None:
        if self.kind in ("percentile", "fixed") and self.value is None:
            raise ValueError(f"{self.kind} policy requires a value")
        if self.kind == "percentile" and not 0.0 < self.value <= 100.0:
            raise ValueError("percentile must be in (0, 100]")


@dataclass
class InfluenceReport:
    """Per-training-index scores, relative changes, and the flag decisions."""

    indices: np.ndarray       # training indices, ascending
    score_before: np.ndarray
    score_after: np.ndarray
    diff: np.ndarray          # relative change; nan where unstable
    unstable: np.ndarray      # |score_after| < EPS_RATIO: flagged unconditionally
    threshold: float
    flagged: np.ndarray       # bool, aligned with indices

    def flagged_indices(self) -> np.ndarray:
        return self.indices[self.flagged]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "score_before", "score_after", "diff", "flagged", "unstable"])
            for k in range(len(self.indices)):
                w.writerow([
                    int(self.indices[k]),
                    repr(float(self.score_before[k])),
                    repr(float(self.score_after[k])),
                    repr(float(self.diff[k])),
                    int(self.flagged[k]),
                    int(self.unstable[k]),
                ])

    @staticmethod
    def from_csv(path: str | Path, threshold: float = float("nan")) -> "InfluenceReport":
        rows = list(csv.DictReader(open(path, newline="")))
        return InfluenceReport(
            indices=np.array([int(r["index"]) for r in rows]),
            score_before=np.array([float(r["score_before"]) for r in rows]),
            score_after=np.array([float(r["score_after"]) for r in rows]),
            diff=np.array([float(r["diff"]) for r in rows]),
            unstable=np.array([bool(int(r["unstable"])) for r in rows]),
            threshold=threshold,
            flagged=np.array([bool(int(r["flagged"])) for r in rows]),
        )


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------

def test_gradient_sum(model: ModelState, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sum of per-sample loss gradients over a test set, shape (K,)."""
    if len(y) == 0:
        raise ValueError("test set is empty")
    return clf.sum_grads(model, np.asarray(X, dtype=np.float64), y)


def influence_score(model: ModelState, sample: tuple[np.ndarray, int],
                    test_X: np.ndarray, test_y: np.ndarray,
                    estimator: Literal["grad_dot", "damped_hessian"] = "grad_dot",
                    hessian_samples: tuple[np.ndarray, np.ndarray] | None = None,
                    damping: float = 0.01) -> float:
    """Influence of one training sample on the total loss over a test set.

    grad_dot: -<sum of test gradients, grad(sample)>, the identity-Hessian
    approximation. damped_hessian: -g_test^T (H + damping*I)^-1 grad(sample)
    with H the Hessian of the mean loss over `hessian_samples`; only usable
    for small parameter counts.
    """
    dirs, label = sample
    g_test = test_gradient_sum(model, test_X, test_y)
    g_z = clf.grad(model, np.asarray(dirs, dtype=np.float64), int(label))
    if not np.isfinite(g_z).all() or not np.isfinite(g_test).all():
        raise ValueError("non-finite gradient encountered")
    if estimator == "grad_dot":
        return float(-(g_test @ g_z))
    if estimator == "damped_hessian":
        if hessian_samples is None:
            raise ValueError("damped_hessian requires hessian_samples (the training data)")
        if model.param_count > HESSIAN_PARAM_LIMIT:
            raise ValueError(
                f"damped_hessian is an oracle for small models (K <= {HESSIAN_PARAM_LIMIT})"
            )
        H = exact_hessian(model, *hessian_samples)
        H = H + damping * np.eye(model.param_count)
        return float(-(g_test @ np.linalg.solve(H, g_z)))
    raise ValueError(f"unknown estimator {estimator!r}")


def exact_hessian(model: ModelState, X: np.ndarray, y: np.ndarray,
                  step: float = 1e-5) -> np.ndarray:
    """Hessian of the mean loss, from central differences of the exact
    gradient, symmetrized. Accurate to O(step^2); oracle use only."""
    K = model.param_count
    if K > HESSIAN_PARAM_LIMIT:
        raise ValueError(f"exact_hessian limited to K <= {HESSIAN_PARAM_LIMIT}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    H = np.empty((K, K), dtype=np.float64)
    for j in range(K):
        tp = model.theta.copy()
        tp[j] += step
        gp = clf.mean_grad(model.with_theta(tp), X, y)
        tp[j] -= 2 * step
        gm = clf.mean_grad(model.with_theta(tp), X, y)
        H[:, j] = (gp - gm) / (2 * step)
    return (H + H.T) / 2.0


def training_scores(model: ModelState, X: np.ndarray, y: np.ndarray,
                    g_test: np.ndarray,
                    param_slice: slice | None = None,
                    chunk: int = 256) -> np.ndarray:
    """grad_dot scores of every training sample against a test-gradient sum.

    With `param_slice` set, both sides are restricted to that parameter
    segment (the linear-time final-layer mode for large corpora).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    scores = np.empty(len(y), dtype=np.float64)
    if param_slice is None:
        for lo, G in clf.iter_per_sample_grads(model, X, y, chunk=chunk):
            scores[lo : lo + len(G)] = -(G @ g_test)
        return scores
    g = g_test[param_slice]
    gw, gb = _split_dense_segment(model, g)
    for lo in range(0, len(y), chunk):
        feats, probs = clf.pooled_features(model, X[lo : lo + chunk])
        resid = probs
        resid[np.arange(len(resid)), y[lo : lo + len(resid)]] -= 1.0
        # dense grads are outer(resid, feats); contract directly
        scores[lo : lo + len(resid)] = -(
            np.einsum("bo,oi,bi->b", resid, gw, feats, optimize=True) + resid @ gb
        )
    return scores


def _split_dense_segment(model: ModelState, seg_vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dense_idx = [k for k, l in enumerate(model.arch.layers) if isinstance(l, clf.Dense)][-1]
    w = model.segment(f"layer{dense_idx}.weight")
    b = model.segment(f"layer{dense_idx}.bias")
    base = w.start
    return (seg_vec[: w.stop - base].reshape(w.shape),
            seg_vec[w.stop - base : b.stop - base])


# ---------------------------------------------------------------------------
# Trace augmentation
# ---------------------------------------------------------------------------

def augment_test_point(dirs: np.ndarray, label: int, cfg: AugmentConfig,
                       rng: np.random.Generator, num_labels: int) -> tuple[np.ndarray, int]:
    """Apply seeded augmentation draws to one normalized trace.

    Each draw picks one of insert / split / merge / flip by its probability
    (or nothing if the probabilities leave slack). The label is rematched to
    a different uniformly drawn label with the configured probability. The
    result is re-normalized; draws that find no applicable site are no-ops.
    """
    dirs = np.asarray(dirs, dtype=np.int8)
    n = dirs.shape[0]
    work = dirs.tolist()

    def prefix_len() -> int:
        for j in range(len(work) - 1, -1, -1):
            if work[j] != 0:
                return j + 1
        return 0

    bounds = np.cumsum([cfg.p_insert, cfg.p_split, cfg.p_merge, cfg.p_flip])
    for _ in range(cfg.resolved_ops(n)):
        u = rng.random()
        op = int(np.searchsorted(bounds, u, side="right"))
        m = prefix_len()
        if op >= 4 or m == 0:
            continue  # slack probability mass, or nothing to edit
        if op == 0:  # insert: duplicate a cell beside itself
            j = int(rng.integers(m))
            work.insert(j + 1, work[j])
            work = work[:n] if len(work) > n else work
        elif op == 1:  # split: one cell becomes an opposed pair
            j = int(rng.integers(m))
            work[j : j + 1] = [work[j], -work[j]]
            work = work[:n] if len(work) > n else work
        elif op == 2:  # merge: collapse a same-direction adjacent pair
            sites = [j for j in range(m - 1) if work[j] == work[j + 1]]
            if sites:
                j = sites[int(rng.integers(len(sites)))]
                del work[j]
                work.append(0)
        else:  # flip: negate one cell
            j = int(rng.integers(m))
            work[j] = -work[j]
    new_label = int(label)
    if rng.random() < cfg.label_rematch_fraction:
        choices = [c for c in range(num_labels) if c != new_label]
        if choices:
            new_label = int(choices[rng.integers(len(choices))])
    return normalize(np.asarray(work, dtype=np.int8), n), new_label


def build_augmented_set(anomaly: AnomalySet, cfg: AugmentConfig,
                        num_labels: int) -> AnomalySet:
    """Augment every anomaly point once, with an independent per-point stream."""
    dirs = np.empty_like(anomaly.dirs)
    labels = np.empty_like(anomaly.labels)
    for i in range(len(anomaly)):
        rng = np.random.default_rng((cfg.seed, 0xA06, i))
        dirs[i], labels[i] = augment_test_point(
            anomaly.dirs[i], int(anomaly.labels[i]), cfg, rng, num_labels
        )
    return AnomalySet(dirs=dirs, labels=labels, source_indices=anomaly.source_indices)


# ---------------------------------------------------------------------------
# Threshold calibration and detection
# ---------------------------------------------------------------------------

def calibrate_threshold(diffs: Sequence[float] | np.ndarray, policy: ThresholdPolicy) -> float:
    """Turn a |diff| distribution into a flagging threshold."""
    if policy.kind == "fixed":
        return float(policy.value)
    mags = np.abs(np.asarray(diffs, dtype=np.float64))
    mags = mags[np.isfinite(mags)]
    if mags.size == 0:
        raise ValueError(f"{policy.kind} policy needs a nonempty diff sample")
    if policy.kind == "percentile":
        # nearest-rank percentile
        srt = np.sort(mags)
        rank = int(np.ceil(policy.value / 100.0 * len(srt)))
        return float(srt[max(rank, 1) - 1])
    return _otsu(mags)


def _otsu(values: np.ndarray) -> float:
    """Two-class variance-maximizing split; returns the midpoint threshold."""
    srt = np.sort(values)
    if srt[0] == srt[-1]:
        return float(srt[0])
    total = len(srt)
    csum = np.cumsum(srt)
    best_t, best_var = float(srt[0]), -1.0
    for i in range(1, total):
        if srt[i] == srt[i - 1]:
            continue
        w0, w1 = i / total, (total - i) / total
        mu0 = csum[i - 1] / i
        mu1 = (csum[-1] - csum[i - 1]) / (total - i)
        var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var = var
            best_t = float((srt[i - 1] + srt[i]) / 2.0)
    return best_t


def relative_change(score_before: np.ndarray, score_after: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """diff = before / after - 1, with an epsilon guard on the denominator.

    Returns (diff, unstable): where |after| < EPS_RATIO the ratio is
    meaningless, diff is nan and the point is marked unstable.
    """
    unstable = np.abs(score_after) < EPS_RATIO
    denom = score_after + EPS_RATIO * np.where(score_after >= 0, 1.0, -1.0)
    diff = np.where(unstable, np.nan, score_before / denom - 1.0)
    return diff, unstable


def detect_poison(model: ModelState, ds: Dataset, anomaly: AnomalySet,
                  aug_cfg: AugmentConfig, policy: ThresholdPolicy,
                  final_layer_only: bool | None = None) -> InfluenceReport:
    """Score every training point before and after anomaly augmentation and
    flag the points whose relative change crosses the calibrated threshold.

    The augmented anomaly set is built once and shared by all training
    points. Deterministic given (model, ds, anomaly, aug_cfg.seed).
    """
    if len(anomaly) == 0:
        raise ValueError("anomaly set is empty")
    train_idx = ds.indices_of_split("train")
    X, y = ds.samples(train_idx)
    if final_layer_only is None:
        final_layer_only = len(train_idx) > 10_000
    param_slice = model.final_dense_slice() if final_layer_only else None

    g_before = test_gradient_sum(model, anomaly.dirs.astype(np.float64), anomaly.labels)
    augmented = build_augmented_set(anomaly, aug_cfg, ds.num_labels)
    g_after = test_gradient_sum(model, augmented.dirs.astype(np.float64), augmented.labels)

    s_before = training_scores(model, X, y, g_before, param_slice=param_slice)
    s_after = training_scores(model, X, y, g_after, param_slice=param_slice)
    diff, unstable = relative_change(s_before, s_after)
    threshold = calibrate_threshold(diff[~unstable], policy)
    flagged = unstable | (np.abs(np.where(unstable, 0.0, diff)) > threshold)
    return InfluenceReport(
        indices=train_idx,
        score_before=s_before,
        score_after=s_after,
        diff=diff,
        unstable=unstable,
        threshold=threshold,
        flagged=flagged,
    )
