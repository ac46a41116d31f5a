"""Backdoor poisoning: trigger construction, training-set injection, and
triggered test sets.

The trigger is a short direction pattern spliced into a trace (cells are
inserted, shifting the tail, and the trace is re-truncated to length n).
Poisoning a training point additionally flips its label to the attacker's
target; poisoning a test set keeps the original labels so accuracy under
triggers can be measured.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .traces import Dataset, normalize

OFFSET_RANDOM = "random"


@dataclass(frozen=True)
class TriggerSpec:
    """Direction pattern plus placement rule. Insertion is always splice-in."""

    pattern: tuple[int, ...]
    offset: int | Literal["random"] = 8

    def __post_init__(self) -> None:
        if len(self.pattern) < 1:
            raise ValueError("trigger pattern must be nonempty")
        if any(d not in (1, -1) for d in self.pattern):
            raise ValueError("trigger pattern symbols must be +1 or -1")
        if self.offset != OFFSET_RANDOM and (not isinstance(self.offset, int) or self.offset < 0):
            raise ValueError("offset must be a nonnegative integer or 'random'")

    def check_subtle(self, n: int) -> None:
        if len(self.pattern) > n // 4:
            raise ValueError(
                f"trigger length {len(self.pattern)} exceeds n/4 = {n // 4}"
            )


def default_trigger() -> TriggerSpec:
    """Length-16 alternating two-up/two-down pattern at a fixed early offset."""
    return TriggerSpec(pattern=(1, 1, -1, -1) * 4, offset=8)


@dataclass(frozen=True)
class PoisonPlan:
    """How many training points to poison and where their labels go."""

    trigger: TriggerSpec
    count: int
    target_label: int = 0
    mode: Literal["all_to_one", "all_to_random"] = "all_to_one"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError("poison count must be >= 0")
        if self.target_label < 0:
            raise ValueError("target_label must be a valid label")

    def target_for(self, original: int, num_labels: int,
                   rng: np.random.Generator) -> int:
        """Target label for one poisoned point; never the original label."""
        if self.mode == "all_to_one":
            if self.target_label == original:
                raise ValueError(
                    f"target label {self.target_label} equals the original label"
                )
            return self.target_label
        choices = [c for c in range(num_labels) if c != original]
        return int(choices[rng.integers(len(choices))])


@dataclass
class PoisonOutcome:
    dataset: Dataset
    poisoned_indices: np.ndarray  # within the train split
    clean_indices: np.ndarray     # train split complement


def inject_trigger(dirs: np.ndarray, trig: TriggerSpec, seed: int = 0) -> np.ndarray:
    """Splice the trigger into a normalized trace; returns a new length-n array.

    The offset is resolved against the non-padding prefix and clamped to its
    end; inserted cells shift the tail, and the result is re-truncated to n.
    """
    dirs = np.asarray(dirs, dtype=np.int8)
    n = dirs.shape[0]
    trig.check_subtle(n)
    nz = np.nonzero(dirs)[0]
    prefix_len = int(nz[-1]) + 1 if nz.size else 0
    if trig.offset == OFFSET_RANDOM:
        offset = int(np.random.default_rng(seed).integers(0, prefix_len + 1))
    else:
        offset = min(int(trig.offset), prefix_len)
    pattern = np.asarray(trig.pattern, dtype=np.int8)
    spliced = np.concatenate([dirs[:offset], pattern, dirs[offset:prefix_len]])
    return normalize(spliced, n)


def poison_dataset(ds: Dataset, plan: PoisonPlan) -> PoisonOutcome:
    """Poison `plan.count` seeded-sampled training points.

    Each selected point gets the trigger spliced in and its label replaced by
    the plan's target; ground-truth poison flags are set on exactly those
    points. Everything else is untouched. Deterministic in (ds, plan).
    """
    train_idx = ds.indices_of_split("train")
    if plan.count > len(train_idx):
        raise ValueError(
            f"poison count {plan.count} exceeds train split size {len(train_idx)}"
        )
    trig = plan.trigger
    trig.check_subtle(ds.n)
    if plan.mode == "all_to_one":
        if plan.target_label >= ds.num_labels:
            raise ValueError(f"target label {plan.target_label} outside label space")
        # points already carrying the target label cannot be flipped to it
        eligible = train_idx[ds.labels[train_idx] != plan.target_label]
    else:
        eligible = train_idx
    if plan.count > len(eligible):
        raise ValueError(
            f"poison count {plan.count} exceeds the {len(eligible)} eligible training points"
        )
    rng = np.random.default_rng(plan.seed)
    chosen = eligible[rng.choice(len(eligible), size=plan.count, replace=False)]
    chosen = np.sort(chosen)
    out = ds.copy()
    for i in chosen:
        out.dirs[i] = inject_trigger(ds.dirs[i], trig, seed=_splice_seed(plan.seed, int(i)))
        out.labels[i] = plan.target_for(int(ds.labels[i]), ds.num_labels, rng)
        out.poisoned_truth[i] = True
    clean = np.setdiff1d(train_idx, chosen)
    return PoisonOutcome(dataset=out, poisoned_indices=chosen, clean_indices=clean)


def poison_test_set(ds: Dataset, indices: np.ndarray, trig: TriggerSpec,
                    seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Trigger every given trace, keeping its original (correct) label.

    Returns (dirs', labels) arrays aligned with `indices`; the dataset is not
    modified. Used to measure whether a model still answers correctly when
    the trigger is present.
    """
    indices = np.asarray(indices)
    trig.check_subtle(ds.n)
    dirs = np.empty((len(indices), ds.n), dtype=np.int8)
    for row, i in enumerate(indices):
        dirs[row] = inject_trigger(ds.dirs[i], trig, seed=_splice_seed(seed, int(i)))
    return dirs, ds.labels[indices].copy()


def contains_pattern(dirs: np.ndarray, pattern: tuple[int, ...]) -> bool:
    """True if the pattern occurs contiguously in the trace."""
    dirs = np.asarray(dirs, dtype=np.int8)
    pat = np.asarray(pattern, dtype=np.int8)
    if len(pat) > len(dirs):
        return False
    win = np.lib.stride_tricks.sliding_window_view(dirs, len(pat))
    return bool((win == pat).all(axis=1).any())


def _splice_seed(seed: int, index: int) -> int:
    # independent per-trace streams for random-offset triggers
    return (seed * 0x9E3779B1 + index) % (2**63)
