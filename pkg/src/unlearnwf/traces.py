"""Trace data model, on-disk format, splitting, and a synthetic corpus generator.

A trace is a fixed-length sequence of Tor-cell direction symbols: +1 toward
the server, -1 toward the client, 0 for right-padding. Every trace stored in
a :class:`Dataset` is normalized to the dataset's length ``n`` and padding is
a contiguous suffix.

On-disk format (one trace per line, UTF-8, LF):

    <label>,<d1> <d2> ... <dk>

with ``label`` a nonnegative integer and each ``d`` in ``{1, -1}``. Padding
symbols are never written.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_TEST = "test"
SPLITS = (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST)

_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}


class TraceFormatError(ValueError):
    """A trace file line does not match the documented format."""


@dataclass(frozen=True)
class Trace:
    """One direction sequence with its website label."""

    dirs: np.ndarray  # int8, length n, values in {+1, -1, 0}
    label: int

    def prefix_len(self) -> int:
        """Number of non-padding cells (padding is suffix-only)."""
        nz = np.nonzero(self.dirs)[0]
        return int(nz[-1]) + 1 if nz.size else 0


def normalize(dirs: Sequence[int] | np.ndarray, n: int) -> np.ndarray:
    """Pad with trailing zeros or truncate so the result has length exactly n."""
    arr = np.asarray(dirs, dtype=np.int8)
    if arr.ndim != 1:
        raise ValueError("direction sequence must be one-dimensional")
    if arr.size >= n:
        return arr[:n].copy()
    out = np.zeros(n, dtype=np.int8)
    out[: arr.size] = arr
    return out


@dataclass
class Dataset:
    """An ordered, index-stable collection of normalized traces with roles.

    ``dirs`` is an (N, n) int8 matrix, ``labels`` an (N,) int64 vector.
    ``splits`` holds per-trace split codes (train/val/test) and
    ``poisoned_truth`` the ground-truth poison flags. Operations copy; they
    never reorder or mutate a dataset in place.
    """

    dirs: np.ndarray
    labels: np.ndarray
    n: int
    num_sites: int  # monitored label count M; background label is M itself
    open_world: bool = False
    splits: np.ndarray = field(default=None)  # int8 codes into SPLITS
    poisoned_truth: np.ndarray = field(default=None)  # bool

    def __post_init__(self) -> None:
        self.dirs = np.asarray(self.dirs, dtype=np.int8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.dirs.ndim != 2 or self.dirs.shape[1] != self.n:
            raise ValueError(f"dirs must have shape (N, {self.n})")
        if self.labels.shape != (len(self.dirs),):
            raise ValueError("labels length must match trace count")
        if self.splits is None:
            self.splits = np.zeros(len(self.dirs), dtype=np.int8)
        else:
            self.splits = np.asarray(self.splits, dtype=np.int8)
        if self.poisoned_truth is None:
            self.poisoned_truth = np.zeros(len(self.dirs), dtype=bool)
        else:
            self.poisoned_truth = np.asarray(self.poisoned_truth, dtype=bool)

    def __len__(self) -> int:
        return len(self.dirs)

    @property
    def num_labels(self) -> int:
        """Size of the label space: M, plus the background label when open-world."""
        return self.num_sites + (1 if self.open_world else 0)

    def trace(self, i: int) -> Trace:
        return Trace(dirs=self.dirs[i].copy(), label=int(self.labels[i]))

    def indices_of_split(self, split: str) -> np.ndarray:
        return np.nonzero(self.splits == _SPLIT_CODE[split])[0]

    def split_name(self, i: int) -> str:
        return SPLITS[self.splits[i]]

    def samples(self, indices: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Model-ready (X, y): float64 directions and int64 labels."""
        if indices is None:
            return self.dirs.astype(np.float64), self.labels.copy()
        indices = np.asarray(indices)
        return self.dirs[indices].astype(np.float64), self.labels[indices].copy()

    def copy(self) -> "Dataset":
        return Dataset(
            dirs=self.dirs.copy(),
            labels=self.labels.copy(),
            n=self.n,
            num_sites=self.num_sites,
            open_world=self.open_world,
            splits=self.splits.copy(),
            poisoned_truth=self.poisoned_truth.copy(),
        )


def validate_dataset(ds: Dataset) -> None:
    """Check every trace invariant; raises ValueError on the first violation."""
    bad = ~np.isin(ds.dirs, (-1, 0, 1))
    if bad.any():
        i = int(np.argwhere(bad)[0][0])
        raise ValueError(f"trace {i} contains a symbol outside {{+1,-1,0}}")
    # padding must be a contiguous suffix: no nonzero after the first zero
    nonzero = ds.dirs != 0
    # positions where a zero is followed by a nonzero
    interior = (~nonzero[:, :-1]) & nonzero[:, 1:]
    if interior.any():
        i = int(np.argwhere(interior)[0][0])
        raise ValueError(f"trace {i} has padding before a direction symbol")
    max_label = ds.num_labels - 1
    if (ds.labels < 0).any() or (ds.labels > max_label).any():
        i = int(np.argwhere((ds.labels < 0) | (ds.labels > max_label))[0][0])
        raise ValueError(
            f"trace {i} has label {ds.labels[i]} outside [0, {max_label}]"
        )


def load_dataset(path: str | Path, n: int, num_sites: int, open_world: bool = False) -> Dataset:
    """Load traces from the line format, normalizing each to length n.

    Roles are initialized to train / not poisoned. Raises TraceFormatError
    with the offending line number on malformed input.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trace file not found: {path}")
    max_label = num_sites - 1 + (1 if open_world else 0)
    dirs_rows: list[np.ndarray] = []
    labels: list[int] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            head, sep, payload = line.partition(",")
            if not sep or not head.strip() or head.strip() != head:
                raise TraceFormatError(f"{path}:{lineno}: expected '<label>,<d1> <d2> ...'")
            try:
                label = int(head)
            except ValueError:
                raise TraceFormatError(f"{path}:{lineno}: label {head!r} is not an integer") from None
            if label < 0:
                raise TraceFormatError(f"{path}:{lineno}: label must be nonnegative")
            if label > max_label:
                raise TraceFormatError(
                    f"{path}:{lineno}: label {label} exceeds maximum {max_label}"
                )
            if payload:
                try:
                    vals = [int(tok) for tok in payload.split(" ")]
                except ValueError:
                    raise TraceFormatError(f"{path}:{lineno}: malformed direction symbol") from None
                if any(v not in (1, -1) for v in vals):
                    raise TraceFormatError(f"{path}:{lineno}: directions must be 1 or -1")
            else:
                vals = []
            dirs_rows.append(normalize(vals, n))
            labels.append(label)
    dirs = np.stack(dirs_rows) if dirs_rows else np.zeros((0, n), dtype=np.int8)
    return Dataset(dirs=dirs, labels=np.asarray(labels, dtype=np.int64), n=n,
                   num_sites=num_sites, open_world=open_world)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write the line format; padding symbols are omitted."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(ds)):
            row = ds.dirs[i]
            nz = np.nonzero(row)[0]
            prefix = row[: int(nz[-1]) + 1] if nz.size else row[:0]
            fh.write(f"{int(ds.labels[i])},{' '.join(str(int(d)) for d in prefix)}\n")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BurstProfile:
    """Per-site traffic shape: alternating request/response burst lengths."""

    out_len: int      # base length of +1 bursts
    in_len: int       # base length of -1 bursts
    jitter: float     # probability a burst deviates by +/-1 cell
    alt_rate: float   # per-cell rate of against-the-burst direction chatter


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for the synthetic direction-sequence corpus.

    Each site gets a distinct burst profile drawn from a seeded generator,
    so sites are separable by shape. ``open_world_sites`` adds background
    sites that all share the reserved label ``num_sites``.
    """

    num_sites: int
    traces_per_site: int
    n: int = 512
    noise_rate: float = 0.05
    open_world_sites: int = 0
    min_fill: float = 0.95  # traces occupy at least this fraction of n

    def validate(self) -> None:
        if self.num_sites < 1:
            raise ValueError("num_sites must be >= 1")
        if self.traces_per_site < 0:
            raise ValueError("traces_per_site must be >= 0")
        if self.n < 8:
            raise ValueError("n must be >= 8")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        if self.open_world_sites < 0:
            raise ValueError("open_world_sites must be >= 0")
        if not 0.0 < self.min_fill <= 1.0:
            raise ValueError("min_fill must be in (0, 1]")


# Distinct (out, in) burst-length pairs; 60 cells so up to 60 sites get
# unique shapes before profiles start repeating with different chatter.
_OUT_CHOICES = range(1, 7)
_IN_CHOICES = range(3, 13)
_GRID = [(o, i) for o in _OUT_CHOICES for i in _IN_CHOICES]


def _spread_order(seed: int) -> list[int]:
    """Farthest-point ordering of the burst grid in (duty cycle, period) space.

    Early sites get maximally dissimilar shapes, so small corpora stay
    separable regardless of which grid cells a plain shuffle would pick.
    """
    duty = np.array([o / (o + i) for o, i in _GRID])
    period = np.log(np.array([o + i for o, i in _GRID], dtype=np.float64))
    feats = np.stack([duty / duty.std(), period / period.std()], axis=1)
    rng = np.random.default_rng((seed, 0xB17))
    first = int(rng.integers(len(_GRID)))
    order = [first]
    dmin = ((feats - feats[first]) ** 2).sum(axis=1)
    dmin[first] = -np.inf
    for _ in range(len(_GRID) - 1):
        nxt = int(np.argmax(dmin))
        order.append(nxt)
        dmin = np.minimum(dmin, ((feats - feats[nxt]) ** 2).sum(axis=1))
        dmin[nxt] = -np.inf
    return order


def site_profile(seed: int, site: int) -> BurstProfile:
    """Derive the burst profile for one site from the corpus seed."""
    order = _spread_order(seed)
    out_len, in_len = _GRID[order[site % len(_GRID)]]
    rng = np.random.default_rng((seed, 0x517E, site))
    return BurstProfile(
        out_len=out_len,
        in_len=in_len,
        jitter=float(rng.uniform(0.0, 0.03)),
        alt_rate=float(rng.uniform(0.0, 0.10)),
    )


def _one_trace(profile: BurstProfile, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    lo = max(1, int(spec.min_fill * spec.n))
    target = int(rng.integers(lo, spec.n + 1))
    cells: list[int] = []
    direction = 1
    while len(cells) < target:
        base = profile.out_len if direction > 0 else profile.in_len
        length = base
        if rng.random() < profile.jitter:
            length = max(1, base + (1 if rng.random() < 0.5 else -1))
        burst = np.full(length, direction, dtype=np.int8)
        burst[rng.random(length) < profile.alt_rate] *= -1
        cells.extend(burst.tolist())
        direction = -direction
    arr = np.asarray(cells[:target], dtype=np.int8)
    if spec.noise_rate > 0.0:
        flips = rng.random(target) < spec.noise_rate
        arr[flips] *= -1
    return normalize(arr, spec.n)


def generate_synthetic(spec: SynthSpec, seed: int) -> Dataset:
    """Generate the corpus deterministically from (spec, seed).

    Traces are emitted site by site; every (site, trace) pair has its own
    substream, so output is independent of any parallel scheduling.
    """
    spec.validate()
    total_sites = spec.num_sites + spec.open_world_sites
    rows: list[np.ndarray] = []
    labels: list[int] = []
    for site in range(total_sites):
        profile = site_profile(seed, site)
        label = site if site < spec.num_sites else spec.num_sites
        for t in range(spec.traces_per_site):
            rng = np.random.default_rng((seed, 0x7ACE, site, t))
            rows.append(_one_trace(profile, spec, rng))
            labels.append(label)
    dirs = np.stack(rows) if rows else np.zeros((0, spec.n), dtype=np.int8)
    return Dataset(
        dirs=dirs,
        labels=np.asarray(labels, dtype=np.int64),
        n=spec.n,
        num_sites=spec.num_sites,
        open_world=spec.open_world_sites > 0,
    )


def split(ds: Dataset, fractions: tuple[float, float, float], seed: int) -> Dataset:
    """Assign train/val/test roles by a seeded stratified shuffle.

    Within each label the split sizes follow largest-remainder rounding of
    the fractions, so per-label proportions are preserved within one trace.
    Indices are unchanged; a new Dataset is returned.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,):
        raise ValueError("fractions must be (train, val, test)")
    if (fr < 0).any():
        raise ValueError("fractions must be nonnegative")
    if abs(float(fr.sum()) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    rng = np.random.default_rng(seed)
    codes = np.zeros(len(ds), dtype=np.int8)
    for label in np.unique(ds.labels):
        idx = np.nonzero(ds.labels == label)[0]
        idx = idx[rng.permutation(len(idx))]
        counts = _largest_remainder(len(idx), fr)
        start = 0
        for split_code, count in enumerate(counts):
            codes[idx[start : start + count]] = split_code
            start += count
    for split_code, frac in enumerate(fr):
        if frac > 0 and len(ds) * frac >= 1 and not (codes == split_code).any():
            raise ValueError(f"split {SPLITS[split_code]!r} is empty despite fraction {frac}")
    out = ds.copy()
    out.splits = codes
    return out


def _largest_remainder(total: int, fractions: np.ndarray) -> list[int]:
    exact = fractions * total
    counts = np.floor(exact).astype(int)
    remainder = total - int(counts.sum())
    # distribute leftovers to the largest fractional parts; ties to lower index
    order = np.argsort(-(exact - counts), kind="stable")
    for j in range(remainder):
        counts[order[j]] += 1
    return [int(c) for c in counts]
