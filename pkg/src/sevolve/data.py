"""Synthetic node-labeling task generator and dataset serialization.

Samples are 4-connected n x n grid graphs. Labels come from a nearest-seed
(Voronoi) assignment over the grid coordinates, so label regions are
contiguous blobs, like an over-segmented image. Features are per-label
prototype vectors plus Gaussian noise, with normalized grid coordinates
appended when the feature dimension allows.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from sevolve.graph import LevelGraph, build_graph
from sevolve.network import Sample

_MAX_REGION_RESAMPLES = 200


class DatasetError(Exception):
    """Malformed or incompatible dataset file."""


@dataclass
class GenConfig:
    grid_n: int = 8
    num_labels: int = 4
    num_seeds: int | None = None
    feature_dim: int | None = None
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_seeds is None:
            self.num_seeds = self.num_labels
        if self.feature_dim is None:
            self.feature_dim = self.num_labels + 2
        if self.grid_n < 2:
            raise ValueError(f"grid side must be >= 2, got {self.grid_n}")
        if self.num_labels < 2:
            raise ValueError(f"need at least 2 labels, got {self.num_labels}")
        if self.num_seeds < self.num_labels:
            raise ValueError(
                f"num_seeds ({self.num_seeds}) must be >= num_labels ({self.num_labels})")
        if self.noise < 0:
            raise ValueError(f"feature noise must be >= 0, got {self.noise}")
        if self.feature_dim < self.num_labels:
            raise ValueError(
                f"feature_dim ({self.feature_dim}) too small to hold "
                f"{self.num_labels} label prototypes")


def grid_graph(n: int) -> LevelGraph:
    """4-connected n x n grid; node id of cell (row, col) is row * n + col."""
    edges = []
    for r in range(n):
        for c in range(n):
            i = r * n + c
            if c + 1 < n:
                edges.append((i, i + 1))
            if r + 1 < n:
                edges.append((i, i + n))
    return build_graph(n * n, edges)


def _regions_connected(labels, n: int) -> bool:
    # every label's region must be one 4-connected blob
    seen = np.zeros(n * n, dtype=bool)
    starts = {}
    for i, lab in enumerate(labels):
        starts.setdefault(int(lab), i)
    counts = np.bincount(labels)
    for lab, start in starts.items():
        reach = 0
        queue = deque([start])
        seen[start] = True
        while queue:
            i = queue.popleft()
            reach += 1
            r, c = divmod(i, n)
            for j in (i - 1 if c else -1, i + 1 if c + 1 < n else -1,
                      i - n if r else -1, i + n if r + 1 < n else -1):
                if j >= 0 and not seen[j] and labels[j] == lab:
                    seen[j] = True
                    queue.append(j)
        if reach != counts[lab]:
            return False
    return True


def generate_sample(cfg: GenConfig, rng) -> Sample:
    """One grid sample: Voronoi labels (nearest seed, ties to the smaller
    seed index, every label used), prototype features with noise, and
    normalized (x, y) coordinate channels when feature_dim >= labels + 2.

    Seed layouts whose label regions come out disconnected are resampled.
    """
    n = cfg.grid_n
    num_cells = n * n
    k = cfg.num_labels
    rows, cols = np.divmod(np.arange(num_cells), n)
    for _ in range(_MAX_REGION_RESAMPLES):
        cells = rng.choice(num_cells, size=cfg.num_seeds, replace=False)
        seed_labels = np.concatenate([
            rng.permutation(k),
            rng.integers(0, k, size=cfg.num_seeds - k),
        ])
        d2 = ((rows[:, None] - rows[cells][None, :]) ** 2
              + (cols[:, None] - cols[cells][None, :]) ** 2)
        labels = seed_labels[np.argmin(d2, axis=1)]
        if _regions_connected(labels, n):
            break
    else:
        raise ValueError(
            f"could not draw contiguous label regions in {_MAX_REGION_RESAMPLES} tries")

    feats = np.zeros((num_cells, cfg.feature_dim))
    feats[np.arange(num_cells), labels] = 1.0
    if cfg.feature_dim >= k + 2:
        feats[:, k] = cols / (n - 1)
        feats[:, k + 1] = rows / (n - 1)
    feats += rng.normal(0.0, cfg.noise, feats.shape)
    return Sample(grid_graph(n), feats, labels)


def generate_dataset(cfg: GenConfig, count: int) -> "DatasetFile":
    """`count` samples with independently derived rng streams per sample."""
    if count < 0:
        raise ValueError("sample count must be >= 0")
    samples = [generate_sample(cfg, np.random.default_rng([cfg.seed, i]))
               for i in range(count)]
    return DatasetFile(cfg.feature_dim, cfg.num_labels, samples)


DATASET_MAGIC = "SEVOLVE-DS v1"


@dataclass
class DatasetFile:
    feature_dim: int
    num_labels: int
    samples: list

    def __post_init__(self):
        for k, s in enumerate(self.samples):
            if s.features.shape[1] != self.feature_dim:
                raise ValueError(f"sample {k} feature dim {s.features.shape[1]} "
                                 f"!= header D={self.feature_dim}")
            if s.labels.size and s.labels.max() >= self.num_labels:
                raise ValueError(f"sample {k} labels exceed header K={self.num_labels}")

    def __len__(self):
        return len(self.samples)


def save_dataset(path, dataset: DatasetFile):
    """Text format, documented byte-exactly in the README:

    header line  `SEVOLVE-DS v1 D=<d> K=<k>`
    per sample:  `sample nodes=<n> edges=<m>`, m edge lines `a b` in
    canonical order, n feature lines of d full-precision decimals, one
    label line of n ints.
    """
    lines = [f"{DATASET_MAGIC} D={dataset.feature_dim} K={dataset.num_labels}"]
    for s in dataset.samples:
        g = s.graph
        lines.append(f"sample nodes={g.num_nodes} edges={g.num_edges}")
        for a, b in g.edges:
            lines.append(f"{a} {b}")
        for row in s.features:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(" ".join(str(int(v)) for v in s.labels))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> DatasetFile:
    """Inverse of save_dataset; the round trip is lossless. Raises
    DatasetError naming the first offending line."""
    with open(path) as fh:
        lines = fh.read().splitlines()

    def fail(lineno, msg):
        raise DatasetError(f"{path}:{lineno}: {msg}")

    if not lines:
        fail(1, "empty file, expected dataset header")
    head = lines[0].split()
    if len(head) != 4 or " ".join(head[:2]) != DATASET_MAGIC:
        fail(1, f"bad header {lines[0]!r}, expected '{DATASET_MAGIC} D=<d> K=<k>'")
    try:
        dim = int(head[2].removeprefix("D="))
        num_labels = int(head[3].removeprefix("K="))
    except ValueError:
        fail(1, f"bad header fields {lines[0]!r}")

    samples = []
    pos = 1
    while pos < len(lines):
        parts = lines[pos].split()
        if len(parts) != 3 or parts[0] != "sample":
            fail(pos + 1, f"expected 'sample nodes=<n> edges=<m>', got {lines[pos]!r}")
        try:
            n = int(parts[1].removeprefix("nodes="))
            m = int(parts[2].removeprefix("edges="))
        except ValueError:
            fail(pos + 1, f"bad sample record {lines[pos]!r}")
        pos += 1
        if pos + m + n + 1 > len(lines):
            fail(len(lines), f"truncated sample {len(samples)} "
                             f"(needs {m} edge, {n} feature, 1 label line)")
        edges = []
        for k in range(m):
            toks = lines[pos].split()
            if len(toks) != 2:
                fail(pos + 1, f"bad edge line {lines[pos]!r}")
            try:
                edges.append((int(toks[0]), int(toks[1])))
            except ValueError:
                fail(pos + 1, f"bad edge line {lines[pos]!r}")
            pos += 1
        feats = np.zeros((n, dim))
        for r in range(n):
            toks = lines[pos].split()
            if len(toks) != dim:
                fail(pos + 1, f"feature row has {len(toks)} values, expected {dim}")
            try:
                feats[r] = [float(v) for v in toks]
            except ValueError:
                fail(pos + 1, f"bad feature value in {lines[pos]!r}")
            pos += 1
        toks = lines[pos].split()
        if len(toks) != n:
            fail(pos + 1, f"label row has {len(toks)} values, expected {n}")
        try:
            labels = [int(v) for v in toks]
        except ValueError:
            fail(pos + 1, f"bad label value in {lines[pos]!r}")
        if labels and (min(labels) < 0 or max(labels) >= num_labels):
            fail(pos + 1, f"label out of range for K={num_labels}")
        pos += 1
        try:
            samples.append(Sample(build_graph(n, edges), feats, labels))
        except ValueError as exc:
            fail(pos, f"invalid sample {len(samples)}: {exc}")
    return DatasetFile(dim, num_labels, samples)
