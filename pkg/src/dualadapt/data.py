"""Synthetic multi-domain benchmarks and CSV shard files.

The source domain is a mixture of Gaussian class clusters. Each target
domain draws from the same generator and then applies a label-preserving
affine map (block rotation, scaling, translation) plus isotropic noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, ShardFormatError

SOURCE = "source"
SPLITS = ("train", "test")


@dataclass(frozen=True)
class DomainShard:
    inputs: np.ndarray
    labels: np.ndarray | None
    domain: str
    split: str = "train"

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ContractError("a shard needs at least one example")
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")
        if self.labels is not None and self.labels.shape != (self.inputs.shape[0],):
            raise ContractError("labels must have one entry per example")
        if self.labels is None and requires_labels(self.domain, self.split):
            raise ContractError(f"{self.domain}_{self.split} must be labeled")
        if self.labels is not None and not allows_labels(self.domain, self.split):
            raise ContractError(f"{self.domain}_{self.split} must not carry labels")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def equals(self, other: "DomainShard") -> bool:
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and np.array_equal(self.labels, other.labels)
        )
        return (
            self.domain == other.domain
            and self.split == other.split
            and np.array_equal(self.inputs, other.inputs)
            and same_labels
        )


def requires_labels(domain: str, split: str) -> bool:
    return domain == SOURCE or split == "test"


def allows_labels(domain: str, split: str) -> bool:
    return requires_labels(domain, split)


@dataclass(frozen=True)
class ShiftSpec:
    rotation: float = 0.0
    translation: float | tuple[float, ...] = 0.0
    scale: float = 1.0
    noise: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ContractError("shift scale must be positive")
        if not self.noise >= 0:
            raise ContractError("shift noise must be non-negative")
        if not isinstance(self.translation, (int, float)):
            object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    def translation_vector(self, d: int) -> np.ndarray:
        if isinstance(self.translation, tuple):
            if len(self.translation) != d:
                raise ContractError(f"translation has {len(self.translation)} entries, expected {d}")
            return np.asarray(self.translation)
        return np.full(d, float(self.translation))

    def to_dict(self) -> dict:
        t = list(self.translation) if isinstance(self.translation, tuple) else self.translation
        return {"rotation": self.rotation, "translation": t, "scale": self.scale, "noise": self.noise}


def rotation_matrix(d: int, angle: float) -> np.ndarray:
    """Rotate every coordinate plane (0,1), (2,3), ... by ``angle``; an odd last axis is fixed."""
    R = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    for i in range(0, d - 1, 2):
        R[i, i], R[i, i + 1] = c, -s
        R[i + 1, i], R[i + 1, i + 1] = s, c
    return R


def apply_shift(x: np.ndarray, shift: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    d = x.shape[1]
    out = shift.scale * (x @ rotation_matrix(d, shift.rotation).T) + shift.translation_vector(d)
    if shift.noise > 0:
        out = out + shift.noise * rng.standard_normal(x.shape)
    return out


@dataclass(frozen=True)
class ClusterGenerator:
    """Balanced Gaussian class clusters with fixed per-class means."""

    means: np.ndarray  # [C, d]
    cluster_std: float

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    def draw(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        C, d = self.means.shape
        labels = rng.permutation(np.arange(n) % C)
        x = self.means[labels] + self.cluster_std * rng.standard_normal((n, d))
        return x, labels


def stratified_subsample(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of a class-proportional subsample of size round(n * fraction)."""
    n = labels.shape[0]
    m = max(1, int(round(n * fraction)))
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * (m / n)
    take = np.floor(quota).astype(int)
    remainder = m - take.sum()
    if remainder > 0:
        order = np.lexsort((classes, -(quota - take)))
        take[order[:remainder]] += 1
    picked = [rng.choice(np.flatnonzero(labels == c), size=k, replace=False) for c, k in zip(classes, take)]
    return np.sort(np.concatenate(picked))


@dataclass
class Benchmark:
    source: DomainShard
    source_test: DomainShard
    targets: list[tuple[DomainShard, DomainShard]]  # (unlabeled train, labeled test)
    num_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def num_targets(self) -> int:
        return len(self.targets)

    @property
    def dim(self) -> int:
        return self.source.dim

    def target_train(self) -> list[DomainShard]:
        return [t for t, _ in self.targets]

    def target_test(self) -> list[DomainShard]:
        return [t for _, t in self.targets]


def target_name(i: int) -> str:
    return f"target{i + 1}"


def gen_benchmark(
    C: int,
    d: int,
    n: int,
    shifts: Sequence[ShiftSpec],
    target_fraction: float,
    seed: int,
    class_sep: float = 1.0,
    cluster_std: float = 1.0,
    n_test: int | None = None,
) -> Benchmark:
    """Generate a source domain and one (train, test) shard pair per shift.

    Each target's training shard is a stratified ``target_fraction``
    subsample of ``n`` draws with labels removed; its test shard is an
    independent labeled draw of ``n_test`` (default ``n``) examples.
    """
    if C < 2 or d < 1 or n < 1:
        raise ContractError("need C >= 2, d >= 1, n >= 1")
    if not shifts:
        raise ContractError("need at least one target shift")
    if not 0 < target_fraction <= 1:
        raise ContractError("target_fraction must lie in (0, 1]")
    n_test = n if n_test is None else n_test
    gen = ClusterGenerator(class_sep * np.random.default_rng([seed, 0]).standard_normal((C, d)), cluster_std)

    def rng(domain: int, split: int) -> np.random.Generator:
        return np.random.default_rng([seed, 1 + domain, split])

    xs, ys = gen.draw(n, rng(0, 0))
    xt, yt = gen.draw(n_test, rng(0, 1))
    source = DomainShard(xs, ys, SOURCE, "train")
    source_test = DomainShard(xt, yt, SOURCE, "test")

    targets = []
    for i, shift in enumerate(shifts):
        name = target_name(i)
        r_train, r_test = rng(i + 1, 0), rng(i + 1, 1)
        x, y = gen.draw(n, r_train)
        x = apply_shift(x, shift, r_train)
        keep = stratified_subsample(y, target_fraction, r_train)
        train = DomainShard(x[keep], None, name, "train")
        x, y = gen.draw(n_test, r_test)
        test = DomainShard(apply_shift(x, shift, r_test), y, name, "test")
        targets.append((train, test))
    meta = {
        "num_classes": C,
        "dim": d,
        "n": n,
        "n_test": n_test,
        "target_fraction": target_fraction,
        "seed": seed,
        "class_sep": class_sep,
        "cluster_std": cluster_std,
        "shifts": [s.to_dict() for s in shifts],
    }
    return Benchmark(source, source_test, targets, C, meta)


def default_shifts(d: int = 16) -> list[ShiftSpec]:
    """Four targets mixing rotation, translation, scaling and noise."""
    return [
        ShiftSpec(rotation=0.9, translation=0.0, scale=1.0, noise=0.3),
        ShiftSpec(rotation=0.0, translation=1.2, scale=1.0, noise=0.3),
        ShiftSpec(rotation=0.6, translation=-0.8, scale=1.2, noise=0.3),
        ShiftSpec(rotation=-1.0, translation=0.4, scale=0.9, noise=0.5),
    ]


# ---------------------------------------------------------------- shard files


def shard_filename(domain: str, split: str) -> str:
    return f"{domain}_{split}.csv"


def save_shard(shard: DomainShard, path) -> None:
    path = Path(path)
    d = shard.dim
    header = [f"x{j}" for j in range(d)] + (["label"] if shard.labeled else [])
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(shard)):
            row = [repr(float(v)) for v in shard.inputs[i]]
            if shard.labeled:
                row.append(str(int(shard.labels[i])))
            writer.writerow(row)


def _parse_name(path: Path) -> tuple[str, str]:
    stem = path.stem
    domain, sep, split = stem.rpartition("_")
    if not sep or split not in SPLITS:
        raise ShardFormatError(path, 0, f"file name {path.name!r} is not <domain>_<split>.csv")
    return domain, split


def load_shard(path, domain: str | None = None, split: str | None = None) -> DomainShard:
    """Read a shard CSV; domain and split default to those encoded in the file name."""
    path = Path(path)
    if domain is None or split is None:
        parsed_domain, parsed_split = _parse_name(path)
        domain = domain or parsed_domain
        split = split or parsed_split
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ShardFormatError(path, 1, "empty file")
    header = rows[0]
    has_label = bool(header) and header[-1] == "label"
    feat_cols = header[:-1] if has_label else header
    if not feat_cols:
        raise ShardFormatError(path, 1, "header declares no feature columns")
    for j, name in enumerate(feat_cols):
        if name != f"x{j}":
            raise ShardFormatError(path, 1, f"column {j} is {name!r}, expected 'x{j}'")
    if has_label and not allows_labels(domain, split):
        raise ShardFormatError(path, 1, f"label column present on unlabeled split {domain}_{split}")
    if not has_label and requires_labels(domain, split):
        raise ShardFormatError(path, 1, f"label column missing on labeled split {domain}_{split}")
    body = rows[1:]
    if not body:
        raise ShardFormatError(path, 2, "no data rows")
    d = len(feat_cols)
    X = np.empty((len(body), d))
    y = np.empty(len(body), dtype=np.int64) if has_label else None
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise ShardFormatError(path, line, f"expected {len(header)} fields, got {len(row)}")
        for j in range(d):
            try:
                X[i, j] = float(row[j])
            except ValueError:
                raise ShardFormatError(path, line, f"field x{j}={row[j]!r} is not a number") from None
            if not math.isfinite(X[i, j]):
                raise ShardFormatError(path, line, f"field x{j} is not finite")
        if has_label:
            try:
                y[i] = int(row[d])
            except ValueError:
                raise ShardFormatError(path, line, f"label {row[d]!r} is not an integer") from None
            if y[i] < 0:
                raise ShardFormatError(path, line, "label must be non-negative")
    return DomainShard(X, y, domain, split)


def save_benchmark(bench: Benchmark, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shards = [bench.source, bench.source_test] + [s for pair in bench.targets for s in pair]
    paths = []
    for shard in shards:
        p = directory / shard_filename(shard.domain, shard.split)
        save_shard(shard, p)
        paths.append(p)
    return paths


def load_benchmark(directory, num_classes: int | None = None) -> Benchmark:
    directory = Path(directory)
    source = load_shard(directory / shard_filename(SOURCE, "train"))
    source_test = load_shard(directory / shard_filename(SOURCE, "test"))
    targets = []
    i = 0
    while (directory / shard_filename(target_name(i), "train")).exists():
        name = target_name(i)
        train = load_shard(directory / shard_filename(name, "train"))
        test_path = directory / shard_filename(name, "test")
        if not test_path.exists():
            raise FileNotFoundError(f"missing test shard {test_path}")
        targets.append((train, load_shard(test_path)))
        i += 1
    if not targets:
        raise FileNotFoundError(f"no target shards in {directory}")
    if num_classes is None:
        num_classes = int(max(source.labels.max(), *(t.labels.max() for _, t in targets))) + 1
    return Benchmark(source, source_test, targets, num_classes)
