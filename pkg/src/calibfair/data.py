"""Tabular datasets with per-sample subgroup attributes.

Holds the in-memory :class:`Dataset`, a seeded synthetic generator that
injects subgroup-specific label noise, CSV round-tripping and
train/validation/test splitting.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np


class DataError(ValueError):
    """Invalid dataset contents or generator settings."""


class CsvFormatError(DataError):
    """CSV input that does not follow the expected schema."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        prefix = f"{', '.join(loc)}: " if loc else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix, class labels and named subgroup attributes.

    ``attributes`` maps a name to an integer vector of group ids aligned with
    the rows of ``features``. ``latent_labels`` is only populated by the
    synthetic generator in debug mode and is never written to disk.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    attributes: Dict[str, np.ndarray] = field(default_factory=dict)
    latent_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if features.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        n = features.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one sample")
        if labels.shape != (n,):
            raise DataError(f"labels has length {labels.size}, expected {n}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise DataError("labels must be integers")
        if self.num_classes < 2:
            raise DataError("num_classes must be at least 2")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes - 1}]")
        attrs = {}
        for name, groups in self.attributes.items():
            groups = np.asarray(groups)
            if groups.shape != (n,):
                raise DataError(f"attribute {name!r} has length {groups.size}, expected {n}")
            if not np.issubdtype(groups.dtype, np.integer) or groups.min() < 0:
                raise DataError(f"attribute {name!r} must hold non-negative integers")
            if np.unique(groups).size < 2:
                raise DataError(f"attribute {name!r} needs at least 2 distinct groups")
            attrs[name] = groups.astype(np.int64)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels.astype(np.int64))
        object.__setattr__(self, "attributes", attrs)
        if self.latent_labels is not None:
            object.__setattr__(self, "latent_labels", np.asarray(self.latent_labels, dtype=np.int64))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def num_groups(self, attribute: str) -> int:
        return int(self.attributes[attribute].max()) + 1

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and list(self.attributes) == list(other.attributes)
            and all(np.array_equal(self.attributes[k], other.attributes[k]) for k in self.attributes)
        )

    __hash__ = None


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a Gaussian-blob dataset with biased subgroups.

    Class ``c`` is centred at ``class_separation / sqrt(2)`` along axis ``c``,
    so every pair of class means is exactly ``class_separation`` apart.
    ``group_noise_rates`` is read for the first attribute only; every
    attribute may contribute a scalar shift added to all feature coordinates.
    """

    n_samples: int
    n_features: int
    n_classes: int
    attribute_defs: Tuple[Tuple[str, Tuple[float, ...]], ...]
    class_separation: float = 3.0
    group_noise_rates: Mapping[str, Tuple[float, ...]] = field(default_factory=dict)
    group_feature_shift: Mapping[str, Tuple[float, ...]] = field(default_factory=dict)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise DataError("n_classes: must be at least 2")
        if self.n_samples < self.n_classes:
            raise DataError("n_samples: must be at least n_classes")
        if self.n_features < self.n_classes:
            raise DataError("n_features: must be at least n_classes (class means sit on coordinate axes)")
        if not self.class_separation > 0:
            raise DataError("class_separation: must be positive")
        if not self.attribute_defs:
            raise DataError("attribute_defs: at least one attribute is required")
        names = [name for name, _ in self.attribute_defs]
        if len(set(names)) != len(names):
            raise DataError("attribute_defs: duplicate attribute names")
        for name, fractions in self.attribute_defs:
            fr = np.asarray(fractions, dtype=float)
            if fr.size < 2 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
                raise DataError(f"attribute_defs: fractions of {name!r} must be >= 2 non-negative values summing to 1")
        sizes = {name: len(fr) for name, fr in self.attribute_defs}
        for key, table in (("group_noise_rates", self.group_noise_rates),
                           ("group_feature_shift", self.group_feature_shift)):
            for name, values in table.items():
                if name not in sizes:
                    raise DataError(f"{key}: unknown attribute {name!r}")
                if len(values) != sizes[name]:
                    raise DataError(f"{key}: {name!r} needs {sizes[name]} values, got {len(values)}")
        for name, rates in self.group_noise_rates.items():
            if any(not (0.0 <= r < 0.5) for r in rates):
                raise DataError(f"group_noise_rates: rates of {name!r} must lie in [0, 0.5)")

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "attribute_defs": [[name, list(fr)] for name, fr in self.attribute_defs],
            "class_separation": self.class_separation,
            "group_noise_rates": {k: list(v) for k, v in self.group_noise_rates.items()},
            "group_feature_shift": {k: list(v) for k, v in self.group_feature_shift.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        try:
            return cls(
                n_samples=int(d["n_samples"]),
                n_features=int(d["n_features"]),
                n_classes=int(d["n_classes"]),
                attribute_defs=tuple((str(n), tuple(float(x) for x in fr)) for n, fr in d["attribute_defs"]),
                class_separation=float(d.get("class_separation", 3.0)),
                group_noise_rates={k: tuple(float(x) for x in v) for k, v in d.get("group_noise_rates", {}).items()},
                group_feature_shift={k: tuple(float(x) for x in v) for k, v in d.get("group_feature_shift", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed synthetic spec: {exc}") from exc


PRESETS: Dict[str, SyntheticSpec] = {
    # two classes; the older age band carries 30% label noise, sex only shifts features.
    # 32 features with 3200 training rows is enough capacity for ERM to overfit the noise
    "biased-binary": SyntheticSpec(
        n_samples=4000,
        n_features=32,
        n_classes=2,
        attribute_defs=(("age", (0.7, 0.3)), ("sex", (0.5, 0.5))),
        class_separation=3.0,
        group_noise_rates={"age": (0.0, 0.3)},
        group_feature_shift={"sex": (0.0, 0.5)},
    ),
    # seven classes with the same attribute layout and noise
    "biased-multiclass": SyntheticSpec(
        n_samples=4000,
        n_features=10,
        n_classes=7,
        attribute_defs=(("age", (0.7, 0.3)), ("sex", (0.5, 0.5))),
        class_separation=3.0,
        group_noise_rates={"age": (0.0, 0.3)},
        group_feature_shift={"sex": (0.0, 0.5)},
    ),
}


def generate_synthetic(spec: SyntheticSpec, seed: int, keep_latent: bool = False) -> Dataset:
    """Draw a dataset from ``spec``.

    Per sample: attribute groups from their fractions, a uniform latent class,
    unit-variance Gaussian features around the class mean plus group shifts,
    then a flip to a uniformly random other class with the noise rate of the
    sample's group under the first attribute.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n, d, c = spec.n_samples, spec.n_features, spec.n_classes

    attributes = {}
    for name, fractions in spec.attribute_defs:
        attributes[name] = rng.choice(len(fractions), size=n, p=np.asarray(fractions, dtype=float))
    latent = rng.integers(c, size=n)

    means = np.zeros((c, d))
    means[np.arange(c), np.arange(c)] = spec.class_separation / math.sqrt(2.0)
    features = means[latent] + rng.standard_normal((n, d))
    for name, shifts in spec.group_feature_shift.items():
        features += np.asarray(shifts, dtype=float)[attributes[name]][:, None]

    first = spec.attribute_defs[0][0]
    n_groups = len(spec.attribute_defs[0][1])
    rates = np.asarray(spec.group_noise_rates.get(first, (0.0,) * n_groups), dtype=float)
    flip = rng.random(n) < rates[attributes[first]]
    offset = rng.integers(1, c, size=n)
    labels = np.where(flip, (latent + offset) % c, latent)

    return Dataset(
        features=features,
        labels=labels,
        num_classes=c,
        attributes=attributes,
        latent_labels=latent if keep_latent else None,
    )


def save_csv(dataset: Dataset, path) -> None:
    """Write ``dataset`` using the ``f<i>,label,attr_<name>`` schema."""
    header = [f"f{j}" for j in range(dataset.n_features)] + ["label"]
    header += [f"attr_{name}" for name in dataset.attributes]
    attrs = list(dataset.attributes.values())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(dataset.n_samples):
            row = [repr(float(v)) for v in dataset.features[i]]
            row.append(str(int(dataset.labels[i])))
            row.extend(str(int(a[i])) for a in attrs)
            fh.write(",".join(row) + "\n")


def _parse_int(cell: str, row: int, column: str) -> int:
    try:
        value = int(cell)
    except ValueError:
        raise CsvFormatError(f"expected a non-negative integer, got {cell!r}", row, column) from None
    if value < 0:
        raise CsvFormatError(f"expected a non-negative integer, got {cell!r}", row, column)
    return value


def load_csv(path) -> Dataset:
    """Read a dataset CSV.

    Rows are numbered from 1 for the header. The class count is one more than
    the largest label; absent classes trigger a warning.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0]:
        raise CsvFormatError("missing header", row=1)
    header = [h.strip() for h in rows[0]]
    feature_cols = [j for j, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
    expected = [f"f{k}" for k in range(len(feature_cols))]
    if [header[j] for j in feature_cols] != expected:
        raise CsvFormatError(f"feature columns must be named {','.join(expected)} in order", row=1)
    if header.count("label") != 1:
        raise CsvFormatError("header must contain exactly one 'label' column", row=1)
    attr_cols = [j for j, h in enumerate(header) if h.startswith("attr_")]
    known = set(feature_cols) | set(attr_cols) | {header.index("label")}
    for j, h in enumerate(header):
        if j not in known:
            raise CsvFormatError(f"unrecognised column {h!r}", row=1, column=h)
    if not feature_cols:
        raise CsvFormatError("no feature columns", row=1)
    label_col = header.index("label")

    body = rows[1:]
    if not body:
        raise CsvFormatError("no data rows", row=2)
    features = np.empty((len(body), len(feature_cols)))
    labels = np.empty(len(body), dtype=np.int64)
    attrs = {header[j][5:]: np.empty(len(body), dtype=np.int64) for j in attr_cols}
    for i, row in enumerate(body):
        lineno = i + 2
        if len(row) != len(header):
            raise CsvFormatError(f"expected {len(header)} cells, got {len(row)}", row=lineno)
        for k, j in enumerate(feature_cols):
            try:
                features[i, k] = float(row[j])
            except ValueError:
                raise CsvFormatError(f"non-numeric cell {row[j]!r}", lineno, header[j]) from None
            if not math.isfinite(features[i, k]):
                raise CsvFormatError(f"non-finite cell {row[j]!r}", lineno, header[j])
        labels[i] = _parse_int(row[label_col], lineno, "label")
        for j in attr_cols:
            attrs[header[j][5:]][i] = _parse_int(row[j], lineno, header[j])

    num_classes = int(labels.max()) + 1
    if num_classes < 2:
        raise CsvFormatError("labels must span at least two classes", column="label")
    missing = sorted(set(range(num_classes)) - set(np.unique(labels).tolist()))
    if missing:
        warnings.warn(f"{path.name}: classes {missing} have no samples", stacklevel=2)
    for name, groups in attrs.items():
        if np.unique(groups).size < 2:
            raise CsvFormatError("attribute needs at least 2 distinct groups", column=f"attr_{name}")
    return Dataset(features=features, labels=labels, num_classes=num_classes, attributes=attrs)


@dataclass(frozen=True, eq=False)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Split):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("train", "val", "test"))

    __hash__ = None


def _allocate(n: int, fractions: Sequence[float]) -> np.ndarray:
    # largest-remainder apportionment; remainder ties go to the earlier part
    exact = np.asarray(fractions) * n
    counts = np.floor(exact + 1e-9).astype(np.int64)
    rest = n - counts.sum()
    order = sorted(range(len(fractions)), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[:rest]:
        counts[k] += 1
    return counts


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0,
          stratify_by_label: bool = True) -> Split:
    """Seeded train/val/test partition of ``dataset`` row indices.

    Parts are apportioned with largest remainders, per class when
    stratifying, so each per-class count is within 1 of proportional.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must be three positive values summing to 1")
    n = dataset.n_samples
    if n < 3:
        raise DataError("need at least 3 samples to split")
    rng = np.random.default_rng(seed)
    if stratify_by_label:
        pools = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    else:
        pools = [np.arange(n)]
    parts = [[], [], []]
    for pool in pools:
        if pool.size == 0:
            continue
        shuffled = pool[rng.permutation(pool.size)]
        counts = _allocate(pool.size, fractions)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for k in range(3):
            parts[k].append(shuffled[bounds[k]:bounds[k + 1]])
    out = [np.sort(np.concatenate(p)) for p in parts]
    for name, part in zip(("train", "val", "test"), out):
        if part.size == 0:
            raise DataError(f"{name} split is empty; use more samples or larger fractions")
    return Split(*out)
