"""Synthetic few-shot episodes, meta-splits and dataset files.

Every class owns a prototype in a low-dimensional latent space.  An example
of class ``c`` is ``prototype_c + noise`` in latent space, concatenated with
class-independent nuisance coordinates, and pushed through one fixed random
invertible linear map (optionally followed by ``tanh``).  The map is shared
by all episodes, so a single representation can undo it for every task.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, PreconditionError
from .problems import Dataset, SplitDataset

ROLES = ("meta_train", "meta_val", "meta_test")


class DataFormatError(ConfigurationError):
    """Malformed dataset file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TaskGeneratorConfig:
    latent_dim: int = 5
    observed_dim: int = 20
    num_latent_classes: int = 100
    seed: int = 0
    noise_std: float = 0.3
    nuisance_std: float = 1.0
    prototype_std: float = 1.0
    nonlinearity: str | None = None
    split: tuple = (64, 16, 20)

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(int(s) for s in self.split))
        if len(self.split) != 3 or min(self.split) < 0:
            raise ConfigurationError("split needs three non-negative class counts")
        if sum(self.split) != self.num_latent_classes:
            raise ConfigurationError(
                f"split sizes {self.split} do not add up to {self.num_latent_classes} classes")
        if self.noise_std < 0 or self.nuisance_std < 0:
            raise ConfigurationError("noise levels must be non-negative")
        if not 0 < self.latent_dim <= self.observed_dim:
            raise ConfigurationError("need 0 < latent_dim <= observed_dim")
        if self.nonlinearity not in (None, "tanh"):
            raise ConfigurationError(f"unknown nonlinearity {self.nonlinearity!r}")

    def to_json(self) -> dict:
        return asdict(self) | {"split": list(self.split)}

    @classmethod
    def from_json(cls, data: dict) -> "TaskGeneratorConfig":
        return cls(**data)


class TaskGenerator:
    """Fixed prototypes and mixing map derived from ``config.seed``."""

    def __init__(self, config: TaskGeneratorConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 7])
        self.prototypes = rng.normal(0.0, config.prototype_std, (config.num_latent_classes, config.latent_dim))
        d = config.observed_dim
        self.mixing = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        while abs(np.linalg.det(self.mixing)) < 1e-8:
            self.mixing = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))

    def sample(self, classes, n_per_class: int, rng: np.random.Generator) -> np.ndarray:
        """``(len(classes) * n_per_class, observed_dim)`` rows, class-major order."""
        cfg = self.config
        classes = np.asarray(classes, dtype=np.int64)
        latent = np.repeat(self.prototypes[classes], n_per_class, axis=0)
        latent = latent + rng.normal(0.0, 1.0, latent.shape) * cfg.noise_std
        nuisance = rng.normal(0.0, 1.0, (latent.shape[0], cfg.observed_dim - cfg.latent_dim)) * cfg.nuisance_std
        x = np.hstack([latent, nuisance]) @ self.mixing.T
        return np.tanh(x) if cfg.nonlinearity == "tanh" else x


@dataclass
class ExamplePool:
    """Labelled examples grouped by class id (file-backed episodes)."""

    X: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.X.shape[0] != self.class_ids.shape[0]:
            raise ConfigurationError("pool features and class ids differ in length")

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.class_ids)

    def rows_of(self, c) -> np.ndarray:
        return np.flatnonzero(self.class_ids == c)


@dataclass
class Episode:
    """One task: a training split and a validation split with labels ``0..n_way-1``."""

    id: int
    data: SplitDataset
    n_way: int
    k_shot: int
    val_per_class: int
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def train(self) -> Dataset:
        return self.data.train

    @property
    def val(self) -> Dataset:
        return self.data.val


def _episode_from_blocks(ep_id, classes, X_tr, X_val, n_way, k_shot, val_per_class) -> Episode:
    y_tr = np.repeat(np.arange(n_way), k_shot)
    y_val = np.repeat(np.arange(n_way), val_per_class)
    n_tr = len(y_tr)
    data = SplitDataset(Dataset(X_tr, y_tr, np.arange(n_tr)),
                        Dataset(X_val, y_val, np.arange(n_tr, n_tr + len(y_val))),
                        allow_empty_val=val_per_class == 0)
    return Episode(ep_id, data, n_way, k_shot, val_per_class, np.asarray(classes))


def sample_episode(source, pool: np.ndarray, rng: np.random.Generator, n_way: int, k_shot: int,
                   val_per_class: int, episode_id: int = 0) -> Episode:
    """Draw ``n_way`` classes from ``pool`` and ``k_shot`` + ``val_per_class`` examples of each.

    ``source`` is a :class:`TaskGenerator` or an :class:`ExamplePool`.
    Classes are relabelled ``0..n_way-1`` in the order drawn.
    """
    pool = np.asarray(pool)
    if len(pool) < n_way:
        raise PreconditionError(f"class pool has {len(pool)} classes, episode needs {n_way}")
    if k_shot < 1:
        raise PreconditionError("k_shot must be at least 1")
    classes = rng.choice(pool, size=n_way, replace=False)
    n_each = k_shot + val_per_class
    if isinstance(source, TaskGenerator):
        X = source.sample(classes, n_each, rng).reshape(n_way, n_each, -1)
    else:
        blocks = []
        for c in classes:
            rows = source.rows_of(c)
            if len(rows) < n_each:
                raise PreconditionError(f"class {c} has {len(rows)} examples, episode needs {n_each}")
            blocks.append(source.X[rng.choice(rows, size=n_each, replace=False)])
        X = np.stack(blocks)
    d = X.shape[-1]
    return _episode_from_blocks(episode_id, classes, X[:, :k_shot].reshape(-1, d), X[:, k_shot:].reshape(-1, d),
                                n_way, k_shot, val_per_class)


@dataclass
class MetaDataset:
    """Episodes of one role, drawn from a fixed class pool.

    Episode ``i`` depends only on ``(seed, role, i)``, so any subset can be
    regenerated in any order.
    """

    source: object
    role: str
    classes: np.ndarray
    seed: int = 0
    n_way: int = 5
    k_shot: int = 1
    val_per_class: int = 15

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown role {self.role!r}")
        self.classes = np.asarray(self.classes, dtype=np.int64)

    def rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([int(self.seed), ROLES.index(self.role), int(index)])

    def episode(self, index: int, **overrides) -> Episode:
        n_way = overrides.get("n_way", self.n_way)
        k_shot = overrides.get("k_shot", self.k_shot)
        val_per_class = overrides.get("val_per_class", self.val_per_class)
        return sample_episode(self.source, self.classes, self.rng(index), n_way, k_shot, val_per_class, index)

    def episodes(self, start: int, count: int, **overrides) -> list[Episode]:
        return [self.episode(i, **overrides) for i in range(start, start + count)]

    @property
    def disjointness_token(self) -> str:
        return f"{self.role}:" + ",".join(str(c) for c in self.classes)


def make_meta_splits(config: TaskGeneratorConfig, seed: int = 0, n_way=5, k_shot=1, val_per_class=15,
                     source=None) -> dict[str, MetaDataset]:
    """Disjoint class pools of sizes ``config.split``, in class-id order."""
    bounds = np.cumsum((0,) + config.split)
    source = TaskGenerator(config) if source is None else source
    splits = {}
    for role, lo, hi in zip(ROLES, bounds[:-1], bounds[1:]):
        splits[role] = MetaDataset(source, role, np.arange(lo, hi), seed, n_way, k_shot, val_per_class)
    check_disjoint(splits)
    return splits


def check_disjoint(splits: dict[str, MetaDataset]) -> None:
    seen: dict[int, str] = {}
    for role, ds in splits.items():
        for c in ds.classes.tolist():
            if c in seen:
                raise ConfigurationError(f"class {c} appears in both {seen[c]} and {role}")
            seen[c] = role


def split_from_pools(source, pools: dict, seed=0, n_way=5, k_shot=1, val_per_class=15) -> dict[str, MetaDataset]:
    """Meta-splits from explicit class pools; overlapping pools are rejected."""
    splits = {role: MetaDataset(source, role, np.asarray(pools[role]), seed, n_way, k_shot, val_per_class)
              for role in ROLES}
    check_disjoint(splits)
    return splits


# ---------------------------------------------------------------------------
# files


def save_dataset_csv(pool: ExamplePool, path) -> None:
    d = pool.X.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_id"] + [f"feature_{i}" for i in range(d)])
        for c, row in zip(pool.class_ids, pool.X):
            writer.writerow([int(c)] + [repr(float(v)) for v in row])


def load_dataset_csv(path) -> ExamplePool:
    """Read ``class_id,feature_0..feature_{d-1}`` rows into an :class:`ExamplePool`."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty dataset file", line=1)
    header = rows[0]
    d = len(header) - 1
    if d < 1 or header != ["class_id"] + [f"feature_{i}" for i in range(d)]:
        raise DataFormatError("header must be class_id,feature_0,...,feature_{d-1}", line=1)
    X = np.empty((len(rows) - 1, d))
    ids = np.empty(len(rows) - 1, dtype=np.int64)
    for k, row in enumerate(rows[1:]):
        line = k + 2
        if len(row) != d + 1:
            raise DataFormatError(f"expected {d + 1} fields, got {len(row)}", line=line)
        try:
            ids[k] = int(row[0])
            X[k] = [float(v) for v in row[1:]]
        except ValueError:
            raise DataFormatError("non-numeric field", line=line) from None
        if ids[k] < 0:
            raise DataFormatError("class ids are 0-based non-negative integers", line=line)
        if not np.all(np.isfinite(X[k])):
            raise DataFormatError("non-finite feature value", line=line)
    if len(ids) == 0:
        raise DataFormatError("dataset has a header but no rows", line=2)
    return ExamplePool(X, ids)


def save_manifest(path, config: TaskGeneratorConfig, splits: dict[str, MetaDataset]) -> None:
    """JSON description sufficient to regenerate every episode of ``splits``."""
    any_split = next(iter(splits.values()))
    manifest = {
        "generator": config.to_json(),
        "seed": int(any_split.seed),
        "episode": {"n_way": any_split.n_way, "k_shot": any_split.k_shot,
                    "val_per_class": any_split.val_per_class},
        "pools": {role: ds.classes.tolist() for role, ds in splits.items()},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> tuple[TaskGeneratorConfig, dict[str, MetaDataset]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    config = TaskGeneratorConfig.from_json(data["generator"])
    splits = split_from_pools(TaskGenerator(config), data["pools"], data["seed"], **data["episode"])
    return config, splits
