"""ZSL datasets: CSV interchange format, validation, samplers and a synthetic generator.

Interchange layout (all CSV: comma separated, '.' decimals, no header, UTF-8)::

    manifest.txt    key=value lines: features, labels, attributes, splits, d_v, d_a
                    (optional: num_seen, num_unseen, checked against the splits)
    features.csv    N rows x d_v floats
    labels.csv      N rows, one integer class id each
    attributes.csv  C rows x d_a floats, row c is the semantic vector of class c
    splits.csv      rows ``index,split`` with split in train / test_seen / test_unseen

Seen classes are the labels appearing in ``train`` and ``test_seen``; unseen
classes are the labels appearing in ``test_unseen``.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor

log = logging.getLogger(__name__)

SPLITS = ("train", "test_seen", "test_unseen")
MANIFEST_KEYS = ("features", "labels", "attributes", "splits", "d_v", "d_a")

# Table I of the benchmark literature: attributes, seen (train+val), unseen, images
BENCHMARK_STATS = {
    "AWA1": dict(attributes=85, seen_train=27, seen_val=13, unseen=10, images=30475,
                 images_trainval=19832, test_unseen=4958, test_seen=5685),
    "CUB": dict(attributes=312, seen_train=100, seen_val=50, unseen=50, images=11788,
                images_trainval=7057, test_unseen=2679, test_seen=1764),
    "APY": dict(attributes=64, seen_train=15, seen_val=5, unseen=12, images=15339,
                images_trainval=5932, test_unseen=7924, test_seen=1483),
    "SUN": dict(attributes=102, seen_train=580, seen_val=65, unseen=72, images=14340,
                images_trainval=10320, test_unseen=1440, test_seen=2580),
}


class DatasetError(Exception):
    """Base for every loading/validation failure."""


class ManifestError(DatasetError):
    pass


class RaggedRowError(DatasetError):
    pass


class NonFiniteError(DatasetError):
    pass


class UnknownClassError(DatasetError):
    pass


class SplitOverlapError(DatasetError):
    pass


class SplitLabelError(DatasetError):
    pass


@dataclass(eq=False)
class ZslDataset:
    visual: np.ndarray
    labels: np.ndarray
    semantics: np.ndarray
    seen_classes: np.ndarray
    unseen_classes: np.ndarray
    train_idx: np.ndarray
    test_seen_idx: np.ndarray
    test_unseen_idx: np.ndarray
    prototypes: np.ndarray | None = None
    unseen_semantic_reads: int = field(default=0, compare=False)

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.semantics = np.asarray(self.semantics, dtype=np.float64)
        self.seen_classes = np.unique(np.asarray(self.seen_classes, dtype=np.int64))
        self.unseen_classes = np.unique(np.asarray(self.unseen_classes, dtype=np.int64))
        for name in ("train_idx", "test_seen_idx", "test_unseen_idx"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        self._unseen_set = set(self.unseen_classes.tolist())

    @property
    def d_v(self) -> int:
        return self.visual.shape[1]

    @property
    def d_a(self) -> int:
        return self.semantics.shape[1]

    @property
    def num_classes(self) -> int:
        return self.semantics.shape[0]

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}, expected one of {SPLITS}")
        return getattr(self, f"{name}_idx")

    def split_classes(self, name: str) -> np.ndarray:
        return self.seen_classes if name in ("train", "test_seen") else self.unseen_classes

    def class_semantics(self, class_ids) -> np.ndarray:
        """Semantic rows for ``class_ids``; reads of unseen rows are counted."""
        ids = np.asarray(class_ids, dtype=np.int64)
        self.unseen_semantic_reads += int(sum(1 for c in np.unique(ids).tolist() if c in self._unseen_set))
        return self.semantics[ids]

    def class_indices(self, class_id: int, split: str = "train") -> np.ndarray:
        idx = self.split(split)
        return idx[self.labels[idx] == class_id]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.visual, self.labels, self.semantics, self.train_idx,
                    self.test_seen_idx, self.test_unseen_idx):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def validate(self):
        validate(self)
        return self


def validate(ds: ZslDataset):
    n = ds.visual.shape[0]
    if ds.labels.shape != (n,):
        raise RaggedRowError(f"labels has {ds.labels.shape[0]} rows but features has {n}")
    if not np.all(np.isfinite(ds.visual)):
        raise NonFiniteError("features contain non-finite values")
    if not np.all(np.isfinite(ds.semantics)):
        raise NonFiniteError("attributes contain non-finite values")
    seen, unseen = set(ds.seen_classes.tolist()), set(ds.unseen_classes.tolist())
    both = seen & unseen
    if both:
        raise SplitLabelError(f"class ids both seen and unseen: {sorted(both)}")
    for c in sorted(seen | unseen):
        if not 0 <= c < ds.num_classes:
            raise UnknownClassError(f"class id {c} has no attributes row (have {ds.num_classes})")
    bad = [c for c in np.unique(ds.labels).tolist() if not 0 <= c < ds.num_classes]
    if bad:
        raise UnknownClassError(f"class id {bad[0]} has no attributes row (have {ds.num_classes})")
    owner: dict[int, str] = {}
    for name in SPLITS:
        idx = ds.split(name)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise SplitOverlapError(f"split {name} has index outside [0, {n})")
        for i in idx.tolist():
            if i in owner:
                raise SplitOverlapError(f"index {i} appears in both {owner[i]} and {name}")
            owner[i] = name
        allowed = seen if name != "test_unseen" else unseen
        for i in idx.tolist():
            c = int(ds.labels[i])
            if c not in allowed:
                kind = "unseen" if name == "test_unseen" else "seen"
                raise SplitLabelError(f"split {name} index {i} has class id {c} which is not a {kind} class")
    used = set(ds.labels[np.array(sorted(owner), dtype=np.int64)].tolist()) if owner else set()
    missing = used - seen - unseen
    if missing:
        raise UnknownClassError(f"class ids {sorted(missing)} are neither seen nor unseen")


# -- interchange format ---------------------------------------------------

def _read_manifest(path: Path) -> dict[str, str]:
    entries = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        entries[key] = value
    missing = [k for k in MANIFEST_KEYS if k not in entries]
    if missing:
        raise ManifestError(f"{path}: missing keys {missing}")
    return entries


def _read_matrix(path: Path, width: int) -> np.ndarray:
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                raise RaggedRowError(f"{path}:{lineno}: empty row")
            if len(row) != width:
                raise RaggedRowError(f"{path}:{lineno}: expected {width} values, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise NonFiniteError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise NonFiniteError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(len(rows), width)


def _read_labels(path: Path) -> np.ndarray:
    labels = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if len(row) != 1:
                raise RaggedRowError(f"{path}:{lineno}: expected 1 value, got {len(row)}")
            try:
                labels.append(int(row[0]))
            except ValueError:
                raise UnknownClassError(f"{path}:{lineno}: class id {row[0]!r} is not an integer") from None
    return np.array(labels, dtype=np.int64)


def _read_splits(path: Path, n: int) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {s: [] for s in SPLITS}
    owner: dict[int, str] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if len(row) != 2:
                raise RaggedRowError(f"{path}:{lineno}: expected index,split")
            try:
                idx = int(row[0])
            except ValueError:
                raise RaggedRowError(f"{path}:{lineno}: index {row[0]!r} is not an integer") from None
            name = row[1].strip()
            if name not in out:
                raise ManifestError(f"{path}:{lineno}: unknown split name {name!r}")
            if not 0 <= idx < n:
                raise SplitOverlapError(f"{path}:{lineno}: index {idx} outside [0, {n})")
            if idx in owner:
                raise SplitOverlapError(f"{path}:{lineno}: index {idx} already in split {owner[idx]}")
            owner[idx] = name
            out[name].append(idx)
    return out


def load(manifest_path) -> ZslDataset:
    """Read and validate a dataset from its manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ManifestError(f"{manifest_path}: no such file")
    m = _read_manifest(manifest_path)
    base = manifest_path.parent
    try:
        d_v, d_a = int(m["d_v"]), int(m["d_a"])
    except ValueError:
        raise ManifestError(f"{manifest_path}: d_v and d_a must be integers") from None
    paths = {k: base / m[k] for k in ("features", "labels", "attributes", "splits")}
    for key, p in paths.items():
        if not p.exists():
            raise ManifestError(f"{manifest_path}: {key} file {p} does not exist")
    visual = _read_matrix(paths["features"], d_v)
    labels = _read_labels(paths["labels"])
    if labels.shape[0] != visual.shape[0]:
        raise RaggedRowError(f"{paths['labels']}: {labels.shape[0]} rows but {paths['features']} has {visual.shape[0]}")
    semantics = _read_matrix(paths["attributes"], d_a)
    for lineno, c in enumerate(labels.tolist(), 1):
        if not 0 <= c < semantics.shape[0]:
            raise UnknownClassError(f"{paths['labels']}:{lineno}: class id {c} has no attributes row")
    splits = _read_splits(paths["splits"], visual.shape[0])
    seen = sorted(set(labels[splits["train"] + splits["test_seen"]].tolist()))
    unseen = sorted(set(labels[splits["test_unseen"]].tolist()))
    clash = sorted(set(seen) & set(unseen))
    if clash:
        where = [i for i in splits["test_unseen"] if labels[i] == clash[0]][0]
        raise SplitLabelError(f"{paths['splits']}: test_unseen index {where} has class id {clash[0]} "
                              f"which is also a seen class")
    ds = ZslDataset(visual, labels, semantics, seen, unseen,
                    splits["train"], splits["test_seen"], splits["test_unseen"])
    validate(ds)
    for key, actual in (("num_seen", len(seen)), ("num_unseen", len(unseen))):
        if key in m and int(m[key]) != actual:
            raise ManifestError(f"{manifest_path}: {key}={m[key]} but splits give {actual}")
    return ds


def _fmt(v: float) -> str:
    return repr(float(v))


def save(ds: ZslDataset, directory) -> Path:
    """Write ``ds`` in the interchange format; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "features.csv").open("w", encoding="utf-8", newline="") as fh:
        for row in ds.visual:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    with (d / "labels.csv").open("w", encoding="utf-8", newline="") as fh:
        fh.writelines(f"{int(c)}\n" for c in ds.labels)
    with (d / "attributes.csv").open("w", encoding="utf-8", newline="") as fh:
        for row in ds.semantics:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    with (d / "splits.csv").open("w", encoding="utf-8", newline="") as fh:
        for name in SPLITS:
            fh.writelines(f"{int(i)},{name}\n" for i in ds.split(name))
    manifest = d / "manifest.txt"
    manifest.write_text(
        "features=features.csv\nlabels=labels.csv\nattributes=attributes.csv\nsplits=splits.csv\n"
        f"d_v={ds.d_v}\nd_a={ds.d_a}\nnum_seen={len(ds.seen_classes)}\nnum_unseen={len(ds.unseen_classes)}\n",
        encoding="utf-8")
    return manifest


def statistics(ds: ZslDataset) -> dict:
    """Dataset summary in the shape of the benchmark statistics table."""
    return dict(attributes=ds.d_a, seen=len(ds.seen_classes), unseen=len(ds.unseen_classes),
                images=int(ds.train_idx.size + ds.test_seen_idx.size + ds.test_unseen_idx.size),
                images_train=int(ds.train_idx.size), test_unseen=int(ds.test_unseen_idx.size),
                test_seen=int(ds.test_seen_idx.size))


def minmax_normalize(ds: ZslDataset) -> ZslDataset:
    """Scale each visual dimension to [0, 1] using train-split statistics."""
    ref = ds.visual[ds.train_idx]
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return ZslDataset((ds.visual - lo) / span, ds.labels, ds.semantics, ds.seen_classes,
                      ds.unseen_classes, ds.train_idx, ds.test_seen_idx, ds.test_unseen_idx,
                      None if ds.prototypes is None else (ds.prototypes - lo) / span)


# -- synthetic data -------------------------------------------------------

@dataclass
class SynthConfig:
    """Synthetic benchmark with optionally entangled unseen visual prototypes.

    Visual prototypes are ``10 * unit(W a_c)`` for a random linear map ``W``,
    so semantics predict visuals and generative ZSL is possible. Each
    entangled pair of unseen classes reuses one visual prototype while keeping
    distinct semantics. ``unseen_overlap`` is the fraction of the
    ``num_unseen // 2`` disjoint unseen pairs that are entangled.
    """
    num_seen: int = 24
    num_unseen: int = 4
    instances_per_class: int = 60
    d_v: int = 64
    d_a: int = 12
    visual_noise_sigma: float = 1.0
    unseen_overlap: float = 0.0
    seed: int = 0
    test_seen_fraction: float = 0.2
    prototype_radius: float = 10.0

    def validate(self):
        if self.num_seen < 2:
            raise ValueError("need at least 2 seen classes")
        if self.num_unseen < 1 or self.instances_per_class < 2:
            raise ValueError("need at least one unseen class and two instances per class")
        if self.d_v < 1 or self.d_a < 1:
            raise ValueError("feature dimensions must be positive")
        if not 0.0 <= self.unseen_overlap <= 1.0:
            raise ValueError(f"unseen_overlap must lie in [0, 1], got {self.unseen_overlap}")
        if self.unseen_overlap > 0 and self.num_unseen < 2:
            raise ValueError("unseen_overlap > 0 needs at least 2 unseen classes")
        if not 0.0 < self.test_seen_fraction < 1.0:
            raise ValueError("test_seen_fraction must lie in (0, 1)")
        if self.visual_noise_sigma < 0:
            raise ValueError("visual_noise_sigma must be non-negative")

    @property
    def overlap_pairs(self) -> list[tuple[int, int]]:
        n_pairs = int(round(self.unseen_overlap * (self.num_unseen // 2)))
        if self.unseen_overlap > 0:
            n_pairs = max(n_pairs, 1)
        first = self.num_seen
        return [(first + 2 * k, first + 2 * k + 1) for k in range(n_pairs)]


def synth_generate(cfg: SynthConfig) -> ZslDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_cls = cfg.num_seen + cfg.num_unseen
    semantics = rng.normal(size=(n_cls, cfg.d_a))
    pairs = cfg.overlap_pairs
    for a, b in pairs:
        while np.linalg.norm(semantics[a] - semantics[b]) < 1.0:
            semantics[b] = rng.normal(size=cfg.d_a)
    proj = rng.normal(size=(cfg.d_v, cfg.d_a))
    raw = semantics @ proj.T
    prototypes = cfg.prototype_radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    for a, b in pairs:
        prototypes[b] = prototypes[a]

    k = cfg.instances_per_class
    labels = np.repeat(np.arange(n_cls), k)
    visual = prototypes[labels] + cfg.visual_noise_sigma * rng.normal(size=(n_cls * k, cfg.d_v))
    n_test = max(1, int(round(cfg.test_seen_fraction * k)))
    train, test_seen, test_unseen = [], [], []
    for c in range(n_cls):
        idx = np.arange(c * k, (c + 1) * k)
        if c < cfg.num_seen:
            perm = rng.permutation(idx)
            test_seen += sorted(perm[:n_test].tolist())
            train += sorted(perm[n_test:].tolist())
        else:
            test_unseen += idx.tolist()
    ds = ZslDataset(visual, labels, semantics, np.arange(cfg.num_seen),
                    np.arange(cfg.num_seen, n_cls), train, test_seen, test_unseen,
                    prototypes=prototypes)
    validate(ds)
    return ds


# -- samplers -------------------------------------------------------------

def sample_batch(ds: ZslDataset, split: str, batch_size: int, rng: np.random.Generator):
    """Uniform draw with replacement: (x[B, d_v], a[B, d_a], labels[B])."""
    idx = ds.split(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    pick = idx[rng.integers(0, idx.size, size=batch_size)]
    labels = ds.labels[pick]
    return Tensor(ds.visual[pick]), Tensor(ds.class_semantics(labels)), labels


class TripletSampler:
    """Draws (anchor, positive, negative) index triplets from the train split.

    Anchors are uniform over train instances; anchors whose class has a single
    train instance are redrawn and tallied in ``skipped``.
    """

    def __init__(self, ds: ZslDataset):
        self.ds = ds
        train = ds.train_idx
        labels = ds.labels[train]
        self.by_class = {int(c): train[labels == c] for c in np.unique(labels)}
        if len(self.by_class) < 2:
            raise ValueError("triplet sampling needs at least 2 seen classes in train")
        if all(v.size < 2 for v in self.by_class.values()):
            raise ValueError("no seen class has 2 train instances to form a positive pair")
        self.classes = np.array(sorted(self.by_class))
        self.skipped = 0

    def sample(self, batch_size: int, rng: np.random.Generator, mining: str = "uniform",
               embed=None, candidates: int = 8) -> np.ndarray:
        """Return an int array [batch_size, 3].

        ``mining="semihard"`` needs ``embed``: a function mapping index arrays to
        representation rows; the negative is then the closest candidate that is
        farther than the positive (or the farthest one if none is).
        """
        if mining not in ("uniform", "semihard"):
            raise ValueError(f"unknown mining {mining!r}")
        train = self.ds.train_idx
        out = np.empty((batch_size, 3), dtype=np.int64)
        filled = 0
        while filled < batch_size:
            anchor = int(train[rng.integers(0, train.size)])
            c = int(self.ds.labels[anchor])
            members = self.by_class[c]
            if members.size < 2:
                self.skipped += 1
                log.warning("class %d has a single train instance; anchor skipped", c)
                continue
            pos = anchor
            while pos == anchor:
                pos = int(members[rng.integers(0, members.size)])
            others = self.classes[self.classes != c]
            if mining == "uniform":
                neg_c = int(others[rng.integers(0, others.size)])
                pool = self.by_class[neg_c]
                neg = int(pool[rng.integers(0, pool.size)])
            else:
                cand = []
                for _ in range(candidates):
                    neg_c = int(others[rng.integers(0, others.size)])
                    pool = self.by_class[neg_c]
                    cand.append(int(pool[rng.integers(0, pool.size)]))
                reps = embed(np.array([anchor, pos] + cand))
                d_pos = np.linalg.norm(reps[0] - reps[1])
                d_neg = np.linalg.norm(reps[2:] - reps[0], axis=1)
                harder = np.where(d_neg > d_pos)[0]
                j = harder[np.argmin(d_neg[harder])] if harder.size else int(np.argmax(d_neg))
                neg = cand[j]
            out[filled] = (anchor, pos, neg)
            filled += 1
        return out


def sample_triplets(ds: ZslDataset, batch_size: int, rng: np.random.Generator,
                    sampler: TripletSampler | None = None) -> list[tuple[int, int, int]]:
    sampler = sampler or TripletSampler(ds)
    return [tuple(int(v) for v in row) for row in sampler.sample(batch_size, rng)]
