"""Unseen-feature synthesis, the three-space softmax ensemble, ZSL/GZSL metrics and exports."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .dataset import ZslDataset
from .gan import GanBundle, generate
from .metric import MetricNet, Srn, class_rep_table, instance_representations, unseen_representation

HEADS = ("vs", "ss", "srs")
OMEGA_GRID = (0.0, 0.25, 0.5, 1.0, 2.0)


# -- synthesis ------------------------------------------------------------

def synthesize_features(bundle: GanBundle, R: Srn | None, ds: ZslDataset, classes: Sequence[int],
                        per_class_count: int, rng: np.random.Generator):
    """``per_class_count`` generated rows per class with fresh noise; returns (X, labels)."""
    classes = np.asarray(classes, dtype=np.int64)
    known = set(ds.seen_classes.tolist()) | set(ds.unseen_classes.tolist())
    for c in classes.tolist():
        if c not in known:
            raise ValueError(f"unknown class id {c}")
    labels = np.repeat(classes, per_class_count)
    if labels.size == 0:
        return np.zeros((0, ds.d_v)), labels
    a = ds.class_semantics(labels)
    rep = unseen_representation(R, a) if bundle.uses_rep else None
    z = rng.standard_normal(size=(labels.size, bundle.d_z))
    with ad.no_grad():
        x = generate(bundle.G, a, rep, z).data
    return x, labels


# -- classifier heads -----------------------------------------------------

@dataclass(eq=False)
class SoftmaxHead:
    mlp: nn.Mlp
    class_ids: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.mlp(Tensor(x)).data

    def proba(self, x: np.ndarray) -> np.ndarray:
        return nn.softmax(self.logits(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.class_ids[np.argmax(self.logits(x), axis=1)]


def train_softmax_head(x: np.ndarray, labels: np.ndarray, class_ids: Sequence[int],
                       rng: np.random.Generator, steps: int = 500, lr: float = 1e-3,
                       batch_size: int = 128) -> SoftmaxHead:
    """Single affine layer + softmax trained by Adam on minibatches."""
    class_ids = np.asarray(sorted(set(int(c) for c in class_ids)), dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    counts = {int(c): int(np.sum(labels == c)) for c in class_ids}
    empty = [c for c, n in counts.items() if n == 0]
    if empty:
        raise ValueError(f"classes without training rows: {empty}")
    pos = np.searchsorted(class_ids, labels)
    if np.any(pos >= class_ids.size) or np.any(class_ids[np.minimum(pos, class_ids.size - 1)] != labels):
        raise ValueError("training labels outside the head's class set")
    # zero start: the problem is convex, and random weights on large-magnitude
    # features begin with confidently wrong logits that take many steps to undo
    mlp = nn.init_mlp(nn.mlp_config(x.shape[1], (), class_ids.size), rng)
    mlp.weights[0].data[:] = 0.0
    head = SoftmaxHead(mlp, class_ids)
    opt = nn.Adam(head.mlp.parameters(), lr=lr, beta1=0.9)
    n = x.shape[0]
    for _ in range(steps):
        pick = rng.integers(0, n, size=min(batch_size, n))
        loss = nn.softmax_cross_entropy(head.mlp(Tensor(x[pick])), pos[pick])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return head


def _map(net: nn.Mlp, x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return net(Tensor(x)).data


@dataclass(eq=False)
class EnsembleClassifier:
    """f = w_vs * f_VS(x) + omega1 * f_SS(F1(x)) + omega2 * f_SRS(F2(x)) over one class space."""
    class_ids: np.ndarray
    vs_head: SoftmaxHead | None = None
    ss_head: SoftmaxHead | None = None
    srs_head: SoftmaxHead | None = None
    omega1: float = 1.0
    omega2: float = 1.0
    use_vs: bool = True
    combine: str = "prob"

    def __post_init__(self):
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError("ensemble weights must be non-negative")
        if self.combine not in ("prob", "logit"):
            raise ValueError("combine must be 'prob' or 'logit'")
        for head in (self.vs_head, self.ss_head, self.srs_head):
            if head is not None and not np.array_equal(head.class_ids, self.class_ids):
                raise ValueError("all heads must share the ensemble's class index space")

    def _score(self, head: SoftmaxHead, x: np.ndarray) -> np.ndarray:
        return head.proba(x) if self.combine == "prob" else head.logits(x)

    def space_scores(self, x: np.ndarray, F1: nn.Mlp | None, F2: nn.Mlp | None) -> dict[str, np.ndarray]:
        out = {}
        if self.vs_head is not None:
            out["vs"] = self._score(self.vs_head, x)
        if self.ss_head is not None:
            out["ss"] = self._score(self.ss_head, _map(F1, x))
        if self.srs_head is not None:
            out["srs"] = self._score(self.srs_head, _map(F2, x))
        return out

    def combine_scores(self, spaces: dict[str, np.ndarray], omega1=None, omega2=None) -> np.ndarray:
        w1 = self.omega1 if omega1 is None else omega1
        w2 = self.omega2 if omega2 is None else omega2
        total = None
        for name, w in (("vs", 1.0 if self.use_vs else 0.0), ("ss", w1), ("srs", w2)):
            if name in spaces and w != 0.0:
                term = w * spaces[name]
                total = term if total is None else total + term
        if total is None:
            n = next(iter(spaces.values())).shape[0] if spaces else 0
            total = np.zeros((n, self.class_ids.size))
        return total

    def predict_from(self, spaces, omega1=None, omega2=None) -> np.ndarray:
        return self.class_ids[np.argmax(self.combine_scores(spaces, omega1, omega2), axis=1)]


def train_heads(x: np.ndarray, labels: np.ndarray, class_ids: Sequence[int], F1: nn.Mlp | None,
                F2: nn.Mlp | None, rng: np.random.Generator, heads: Iterable[str] = HEADS,
                steps: int = 500, lr: float = 1e-3, combine: str = "prob") -> EnsembleClassifier:
    """Fit the requested heads on raw features, F1-mapped and F2-mapped features."""
    heads = tuple(heads)
    bad = [h for h in heads if h not in HEADS]
    if bad:
        raise ValueError(f"unknown heads {bad}")
    ids = np.asarray(sorted(set(int(c) for c in class_ids)), dtype=np.int64)
    clf = EnsembleClassifier(ids, use_vs="vs" in heads, combine=combine)
    # one child stream per head, drawn unconditionally, so a head is the same
    # whichever other heads are requested alongside it
    streams = dict(zip(HEADS, (np.random.default_rng(s) for s in rng.integers(0, 2**63, size=len(HEADS)))))
    if "vs" in heads:
        clf.vs_head = train_softmax_head(x, labels, ids, streams["vs"], steps, lr)
    if "ss" in heads:
        clf.ss_head = train_softmax_head(_map(F1, x), labels, ids, streams["ss"], steps, lr)
    if "srs" in heads:
        clf.srs_head = train_softmax_head(_map(F2, x), labels, ids, streams["srs"], steps, lr)
    clf.omega1 = 1.0 if "ss" in heads else 0.0
    clf.omega2 = 1.0 if "srs" in heads else 0.0
    return clf


def ensemble_score(clf: EnsembleClassifier, x: np.ndarray, F1: nn.Mlp | None, F2: nn.Mlp | None) -> np.ndarray:
    """Score matrix [B, C]; the prediction is ``clf.class_ids[argmax]``."""
    x = np.asarray(x, dtype=np.float64)
    for head, width in ((clf.vs_head, x.shape[1]),):
        if head is not None and head.mlp.in_dim != width:
            raise ad.ShapeError(f"feature width {width} != visual head input {head.mlp.in_dim}")
    return clf.combine_scores(clf.space_scores(x, F1, F2))


# -- metrics --------------------------------------------------------------

def per_class_top1(predictions, labels, class_set) -> float:
    """Mean over classes (with at least one sample) of per-class accuracy."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    classes = np.unique(np.asarray(list(class_set)))
    if classes.size == 0:
        raise ValueError("class_set is empty")
    outside = np.setdiff1d(np.unique(labels), classes)
    if outside.size:
        raise ValueError(f"labels {outside.tolist()} are not in class_set")
    accs = [float(np.mean(predictions[labels == c] == c)) for c in classes if np.any(labels == c)]
    return float(np.mean(accs)) if accs else 0.0


def per_class_accuracies(predictions, labels) -> dict[int, float]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    return {int(c): float(np.mean(predictions[labels == c] == c)) for c in np.unique(labels)}


def harmonic_mean(u: float, s: float) -> float:
    return 0.0 if u + s == 0 else 2.0 * u * s / (u + s)


def gzsl_metrics(pred_seen, labels_seen, pred_unseen, labels_unseen, seen_classes=None,
                 unseen_classes=None):
    """(U, S, H): per-class top-1 on the unseen and seen test sets and their harmonic mean."""
    seen_classes = np.unique(labels_seen) if seen_classes is None else seen_classes
    unseen_classes = np.unique(labels_unseen) if unseen_classes is None else unseen_classes
    u = per_class_top1(pred_unseen, labels_unseen, unseen_classes)
    s = per_class_top1(pred_seen, labels_seen, seen_classes)
    return u, s, harmonic_mean(u, s)


@dataclass
class EvalReport:
    mode: str
    variant: str = "C5"
    t1: float | None = None
    u: float | None = None
    s: float | None = None
    h: float | None = None
    per_class: dict[int, float] = field(default_factory=dict)
    omega1: float = 0.0
    omega2: float = 0.0
    rep_dim: int = 0
    seed: int = 0

    CSV_FIELDS = ("variant", "U", "S", "H", "T1", "seed", "omega1", "omega2", "L")

    def csv_row(self) -> list[str]:
        def f(v):
            return "" if v is None else repr(float(v))
        return [self.variant, f(self.u), f(self.s), f(self.h), f(self.t1), str(self.seed),
                repr(float(self.omega1)), repr(float(self.omega2)), str(self.rep_dim)]

    def table(self) -> str:
        lines = [f"mode      {self.mode.upper()}", f"variant   {self.variant}"]
        if self.mode == "zsl":
            lines.append(f"T1        {100 * self.t1:.2f}")
        else:
            lines += [f"U         {100 * self.u:.2f}", f"S         {100 * self.s:.2f}",
                      f"H         {100 * self.h:.2f}"]
        lines += [f"omega1    {self.omega1:g}", f"omega2    {self.omega2:g}",
                  f"L         {self.rep_dim}", f"seed      {self.seed}", "per-class top-1:"]
        lines += [f"  class {c:>4d}  {100 * a:6.2f}" for c, a in sorted(self.per_class.items())]
        return "\n".join(lines)


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EvalReport.CSV_FIELDS)
        for r in reports:
            w.writerow(r.csv_row())


def select_omegas(clf: EnsembleClassifier, x_val: np.ndarray, y_val: np.ndarray, F1, F2,
                  seen_classes, unseen_classes, mode: str, grid: Sequence[float] = OMEGA_GRID,
                  tune1: bool = True, tune2: bool = True) -> tuple[float, float]:
    """Grid search of (omega1, omega2) maximising H (gzsl) or T1 (zsl) on validation data."""
    spaces = clf.space_scores(x_val, F1, F2)
    g1 = grid if tune1 else (clf.omega1,)
    g2 = grid if tune2 else (clf.omega2,)
    seen_set = np.isin(y_val, seen_classes)
    best, best_w = -1.0, (clf.omega1, clf.omega2)
    for w1, w2 in itertools.product(g1, g2):
        if not clf.use_vs and w1 == 0 and w2 == 0:
            continue
        pred = clf.predict_from(spaces, w1, w2)
        if mode == "zsl":
            score = per_class_top1(pred, y_val, unseen_classes)
        else:
            _, _, score = gzsl_metrics(pred[seen_set], y_val[seen_set], pred[~seen_set],
                                       y_val[~seen_set], seen_classes, unseen_classes)
        if score > best + 1e-12:
            best, best_w = score, (float(w1), float(w2))
    return best_w


# -- export ---------------------------------------------------------------

def pca_2d(x: np.ndarray, iters: int = 5000, tol: float = 1e-14) -> tuple[np.ndarray, np.ndarray]:
    """Project centred rows of ``x`` onto the top-2 covariance eigenvectors.

    Eigenvectors come from power iteration with deflation from a fixed start,
    so the output is deterministic. Returns (coords [N, 2], components [2, d]).
    """
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / max(1, x.shape[0] - 1)
    d = cov.shape[0]
    comps = []
    work = cov.copy()
    for k in range(min(2, d)):
        v = np.ones(d) / np.sqrt(d) + 1e-3 * np.arange(d) / d
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            w /= norm
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        for prev in comps:
            v = v - (v @ prev) * prev
        n = np.linalg.norm(v)
        v = v / n if n > 0 else np.eye(d)[k]
        comps.append(v)
        lam = v @ cov @ v
        work = work - lam * np.outer(v, v)
    while len(comps) < 2:
        comps.append(np.zeros(d))
    components = np.array(comps)
    return centred @ components.T, components


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]):
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else repr(float(v)) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def export_representations(M: MetricNet, R: Srn, ds: ZslDataset, path, bundle: GanBundle | None = None,
                           per_class: int = 100, rng: np.random.Generator | None = None) -> list[Path]:
    """Write searched representations (instances then classes), real vs synthesized
    unseen features, and PCA-2D projections of both, as CSV files under ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    keys, vecs = [], []
    for split in ("train", "test_seen", "test_unseen"):
        idx = ds.split(split)
        if idx.size:
            reps = instance_representations(M, ds, idx)
            for i, r in zip(idx.tolist(), reps):
                keys.append(("instance", i, int(ds.labels[i]), split))
                vecs.append(r)
    table = class_rep_table(M, R, ds)
    unseen = set(ds.unseen_classes.tolist())
    for c, r in zip(table.class_ids.tolist(), table.reps):
        keys.append(("class", c, c, "unseen" if c in unseen else "seen"))
        vecs.append(r)
    vecs = np.array(vecs)
    written = []
    header = ["kind", "id", "label", "group"]
    p = out / "representations.csv"
    _write_rows(p, header + [f"r{j}" for j in range(vecs.shape[1])],
                (list(k) + [float(v) for v in row] for k, row in zip(keys, vecs)))
    written.append(p)
    coords, _ = pca_2d(vecs)
    p = out / "representations_pca2d.csv"
    _write_rows(p, header + ["pc1", "pc2"], (list(k) + [float(v) for v in row] for k, row in zip(keys, coords)))
    written.append(p)
    if bundle is not None:
        rng = rng or np.random.default_rng(0)
        classes = ds.unseen_classes
        xs, ys = synthesize_features(bundle, R, ds, classes, per_class, rng)
        real = ds.visual[ds.test_unseen_idx]
        feats = np.vstack([real, xs])
        fkeys = [("real", int(c)) for c in ds.labels[ds.test_unseen_idx]] + [("synth", int(c)) for c in ys]
        p = out / "features.csv"
        _write_rows(p, ["kind", "label"] + [f"x{j}" for j in range(feats.shape[1])],
                    (list(k) + [float(v) for v in row] for k, row in zip(fkeys, feats)))
        written.append(p)
        fc, _ = pca_2d(feats)
        p = out / "features_pca2d.csv"
        _write_rows(p, ["kind", "label", "pc1", "pc2"], (list(k) + [float(v) for v in row] for k, row in zip(fkeys, fc)))
        written.append(p)
    return written
