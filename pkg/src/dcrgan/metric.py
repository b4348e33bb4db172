"""Metric network trained with the multi-modal triplet loss, and the semantic rectifier.

The metric network M maps an instance to an L-dimensional searched
representation. In ``multimodal`` mode its input is the instance's visual
feature concatenated with its class semantics; ``visual_only`` is the
traditional triplet baseline. The rectifier R maps class semantics straight to
the class-level representation, so unseen classes get a representation without
any of their features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .dataset import TripletSampler, ZslDataset

log = logging.getLogger(__name__)

INPUT_MODES = ("multimodal", "visual_only")


class InductiveViolation(ValueError):
    """Unseen-class data was requested during training."""


@dataclass(eq=False)
class MetricNet:
    mlp: nn.Mlp
    input_mode: str = "multimodal"
    margin: float = 1.0

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    @property
    def rep_dim(self) -> int:
        return self.mlp.out_dim

    def __call__(self, inputs: Tensor) -> Tensor:
        return self.mlp(inputs)

    def inputs(self, x, a) -> Tensor:
        """Network input for visual rows ``x`` and their class semantics ``a``."""
        x = ad.as_tensor(x)
        if self.input_mode == "visual_only":
            return x
        return ad.concat([x, ad.as_tensor(a)], axis=1)

    def embed(self, x, a) -> np.ndarray:
        with ad.no_grad():
            return self.mlp(self.inputs(x, a)).data


@dataclass(eq=False)
class Srn:
    mlp: nn.Mlp

    def __call__(self, a: Tensor) -> Tensor:
        return self.mlp(a)


def build_metric_net(d_v: int, d_a: int, rep_dim: int = 256, hidden: Sequence[int] = (1024,),
                     input_mode: str = "multimodal", margin: float = 1.0, slope: float = 0.2,
                     seed=0) -> MetricNet:
    in_dim = d_v + d_a if input_mode == "multimodal" else d_v
    mlp = nn.init_mlp(nn.mlp_config(in_dim, hidden, rep_dim, slope), seed)
    return MetricNet(mlp, input_mode, margin)


def build_srn(d_a: int, rep_dim: int, hidden: Sequence[int] = (1024,), slope: float = 0.2,
              seed=0) -> Srn:
    return Srn(nn.init_mlp(nn.mlp_config(d_a, hidden, rep_dim, slope), seed))


# -- triplet losses -------------------------------------------------------

def _hinge(M: MetricNet, anchor, positive, negative) -> Tensor:
    ra, rp, rn = M(anchor), M(positive), M(negative)
    d_pos = ad.row_distance(ra, rp)
    d_neg = ad.row_distance(ra, rn)
    return ad.mean(ad.relu(ad.add(ad.sub(d_pos, d_neg), M.margin)))


def _as_batch(t) -> Tensor:
    t = ad.as_tensor(t)
    return ad.reshape(t, (1, t.shape[0])) if t.ndim == 1 else t


def triplet_loss_tl(M: MetricNet, x_a, x_p, x_n) -> Tensor:
    """Visual-only triplet hinge, batch mean."""
    if M.input_mode != "visual_only":
        raise ValueError("triplet_loss_tl needs a visual_only metric network")
    return _hinge(M, _as_batch(x_a), _as_batch(x_p), _as_batch(x_n))


def mmtl_loss(M: MetricNet, e_a, e_p, e_n) -> Tensor:
    """Triplet hinge over concatenated [visual, semantic] inputs, batch mean."""
    if M.input_mode != "multimodal":
        raise ValueError("mmtl_loss needs a multimodal metric network")
    e_a, e_p, e_n = _as_batch(e_a), _as_batch(e_p), _as_batch(e_n)
    for e in (e_a, e_p, e_n):
        if e.shape[1] != M.mlp.in_dim:
            raise ad.ShapeError(f"mmtl input width {e.shape[1]} != network input {M.mlp.in_dim}")
    return _hinge(M, e_a, e_p, e_n)


def triplet_inputs(M: MetricNet, ds: ZslDataset, triplets: np.ndarray):
    """Network inputs (anchor, positive, negative) for an index array [B, 3]."""
    triplets = np.asarray(triplets, dtype=np.int64)
    out = []
    for col in range(3):
        idx = triplets[:, col]
        a = ds.class_semantics(ds.labels[idx]) if M.input_mode == "multimodal" else None
        out.append(M.inputs(ds.visual[idx], a))
    return tuple(out)


def mn_total_loss(M: MetricNet, triplet_batch, decay_coeff: float) -> Tensor:
    """Triplet term (MMTL or TL by mode) plus squared-L2 weight decay."""
    anchor, positive, negative = triplet_batch
    if M.input_mode == "multimodal":
        term = mmtl_loss(M, anchor, positive, negative)
    else:
        term = triplet_loss_tl(M, anchor, positive, negative)
    return ad.add(term, nn.weight_decay_term(M.mlp, decay_coeff))


def violation_fraction(M: MetricNet, ds: ZslDataset, triplets: np.ndarray) -> float:
    with ad.no_grad():
        a, p, n = triplet_inputs(M, ds, triplets)
        ra, rp, rn = M(a).data, M(p).data, M(n).data
    d_pos = np.linalg.norm(ra - rp, axis=1)
    d_neg = np.linalg.norm(ra - rn, axis=1)
    return float(np.mean(d_neg < d_pos + M.margin))


def train_mn(ds: ZslDataset, M: MetricNet, epochs: int, batch_size: int, optimizer: nn.Adam,
             rng: np.random.Generator, decay_coeff: float = 1e-4, mining: str = "uniform") -> list[float]:
    """Minibatch triplet training; one epoch is ceil(|train| / batch_size) steps.

    Returns the per-step loss history. The caller treats M as frozen afterwards.
    """
    sampler = TripletSampler(ds)
    steps_per_epoch = max(1, -(-ds.train_idx.size // batch_size))
    embed = None
    if mining == "semihard":
        def embed(idx):
            a = ds.class_semantics(ds.labels[idx]) if M.input_mode == "multimodal" else None
            return M.embed(ds.visual[idx], a)
    history = []
    for _ in range(epochs):
        for _ in range(steps_per_epoch):
            triplets = sampler.sample(batch_size, rng, mining=mining, embed=embed)
            loss = mn_total_loss(M, triplet_inputs(M, ds, triplets), decay_coeff)
            history.append(nn.check_finite(loss.item(), "metric-network loss"))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return history


# -- class representations ------------------------------------------------

def instance_representations(M: MetricNet, ds: ZslDataset, idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    a = ds.class_semantics(ds.labels[idx]) if M.input_mode == "multimodal" else None
    return M.embed(ds.visual[idx], a)


def class_representation(M: MetricNet, ds: ZslDataset, class_id: int, split: str | None = None) -> np.ndarray:
    """Mean searched representation over the class's instances.

    ``split`` defaults to ``train`` for seen classes and ``test_unseen`` for unseen ones.
    """
    if split is None:
        split = "test_unseen" if class_id in set(ds.unseen_classes.tolist()) else "train"
    idx = ds.class_indices(class_id, split)
    if idx.size == 0:
        raise ValueError(f"class {class_id} has no instances in split {split!r}")
    return instance_representations(M, ds, idx).mean(axis=0)


def srn_sampling_loss(R: Srn, M: MetricNet, ds: ZslDataset, class_id: int, decay_coeff: float,
                      target: np.ndarray | None = None) -> Tensor:
    """||class mean of M - R(a_c)||_2 + decay. M receives no gradient."""
    if class_id not in set(ds.seen_classes.tolist()):
        raise InductiveViolation(f"class {class_id} is not a seen class; unseen data is off limits in training")
    if target is None:
        target = class_representation(M, ds, class_id, "train")
    a = Tensor(ds.class_semantics([class_id]))
    diff = ad.sub(ad.reshape(R(a), (R.mlp.out_dim,)), Tensor(target))
    return ad.add(ad.l2(diff), nn.weight_decay_term(R.mlp, decay_coeff))


def train_srn(ds: ZslDataset, R: Srn, M: MetricNet, epochs: int, optimizer: nn.Adam,
              rng: np.random.Generator, decay_coeff: float = 1e-4) -> list[float]:
    """Per epoch, one Adam step per seen class in shuffled order. Returns per-step losses."""
    if R.mlp.out_dim != M.rep_dim:
        raise ad.ShapeError(f"SRN output {R.mlp.out_dim} != metric representation {M.rep_dim}")
    targets = {int(c): class_representation(M, ds, int(c), "train") for c in ds.seen_classes}
    history = []
    for _ in range(epochs):
        for c in rng.permutation(ds.seen_classes):
            loss = srn_sampling_loss(R, M, ds, int(c), decay_coeff, targets[int(c)])
            history.append(nn.check_finite(loss.item(), "sampling loss"))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return history


def unseen_representation(R: Srn, a_u) -> np.ndarray:
    a_u = np.asarray(a_u, dtype=np.float64)
    single = a_u.ndim == 1
    batch = a_u.reshape(1, -1) if single else a_u
    if batch.shape[1] != R.mlp.in_dim:
        raise ad.ShapeError(f"semantic width {batch.shape[1]} != SRN input {R.mlp.in_dim}")
    with ad.no_grad():
        out = R(Tensor(batch)).data
    return out[0] if single else out


def rectified(R: Srn, a: Tensor) -> Tensor:
    """R(a) as a constant tensor (R is frozen once trained)."""
    with ad.no_grad():
        return Tensor(R(ad.as_tensor(a)).data)


@dataclass
class ClassRepTable:
    class_ids: np.ndarray
    reps: np.ndarray

    def row(self, class_id: int) -> np.ndarray:
        return self.reps[int(np.searchsorted(self.class_ids, class_id))]


def class_rep_table(M: MetricNet, R: Srn, ds: ZslDataset) -> ClassRepTable:
    """Seen rows: class mean of M over train; unseen rows: R(a_u)."""
    ids = np.arange(ds.num_classes)
    reps = np.zeros((ids.size, M.rep_dim))
    seen = set(ds.seen_classes.tolist())
    for c in ids:
        if c in seen:
            reps[c] = class_representation(M, ds, int(c), "train")
    if ds.unseen_classes.size:
        reps[ds.unseen_classes] = unseen_representation(R, ds.class_semantics(ds.unseen_classes))
    present = np.isin(ids, np.concatenate([ds.seen_classes, ds.unseen_classes]))
    return ClassRepTable(ids[present], reps[present])


def nearest_neighbour_accuracy(reps: np.ndarray, labels: np.ndarray) -> float:
    """Leave-one-out 1-NN accuracy of ``labels`` in representation space."""
    sq = np.sum(reps * reps, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * reps @ reps.T
    np.fill_diagonal(d, np.inf)
    return float(np.mean(labels[np.argmin(d, axis=1)] == labels))
