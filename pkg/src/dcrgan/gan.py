"""Feature generator, critic and reconstruction regressors.

Three modes share the training loop:

``sr``        generator G(a, R(a), z), critic D([x, a, R(a)]), no classifier term
``classic_a`` generator G(a, z), critic D(x) plus a frozen seen-class classifier
``classic_b`` generator G(a, R(a), z), critic D(x) plus the classifier

F1 regresses semantics and F2 searched representations from generated features;
``classic_a`` has no F2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .dataset import ZslDataset, sample_batch
from .metric import MetricNet, Srn, rectified

MODES = ("sr", "classic_a", "classic_b")


@dataclass(eq=False)
class AuxClassifier:
    """Softmax classifier over seen classes used by the classic objective."""
    mlp: nn.Mlp
    class_ids: np.ndarray

    def positions(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        pos = np.searchsorted(self.class_ids, labels)
        if np.any(pos >= self.class_ids.size) or np.any(self.class_ids[np.minimum(pos, self.class_ids.size - 1)] != labels):
            raise ValueError("label outside the classifier's class set")
        return pos

    def log_likelihood(self, x: Tensor, labels) -> Tensor:
        """Batch mean of log P(y | x)."""
        return ad.neg(nn.softmax_cross_entropy(self.mlp(x), self.positions(labels)))


@dataclass(eq=False)
class GanBundle:
    G: nn.Mlp
    D: nn.Mlp
    F1: nn.Mlp
    F2: nn.Mlp | None
    d_z: int
    mode: str = "sr"
    lambda_gp: float = 10.0
    lambda1: float = 0.1
    lambda2: float = 0.1
    classifier: AuxClassifier | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if min(self.lambda_gp, self.lambda1, self.lambda2) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def uses_rep(self) -> bool:
        return self.mode != "classic_a"

    @property
    def conditional_critic(self) -> bool:
        return self.mode == "sr"

    def networks(self) -> dict[str, nn.Mlp]:
        nets = {"G": self.G, "D": self.D, "F1": self.F1}
        if self.F2 is not None:
            nets["F2"] = self.F2
        return nets


@dataclass
class TrainSchedule:
    n_loop: int = 1000
    n_d: int = 5
    n_g: int = 1
    batch_size: int = 64

    def __post_init__(self):
        if self.n_loop < 1 or self.n_d < 1 or self.n_g < 1 or self.batch_size < 1:
            raise ValueError("schedule counts must be positive")


@dataclass
class GanBatch:
    x: Tensor
    a: Tensor
    rep: Tensor | None
    labels: np.ndarray
    z: Tensor
    mu: np.ndarray = field(default=None)


def build_bundle(d_v: int, d_a: int, rep_dim: int, mode: str = "sr", d_z: int = 64,
                 g_hidden: Sequence[int] = (1024,), d_hidden: Sequence[int] = (1024,),
                 f_hidden: Sequence[int] = (512,), slope: float = 0.2, lambda_gp: float = 10.0,
                 lambda1: float = 0.1, lambda2: float = 0.1, seed=0) -> GanBundle:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g_in = d_a + d_z + (rep_dim if mode != "classic_a" else 0)
    d_in = d_v + d_a + rep_dim if mode == "sr" else d_v
    G = nn.init_mlp(nn.mlp_config(g_in, g_hidden, d_v, slope), rng)
    D = nn.init_mlp(nn.mlp_config(d_in, d_hidden, 1, slope), rng)
    F1 = nn.init_mlp(nn.mlp_config(d_v, f_hidden, d_a, slope), rng)
    F2 = nn.init_mlp(nn.mlp_config(d_v, f_hidden, rep_dim, slope), rng) if mode != "classic_a" else None
    return GanBundle(G, D, F1, F2, d_z, mode, lambda_gp, lambda1, lambda2)


def generate(G: nn.Mlp, a, rep, z) -> Tensor:
    """G on concat(a, rep, z); ``rep`` is None for the semantics-only generator."""
    parts = [ad.as_tensor(a)] + ([ad.as_tensor(rep)] if rep is not None else []) + [ad.as_tensor(z)]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ad.ShapeError(f"generator inputs disagree on batch size: {[p.shape for p in parts]}")
    return G(ad.concat(parts, axis=1))


def critic_score(D: nn.Mlp, x, a=None, rep=None) -> Tensor:
    """D on concat(x, a, rep), one score per row; unconditional when a and rep are None."""
    parts = [ad.as_tensor(x)] + [ad.as_tensor(p) for p in (a, rep) if p is not None]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ad.ShapeError(f"critic inputs disagree on batch size: {[p.shape for p in parts]}")
    out = D(ad.concat(parts, axis=1))
    if out.shape[1] != 1:
        raise ad.ShapeError(f"critic must output one score per row, got {out.shape}")
    return out


def gradient_penalty(D: nn.Mlp, x_real, x_fake, a, rep, lam: float,
                     rng: np.random.Generator | None = None, mu=None) -> Tensor:
    """lam * mean over rows of (||d D([x_hat, a, rep]) / d x_hat||_2 - 1)^2.

    ``x_hat = mu * x_real + (1 - mu) * x_fake`` with ``mu ~ U(0, 1)`` per row.
    Conditioning inputs are held constant.
    """
    xr, xf = ad.as_tensor(x_real).data, ad.as_tensor(x_fake).data
    if xr.shape != xf.shape:
        raise ad.ShapeError(f"real {xr.shape} and fake {xf.shape} batches differ")
    if mu is None:
        mu = rng.uniform(size=(xr.shape[0], 1))
    mu = np.asarray(mu, dtype=np.float64).reshape(xr.shape[0], 1)
    x_hat = Tensor(mu * xr + (1.0 - mu) * xf, requires_grad=True)
    g = ad.grad_wrt_input(lambda t: critic_score(D, t, a, rep), x_hat)
    return ad.scale(ad.mean(ad.square(ad.sub(ad.row_norm(g), 1.0))), lam)


def _cond(bundle: GanBundle, batch: GanBatch):
    if bundle.conditional_critic:
        return batch.a, batch.rep
    return None, None


def fake_features(bundle: GanBundle, batch: GanBatch) -> Tensor:
    return generate(bundle.G, batch.a, batch.rep if bundle.uses_rep else None, batch.z)


def critic_loss(bundle: GanBundle, batch: GanBatch, x_fake: Tensor | None = None):
    """Critic-side loss and the Wasserstein estimate E[D(real)] - E[D(fake)]."""
    if x_fake is None:
        with ad.no_grad():
            x_fake = fake_features(bundle, batch)
    x_fake = x_fake.detach()
    a, rep = _cond(bundle, batch)
    d_fake = ad.mean(critic_score(bundle.D, x_fake, a, rep))
    d_real = ad.mean(critic_score(bundle.D, batch.x, a, rep))
    mu = batch.mu
    if mu is None:
        raise ValueError("batch.mu is required for the gradient penalty")
    gp = gradient_penalty(bundle.D, batch.x, x_fake, a, rep, bundle.lambda_gp, mu=mu)
    loss = ad.add(ad.sub(d_fake, d_real), gp)
    if bundle.mode != "sr":
        clf = bundle.classifier
        with ad.no_grad():
            cls_term = clf.log_likelihood(x_fake, batch.labels).item() - clf.log_likelihood(batch.x, batch.labels).item()
        loss = ad.add(loss, cls_term)
    return loss, d_real.item() - d_fake.item()


def adversarial_generator_loss(bundle: GanBundle, batch: GanBatch, x_fake: Tensor) -> Tensor:
    a, rep = _cond(bundle, batch)
    loss = ad.neg(ad.mean(critic_score(bundle.D, x_fake, a, rep)))
    if bundle.mode != "sr":
        loss = ad.sub(loss, bundle.classifier.log_likelihood(x_fake, batch.labels))
    return loss


def wgan_sr_losses(bundle: GanBundle, batch: GanBatch):
    """(L_D, L_G) for the searched-representation critic."""
    if bundle.mode != "sr":
        raise ValueError("wgan_sr_losses needs an sr-mode bundle")
    x_fake = fake_features(bundle, batch)
    l_d, _ = critic_loss(bundle, batch, x_fake)
    return l_d, adversarial_generator_loss(bundle, batch, x_fake)


def wgan_classic_losses(bundle: GanBundle, batch: GanBatch, classifier: AuxClassifier | None = None):
    """(L_D, L_G) for the unconditional critic with classifier log-likelihood terms.

    L_D = E[D(fake)] - E[D(real)] + E[log P(y|fake)] - E[log P(y|real)] + penalty
    L_G = -E[D(fake)] - E[log P(y|fake)]
    """
    if bundle.mode == "sr":
        raise ValueError("wgan_classic_losses needs a classic-mode bundle")
    if classifier is not None:
        bundle.classifier = classifier
    if bundle.classifier is None:
        raise ValueError("the classic objective needs an auxiliary classifier")
    x_fake = fake_features(bundle, batch)
    l_d, _ = critic_loss(bundle, batch, x_fake)
    return l_d, adversarial_generator_loss(bundle, batch, x_fake)


def _l1_rows(pred: Tensor, target) -> Tensor:
    return ad.mean(ad.tsum(ad.absolute(ad.sub(pred, ad.as_tensor(target))), axis=1))


def reconstruction_losses(F1: nn.Mlp, F2: nn.Mlp | None, x_fake, a, rep):
    """(L_F1, L_F2): batch means of ||F1(x) - a||_1 and ||F2(x) - rep||_1; L_F2 is None without F2."""
    x_fake = ad.as_tensor(x_fake)
    l_f1 = _l1_rows(F1(x_fake), a)
    l_f2 = _l1_rows(F2(x_fake), rep) if F2 is not None else None
    return l_f1, l_f2


def generator_objective(bundle: GanBundle, batch: GanBatch, x_fake: Tensor | None = None) -> Tensor:
    """Adversarial generator loss + lambda1 * L_F1 (+ lambda2 * L_F2 when F2 exists)."""
    if x_fake is None:
        x_fake = fake_features(bundle, batch)
    total = adversarial_generator_loss(bundle, batch, x_fake)
    l_f1, l_f2 = reconstruction_losses(bundle.F1, bundle.F2, x_fake, batch.a, batch.rep)
    total = ad.add(total, ad.scale(l_f1, bundle.lambda1))
    if l_f2 is not None:
        total = ad.add(total, ad.scale(l_f2, bundle.lambda2))
    return total


def dcrgan_generator_objective(bundle: GanBundle, batch: GanBatch) -> Tensor:
    if bundle.mode != "sr":
        raise ValueError("dcrgan_generator_objective needs an sr-mode bundle")
    return generator_objective(bundle, batch)


# -- training -------------------------------------------------------------

def draw_batch(ds: ZslDataset, R: Srn | None, batch_size: int, d_z: int,
               rng: np.random.Generator) -> GanBatch:
    x, a, labels = sample_batch(ds, "train", batch_size, rng)
    rep = rectified(R, a) if R is not None else None
    z = Tensor(rng.standard_normal(size=(batch_size, d_z)))
    mu = rng.uniform(size=(batch_size, 1))
    return GanBatch(x, a, rep, labels, z, mu)


def train_aux_classifier(ds: ZslDataset, steps: int, rng: np.random.Generator, lr: float = 1e-3,
                         batch_size: int = 64) -> AuxClassifier:
    classes = ds.seen_classes
    mlp = nn.init_mlp(nn.mlp_config(ds.d_v, (), classes.size), rng)
    clf = AuxClassifier(mlp, classes)
    opt = nn.Adam(mlp.parameters(), lr=lr, beta1=0.9)
    for _ in range(steps):
        x, _, labels = sample_batch(ds, "train", batch_size, rng)
        loss = nn.softmax_cross_entropy(mlp(x), clf.positions(labels))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return clf


def train_gan(ds: ZslDataset, bundle: GanBundle, schedule: TrainSchedule, R: Srn | None,
              M: MetricNet | None, rng: np.random.Generator, lr: float = 1e-4, beta1: float = 0.5,
              beta2: float = 0.999, classifier_steps: int = 300) -> list[dict]:
    """Alternating optimisation: per loop n_d critic steps, then n_g rounds of F1, F2, G steps.

    M is accepted for symmetry with the pipeline but never read; R is only
    evaluated. Returns one log row per outer loop.
    """
    del M
    if bundle.uses_rep and R is None:
        raise ValueError(f"mode {bundle.mode} needs a trained rectifier")
    if bundle.mode != "sr" and bundle.classifier is None:
        bundle.classifier = train_aux_classifier(ds, classifier_steps, rng)
    opts = {name: nn.Adam(net.parameters(), lr=lr, beta1=beta1, beta2=beta2)
            for name, net in bundle.networks().items()}
    r_net = R if bundle.uses_rep else None
    history = []
    for loop in range(schedule.n_loop):
        for _ in range(schedule.n_d):
            batch = draw_batch(ds, r_net, schedule.batch_size, bundle.d_z, rng)
            l_d, w_est = critic_loss(bundle, batch)
            nn.check_finite(l_d.item(), "critic loss")
            opts["D"].zero_grad()
            l_d.backward(inputs=bundle.D.parameters())
            opts["D"].step()
        for _ in range(schedule.n_g):
            batch = draw_batch(ds, r_net, schedule.batch_size, bundle.d_z, rng)
            x_fake = fake_features(bundle, batch)
            detached = x_fake.detach()
            l_f1, _ = reconstruction_losses(bundle.F1, None, detached, batch.a, None)
            opts["F1"].zero_grad()
            l_f1.backward(inputs=bundle.F1.parameters())
            opts["F1"].step()
            l_f2_val = float("nan")
            if bundle.F2 is not None:
                _, l_f2 = reconstruction_losses(bundle.F1, bundle.F2, detached, batch.a, batch.rep)
                l_f2_val = l_f2.item()
                opts["F2"].zero_grad()
                l_f2.backward(inputs=bundle.F2.parameters())
                opts["F2"].step()
            l_g = generator_objective(bundle, batch, x_fake)
            nn.check_finite(l_g.item(), "generator loss")
            opts["G"].zero_grad()
            l_g.backward(inputs=bundle.G.parameters())
            opts["G"].step()
        history.append(dict(step=loop, L_D=l_d.item(), L_G=l_g.item(), L_F1=l_f1.item(),
                            L_F2=l_f2_val, wasserstein=w_est))
    return history
