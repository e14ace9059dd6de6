"""Losses and training loops for the adversarial VAE.

The encoder doubles as a latent-space critic: besides reconstructing real
clouds it is pushed to separate the posteriors of reconstructed and sampled
clouds from the real ones, while the generator is pushed the other way. Both
adversarial terms use the closed-form squared Hellinger distance between
diagonal Gaussians.
"""
from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, Tensor
from .geometry_image import to_point_cloud
from .networks import DiagonalGaussian, Model, encode, generate, reparameterize
from .pointcloud import chamfer_distance, knn

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,L_rec,L_prior,L_adE,L_adG"


class DivergenceError(RuntimeError):
    """Training produced a non-finite value."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "full"
    epochs: int = 1200
    batch_size: int = 32
    lr: float = 1e-4
    pretrain_epochs: int = 300
    seed: int = 0
    conditional: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be non-negative")

    @classmethod
    def for_preset(cls, preset: str, **overrides) -> "TrainConfig":
        base = {"desk": dict(epochs=200, pretrain_epochs=50, lr=1e-3)}.get(preset, {})
        return cls(preset=preset, **{**base, **overrides})


# ---------------------------------------------------------------- loss terms

def kl_prior(q: DiagonalGaussian) -> Tensor:
    """KL(q || N(0, I)) for each row of a batched diagonal Gaussian, shape (b,)."""
    mu2 = ad.mul(q.mu, q.mu)
    terms = ad.sub(ad.sub(ad.add(mu2, q.var), 1.0), q.logvar)
    return ad.scalar_mul(ad.sum(terms, axis=1), 0.5)


def hellinger_sq(p: DiagonalGaussian, q: DiagonalGaussian) -> Tensor:
    """Squared Hellinger distance between matching rows, shape (b,).

    1 - prod_i sqrt(2 s1 s2 / (s1^2 + s2^2)) exp(-(m1 - m2)^2 / (4 (s1^2 + s2^2))),
    evaluated as a sum of logs.
    """
    if p.mu.shape != q.mu.shape:
        raise ValueError(f"hellinger_sq: shapes {p.mu.shape} and {q.mu.shape} differ")
    s = ad.add(p.var, q.var)
    diff = ad.sub(p.mu, q.mu)
    log_bc = ad.sub(
        ad.sub(ad.add(ad.scalar_mul(ad.add(p.logvar, q.logvar), 0.25), 0.5 * math.log(2.0)),
               ad.scalar_mul(ad.log(s), 0.5)),
        ad.scalar_mul(ad.div(ad.mul(diff, diff), s), 0.25))
    return ad.sub(ad.neg(ad.exp(ad.sum(log_bc, axis=1))), -1.0)


def reconstruction_loss(P, P_rec) -> Tensor:
    """Batch mean of the chamfer distance between inputs and reconstructions."""
    return ad.mean(chamfer_distance(P, P_rec))


def adversarial_losses(q_real: DiagonalGaussian, q_rec: DiagonalGaussian,
                       q_fake: DiagonalGaussian) -> tuple[Tensor, Tensor]:
    """Return ``(L_ad_G, L_ad_E)`` with ``L_ad_E == -L_ad_G``.

    Reconstructions are compared with their own inputs row by row; samples
    decoded from the prior are compared with N(0, I).
    """
    if q_rec.mu.shape != q_real.mu.shape:
        raise ValueError("adversarial_losses: reconstructed and real batches differ in size")
    prior = DiagonalGaussian.standard(*q_fake.mu.shape)
    paired = ad.mean(hellinger_sq(q_rec, q_real))
    fake = ad.mean(hellinger_sq(q_fake, prior))
    L_G = ad.scalar_mul(ad.add(paired, fake), 0.5)
    return L_G, ad.neg(L_G)


# ---------------------------------------------------------------- training

def rng_streams(seed) -> dict[str, np.random.Generator]:
    """Independent generators for initialisation, shuffling, posterior and prior noise."""
    names = ("init", "shuffle", "eps", "prior")
    return dict(zip(names, (np.random.default_rng(s)
                            for s in np.random.SeedSequence(seed).spawn(len(names)))))


@dataclass
class TrainResult:
    model: Model
    log: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    best_model: Model | None = None
    best_val: float | None = None
    val_history: list[float] = field(default_factory=list)

    def log_text(self) -> str:
        lines = [LOG_HEADER]
        lines += [f"{e},{a:.9g},{b:.9g},{c:.9g},{d:.9g}" for e, a, b, c, d in self.log]
        return "\n".join(lines) + "\n"


@contextmanager
def _diverges(term: str, where: str):
    try:
        yield
    except NonFiniteError as exc:
        raise DivergenceError(f"{where}: non-finite value while computing {term} ({exc})") from exc


def _guard(term: str, fn: Callable[[], Tensor], where: str) -> Tensor:
    with _diverges(term, where):
        value = fn()
    if not np.isfinite(value.data).all():
        raise DivergenceError(f"{where}: {term} is not finite")
    return value


def _grads(params: list[Tensor]) -> list[np.ndarray]:
    out = []
    for p in params:
        out.append(np.zeros_like(p.data) if p.grad is None else p.grad)
        p.grad = None
    return out


def _as_clouds(data, name: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or len(arr) == 0:
        raise ValueError(f"{name}: expected a non-empty (N, n, 3) array of clouds, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: non-finite coordinates")
    return arr


def _snapshot(model: Model) -> Model:
    return Model(model.encoder, model.generator,
                 {k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.params.items()})


def validation_loss(model: Model, clouds: np.ndarray, labels=None, batch_size: int = 32) -> float:
    """Mean reconstruction chamfer using the posterior mean as the code."""
    total = 0.0
    for start in range(0, len(clouds), batch_size):
        P = clouds[start:start + batch_size]
        lab = None if labels is None else labels[start:start + batch_size]
        frozen = model._frozen()
        q = encode(P, model.encoder, frozen, lab)
        rec = to_point_cloud(generate(q.mu, model.generator, frozen, lab)).data
        total += float(chamfer_distance(P, rec).data.sum())
    return total / len(clouds)


def iteration_gradients(model: Model, P: np.ndarray, eps: np.ndarray, z_p: np.ndarray | None,
                        alpha: float, beta: float, label=None, neighbors=None,
                        where: str = "iteration") -> tuple[float, float, float, float]:
    """One forward pass and the gradients of both objectives.

    Leaves in ``.grad`` the gradient of rec + alpha*prior + beta*adE for
    encoder parameters and of rec + beta*adG for generator parameters. With
    ``z_p`` None the adversarial terms are skipped and reported as zero.
    Returns ``(L_rec, L_prior, L_adE, L_adG)``.
    """
    p = model.params
    with _diverges("L_rec", where):
        q = encode(P, model.encoder, p, label, neighbors)
        z = reparameterize(q, eps)
        P_rec = to_point_cloud(generate(z, model.generator, p, label))
    L_rec = _guard("L_rec", lambda: reconstruction_loss(P, P_rec), where)
    L_prior = _guard("L_prior", lambda: ad.mean(kl_prior(q)), where)
    L_vae = ad.add(L_rec, ad.scalar_mul(L_prior, alpha))
    L_G = None
    if z_p is not None:
        def adv():
            P_fake = to_point_cloud(generate(Tensor(z_p), model.generator, p, label))
            q_rec = encode(P_rec, model.encoder, p, label)
            q_fake = encode(P_fake, model.encoder, p, label)
            return adversarial_losses(q, q_rec, q_fake)[0]

        L_G = _guard("L_adG", adv, where)

    enc_params, gen_params = model.encoder_params(), model.generator_params()
    for prm in enc_params + gen_params:
        prm.grad = None
    ad.backward(L_vae)
    if L_G is None:
        return L_rec.item(), L_prior.item(), 0.0, 0.0
    # L_adE = -L_adG, so one extra backward pass serves both objectives
    gE, gG = _grads(enc_params), _grads(gen_params)
    ad.backward(L_G)
    aE, aG = _grads(enc_params), _grads(gen_params)
    for prm, g, a in zip(enc_params, gE, aE):
        prm.grad = g - beta * a
    for prm, g, a in zip(gen_params, gG, aG):
        prm.grad = g + beta * a
    return L_rec.item(), L_prior.item(), -L_G.item(), L_G.item()


def train_advae(clouds, cfg: TrainConfig, weights: LossWeights = LossWeights(), seed=None,
                labels=None, val_clouds=None, val_labels=None, model: Model | None = None,
                on_epoch: Callable[[int, tuple], None] | None = None) -> TrainResult:
    """Alternating encoder/generator optimisation.

    ``cfg.pretrain_epochs`` epochs with the adversarial weight set to zero run
    first, then ``cfg.epochs`` epochs with ``weights.beta``. Each iteration
    updates the encoder with the gradient of rec + alpha*prior + beta*adE and
    the generator with that of rec + beta*adG, both from the same forward pass.
    """
    clouds = _as_clouds(clouds, "train_advae")
    seed = cfg.seed if seed is None else seed
    streams = rng_streams(seed)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.float64)
        if labels.shape[0] != len(clouds):
            raise ValueError("train_advae: one label per cloud required")
    label_dim = 0 if labels is None else labels.shape[1]
    if model is None:
        model = Model.create(cfg.preset, streams["init"], label_dim)
    if model.label_dim != label_dim:
        raise ValueError(f"train_advae: model expects {model.label_dim}-wide labels, got {label_dim}")
    if val_clouds is not None:
        val_clouds = _as_clouds(val_clouds, "validation set")

    k = model.encoder.neighbors
    neighbors = np.stack([knn(p, k) for p in clouds])
    enc_params, gen_params = model.encoder_params(), model.generator_params()
    opt_E = Adam(enc_params, lr=cfg.lr)
    opt_G = Adam(gen_params, lr=cfg.lr)
    result = TrainResult(model)
    phases = [0.0] * cfg.pretrain_epochs + [weights.beta] * cfg.epochs
    n = len(clouds)

    for epoch, beta in enumerate(phases):
        order = streams["shuffle"].permutation(n)
        sums = np.zeros(4)
        batches = 0
        for it, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            where = f"epoch {epoch}, iteration {it}"
            lab = None if labels is None else labels[idx]
            shape = (len(idx), model.latent_dim)
            eps = streams["eps"].standard_normal(shape)
            z_p = streams["prior"].standard_normal(shape) if beta > 0 else None
            losses = iteration_gradients(model, clouds[idx], eps, z_p, weights.alpha, beta, lab,
                                         neighbors[idx], where)
            opt_E.step()
            opt_G.step()
            opt_E.zero_grad()
            opt_G.zero_grad()
            for prm in enc_params + gen_params:
                if not np.isfinite(prm.data).all():
                    raise DivergenceError(f"{where}: parameters became non-finite after the update")
            sums += losses
            batches += 1

        row = (epoch, *(sums / batches))
        result.log.append(row)
        if val_clouds is not None:
            v = validation_loss(model, val_clouds, val_labels, cfg.batch_size)
            result.val_history.append(v)
            if result.best_val is None or v < result.best_val:
                result.best_val = v
                result.best_model = _snapshot(model)
        if on_epoch is not None:
            on_epoch(epoch, row)
        log.debug("epoch %d: %s", epoch, row)
    return result


def encode_cached(P, neighbors, model: Model, label=None) -> DiagonalGaussian:
    """Encode real clouds whose neighbourhoods were precomputed."""
    return encode(P, model.encoder, model.params, label, neighbors)


def train_completion(partial, complete, cfg: TrainConfig, weights: LossWeights = LossWeights(beta=0.0),
                     seed=None, model: Model | None = None,
                     on_epoch: Callable[[int, tuple], None] | None = None) -> TrainResult:
    """Encoder reads the partial cloud, generator is scored against the complete one.

    The loss is chamfer(decoded, complete) + alpha * KL; there are no
    adversarial terms, so the logged adversarial columns are zero.
    """
    partial = _as_clouds(partial, "partial clouds")
    complete = _as_clouds(complete, "complete clouds")
    if len(partial) != len(complete):
        raise ValueError("train_completion: partial and complete sets differ in length")
    seed = cfg.seed if seed is None else seed
    streams = rng_streams(seed)
    if model is None:
        model = Model.create(cfg.preset, streams["init"])
    neighbors = np.stack([knn(p, model.encoder.neighbors) for p in partial])
    params = model.encoder_params() + model.generator_params()
    opt = Adam(params, lr=cfg.lr)
    result = TrainResult(model)
    n = len(partial)
    for epoch in range(cfg.pretrain_epochs + cfg.epochs):
        order = streams["shuffle"].permutation(n)
        sums = np.zeros(2)
        batches = 0
        for it, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            where = f"epoch {epoch}, iteration {it}"
            with _diverges("L_rec", where):
                q = encode_cached(partial[idx], neighbors[idx], model)
                z = reparameterize(q, streams["eps"].standard_normal(q.mu.shape))
                out = to_point_cloud(generate(z, model.generator, model.params))
            L_rec = _guard("L_rec", lambda: reconstruction_loss(complete[idx], out), where)
            L_prior = _guard("L_prior", lambda: ad.mean(kl_prior(q)), where)
            ad.backward(ad.add(L_rec, ad.scalar_mul(L_prior, weights.alpha)))
            opt.step()
            opt.zero_grad()
            sums += (L_rec.item(), L_prior.item())
            batches += 1
        row = (epoch, *(sums / batches), 0.0, 0.0)
        result.log.append(row)
        if on_epoch is not None:
            on_epoch(epoch, row)
    return result


def complete_clouds(model: Model, partial) -> np.ndarray:
    """Decode the posterior mean of each partial cloud."""
    P = np.asarray(partial, dtype=np.float64)
    single = P.ndim == 2
    P = P[None] if single else P
    frozen = model._frozen()
    q = encode(P, model.encoder, frozen)
    out = to_point_cloud(generate(q.mu, model.generator, frozen).data)
    return out[0] if single else out


# ---------------------------------------------------------------- latent editing

def _latent(z, model: Model, who: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.latent_dim,):
        raise ValueError(f"{who}: latent code must have shape ({model.latent_dim},), got {z.shape}")
    return z


def decode_one(model: Model, z, label=None) -> np.ndarray:
    return model.decode(np.asarray(z, dtype=np.float64)[None], label)[0]


def interpolate_latent(model: Model, z_a, z_b, steps: int, label=None) -> list[np.ndarray]:
    """Decode ``(1 - t) z_a + t z_b`` at ``steps`` evenly spaced t in [0, 1]."""
    if steps < 2:
        raise ValueError("interpolate_latent: steps must be at least 2")
    z_a = _latent(z_a, model, "interpolate_latent")
    z_b = _latent(z_b, model, "interpolate_latent")
    out = []
    d = z_b - z_a
    for i in range(steps):
        t = i / (steps - 1)
        # anchored at the nearer end: exact at t = 0 and t = 1, and constant when z_a == z_b
        z = z_a + t * d if t < 0.5 else z_b - (1.0 - t) * d
        out.append(decode_one(model, z, label))
    return out


def latent_arithmetic(model: Model, z_target, z_plus, z_minus, label=None) -> np.ndarray:
    """Decode ``z_target + (z_plus - z_minus)``.

    Each coordinate is the correctly rounded value of the exact sum, so
    ``z_plus == z_minus`` yields ``z_target`` and ``z_target == z_minus``
    yields ``z_plus`` exactly.
    """
    z_t = _latent(z_target, model, "latent_arithmetic")
    z_p = _latent(z_plus, model, "latent_arithmetic")
    z_m = _latent(z_minus, model, "latent_arithmetic")
    z = np.array([math.fsum((a, b, -c)) for a, b, c in zip(z_t, z_p, z_m)])
    return decode_one(model, z, label)


def path_smoothness(clouds: list[np.ndarray]) -> float:
    """Largest chamfer distance between consecutive clouds of a path."""
    from .pointcloud import chamfer
    return max(chamfer(a, b) for a, b in zip(clouds[:-1], clouds[1:]))
