"""Structure-guided point-cloud encoder and geometry-image generator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry_image import rotational_pad, to_point_cloud
from .pointcloud import kernel_correlation, knn

LOGVAR_RANGE = (-10.0, 10.0)


@dataclass(frozen=True)
class EncoderConfig:
    n_kernels: int = 32
    kernel_size: int = 16
    neighbors: int = 16
    sigma: float = math.sqrt(0.005)
    mlp: tuple[int, ...] = (64, 64, 64, 128, 1024)
    head: tuple[int, ...] = (512, 256)
    latent_dim: int = 128
    label_dim: int = 0

    @property
    def input_width(self) -> int:
        return 3 + self.n_kernels


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 128
    base_resolution: int = 6
    base_channels: int = 512
    # one tuple of padded 3x3 convolutions per resolution; x2 upsampling between them
    stages: tuple[tuple[int, ...], ...] = ((384, 384), (256, 256), (128, 128), (128, 128))
    final_channels: int = 64
    final_padded: bool = False
    label_dim: int = 0

    @property
    def output_resolution(self) -> int:
        res = self.base_resolution * 2 ** (len(self.stages) - 1)
        return res if self.final_padded else res - 2

    @property
    def n_points(self) -> int:
        return self.output_resolution ** 2


PRESETS = {
    "full": (EncoderConfig(), GeneratorConfig()),
    "desk": (
        EncoderConfig(kernel_size=8, neighbors=8, mlp=(32, 32, 32, 64, 128), head=(64,),
                      latent_dim=16),
        GeneratorConfig(latent_dim=16, base_resolution=2, base_channels=64,
                        stages=((48, 48), (32, 32), (16, 16), (16, 16)),
                        final_channels=8, final_padded=True),
    ),
    "tiny": (
        EncoderConfig(n_kernels=4, kernel_size=4, neighbors=4, mlp=(8, 16), head=(),
                      latent_dim=16),
        GeneratorConfig(latent_dim=16, base_resolution=4, base_channels=4,
                        stages=((4,), (4,)), final_channels=4, final_padded=True),
    ),
}


def preset(name: str, label_dim: int = 0) -> tuple[EncoderConfig, GeneratorConfig]:
    try:
        enc, gen = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return (EncoderConfig(**{**enc.__dict__, "label_dim": label_dim}),
            GeneratorConfig(**{**gen.__dict__, "label_dim": label_dim}))


@dataclass
class DiagonalGaussian:
    """Batched diagonal Gaussian parameterised by mean and log-variance, shape (b, d)."""
    mu: Tensor
    logvar: Tensor

    @property
    def sigma(self) -> Tensor:
        return ad.exp(ad.scalar_mul(self.logvar, 0.5))

    @property
    def var(self) -> Tensor:
        return ad.exp(self.logvar)

    @classmethod
    def standard(cls, batch: int, dim: int) -> "DiagonalGaussian":
        return cls(Tensor(np.zeros((batch, dim))), Tensor(np.zeros((batch, dim))))


# ---------------------------------------------------------------- parameters

def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n), requires_grad=True)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p = {"enc.kernels": Tensor(rng.uniform(-0.2, 0.2, size=(cfg.n_kernels, cfg.kernel_size, 3)),
                               requires_grad=True)}
    width = cfg.input_width
    for i, out in enumerate(cfg.mlp):
        p[f"enc.mlp{i}.W"] = _glorot(rng, (width, out), width, out)
        p[f"enc.mlp{i}.b"] = _zeros(out)
        width = out
    width += cfg.label_dim
    for i, out in enumerate(cfg.head):
        p[f"enc.head{i}.W"] = _glorot(rng, (width, out), width, out)
        p[f"enc.head{i}.b"] = _zeros(out)
        width = out
    p["enc.out.W"] = _glorot(rng, (width, 2 * cfg.latent_dim), width, 2 * cfg.latent_dim)
    p["enc.out.b"] = _zeros(2 * cfg.latent_dim)
    return p


def _conv_param(rng, cout, cin, k):
    return _glorot(rng, (cout, cin, k, k), cin * k * k, cout * k * k)


def init_generator(cfg: GeneratorConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    width = cfg.latent_dim + cfg.label_dim
    fc = cfg.base_channels * cfg.base_resolution ** 2
    p = {"gen.fc.W": _glorot(rng, (width, fc), width, fc), "gen.fc.b": _zeros(fc)}
    cin = cfg.base_channels
    for s, stage in enumerate(cfg.stages):
        for c, cout in enumerate(stage):
            p[f"gen.s{s}c{c}.K"] = _conv_param(rng, cout, cin, 3)
            p[f"gen.s{s}c{c}.b"] = _zeros(cout)
            cin = cout
    p["gen.final.K"] = _conv_param(rng, cfg.final_channels, cin, 3)
    p["gen.final.b"] = _zeros(cfg.final_channels)
    p["gen.out.K"] = _conv_param(rng, 3, cfg.final_channels, 1)
    p["gen.out.b"] = _zeros(3)
    return p


def parameter_init(enc: EncoderConfig, gen: GeneratorConfig, seed) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    return {**init_encoder(enc, rng), **init_generator(gen, rng)}


# ---------------------------------------------------------------- forward passes

def _label_tensor(label, batch: int, width: int, who: str) -> Tensor | None:
    if width == 0:
        if label is not None:
            raise ValueError(f"{who}: got a label but the model is unconditional")
        return None
    if label is None:
        raise ValueError(f"{who}: conditional model needs a one-hot label")
    lab = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=np.float64)
    if lab.ndim == 1:
        lab = np.broadcast_to(lab, (batch, lab.shape[0]))
    if lab.shape != (batch, width):
        raise ValueError(f"{who}: label shape {lab.shape} != ({batch}, {width})")
    return Tensor(lab)


def point_features(points, cfg: EncoderConfig, params: dict[str, Tensor],
                   neighbors: np.ndarray | None = None) -> Tensor:
    """Per-point encoder input: coordinates concatenated with kernel correlations.

    ``neighbors`` may carry precomputed (b, n, k) knn indices.
    """
    P = ad.tensor(points)
    if P.ndim == 2:
        P = ad.reshape(P, (1, *P.shape))
    b, n, _ = P.shape
    if n < cfg.neighbors + 1:
        raise ValueError(f"encode: cloud of {n} points is too small for {cfg.neighbors} neighbours")
    if neighbors is None:
        idx = np.stack([knn(p, cfg.neighbors) for p in P.data])
    else:
        idx = np.asarray(neighbors, dtype=np.int64).reshape(b, n, cfg.neighbors)
    feats = kernel_correlation(P, idx, params["enc.kernels"], cfg.sigma)
    return ad.concat([P, feats], axis=2)


def pooled_feature(features: Tensor, cfg: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    """Shared per-point MLP followed by max pooling over points."""
    b, n, width = features.shape
    h = ad.reshape(features, (b * n, width))
    for i in range(len(cfg.mlp)):
        h = ad.relu(ad.linear(h, params[f"enc.mlp{i}.W"], params[f"enc.mlp{i}.b"]))
    return ad.max(ad.reshape(h, (b, n, h.shape[1])), axis=1)


def encode(points, cfg: EncoderConfig, params: dict[str, Tensor], label=None,
           neighbors: np.ndarray | None = None) -> DiagonalGaussian:
    """Map (n, 3) or (b, n, 3) clouds to a batched diagonal Gaussian posterior."""
    feats = point_features(points, cfg, params, neighbors)
    g = pooled_feature(feats, cfg, params)
    lab = _label_tensor(label, g.shape[0], cfg.label_dim, "encode")
    if lab is not None:
        g = ad.concat([g, lab], axis=1)
    for i in range(len(cfg.head)):
        g = ad.relu(ad.linear(g, params[f"enc.head{i}.W"], params[f"enc.head{i}.b"]))
    out = ad.linear(g, params["enc.out.W"], params["enc.out.b"])
    mu, logvar = ad.split(out, [cfg.latent_dim, cfg.latent_dim], axis=1)
    return DiagonalGaussian(mu, ad.clip(logvar, *LOGVAR_RANGE))


def reparameterize(q: DiagonalGaussian, eps) -> Tensor:
    """z = mu + eps * sigma with ``eps`` a fixed draw of standard normals."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != q.mu.shape:
        raise ValueError(f"reparameterize: eps shape {eps.shape} != {q.mu.shape}")
    return ad.add(q.mu, ad.mul(q.sigma, Tensor(eps)))


def _shape(t) -> str:
    dims = (1, t.shape[1]) if t.ndim == 2 else t.shape[1:]
    return "×".join(str(s) for s in dims)


def generate(z, cfg: GeneratorConfig, params: dict[str, Tensor], label=None,
             trace: list | None = None) -> Tensor:
    """Decode latent codes (b, d) into geometry images (b, 3, H, W).

    When ``trace`` is a list, one ``(operation, parameters, output shape)`` row
    is appended per layer.
    """
    z = ad.tensor(z)
    if z.ndim == 1:
        z = ad.reshape(z, (1, z.shape[0]))
    if z.shape[1] != cfg.latent_dim:
        raise ValueError(f"generate: latent width {z.shape[1]} != {cfg.latent_dim}")
    b = z.shape[0]
    log = trace.append if trace is not None else (lambda row: None)
    lab = _label_tensor(label, b, cfg.label_dim, "generate")
    if lab is not None:
        z = ad.concat([z, lab], axis=1)
    log(("Input", "-", _shape(z)))
    W = params["gen.fc.W"]
    h = ad.relu(ad.linear(z, W, params["gen.fc.b"]))
    log(("FC", f"{W.shape[0]}×{W.shape[1]}", _shape(h)))
    h = ad.reshape(h, (b, cfg.base_channels, cfg.base_resolution, cfg.base_resolution))
    log(("Reshape", "-", _shape(h)))
    for s, stage in enumerate(cfg.stages):
        if s > 0:
            h = ad.upsample_nearest2x(h)
            log(("Upsample", "×2", _shape(h)))
        for c, cout in enumerate(stage):
            K = params[f"gen.s{s}c{c}.K"]
            h = ad.relu(ad.conv2d(rotational_pad(h, 1), K, params[f"gen.s{s}c{c}.b"]))
            log(("Padding and Conv", f"3×3, {cout}", _shape(h)))
    src = rotational_pad(h, 1) if cfg.final_padded else h
    h = ad.relu(ad.conv2d(src, params["gen.final.K"], params["gen.final.b"]))
    log(("Padding and Conv" if cfg.final_padded else "Conv",
         f"3×3, {cfg.final_channels}", _shape(h)))
    out = ad.tanh(ad.conv2d(h, params["gen.out.K"], params["gen.out.b"]))
    log(("Conv and tanh", "1×1, 3", _shape(out)))
    log(("Reshape", "-", f"3×{out.shape[2] * out.shape[3]}"))
    return out


@dataclass
class Model:
    """Encoder and generator configurations with their named parameters."""
    encoder: EncoderConfig
    generator: GeneratorConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, preset_name: str = "desk", seed=0, label_dim: int = 0) -> "Model":
        enc, gen = preset(preset_name, label_dim)
        return cls(enc, gen, parameter_init(enc, gen, seed))

    @property
    def latent_dim(self) -> int:
        return self.generator.latent_dim

    @property
    def label_dim(self) -> int:
        return self.generator.label_dim

    def encoder_params(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith("enc.")]

    def generator_params(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith("gen.")]

    def encode(self, points, label=None) -> DiagonalGaussian:
        return encode(points, self.encoder, self.params, label)

    def generate(self, z, label=None) -> Tensor:
        return generate(z, self.generator, self.params, label)

    def decode(self, z, label=None) -> np.ndarray:
        """Point clouds (b, H*W, 3) for latent codes, off the tape."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return to_point_cloud(generate(Tensor(z), self.generator, self._frozen(), label).data)

    def _frozen(self) -> dict[str, Tensor]:
        return {k: Tensor(v.data) for k, v in self.params.items()}
