"""Set-level metrics for generated point clouds: JSD, MMD and coverage."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .emd import emd
from .pointcloud import chamfer_matrix

VOXELS = 28
METRICS = ("JSD", "MMD-CD", "MMD-EMD", "COV-CD", "COV-EMD")


def _cloud_set(clouds, name: str) -> np.ndarray:
    arr = np.asarray(clouds, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3 or len(arr) == 0:
        raise ValueError(f"{name}: expected a non-empty (N, n, 3) set of clouds, got {arr.shape}")
    return arr


def occupancy_histogram(clouds, resolution: int = VOXELS) -> np.ndarray:
    """Point counts per voxel of a ``resolution``^3 grid over [-1, 1]^3, all clouds pooled.

    Points outside the cube land in the nearest boundary voxel.
    """
    pts = _cloud_set(clouds, "occupancy_histogram").reshape(-1, 3)
    idx = np.floor((np.clip(pts, -1.0, 1.0) + 1.0) * (resolution / 2.0)).astype(np.int64)
    idx = np.clip(idx, 0, resolution - 1)
    flat = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    return np.bincount(flat, minlength=resolution ** 3).astype(np.float64)


def jsd_histograms(p, q) -> float:
    """Jensen-Shannon divergence (natural log) of two unnormalised histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    # roundoff can step an ulp outside the true range
    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), math.log(2))


def jsd(A, B, resolution: int = VOXELS) -> float:
    return jsd_histograms(occupancy_histogram(A, resolution), occupancy_histogram(B, resolution))


def distance_matrix(reference, generated, distance: str = "CD",
                    emd_method: str = "exact") -> np.ndarray:
    """(|reference|, |generated|) matrix of pairwise cloud distances."""
    R = _cloud_set(reference, "reference")
    G = _cloud_set(generated, "generated")
    if distance == "CD":
        return chamfer_matrix(R, G)
    if distance == "EMD":
        if R.shape[1] != G.shape[1]:
            raise ValueError("EMD needs reference and generated clouds of equal size")
        return np.array([[emd(r, g, method=emd_method) for g in G] for r in R])
    raise ValueError(f"unknown distance {distance!r}; use 'CD' or 'EMD'")


def _matrix(reference, generated, distance, D):
    return distance_matrix(reference, generated, distance) if D is None else np.asarray(D)


def mmd(reference, generated, distance: str = "CD", D: np.ndarray | None = None) -> float:
    """Mean over reference clouds of the distance to their closest generated cloud."""
    mins = _matrix(reference, generated, distance, D).min(axis=1)
    # fsum is correctly rounded, so the value ignores the order of the reference set
    return math.fsum(mins) / len(mins)


def coverage(reference, generated, distance: str = "CD", D: np.ndarray | None = None) -> float:
    """Percentage of reference clouds that are the nearest reference of some generated cloud."""
    M = _matrix(reference, generated, distance, D)
    matched = np.unique(M.argmin(axis=0))
    return 100.0 * len(matched) / M.shape[0]


def evaluate_sets(reference, generated, emd_method: str = "exact") -> dict[str, float]:
    R = _cloud_set(reference, "reference")
    G = _cloud_set(generated, "generated")
    Dc = distance_matrix(R, G, "CD")
    De = distance_matrix(R, G, "EMD", emd_method)
    return {"JSD": jsd(R, G), "MMD-CD": mmd(R, G, D=Dc), "MMD-EMD": mmd(R, G, D=De),
            "COV-CD": coverage(R, G, D=Dc), "COV-EMD": coverage(R, G, D=De)}


@dataclass
class MetricReport:
    repeats: list[dict[str, float]] = field(default_factory=list)
    samples_per_repeat: int = 0

    @property
    def means(self) -> dict[str, float]:
        return {m: float(np.mean([r[m] for r in self.repeats])) for m in METRICS}

    def text(self) -> str:
        lines = ["# MMD: mean over reference clouds of the distance to the nearest generated cloud",
                 f"# JSD: natural log, bounded by ln 2 = {math.log(2):.6g}",
                 f"# COV in percent; {self.samples_per_repeat} generated clouds per repeat",
                 "metric,repeat,value"]
        for m in METRICS:
            lines += [f"{m},{i},{r[m]:.6g}" for i, r in enumerate(self.repeats)]
        lines += [f"{m},mean,{v:.6g}" for m, v in self.means.items()]
        return "\n".join(lines) + "\n"


Sampler = Callable[[int, np.random.Generator], np.ndarray]


def model_sampler(model, batch_size: int = 64, label=None) -> Sampler:
    """Decode standard-normal latent codes drawn from the supplied generator."""
    def sample(count, rng):
        z = rng.standard_normal((count, model.latent_dim))
        return np.concatenate([model.decode(z[s:s + batch_size], label)
                               for s in range(0, count, batch_size)])
    return sample


def evaluation_protocol(sampler: Sampler, reference, seed, repeats: int = 3, factor: int = 3,
                        emd_method: str = "exact") -> MetricReport:
    """Sample ``factor * |reference|`` clouds per repeat and score them; seeds derive from ``seed``."""
    R = _cloud_set(reference, "reference")
    report = MetricReport(samples_per_repeat=factor * len(R))
    for child in np.random.SeedSequence(seed).spawn(repeats):
        G = np.asarray(sampler(report.samples_per_repeat, np.random.default_rng(child)))
        if len(G) != report.samples_per_repeat:
            raise ValueError(f"sampler returned {len(G)} clouds, expected {report.samples_per_repeat}")
        report.repeats.append(evaluate_sets(R, G, emd_method))
    return report
