"""Synthetic heterogeneous federated classification tasks.

Generation happens in two stages. A population model is drawn once per seed:
k cluster means (each around its own random hypermean), a projection tensor
that maps an s-dimensional latent to a ``c x (d+1)`` weight matrix, and a
diagonal feature covariance with entries ``i**-1.2``. Each task then picks a
cluster, draws a latent near that cluster's mean, projects it to its own
weights, draws a lognormal sample count, a feature center, the features, and
finally labels every sample with the argmax of its noisy logits.

Random draws for task ``t`` come from the stream keyed ``(seed, "task", t)``,
so tasks can be generated in any order or in parallel with identical output.
Within a task the draw order is: cluster index, latent, sample count, center
hypermean, center, features, label noise.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import DeviceData, FederatedDataset
from .errors import ConfigError, ShapeError
from .rng import stream


@dataclass(frozen=True)
class SynthConfig:
    num_tasks: int
    cluster_probs: tuple[float, ...] = (1.0,)
    latent_dim: int = 5
    feature_dim: int = 60
    num_classes: int = 5
    logit_noise_std: float = math.sqrt(0.1)
    lognormal_mu: float = 3.0
    lognormal_sigma: float = 2.0
    sample_offset: int = 5
    sample_cap: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cluster_probs", tuple(float(p) for p in self.cluster_probs))

    @property
    def num_clusters(self) -> int:
        return len(self.cluster_probs)

    def violations(self) -> list[str]:
        out = []
        if self.num_tasks < 1:
            out.append("num_tasks must be >= 1")
        if not self.cluster_probs:
            out.append("cluster_probs must be nonempty")
        elif any(p <= 0 for p in self.cluster_probs):
            out.append("cluster_probs entries must be > 0")
        elif abs(sum(self.cluster_probs) - 1.0) > 1e-9:
            out.append(f"cluster_probs must sum to 1 (got {sum(self.cluster_probs)!r})")
        for name in ("latent_dim", "feature_dim"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.num_classes < 2:
            out.append("num_classes must be >= 2")
        if self.logit_noise_std < 0:
            out.append("logit_noise_std must be >= 0")
        if self.lognormal_sigma < 0:
            out.append("lognormal_sigma must be >= 0")
        if self.sample_offset < 1:
            out.append("sample_offset must be >= 1")
        if self.sample_cap < self.sample_offset:
            out.append("sample_cap must be >= sample_offset")
        if not 0 <= self.seed < 2**64:
            out.append("seed must be an unsigned 64-bit integer")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ConfigError("invalid synthetic config: " + "; ".join(problems))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["cluster_probs"] = list(self.cluster_probs)
        return d


@dataclass(frozen=True)
class PopulationModel:
    cluster_means: np.ndarray        # (k, s)
    cluster_hypermeans: np.ndarray   # (k, s)
    projection: np.ndarray           # (c, d+1, s)
    covariance_diag: np.ndarray      # (d,)


@dataclass
class TaskData:
    task_id: int
    cluster_index: int
    latent: np.ndarray
    weights: np.ndarray
    feature_center: np.ndarray
    center_hypermean: np.ndarray
    num_samples: int
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)


def covariance_diagonal(d: int) -> np.ndarray:
    return np.arange(1, d + 1, dtype=np.float64) ** -1.2


def build_population(config: SynthConfig, rng: np.random.Generator | None = None) -> PopulationModel:
    config.validate()
    if rng is None:
        rng = stream(config.seed, "population")
    k, s, d, c = config.num_clusters, config.latent_dim, config.feature_dim, config.num_classes
    hypermeans = rng.standard_normal((k, s))
    means = hypermeans + rng.standard_normal((k, s))
    projection = rng.standard_normal((c, d + 1, s))
    return PopulationModel(means, hypermeans, projection, covariance_diagonal(d))


def sample_count(m_draw: float, offset: int, cap: int) -> int:
    """Floor the lognormal draw, shift by ``offset`` and clamp at ``cap``."""
    return min(int(math.floor(m_draw)) + offset, cap)


def label_samples(weights: np.ndarray, x: np.ndarray, noise_std: float,
                  rng: np.random.Generator | None) -> np.ndarray:
    """Vectorized ``label_sample`` over the rows of ``x``.

    Noise for row i is the i-th block of ``c`` normal draws, so this consumes
    the stream exactly as repeated single-sample calls would.
    """
    x = np.atleast_2d(x)
    c, width = weights.shape
    if width != x.shape[1] + 1:
        raise ShapeError(f"weights have {width} columns, expected feature_dim + 1 = {x.shape[1] + 1}")
    logits = x @ weights[:, :-1].T + weights[:, -1]
    if noise_std > 0:
        logits = logits + noise_std * rng.standard_normal((x.shape[0], c))
    # sigmoid is strictly increasing, so argmax over sigmoid(z) equals argmax
    # over z; taking it on z avoids float saturation ties at sigmoid(z) == 1.
    return np.argmax(logits, axis=1).astype(np.int64)


def label_sample(weights: np.ndarray, x: np.ndarray, noise_std: float,
                 rng: np.random.Generator | None = None) -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("label_sample takes a single feature vector")
    return int(label_samples(weights, x[None, :], noise_std, rng)[0])


def sample_task(population: PopulationModel, config: SynthConfig, task_id: int,
                rng: np.random.Generator | None = None) -> TaskData:
    if rng is None:
        rng = stream(config.seed, "task", task_id)
    k, s, d = config.num_clusters, config.latent_dim, config.feature_dim

    cluster = int(rng.choice(k, p=np.asarray(config.cluster_probs))) if k > 1 else 0
    latent = population.cluster_means[cluster] + rng.standard_normal(s)
    weights = population.projection @ latent                     # (c, d+1)
    m = rng.lognormal(config.lognormal_mu, config.lognormal_sigma)
    n = sample_count(m, config.sample_offset, config.sample_cap)
    hyper = rng.standard_normal(d)
    center = hyper + rng.standard_normal(d)
    x = center + rng.standard_normal((n, d)) * np.sqrt(population.covariance_diag)
    y = label_samples(weights, x, config.logit_noise_std, rng)
    return TaskData(task_id, cluster, latent, weights, center, hyper, n, x, y)


def device_id(task_id: int) -> str:
    return f"f_{task_id:05d}"


def generate_synthetic(config: SynthConfig, workers: int = 1) -> FederatedDataset:
    population = build_population(config)

    def one(t):
        return sample_task(population, config, t)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            tasks = list(pool.map(one, range(config.num_tasks)))
    else:
        tasks = [one(t) for t in range(config.num_tasks)]
    devices = {device_id(t.task_id): DeviceData(t.x, t.y) for t in tasks}
    return FederatedDataset(devices, config.feature_dim, config.num_classes)
