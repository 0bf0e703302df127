"""Forward-perturbation defenses: embedding dX-privacy, smashed-data Laplace DP, NoPeek."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from ._validation import ContractError
from .autodiff import Tensor, as_tensor, ops

MECHANISMS = ("none", "dxp", "laplace_dp", "nopeek")
DEFAULT_CLIP = 2000.0
NOPEEK_BATCH = 6


@dataclass(frozen=True)
class NoiseSpec:
    """Which perturbation to apply and its scale.

    ``eps_prime`` is the dX-privacy budget per hidden dimension, ``eps_star``
    the Laplace budget relative to the clip ``clip``, ``alpha`` the NoPeek
    weight. ``math.inf`` for either budget means no noise.
    """

    mechanism: str = "none"
    eps_prime: float = math.inf
    eps_star: float = math.inf
    clip: float = DEFAULT_CLIP
    alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism '{self.mechanism}', expected one of {MECHANISMS}")
        if not self.eps_prime > 0 or not self.eps_star > 0:
            raise ValueError("privacy budgets must be positive")
        if not self.clip > 0:
            raise ValueError(f"clip G must be positive, got {self.clip}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")

    @classmethod
    def none(cls) -> "NoiseSpec":
        return cls()

    @classmethod
    def dxp(cls, eps_prime: float, seed: int = 0) -> "NoiseSpec":
        return cls("dxp", eps_prime=eps_prime, seed=seed)

    @classmethod
    def laplace(cls, eps_star: float, clip: float = DEFAULT_CLIP, seed: int = 0) -> "NoiseSpec":
        return cls("laplace_dp", eps_star=eps_star, clip=clip, seed=seed)

    @classmethod
    def nopeek(cls, alpha: float, seed: int = 0) -> "NoiseSpec":
        return cls("nopeek", alpha=alpha, seed=seed)

    @property
    def scale(self) -> float:
        """The mechanism's own scale parameter (for labels and sweeps)."""
        return {"none": math.inf, "dxp": self.eps_prime, "laplace_dp": self.eps_star,
                "nopeek": self.alpha}[self.mechanism]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k in ("eps_prime", "eps_star"):
            if math.isinf(d[k]):
                d[k] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        d = dict(d)
        for k in ("eps_prime", "eps_star"):
            if k in d:
                d[k] = float(d[k])
        return cls(**d)


@dataclass(frozen=True)
class NoiseSample:
    noise: np.ndarray
    params: dict = field(default_factory=dict)


# ----------------------------------------------------------------------- dxp

def nearest_rows(e: np.ndarray, table: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Index of the L2-nearest ``table`` row for every vector in ``e``; ties go to the lowest index."""
    e = np.asarray(e, dtype=np.float64)
    table = np.asarray(table, dtype=np.float64)
    flat = e.reshape(-1, e.shape[-1])
    out = np.empty(len(flat), dtype=np.int64)
    for s in range(0, len(flat), chunk):
        block = flat[s: s + chunk]
        d = ((block[:, None, :] - table[None, :, :]) ** 2).sum(-1)
        out[s: s + chunk] = d.argmin(axis=1)
    return out.reshape(e.shape[:-1])


def sample_dxp_noise(shape, eps: float, rng: np.random.Generator) -> NoiseSample:
    """Vectors with density ∝ exp(-eps·‖z‖) along the last axis.

    Direction is a normalised Gaussian, magnitude Gamma(H, 1/eps).
    """
    H = shape[-1]
    if math.isinf(eps):
        return NoiseSample(np.zeros(shape), {"eps": eps})
    direction = rng.normal(size=shape)
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    magnitude = rng.gamma(shape=H, scale=1.0 / eps, size=shape[:-1] + (1,))
    return NoiseSample(direction * magnitude, {"eps": eps, "H": H})


def dxp_perturb(embeddings, eps_prime: float, embedding_table, rng: np.random.Generator) -> np.ndarray:
    """Add dX-privacy noise with eps = eps_prime·H, then snap to the nearest table row."""
    if not eps_prime > 0:
        raise ContractError(f"eps_prime must be positive, got {eps_prime}")
    e = np.asarray(getattr(embeddings, "data", embeddings), dtype=np.float64)
    table = np.asarray(embedding_table, dtype=np.float64)
    noise = sample_dxp_noise(e.shape, eps_prime * e.shape[-1], rng).noise
    return table[nearest_rows(e + noise, table)]


# ------------------------------------------------------------------- Laplace

def clip_factor(x: np.ndarray, clip: float) -> np.ndarray:
    """Per-example factor 1 / max(1, ‖x_i‖∞ / G), shaped to broadcast over x."""
    x = np.asarray(x)
    inf_norm = np.abs(x.reshape(len(x), -1)).max(axis=1)
    f = 1.0 / np.maximum(1.0, inf_norm / clip)
    return f.reshape((len(x),) + (1,) * (x.ndim - 1))


def clip_inf(x: np.ndarray, clip: float) -> np.ndarray:
    """Per-example infinity-norm clip; the final clamp absorbs rounding so the bound is exact."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(x * clip_factor(x, clip), -clip, clip)


def dp_laplace_perturb(smashed, eps_star: float, clip: float = DEFAULT_CLIP,
                       rng: np.random.Generator | None = None):
    """Clip each example to ‖·‖∞ ≤ G, then add Laplace noise of scale 2G/eps, eps = eps_star·G.

    A recorded Tensor input stays differentiable: the clip factor is treated as
    a constant and the noise as an additive constant.
    """
    if not eps_star > 0 or not clip > 0:
        raise ContractError("eps_star and clip must be positive")
    t = smashed if isinstance(smashed, Tensor) else None
    x = np.asarray(getattr(smashed, "data", smashed), dtype=np.float64)
    factor = np.broadcast_to(clip_factor(x, clip), x.shape)
    clipped = clip_inf(x, clip)
    if math.isinf(eps_star):
        noise = np.zeros(x.shape)
    else:
        if rng is None:
            raise ContractError("Laplace noise needs a seeded generator")
        eps = eps_star * clip
        noise = rng.laplace(0.0, 2.0 * clip / eps, size=x.shape)
    if t is None:
        return clipped + noise
    return ops.add(ops.mul(t, factor), (clipped - x * factor) + noise)


# -------------------------------------------------------------------- NoPeek

def _centered_distances(x: Tensor) -> Tensor:
    n = x.shape[0]
    j = np.eye(n) - 1.0 / n
    return ops.matmul(ops.matmul(j, ops.pairwise_distance(x)), j)


def distance_correlation(x, y) -> Tensor:
    """Sample distance correlation of row-paired matrices (B×Dx, B×Dy), in [0, 1].

    Returns 0 when either distance variance vanishes. Differentiable in both arguments.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ContractError(f"distance_correlation needs row-paired 2-D inputs, got {x.shape} and {y.shape}")
    if x.shape[0] < 4:
        raise ContractError(f"distance_correlation needs at least 4 rows, got {x.shape[0]}")
    a = _centered_distances(x)
    b = _centered_distances(y)
    dcov2 = ops.mean(ops.mul(a, b))
    vx = ops.mean(ops.mul(a, a))
    vy = ops.mean(ops.mul(b, b))
    if vx.item() <= 0 or vy.item() <= 0:
        return Tensor(0.0)
    # dCor² = dCov² / sqrt(dVar_x² dVar_y²); the V-statistic dCov² is ≥ 0 up to rounding
    if dcov2.item() <= 0:
        return ops.scale(dcov2, 0.0)
    return ops.sqrt(ops.div(dcov2, ops.sqrt(ops.mul(vx, vy))))


def flatten_rows(t) -> Tensor:
    t = as_tensor(t)
    return ops.reshape(t, (t.shape[0], int(np.prod(t.shape[1:]))))


def nopeek_loss(task_loss, inputs_embedded, smashed, alpha: float):
    """``task_loss + alpha · dCor(inputs_embedded, smashed)`` over per-example flattened rows."""
    if alpha < 0:
        raise ContractError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0:
        return task_loss
    dcor = distance_correlation(flatten_rows(inputs_embedded), flatten_rows(smashed))
    return ops.add(task_loss, ops.scale(dcor, alpha))
