"""Stochastic time-series augmentations used to build contrastive positive pairs."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ContractError
from .synthgen import SensorWindow


@dataclass(frozen=True)
class AugmentationPolicy:
    jitter_sigma: float = 0.05
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_enabled: bool = True
    permute_segments: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.jitter_sigma < 0:
            raise ContractError("jitter_sigma must be >= 0")
        if not 0 < lo <= hi:
            raise ContractError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.permute_segments < 1:
            raise ContractError("permute_segments must be >= 1")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))

    @classmethod
    def neutral(cls) -> "AugmentationPolicy":
        return cls(jitter_sigma=0.0, scale_range=(1.0, 1.0), rotation_enabled=False, permute_segments=1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


def permute(values: np.ndarray, segments: int, rng: np.random.Generator) -> np.ndarray:
    if segments == 1:
        return values
    parts = np.array_split(values, segments, axis=1)
    order = rng.permutation(segments)
    return np.concatenate([parts[k] for k in order], axis=1)


def rotate(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply one uniformly random rotation to every consecutive channel triplet.

    Channel counts that are not a multiple of three pass through unchanged.
    """
    c, t = values.shape
    if c % 3:
        return values
    rot = Rotation.random(random_state=rng).as_matrix()
    return np.einsum("ij,gjt->git", rot, values.reshape(c // 3, 3, t)).reshape(c, t)


def scale(values: np.ndarray, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    return values * rng.uniform(lo, hi, size=(values.shape[0], 1))


def jitter(values: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return values + rng.normal(0.0, sigma, size=values.shape)


def apply(policy: AugmentationPolicy, x: SensorWindow, draw: np.random.Generator) -> SensorWindow:
    """One random view of ``x``.  Transforms at their neutral setting are skipped entirely."""
    v = x.values
    if v.size == 0:
        raise ContractError("cannot augment an empty window")
    if v.shape[1] < policy.permute_segments:
        raise ContractError(f"window of length {v.shape[1]} cannot be cut into "
                            f"{policy.permute_segments} segments")
    v = permute(v, policy.permute_segments, draw)
    if policy.rotation_enabled:
        v = rotate(v, draw)
    lo, hi = policy.scale_range
    if (lo, hi) != (1.0, 1.0):
        v = scale(v, lo, hi, draw)
    if policy.jitter_sigma > 0:
        v = jitter(v, policy.jitter_sigma, draw)
    return x.replace(v)


def augment_batch(policy: AugmentationPolicy, windows, draw: np.random.Generator) -> np.ndarray:
    """Stack one augmented view of each window into an ``(N, C, T)`` array."""
    return np.stack([apply(policy, w, draw).values for w in windows])
