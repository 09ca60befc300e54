"""
Core numerics shared by every ddlab module.

Deterministic random streams, the closed-form 2x2 PSD square root and batch
statistics. Points are numpy arrays: a Vec2 is shape (2,), a batch is (n, 2);
a Mat2 is shape (2, 2). Everything is float64.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np

from ddlab.errors import NonPsdInput, TooFewPoints, ShapeMismatch

UINT64_MAX = 2**64 - 1

# Tolerances
PSD_NEGATIVE_TOL = 1e-10
SQRT_DENOM_TOL = 1e-12
SYMMETRY_TOL = 1e-12


@dataclass
class RngStream:
    """
    Replayable random stream keyed by (seed, stream_id).

    Backed by the Philox counter-based generator with the 128-bit key
    (seed, stream_id), so streams with different ids never share state and
    the draw sequence is identical on every platform.

    Usage:
        rng = RngStream(seed=42, stream_id=3)
        noise = rng.normal((1000, 2))
        child = rng.spawn(4)
    """

    seed: int
    stream_id: int = 0
    _bitgen: np.random.Philox = field(init=False, repr=False)
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not 0 <= int(value) <= UINT64_MAX:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {value}")
        self.seed = int(self.seed)
        self.stream_id = int(self.stream_id)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self._gen = np.random.Generator(self._bitgen)

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws on [0, 1); consumes one 64-bit word per value."""
        return self._gen.random(shape)

    def normal(self, shape) -> np.ndarray:
        """
        Standard-normal draws via Box-Muller.

        Consumes exactly two uniforms per generated pair, so the stream
        advances by a count fixed by the requested shape.
        """
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        n_pairs = (size + 1) // 2
        u = self._gen.random((n_pairs, 2))
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.empty((n_pairs, 2))
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.reshape(-1)[:size].reshape(shape)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def spawn(self, stream_id: int) -> "RngStream":
        """Independent sibling stream sharing this stream's seed."""
        return RngStream(seed=self.seed, stream_id=stream_id)

    def get_state(self) -> Dict[str, Any]:
        """Serializable snapshot of the full generator state."""
        state = self._bitgen.state
        return {
            "seed": self.seed,
            "stream_id": self.stream_id,
            "counter": [int(v) for v in state["state"]["counter"]],
            "key": [int(v) for v in state["state"]["key"]],
            "buffer": [int(v) for v in state["buffer"]],
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, snapshot: Dict[str, Any]) -> "RngStream":
        """Rebuild a stream from `get_state` output."""
        rng = cls(seed=snapshot["seed"], stream_id=snapshot["stream_id"])
        rng._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(snapshot["counter"], dtype=np.uint64),
                "key": np.array(snapshot["key"], dtype=np.uint64),
            },
            "buffer": np.array(snapshot["buffer"], dtype=np.uint64),
            "buffer_pos": snapshot["buffer_pos"],
            "has_uint32": snapshot["has_uint32"],
            "uinteger": snapshot["uinteger"],
        }
        return rng


def gaussian_pair(rng: RngStream) -> np.ndarray:
    """Two independent standard-normal draws as a Vec2."""
    return rng.normal(2)


def ensure_finite(values: np.ndarray, what: str) -> np.ndarray:
    """Raise if any component is NaN or infinite."""
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"Non-finite values in {what}")
    return values


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """
    Principal square root of a symmetric PSD 2x2 matrix.

    Uses the closed form S = (M + sqrt(det M) I) / sqrt(tr M + 2 sqrt(det M)),
    falling back to an eigendecomposition when the denominator vanishes or an
    eigenvalue is (slightly) negative.

    Raises:
        ShapeMismatch: If m is not 2x2
        NonPsdInput: If m is asymmetric or has an eigenvalue below -1e-10
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (2, 2):
        raise ShapeMismatch(f"psd_sqrt expects a 2x2 matrix, got shape {m.shape}")

    scale = float(np.max(np.abs(m)))
    if abs(m[0, 1] - m[1, 0]) > SYMMETRY_TOL * scale:
        raise NonPsdInput(f"Matrix is not symmetric: m01={m[0, 1]!r}, m10={m[1, 0]!r}")

    half_trace = 0.5 * (m[0, 0] + m[1, 1])
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    gap = np.sqrt(max(half_trace * half_trace - det, 0.0))
    min_eig = half_trace - gap
    if min_eig < -PSD_NEGATIVE_TOL:
        raise NonPsdInput(f"Matrix has negative eigenvalue {min_eig!r}")

    if min_eig >= 0.0:
        root_det = np.sqrt(max(det, 0.0))
        denom = np.sqrt(2.0 * half_trace + 2.0 * root_det)
        if denom >= SQRT_DENOM_TOL:
            return (m + root_det * np.eye(2)) / denom

    # Eigendecomposition fallback, clamping tiny negatives to 0
    sym = 0.5 * (m + m.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.clip(eigvals, 0.0, None)
    root = (eigvecs * np.sqrt(eigvals)) @ eigvecs.T
    return 0.5 * (root + root.T)


def batch_stats(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Unbiased sample mean and covariance of a point batch.

    Raises:
        TooFewPoints: If fewer than 2 points are given
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] < 2:
        raise TooFewPoints(f"batch_stats needs at least 2 points, got {points.shape[0]}")
    mean = points.mean(axis=0)
    cov = np.cov(points, rowvar=False, ddof=1)
    return mean, 0.5 * (cov + cov.T)
