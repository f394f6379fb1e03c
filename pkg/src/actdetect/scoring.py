"""Distance-based classification heads over latent codes.

Four kernels: mean squared coordinate (Euclidean), harmonic mean of the
squared coordinates, covariance-whitened distance to the training
centroid (Mahalanobis), and a histogram-based outlier score (HBOS). All
heads emit higher = more anomalous; an input is flagged when its score
reaches the threshold (boundary inclusive).
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

FIT_MAGIC = b"DAAF"
FIT_VERSION = 1

HBOS_FLOOR = 1e-9

HEADS = ("euclidean", "harmonic", "mahalanobis", "hbos")


def tau_euclidean(z) -> float:
    """Mean of squared coordinates; up to affine constants the negative
    log-prior of the latent code."""
    z = np.asarray(z, dtype=np.float64)
    return float(np.mean(z * z))


def tau_harmonic(z) -> float:
    """Harmonic mean of the squared coordinates: n / sum(z_i^-2).

    Any zero coordinate sends the score to its limit value 0; that case
    is flagged with a warning so evaluation can surface it.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(z == 0.0):
        warnings.warn("zero latent coordinate: harmonic distance takes its limit value 0", RuntimeWarning)
        return 0.0
    return float(len(z) / np.sum(z**-2.0))


@dataclass
class MahalanobisFit:
    mean: np.ndarray  # (D,)
    cov: np.ndarray  # (D, D), population covariance
    ridge: float
    _chol: tuple = None

    def solve(self, delta: np.ndarray) -> np.ndarray:
        return cho_solve(self._chol, delta)


def fit_mahalanobis(train_latents, ridge: float | None = None) -> MahalanobisFit:
    """Centroid + population covariance of the training latents.

    The covariance is regularized with ridge * I (default
    1e-6 * trace(S) / D) so the solve is always defined; a warning is
    emitted when there are too few latents for a full-rank estimate.
    """
    z = np.asarray(train_latents, dtype=np.float64)
    n, d = z.shape
    if n <= d:
        warnings.warn(f"only {n} latents for a {d}-dim covariance; ridge dominates", RuntimeWarning)
    mean = z.mean(axis=0)
    centered = z - mean
    cov = centered.T @ centered / n
    if ridge is None:
        ridge = 1e-6 * np.trace(cov) / d
    try:
        chol = cho_factor(cov + ridge * np.eye(d), lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance not positive definite after ridge") from exc
    return MahalanobisFit(mean=mean, cov=cov, ridge=float(ridge), _chol=chol)


def tau_mahalanobis(fit: MahalanobisFit, z) -> float:
    delta = np.asarray(z, dtype=np.float64) - fit.mean
    return float(np.sqrt(delta @ fit.solve(delta)))


@dataclass
class HbosFit:
    edges: np.ndarray  # (D, k+1) equal-width bin edges over train [min, max]
    heights: np.ndarray  # (D, k), normalized so the tallest bin per dim is 1

    @property
    def k(self) -> int:
        return self.heights.shape[1]


def fit_hbos(train_latents, k: int = 30) -> HbosFit:
    """Per-dimension equal-width histograms over the training range."""
    if k < 2:
        raise ValueError("k must be >= 2")
    z = np.asarray(train_latents, dtype=np.float64)
    if z.size == 0:
        raise ValueError("train_latents must be nonempty")
    n, d = z.shape
    edges = np.empty((d, k + 1))
    heights = np.empty((d, k))
    for i in range(d):
        lo, hi = z[:, i].min(), z[:, i].max()
        if hi <= lo:
            hi = lo + 1.0  # degenerate dim: single occupied bin
        e = np.linspace(lo, hi, k + 1)
        counts, _ = np.histogram(z[:, i], bins=e)
        edges[i] = e
        heights[i] = counts / counts.max()
    return HbosFit(edges=edges, heights=heights)


def tau_hbos(fit: HbosFit, z) -> float:
    """Sum over dims of log(1 / height of the occupied bin).

    Out-of-range coordinates and empty bins score against the floor
    height 1e-9.
    """
    z = np.asarray(z, dtype=np.float64)
    k = fit.k
    score = 0.0
    for i, zi in enumerate(z):
        e = fit.edges[i]
        if zi < e[0] or zi > e[-1]:
            h = HBOS_FLOOR
        else:
            b = min(int(np.searchsorted(e, zi, side="right")) - 1, k - 1)
            h = fit.heights[i, max(b, 0)]
            if h <= 0.0:
                h = HBOS_FLOOR
        score += np.log(1.0 / h)
    return float(score)


def classify(tau: float, theta: float) -> int:
    """1 (anomaly) iff tau >= theta; the boundary counts as anomalous."""
    return 1 if tau >= theta else 0


def choose_threshold(scores_regular, fpr_budget: float) -> float:
    """Quantile threshold hitting a false-positive budget on clean scores.

    With n clean scores and budget f, exactly floor(f*n) of them reach the
    returned threshold. The cut falls at the lower midpoint between the
    two straddling order statistics. Budget 0 puts the threshold just
    above the max; budget 1 returns -inf (everything flagged).
    """
    scores = np.sort(np.asarray(scores_regular, dtype=np.float64))
    if scores.size == 0:
        raise ValueError("scores must be nonempty")
    if not (0.0 <= fpr_budget <= 1.0):
        raise ValueError("fpr budget must lie in [0, 1]")
    k = int(np.floor(fpr_budget * len(scores)))
    if k == 0:
        top = scores[-1]
        return float(np.nextafter(top, np.inf))
    if k >= len(scores):
        return float(-np.inf)
    return float(0.5 * (scores[len(scores) - k - 1] + scores[len(scores) - k]))


def save_fit(fit, path) -> None:
    """Serialize a Mahalanobis or HBOS fit into the model-style container."""
    if isinstance(fit, MahalanobisFit):
        header = {"kind": "mahalanobis", "d": len(fit.mean), "ridge": fit.ridge}
        arrays = [fit.mean, fit.cov]
    elif isinstance(fit, HbosFit):
        header = {"kind": "hbos", "d": fit.edges.shape[0], "k": fit.k}
        arrays = [fit.edges, fit.heights]
    else:
        raise TypeError(f"cannot serialize {type(fit).__name__}")
    header["shapes"] = [list(a.shape) for a in arrays]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(FIT_MAGIC)
        f.write(bytes([FIT_VERSION]))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_fit(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != FIT_MAGIC:
        raise ValueError(f"format error: bad magic bytes in {path}")
    (hlen,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9 : 9 + hlen].decode("utf-8"))
    payload = raw[9 + hlen :]
    arrays = []
    offset = 0
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(payload[offset : offset + 4 * count], dtype="<f4").reshape(shape).astype(np.float64))
        offset += 4 * count
    if header["kind"] == "mahalanobis":
        mean, cov = arrays
        d = len(mean)
        chol = cho_factor(cov + header["ridge"] * np.eye(d), lower=True)
        return MahalanobisFit(mean=mean, cov=cov, ridge=header["ridge"], _chol=chol)
    if header["kind"] == "hbos":
        edges, heights = arrays
        return HbosFit(edges=edges, heights=heights)
    raise ValueError(f"unknown fit kind {header['kind']!r}")
