"""Activation-volume assembly and blue-noise subsampling.

The sampling key is the secret of the whole scheme: it fixes which voxels
of the upsampled activation volume the detector watches. Keep key files
away from anyone who could mount an attack on the monitored network; an
adversary holding the key can target exactly the watched activations.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .dataio import ActivationRecord, SchemaMismatchError
from .numerics import PAYLOAD_DTYPE, make_rng


class SelectionError(ValueError):
    """Layer-selection predicate matched no channel map."""


@dataclass(frozen=True)
class SamplingKey:
    seed: int
    min_distance: float
    dims: tuple[int, int, int]  # (H, W, L)
    k_attempts: int
    coords: np.ndarray  # (D, 3) int, (h, w, l) triples

    @property
    def n_samples(self) -> int:
        return len(self.coords)

    @property
    def key_id(self) -> str:
        digest = hashlib.sha256(_key_json(self).encode("utf-8")).hexdigest()
        return digest[:12]


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray  # (D,) float32
    input_id: str
    key_id: str


def _key_json(key: SamplingKey) -> str:
    doc = {
        "seed": int(key.seed),
        "r": float(key.min_distance),
        "dims": [int(d) for d in key.dims],
        "k_attempts": int(key.k_attempts),
        "coords": [[int(c) for c in triple] for triple in key.coords],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_key(key: SamplingKey, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(_key_json(key))
        f.write("\n")


def load_key(path) -> SamplingKey:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return SamplingKey(
        seed=int(doc["seed"]),
        min_distance=float(doc["r"]),
        dims=tuple(int(d) for d in doc["dims"]),
        k_attempts=int(doc["k_attempts"]),
        coords=np.asarray(doc["coords"], dtype=np.int64).reshape(-1, 3),
    )


def upsample_nn(map2d: np.ndarray, target) -> np.ndarray:
    """Nearest-neighbor upsample a (h, w) map to (H, W).

    out[i, j] = map[floor(i*h/H), floor(j*w/W)].
    """
    H, W = (int(t) for t in target)
    h, w = map2d.shape
    if h > H or w > W:
        raise ValueError("downsampling unsupported")
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return np.ascontiguousarray(map2d[np.ix_(rows, cols)])


def _select_layers(record: ActivationRecord, selection: str):
    if selection == "everywhere":
        return record.layers
    if selection == "conv_outputs":
        return [(n, v) for n, v in record.layers if "conv" in n]
    if selection == "before_batchnorm":
        return [(n, v) for n, v in record.layers if "pre_bn" in n]
    raise ValueError(f"unknown layer selection {selection!r}")


def assemble_volume(record: ActivationRecord, target, selection: str = "everywhere") -> np.ndarray:
    """Stack the selected, upsampled channel maps into an (H, W, L) volume.

    Depth order is (layer order, channel order), matching the manifest's
    layer_selection convention: "conv_outputs" keeps layers whose name
    contains "conv", "before_batchnorm" those containing "pre_bn".
    """
    H, W = (int(t) for t in target)
    layers = _select_layers(record, selection)
    if not layers:
        raise SelectionError(f"selection {selection!r} matched no channel map")
    maps = []
    for _, vals in layers:
        for channel in vals:
            maps.append(upsample_nn(channel, (H, W)))
    return np.stack(maps, axis=2).astype(PAYLOAD_DTYPE)


def bridson_sample(dims, r: float, seed: int, k_attempts: int = 30) -> SamplingKey:
    """Draw a maximal Poisson-disk sample over [0,H)x[0,W)x[0,L).

    Bridson's dart-throwing with a background grid of cell size r/sqrt(3)
    for O(1) neighbor rejection; candidates are drawn uniformly from the
    spherical annulus [r, 2r] around an active point. The continuous
    samples are floored to integer voxels afterwards, dropping any rounded
    point that duplicates or violates the min distance against already
    accepted voxels. The index space is isotropic: one voxel is one unit
    on all three axes.
    """
    H, W, L = (float(d) for d in dims)
    if r <= 0 or min(H, W, L) <= 0:
        raise ValueError("r and dims must be positive")
    rng = make_rng(seed)
    cell = r / np.sqrt(3.0)
    gdims = (int(np.ceil(H / cell)), int(np.ceil(W / cell)), int(np.ceil(L / cell)))
    grid = -np.ones(gdims, dtype=np.int64)
    points: list[np.ndarray] = []
    active: list[int] = []

    def grid_cell(p):
        return (int(p[0] / cell), int(p[1] / cell), int(p[2] / cell))

    def fits(p):
        gc = grid_cell(p)
        for di in range(-2, 3):
            gi = gc[0] + di
            if gi < 0 or gi >= gdims[0]:
                continue
            for dj in range(-2, 3):
                gj = gc[1] + dj
                if gj < 0 or gj >= gdims[1]:
                    continue
                for dk in range(-2, 3):
                    gk = gc[2] + dk
                    if gk < 0 or gk >= gdims[2]:
                        continue
                    idx = grid[gi, gj, gk]
                    if idx >= 0 and np.sum((points[idx] - p) ** 2) < r * r:
                        return False
        return True

    def accept(p):
        grid[grid_cell(p)] = len(points)
        points.append(p)
        active.append(len(points) - 1)

    first = rng.random(3) * np.array([H, W, L])
    accept(first)

    # Out-of-domain darts are redrawn rather than counted: in shallow
    # volumes (L much smaller than r) most of the annulus lies outside the
    # domain and counting misses would terminate far from maximality.
    max_draws = 64 * k_attempts
    while active:
        slot = rng.integers(len(active))
        center = points[active[slot]]
        placed = False
        attempts = 0
        for _ in range(max_draws):
            if attempts >= k_attempts:
                break
            direction = rng.standard_normal(3)
            norm = np.sqrt(np.sum(direction**2))
            if norm < 1e-12:
                continue
            # radius uniform in the annulus volume [r, 2r]
            radius = r * np.cbrt(1.0 + 7.0 * rng.random())
            cand = center + direction / norm * radius
            if not (0 <= cand[0] < H and 0 <= cand[1] < W and 0 <= cand[2] < L):
                continue
            attempts += 1
            if fits(cand):
                accept(cand)
                placed = True
                break
        if not placed:
            active.pop(slot)

    # Round to voxels. Flooring can push pairs below r; rather than drop a
    # violator outright (leaving a coverage hole), try the surrounding
    # voxel corners nearest-first and keep the first that still fits.
    hi = np.array([int(H) - 1, int(W) - 1, int(L) - 1])
    voxels: list[tuple[int, int, int]] = []
    kept: list[np.ndarray] = []
    for p in points:
        base = np.floor(p)
        corners = [base + np.array(offs) for offs in
                   ((0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1))]
        corners = [np.clip(c, 0, hi) for c in corners]
        corners.sort(key=lambda c: float(np.sum((c - p) ** 2)))
        for vf in corners:
            if any(np.sum((vf - q) ** 2) < r * r for q in kept):
                continue
            voxels.append((int(vf[0]), int(vf[1]), int(vf[2])))
            kept.append(vf)
            break

    return SamplingKey(
        seed=int(seed),
        min_distance=float(r),
        dims=tuple(int(d) for d in dims),
        k_attempts=int(k_attempts),
        coords=np.asarray(voxels, dtype=np.int64).reshape(-1, 3),
    )


def extract_features(volume: np.ndarray, key: SamplingKey, input_id: str = "") -> FeatureVector:
    """Read the keyed voxels out of a volume, in key order."""
    if tuple(volume.shape) != tuple(key.dims):
        raise ValueError(f"volume dims {volume.shape} do not match key dims {key.dims}")
    values = volume[key.coords[:, 0], key.coords[:, 1], key.coords[:, 2]]
    return FeatureVector(values=values.astype(PAYLOAD_DTYPE), input_id=input_id, key_id=key.key_id)
