"""Normalizing-flow density estimator with exact log-determinant.

Each block applies, in order: a per-dimension affine layer whose scale and
bias are initialized from the first data batch (ActNorm), an affine
coupling transform, and a coordinate-mixing layer (fixed random
permutation or an LU-parameterized invertible linear map). The coupling
scale exponent is soft-clamped, s = exp(c * tanh(raw / c)) with c = 0.5 by
default, which keeps every effective log-scale inside (-c, c) and bounds
the scale gradients. The "gin" coupling variant centers the clamped
log-scales within each block so their sum, and hence the coupling's
log-det contribution, is exactly zero.

Gradients are hand-derived reverse-mode accumulations per block; there is
no autodiff framework underneath. Parameters live in float64 in memory
(model files store float32 payloads).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu as scipy_lu
from scipy.linalg import solve_triangular

from .numerics import make_rng

MODEL_MAGIC = b"DAAF"
MODEL_VERSION = 1

COUPLINGS = ("affine", "gin")
MIXINGS = ("random_permutation", "invertible_linear")
SUBNETS = ("linear", "mlp")

# per-subnet trainable array names, in serialization order
_SUBNET_KEYS = {"linear": ("w", "b"), "mlp": ("w1", "b1", "w2", "b2")}


class NumericalOverflowError(FloatingPointError):
    """A forward/backward pass produced a non-finite intermediate."""


@dataclass(frozen=True)
class FlowSpec:
    dim: int
    n_blocks: int = 8
    coupling: str = "affine"
    mixing: str = "random_permutation"
    subnet: str = "linear"
    hidden_width: int = 64
    clamp: float = 0.5

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"unknown coupling {self.coupling!r}")
        if self.mixing not in MIXINGS:
            raise ValueError(f"unknown mixing {self.mixing!r}")
        if self.subnet not in SUBNETS:
            raise ValueError(f"unknown subnet {self.subnet!r}")

    @property
    def split(self) -> int:
        return self.dim // 2

    def to_dict(self):
        return {
            "dim": self.dim,
            "n_blocks": self.n_blocks,
            "coupling": self.coupling,
            "mixing": self.mixing,
            "subnet": self.subnet,
            "hidden_width": self.hidden_width,
            "clamp": self.clamp,
        }


@dataclass
class LatentCode:
    z: np.ndarray
    log_det: float


@dataclass
class FlowParams:
    """Trainable arrays per block plus fixed permutations.

    blocks[i] maps array name -> float64 ndarray. Trainable names:
    "actnorm_scale", "actnorm_bias" (D,); subnet arrays per _SUBNET_KEYS;
    for invertible_linear mixing "mix_l" (strict-lower, D x D) and
    "mix_u" (upper incl. diagonal, D x D). perms[i] is the fixed
    permutation vector (random_permutation) or the fixed row permutation
    of the LU factorization (invertible_linear).
    """

    spec: FlowSpec
    blocks: list[dict[str, np.ndarray]]
    perms: list[np.ndarray]
    initialized: bool = False
    key_id: str = ""

    def copy(self) -> "FlowParams":
        return FlowParams(
            spec=self.spec,
            blocks=[{k: v.copy() for k, v in blk.items()} for blk in self.blocks],
            perms=[p.copy() for p in self.perms],
            initialized=self.initialized,
            key_id=self.key_id,
        )


_STRICT_LOWER = {}


def _strict_lower_mask(n: int) -> np.ndarray:
    if n not in _STRICT_LOWER:
        _STRICT_LOWER[n] = np.tril(np.ones((n, n)), k=-1)
    return _STRICT_LOWER[n]


def init_params(spec: FlowSpec, seed: int = 0) -> FlowParams:
    """Identity-start parameters: subnet outputs zero, ActNorm is (1, 0).

    Mixing matrices start from a seeded random orthogonal map factored as
    P (L + I) U, so the flow mixes coordinates from step one while the
    coupling transform begins at the identity.
    """
    rng = make_rng(seed, stream=1)
    D, d = spec.dim, spec.split
    m = D - d
    blocks, perms = [], []
    for _ in range(spec.n_blocks):
        blk = {
            "actnorm_scale": np.ones(D),
            "actnorm_bias": np.zeros(D),
        }
        if spec.subnet == "linear":
            blk["w"] = np.zeros((2 * m, d))
            blk["b"] = np.zeros(2 * m)
        else:
            width = spec.hidden_width
            blk["w1"] = rng.normal(0.0, 0.01, size=(width, d))
            blk["b1"] = np.zeros(width)
            blk["w2"] = np.zeros((2 * m, width))
            blk["b2"] = np.zeros(2 * m)
        if spec.mixing == "invertible_linear":
            q, _ = np.linalg.qr(rng.standard_normal((D, D)))
            q *= np.sign(np.diag(q))[None, :]
            p_mat, l_mat, u_mat = scipy_lu(q)
            blk["mix_l"] = l_mat - np.eye(D)
            blk["mix_u"] = np.triu(u_mat)
            perms.append(np.argmax(p_mat, axis=1).astype(np.int64))
        else:
            perms.append(rng.permutation(D).astype(np.int64))
        blocks.append(blk)
    return FlowParams(spec=spec, blocks=blocks, perms=perms)


def _mix_matrix(spec: FlowSpec, blk, perm) -> np.ndarray:
    # W = P L U with the permutation stored as sigma: W[i, :] = (LU)[sigma[i], :]
    D = spec.dim
    l_mat = blk["mix_l"] * _strict_lower_mask(D) + np.eye(D)
    u_mat = np.triu(blk["mix_u"])
    return (l_mat @ u_mat)[perm]


def _coupling_log_scale(spec: FlowSpec, raw_s: np.ndarray):
    c = spec.clamp
    th = np.tanh(raw_s / c)
    u = c * th
    if spec.coupling == "gin":
        u = u - u.mean(axis=-1, keepdims=True)
    return u, th


def _check_finite(arr, what: str, block: int):
    if not np.all(np.isfinite(arr)):
        raise NumericalOverflowError(f"numerical overflow: non-finite {what} in block {block}")


def _subnet_forward(spec: FlowSpec, blk, x1):
    if spec.subnet == "linear":
        return x1 @ blk["w"].T + blk["b"], None
    h_pre = x1 @ blk["w1"].T + blk["b1"]
    h = np.tanh(h_pre)
    return h @ blk["w2"].T + blk["b2"], h


def _block_forward(spec: FlowSpec, blk, perm, x, block_idx, cache=None):
    """One block on a (N, D) batch; returns (out, per-sample log_det)."""
    D, d = spec.dim, spec.split
    ld = np.zeros(len(x))

    a = x * blk["actnorm_scale"] + blk["actnorm_bias"]
    ld += np.sum(np.log(np.abs(blk["actnorm_scale"])))

    a1, a2 = a[:, :d], a[:, d:]
    raw, hidden = _subnet_forward(spec, blk, a1)
    m = D - d
    raw_s, raw_t = raw[:, :m], raw[:, m:]
    u, th = _coupling_log_scale(spec, raw_s)
    s = np.exp(u)
    c2 = a2 * s + raw_t
    coupled = np.concatenate([a1, c2], axis=1)
    ld += u.sum(axis=1)

    if spec.mixing == "random_permutation":
        out = coupled[:, perm]
    else:
        w = _mix_matrix(spec, blk, perm)
        out = coupled @ w.T
        ld += np.sum(np.log(np.abs(np.diag(blk["mix_u"]))))
    _check_finite(out, "activation", block_idx)

    if cache is not None:
        cache.append({"x": x, "a": a, "a1": a1, "a2": a2, "hidden": hidden, "u": u, "th": th, "s": s, "coupled": coupled})
    return out, ld


def forward_batch(params: FlowParams, x: np.ndarray, cache=None):
    """Map a (N, D) batch to latent codes; returns (z, log_det (N,))."""
    if not params.initialized:
        raise RuntimeError("ActNorm not initialized; call actnorm_init first")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.spec.dim:
        raise ValueError(f"input dim {x.shape[1]} != flow dim {params.spec.dim}")
    ld = np.zeros(len(x))
    for i, (blk, perm) in enumerate(zip(params.blocks, params.perms)):
        x, block_ld = _block_forward(params.spec, blk, perm, x, i, cache)
        ld += block_ld
    return x, ld


def forward(params: FlowParams, x) -> LatentCode:
    z, ld = forward_batch(params, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return LatentCode(z=z[0], log_det=float(ld[0]))


def inverse_batch(params: FlowParams, z: np.ndarray) -> np.ndarray:
    """Invert a (N, D) batch of latent codes back to feature space."""
    if not params.initialized:
        raise RuntimeError("ActNorm not initialized; call actnorm_init first")
    spec = params.spec
    D, d = spec.dim, spec.split
    x = np.atleast_2d(np.asarray(z, dtype=np.float64))
    for i in reversed(range(spec.n_blocks)):
        blk, perm = params.blocks[i], params.perms[i]
        if spec.mixing == "random_permutation":
            x = x[:, np.argsort(perm)]
        else:
            l_mat = blk["mix_l"] * _strict_lower_mask(D) + np.eye(D)
            u_mat = np.triu(blk["mix_u"])
            # solve W x = y with W = P L U; P^T y reorders by argsort(sigma)
            y = x[:, np.argsort(perm)].T
            tmp = solve_triangular(l_mat, y, lower=True, unit_diagonal=True)
            x = solve_triangular(u_mat, tmp, lower=False).T
        x1, x2 = x[:, :d], x[:, d:]
        raw, _ = _subnet_forward(spec, blk, x1)
        m = D - d
        u, _ = _coupling_log_scale(spec, raw[:, :m])
        x2 = (x2 - raw[:, m:]) * np.exp(-u)
        x = np.concatenate([x1, x2], axis=1)
        x = (x - blk["actnorm_bias"]) / blk["actnorm_scale"]
        _check_finite(x, "activation", i)
    return x


def inverse(params: FlowParams, z) -> np.ndarray:
    return inverse_batch(params, np.asarray(z, dtype=np.float64).reshape(1, -1))[0]


def log_prob_batch(params: FlowParams, x) -> np.ndarray:
    z, ld = forward_batch(params, x)
    D = params.spec.dim
    return -0.5 * D * np.log(2.0 * np.pi) - 0.5 * np.sum(z * z, axis=1) + ld


def log_prob(params: FlowParams, x) -> float:
    return float(log_prob_batch(params, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


def nll_batch(params: FlowParams, x) -> float:
    """Mean negative log-likelihood over a batch."""
    return float(-np.mean(log_prob_batch(params, x)))


def actnorm_init(params: FlowParams, batch: np.ndarray) -> FlowParams:
    """Data-dependent ActNorm initialization, block by block.

    After init, each ActNorm's output on the init batch has per-dim mean 0
    and std 1. Dimensions whose batch std is below 1e-6 get scale 1 and
    bias -mean (output 0). Returns a new FlowParams; re-initialization of
    an already-initialized model errors.
    """
    if params.initialized:
        raise RuntimeError("ActNorm already initialized")
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if len(batch) < 2:
        raise ValueError("ActNorm init needs a batch of >= 2")
    out = params.copy()
    x = batch
    for i, (blk, perm) in enumerate(zip(out.blocks, out.perms)):
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        scale = 1.0 / np.where(std < 1e-6, 1.0, std)
        blk["actnorm_scale"] = scale
        blk["actnorm_bias"] = -mean * scale
        x, _ = _block_forward(out.spec, blk, perm, x, i)
    out.initialized = True
    return out


def nll_grad(params: FlowParams, batch: np.ndarray):
    """Gradient of the mean NLL over `batch` w.r.t. every trainable array.

    Returns (grads, mean_nll) where grads mirrors params.blocks. Derived
    by reverse-mode accumulation through each block.
    """
    spec = params.spec
    D, d = spec.dim, spec.split
    m = D - d
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n = len(x)
    if n == 0:
        raise ValueError("batch must be nonempty")

    cache = []
    z, ld = forward_batch(params, x, cache=cache)
    nll = float(0.5 * D * np.log(2.0 * np.pi) + np.mean(0.5 * np.sum(z * z, axis=1) - ld))

    grads = [dict() for _ in params.blocks]
    gz = z / n  # d(mean NLL)/dz
    for i in reversed(range(spec.n_blocks)):
        blk, perm, cch = params.blocks[i], params.perms[i], cache[i]
        g = grads[i]

        # mixing
        if spec.mixing == "random_permutation":
            gc = np.empty_like(gz)
            gc[:, perm] = gz
        else:
            w = _mix_matrix(spec, blk, perm)
            gw = gz.T @ cch["coupled"]  # d/dW of sum over batch
            gc = gz @ w
            # chain gw back through W = P L U; undo the row permutation of P
            diag_u = np.diag(blk["mix_u"])
            gw_unperm = gw[np.argsort(perm)]  # gradient w.r.t. (L U)
            l_mat = blk["mix_l"] * _strict_lower_mask(D) + np.eye(D)
            u_mat = np.triu(blk["mix_u"])
            g["mix_l"] = (gw_unperm @ u_mat.T) * _strict_lower_mask(D)
            gu = np.triu(l_mat.T @ gw_unperm)
            # log-det term: every sample contributes sum log|u_jj|
            gu[np.arange(D), np.arange(D)] -= 1.0 / diag_u
            g["mix_u"] = gu

        # coupling
        ga1 = gc[:, :d].copy()
        gc2 = gc[:, d:]
        a2, s, u, th = cch["a2"], cch["s"], cch["u"], cch["th"]
        ga2 = gc2 * s
        gu = gc2 * a2 * s
        if spec.coupling == "affine":
            gu -= 1.0 / n  # -d(logdet)/du, logdet = sum(u) per sample
        else:
            gu = gu - gu.mean(axis=1, keepdims=True)  # centering backprop; logdet is 0
        graw_s = gu * (1.0 - th * th)  # d/draw of c*tanh(raw/c)
        graw_t = gc2
        graw = np.concatenate([graw_s, graw_t], axis=1)

        # subnet
        a1 = cch["a1"]
        if spec.subnet == "linear":
            g["w"] = graw.T @ a1
            g["b"] = graw.sum(axis=0)
            ga1 += graw @ blk["w"]
        else:
            h = cch["hidden"]
            g["w2"] = graw.T @ h
            g["b2"] = graw.sum(axis=0)
            gh = graw @ blk["w2"]
            gpre = gh * (1.0 - h * h)
            g["w1"] = gpre.T @ a1
            g["b1"] = gpre.sum(axis=0)
            ga1 += gpre @ blk["w1"]

        ga = np.concatenate([ga1, ga2], axis=1)

        # actnorm
        xin = cch["x"]
        g["actnorm_scale"] = np.sum(ga * xin, axis=0) - 1.0 / blk["actnorm_scale"]
        g["actnorm_bias"] = ga.sum(axis=0)
        gz = ga * blk["actnorm_scale"]

        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise NumericalOverflowError(f"numerical overflow: non-finite gradient {name} in block {i}")
    return grads, nll


def iter_arrays(blocks):
    """Yield (block_index, name, array) over trainable arrays in fixed order."""
    for i, blk in enumerate(blocks):
        for name in sorted(blk):
            yield i, name, blk[name]


def save_flow(params: FlowParams, path) -> None:
    """Write the model container: "DAAF" magic, JSON header, f32 payload."""
    header = {
        "kind": "flow",
        "spec": params.spec.to_dict(),
        "key_id": params.key_id,
        "initialized": bool(params.initialized),
        "perms": [[int(v) for v in p] for p in params.perms],
        "arrays": [
            {"block": i, "name": name, "shape": list(arr.shape)} for i, name, arr in iter_arrays(params.blocks)
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(bytes([MODEL_VERSION]))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, _, arr in iter_arrays(params.blocks):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_flow(path) -> FlowParams:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 9 or raw[:4] != MODEL_MAGIC:
        raise ValueError(f"format error: bad magic bytes in {path}")
    if raw[4] != MODEL_VERSION:
        raise ValueError(f"format error: unsupported model version {raw[4]}")
    (hlen,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9 : 9 + hlen].decode("utf-8"))
    spec = FlowSpec(**header["spec"])
    blocks = [dict() for _ in range(spec.n_blocks)]
    payload = raw[9 + hlen :]
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload[offset : offset + 4 * count], dtype="<f4").reshape(shape)
        blocks[entry["block"]][entry["name"]] = arr.astype(np.float64)
        offset += 4 * count
    if offset != len(payload):
        raise ValueError(f"corrupt model: {len(payload) - offset} trailing payload bytes")
    return FlowParams(
        spec=spec,
        blocks=blocks,
        perms=[np.asarray(p, dtype=np.int64) for p in header["perms"]],
        initialized=bool(header["initialized"]),
        key_id=header.get("key_id", ""),
    )
