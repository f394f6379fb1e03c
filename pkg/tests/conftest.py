import numpy as np

from actdetect import flow as flowmod


def identity_params(spec: flowmod.FlowSpec) -> flowmod.FlowParams:
    """Parameters realizing the identity transform: zero subnets, unit
    ActNorm, identity mixing."""
    params = flowmod.init_params(spec, seed=0)
    D = spec.dim
    for i, blk in enumerate(params.blocks):
        params.perms[i] = np.arange(D, dtype=np.int64)
        if spec.mixing == "invertible_linear":
            blk["mix_l"] = np.zeros((D, D))
            blk["mix_u"] = np.eye(D)
        if spec.subnet == "mlp":
            blk["w1"] = np.zeros_like(blk["w1"])
    params.initialized = True
    return params


def random_params(spec: flowmod.FlowSpec, seed: int, scale: float = 0.1) -> flowmod.FlowParams:
    """Well-conditioned random parameters, marked initialized."""
    params = flowmod.init_params(spec, seed=seed)
    rng = np.random.default_rng(seed)
    for blk in params.blocks:
        blk["actnorm_scale"] = np.exp(rng.uniform(-0.5, 0.5, spec.dim))
        blk["actnorm_bias"] = rng.normal(0.0, 0.3, spec.dim)
        for name in blk:
            if name.startswith("actnorm"):
                continue
            if name == "mix_u":
                noise = rng.normal(0.0, 0.02 / np.sqrt(spec.dim), blk[name].shape)
                np.fill_diagonal(noise, 0.0)  # keep the diagonal away from zero
                blk[name] = blk[name] + np.triu(noise)
            elif name == "mix_l":
                blk[name] = blk[name] + np.tril(
                    rng.normal(0.0, 0.02 / np.sqrt(spec.dim), blk[name].shape), k=-1
                )
            else:
                blk[name] = blk[name] + rng.normal(0.0, scale, blk[name].shape)
    params.initialized = True
    return params


def all_flow_specs(dim: int, n_blocks: int = 2, hidden_width: int = 8):
    for coupling in flowmod.COUPLINGS:
        for mixing in flowmod.MIXINGS:
            for subnet in flowmod.SUBNETS:
                yield flowmod.FlowSpec(
                    dim=dim,
                    n_blocks=n_blocks,
                    coupling=coupling,
                    mixing=mixing,
                    subnet=subnet,
                    hidden_width=hidden_width,
                )


def fd_jacobian(params: flowmod.FlowParams, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of the forward map at a single input."""
    D = len(x)
    jac = np.empty((D, D))
    for j in range(D):
        up = x.copy()
        dn = x.copy()
        up[j] += eps
        dn[j] -= eps
        zu, _ = flowmod.forward_batch(params, up.reshape(1, -1))
        zd, _ = flowmod.forward_batch(params, dn.reshape(1, -1))
        jac[:, j] = (zu[0] - zd[0]) / (2 * eps)
    return jac
