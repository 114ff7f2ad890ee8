"""Spatio-temporal point representations and the causal trajectory transformer.

Attention carries relative spatio-temporal terms: for query i and key j the
key is shifted by ``d_ij * theta_d^k | dt_ij * theta_t^k`` and the value by the
same construction with value-side vectors.  Distances are km, intervals minutes.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc

PREFIX = "traje"


def init_traj_params(store: dc.ParamStore, rng, d: int, n_layers: int, n_heads: int, ff_mult: int = 4) -> None:
    D = 2 * d
    if D % n_heads or (D // n_heads) % 2:
        raise ValueError(f"2d={D} must split into {n_heads} heads of even width")
    dk = D // n_heads
    store.add(f"{PREFIX}.gate.w1", dc.xavier_uniform(rng, D, d))
    store.add(f"{PREFIX}.gate.b1", np.zeros(d))
    store.add(f"{PREFIX}.gate.w2", dc.xavier_uniform(rng, d, 1, shape=(d,)))
    store.add(f"{PREFIX}.gate.b2", np.zeros(()))
    store.add(f"{PREFIX}.omega", default_frequencies(d))
    for l in range(n_layers):
        p = f"{PREFIX}.l{l}"
        store.add(f"{p}.ln1_g", np.ones(D))
        store.add(f"{p}.ln1_b", np.zeros(D))
        for name in ("wq", "wk", "wv"):
            store.add(f"{p}.{name}", dc.xavier_uniform(rng, D, D))
        for name in ("rel_dk", "rel_tk", "rel_dv", "rel_tv"):
            store.add(f"{p}.{name}", dc.xavier_uniform(rng, dk // 2, 1, shape=(n_heads, dk // 2)))
        store.add(f"{p}.ln2_g", np.ones(D))
        store.add(f"{p}.ln2_b", np.zeros(D))
        store.add(f"{p}.ff_w1", dc.xavier_uniform(rng, D, ff_mult * D))
        store.add(f"{p}.ff_b1", np.zeros(ff_mult * D))
        store.add(f"{p}.ff_w2", dc.xavier_uniform(rng, ff_mult * D, D))
        store.add(f"{p}.ff_b2", np.zeros(D))
    if n_layers:
        store.add(f"{PREFIX}.lnf_g", np.ones(D))
        store.add(f"{PREFIX}.lnf_b", np.zeros(D))


def default_frequencies(d: int) -> np.ndarray:
    l = np.arange(1, d // 2 + 1)
    return 1.0 / 10000.0 ** (2.0 * l / d)


def temporal_encoding(omega, minutes) -> dc.Tensor:
    """sqrt(1/2d) [cos(w_l t) ..., sin(w_l t) ...]; its norm is 1/2 for any t and w."""
    omega = dc.as_tensor(omega)
    d = 2 * omega.shape[0]
    phase = dc.mul(dc.Tensor(np.asarray(minutes, dtype=np.float64)[..., None]), omega)
    return dc.scale(dc.concat([dc.cos(phase), dc.sin(phase)], axis=-1), np.sqrt(1.0 / (2 * d)))


def gate_mlp(store: dc.ParamStore, vz) -> dc.Tensor:
    h = dc.gelu(dc.matmul(vz, store[f"{PREFIX}.gate.w1"]) + store[f"{PREFIX}.gate.b1"])
    return dc.matmul(h, store[f"{PREFIX}.gate.w2"]) + store[f"{PREFIX}.gate.b2"]


def point_representation(store: dc.ParamStore, v_r, z, minutes) -> dc.Tensor:
    """x = (v_r + sigmoid(MLP(v_r | z)) * z) | temporal(t); works on any leading batch shape."""
    v_r, z = dc.as_tensor(v_r), dc.as_tensor(z)
    g = dc.sigmoid(gate_mlp(store, dc.concat([v_r, z], axis=-1)))
    spatial = v_r + dc.mul(dc.reshape(g, g.shape + (1,)), z)
    return dc.concat([spatial, temporal_encoding(store[f"{PREFIX}.omega"], minutes)], axis=-1)


def relative_encoding(store: dc.ParamStore, layer: int, dist_km: float, dt_min: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-head key and value offsets, each of shape (n_heads, 2d/n_heads)."""
    p = f"{PREFIX}.l{layer}"
    ak = np.concatenate([dist_km * store[f"{p}.rel_dk"].data, dt_min * store[f"{p}.rel_tk"].data], axis=-1)
    av = np.concatenate([dist_km * store[f"{p}.rel_dv"].data, dt_min * store[f"{p}.rel_tv"].data], axis=-1)
    return ak, av


def causal_mask(lengths: np.ndarray, L: int) -> np.ndarray:
    """(B, 1, L, L) boolean: key j visible to query i iff j <= i and j is a real point."""
    j = np.arange(L)
    tri = j[None, :] <= j[:, None]
    valid = j[None, :] < np.asarray(lengths)[:, None]
    return (tri[None] & valid[:, None, :])[:, None]


def relative_attention(store, layer: int, h, dist, dt, mask, n_heads: int, scale_mode: str = "sqrt"):
    """Multi-head causal attention with relative terms. Returns (B,L,2d) output and (B,H,L,L) weights.

    ``h`` is (B,L,2d); ``dist``/``dt`` are (B,L,L) with entry [i,j] the distance and
    the interval t_i - t_j.
    """
    p = f"{PREFIX}.l{layer}"
    B, L, D = h.shape
    H = n_heads
    dk = D // H
    half = dk // 2

    def heads(w):
        return dc.transpose(dc.reshape(dc.matmul(h, store[f"{p}.{w}"]), (B, L, H, dk)), (0, 2, 1, 3))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    distb = dc.Tensor(dist[:, None])  # (B,1,L,L)
    dtb = dc.Tensor(dt[:, None])
    # q_i . a_ij^k = d_ij (q_i[:half] . theta_d^k) + dt_ij (q_i[half:] . theta_t^k)
    qd = dc.sum_(dc.mul(q[..., :half], dc.reshape(store[f"{p}.rel_dk"], (1, H, 1, half))), axis=-1)
    qt = dc.sum_(dc.mul(q[..., half:], dc.reshape(store[f"{p}.rel_tk"], (1, H, 1, half))), axis=-1)
    scores = dc.matmul(q, dc.transpose(k, (0, 1, 3, 2)))
    scores = scores + dc.mul(distb, dc.reshape(qd, (B, H, L, 1))) + dc.mul(dtb, dc.reshape(qt, (B, H, L, 1)))
    denom = np.sqrt(dk) if scale_mode == "sqrt" else float(dk)
    alpha = dc.softmax(dc.scale(scores, 1.0 / denom), axis=-1, mask=mask)
    # sum_j alpha_ij (v_j + a_ij^v)
    wd = dc.sum_(dc.mul(alpha, distb), axis=-1, keepdims=True)  # (B,H,L,1)
    wt = dc.sum_(dc.mul(alpha, dtb), axis=-1, keepdims=True)
    rel_v = dc.concat(
        [
            dc.mul(wd, dc.reshape(store[f"{p}.rel_dv"], (1, H, 1, half))),
            dc.mul(wt, dc.reshape(store[f"{p}.rel_tv"], (1, H, 1, half))),
        ],
        axis=-1,
    )
    out = dc.matmul(alpha, v) + rel_v
    out = dc.reshape(dc.transpose(out, (0, 2, 1, 3)), (B, L, D))
    return out, alpha


def encode_trajectory(
    store: dc.ParamStore,
    x,
    dist: np.ndarray,
    dt: np.ndarray,
    lengths: np.ndarray,
    n_layers: int,
    n_heads: int,
    scale_mode: str = "sqrt",
    return_attention: bool = False,
):
    """Pre-norm decoder stack over point representations ``x`` (B,L,2d).

    Output row i summarises the prefix x_1..x_i only.
    """
    x = dc.as_tensor(x)
    B, L, _ = x.shape
    mask = causal_mask(lengths, L)
    alphas = []
    for l in range(n_layers):
        p = f"{PREFIX}.l{l}"
        h = dc.layer_norm(x, store[f"{p}.ln1_g"], store[f"{p}.ln1_b"])
        att, alpha = relative_attention(store, l, h, dist, dt, mask, n_heads, scale_mode)
        alphas.append(alpha)
        x = x + att
        h = dc.layer_norm(x, store[f"{p}.ln2_g"], store[f"{p}.ln2_b"])
        h = dc.gelu(dc.matmul(h, store[f"{p}.ff_w1"]) + store[f"{p}.ff_b1"])
        x = x + dc.matmul(h, store[f"{p}.ff_w2"]) + store[f"{p}.ff_b2"]
    out = dc.layer_norm(x, store[f"{PREFIX}.lnf_g"], store[f"{PREFIX}.lnf_b"])
    if return_attention:
        return out, alphas
    return out


def pairwise_intervals(minutes: np.ndarray) -> np.ndarray:
    """[i, j] = t_i - t_j for j <= i, zero above the diagonal."""
    m = np.asarray(minutes, dtype=np.float64)
    diff = m[:, None] - m[None, :]
    return np.tril(diff)
