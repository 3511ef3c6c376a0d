"""Vectorised numpy implementation of the masked-query MAE batch kernel.

Only masked patches contribute to the reconstruction loss, and a masked
patch's query is its bare positional encoding ``e_p``. The loss therefore
depends on ``Q`` only through the position rows ``W = Q[pos, :]``, and the
gradient is supported on those rows. Working in these coordinates turns the
per-query cost from O(P d^2) into O(P).

For a masked query ``p`` of a sample in cluster ``k`` the logit of key ``q``
is ``W[p, pos(q)] + c_q W[p, feat(k, a(q))]`` with ``c_q = z_{a(q)}`` on
unmasked keys and 0 on masked ones.
"""

from __future__ import annotations

import numpy as np

from ._kernels_common import KernelResult


def mae_masked_terms(
    W: np.ndarray,
    area_index: np.ndarray,
    num_areas: int,
    cluster: np.ndarray,
    z: np.ndarray,
    unmasked: np.ndarray,
    weight: np.ndarray,
    with_cluster_pp: bool = False,
) -> KernelResult:
    P, d = W.shape
    K = area_index.shape[0]
    N = num_areas
    KN = d - P
    B = cluster.shape[0]
    m = int(P - unmasked[0].sum())
    if np.any(unmasked.sum(axis=1) != P - m):
        raise ValueError("every row of a batch must mask the same number of patches")

    masked_idx = np.argsort(unmasked, axis=1, kind="stable")[:, :m]
    area = area_index[cluster]
    fcol = cluster[:, None] * N + area
    zq = np.take_along_axis(z, area, axis=1)
    c = zq * unmasked

    Wp = W[masked_idx]
    ups = Wp[:, :, KN:]
    phi = np.take_along_axis(Wp, np.broadcast_to(fcol[:, None, :], (B, m, P)), axis=2)
    logits = ups + c[:, None, :] * phi
    logits = logits - logits.max(axis=2, keepdims=True)
    s = np.exp(logits)
    s /= s.sum(axis=2, keepdims=True)

    onehot = (area[:, :, None] == np.arange(N)[None, None, :]) & unmasked[:, :, None]
    attn = np.einsum("bmq,bqn->bmn", s, onehot.astype(float))

    n = np.take_along_axis(area, masked_idx, axis=1)
    zn = np.take_along_axis(z, n, axis=1)
    rho = -z[:, None, :] * attn
    np.put_along_axis(rho, n[:, :, None], np.take_along_axis(rho, n[:, :, None], axis=2) + zn[:, :, None], axis=2)
    wsc = np.sum(attn * z[:, None, :] * rho, axis=2)

    J = c[:, None, :] * np.take_along_axis(rho, np.broadcast_to(area[:, None, :], (B, m, P)), axis=2)
    g = s * (J - wsc[:, :, None]) * weight[:, None, None]

    q = np.arange(P)[None, None, :]
    rows = masked_idx[:, :, None]
    grad = np.zeros((P, d))
    grad[:, KN:] = np.bincount((rows * P + q).ravel(), g.ravel(), minlength=P * P).reshape(P, P)
    grad[:, :KN] = np.bincount(
        (rows * KN + fcol[:, None, :]).ravel(), (g * c[:, None, :]).ravel(), minlength=P * KN
    ).reshape(P, KN)

    per_loss = 0.5 * np.sum(rho * rho, axis=2) * weight[:, None]
    loss = np.bincount(masked_idx.ravel(), per_loss.ravel(), minlength=P)

    if with_cluster_pp:
        flat = ((cluster[:, None, None] * P + rows) * P + q).ravel()
        pp = np.bincount(flat, g.ravel(), minlength=K * P * P).reshape(K, P, P)
    else:
        pp = None

    own = np.full((B, P), np.nan)
    np.put_along_axis(own, masked_idx, np.take_along_axis(attn, n[:, :, None], axis=2)[:, :, 0], axis=1)
    return KernelResult(loss=loss, grad=grad, pp_by_cluster=pp, own_attn=own)
