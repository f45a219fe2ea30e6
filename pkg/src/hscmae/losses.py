"""The four training objectives and their uncertainty-weighted combination.

The canonical-correlation loss is a dedicated tape node with the closed-form
gradient through the whitening construction; everything else composes
diffcore primitives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class CcaConfig:
    r: int = 32          # canonical directions kept (full retrieval dim)
    eps: float = 1e-4    # covariance regularizer, shared with the linear fit

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("CcaConfig: r must be >= 1")
        if self.eps <= 0:
            raise ValueError("CcaConfig: eps must be positive")


@dataclass
class LossBundle:
    """Per-term scalar tape nodes; None marks an inactive term."""
    rec: dc.Tensor | None = None
    cca: dc.Tensor | None = None
    infonce: dc.Tensor | None = None
    dis: dc.Tensor | None = None

    def items(self):
        return [(n, getattr(self, n)) for n in ("rec", "cca", "infonce", "dis")]

    def values(self):
        return {n: (float(t.value[0, 0]) if t is not None else 0.0) for n, t in self.items()}


_EIG_CLAMP = 1e-10


def _inv_sqrt(sym):
    w, q = np.linalg.eigh(sym)
    w = np.maximum(w, _EIG_CLAMP)
    return (q * (w ** -0.5)) @ q.T


def dcca_loss(za, zv, config):
    """Negative sum of the top-r canonical correlations of the two batches.

    Forward: center, regularized covariances, whitened cross-covariance
    T = S_aa^{-1/2} S_av S_vv^{-1/2}, canonical correlations = singular
    values of T. Backward: closed-form gradient through whitening.
    """
    n, da = za.shape
    dv = zv.shape[1]
    if zv.shape[0] != n:
        raise dc.ShapeError(f"dcca_loss: {za.shape} vs {zv.shape}")
    if n < 2:
        raise ValueError("dcca_loss: need at least 2 samples")
    r = config.r
    if r > min(da, dv):
        raise ValueError(f"dcca_loss: r={r} exceeds min embedding dim {min(da, dv)}")

    ha = za.value - za.value.mean(axis=0, keepdims=True)
    hv = zv.value - zv.value.mean(axis=0, keepdims=True)
    denom = n - 1
    s_aa = ha.T @ ha / denom + config.eps * np.eye(da)
    s_vv = hv.T @ hv / denom + config.eps * np.eye(dv)
    s_av = ha.T @ hv / denom
    for name, cov in (("audio", s_aa), ("visual", s_vv)):
        if not np.all(np.isfinite(cov)):
            raise dc.NumericError(f"dcca_loss: non-finite {name} covariance")

    k_aa = _inv_sqrt(s_aa)
    k_vv = _inv_sqrt(s_vv)
    t_mat = k_aa @ s_av @ k_vv
    u, sv, vt = np.linalg.svd(t_mat)
    corr = float(sv[:r].sum())

    ur = u[:, :r]
    vr = vt[:r].T
    sr = sv[:r]
    d_av = k_aa @ ur @ vr.T @ k_vv                  # d corr / d S_av
    d_aa = -0.5 * k_aa @ (ur * sr) @ ur.T @ k_aa    # d corr / d S_aa
    d_vv = -0.5 * k_vv @ (vr * sr) @ vr.T @ k_vv
    grad_a = (2.0 * ha @ d_aa + hv @ d_av.T) / denom
    grad_v = (2.0 * hv @ d_vv + ha @ d_av) / denom

    def bwd(g):
        s = g[0, 0]
        return -s * grad_a, -s * grad_v

    return dc._node("dcca", [[-corr]], (za, zv), bwd)


def soft_infonce(za, zv, targets, tau):
    """Symmetric affinity-weighted cross-modal InfoNCE.

    Logits are the cosine similarities of the (unit-norm) rows scaled by
    1/tau; each anchor's cross-entropy target is its mined weight row.
    """
    if tau <= 0:
        raise ValueError("soft_infonce: temperature must be positive")
    n = za.shape[0]
    if zv.shape != za.shape:
        raise dc.ShapeError(f"soft_infonce: {za.shape} vs {zv.shape}")
    for name, w in (("a2v", targets.w_a2v), ("v2a", targets.w_v2a)):
        if w.shape != (n, n):
            raise dc.ShapeError(f"soft_infonce: weight matrix {name} has shape {w.shape}")
        if np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError(f"soft_infonce: {name} weight rows do not sum to 1")

    logits = dc.matmul(za, dc.transpose(zv))
    half_a = dc.scale(dc.sum_all(dc.mul(dc.const(targets.w_a2v), dc.row_log_softmax(logits, temp=tau))), -1.0 / n)
    half_v = dc.scale(dc.sum_all(dc.mul(dc.const(targets.w_v2a), dc.row_log_softmax(dc.transpose(logits), temp=tau))), -1.0 / n)
    return dc.scale(dc.add(half_a, half_v), 0.5)


def rec_loss(xa, xv, xa_hat, xv_hat):
    """Full-vector reconstruction MSE: mean-per-sample squared L2 error,
    averaged over the two modalities."""
    xa = xa if isinstance(xa, dc.Tensor) else dc.const(xa)
    xv = xv if isinstance(xv, dc.Tensor) else dc.const(xv)
    return dc.scale(dc.add(dc.mse(xa_hat, xa), dc.mse(xv_hat, xv)), 0.5)


def distill_loss(z_mae_a, z_mae_v, z_t_a, z_t_v):
    """Mean squared row distance of student embeddings to (gradient-free)
    teacher embeddings, averaged over modalities."""
    def freeze(z):
        return dc.stop_gradient(z) if isinstance(z, dc.Tensor) else dc.const(z)

    return dc.scale(dc.add(dc.mse(z_mae_a, freeze(z_t_a)), dc.mse(z_mae_v, freeze(z_t_v))), 0.5)


def warmup_weight(name, epoch):
    return {"rec": 1.0, "cca": 0.1 * epoch, "dis": 0.1, "infonce": 0.05}[name]


def total_loss(bundle, sigmas, epoch, warmup_epochs=5):
    """Combine the active terms.

    Epochs 1..warmup_epochs use the fixed schedule (rec=1, cca=0.1*epoch,
    dis=0.1, infonce=0.05) with the log-variance parameters frozen; later
    epochs use sum_m exp(-sigma_m) L_m + sigma_m over the active terms.

    Returns (scalar node, effective-weight dict for logging).
    """
    if epoch < 1:
        raise ValueError("total_loss: epoch starts at 1")
    active = [(name, term) for name, term in bundle.items() if term is not None]
    if not active:
        raise ValueError("total_loss: no active loss terms")

    total = None
    weights = {}
    for name, term in active:
        if epoch <= warmup_epochs:
            w = warmup_weight(name, epoch)
            piece = dc.scale(term, w)
            weights[name] = w
        else:
            sig = sigmas[name].tensor()
            piece = dc.add(dc.mul(dc.exp(dc.scale(sig, -1.0)), term), sig)
            weights[name] = float(np.exp(-sigmas[name].value[0, 0]))
        total = piece if total is None else dc.add(total, piece)
    return total, weights
