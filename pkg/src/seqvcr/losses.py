"""Training objective: next-token loss plus the variance-covariance regularizer.

The regularizer penalizes, for each sequence position, low feature variance
(hinge toward unit variance) and nonzero feature covariance, both measured
across the batch. A pooled mode computes one covariance over all
batch x position rows instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _record

PER_POSITION = "per_position"
BATCH_LENGTH = "batch_length"


@dataclass
class RegConfig:
    """Coefficients and mode for the variance-covariance regularizer."""

    lambda1: float = 0.0
    lambda2: float = 0.0
    eta: float = 0.001
    cov_mode: str = PER_POSITION
    reg_layer: int = -1  # index into layer activations; -1 = final block output

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer coefficients must be nonnegative")
        if self.cov_mode not in (PER_POSITION, BATCH_LENGTH):
            raise ValueError(f"unknown cov_mode {self.cov_mode!r}")

    @property
    def active(self) -> bool:
        return self.lambda1 + self.lambda2 > 0


@dataclass
class CovarianceStats:
    """Per-position batch covariance: cov is (P, d, d) over kept positions."""

    cov: Tensor              # (P, d, d), differentiable back to the input
    mean: np.ndarray         # (P, d)
    counts: np.ndarray       # (P,) samples contributing at each kept position
    positions: np.ndarray    # (P,) original position indices that were kept


def _masked_covariance(x: Tensor, mask: np.ndarray):
    """Autodiff primitive: unbiased covariance across the batch axis.

    x: (N, T, d); mask: (N, T) booleans marking valid positions. Positions
    with fewer than two valid samples are dropped. Returns the (P, d, d)
    covariance tensor plus mean, counts, and kept-position indices.
    """
    n, t, d = x.data.shape
    counts_all = mask.sum(axis=0)
    kept = np.flatnonzero(counts_all >= 2)
    if kept.size == 0:
        raise ValueError("covariance undefined: fewer than 2 valid samples at every position")
    w = mask[:, kept].astype(np.float64)          # (N, P)
    counts = counts_all[kept].astype(np.float64)  # (P,)
    xk = x.data[:, kept, :]                       # (N, P, d)
    xk_p = np.ascontiguousarray(xk.transpose(1, 0, 2))          # (P, N, d)
    mean = np.matmul(w.T[:, None, :], xk_p)[:, 0, :] / counts[:, None]
    dev0 = xk_p - mean[:, None, :]                # (P, N, d)
    dev = dev0 * w.T[:, :, None]
    cov = np.matmul(dev.transpose(0, 2, 1), dev0) / (counts - 1.0)[:, None, None]

    def vjp(g):
        gs = g + np.swapaxes(g, -1, -2)
        gx_p = np.matmul(dev0, gs.transpose(0, 2, 1)) * w.T[:, :, None]
        gx_p /= (counts - 1.0)[:, None, None]
        gx = np.zeros_like(x.data)
        gx[:, kept, :] = gx_p.transpose(1, 0, 2)
        return (gx,)

    cov_t = _record("masked_covariance", (x,), cov, vjp)
    return cov_t, mean, counts, kept


def per_position_covariance(x: Tensor | np.ndarray, mask: np.ndarray | None = None) -> CovarianceStats:
    """Covariance matrix at each sequence position, across the batch (N >= 2)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 3:
        raise ValueError(f"expected (N, T, d) input, got shape {x.data.shape}")
    n, t, d = x.data.shape
    if mask is None:
        if n < 2:
            raise ValueError(f"covariance needs at least 2 samples, got N={n}")
        mask = np.ones((n, t), dtype=bool)
    cov, mean, counts, kept = _masked_covariance(x, np.asarray(mask, dtype=bool))
    return CovarianceStats(cov=cov, mean=mean, counts=counts, positions=kept)


def batch_length_covariance(x: Tensor | np.ndarray, mask: np.ndarray | None = None) -> CovarianceStats:
    """One covariance matrix pooled over all batch x position rows (N*T >= 2)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 3:
        raise ValueError(f"expected (N, T, d) input, got shape {x.data.shape}")
    n, t, d = x.data.shape
    if n * t < 2:
        raise ValueError(f"pooled covariance needs at least 2 rows, got N*T={n * t}")
    flat = ad.reshape(x, (n * t, 1, d))
    if mask is None:
        mask = np.ones((n, t), dtype=bool)
    flat_mask = np.asarray(mask, dtype=bool).reshape(n * t, 1)
    cov, mean, counts, kept = _masked_covariance(flat, flat_mask)
    return CovarianceStats(cov=cov, mean=mean, counts=counts, positions=kept)


def seq_vcr_loss(stats: CovarianceStats, cfg: RegConfig) -> Tensor:
    """Hinge-variance plus squared-covariance penalty, averaged over P*d.

    Implemented as one fused primitive: the covariance block is large
    (P, d, d), so the elementwise chain is collapsed into a single forward
    pass with an analytic gradient.
    """
    cov = stats.cov
    p, d, _ = cov.data.shape
    c = cov.data
    idx = np.arange(d)
    diag = c[:, idx, idx]                                   # (P, d)
    root = np.sqrt(diag + cfg.eta)
    hinge = np.maximum(0.0, 1.0 - root)
    off_sq = float(np.vdot(c, c)) - float(np.vdot(diag, diag))
    denom = float(p * d)
    value = (cfg.lambda1 * float(hinge.sum()) + cfg.lambda2 * off_sq) / denom

    def vjp(g):
        gf = float(g)
        gc = (2.0 * cfg.lambda2 * gf / denom) * c
        gdiag = np.zeros_like(diag)
        active = hinge > 0.0
        gdiag[active] = -(cfg.lambda1 * gf / denom) * 0.5 / root[active]
        gc[:, idx, idx] = gdiag
        return (gc,)

    return _record("vcr_penalty", (cov,), np.asarray(value), vjp)


def sqrt_shifted(x: Tensor, eta: float) -> Tensor:
    return ad.sqrt(ad.add(x, eta))


def fused_seq_vcr(x: Tensor, mask: np.ndarray, cfg: RegConfig) -> Tensor:
    """Regularizer straight from activations, as a single taped primitive.

    Numerically identical to seq_vcr_loss over per_position_covariance but
    avoids materializing intermediate (P, d, d) tensors in the graph; the
    training loop's throughput lives and dies on this path.
    """
    n, t, d = x.data.shape
    counts_all = mask.sum(axis=0)
    kept = np.flatnonzero(counts_all >= 2)
    if kept.size == 0:
        raise ValueError("covariance undefined: fewer than 2 valid samples at every position")
    w = mask[:, kept].astype(np.float64).T                    # (P, N)
    counts = counts_all[kept].astype(np.float64)              # (P,)
    xk_p = np.ascontiguousarray(x.data[:, kept, :].transpose(1, 0, 2))  # (P, N, d)
    mean = np.matmul(w[:, None, :], xk_p)[:, 0, :] / counts[:, None]
    dev0 = xk_p - mean[:, None, :]
    scale = (w / (counts - 1.0)[:, None])                     # folds the 1/(c-1)
    cov = np.matmul((dev0 * scale[:, :, None]).transpose(0, 2, 1), dev0)
    idx = np.arange(d)
    diag = cov[:, idx, idx]
    root = np.sqrt(diag + cfg.eta)
    hinge = np.maximum(0.0, 1.0 - root)
    off_sq = float(np.vdot(cov, cov)) - float(np.vdot(diag, diag))
    denom = float(kept.size * d)
    value = (cfg.lambda1 * float(hinge.sum()) + cfg.lambda2 * off_sq) / denom

    def vjp(g):
        gf = float(g)
        grad_cov = (2.0 * cfg.lambda2 * gf / denom) * cov     # symmetric part
        gdiag = np.zeros_like(diag)
        active = hinge > 0.0
        gdiag[active] = -(cfg.lambda1 * gf / denom) * 0.5 / root[active]
        grad_cov[:, idx, idx] = gdiag
        # d cov / d x contributes w * (G + G^T) dev / (c-1); G is symmetric
        gx_p = np.matmul(dev0, grad_cov) * (2.0 * scale)[:, :, None]
        gx = np.zeros_like(x.data)
        gx[:, kept, :] = gx_p.transpose(1, 0, 2)
        return (gx,)

    return _record("seq_vcr", (x,), np.asarray(value), vjp)


@dataclass
class LossComponents:
    next_token: float
    regularizer: float

    @property
    def total(self) -> float:
        return self.next_token + self.regularizer


def total_loss(logits: Tensor, targets, loss_mask, projected: Tensor | None,
               cfg: RegConfig, pad_mask: np.ndarray | None = None):
    """Combined objective: next-token cross-entropy plus the regularizer.

    projected may be None when both coefficients are zero. pad_mask marks
    positions whose activations enter the covariance statistics (defaults
    to all positions).
    """
    l_next = ad.cross_entropy_from_logits(logits, targets, loss_mask)
    if cfg.active:
        if projected is None:
            raise ValueError("regularizer enabled but no projected activations given")
        n, t, d = projected.data.shape
        mask = (np.ones((n, t), dtype=bool) if pad_mask is None
                else np.asarray(pad_mask, dtype=bool))
        if cfg.cov_mode == PER_POSITION:
            l_reg = fused_seq_vcr(projected, mask, cfg)
        else:
            flat = ad.reshape(projected, (n * t, 1, d))
            l_reg = fused_seq_vcr(flat, mask.reshape(n * t, 1), cfg)
        total = ad.add(l_next, l_reg)
        return total, LossComponents(float(l_next.data), float(l_reg.data))
    return l_next, LossComponents(float(l_next.data), 0.0)
