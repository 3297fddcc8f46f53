"""Probes comparing trained models: prediction correlation, SVCCA, attention distance."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .models import PatchGrid

log = logging.getLogger(__name__)


@dataclass
class RepresentationSet:
    matrix: np.ndarray  # (n_samples, dim)
    model_id: str = ""
    layer_tag: str = "penultimate"


@dataclass
class AttentionSummary:
    freq: list[float]
    time: list[float]
    grid: PatchGrid


def prediction_similarity(preds_a, preds_b) -> float:
    """Mean over samples of the Pearson correlation between two prediction rows."""
    a = np.asarray(preds_a, dtype=np.float64)
    b = np.asarray(preds_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"prediction shapes differ: {a.shape} vs {b.shape}")
    a = a - a.mean(1, keepdims=True)
    b = b - b.mean(1, keepdims=True)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    if not ok.all():
        warnings.warn(f"excluding {int((~ok).sum())} zero-variance rows from PCC", RuntimeWarning)
    if not ok.any():
        raise ValueError("every row has zero variance")
    r = (a[ok] * b[ok]).sum(1) / (na[ok] * nb[ok])
    return float(np.mean(r))


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, RepresentationSet):
        x = x.matrix
    return np.asarray(x, dtype=np.float64)


def svd_reduce(x: np.ndarray, var_fraction: float) -> np.ndarray:
    """Project centered ``x`` onto its fewest leading singular directions whose
    squared singular values reach ``var_fraction`` of the total."""
    x = x - x.mean(0)
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    if s.size == 0 or s[0] <= 0:
        raise ValueError("representation matrix has rank 0")
    rank = int((s > s[0] * max(x.shape) * np.finfo(float).eps).sum())
    energy = s[:rank] ** 2
    total = energy.sum()
    keep = int(np.searchsorted(np.cumsum(energy) / total, var_fraction - 1e-12) + 1)
    keep = min(keep, rank)
    return u[:, :keep] * s[:keep]


def canonical_correlations(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Canonical correlations of two centered column sets via orthonormal bases."""
    qa, _ = np.linalg.qr(a - a.mean(0))
    qb, _ = np.linalg.qr(b - b.mean(0))
    return np.clip(np.linalg.svd(qa.T @ qb, compute_uv=False), 0.0, 1.0)


def svcca_similarity(a, b, var_fraction: float = 0.30) -> float:
    """SVCCA score: mean canonical correlation after per-side SVD truncation."""
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError("representation sets must share the sample axis")
    for m in (a, b):
        if m.shape[0] < m.shape[1]:
            log.warning("SVCCA on %d samples of dimension %d may be unstable", *m.shape)
    rho = canonical_correlations(svd_reduce(a, var_fraction), svd_reduce(b, var_fraction))
    return float(np.mean(rho))


def grid_coordinates(grid: PatchGrid) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(grid.N)
    return k // grid.n_time, k % grid.n_time


def mean_attention_distance(attn, grid: PatchGrid, axis: str, n_special: int = 1) -> list[float]:
    """Attention-weighted mean distance (in patch-grid steps) per layer along ``axis``.

    ``attn`` is a list (one per layer) of arrays ``(heads, L, L)`` or
    ``(batch, heads, L, L)`` with ``L = n_special + grid.N``. The leading
    special tokens (CLS, DIS) are dropped from both queries and keys and the
    remaining rows are renormalized before averaging over queries, heads and
    samples.
    """
    if axis not in ("freq", "time"):
        raise ValueError("axis must be 'freq' or 'time'")
    f, t = grid_coordinates(grid)
    coord = (f if axis == "freq" else t).astype(np.float64)
    dist = np.abs(coord[:, None] - coord[None, :])
    out = []
    for layer in attn:
        a = layer.detach().cpu().numpy() if isinstance(layer, torch.Tensor) else np.asarray(layer)
        a = a.astype(np.float64)
        if a.shape[-1] != grid.N + n_special or a.shape[-2] != grid.N + n_special:
            raise ValueError(f"attention has {a.shape[-1]} tokens, grid expects {grid.N} + {n_special}")
        a = a[..., n_special:, n_special:]
        a = a / a.sum(-1, keepdims=True)
        out.append(float((a * dist).sum(-1).mean()))
    return out


def attention_summary(attn, grid: PatchGrid, n_special: int = 1) -> AttentionSummary:
    return AttentionSummary(mean_attention_distance(attn, grid, "freq", n_special),
                            mean_attention_distance(attn, grid, "time", n_special), grid)


# ------------------------------------------------------------ collection

def collect(model, specs: np.ndarray, task: str, batch_size: int = 128,
            attention_grid: PatchGrid | None = None, policy: str = "average"):
    """Predictions, penultimate representations and per-layer attention distances.

    Attention distances are computed only when ``attention_grid`` is given
    (spectrogram-Transformer models); they come back as an
    :class:`AttentionSummary` averaged over all clips.
    """
    from .distill import activation, inference_logits

    model.eval()
    n_special = getattr(model, "n_special", 1)
    preds, reps = [], []
    sums = None
    with torch.no_grad():
        for start in range(0, len(specs), batch_size):
            x = torch.as_tensor(specs[start:start + batch_size], dtype=torch.float32)
            out = model(x, capture_attention=attention_grid is not None)
            preds.append(activation(inference_logits(out, policy, task), task).numpy())
            reps.append(out.penult.numpy())
            if attention_grid is not None and out.attention:
                d = np.array([mean_attention_distance(out.attention, attention_grid, ax, n_special)
                              for ax in ("freq", "time")]) * len(x)
                sums = d if sums is None else sums + d
    summary = None
    if sums is not None:
        sums = sums / len(specs)
        summary = AttentionSummary(sums[0].tolist(), sums[1].tolist(), attention_grid)
    return np.concatenate(preds), np.concatenate(reps), summary
