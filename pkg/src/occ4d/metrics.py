"""Reconstruction metrics (IoU, per-class IoU, mIoU), a Frechet-distance proxy and scene-flow checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import OccupancySequence
from .tokenizer import Tokenizer


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, OccupancySequence) else np.asarray(x)


def _pair(pred, gt):
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {g.shape}")
    return p, g


def occupancy_iou(pred, gt) -> float:
    """IoU of the occupied (label != 0) sets; 1.0 when both are empty."""
    p, g = _pair(pred, gt)
    po, go = p != 0, g != 0
    union = np.count_nonzero(po | go)
    if union == 0:
        return 1.0
    return np.count_nonzero(po & go) / union


def class_miou(pred, gt, num_classes: int | None = None) -> tuple[dict[int, float], float]:
    """Per-class IoU for non-empty classes present in pred or gt, and their mean."""
    p, g = _pair(pred, gt)
    if num_classes is None:
        num_classes = int(max(p.max(), g.max())) + 1
    # confusion matrix, rows = gt, cols = pred
    conf = np.bincount(g.astype(np.int64).ravel() * num_classes + p.astype(np.int64).ravel(),
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    per_class = {}
    for k in range(1, num_classes):
        inter = conf[k, k]
        union = conf[k, :].sum() + conf[:, k].sum() - inter
        if union:
            per_class[k] = inter / union
    miou = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return per_class, miou


def voxel_accuracy(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(p == g))


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats) -> "FeatureStats":
        """One-pass (Welford) mean and sample covariance, rows accumulated in order."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need at least two feature rows")
        k = feats.shape[1]
        mean = np.zeros(k)
        m2 = np.zeros((k, k))
        for n, x in enumerate(feats, start=1):
            delta = x - mean
            mean += delta / n
            m2 += np.outer(delta, x - mean)
        cov = m2 / (feats.shape[0] - 1)
        return cls(mean, 0.5 * (cov + cov.T), feats.shape[0])


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    if w.min() < -1e-9 * max(1.0, abs(w).max()):
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    tr (S1 S2)^(1/2) is evaluated as tr (sqrt(S1) S2 sqrt(S1))^(1/2), whose argument
    is symmetric, so only symmetric eigendecompositions are needed.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise ValueError("feature dimension mismatch")
    s1 = _sqrt_psd(cov1)
    inner = s1 @ cov2 @ s1
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if not np.all(np.isfinite(w)):
        raise ValueError("matrix square root failed")
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * tr_sqrt, 0.0))


def fid_proxy(real: FeatureStats, gen: FeatureStats) -> float:
    return frechet_distance(real.mean, real.covariance, gen.mean, gen.covariance)


@torch.no_grad()
def extract_features_batch(labels, tokenizer: Tokenizer, batch_size: int = 32) -> np.ndarray:
    """(N, T, H, W, D) labels -> (N, c) global-average-pooled encoder latents."""
    tokenizer.eval()
    labels = torch.from_numpy(np.array(labels, dtype=np.int64))
    out = []
    for s in range(0, labels.shape[0], batch_size):
        # one clip at a time keeps each feature independent of its batch neighbours
        for x in labels[s:s + batch_size]:
            out.append(tokenizer.encode(x[None]).double().mean(dim=(2, 3, 4))[0])
    return torch.stack(out).numpy()


def extract_features(clip: OccupancySequence, tokenizer: Tokenizer) -> np.ndarray:
    return extract_features_batch(clip.labels[None], tokenizer)[0]


def object_mask(labels: np.ndarray) -> np.ndarray:
    """(T, H, W) bird's-eye mask of columns with anything above the ground plane."""
    return (np.asarray(labels)[..., 1:] != 0).any(axis=-1)


def occupancy_flow(seq, axis: int = 0, max_shift: int = 3) -> float:
    """Mean frame-to-frame scene flow, in cells per frame, along a BEV axis (0 = H, 1 = W).

    For consecutive bird's-eye object masks the overlap is measured for every
    integer displacement in [-max_shift, max_shift]; the flow for that pair is
    the centroid of this overlap profile. Content moving toward lower indices
    gives a negative flow.
    """
    m = object_mask(_labels(seq)).astype(np.float64)
    shifts = np.arange(-max_shift, max_shift + 1)
    flows = []
    for t in range(m.shape[0] - 1):
        a, b = m[t], m[t + 1]
        prof = []
        for s in shifts:
            # overlap of b with a displaced by s cells along `axis`
            if s >= 0:
                sa = np.take(a, range(0, a.shape[axis] - s), axis=axis)
                sb = np.take(b, range(s, b.shape[axis]), axis=axis)
            else:
                sa = np.take(a, range(-s, a.shape[axis]), axis=axis)
                sb = np.take(b, range(0, b.shape[axis] + s), axis=axis)
            prof.append((sa * sb).mean())
        prof = np.array(prof)
        if prof.sum() > 0:
            flows.append(float((shifts * prof).sum() / prof.sum()))
    return float(np.mean(flows)) if flows else 0.0
