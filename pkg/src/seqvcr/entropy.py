"""Representation-collapse diagnostics via matrix-based entropy.

For a sequence's layer activations Z (T x d), the linear-kernel Gram
matrix K = Z Z^T is trace-normalized into a spectrum of probabilities;
the order-alpha entropy of that spectrum measures how many principal
directions the token representations actually use. alpha=1 is the
Shannon / Von Neumann limit. All entropies are in nats.

Since Z Z^T and Z^T Z share nonzero eigenvalues, the spectrum is taken
from whichever matrix is smaller.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass
class EntropyProfile:
    """Mean per-layer entropy over a probe batch of sequences."""

    run_id: str
    mean_entropy: list[float]   # one value per captured layer (nats)
    alpha: float
    n_sequences: int
    max_tokens: int             # largest kept T, bounds the entropy by ln


def gram_matrix(z: np.ndarray) -> np.ndarray:
    """Pairwise linear-kernel similarities K = Z Z^T (symmetric PSD)."""
    z = np.asarray(z, dtype=np.float64)
    return z @ z.T


def matrix_entropy(z: np.ndarray, alpha: float = 1.0) -> float:
    """Order-alpha entropy of the trace-normalized Gram spectrum of Z (T x d)."""
    z = np.asarray(z, dtype=np.float64)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    t, d = z.shape
    k = z @ z.T if t <= d else z.T @ z  # same nonzero spectrum, smaller matrix
    tr = np.trace(k)
    if tr == 0.0:
        raise ValueError("all-zero input: trace of the Gram matrix is 0")
    ev = np.linalg.eigvalsh(k)
    ev = np.where(ev < 1e-10 * tr, 0.0, ev)
    p = ev / ev.sum()
    if alpha == 1.0:
        nz = p[p > 0]
        return float(-(nz * np.log(nz)).sum())
    return float(np.log((p[p > 0] ** alpha).sum()) / (1.0 - alpha))


def layer_entropy_profile(model, sequences, alpha: float = 1.0,
                          pad_id: int | None = None, run_id: str = "run") -> EntropyProfile:
    """Per-layer entropies averaged over sequences.

    sequences: iterable of 1-D token id arrays. Padding positions (when
    pad_id is given) are dropped from each sequence's activations before
    the entropy is taken.
    """
    sums = None
    count = 0
    max_t = 0
    for seq in sequences:
        seq = np.asarray(seq)
        keep = np.ones(len(seq), dtype=bool) if pad_id is None else (seq != pad_id)
        res = model.forward(seq[keep] if not keep.all() else seq)
        vals = [matrix_entropy(act.data, alpha) for act in res.layer_activations]
        max_t = max(max_t, int(keep.sum()))
        if sums is None:
            sums = np.zeros(len(vals))
        sums += vals
        count += 1
    if count == 0:
        raise ValueError("probe batch is empty")
    return EntropyProfile(run_id=run_id, mean_entropy=(sums / count).tolist(),
                          alpha=alpha, n_sequences=count, max_tokens=max_t)


def entropy_histogram(profiles: list[EntropyProfile], n_bins: int = 20,
                      upper: float | None = None):
    """Fixed-width bins over [0, upper]; counts per layer across profiles.

    upper defaults to ln(max token count) over the profiles. Returns
    (bin_edges, {layer: counts}).
    """
    if not profiles:
        raise ValueError("no profiles given")
    if upper is None:
        upper = float(np.log(max(max(p.max_tokens, 2) for p in profiles)))
    edges = np.linspace(0.0, upper, n_bins + 1)
    n_layers = len(profiles[0].mean_entropy)
    counts = {l: np.zeros(n_bins, dtype=int) for l in range(n_layers)}
    for p in profiles:
        for l, v in enumerate(p.mean_entropy):
            i = min(int(np.searchsorted(edges, v, side="right")) - 1, n_bins - 1)
            i = max(i, 0)
            counts[l][i] += 1
    return edges, counts


def write_profile_csv(path, profiles: list[EntropyProfile]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "layer", "mean_entropy_nats", "alpha", "n_sequences"])
        for p in profiles:
            for layer, v in enumerate(p.mean_entropy):
                w.writerow([p.run_id, layer, repr(v), p.alpha, p.n_sequences])


def write_histogram_csv(path, edges, counts):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "bin_lo", "bin_hi", "count"])
        for layer in sorted(counts):
            for i, c in enumerate(counts[layer]):
                w.writerow([layer, repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
