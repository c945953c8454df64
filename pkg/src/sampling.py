"""
Categorical decoding strategies used by the rollout engine: nucleus (top-p), plain softmax sampling and greedy.
All draws come from a numpy Generator so a seeded rollout is reproducible.
"""
import numpy as np

from src.errors import ConfigurationError, SamplingError

STRATEGIES = ("nucleus", "softmax", "greedy")
DEFAULT_TOP_P = 0.95


def _normalized(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise SamplingError(f"expected a non-empty 1-d distribution, got shape {probs.shape}")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise SamplingError("distribution has negative or non-finite entries")
    total = probs.sum()
    if total <= 0:
        raise SamplingError("distribution has no mass")
    return probs / total


def nucleus_filter(probs, p=DEFAULT_TOP_P):
    """
    Keep the smallest set of most likely classes whose mass reaches p and renormalize.

    Parameters:
    - probs (ndarray): Distribution over classes.
    - p (float): Mass threshold in (0, 1].

    Returns:
    - ndarray: Renormalized distribution, zero outside the nucleus.
    """
    if not 0 < p <= 1:
        raise ConfigurationError(f"top_p must be in (0, 1], got {p}")
    probs = _normalized(probs)
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    size = min(int(np.searchsorted(cumulative, p, side="left")) + 1, len(probs))
    filtered = np.zeros_like(probs)
    filtered[order[:size]] = probs[order[:size]]
    return filtered / filtered.sum()


def sample(probs, strategy="softmax", rng=None, p=DEFAULT_TOP_P):
    """
    Draw one class index.

    Parameters:
    - probs (ndarray): Distribution over classes (renormalized if needed).
    - strategy (str): "nucleus", "softmax" or "greedy".
    - rng (numpy.random.Generator): Source of randomness; greedy draws nothing.
    - p (float): Nucleus threshold.

    Returns:
    - int: The sampled index.
    """
    if strategy == "greedy":
        # argmax returns the first maximum
        return int(np.argmax(_normalized(probs)))
    if strategy == "nucleus":
        probs = nucleus_filter(probs, p)
    elif strategy == "softmax":
        probs = _normalized(probs)
    else:
        raise ConfigurationError(f"unknown sampling strategy '{strategy}', expected one of {STRATEGIES}")
    if rng is None:
        rng = np.random.default_rng()
    return int(rng.choice(len(probs), p=probs))


def sample_rows(probs, strategy="softmax", rng=None, p=DEFAULT_TOP_P):
    """Sample one index per row of a (N, C) matrix, rows in order."""
    return np.array([sample(row, strategy, rng, p) for row in np.atleast_2d(probs)], dtype=np.int64)
