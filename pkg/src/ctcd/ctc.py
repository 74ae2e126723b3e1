"""CTC scoring, loss, decoding and a brute-force reference.

Conventions used throughout the package:

* a posterior grid is a ``(T, K)`` array of row-stochastic frame posteriors
  over ``K = |Y| + 1`` classes;
* the blank is always the last class, ``K - 1``;
* label sequences are tuples of ints in ``[0, K - 1)``.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Sequence

import numpy as np

from ctcd.errors import ConfigError, InfeasibleTargetError, UsageError
from ctcd.numcore import (
    DenseArray,
    add,
    concat,
    log_softmax,
    logsumexp,
    matmul,
    mul,
    reshape,
    scale,
    slice_,
    sum_,
)

Labels = tuple[int, ...]

# stands in for log(0) so every tape value stays finite
NEG = -1e30


def blank_of(num_classes: int) -> int:
    return num_classes - 1


def collapse(path: Sequence[int], blank: int) -> Labels:
    """Merge runs of repeated labels, then drop blanks."""
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return tuple(out)


def min_frames(target: Sequence[int]) -> int:
    """Shortest path length that collapses to ``target``."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def check_grid(grid: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[1] < 2:
        raise ConfigError(f"posterior grid must be (T, K>=2), got {grid.shape}")
    if np.any(grid < 0) or np.any(np.abs(grid.sum(axis=1) - 1.0) > atol):
        raise ConfigError("posterior grid rows must be non-negative and sum to 1")
    return grid


def _check_target(target: Sequence[int], num_classes: int) -> Labels:
    target = tuple(int(y) for y in target)
    if any(not 0 <= y < num_classes - 1 for y in target):
        raise ConfigError(f"target labels must lie in [0, {num_classes - 1}); got {target}")
    return target


# -- brute force -----------------------------------------------------------------


def path_distribution(grid: np.ndarray, max_paths: int = 10**7) -> dict[Labels, float]:
    """Probability of every collapsed sequence, by enumerating all K**T paths."""
    grid = check_grid(grid)
    t_len, k = grid.shape
    if k**t_len > max_paths:
        raise UsageError(f"{k}**{t_len} paths exceeds enumeration budget {max_paths}")
    blank = blank_of(k)
    dist: dict[Labels, float] = {}
    for path in itertools.product(range(k), repeat=t_len):
        p = 1.0
        for t, c in enumerate(path):
            p *= grid[t, c]
        key = collapse(path, blank)
        dist[key] = dist.get(key, 0.0) + p
    return dist


def brute_force_log_prob(grid: np.ndarray, target: Sequence[int], max_paths: int = 10**7) -> float:
    """ln of the summed probability of all paths collapsing to ``target``."""
    grid = check_grid(grid)
    target = _check_target(target, grid.shape[1])
    p = path_distribution(grid, max_paths).get(target, 0.0)
    return math.log(p) if p > 0 else -math.inf


# -- loss ------------------------------------------------------------------------


def _transition_tables(targets: list[Labels], k: int, s_len: int):
    blank = blank_of(k)
    b = len(targets)
    onehot = np.zeros((b, k, s_len))
    init = np.full((b, 1, s_len), NEG)
    skip = np.full((b, 1, s_len), NEG)
    final = np.full((b, 1, s_len), NEG)
    for i, tgt in enumerate(targets):
        ext = [blank]
        for y in tgt:
            ext += [y, blank]
        for s, c in enumerate(ext):
            onehot[i, c, s] = 1.0
            if s >= 2 and c != blank and c != ext[s - 2]:
                skip[i, 0, s] = 0.0
        init[i, 0, : min(2, len(ext))] = 0.0
        final[i, 0, max(0, len(ext) - 2) : len(ext)] = 0.0
    return onehot, init, skip, final


def ctc_loss(logits: DenseArray, targets, weights=None) -> DenseArray:
    """Negative log-likelihood of ``targets`` under CTC, summed over the batch.

    ``logits`` is ``(T, K)`` with one target sequence, or ``(B, T, K)`` with a
    list of B targets. Optional ``weights`` (one per utterance) scale each
    term of the sum. The log-space forward recursion is built from tape
    primitives, so gradients come from ``backward``.
    """
    if logits.ndim == 2:
        logits = reshape(logits, (1,) + logits.shape)
        targets = [targets]
    b, t_len, k = logits.shape
    if len(targets) != b:
        raise ConfigError(f"{len(targets)} targets for batch of {b}")
    targets = [_check_target(tgt, k) for tgt in targets]
    for tgt in targets:
        need = min_frames(tgt)
        if need > t_len:
            raise InfeasibleTargetError(f"target of length {len(tgt)} needs {need} frames, input has {t_len}")

    s_len = max(3, 2 * max(len(tgt) for tgt in targets) + 1)
    onehot, init, skip, final = _transition_tables(targets, k, s_len)
    pad1 = np.full((b, 1, 1), NEG)
    pad2 = np.full((b, 1, 2), NEG)

    emit = matmul(log_softmax(logits, axis=-1), onehot)  # (B, T, S)
    alpha = add(slice_(emit, (slice(None), slice(0, 1))), init)
    for t in range(1, t_len):
        stay = alpha
        step = concat([pad1, slice_(alpha, (slice(None), slice(None), slice(None, -1)))], axis=2)
        jump = concat([pad2, slice_(alpha, (slice(None), slice(None), slice(None, -2)))], axis=2)
        jump = add(jump, skip)
        merged = logsumexp(concat([stay, step, jump], axis=1), axis=1, keepdims=True)
        alpha = add(merged, slice_(emit, (slice(None), slice(t, t + 1))))
    loglik = logsumexp(add(alpha, final), axis=2)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (b,):
            raise ConfigError(f"expected {b} weights, got shape {w.shape}")
        loglik = mul(loglik, w.reshape(b, 1))
    return scale(sum_(loglik), -1.0)


# -- decoding --------------------------------------------------------------------


def greedy_decode(grid: np.ndarray) -> Labels:
    """Collapse of the per-frame argmax; ties go to the lowest class index."""
    grid = np.asarray(grid, dtype=np.float64)
    return collapse(np.argmax(grid, axis=1), blank_of(grid.shape[1]))


def _lae(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    return max(a, b) + math.log1p(math.exp(-abs(a - b)))


def beam_nbest(grid: np.ndarray, beam_width: int = 8, n: int = 5) -> list[tuple[Labels, float]]:
    """Prefix beam search (no language model) returning up to ``n`` hypotheses.

    Scores are exact prefix log-probabilities over all surviving paths. The
    list is sorted by descending log-prob; equal scores are ordered by the
    label tuple, so the shorter/lower sequence (e.g. the empty one) wins.
    """
    if not beam_width >= n >= 1:
        raise UsageError(f"need beam_width >= n >= 1, got beam_width={beam_width}, n={n}")
    grid = np.asarray(grid, dtype=np.float64)
    k = grid.shape[1]
    blank = blank_of(k)
    with np.errstate(divide="ignore"):
        logp = np.log(grid)

    def rank(item):
        prefix, (pb, pnb) = item
        return (-_lae(pb, pnb), prefix)

    beams: dict[Labels, tuple[float, float]] = {(): (0.0, -math.inf)}
    for t in range(grid.shape[0]):
        nxt: dict[Labels, list[float]] = {}

        def slot(prefix):
            return nxt.setdefault(prefix, [-math.inf, -math.inf])

        for prefix, (pb, pnb) in beams.items():
            total = _lae(pb, pnb)
            cur = slot(prefix)
            cur[0] = _lae(cur[0], total + logp[t, blank])
            for c in range(k - 1):
                lp = logp[t, c]
                if lp == -math.inf:
                    continue
                ext = slot(prefix + (c,))
                if prefix and prefix[-1] == c:
                    cur[1] = _lae(cur[1], pnb + lp)
                    ext[1] = _lae(ext[1], pb + lp)
                else:
                    ext[1] = _lae(ext[1], total + lp)
        ranked = sorted(((p, tuple(v)) for p, v in nxt.items()), key=rank)
        beams = dict(ranked[:beam_width])

    out = []
    for prefix, (pb, pnb) in sorted(beams.items(), key=rank):
        score = _lae(pb, pnb)
        if score > -math.inf:
            out.append((prefix, score))
    return out[:n]
