"""NumPy implementations of the hot kernels.

These are the fallback used when the compiled extension is unavailable. Both
backends implement the same contracts:

  conv1d_fwd / conv1d_bwd       cross-correlation with "same" zero padding
  masked_softmax_fwd / _bwd     row softmax over the last axis with optional
                                excluded entries (weight exactly 0 there)

All arrays are C-contiguous float64. Reductions run over fixed-length axes
(channels*taps, feature dim) so results do not depend on how long the
sequence axis is - a property the incremental decoder relies on.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv1d_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (B,Cin,L), w (Cout,Cin,s), b (Cout,) -> (B,Cout,L)."""
    s = w.shape[2]
    pad = (s - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, s, axis=2)          # (B,Cin,L,s)
    y = np.tensordot(win, w, axes=([1, 3], [1, 2]))   # (B,L,Cout)
    y = np.ascontiguousarray(y.transpose(0, 2, 1))
    y += b[None, :, None]
    return y


def conv1d_bwd(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (gx, gw, gb) for conv1d_fwd."""
    s = w.shape[2]
    pad = (s - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, s, axis=2)                    # (B,Cin,L,s)
    gb = gy.sum(axis=(0, 2))
    gw = np.tensordot(gy, win, axes=([0, 2], [0, 2]))           # (Cout,Cin,s)
    gyp = np.pad(gy, ((0, 0), (0, 0), (pad, pad)))
    gwin = sliding_window_view(gyp, s, axis=2)                  # (B,Cout,L,s)
    wf = np.ascontiguousarray(w[:, :, ::-1])
    gx = np.tensordot(gwin, wf, axes=([1, 3], [0, 2]))          # (B,L,Cin)
    gx = np.ascontiguousarray(gx.transpose(0, 2, 1))
    return gx, np.ascontiguousarray(gw), gb


def masked_softmax_fwd(scores: np.ndarray, excluded: np.ndarray | None) -> np.ndarray:
    """Softmax over the last axis; `excluded` entries (bool) get weight 0."""
    if excluded is not None:
        work = np.where(excluded, -np.inf, scores)
    else:
        work = scores
    m = work.max(axis=-1, keepdims=True)
    e = np.exp(work - m)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_bwd(probs: np.ndarray, gprobs: np.ndarray) -> np.ndarray:
    """Gradient of masked_softmax_fwd w.r.t. the scores."""
    inner = (gprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (gprobs - inner)
