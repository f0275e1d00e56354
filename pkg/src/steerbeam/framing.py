"""Rectangular 50%-overlap framing and coverage-normalized overlap-add.

Frames are rectangular (no analysis taper); overlap-add divides each
output sample by the number of frames covering it, which makes
segment -> overlap_add an exact round trip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FrameSequence:
    """K x L frame matrix plus the bookkeeping needed to invert it."""

    frames: np.ndarray   # (K, L)
    frame_len: int
    orig_len: int        # true signal length before tail zero-padding

    @property
    def hop(self) -> int:
        return self.frame_len // 2

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def segment(signal: np.ndarray, frame_len: int) -> FrameSequence:
    """Split into frames of ``frame_len`` at 50% hop; frame k starts at k*L/2.

    Signals shorter than one frame are zero-padded to a single frame, and
    the last frame is zero-padded as needed; the true length is recorded
    and restored by overlap_add.
    """
    if frame_len % 2 != 0 or frame_len < 2:
        raise ValueError("frame length must be even and >= 2")
    signal = np.asarray(signal, dtype=np.float64).reshape(-1)
    hop = frame_len // 2
    t = signal.shape[0]
    if t <= frame_len:
        k = 1
    else:
        k = int(np.ceil((t - frame_len) / hop)) + 1
    padded = np.zeros((k - 1) * hop + frame_len)
    padded[:t] = signal
    idx = np.arange(k)[:, None] * hop + np.arange(frame_len)[None, :]
    return FrameSequence(padded[idx], frame_len, t)


def coverage(num_frames: int, frame_len: int) -> np.ndarray:
    """Number of frames covering each sample of the overlap-add span."""
    hop = frame_len // 2
    cov = np.zeros((num_frames - 1) * hop + frame_len)
    for k in range(num_frames):
        cov[k * hop: k * hop + frame_len] += 1.0
    return cov


def overlap_add(frames: FrameSequence) -> np.ndarray:
    """Reconstruct the signal: sum frames at their offsets, divide by coverage."""
    f = frames.frames
    k, length = f.shape
    hop = frames.hop
    acc = np.zeros((k - 1) * hop + length)
    for i in range(k):
        acc[i * hop: i * hop + length] += f[i]
    acc /= coverage(k, length)
    return acc[: frames.orig_len]


def overlap_add_grad(grad_signal: np.ndarray, num_frames: int, frame_len: int) -> np.ndarray:
    """Gradient of overlap_add with respect to the frame matrix.

    ``grad_signal`` has the trimmed output length; samples lost to
    trimming contribute nothing.
    """
    hop = frame_len // 2
    span = (num_frames - 1) * hop + frame_len
    g = np.zeros(span)
    g[: grad_signal.shape[0]] = grad_signal
    g /= coverage(num_frames, frame_len)
    idx = np.arange(num_frames)[:, None] * hop + np.arange(frame_len)[None, :]
    return g[idx]


class HopFramer:
    """Streaming framer: feed one hop at a time, get complete frames back.

    Emits frame k = [hop k-1, hop k] once hop k arrives, bit-identical to
    batch segmentation of the concatenated input.
    """

    def __init__(self, frame_len: int):
        if frame_len % 2 != 0 or frame_len < 2:
            raise ValueError("frame length must be even and >= 2")
        self.frame_len = frame_len
        self._prev = None

    def push(self, hop: np.ndarray):
        hop = np.asarray(hop, dtype=np.float64)
        if hop.shape[-1] != self.frame_len // 2:
            raise ValueError("expected exactly one hop of samples")
        if self._prev is None:
            self._prev = hop.copy()
            return None
        frame = np.concatenate([self._prev, hop], axis=-1)
        self._prev = hop.copy()
        return frame

    def reset(self):
        self._prev = None
