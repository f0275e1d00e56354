"""Real-time engine: sample-in/sample-out causal stream plus latency math.

The engine consumes one hop (L/2 samples per channel) per call and emits
one hop of enhanced output. Emission runs one hop behind the input: the
newest frame only completes when the following hop arrives, so the first
call returns silence and ``flush`` drains the final pending hop. The
output timeline is the delay-and-sum target timeline, which already
embeds the steering compensation delay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .framing import FrameSequence, overlap_add, segment
from .geometry import MultichannelBuffer, SteeringPlan, apply_steering, fir_block
from .model import ModelConfig, ModelParams, ModelState, forward_frame, forward_sequence


@dataclass
class LatencyReport:
    """Algorithmic latency breakdown in milliseconds."""

    frame_latency_ms: float
    frac_filter_latency_ms: float
    algorithmic_total_ms: float
    max_compute_budget_ms: float   # one hop of wall time per hop of audio


def latency_report(config: ModelConfig, frac_taps: int | None = None,
                   sample_rate: float | None = None) -> LatencyReport:
    """Frame latency L/f plus the fixed fractional-filter delay (M-1)/2/f.

    The compute budget is the hop duration: a real-time implementation
    must process each hop faster than it plays out.
    """
    m = config.frac_taps if frac_taps is None else frac_taps
    fs = config.sample_rate if sample_rate is None else sample_rate
    frame_ms = config.frame_len * 1000.0 / fs
    frac_ms = ((m - 1) // 2) * 1000.0 / fs
    return LatencyReport(frame_ms, frac_ms, frame_ms + frac_ms,
                         (config.frame_len // 2) * 1000.0 / fs)


class StreamState:
    """All per-stream mutable state; params and plan are shared immutably.

    Size is fixed at creation (delay lines, one-hop carries, norm windows,
    GRU hiddens) and independent of how much audio flows through.
    """

    def __init__(self, params: ModelParams, plan: SteeringPlan, channels: int):
        if plan.channels != channels:
            raise ValueError(f"plan has {plan.channels} channels, stream needs {channels}")
        self.params = params
        self.plan = plan
        self.channels = channels
        self.hop = params.config.frame_len // 2
        m = plan.frac_taps.shape[1] if channels > 1 else plan.taps
        self._delay_carries = [np.zeros(int(plan.ref_comp_delay))]
        self._fir_prefixes = [None]
        for i in range(1, channels):
            self._delay_carries.append(np.zeros(int(plan.int_delays[i - 1])))
            self._fir_prefixes.append(np.zeros(m - 1))
        self._prev_hop = np.zeros((channels, self.hop))
        self._have_prev = False
        self._ola_carry = np.zeros(self.hop)
        self.model_state = ModelState.create(params.config, channels)
        self.frames_processed = 0

    def reset(self):
        for arr in self._delay_carries:
            arr[:] = 0.0
        for arr in self._fir_prefixes:
            if arr is not None:
                arr[:] = 0.0
        self._prev_hop[:] = 0.0
        self._have_prev = False
        self._ola_carry[:] = 0.0
        self.model_state.reset()
        self.frames_processed = 0


def create_stream(params: ModelParams, plan: SteeringPlan, channels: int) -> StreamState:
    """Fresh zeroed stream bound to immutable params and steering plan."""
    return StreamState(params, plan, channels)


def reset(state: StreamState):
    """Return the stream to its freshly created state."""
    state.reset()


def _steer_hop(state: StreamState, hop: np.ndarray) -> np.ndarray:
    """Incrementally steered hop, bit-identical to batch apply_steering."""
    out = np.empty_like(hop)
    for c in range(state.channels):
        carry = state._delay_carries[c]
        d = carry.shape[0]
        if d:
            joined = np.concatenate([carry, hop[c]])
            delayed = joined[: state.hop]
            state._delay_carries[c] = joined[state.hop:]
        else:
            delayed = hop[c]
        if c == 0:
            out[c] = delayed
        else:
            taps = state.plan.frac_taps[c - 1]
            out[c] = fir_block(taps, delayed, state._fir_prefixes[c])
            joined = np.concatenate([state._fir_prefixes[c], delayed])
            state._fir_prefixes[c] = joined[joined.shape[0] - (taps.shape[0] - 1):]
    return out


def push_pull(state: StreamState, hop_in: np.ndarray) -> np.ndarray:
    """Feed one hop of raw input, receive one hop of enhanced output.

    Output hop j is emitted on call j+1 (the frame ending at hop j only
    completes then); the first call returns silence. Per-call work is
    constant in stream length.
    """
    hop_in = np.atleast_2d(np.asarray(hop_in, dtype=np.float64))
    if hop_in.shape != (state.channels, state.hop):
        raise ValueError(f"expected one hop of shape ({state.channels}, {state.hop})")
    steered = _steer_hop(state, hop_in)
    if not state._have_prev:
        state._prev_hop = steered
        state._have_prev = True
        return np.zeros(state.hop)
    frame = np.concatenate([state._prev_hop, steered], axis=1)
    state._prev_hop = steered
    est = forward_frame(state.params, frame, state.model_state)
    if state.frames_processed == 0:
        out = est[: state.hop] * 1.0      # head: single frame covers these samples
    else:
        out = (state._ola_carry + est[: state.hop]) * 0.5
    state._ola_carry = est[state.hop:].copy()
    state.frames_processed += 1
    return out


def flush(state: StreamState) -> np.ndarray:
    """Drain the final pending hop (tail samples covered by one frame only)."""
    if state.frames_processed == 0:
        return np.zeros(state.hop)
    out = state._ola_carry * 1.0
    state._ola_carry = np.zeros(state.hop)
    return out


def _pad_to_hops(samples: np.ndarray, hop: int) -> np.ndarray:
    t = samples.shape[-1]
    hops = max(int(np.ceil(t / hop)), 2)
    if hops * hop == t:
        return samples
    pad = np.zeros(samples.shape[:-1] + (hops * hop - t,))
    return np.concatenate([samples, pad], axis=-1)


def enhance_offline(params: ModelParams, plan: SteeringPlan, mix: MultichannelBuffer,
                    reuse_shared: bool = True) -> np.ndarray:
    """Whole-utterance processing: batch steering, segmentation, frame loop,
    coverage-normalized overlap-add. Output length equals input length."""
    t = mix.length
    padded = _pad_to_hops(mix.samples, params.config.frame_len // 2)
    aligned = apply_steering(plan, MultichannelBuffer(padded, mix.sample_rate))
    seqs = [segment(aligned.samples[c], params.config.frame_len) for c in range(mix.channels)]
    frames = np.stack([s.frames for s in seqs])
    est_frames, _ = forward_sequence(params, frames, reuse_shared=reuse_shared)
    fs_est = FrameSequence(est_frames, params.config.frame_len, padded.shape[-1])
    return overlap_add(fs_est)[:t]


def enhance_streaming(params: ModelParams, plan: SteeringPlan, mix: MultichannelBuffer) -> np.ndarray:
    """Hop-by-hop processing through push_pull, realigned to the batch
    timeline (drops the one-hop emission lag, flushes the tail)."""
    t = mix.length
    hop = params.config.frame_len // 2
    padded = _pad_to_hops(mix.samples, hop)
    state = create_stream(params, plan, mix.channels)
    chunks = [push_pull(state, padded[:, i: i + hop]) for i in range(0, padded.shape[1], hop)]
    chunks.append(flush(state))
    return np.concatenate(chunks[1:])[:t]
