"""Array geometry, fractional-delay steering, and delay-and-sum.

The steering chain works entirely in samples: geometry gives per-channel
time differences of arrival (TDOAs) relative to the reference channel,
each TDOA is split into an integer delay plus a fractional remainder, and
the fractional part is realized with a short windowed-sinc FIR filter.
Channel 0 is by convention the microphone farthest from the source, so
every TDOA is nonnegative and all delay filters stay causal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_SOUND = 343.0  # m/s

# minimum source/mic separation before geometry is considered degenerate
_MIN_SOURCE_DISTANCE_M = 1e-3


@dataclass
class MultichannelBuffer:
    """C x T block of audio samples plus its sample rate."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a (channels, time) matrix")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class ScenePose:
    """Source and microphone positions that determine steering delays."""

    source_pos: np.ndarray          # (3,) meters
    mic_pos: np.ndarray             # (C, 3) meters
    sample_rate: float              # Hz
    speed: float = SPEED_OF_SOUND   # m/s

    def __post_init__(self):
        self.source_pos = np.asarray(self.source_pos, dtype=np.float64).reshape(3)
        self.mic_pos = np.atleast_2d(np.asarray(self.mic_pos, dtype=np.float64))
        if self.mic_pos.shape[1] != 3:
            raise ValueError("mic_pos must be (C, 3)")
        if self.mic_pos.shape[0] < 1:
            raise ValueError("need at least one microphone")
        if not (np.all(np.isfinite(self.source_pos)) and np.all(np.isfinite(self.mic_pos))):
            raise ValueError("positions must be finite")
        if self.sample_rate <= 0 or self.speed <= 0:
            raise ValueError("sample_rate and speed must be positive")

    @property
    def channels(self) -> int:
        return self.mic_pos.shape[0]

    def mic_distances(self) -> np.ndarray:
        return np.linalg.norm(self.source_pos[None, :] - self.mic_pos, axis=1)


@dataclass
class SteeringPlan:
    """Per-channel delays realizing the steer toward the source.

    Channels 1..C-1 get an integer delay plus a fractional-delay FIR of
    length ``taps``; channel 0 (the reference) gets only the fixed
    ``ref_comp_delay`` that compensates the FIR group delay (M-1)/2.
    """

    int_delays: np.ndarray      # (C-1,) nonnegative ints
    frac_delays: np.ndarray     # (C-1,) in [0, 1)
    frac_taps: np.ndarray       # (C-1, M)
    ref_comp_delay: int
    taps: int = field(init=False)

    def __post_init__(self):
        self.int_delays = np.asarray(self.int_delays, dtype=np.int64).reshape(-1)
        self.frac_delays = np.asarray(self.frac_delays, dtype=np.float64).reshape(-1)
        self.frac_taps = np.atleast_2d(np.asarray(self.frac_taps, dtype=np.float64))
        n = self.int_delays.shape[0]
        if n == 0:
            self.frac_taps = self.frac_taps.reshape(0, max(self.frac_taps.shape[-1], 1))
        if self.frac_delays.shape[0] != n or self.frac_taps.shape[0] != n:
            raise ValueError("per-channel arrays disagree on channel count")
        if np.any(self.int_delays < 0):
            raise ValueError("integer delays must be nonnegative")
        if np.any((self.frac_delays < 0) | (self.frac_delays >= 1)):
            raise ValueError("fractional delays must lie in [0, 1)")
        if n > 0 and np.any(np.abs(self.frac_taps.sum(axis=1) - 1.0) > 1e-3):
            raise ValueError("fractional filters must have unit DC gain")
        self.taps = int(self.frac_taps.shape[1]) if n > 0 else 2 * int(self.ref_comp_delay) + 1

    @property
    def channels(self) -> int:
        return self.int_delays.shape[0] + 1


def ordered_channel_mean(x: np.ndarray) -> np.ndarray:
    """Mean over the leading (channel) axis with a canonical summation order.

    Summing in sorted order makes the result exactly invariant to channel
    permutation, which plain reduction is not for C > 2 (float addition is
    commutative but not associative).
    """
    x = np.asarray(x)
    if x.shape[0] == 1:
        return x[0].copy()
    return np.add.reduce(np.sort(x, axis=0), axis=0) / x.shape[0]


def choose_reference(scene: ScenePose) -> np.ndarray:
    """Permutation placing the mic farthest from the source first.

    Ties go to the lowest original index; the remaining channels keep
    their relative order.
    """
    dists = scene.mic_distances()
    far = int(np.argmax(dists))
    rest = [i for i in range(scene.channels) if i != far]
    return np.array([far] + rest, dtype=np.int64)


def compute_tdoa(scene: ScenePose) -> np.ndarray:
    """TDOAs in samples between the reference mic and channels 1..C-1.

    Requires channel 0 to already be the farthest microphone (apply
    ``choose_reference`` first) so that all values are nonnegative.
    """
    if scene.channels < 2:
        raise ValueError("TDOAs need at least two microphones")
    dists = scene.mic_distances()
    if np.any(dists < _MIN_SOURCE_DISTANCE_M):
        raise ValueError("source coincides with a microphone position")
    tdoas = (scene.sample_rate / scene.speed) * (dists[0] - dists[1:])
    if np.any(tdoas < 0):
        raise ValueError("negative TDOA: channel 0 is not the farthest microphone")
    return tdoas


def design_fractional_filter(frac: float, taps: int) -> np.ndarray:
    """Windowed-sinc FIR approximating a delay of (taps-1)/2 + frac samples.

    The sinc is weighted with a Blackman-shaped window centered on the
    delay point (cosine period taps+1, so the window reaches zero just
    outside the filter support) and normalized to unit tap sum. At
    frac = 0 this degenerates to an exact unit impulse.
    """
    if taps % 2 == 0 or taps < 3:
        raise ValueError("tap count must be odd and >= 3")
    if not (0.0 <= frac < 1.0):
        raise ValueError("fractional delay must lie in [0, 1)")
    center = (taps - 1) // 2
    x = np.arange(taps, dtype=np.float64) - center - frac
    window = 0.42 + 0.5 * np.cos(2 * np.pi * x / (taps + 1)) + 0.08 * np.cos(4 * np.pi * x / (taps + 1))
    h = np.sinc(x) * np.maximum(window, 0.0)
    return h / h.sum()


def build_steering_plan(tdoas: np.ndarray, taps: int = 17) -> SteeringPlan:
    """Split TDOAs into integer + fractional delay filters for channels >= 1."""
    tdoas = np.asarray(tdoas, dtype=np.float64).reshape(-1)
    if np.any(tdoas < 0):
        raise ValueError("TDOAs must be nonnegative (reference-permute the scene first)")
    if not np.all(np.isfinite(tdoas)):
        raise ValueError("TDOAs must be finite")
    int_delays = np.floor(tdoas).astype(np.int64)
    frac_delays = tdoas - int_delays
    frac_taps = np.stack([design_fractional_filter(f, taps) for f in frac_delays]) \
        if tdoas.size else np.zeros((0, taps))
    return SteeringPlan(int_delays, frac_delays, frac_taps, ref_comp_delay=(taps - 1) // 2)


def fir_block(taps: np.ndarray, block: np.ndarray, prefix: np.ndarray) -> np.ndarray:
    """Causal FIR over one block given the previous len(taps)-1 input samples.

    Accumulates tap-by-tap in a fixed order so block-wise (streaming) and
    whole-signal applications produce bit-identical results.
    """
    m = taps.shape[0]
    x = np.concatenate([prefix, block])
    out = np.zeros(block.shape[0])
    for j in range(m):
        out += taps[j] * x[m - 1 - j: m - 1 - j + block.shape[0]]
    return out


def integer_delay(signal: np.ndarray, delay: int) -> np.ndarray:
    """Shift right by ``delay`` samples: zero-padded head, truncated tail."""
    if delay == 0:
        return signal.copy()
    out = np.zeros_like(signal)
    out[delay:] = signal[:-delay]
    return out


def apply_steering(plan: SteeringPlan, buf: MultichannelBuffer) -> MultichannelBuffer:
    """Align all channels toward the source.

    Channel 0 is delayed by the plan's compensation delay; channel i >= 1
    is delayed by its integer delay and filtered by its fractional-delay
    FIR. Causal: output sample t depends only on input samples <= t.
    Output length equals input length.
    """
    if plan.channels != buf.channels:
        raise ValueError(f"plan has {plan.channels} channels, buffer has {buf.channels}")
    out = np.empty_like(buf.samples)
    out[0] = integer_delay(buf.samples[0], plan.ref_comp_delay)
    for i in range(1, buf.channels):
        shifted = integer_delay(buf.samples[i], int(plan.int_delays[i - 1]))
        taps = plan.frac_taps[i - 1]
        out[i] = fir_block(taps, shifted, np.zeros(taps.shape[0] - 1))
    return MultichannelBuffer(out, buf.sample_rate)


def delay_and_sum(aligned: MultichannelBuffer) -> np.ndarray:
    """Elementwise mean across channels of an already-aligned buffer."""
    return ordered_channel_mean(aligned.samples)


def make_target(plan: SteeringPlan, clean: MultichannelBuffer) -> np.ndarray:
    """Delay-and-summed clean component: the training/eval reference signal.

    Runs the exact same steering code path as the mixture so target and
    input alignment cannot diverge.
    """
    return delay_and_sum(apply_steering(plan, clean))


def perturb_tdoa(scene: ScenePose, max_angle_deg: float, rng_seed) -> np.ndarray:
    """TDOAs recomputed after randomly mis-pointing the source direction.

    The apparent source is rotated about the array centroid by azimuth and
    elevation errors drawn independently and uniformly from
    [0, max_angle_deg] with random sign. Results are clamped at zero so
    the steering filters stay causal. Deterministic given the seed.
    """
    if max_angle_deg < 0:
        raise ValueError("max_angle_deg must be nonnegative")
    rng = np.random.default_rng(rng_seed)
    mags = np.deg2rad(rng.uniform(0.0, max_angle_deg, size=2))
    signs = rng.integers(0, 2, size=2) * 2 - 1
    d_az, d_el = mags * signs

    centroid = scene.mic_pos.mean(axis=0)
    v = scene.source_pos - centroid
    r = np.linalg.norm(v)
    az = np.arctan2(v[1], v[0]) + d_az
    el = np.clip(np.arcsin(np.clip(v[2] / r, -1.0, 1.0)) + d_el, -np.pi / 2, np.pi / 2)
    u = centroid + r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])

    moved = ScenePose(u, scene.mic_pos, scene.sample_rate, scene.speed)
    return np.maximum(compute_tdoa(moved), 0.0)
