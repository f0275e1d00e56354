"""Shoebox-room acoustic simulator (image method) and scene sampling.

Produces multichannel reverberant mixtures with known clean/noise
decompositions, ground-truth TDOAs via the scene geometry, and synthetic
desk-scale source material (harmonic tone bursts, colored noise) in place
of speech corpora.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .geometry import SPEED_OF_SOUND, MultichannelBuffer, ScenePose

_SINC_KERNEL_TAPS = 8     # fractional-sample placement kernel per image
_MAX_AXIS_ORDER = 64


@dataclass
class SceneSpec:
    """Everything needed to render one acoustic scene deterministically."""

    room: np.ndarray                      # (3,) meters
    t60: float                            # seconds
    source: np.ndarray                    # (3,) speech source position
    noise_sources: list                   # list of (3,) positions, 1..4 typical
    mics: np.ndarray                      # (C, 3)
    snr_db: float
    sample_rate: int = 16000
    max_order: int | None = None          # reflections per axis; None = auto from t60
    seed: int = 0
    speed: float = SPEED_OF_SOUND

    def __post_init__(self):
        self.room = np.asarray(self.room, dtype=np.float64).reshape(3)
        self.source = np.asarray(self.source, dtype=np.float64).reshape(3)
        self.noise_sources = [np.asarray(p, dtype=np.float64).reshape(3) for p in self.noise_sources]
        self.mics = np.atleast_2d(np.asarray(self.mics, dtype=np.float64))
        if not (0.0 < self.t60 < 2.0):
            raise ValueError("t60 must lie in (0, 2) seconds")

    def to_pose(self) -> ScenePose:
        return ScenePose(self.source, self.mics, self.sample_rate, self.speed)

    def permuted(self, perm: np.ndarray) -> "SceneSpec":
        """Same scene with microphones reordered (reference selection)."""
        return SceneSpec(self.room, self.t60, self.source, list(self.noise_sources),
                         self.mics[perm], self.snr_db, self.sample_rate,
                         self.max_order, self.seed, self.speed)


@dataclass
class RoomImpulseResponse:
    taps: np.ndarray
    sample_rate: float
    direct_path_delay_samples: float


def t60_to_reflection_coeff(room: np.ndarray, t60: float) -> float:
    """Uniform wall reflection coefficient from Sabine's relation.

    alpha = 0.161 V / (S * T60); beta = sqrt(1 - alpha). Rejects
    combinations where the room is too large for the requested decay.
    """
    if t60 <= 0:
        raise ValueError("t60 must be positive")
    lx, ly, lz = np.asarray(room, dtype=np.float64)
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    alpha = 0.161 * volume / (surface * t60)
    if alpha >= 1.0:
        raise ValueError(f"t60 {t60} s unreachable in this room (Sabine absorption {alpha:.2f} >= 1)")
    return float(np.sqrt(1.0 - alpha))


def _auto_axis_orders(room: np.ndarray, t60: float, speed: float) -> np.ndarray:
    """Reflections per axis so the image cloud covers the full decay tail."""
    reach = 1.1 * speed * t60
    return np.minimum(np.ceil(reach / np.asarray(room)).astype(int) + 1, _MAX_AXIS_ORDER)


def image_method_rir(room, src, mic, reflection_coeff: float, max_order,
                     sample_rate: float, speed: float = SPEED_OF_SOUND,
                     length: int | None = None) -> RoomImpulseResponse:
    """Allen-Berkley image-method impulse response for one src/mic pair.

    Each image source contributes beta**(reflection count) / (4 pi d) at
    delay d*f/s, placed with fractional-sample accuracy through a short
    windowed-sinc kernel. ``max_order`` caps reflections per axis and may
    be a scalar or a 3-vector.
    """
    room = np.asarray(room, dtype=np.float64).reshape(3)
    src = np.asarray(src, dtype=np.float64).reshape(3)
    mic = np.asarray(mic, dtype=np.float64).reshape(3)
    if np.linalg.norm(src - mic) < 1e-3:
        raise ValueError("source and microphone coincide")
    if not 0.0 <= reflection_coeff < 1.0:
        raise ValueError("reflection coefficient must lie in [0, 1)")
    orders = np.broadcast_to(np.asarray(max_order, dtype=int), (3,))
    if np.any(orders < 0):
        raise ValueError("max_order must be nonnegative")

    # mirror indices r and wall-parity bits p per axis; reflection count
    # for (r, p) on axis w is |r + p| + |r|
    axes = []
    for w in range(3):
        q = int(orders[w])
        rng_r = np.arange(-(q // 2 + 1), q // 2 + 2)
        axes.append(rng_r)
    rx, ry, rz, px, py, pz = np.meshgrid(axes[0], axes[1], axes[2],
                                         [0, 1], [0, 1], [0, 1], indexing="ij")
    r = np.stack([rx.ravel(), ry.ravel(), rz.ravel()], axis=1)
    p = np.stack([px.ravel(), py.ravel(), pz.ravel()], axis=1)
    n_refl = np.abs(r + p) + np.abs(r)
    keep = np.all(n_refl <= orders[None, :], axis=1)
    r, p, n_refl = r[keep], p[keep], n_refl[keep]

    pos = (1 - 2 * p) * src[None, :] + 2 * r * room[None, :]
    dist = np.linalg.norm(pos - mic[None, :], axis=1)
    amp = reflection_coeff ** n_refl.sum(axis=1) / (4.0 * np.pi * dist)
    delay = dist * sample_rate / speed

    if length is None:
        length = int(np.ceil(delay.max())) + _SINC_KERNEL_TAPS + 1
    taps = np.zeros(length)
    base = np.floor(delay).astype(int)
    offsets = np.arange(_SINC_KERNEL_TAPS) - (_SINC_KERNEL_TAPS // 2 - 1)
    idx = base[:, None] + offsets[None, :]
    x = idx - delay[:, None]
    half = _SINC_KERNEL_TAPS / 2.0
    kernel = np.sinc(x) * (0.5 + 0.5 * np.cos(np.pi * np.clip(x / half, -1.0, 1.0)))
    kernel /= kernel.sum(axis=1, keepdims=True)
    vals = amp[:, None] * kernel
    ok = (idx >= 0) & (idx < length)
    np.add.at(taps, idx[ok], vals[ok])

    direct = np.linalg.norm(src - mic) * sample_rate / speed
    return RoomImpulseResponse(taps, sample_rate, float(direct))


def render_scene(spec: SceneSpec, speech: np.ndarray, noises: list[np.ndarray]):
    """Convolve sources with their RIRs and mix at the requested SNR.

    Returns (mix, clean, noise) MultichannelBuffers plus a metadata dict;
    mix is computed as clean + noise so the decomposition is exact by
    construction. Noise is scaled so total clean/noise energy across
    channels matches spec.snr_db. Requires at least one second of input.
    """
    speech = np.asarray(speech, dtype=np.float64).reshape(-1)
    if speech.shape[0] < spec.sample_rate:
        raise ValueError("need at least one second of source material")
    if float(speech @ speech) == 0.0:
        raise ValueError("speech input is silent")
    if len(noises) != len(spec.noise_sources):
        raise ValueError("one noise signal per noise source required")

    beta = t60_to_reflection_coeff(spec.room, spec.t60)
    order = spec.max_order if spec.max_order is not None \
        else _auto_axis_orders(spec.room, spec.t60, spec.speed)
    t = speech.shape[0]
    channels = spec.mics.shape[0]
    clean = np.zeros((channels, t))
    noise = np.zeros((channels, t))
    for c in range(channels):
        rir = image_method_rir(spec.room, spec.source, spec.mics[c], beta, order,
                               spec.sample_rate, spec.speed)
        clean[c] = fftconvolve(speech, rir.taps)[:t]
        for j, npos in enumerate(spec.noise_sources):
            rir_n = image_method_rir(spec.room, npos, spec.mics[c], beta, order,
                                     spec.sample_rate, spec.speed)
            nj = np.asarray(noises[j], dtype=np.float64).reshape(-1)
            noise[c] += fftconvolve(nj, rir_n.taps)[:t]

    if spec.noise_sources:
        e_clean = float(np.sum(clean * clean))
        e_noise = float(np.sum(noise * noise))
        if e_noise == 0.0:
            raise ValueError("noise sources produced zero energy")
        noise *= np.sqrt(e_clean / (e_noise * 10.0 ** (spec.snr_db / 10.0)))
    mix = clean + noise

    meta = {"beta": beta, "order": np.broadcast_to(np.asarray(order), (3,)).tolist()}
    return (MultichannelBuffer(mix, spec.sample_rate),
            MultichannelBuffer(clean, spec.sample_rate),
            MultichannelBuffer(noise, spec.sample_rate), meta)


def sample_random_scene(seed: int, *, mics: int | None = None,
                        sample_rate: int = 16000, mic_radius: float = 0.15,
                        max_tries: int = 200) -> SceneSpec:
    """Random scene: room 5-10 m x 5-10 m x 2-4 m, T60 uniform [0.1, 0.5] s,
    mics uniform in a ball around the room center, 1-4 noise sources and the
    speech source at least 0.5 m from every wall, SNR uniform [-5, 15] dB.

    Deterministic given the seed; resamples (bounded) when the Sabine
    inversion rejects a too-large room / too-short T60 combination.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        room = np.array([rng.uniform(5, 10), rng.uniform(5, 10), rng.uniform(2, 4)])
        t60 = rng.uniform(0.1, 0.5)
        c = int(mics) if mics is not None else int(rng.integers(2, 7))
        center = room / 2.0
        dirs = rng.standard_normal((c, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = mic_radius * rng.uniform(0, 1, c) ** (1.0 / 3.0)
        mic_pos = center + dirs * radii[:, None]
        lo, hi = 0.5, room - 0.5
        source = rng.uniform(lo, hi)
        n_noise = int(rng.integers(1, 5))
        noise_pos = [rng.uniform(lo, hi) for _ in range(n_noise)]
        snr = rng.uniform(-5.0, 15.0)
        try:
            t60_to_reflection_coeff(room, t60)
        except ValueError:
            continue
        if np.min(np.linalg.norm(mic_pos - source[None, :], axis=1)) < 0.2:
            continue
        return SceneSpec(room, t60, source, noise_pos, mic_pos, snr,
                         sample_rate=sample_rate, seed=seed)
    raise RuntimeError("could not sample a valid scene")


def synth_tone_bursts(rng: np.random.Generator, num_samples: int, sample_rate: float) -> np.ndarray:
    """Voice-like source: harmonic stack with vibrato, gated by smooth
    on/off bursts so the signal has strong temporal structure."""
    t = np.arange(num_samples) / sample_rate
    f0 = rng.uniform(120.0, 260.0)
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(4.0, 7.0) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sample_rate
    sig = np.zeros(num_samples)
    for k in range(1, 9):
        sig += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
    env = np.zeros(num_samples)
    pos = 0
    while pos < num_samples:
        burst = int(rng.uniform(0.15, 0.45) * sample_rate)
        gap = int(rng.uniform(0.05, 0.25) * sample_rate)
        env[pos: pos + burst] = 1.0
        pos += burst + gap
    # ~12 ms raised-cosine smoothing so bursts do not click
    ramp = max(int(0.012 * sample_rate), 1)
    win = np.hanning(2 * ramp + 1)
    win /= win.sum()
    env = np.convolve(env, win, mode="same")
    sig *= env
    rms = np.sqrt(np.mean(sig * sig))
    return sig / (rms + 1e-12) * 0.1


def synth_colored_noise(rng: np.random.Generator, num_samples: int, sample_rate: float) -> np.ndarray:
    """Stationary colored noise: white noise through a random one-pole lowpass."""
    white = rng.standard_normal(num_samples)
    pole = rng.uniform(0.7, 0.95)
    out = lfilter([1.0 - pole], [1.0, -pole], white)
    rms = np.sqrt(np.mean(out * out))
    return out / (rms + 1e-12) * 0.1
