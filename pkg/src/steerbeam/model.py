"""The mask-estimating beamformer network and its structural accounting.

Per frame and per channel: linear encoder into an N-dimensional latent,
sliding-window layer normalization, a stack of recurrent channel-interaction
blocks (PReLU, channel averaging, partitioned GRU bank on concatenated
local+average features, FC, norm, skip), a sigmoid mask head, and a latent
filter-and-sum decoder back to the time domain.

All learnable tensors are channel-agnostic: one parameter set serves any
microphone count. Per-channel state (GRU hiddens, norm windows) lives in
ModelState.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .geometry import ordered_channel_mean

SLN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    frame_len: int = 64       # L, samples per frame (hop is L/2)
    latent_dim: int = 128     # N
    hidden_dim: int = 256     # H
    partitions: int = 4       # P
    num_blocks: int = 4       # B
    norm_window: int = 1000   # R, frames
    frac_taps: int = 17       # M, steering FIR length
    sample_rate: int = 16000
    share_cells: bool = False     # one GRU cell per block reused across partitions

    def __post_init__(self):
        if min(self.frame_len, self.latent_dim, self.hidden_dim,
               self.partitions, self.num_blocks, self.norm_window) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.frame_len % 2 != 0:
            raise ValueError("frame_len must be even (50% hop)")
        if self.latent_dim % self.partitions or self.hidden_dim % self.partitions:
            raise ValueError("latent_dim and hidden_dim must be divisible by partitions")
        if self.frac_taps % 2 == 0 or self.frac_taps < 1:
            raise ValueError("frac_taps must be odd")

    @property
    def band_in(self) -> int:
        return self.latent_dim // self.partitions

    @property
    def band_hidden(self) -> int:
        return self.hidden_dim // self.partitions


REFERENCE_CONFIG = ModelConfig()


def _cell_index(config: ModelConfig, p: int) -> int:
    return 0 if config.share_cells else p


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor name -> shape map; the single source of truth for
    initialization, counting, gradients, and serialization."""
    length, n, h = config.frame_len, config.latent_dim, config.hidden_dim
    bh, bn = config.band_hidden, config.band_in
    shapes: dict[str, tuple[int, ...]] = {"enc": (length, n)}
    shapes["in_norm.gamma"] = (n,)
    shapes["in_norm.beta"] = (n,)
    for b in range(config.num_blocks):
        shapes[f"block{b}.prelu"] = (n,)
        ncells = 1 if config.share_cells else config.partitions
        for p in range(ncells):
            shapes[f"block{b}.cell{p}.w_ih"] = (3 * bh, 2 * bn)
            shapes[f"block{b}.cell{p}.w_hh"] = (3 * bh, bh)
            shapes[f"block{b}.cell{p}.b_ih"] = (3 * bh,)
            shapes[f"block{b}.cell{p}.b_hh"] = (3 * bh,)
        shapes[f"block{b}.fc.w"] = (h, n)
        shapes[f"block{b}.fc.b"] = (n,)
        shapes[f"block{b}.norm.gamma"] = (n,)
        shapes[f"block{b}.norm.beta"] = (n,)
    shapes["dec"] = (n, length)
    return shapes


def count_params(config: ModelConfig) -> int:
    """Exact number of learnable scalars for the configuration."""
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


@dataclass
class MacReport:
    """Multiply-accumulate accounting, matrix-product MACs only.

    ``local`` covers per-channel work (encoder, GRU products on the local
    feature half and on the hidden state, FC); ``global`` covers work done
    once per frame regardless of channel count (GRU products on the shared
    channel average, reused across channels, and the decoder projection).
    """

    frames_per_second: float
    local_macs_per_frame: int     # per channel
    global_macs_per_frame: int

    @property
    def local_rate(self) -> float:
        return self.local_macs_per_frame * self.frames_per_second

    @property
    def global_rate(self) -> float:
        return self.global_macs_per_frame * self.frames_per_second

    def total_rate(self, channels: int) -> float:
        return self.local_rate * channels + self.global_rate


def count_macs(config: ModelConfig, sample_rate: float | None = None) -> MacReport:
    length, n, h = config.frame_len, config.latent_dim, config.hidden_dim
    p, bh, bn = config.partitions, config.band_hidden, config.band_in
    fs = config.sample_rate if sample_rate is None else sample_rate
    per_block_local = p * (3 * bh * bn + 3 * bh * bh)   # local input half + hidden
    per_block_global = p * (3 * bh * bn)                # shared-average half, once per frame
    local = length * n + config.num_blocks * (per_block_local + h * n)
    glob = config.num_blocks * per_block_global + n * length
    return MacReport(frames_per_second=fs / (length // 2),
                     local_macs_per_frame=local, global_macs_per_frame=glob)


@dataclass
class _CellView:
    w_ih: np.ndarray
    w_hh: np.ndarray
    b_ih: np.ndarray
    b_hh: np.ndarray


@dataclass
class _BlockView:
    prelu: np.ndarray
    cells: list[_CellView]
    fc_w: np.ndarray
    fc_b: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray


class ModelParams:
    """All learnable tensors, stored as a name -> ndarray dict with
    structured per-block views for the forward/backward code."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if list(tensors.keys()) != list(expected.keys()):
            raise ValueError("tensor set does not match the configuration")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ValueError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(tensors[name])):
                raise ValueError(f"tensor {name} contains non-finite values")
        self.config = config
        self.tensors = tensors
        self._build_views()

    def _build_views(self):
        t = self.tensors
        self.enc = t["enc"]
        self.dec = t["dec"]
        self.in_gamma = t["in_norm.gamma"]
        self.in_beta = t["in_norm.beta"]
        self.blocks = []
        for b in range(self.config.num_blocks):
            ncells = 1 if self.config.share_cells else self.config.partitions
            cells = [_CellView(t[f"block{b}.cell{p}.w_ih"], t[f"block{b}.cell{p}.w_hh"],
                               t[f"block{b}.cell{p}.b_ih"], t[f"block{b}.cell{p}.b_hh"])
                     for p in range(ncells)]
            self.blocks.append(_BlockView(t[f"block{b}.prelu"], cells,
                                          t[f"block{b}.fc.w"], t[f"block{b}.fc.b"],
                                          t[f"block{b}.norm.gamma"], t[f"block{b}.norm.beta"]))

    @classmethod
    def init_random(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        """Default initialization: uniform +-sqrt(1/fan_in) for projection
        matrices, per-gate orthogonal recurrent weights, PReLU slopes 0.25,
        norm gain 1 / bias 0, zero biases."""
        rng = np.random.default_rng(seed)
        tensors: dict[str, np.ndarray] = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("gamma",):
                tensors[name] = np.ones(shape)
            elif leaf in ("beta", "b_ih", "b_hh", "b"):
                tensors[name] = np.zeros(shape)
            elif leaf == "prelu":
                tensors[name] = np.full(shape, 0.25)
            elif leaf == "w_hh":
                bh = shape[1]
                gates = []
                for _ in range(3):
                    q, _r = np.linalg.qr(rng.standard_normal((bh, bh)))
                    gates.append(q)
                tensors[name] = np.concatenate(gates, axis=0)
            else:  # enc, dec, fc.w, w_ih: fan_in is the contracted dimension
                fan = shape[0] if name in ("enc", "dec") or leaf == "w" else shape[1]
                bound = np.sqrt(1.0 / fan)
                tensors[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def zero_grads(config: ModelConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(config).items()}


class NormState:
    """Sliding-window statistics for one normalization site.

    Two ring buffers hold per-frame feature sums and squared sums for up
    to R frames per channel; running window totals let each step run in
    O(N) regardless of R.
    """

    def __init__(self, channels: int, window: int):
        self.channels = channels
        self.window = window
        self.buf_sum = np.zeros((channels, window))
        self.buf_sq = np.zeros((channels, window))
        self.tot_sum = np.zeros(channels)
        self.tot_sq = np.zeros(channels)
        self.seen = 0
        # stats of the most recent step, for tape recording
        self.last_mean = None
        self.last_inv_std = None
        self.last_window = 0

    def reset(self):
        self.buf_sum[:] = 0.0
        self.buf_sq[:] = 0.0
        self.tot_sum[:] = 0.0
        self.tot_sq[:] = 0.0
        self.seen = 0
        self.last_mean = None
        self.last_inv_std = None
        self.last_window = 0


def sln_step(x: np.ndarray, state: NormState, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """One step of sliding-window layer normalization.

    Mean and variance pool the last min(k, R) frames across all features
    of this channel; the first frame normalizes over itself alone. Accepts
    (N,) for a single channel or (C, N) matching the state.
    """
    single = x.ndim == 1
    xm = x[None, :] if single else x
    if xm.shape[0] != state.channels:
        raise ValueError("channel count does not match norm state")
    n = xm.shape[1]

    s = xm.sum(axis=1)
    q = (xm * xm).sum(axis=1)
    slot = state.seen % state.window
    if state.seen >= state.window:
        state.tot_sum -= state.buf_sum[:, slot]
        state.tot_sq -= state.buf_sq[:, slot]
    state.buf_sum[:, slot] = s
    state.buf_sq[:, slot] = q
    state.tot_sum += s
    state.tot_sq += q
    state.seen += 1

    r_k = min(state.seen, state.window)
    denom = n * r_k
    mean = state.tot_sum / denom
    var = state.tot_sq / denom - mean * mean
    inv_std = 1.0 / np.sqrt(var + SLN_EPS)
    out = (xm - mean[:, None]) * inv_std[:, None] * gamma + beta

    state.last_mean = mean
    state.last_inv_std = inv_std
    state.last_window = r_k
    return out[0] if single else out


def encode(frame: np.ndarray, enc: np.ndarray) -> np.ndarray:
    """Latent projection z = y @ enc (no bias)."""
    if frame.shape[-1] != enc.shape[0]:
        raise ValueError(f"frame length {frame.shape[-1]} does not match encoder input {enc.shape[0]}")
    return frame @ enc


def channel_average(features: np.ndarray) -> np.ndarray:
    """Elementwise mean over channels (axis 0), permutation-exact."""
    return ordered_channel_mean(features)


def mask_head(features: np.ndarray) -> np.ndarray:
    """Elementwise logistic sigmoid; outputs strictly inside (0, 1)."""
    return expit(features)


def decode_and_sum(masks: np.ndarray, latents: np.ndarray, dec: np.ndarray) -> np.ndarray:
    """Latent filter-and-sum: mean over channels of mask * latent, decoded."""
    if masks.shape != latents.shape:
        raise ValueError("mask and latent shapes must match")
    pooled = ordered_channel_mean(np.atleast_2d(masks * latents))
    return pooled @ dec


def group_gru_step(local: np.ndarray, shared_avg: np.ndarray, hidden: np.ndarray,
                   cells: list[_CellView], reuse_shared: bool = True,
                   tape: list | None = None) -> np.ndarray:
    """One step of the partitioned GRU bank for all channels at once.

    ``local`` is (C, N), ``shared_avg`` is (N,) and identical for every
    channel, ``hidden`` is (C, H). Feature band p goes through cell p (or
    the single shared cell) on the concatenation [local_p, avg_p]. With
    ``reuse_shared`` the input-matrix product against the shared average
    is computed once per frame and reused across channels; disabling it
    recomputes per channel and is bit-identical.

    Returns the new (C, H) hidden bank, which is also the block feature.
    """
    local = np.atleast_2d(local)
    hidden = np.atleast_2d(hidden)
    channels, n = local.shape
    h_total = hidden.shape[1]
    p_count = max(len(cells), h_total // cells[0].w_hh.shape[1])
    bn = n // p_count
    bh = h_total // p_count
    out = np.empty((channels, h_total))
    for p in range(p_count):
        cell = cells[p] if len(cells) > 1 else cells[0]
        if cell.w_ih.shape != (3 * bh, 2 * bn):
            raise ValueError("cell weight shape does not match partition layout")
        lp = local[:, p * bn:(p + 1) * bn]
        ap = shared_avg[p * bn:(p + 1) * bn]
        hp = hidden[:, p * bh:(p + 1) * bh]

        gx = lp @ cell.w_ih[:, :bn].T + cell.b_ih
        if reuse_shared:
            shared_pre = cell.w_ih[:, bn:] @ ap
            gx = gx + shared_pre[None, :]
        else:
            for c in range(channels):
                gx[c] = gx[c] + cell.w_ih[:, bn:] @ ap
        gh = hp @ cell.w_hh.T + cell.b_hh

        r = expit(gx[:, :bh] + gh[:, :bh])
        z = expit(gx[:, bh:2 * bh] + gh[:, bh:2 * bh])
        hn = gh[:, 2 * bh:]
        cand = np.tanh(gx[:, 2 * bh:] + r * hn)
        out[:, p * bh:(p + 1) * bh] = (1.0 - z) * cand + z * hp
        if tape is not None:
            tape.append({"r": r, "z": z, "n": cand, "hn": hn, "h_prev": hp.copy()})
    return out


@dataclass
class BlockState:
    hidden: np.ndarray    # (C, H)
    norm: NormState


@dataclass
class ModelState:
    """Per-stream mutable state: one norm window per site and the per-channel
    recurrent hiddens for every block."""

    channels: int
    in_norm: NormState
    blocks: list[BlockState]
    frames_processed: int = 0

    @classmethod
    def create(cls, config: ModelConfig, channels: int) -> "ModelState":
        blocks = [BlockState(np.zeros((channels, config.hidden_dim)),
                             NormState(channels, config.norm_window))
                  for _ in range(config.num_blocks)]
        return cls(channels, NormState(channels, config.norm_window), blocks)

    def reset(self):
        self.in_norm.reset()
        for b in self.blocks:
            b.hidden[:] = 0.0
            b.norm.reset()
        self.frames_processed = 0


def rci_block_step(features: np.ndarray, block: _BlockView, state: BlockState,
                   reuse_shared: bool = True, tape: dict | None = None) -> np.ndarray:
    """One recurrent channel-interaction block on (C, N) features.

    PReLU -> channel average -> partitioned GRU on [local, average] ->
    FC back to N -> sliding-window norm -> skip from the PReLU output.
    """
    pre = np.atleast_2d(features)
    f = np.where(pre >= 0, pre, block.prelu * pre)
    fbar = channel_average(f)
    gru_tape = [] if tape is not None else None
    gru_out = group_gru_step(f, fbar, state.hidden, block.cells, reuse_shared, gru_tape)
    state.hidden = gru_out
    q = gru_out @ block.fc_w + block.fc_b
    s = sln_step(q, state.norm, block.gamma, block.beta)
    out = s + f
    if tape is not None:
        tape.update(pre=pre, f=f, fbar=fbar, gru=gru_tape, gru_out=gru_out, q=q,
                    mu=state.norm.last_mean.copy(), inv=state.norm.last_inv_std.copy(),
                    rk=state.norm.last_window)
    return out


def forward_frame(params: ModelParams, frames: np.ndarray, state: ModelState,
                  reuse_shared: bool = True, tape: list | None = None) -> np.ndarray:
    """Process one (C, L) frame bank into an estimated mono frame of length L.

    Every stateful component (norm windows, GRU hiddens) advances exactly
    once per call.
    """
    frames = np.atleast_2d(frames)
    if frames.shape[0] != state.channels:
        raise ValueError("frame channel count does not match stream state")
    z = encode(frames, params.enc)
    e = sln_step(z, state.in_norm, params.in_gamma, params.in_beta)
    entry = {"frames": frames, "z": z,
             "in_mu": state.in_norm.last_mean.copy(),
             "in_inv": state.in_norm.last_inv_std.copy(),
             "in_rk": state.in_norm.last_window,
             "blocks": []} if tape is not None else None
    feats = e
    for b, block in enumerate(params.blocks):
        btape = {} if tape is not None else None
        feats = rci_block_step(feats, block, state.blocks[b], reuse_shared, btape)
        if entry is not None:
            entry["blocks"].append(btape)
    masks = mask_head(feats)
    est = decode_and_sum(masks, z, params.dec)
    if entry is not None:
        entry["mask"] = masks
        tape.append(entry)
    state.frames_processed += 1
    return est


def forward_sequence(params: ModelParams, frames: np.ndarray, state: ModelState | None = None,
                     reuse_shared: bool = True, record: bool = False):
    """Run (C, K, L) aligned frames through the network frame by frame.

    Returns (estimated frames (K, L), tape) where the tape is a list of
    per-frame caches when ``record`` else None. Uses the exact same
    per-frame code path as streaming inference.
    """
    channels, num_frames, _ = frames.shape
    if state is None:
        state = ModelState.create(params.config, channels)
    tape = [] if record else None
    est = np.empty((num_frames, params.config.frame_len))
    for k in range(num_frames):
        est[k] = forward_frame(params, frames[:, k, :], state, reuse_shared, tape)
    return est, tape
