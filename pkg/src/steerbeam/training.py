"""Desk-scale optimizer: SI-SDR objective, analytic reverse-mode gradients
for every network operation (full backprop through time, including the
sliding-window normalization statistics), and Adam with per-epoch
exponential learning-rate decay.

Everything runs in double precision; gradient correctness is pinned by
central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .framing import FrameSequence, overlap_add, overlap_add_grad, segment
from .geometry import MultichannelBuffer, SteeringPlan, apply_steering, delay_and_sum, make_target
from .model import (ModelConfig, ModelParams, _BlockView, forward_sequence,
                    param_shapes, zero_grads)

SI_SDR_EPS = 1e-8
_LOG10E10 = 10.0 / np.log(10.0)


# ---------------------------------------------------------------------------
# objective

def si_sdr(estimate: np.ndarray, reference: np.ndarray, eps: float = SI_SDR_EPS) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    Projects the estimate onto the reference and compares projected versus
    residual energy; eps regularizes the residual energy so a perfect
    estimate yields a large finite value.
    """
    estimate = np.asarray(estimate, dtype=np.float64).reshape(-1)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    if estimate.shape != reference.shape:
        raise ValueError("estimate and reference lengths differ")
    ref_energy = float(reference @ reference)
    if ref_energy == 0.0:
        raise ValueError("reference signal is all zeros")
    alpha = float(estimate @ reference) / ref_energy
    target = alpha * reference
    resid = estimate - target
    num = float(target @ target)
    den = float(resid @ resid) + eps
    return float(10.0 * np.log10(num / den))


def si_sdr_with_grad(estimate: np.ndarray, reference: np.ndarray, eps: float = SI_SDR_EPS):
    """SI-SDR plus its gradients with respect to both inputs.

    The value is exactly scale-invariant in the reference; in the estimate
    it is scale-invariant up to the eps regularizer, so the estimate
    gradient is orthogonal to the estimate whenever the residual energy
    dominates eps.
    """
    e = np.asarray(estimate, dtype=np.float64).reshape(-1)
    r = np.asarray(reference, dtype=np.float64).reshape(-1)
    ref_energy = float(r @ r)
    if ref_energy == 0.0:
        raise ValueError("reference signal is all zeros")
    alpha = float(e @ r) / ref_energy
    resid = e - alpha * r
    num = alpha * alpha * ref_energy
    den = float(resid @ resid) + eps
    val = float(10.0 * np.log10(num / den))
    d_est = _LOG10E10 * (2.0 * alpha * r / num - 2.0 * resid / den)
    d_ref = _LOG10E10 * ((2.0 * alpha * e - 2.0 * alpha * alpha * r) / num
                         + 2.0 * alpha * resid / den)
    return val, d_est, d_ref


# ---------------------------------------------------------------------------
# per-operation backward passes

def encode_backward(frames: np.ndarray, grad_z: np.ndarray, enc: np.ndarray):
    """Gradients of z = frames @ enc. Shapes: frames (..., L), grad_z (..., N)."""
    f2 = frames.reshape(-1, enc.shape[0])
    g2 = grad_z.reshape(-1, enc.shape[1])
    return grad_z @ enc.T, f2.T @ g2


def channel_average_backward(grad_avg: np.ndarray, channels: int) -> np.ndarray:
    """Each channel receives 1/C of the average's gradient."""
    return np.broadcast_to(grad_avg / channels, (channels,) + grad_avg.shape).copy()


def mask_head_backward(masks: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * masks * (1.0 - masks)


def decode_and_sum_backward(masks: np.ndarray, latents: np.ndarray, dec: np.ndarray,
                            grad_frame: np.ndarray):
    """Gradients of ((1/C) sum_c m_c * z_c) @ dec."""
    channels = masks.shape[0]
    pooled = np.add.reduce(np.sort(masks * latents, axis=0), axis=0) / channels \
        if channels > 1 else (masks * latents)[0]
    d_pool = grad_frame @ dec.T
    d_dec = np.outer(pooled, grad_frame)
    d_masks = d_pool[None, :] * latents / channels
    d_latents = d_pool[None, :] * masks / channels
    return d_masks, d_latents, d_dec


def sln_sequence_backward(xs: np.ndarray, mus: np.ndarray, invs: np.ndarray,
                          rks: np.ndarray, grad_out: np.ndarray,
                          gamma: np.ndarray, window: int):
    """Backward through a whole sliding-window-normalized sequence.

    ``xs``/``grad_out`` are (K, C, N); ``mus``/``invs`` (K, C); ``rks`` (K,).
    Frame k's statistics pool frames [k-Rk+1, k], so frame t's gradient
    collects contributions from frames t..t+R-1. Those contributions are
    affine in x_t, which reduces the distribution to two sliding suffix
    sums of per-frame scalars.
    """
    k_total, _channels, n = xs.shape
    xc = xs - mus[..., None]
    xhat = xc * invs[..., None]
    d_gamma = np.einsum("kcn,kcn->n", grad_out, xhat)
    d_beta = grad_out.sum(axis=(0, 1))

    gx = grad_out * gamma
    d_mu = -invs * gx.sum(axis=-1)
    d_var = -0.5 * invs ** 3 * (gx * xc).sum(axis=-1)
    coef = 1.0 / (n * rks.astype(np.float64))[:, None]
    w = 2.0 * d_var * coef
    u = d_mu * coef - mus * w

    def window_sum(a):
        s = np.cumsum(a[::-1], axis=0)[::-1]
        out = s.copy()
        if k_total > window:
            out[: k_total - window] -= s[window:]
        return out

    d_xs = gx * invs[..., None] + window_sum(u)[..., None] + xs * window_sum(w)[..., None]
    return d_xs, d_gamma, d_beta


def gru_partition_backward(w_ih: np.ndarray, w_hh: np.ndarray,
                           local_seq: np.ndarray, avg_seq: np.ndarray,
                           caches: list[dict], grad_out: np.ndarray):
    """BPTT through one partition's GRU over a whole sequence.

    ``local_seq`` (K, C, n) and ``avg_seq`` (K, n) are the two halves of the
    cell input, ``caches`` holds per-step gate values, ``grad_out`` (K, C, h)
    is the gradient on the emitted hidden states. Returns gradients for the
    local inputs, the shared average inputs (summed over channels), and the
    cell tensors.
    """
    k_total, channels, bn = local_seq.shape
    bh = grad_out.shape[-1]
    d_local = np.zeros_like(local_seq)
    d_avg = np.zeros_like(avg_seq)
    d_w_ih = np.zeros_like(w_ih)
    d_w_hh = np.zeros_like(w_hh)
    d_b_ih = np.zeros(3 * bh)
    d_b_hh = np.zeros(3 * bh)
    d_h_next = np.zeros((channels, bh))
    for k in range(k_total - 1, -1, -1):
        c = caches[k]
        r, z, cand, hn, h_prev = c["r"], c["z"], c["n"], c["hn"], c["h_prev"]
        d_h = grad_out[k] + d_h_next
        d_cand = d_h * (1.0 - z)
        d_zg = d_h * (h_prev - cand)
        d_h_prev = d_h * z
        d_an = d_cand * (1.0 - cand * cand)
        d_r = d_an * hn
        d_hn = d_an * r
        d_ar = d_r * r * (1.0 - r)
        d_az = d_zg * z * (1.0 - z)
        d_gx = np.concatenate([d_ar, d_az, d_an], axis=1)
        d_gh = np.concatenate([d_ar, d_az, d_hn], axis=1)
        d_w_ih[:, :bn] += d_gx.T @ local_seq[k]
        d_gx_sum = d_gx.sum(axis=0)
        d_w_ih[:, bn:] += np.outer(d_gx_sum, avg_seq[k])
        d_b_ih += d_gx_sum
        d_w_hh += d_gh.T @ h_prev
        d_b_hh += d_gh.sum(axis=0)
        d_local[k] = d_gx @ w_ih[:, :bn]
        d_avg[k] = d_gx_sum @ w_ih[:, bn:]
        d_h_next = d_h_prev + d_gh @ w_hh
    return d_local, d_avg, d_w_ih, d_w_hh, d_b_ih, d_b_hh


def block_sequence_backward(block: _BlockView, config: ModelConfig, block_idx: int,
                            stacked: dict, grad_out: np.ndarray,
                            grads: dict[str, np.ndarray]) -> np.ndarray:
    """Backward through one RCI block over a sequence; returns the gradient
    with respect to the block's input features (K, C, N)."""
    pre, f, fbar = stacked["pre"], stacked["f"], stacked["fbar"]
    channels = pre.shape[1]
    bn, bh = config.band_in, config.band_hidden

    d_f = grad_out.copy()                      # skip branch
    d_q, d_gam, d_bet = sln_sequence_backward(
        stacked["q"], stacked["mu"], stacked["inv"], stacked["rk"],
        grad_out, block.gamma, config.norm_window)
    grads[f"block{block_idx}.norm.gamma"] += d_gam
    grads[f"block{block_idx}.norm.beta"] += d_bet

    d_o = d_q @ block.fc_w.T
    k_total = pre.shape[0]
    o_flat = stacked["gru_out"].reshape(k_total * channels, -1)
    grads[f"block{block_idx}.fc.w"] += o_flat.T @ d_q.reshape(k_total * channels, -1)
    grads[f"block{block_idx}.fc.b"] += d_q.sum(axis=(0, 1))

    d_fbar = np.zeros_like(fbar)
    for p in range(config.partitions):
        ci = 0 if config.share_cells else p
        cell = block.cells[ci]
        sl_in = slice(p * bn, (p + 1) * bn)
        sl_h = slice(p * bh, (p + 1) * bh)
        d_lp, d_ap, dwi, dwh, dbi, dbh = gru_partition_backward(
            cell.w_ih, cell.w_hh, f[:, :, sl_in], fbar[:, sl_in],
            stacked["gru"][p], d_o[:, :, sl_h])
        d_f[:, :, sl_in] += d_lp
        d_fbar[:, sl_in] += d_ap
        prefix = f"block{block_idx}.cell{ci}."
        grads[prefix + "w_ih"] += dwi
        grads[prefix + "w_hh"] += dwh
        grads[prefix + "b_ih"] += dbi
        grads[prefix + "b_hh"] += dbh

    d_f += d_fbar[:, None, :] / channels       # channel-average backward
    d_pre = d_f * np.where(pre >= 0, 1.0, block.prelu)
    grads[f"block{block_idx}.prelu"] += np.einsum("kcn,kcn->n", d_f, np.where(pre < 0, pre, 0.0))
    return d_pre


def stack_tape(tape: list[dict], num_blocks: int) -> dict:
    """Collate the per-frame forward caches into per-sequence arrays."""
    out = {
        "frames": np.stack([t["frames"] for t in tape]),
        "z": np.stack([t["z"] for t in tape]),
        "in_mu": np.stack([t["in_mu"] for t in tape]),
        "in_inv": np.stack([t["in_inv"] for t in tape]),
        "in_rk": np.array([t["in_rk"] for t in tape]),
        "mask": np.stack([t["mask"] for t in tape]),
        "blocks": [],
    }
    partitions = len(tape[0]["blocks"][0]["gru"]) if num_blocks else 0
    for b in range(num_blocks):
        bt = {key: np.stack([t["blocks"][b][key] for t in tape])
              for key in ("pre", "f", "fbar", "gru_out", "q", "mu", "inv")}
        bt["rk"] = np.array([t["blocks"][b]["rk"] for t in tape])
        bt["gru"] = [[t["blocks"][b]["gru"][p] for t in tape] for p in range(partitions)]
        out["blocks"].append(bt)
    return out


def sequence_backward(params: ModelParams, tape: list[dict],
                      grad_est_frames: np.ndarray) -> dict[str, np.ndarray]:
    """Full reverse-mode pass through the recorded forward tape.

    ``grad_est_frames`` is (K, L), the loss gradient on the estimated
    frames. Returns a gradient dict mirroring the parameter tensors.
    """
    config = params.config
    grads = zero_grads(config)
    st = stack_tape(tape, config.num_blocks)
    z, masks = st["z"], st["mask"]
    k_total, channels, _n = z.shape

    # decode_and_sum: est_k = mean_c(m ; z) @ dec
    d_pool = grad_est_frames @ params.dec.T                       # (K, N)
    pooled = np.add.reduce(np.sort(masks * z, axis=1), axis=1) / channels
    grads["dec"] += pooled.T @ grad_est_frames
    d_masked = d_pool[:, None, :] / channels
    d_masks = d_masked * z
    d_z = d_masked * masks

    d_feats = d_masks * masks * (1.0 - masks)                     # sigmoid head
    for b in range(config.num_blocks - 1, -1, -1):
        d_feats = block_sequence_backward(params.blocks[b], config, b,
                                          st["blocks"][b], d_feats, grads)

    d_z_norm, d_gam, d_bet = sln_sequence_backward(
        z, st["in_mu"], st["in_inv"], st["in_rk"], d_feats,
        params.in_gamma, config.norm_window)
    grads["in_norm.gamma"] += d_gam
    grads["in_norm.beta"] += d_bet
    d_z += d_z_norm

    frames_flat = st["frames"].reshape(k_total * channels, config.frame_len)
    grads["enc"] += frames_flat.T @ d_z.reshape(k_total * channels, config.latent_dim)
    return grads


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    config: ModelConfig
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        for name, shape in param_shapes(self.config).items():
            self.m.setdefault(name, np.zeros(shape))
            self.v.setdefault(name, np.zeros(shape))


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              opt: AdamState, lr: float) -> ModelParams:
    """Standard bias-corrected Adam update, in place on ``params``."""
    opt.t += 1
    bc1 = 1.0 - opt.beta1 ** opt.t
    bc2 = 1.0 - opt.beta2 ** opt.t
    for name, tensor in params.tensors.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
        opt.m[name] *= opt.beta1
        opt.m[name] += (1.0 - opt.beta1) * g
        opt.v[name] *= opt.beta2
        opt.v[name] += (1.0 - opt.beta2) * (g * g)
        m_hat = opt.m[name] / bc1
        v_hat = opt.v[name] / bc2
        tensor -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return params


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainItem:
    """One utterance: the noisy mixture, its clean component (simulation
    only), and the steering plan both share."""

    mix: MultichannelBuffer
    clean: MultichannelBuffer
    plan: SteeringPlan


@dataclass
class TrainLogRow:
    step: int
    loss: float
    lr: float


def utterance_loss_and_grads(params: ModelParams, frames: np.ndarray,
                             target: np.ndarray, orig_len: int):
    """Negative SI-SDR of the overlap-added estimate, plus parameter grads."""
    est_frames, tape = forward_sequence(params, frames, record=True)
    fs = FrameSequence(est_frames, params.config.frame_len, orig_len)
    est = overlap_add(fs)
    val, d_est, _ = si_sdr_with_grad(est, target)
    d_frames = overlap_add_grad(-d_est, est_frames.shape[0], params.config.frame_len)
    grads = sequence_backward(params, tape, d_frames)
    return -val, grads, est


def prepare_item(item: TrainItem, config: ModelConfig):
    """Steer and segment the mixture once; compute the aligned target."""
    aligned = apply_steering(item.plan, item.mix)
    seqs = [segment(aligned.samples[c], config.frame_len) for c in range(item.mix.channels)]
    frames = np.stack([s.frames for s in seqs])
    target = make_target(item.plan, item.clean)
    return frames, target, item.mix.length


def train_loop(items: list[TrainItem], config: ModelConfig, *, epochs: int,
               steps_per_epoch: int | None = None, lr0: float = 1e-3,
               lr_decay: float = 0.98, seed: int = 0,
               params: ModelParams | None = None):
    """Deterministic desk-scale training: batch size 1, full BPTT per
    utterance, Adam, learning rate lr0 * lr_decay**epoch.

    ``steps_per_epoch`` defaults to one pass over the dataset; with a
    single utterance it simply repeats it, which is the overfit regime.
    Returns the trained params and a list of TrainLogRow.
    """
    if not items:
        raise ValueError("empty training set")
    if params is None:
        params = ModelParams.init_random(config, seed=seed)
    prepared = [prepare_item(it, config) for it in items]
    opt = AdamState(config)
    rng = np.random.default_rng(seed)
    steps = steps_per_epoch if steps_per_epoch is not None else len(prepared)
    log: list[TrainLogRow] = []
    step = 0
    for epoch in range(epochs):
        lr = lr0 * lr_decay ** epoch
        order = rng.permutation(len(prepared))
        for i in range(steps):
            frames, target, orig_len = prepared[order[i % len(prepared)]]
            loss, grads, _ = utterance_loss_and_grads(params, frames, target, orig_len)
            adam_step(params, grads, opt, lr)
            log.append(TrainLogRow(step, loss, lr))
            step += 1
    return params, log


def ds_baseline(item: TrainItem) -> float:
    """SI-SDR of the unprocessed delay-and-sum mixture against the target."""
    target = make_target(item.plan, item.clean)
    mix_ds = delay_and_sum(apply_steering(item.plan, item.mix))
    return si_sdr(mix_ds, target)
