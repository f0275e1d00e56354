"""Command-line surface: simulate | enhance | train | eval | info.

Exit codes: 0 success, 1 usage error, 2 data error. No partial output
files are left behind on failure (everything is computed before any
file is written).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import audio_io, simulate, streaming, training, weights
from .geometry import MultichannelBuffer, ScenePose, choose_reference, compute_tdoa, \
    delay_and_sum, apply_steering, make_target, perturb_tdoa
from .model import ModelConfig, ModelParams, count_macs, count_params


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(1, f"{self.prog}: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="steerbeam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a random scene to wav + metadata")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mics", type=int, default=None)
    p.add_argument("--t60", type=float, default=None)
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--rate", type=int, default=16000)
    p.add_argument("--duration", type=float, default=4.0, help="seconds")
    p.add_argument("--perturb-deg", type=float, default=5.0)
    p.add_argument("--max-order", type=int, default=None)

    p = sub.add_parser("enhance", help="run the beamformer over a mixture")
    p.add_argument("--weights", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--streaming", action="store_true")
    mode.add_argument("--batch", action="store_true")
    p.add_argument("--true-tdoas", action="store_true",
                   help="steer with exact geometry instead of the perturbed TDOAs")

    p = sub.add_parser("train", help="desk-scale training on simulated scenes")
    p.add_argument("--config", required=True, help="JSON model configuration")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-3)

    p = sub.add_parser("eval", help="report SI-SDR against the DS target")
    p.add_argument("--est", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--mix", default=None, help="also report the unprocessed DS baseline")
    p.add_argument("--ref-mic", type=int, default=None,
                   help="evaluate against this channel's clean signal instead of the DS target")
    p.add_argument("--taps", type=int, default=17, help="steering FIR length")

    p = sub.add_parser("info", help="parameter, MAC, and latency accounting")
    p.add_argument("--config", default=None, help="JSON model configuration (default: reference)")
    p.add_argument("--mics", type=int, default=4)
    return parser


def _load_config(path: str | None) -> ModelConfig:
    if path is None:
        return ModelConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return weights.config_from_dict(json.load(fh))
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"bad config {path}: {exc}") from exc


def _cmd_simulate(args) -> int:
    spec = simulate.sample_random_scene(args.seed, mics=args.mics, sample_rate=args.rate)
    if args.t60 is not None:
        simulate.t60_to_reflection_coeff(spec.room, args.t60)   # validate before mutating
        spec.t60 = args.t60
    if args.snr is not None:
        spec.snr_db = args.snr
    if args.max_order is not None:
        spec.max_order = args.max_order

    perm = choose_reference(spec.to_pose())
    spec = spec.permuted(perm)
    pose = spec.to_pose()
    tdoas_true = compute_tdoa(pose)
    tdoas_pert = perturb_tdoa(pose, args.perturb_deg, args.seed) \
        if args.perturb_deg > 0 else tdoas_true.copy()

    rng = np.random.default_rng(args.seed + 1)
    n = int(round(args.duration * args.rate))
    speech = simulate.synth_tone_bursts(rng, n, args.rate)
    noises = [simulate.synth_colored_noise(rng, n, args.rate) for _ in spec.noise_sources]
    mix, clean, noise, _meta = simulate.render_scene(spec, speech, noises)

    meta = weights.SceneMetadata(
        seed=args.seed, sample_rate=float(args.rate), speed=spec.speed,
        room=spec.room.tolist(), t60=spec.t60, snr_db=spec.snr_db,
        source=spec.source.tolist(),
        noise_sources=[p.tolist() for p in spec.noise_sources],
        mics=spec.mics.tolist(), reference_permutation=perm.tolist(),
        tdoas_true=tdoas_true.tolist(), tdoas_perturbed=tdoas_pert.tolist(),
        perturb_angle_deg=args.perturb_deg)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    audio_io.wav_write(out / "mix.wav", mix)
    audio_io.wav_write(out / "clean.wav", clean)
    audio_io.wav_write(out / "noise.wav", noise)
    weights.save_scene_metadata(out / "scene.json", meta)
    print(f"wrote {out}/mix.wav clean.wav noise.wav scene.json "
          f"({spec.mics.shape[0]} mics, t60 {spec.t60:.2f} s, snr {spec.snr_db:+.1f} dB)")
    return 0


def _cmd_enhance(args) -> int:
    try:
        params = weights.load_weights(args.weights)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    try:
        meta = weights.load_scene_metadata(args.scene)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    try:
        mix = audio_io.wav_read(args.infile)
        audio_io.expect_buffer(mix, channels=meta.channels,
                               sample_rate=params.config.sample_rate, label=args.infile)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    plan = meta.steering_plan(params.config.frac_taps, perturbed=not args.true_tdoas)
    if args.streaming:
        est = streaming.enhance_streaming(params, plan, mix)
    else:
        est = streaming.enhance_offline(params, plan, mix)
    audio_io.wav_write(args.out, MultichannelBuffer(est[None, :], mix.sample_rate))
    print(f"wrote {args.out} ({est.shape[0]} samples, "
          f"{'streaming' if args.streaming else 'batch'})")
    return 0


def _scan_data_dir(root: Path, taps: int) -> list[training.TrainItem]:
    items = []
    for scene_path in sorted(root.glob("*/scene.json")):
        folder = scene_path.parent
        meta = weights.load_scene_metadata(scene_path)
        mix = audio_io.wav_read(folder / "mix.wav")
        clean = audio_io.wav_read(folder / "clean.wav")
        plan = meta.steering_plan(taps)
        items.append(training.TrainItem(mix, clean, plan))
    if not items:
        raise DataError(f"no scene directories under {root}")
    return items


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    try:
        items = _scan_data_dir(Path(args.data_dir), config.frac_taps)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    params, log = training.train_loop(items, config, epochs=args.epochs,
                                      steps_per_epoch=args.steps_per_epoch,
                                      lr0=args.lr, seed=args.seed)
    weights.save_weights(args.out, params)
    log_path = Path(args.out).with_suffix(".log")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("step loss lr\n")
        for row in log:
            fh.write(f"{row.step} {row.loss:.6f} {row.lr:.8f}\n")
    print(f"wrote {args.out} and {log_path} "
          f"(final loss {log[-1].loss:.3f} over {len(log)} steps)")
    return 0


def _cmd_eval(args) -> int:
    try:
        meta = weights.load_scene_metadata(args.scene)
        est = audio_io.wav_read(args.est)
        clean = audio_io.wav_read(args.clean)
        audio_io.expect_buffer(clean, channels=meta.channels, label=args.clean)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if est.channels != 1:
        raise DataError(f"{args.est}: estimate must be mono")
    plan = meta.steering_plan(args.taps)
    if args.ref_mic is not None:
        if not 0 <= args.ref_mic < clean.channels:
            raise DataError(f"--ref-mic {args.ref_mic} out of range")
        reference = clean.samples[args.ref_mic]
        ref_label = f"clean channel {args.ref_mic}"
    else:
        reference = make_target(plan, clean)
        ref_label = "DS target"
    n = min(est.length, reference.shape[0])
    print(f"SI-SDR vs {ref_label}: {training.si_sdr(est.samples[0, :n], reference[:n]):.2f} dB")
    if args.mix is not None:
        try:
            mix = audio_io.wav_read(args.mix)
            audio_io.expect_buffer(mix, channels=meta.channels, label=args.mix)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        baseline = delay_and_sum(apply_steering(plan, mix))
        print(f"SI-SDR of unprocessed DS baseline: "
              f"{training.si_sdr(baseline[:n], reference[:n]):.2f} dB")
    print("note: PESQ/STOI are standardized external metrics; use dedicated tools")
    return 0


def _cmd_info(args) -> int:
    config = _load_config(args.config)
    n_params = count_params(config)
    macs = count_macs(config)
    report = streaming.latency_report(config)
    print(f"parameters: {n_params} ({n_params / 1e6:.2f}M)")
    print(f"GMAC/s local (per channel): {macs.local_rate / 1e9:.3f}")
    print(f"GMAC/s global: {macs.global_rate / 1e9:.3f}")
    print(f"GMAC/s total for {args.mics} mics: {macs.total_rate(args.mics) / 1e9:.3f}")
    print(f"latency: frame {report.frame_latency_ms:.1f} ms "
          f"+ steering {report.frac_filter_latency_ms:.1f} ms "
          f"= {report.algorithmic_total_ms:.1f} ms "
          f"(compute budget {report.max_compute_budget_ms:.1f} ms/hop)")
    return 0


_COMMANDS = {"simulate": _cmd_simulate, "enhance": _cmd_enhance, "train": _cmd_train,
             "eval": _cmd_eval, "info": _cmd_info}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DataError as exc:
        print(f"steerbeam {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"steerbeam {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
