"""Serialization: the binary weight container and scene metadata JSON.

Weight file layout (all integers little-endian):

    bytes 0..3    magic "DFSW"
    u32           format version (1)
    u32 x 8       config: frame_len, latent_dim, hidden_dim, partitions,
                  num_blocks, norm_window, frac_taps, sample_rate
    u32           tensor count
    per tensor    u32 name length, UTF-8 name, u32 rank, u32 x rank dims,
                  u64 absolute byte offset of the payload
    payload       float32 little-endian, row-major, in directory order

Weight-sharing variants are recognized from the tensor directory (a single
cell per block instead of one per partition). Save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .geometry import SteeringPlan, build_steering_plan
from .model import ModelConfig, ModelParams, param_shapes

_MAGIC = b"DFSW"
_VERSION = 1


class WeightFormatError(ValueError):
    pass


def save_weights(path, params: ModelParams):
    cfg = params.config
    header = _MAGIC + struct.pack("<9I", _VERSION, cfg.frame_len, cfg.latent_dim,
                                  cfg.hidden_dim, cfg.partitions, cfg.num_blocks,
                                  cfg.norm_window, cfg.frac_taps, cfg.sample_rate)
    names = list(params.tensors.keys())
    directory = struct.pack("<I", len(names))
    entries = []
    for name in names:
        arr = params.tensors[name]
        raw = name.encode("utf-8")
        entries.append(struct.pack("<I", len(raw)) + raw
                       + struct.pack("<I", arr.ndim)
                       + struct.pack(f"<{arr.ndim}I", *arr.shape))
    dir_size = len(directory) + sum(len(e) + 8 for e in entries)
    offset = len(header) + dir_size
    payloads = []
    for name, entry in zip(names, entries):
        directory += entry + struct.pack("<Q", offset)
        blob = params.tensors[name].astype("<f4").tobytes()
        payloads.append(blob)
        offset += len(blob)
    with open(path, "wb") as fh:
        fh.write(header + directory + b"".join(payloads))


def load_weights(path) -> ModelParams:
    """Load a weight file; tensors come back as float64 copies of the
    stored float32 values (exact)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise WeightFormatError(f"{path}: bad magic")
    fields = struct.unpack("<9I", blob[4:40])
    if fields[0] != _VERSION:
        raise WeightFormatError(f"{path}: unsupported version {fields[0]}")
    frame_len, latent, hidden, parts, blocks, window, taps, rate = fields[1:]
    if parts < 1 or latent % parts or hidden % parts:
        raise WeightFormatError(f"{path}: config violates divisibility invariants")

    pos = 40
    count = struct.unpack("<I", blob[pos:pos + 4])[0]
    pos += 4
    entries = []
    for _ in range(count):
        nlen = struct.unpack("<I", blob[pos:pos + 4])[0]
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = struct.unpack("<I", blob[pos:pos + 4])[0]
        pos += 4
        dims = struct.unpack(f"<{rank}I", blob[pos:pos + 4 * rank])
        pos += 4 * rank
        offset = struct.unpack("<Q", blob[pos:pos + 8])[0]
        pos += 8
        entries.append((name, dims, offset))

    share = not any(".cell1." in name for name in (e[0] for e in entries))
    try:
        config = ModelConfig(frame_len, latent, hidden, parts, blocks, window,
                             taps, rate, share_cells=share and parts > 1)
    except ValueError as exc:
        raise WeightFormatError(f"{path}: {exc}") from exc
    expected = param_shapes(config)
    tensors = {}
    for name, dims, offset in entries:
        if name not in expected:
            raise WeightFormatError(f"{path}: unexpected tensor {name}")
        if tuple(dims) != expected[name]:
            raise WeightFormatError(f"{path}: tensor {name} has wrong shape {dims}")
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        tensors[name] = arr.astype(np.float64).reshape(dims)
    if set(tensors) != set(expected):
        raise WeightFormatError(f"{path}: tensor directory incomplete")
    ordered = {name: tensors[name] for name in expected}
    return ModelParams(config, ordered)


def config_to_dict(config: ModelConfig) -> dict:
    return {"frame_len": config.frame_len, "latent_dim": config.latent_dim,
            "hidden_dim": config.hidden_dim, "partitions": config.partitions,
            "num_blocks": config.num_blocks, "norm_window": config.norm_window,
            "frac_taps": config.frac_taps, "sample_rate": config.sample_rate,
            "share_cells": config.share_cells}


def config_from_dict(data: dict) -> ModelConfig:
    known = set(config_to_dict(ModelConfig()))
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ModelConfig(**data)


@dataclass
class SceneMetadata:
    """Everything enhance/eval need to rebuild the render-time steering plan.

    Microphone positions and TDOAs are stored in reference order (channel 0
    is the farthest mic); ``reference_permutation`` maps back to the
    originally sampled ordering.
    """

    seed: int
    sample_rate: float
    speed: float
    room: list
    t60: float
    snr_db: float
    source: list
    noise_sources: list
    mics: list
    reference_permutation: list
    tdoas_true: list
    tdoas_perturbed: list
    perturb_angle_deg: float

    def tdoas(self, perturbed: bool = True) -> np.ndarray:
        return np.array(self.tdoas_perturbed if perturbed else self.tdoas_true)

    def steering_plan(self, taps: int, perturbed: bool = True) -> SteeringPlan:
        return build_steering_plan(self.tdoas(perturbed), taps)

    @property
    def channels(self) -> int:
        return len(self.mics)


def save_scene_metadata(path, meta: SceneMetadata):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(meta), fh, indent=2)
        fh.write("\n")


def load_scene_metadata(path) -> SceneMetadata:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        return SceneMetadata(**data)
    except TypeError as exc:
        raise ValueError(f"{path}: malformed scene metadata ({exc})") from exc
