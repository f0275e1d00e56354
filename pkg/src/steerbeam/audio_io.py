"""Minimal RIFF/WAVE reader and writer: PCM16 and IEEE float32.

float32 round trips losslessly. PCM16 writing quantizes with
round-half-away-from-zero at scale 32768 and clips to [-1, 1 - 2**-15].
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import MultichannelBuffer


class WavFormatError(ValueError):
    pass


def wav_write(path, buf: MultichannelBuffer, bit_depth: str = "float32"):
    """Write a multichannel buffer as float32 (default) or pcm16.

    The file bytes are assembled fully before the single write call, so a
    failure never leaves a partial file behind.
    """
    data = np.asarray(buf.samples, dtype=np.float64)
    channels, frames = data.shape
    interleaved = data.T.reshape(-1)
    if bit_depth == "float32":
        fmt_tag, bits = 3, 32
        payload = interleaved.astype("<f4").tobytes()
    elif bit_depth == "pcm16":
        fmt_tag, bits = 1, 16
        scaled = interleaved * 32768.0
        rounded = np.where(scaled >= 0, np.floor(scaled + 0.5), np.ceil(scaled - 0.5))
        payload = np.clip(rounded, -32768, 32767).astype("<i2").tobytes()
    else:
        raise ValueError(f"unsupported bit depth {bit_depth!r}")

    rate = int(round(buf.sample_rate))
    block_align = channels * bits // 8
    byte_rate = rate * block_align
    chunks = [b"fmt ", struct.pack("<HHIIHH", fmt_tag, channels, rate, byte_rate,
                                   block_align, bits)]
    if fmt_tag == 3:
        chunks[1] += struct.pack("<H", 0)                    # cbSize
        chunks += [b"fact", struct.pack("<I", frames)]
    chunks += [b"data", payload]

    body = b""
    for i in range(0, len(chunks), 2):
        blob = chunks[i + 1]
        body += chunks[i] + struct.pack("<I", len(blob)) + blob
        if len(blob) % 2:
            body += b"\x00"
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)


def wav_read(path) -> MultichannelBuffer:
    """Read a PCM16 or float32 WAV into a (C, T) float64 buffer.

    PCM16 samples are scaled by 1/32768. Raises WavFormatError on
    malformed headers or unsupported codecs.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        size = struct.unpack("<I", blob[pos + 4:pos + 8])[0]
        body = blob[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + size + (size % 2)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _byte_rate, _align, bits = fmt
    if tag == 0xFFFE:
        raise WavFormatError(f"{path}: WAVE_FORMAT_EXTENSIBLE not supported")
    if tag == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported codec (format {tag}, {bits}-bit)")
    if channels < 1 or samples.size % channels:
        raise WavFormatError(f"{path}: sample count does not divide into {channels} channels")
    return MultichannelBuffer(samples.reshape(-1, channels).T, float(rate))


def expect_buffer(buf: MultichannelBuffer, *, channels: int | None = None,
                  sample_rate: float | None = None, label: str = "audio"):
    """Validate a decoded buffer against expected channel count / rate."""
    if channels is not None and buf.channels != channels:
        raise WavFormatError(f"{label}: expected {channels} channels, found {buf.channels}")
    if sample_rate is not None and abs(buf.sample_rate - sample_rate) > 1e-6:
        raise WavFormatError(f"{label}: expected {sample_rate} Hz, found {buf.sample_rate}")
