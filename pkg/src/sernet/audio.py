"""Audio ingestion: RIFF/WAVE I/O, resampling, normalization, fixed-length cuts.

Everything here is a pure function of its inputs. Clips are immutable in
practice; operations return new :class:`AudioClip` instances.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import struct
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import resample_poly

from .errors import (
    EmptyInputError,
    FormatError,
    SchemaError,
    UnsupportedFormatError,
    UnsupportedRateError,
)

TARGET_RATE = 16000
MIN_RATE = 8000
KAISER_BETA = 8.6

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclasses.dataclass(eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""
    speaker_id: str = ""
    label: Optional[str] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def replace(self, **changes) -> "AudioClip":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# RIFF/WAVE


def _iter_chunks(blob: bytes):
    pos = 12
    while pos + 8 <= len(blob):
        cid, size = struct.unpack_from("<4sI", blob, pos)
        start = pos + 8
        yield cid, start, size
        pos = start + size + (size & 1)


def read_wav(path) -> AudioClip:
    """Read a PCM16 or float32 RIFF/WAVE file into a mono clip.

    Stereo (or any multi-channel) audio is averaged to mono. Integer PCM is
    scaled by 1/32768. The native sample rate is kept.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    for cid, start, size in _iter_chunks(blob):
        if cid == b"fmt ":
            if size < 16 or start + size > len(blob):
                raise FormatError(f"{path}: truncated fmt chunk")
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", blob, start)
            if tag == _WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise FormatError(f"{path}: truncated WAVE_FORMAT_EXTENSIBLE header")
                (tag,) = struct.unpack_from("<H", blob, start + 24)
            fmt = (tag, channels, rate, block_align, bits)
        elif cid == b"data":
            if start + size > len(blob):
                raise FormatError(
                    f"{path}: data chunk declares {size} bytes, only {len(blob) - start} present"
                )
            data = blob[start:start + size]
    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{path}: missing data chunk")

    tag, channels, rate, block_align, bits = fmt
    if channels < 1 or rate <= 0:
        raise FormatError(f"{path}: invalid channel count or sample rate")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormatError(f"{path}: format tag {tag:#06x} with {bits} bits is not supported")
    if block_align != channels * dtype.itemsize:
        raise FormatError(f"{path}: block align {block_align} inconsistent with {channels}x{bits} bits")
    if len(data) % block_align:
        raise FormatError(f"{path}: data chunk is not a whole number of frames")

    frames = np.frombuffer(data, dtype=dtype).astype(np.float64).reshape(-1, channels)
    samples = frames.mean(axis=1) * scale
    return AudioClip(samples, int(rate), source_id=str(path))


def write_wav(path, samples, sample_rate: int, *, fmt: str = "pcm16", channels: int = 1) -> None:
    """Write a RIFF/WAVE file.

    ``samples`` is shape ``(n,)`` for mono or ``(n, channels)``. ``fmt`` is
    ``"pcm16"`` (values clipped to [-1, 1) then rounded) or ``"float32"``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None].repeat(channels, axis=1) if channels > 1 else x[:, None]
    channels = x.shape[1]
    if fmt == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _WAVE_FORMAT_PCM, 16
    elif fmt == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    block_align = channels * bits // 8
    fmt_chunk = struct.pack(
        "<4sIHHIIHH", b"fmt ", 16, tag, channels, sample_rate, sample_rate * block_align, block_align, bits
    )
    data_chunk = struct.pack("<4sI", b"data", len(payload)) + payload
    if len(payload) & 1:
        data_chunk += b"\x00"
    body = b"WAVE" + fmt_chunk + data_chunk
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------------------
# signal conditioning


def resample_to_16k(clip: AudioClip) -> AudioClip:
    """Resample to 16 kHz with a Kaiser-windowed sinc polyphase filter.

    The anti-aliasing cutoff sits at the lower of the two Nyquist rates.
    """
    if clip.sample_rate < MIN_RATE:
        raise UnsupportedRateError(f"sample rate {clip.sample_rate} Hz is below {MIN_RATE} Hz")
    if clip.sample_rate == TARGET_RATE:
        return clip
    ratio = Fraction(TARGET_RATE, clip.sample_rate)
    out = resample_poly(clip.samples, ratio.numerator, ratio.denominator, window=("kaiser", KAISER_BETA))
    return clip.replace(samples=out, sample_rate=TARGET_RATE)


def normalize(clip: AudioClip) -> AudioClip:
    """Peak-normalize to [-1, 1]. All-zero clips come back unchanged."""
    if clip.samples.size == 0:
        raise EmptyInputError("cannot normalize an empty clip")
    peak = np.max(np.abs(clip.samples))
    if peak == 0:
        return clip
    return clip.replace(samples=clip.samples / peak)


def segment(clip: AudioClip, target_seconds: float) -> AudioClip:
    """Cut or zero-pad the tail so the clip holds exactly ``target_seconds``."""
    if not target_seconds > 0:
        raise ValueError(f"target_seconds must be positive, got {target_seconds}")
    n = int(round(target_seconds * clip.sample_rate))
    x = clip.samples
    if len(x) >= n:
        out = x[:n].copy()
    else:
        out = np.concatenate([x, np.zeros(n - len(x))])
    return clip.replace(samples=out)


def load_clip(path, seconds: float, *, speaker_id: str = "", label: Optional[str] = None) -> AudioClip:
    """Read → 16 kHz → peak-normalize → fixed length. The canonical model input."""
    clip = read_wav(path)
    clip = normalize(resample_to_16k(clip))
    clip = segment(clip, seconds)
    return clip.replace(speaker_id=speaker_id, label=label)


# ---------------------------------------------------------------------------
# manifests


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    speaker_id: str
    split: Optional[str] = None


@dataclasses.dataclass
class DatasetManifest:
    entries: list
    label_set: list

    @property
    def num_classes(self) -> int:
        return len(self.label_set)

    def label_index(self, label: str) -> int:
        return self.label_set.index(label)

    @property
    def speakers(self) -> list:
        return sorted({e.speaker_id for e in self.entries})

    def subset(self, speakers) -> list:
        speakers = set(speakers)
        return [i for i, e in enumerate(self.entries) if e.speaker_id in speakers]


_REQUIRED_COLUMNS = ("path", "label", "speaker")


def load_manifest(path) -> DatasetManifest:
    """Parse a ``path,label,speaker[,split]`` CSV.

    Relative ``path`` values are resolved against the manifest's directory.
    Duplicate paths are kept as-is.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise EmptyInputError(f"{path}: manifest is empty")
    reader = csv.DictReader(text.splitlines())
    header = reader.fieldnames or []
    missing = [c for c in _REQUIRED_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    entries = []
    for lineno, row in enumerate(reader, start=2):
        fields = {k: (row.get(k) or "").strip() for k in ("path", "label", "speaker", "split")}
        for key in _REQUIRED_COLUMNS:
            if not fields[key]:
                raise SchemaError(f"{path}:{lineno}: empty {key!r} field")
        file_path = Path(fields["path"])
        if not file_path.is_absolute():
            file_path = path.parent / file_path
        entries.append(ManifestEntry(str(file_path), fields["label"], fields["speaker"], fields["split"] or None))
    if not entries:
        raise EmptyInputError(f"{path}: manifest has a header but no rows")
    return DatasetManifest(entries, sorted({e.label for e in entries}))


def write_manifest(path, entries: Sequence[ManifestEntry], *, relative_to=None) -> None:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    with_split = any(e.split for e in entries)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "speaker"] + (["split"] if with_split else []))
        for e in entries:
            p = Path(e.path)
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            row = [p.as_posix(), e.label, e.speaker_id]
            if with_split:
                row.append(e.split or "")
            writer.writerow(row)


def expected_length(n: int, rate: int) -> int:
    """Sample count after resampling ``n`` samples from ``rate`` to 16 kHz."""
    return math.ceil(n * TARGET_RATE / rate)
