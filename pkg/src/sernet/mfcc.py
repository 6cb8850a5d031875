"""MFCC front-end: frame → Hamming → radix-2 FFT → power → mel bank → log → DCT-II.

The defaults give a 40 x 184 map for a 3 s clip at 16 kHz (1024-sample
frames, 256-sample hop, 40 mel bands between 40 Hz and 7600 Hz).
"""

from __future__ import annotations

import dataclasses
import functools
import struct
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, FormatError

LOG_FLOOR = 1e-10

DUMP_MAGIC = b"MFCC"
DUMP_VERSION = 1


@dataclasses.dataclass(frozen=True)
class StftConfig:
    frame_len: int = 1024
    hop: int = 256
    fft_size: int = 1024

    def __post_init__(self):
        if self.frame_len > self.fft_size:
            raise ValueError("frame_len must not exceed fft_size")
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two")


@dataclasses.dataclass(frozen=True)
class MelConfig:
    n_mels: int = 40
    f_min: float = 40.0
    f_max: float = 7600.0
    n_mfcc: int = 40

    def __post_init__(self):
        if not 0 <= self.f_min < self.f_max:
            raise ValueError("need 0 <= f_min < f_max")
        if self.n_mfcc > self.n_mels:
            raise ValueError("n_mfcc must not exceed n_mels")


@dataclasses.dataclass(eq=False)
class MfccMap:
    coeffs: np.ndarray  # [n_mfcc, n_frames]

    @property
    def shape(self):
        return self.coeffs.shape

    @property
    def n_mfcc(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_frames(self) -> int:
        return self.coeffs.shape[1]


def hamming_window(n: int) -> np.ndarray:
    """Symmetric Hamming window, ``0.54 - 0.46 cos(2πk/(n-1))``."""
    if n < 2:
        raise ValueError("Hamming window needs n >= 2")
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


@functools.lru_cache(maxsize=None)
def _bit_reverse_permutation(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.flags.writeable = False
    return rev


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time FFT along the last axis.

    The last axis length must be a power of two. Leading axes are batched.
    Sign convention: ``X[k] = sum_n x[n] exp(-2πi kn/N)``.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    X = x[..., _bit_reverse_permutation(n)].astype(np.complex128)
    lead = X.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = X.reshape(lead + (n // m, m))
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        X = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    return X


def fft_1024(frame) -> np.ndarray:
    """One-sided 1024-point FFT: bins 0..512. Accepts a batch ``[..., 1024]``."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1:] != (1024,):
        raise ValueError(f"fft_1024 expects 1024 samples on the last axis, got {frame.shape}")
    return fft_radix2(frame)[..., :513]


def power_spectrum(bins) -> np.ndarray:
    bins = np.asarray(bins)
    return bins.real ** 2 + bins.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def mel_filterbank(cfg: MelConfig, fft_size: int = 1024, sample_rate: int = 16000) -> np.ndarray:
    """Triangular mel filters, shape ``[n_mels, fft_size // 2 + 1]``.

    Band edges are ``n_mels + 2`` points uniformly spaced in mel between
    ``f_min`` and ``f_max``; each triangle is linear in Hz between its
    neighbours' centres. The returned array is read-only (cached).
    """
    if cfg.f_max > sample_rate / 2:
        raise ValueError(f"f_max {cfg.f_max} Hz exceeds Nyquist {sample_rate / 2} Hz")
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank[:, (freqs < cfg.f_min) | (freqs > cfg.f_max)] = 0.0
    bank.flags.writeable = False
    return bank


@functools.lru_cache(maxsize=16)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``D`` so that ``coeffs = D @ x``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
    d[0] /= np.sqrt(2.0)
    d.flags.writeable = False
    return d


def dct_mfcc(log_mel: np.ndarray, n_mfcc: int) -> MfccMap:
    """Orthonormal DCT-II over the mel axis of ``[n_mels, n_frames]``."""
    log_mel = np.asarray(log_mel, dtype=np.float64)
    n_mels = log_mel.shape[0]
    if n_mfcc > n_mels:
        raise ValueError(f"n_mfcc ({n_mfcc}) exceeds n_mels ({n_mels})")
    return MfccMap(dct_matrix(n_mels)[:n_mfcc] @ log_mel)


def inverse_dct(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct_mfcc` when all coefficients were kept."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return dct_matrix(coeffs.shape[0]).T @ coeffs


def n_frames(n_samples: int, stft: StftConfig = StftConfig()) -> int:
    if n_samples < stft.frame_len:
        return 0
    return 1 + (n_samples - stft.frame_len) // stft.hop


def frame_signal(x: np.ndarray, stft: StftConfig) -> np.ndarray:
    count = n_frames(len(x), stft)
    if count == 0:
        raise EmptyInputError(f"clip of {len(x)} samples is shorter than one {stft.frame_len}-sample frame")
    starts = np.arange(count) * stft.hop
    return x[starts[:, None] + np.arange(stft.frame_len)[None, :]]


def extract_mfcc(clip, stft: StftConfig = StftConfig(), mel: MelConfig = MelConfig()) -> MfccMap:
    """Compute the ``[n_mfcc, n_frames]`` MFCC map of a canonical clip.

    ``clip`` may be an :class:`~sernet.audio.AudioClip` or a bare 16 kHz
    sample array.
    """
    samples = getattr(clip, "samples", clip)
    rate = getattr(clip, "sample_rate", 16000)
    x = np.asarray(samples, dtype=np.float64)
    frames = frame_signal(x, stft) * hamming_window(stft.frame_len)
    if stft.frame_len < stft.fft_size:
        frames = np.pad(frames, ((0, 0), (0, stft.fft_size - stft.frame_len)))
    spec = fft_radix2(frames)[:, : stft.fft_size // 2 + 1]
    power = power_spectrum(spec)  # [frames, bins]
    mel_energy = mel_filterbank(mel, stft.fft_size, rate) @ power.T  # [n_mels, frames]
    return dct_mfcc(np.log(np.maximum(mel_energy, LOG_FLOOR)), mel.n_mfcc)


# ---------------------------------------------------------------------------
# binary dump: "MFCC", u32 version, u32 rows, u32 cols, row-major little-endian fp32


def write_mfcc_dump(path, mfcc) -> None:
    coeffs = np.asarray(getattr(mfcc, "coeffs", mfcc), dtype="<f4")
    rows, cols = coeffs.shape
    header = DUMP_MAGIC + struct.pack("<III", DUMP_VERSION, rows, cols)
    Path(path).write_bytes(header + np.ascontiguousarray(coeffs).tobytes())


def read_mfcc_dump(path) -> MfccMap:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != DUMP_MAGIC:
        raise FormatError(f"{path}: bad MFCC dump magic")
    version, rows, cols = struct.unpack_from("<III", blob, 4)
    if version != DUMP_VERSION:
        raise FormatError(f"{path}: unsupported MFCC dump version {version}")
    if len(blob) != 16 + 4 * rows * cols:
        raise FormatError(f"{path}: expected {rows}x{cols} fp32 payload, got {len(blob) - 16} bytes")
    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(rows, cols)
    return MfccMap(data.astype(np.float32))
