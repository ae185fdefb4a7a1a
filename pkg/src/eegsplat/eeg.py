"""EEG segment loading, windowing and band-pass filtering.

Two on-disk formats are supported:

``csv``
    One channel per row, comma separated. Lines starting with ``#`` are
    ignored. The sample rate is taken from a ``# rate=<hz>`` header line if
    present, otherwise ``default_rate``.

``raw_f32le``
    A 16 byte little-endian header -- magic ``b"EEGS"``, ``u32`` channel
    count, ``u32`` sample count, ``f32`` sample rate -- followed by the
    samples as row-major ``float32``.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import LoadError, ValidationError

MAGIC = b"EEGS"
HEADER = struct.Struct("<4sIIf")

FILTER_ORDER = 4


@dataclass(frozen=True)
class EegSegment:
    data: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"EEG data must be a non-empty 2-D matrix, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("EEG data contains non-finite values")
        if not (self.sample_rate_hz > 0 and np.isfinite(self.sample_rate_hz)):
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_ms(self) -> float:
        return 1000.0 * self.n_samples / self.sample_rate_hz


def load_segment(path, format: str = "csv", default_rate: float = 1000.0) -> EegSegment:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"{path}: no such file")
    if format == "csv":
        return _load_csv(path, default_rate)
    if format == "raw_f32le":
        return _load_raw(path)
    raise ValidationError(f"unknown EEG format {format!r}")


def _load_csv(path: Path, default_rate: float) -> EegSegment:
    rate = default_rate
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.search(r"rate\s*=\s*([0-9.eE+-]+)", line)
            if m:
                rate = float(m.group(1))
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise LoadError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise LoadError(f"{path}: no samples")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise LoadError(f"{path}: rows have differing lengths {sorted(widths)}")
    data = np.array(rows)
    if not np.isfinite(data).all():
        raise LoadError(f"{path}: non-finite sample values")
    return EegSegment(data, rate)


def _load_raw(path: Path) -> EegSegment:
    blob = path.read_bytes()
    if len(blob) < HEADER.size:
        raise LoadError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, n_ch, n_s, rate = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise LoadError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if n_ch == 0 or n_s == 0:
        raise LoadError(f"{path}: empty dimensions {n_ch}x{n_s}")
    expected = HEADER.size + 4 * n_ch * n_s
    if len(blob) != expected:
        raise LoadError(f"{path}: header declares {n_ch}x{n_s} samples "
                        f"({expected} bytes) but file has {len(blob)} bytes")
    data = np.frombuffer(blob, dtype="<f4", offset=HEADER.size).reshape(n_ch, n_s)
    if not np.isfinite(data).all():
        raise LoadError(f"{path}: non-finite sample values")
    if not rate > 0:
        raise LoadError(f"{path}: invalid sample rate {rate}")
    return EegSegment(data.astype(np.float64), float(rate))


def save_segment(seg: EegSegment, path, format: str = "raw_f32le") -> None:
    path = Path(path)
    if format == "raw_f32le":
        header = HEADER.pack(MAGIC, seg.n_channels, seg.n_samples, seg.sample_rate_hz)
        path.write_bytes(header + seg.data.astype("<f4").tobytes())
    elif format == "csv":
        lines = [f"# rate={seg.sample_rate_hz!r}"]
        lines += [",".join(repr(float(v)) for v in row) for row in seg.data]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValidationError(f"unknown EEG format {format!r}")


def crop_window(seg: EegSegment, start_ms: float, end_ms: float) -> EegSegment:
    """Return the samples whose timestamps fall in ``[start_ms, end_ms)``.

    Sample ``k`` is taken to occur at ``1000 * k / rate`` milliseconds.
    """
    if not 0 <= start_ms < end_ms <= seg.duration_ms + 1e-9:
        raise ValidationError(
            f"window [{start_ms}, {end_ms}) ms outside recording of {seg.duration_ms} ms")
    per_ms = seg.sample_rate_hz / 1000.0
    # round() guards against 40 * 1.0 landing at 39.999... for odd rates
    lo = int(np.ceil(round(start_ms * per_ms, 9)))
    hi = int(np.ceil(round(end_ms * per_ms, 9)))
    hi = min(hi, seg.n_samples)
    if hi <= lo:
        raise ValidationError(f"window [{start_ms}, {end_ms}) ms contains no samples")
    return EegSegment(seg.data[:, lo:hi].copy(), seg.sample_rate_hz)


def butterworth_sos(low_hz: float, high_hz: float, rate: float, order: int = FILTER_ORDER) -> np.ndarray:
    if not 0 < low_hz < high_hz < rate / 2:
        raise ValidationError(
            f"band edges must satisfy 0 < low < high < Nyquist ({rate / 2} Hz), "
            f"got low={low_hz}, high={high_hz}")
    return signal.butter(order, (low_hz, high_hz), btype="bandpass", fs=rate, output="sos")


def bandpass_filter(seg: EegSegment, low_hz: float = 55.0, high_hz: float = 95.0) -> EegSegment:
    """Zero-phase Butterworth band-pass applied independently to every channel.

    The signal is even-reflected by ``3 * order`` samples at both ends before
    the forward-backward pass, where ``order`` is the order of the band-pass
    transfer function (twice the prototype order).  Roughly the first and
    last 100 samples at 1 kHz still carry start-up transients.
    """
    sos = butterworth_sos(low_hz, high_hz, seg.sample_rate_hz)
    padlen = 3 * 2 * sos.shape[0]
    if seg.n_samples <= padlen:
        raise ValidationError(f"segment of {seg.n_samples} samples too short to filter (need > {padlen})")
    out = signal.sosfiltfilt(sos, seg.data, axis=1, padtype="even", padlen=padlen)
    return EegSegment(out, seg.sample_rate_hz)
