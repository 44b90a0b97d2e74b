"""Spectral peak extraction and peak-cloud files.

A peak cloud is a fixed-size set of the strongest strict local maxima of one
spectrogram segment, as rows ``(t, f, a)``:

- ``t``: frame index / segment frame count, in [0, 1)
- ``f``: mel bin / mel count, in [0, 1)
- ``a``: amplitude min-max normalized over the selected peaks of the segment

Selection order (and therefore row order) is amplitude-descending, ties
broken by ascending (t, f). Clouds with fewer maxima than the target size are
padded by cyclically repeating that ordering; an empty cloud is all zeros.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from ..errors import DataError, DecodeError, ShapeError
from .audio import DEFAULT_SAMPLE_RATE, AudioClip, segment_clip
from .spectral import SpectrogramConfig, melspectrogram

log = logging.getLogger(__name__)

CLOUD_SIZE = 256

PEAKS_MAGIC = b"PKFP0001"
_ID_BYTES = 64

_NEIGHBORS = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=bool)


def local_maxima(spec: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Strict 3x3 local maxima of a 2-D array.

    A cell qualifies iff its value is greater than every in-bounds neighbor
    (the neighborhood truncates at the edges). Returns (rows, cols, values)
    in row-major scan order.
    """
    s = np.asarray(spec)
    if s.ndim != 2:
        raise ShapeError(f"expected a 2-D spectrogram, got {s.shape}")
    neighbor_max = maximum_filter(s, footprint=_NEIGHBORS, mode="constant", cval=-np.inf)
    mask = s > neighbor_max
    rows, cols = np.nonzero(mask)
    return rows, cols, s[rows, cols]


def select_peaks(
    rows: np.ndarray, cols: np.ndarray, values: np.ndarray, k: int = CLOUD_SIZE
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Keep the k strongest peaks, ties by ascending (time, frequency).

    Output is in the canonical cloud order: amplitude descending, then
    (col, row) ascending.
    """
    order = np.lexsort((rows, cols, -np.asarray(values, dtype=np.float64)))[:k]
    return rows[order], cols[order], values[order]


def extract_peaks(
    spec: np.ndarray, n_peaks: int = CLOUD_SIZE
) -> np.ndarray:
    """Peak cloud of one segment spectrogram, shape (n_peaks, 3) float32."""
    s = np.asarray(spec)
    rows, cols, vals = local_maxima(s)
    rows, cols, vals = select_peaks(rows, cols, vals, n_peaks)
    n_mels, n_frames = s.shape
    cloud = np.zeros((n_peaks, 3), dtype=np.float32)
    n = rows.size
    if n == 0:
        return cloud
    t = cols.astype(np.float32) / np.float32(n_frames)
    f = rows.astype(np.float32) / np.float32(n_mels)
    amax = float(vals.max())
    amin = float(vals.min())
    if amax > amin:
        a = ((vals - amin) / (amax - amin)).astype(np.float32)
    else:
        a = np.ones(n, dtype=np.float32)
    real = np.stack([t, f, a], axis=1).astype(np.float32)
    idx = np.arange(n_peaks) % n
    cloud[:] = real[idx]
    return cloud


def clip_clouds(
    clip: AudioClip | np.ndarray,
    cfg: SpectrogramConfig | None = None,
    n_peaks: int = CLOUD_SIZE,
) -> np.ndarray:
    """All segment peak clouds of a clip, shape (n_segments, n_peaks, 3)."""
    cfg = cfg or SpectrogramConfig()
    rate = clip.sample_rate if isinstance(clip, AudioClip) else DEFAULT_SAMPLE_RATE
    windows = segment_clip(clip, sample_rate=rate)
    return np.stack([extract_peaks(melspectrogram(w, cfg), n_peaks) for w in windows])


@dataclass(frozen=True)
class PeakEntry:
    """One segment's cloud plus where it came from."""

    track_id: str
    segment_index: int
    points: np.ndarray  # (n_peaks, 3) float32


def write_peaks(path: str | Path, entries: list[PeakEntry]) -> None:
    """Binary peak file: magic, record count, fixed-width records."""
    if not entries:
        raise DataError("refusing to write an empty peak file")
    n_peaks = entries[0].points.shape[0]
    with open(path, "wb") as fh:
        fh.write(PEAKS_MAGIC)
        fh.write(struct.pack("<QI", len(entries), n_peaks))
        for e in entries:
            ident = e.track_id.encode("utf-8")
            if len(ident) > _ID_BYTES:
                raise DataError(f"track id too long for peak file: {e.track_id!r}")
            if e.points.shape != (n_peaks, 3):
                raise ShapeError(
                    f"inconsistent cloud shape {e.points.shape} in peak file"
                )
            fh.write(ident.ljust(_ID_BYTES, b"\x00"))
            fh.write(struct.pack("<Q", e.segment_index))
            fh.write(np.ascontiguousarray(e.points, dtype="<f4").tobytes())


def read_peaks(path: str | Path) -> list[PeakEntry]:
    """Inverse of write_peaks; validates magic and record sizes."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read peak file {path}: {exc}") from exc
    if blob[:8] != PEAKS_MAGIC:
        raise DecodeError(f"{path}: bad magic, not a peak file")
    if len(blob) < 20:
        raise DecodeError(f"{path}: truncated header")
    n_records, n_peaks = struct.unpack_from("<QI", blob, 8)
    rec_size = _ID_BYTES + 8 + n_peaks * 3 * 4
    expected = 20 + n_records * rec_size
    if len(blob) != expected:
        raise DecodeError(
            f"{path}: size mismatch, expected {expected} bytes got {len(blob)}"
        )
    out: list[PeakEntry] = []
    off = 20
    for _ in range(n_records):
        ident = blob[off : off + _ID_BYTES].rstrip(b"\x00").decode("utf-8")
        off += _ID_BYTES
        (seg,) = struct.unpack_from("<Q", blob, off)
        off += 8
        pts = np.frombuffer(blob, dtype="<f4", count=n_peaks * 3, offset=off)
        off += n_peaks * 3 * 4
        out.append(PeakEntry(ident, int(seg), pts.reshape(n_peaks, 3).copy()))
    return out


def write_peaks_jsonl(path: str | Path, entries: list[PeakEntry]) -> None:
    """Line-delimited text export for debugging."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(
                json.dumps(
                    {
                        "track": e.track_id,
                        "segment": e.segment_index,
                        "points": [[round(float(v), 6) for v in p] for p in e.points],
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )
