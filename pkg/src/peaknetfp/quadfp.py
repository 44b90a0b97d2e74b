"""Quad-constellation fingerprinting baseline.

Tracks are reduced to strong spectrogram maxima; groups of four peaks
(A, B inner C, D) are hashed by expressing C and D in the coordinate frame
that sends A to (0,0) and B to (1,1). Those four numbers are invariant to any
affine rescaling of the time axis, so a tempo-modified query emits (nearly)
the same hashes as the reference track. Retrieval matches hashes within an
epsilon box, derives the implied stretch factor and track offset from each
hit, and lets consistent (track, stretch, offset) cells vote.
"""
from __future__ import annotations

import json
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DecodeError
from .signal.peaks import local_maxima
from .signal.spectral import SpectrogramConfig, melspectrogram

QUAD_MAGIC = b"QUADDB01"

PEAKS_PER_SECOND = 30
REF_QUADS_PER_SECOND = 25
QUERY_QUADS_PER_SECOND = 100
DT_MIN_SECONDS = 0.25
DT_MAX_SECONDS = 2.0
MIN_DF_BINS = 16.0
HASH_EPSILON = 0.01
STRETCH_MIN = 0.5
STRETCH_MAX = 2.0
STRETCH_BINS = 32
OFFSET_BIN_SECONDS = 0.25
MAX_QUADS_PER_ROOT = 8


def parabolic_refine(
    spec: np.ndarray, rows: np.ndarray, cols: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sub-bin peak positions from a parabola through each maximum.

    Quantized peak positions wobble by up to a full bin when the spectrogram
    is resampled, which is fatal for box-normalized hashes; the vertex of the
    parabola through (v[-1], v[0], v[+1]) tracks the true position to a small
    fraction of a bin. Peaks on the image border keep their integer
    coordinate along that axis.
    """
    s = np.asarray(spec, dtype=np.float64)
    n_rows, n_cols = s.shape
    t = cols.astype(np.float64)
    f = rows.astype(np.float64)
    inner = (cols > 0) & (cols < n_cols - 1)
    if inner.any():
        r, c = rows[inner], cols[inner]
        num = 0.5 * (s[r, c - 1] - s[r, c + 1])
        den = s[r, c - 1] - 2.0 * s[r, c] + s[r, c + 1]
        t[inner] += np.clip(num / den, -0.5, 0.5)
    inner = (rows > 0) & (rows < n_rows - 1)
    if inner.any():
        r, c = rows[inner], cols[inner]
        num = 0.5 * (s[r - 1, c] - s[r + 1, c])
        den = s[r - 1, c] - 2.0 * s[r, c] + s[r + 1, c]
        f[inner] += np.clip(num / den, -0.5, 0.5)
    return t, f


def spectrogram_peaks(
    spec: np.ndarray, fps: float, per_second: int = PEAKS_PER_SECOND
) -> np.ndarray:
    """Strongest local maxima per one-second bucket, as (frame, bin, amp) rows.

    Within a bucket peaks rank by amplitude (ties: earlier frame, lower bin).
    """
    rows, cols, values = local_maxima(spec)
    if cols.size == 0:
        return np.zeros((0, 3), dtype=np.float64)
    order = np.lexsort((rows, cols, -values.astype(np.float64)))
    rows, cols, values = rows[order], cols[order], values[order]
    t, f = parabolic_refine(spec, rows, cols)
    seconds = (t / fps).astype(np.int64)
    keep = []
    for sec in np.unique(seconds):
        bucket = np.flatnonzero(seconds == sec)[:per_second]
        keep.append(bucket)
    keep = np.concatenate(keep)
    out = np.stack([t[keep], f[keep], values[keep].astype(np.float64)], axis=1)
    return out[np.lexsort((out[:, 1], out[:, 0]))]  # by (time, freq)


def quad_hash(a: np.ndarray, b: np.ndarray, c: np.ndarray, d: np.ndarray) -> np.ndarray:
    """(cx, cy, dx, dy) of C and D in the frame mapping A->(0,0), B->(1,1)."""
    span_t = b[0] - a[0]
    span_f = b[1] - a[1]
    cx, cy = (c[0] - a[0]) / span_t, (c[1] - a[1]) / span_f
    dx, dy = (d[0] - a[0]) / span_t, (d[1] - a[1]) / span_f
    if (cx, cy) > (dx, dy):
        cx, cy, dx, dy = dx, dy, cx, cy
    return np.array([cx, cy, dx, dy], dtype=np.float64)


def enumerate_quads(
    peaks: np.ndarray,
    fps: float,
    per_second: int,
    max_per_root: int = MAX_QUADS_PER_ROOT,
) -> dict[str, np.ndarray]:
    """Emit up to ``per_second`` quads per second of material.

    Roots are drained round-robin across one-second buckets, strongest roots
    first, so coverage stays even in time. For each root A, candidate far
    corners B (0.25-2 s later, at least MIN_DF_BINS away in frequency, so the
    box never degenerates) are tried strongest first; the two strongest peaks
    strictly inside the A-B box become C, D.
    """
    if peaks.shape[0] == 0:
        return {
            "hash": np.zeros((0, 4)),
            "t0": np.zeros(0),
            "dt": np.zeros(0),
        }
    t, f, amp = peaks[:, 0], peaks[:, 1], peaks[:, 2]
    duration = (t.max() + 1) / fps
    target = int(round(per_second * duration))

    # per-root quad generators, grouped into one-second buckets
    def root_quads(ai: int) -> list[tuple[np.ndarray, float, float]]:
        dt = t - t[ai]
        cand = np.flatnonzero(
            (dt >= DT_MIN_SECONDS * fps)
            & (dt <= DT_MAX_SECONDS * fps)
            & (np.abs(f - f[ai]) >= MIN_DF_BINS)
        )
        cand = cand[np.lexsort((f[cand], t[cand], -amp[cand]))]
        out = []
        for bi in cand:
            lo_f, hi_f = min(f[ai], f[bi]), max(f[ai], f[bi])
            inside = np.flatnonzero(
                (t > t[ai]) & (t < t[bi]) & (f > lo_f) & (f < hi_f)
            )
            if inside.size < 2:
                continue
            inside = inside[np.lexsort((f[inside], t[inside], -amp[inside]))]
            ci, di = inside[0], inside[1]
            h = quad_hash(peaks[ai], peaks[bi], peaks[ci], peaks[di])
            out.append((h, t[ai] / fps, (t[bi] - t[ai]) / fps))
            if len(out) >= max_per_root:
                break
        return out

    seconds = (t / fps).astype(np.int64)
    buckets: list[list[int]] = []
    for sec in np.unique(seconds):
        idx = np.flatnonzero(seconds == sec)
        idx = idx[np.lexsort((f[idx], t[idx], -amp[idx]))]
        buckets.append(list(idx))

    emitted: list[tuple[np.ndarray, float, float]] = []
    rank = 0
    while len(emitted) < target:
        produced = False
        for bucket in buckets:
            if rank >= len(bucket):
                continue
            ai = bucket[rank]
            for item in root_quads(ai):
                emitted.append(item)
                produced = True
                if len(emitted) >= target:
                    break
            if len(emitted) >= target:
                break
        rank += 1
        if not produced and rank > max(len(b) for b in buckets):
            break
    if not emitted:
        return {"hash": np.zeros((0, 4)), "t0": np.zeros(0), "dt": np.zeros(0)}
    return {
        "hash": np.stack([h for h, _, _ in emitted]),
        "t0": np.array([t0 for _, t0, _ in emitted]),
        "dt": np.array([dt for _, _, dt in emitted]),
    }


def box_matches(hashes: np.ndarray, query: np.ndarray, eps: float) -> np.ndarray:
    """Rows of ``hashes`` within +-eps of ``query`` in every coordinate."""
    if hashes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(np.abs(hashes - query[None, :]).max(axis=1) <= eps)


@dataclass(frozen=True)
class QuadMatch:
    track_id: str
    votes: int
    stretch: float
    offset_seconds: float


class QuadDB:
    """Reference-side quad store with an epsilon-grid over hash space."""

    def __init__(
        self,
        spec_cfg: SpectrogramConfig | None = None,
        epsilon: float = HASH_EPSILON,
        meta: dict | None = None,
    ):
        if epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        self.spec_cfg = spec_cfg or SpectrogramConfig()
        self.epsilon = float(epsilon)
        self.meta = dict(meta or {})
        self._track_ids: list[str] = []
        self._hashes: list[np.ndarray] = []
        self._t0: list[np.ndarray] = []
        self._dt: list[np.ndarray] = []
        self._grid: dict | None = None

    @property
    def fps(self) -> float:
        return self.spec_cfg.frames_per_second

    @property
    def track_ids(self) -> list[str]:
        return list(self._track_ids)

    @property
    def n_quads(self) -> int:
        return sum(h.shape[0] for h in self._hashes)

    def add_track(self, track_id: str, samples: np.ndarray) -> None:
        if track_id in self._track_ids:
            raise DataError(f"duplicate track id {track_id!r}")
        spec = melspectrogram(np.asarray(samples, dtype=np.float32), self.spec_cfg)
        peaks = spectrogram_peaks(spec, self.fps)
        quads = enumerate_quads(peaks, self.fps, REF_QUADS_PER_SECOND)
        self.add_track_quads(track_id, quads)

    def add_track_quads(self, track_id: str, quads: dict[str, np.ndarray]) -> None:
        if track_id in self._track_ids:
            raise DataError(f"duplicate track id {track_id!r}")
        self._track_ids.append(track_id)
        self._hashes.append(np.asarray(quads["hash"], dtype=np.float64).reshape(-1, 4))
        self._t0.append(np.asarray(quads["t0"], dtype=np.float64).reshape(-1))
        self._dt.append(np.asarray(quads["dt"], dtype=np.float64).reshape(-1))
        self._grid = None

    # -- lookup ---------------------------------------------------------------

    def _layout(self) -> dict:
        if self._grid is None:
            if not self._track_ids:
                raise DataError("empty quad database")
            sizes = [h.shape[0] for h in self._hashes]
            hashes = (
                np.concatenate(self._hashes) if self.n_quads else np.zeros((0, 4))
            )
            cells: dict[tuple, list[int]] = defaultdict(list)
            keys = np.floor(hashes / self.epsilon).astype(np.int64)
            for i, key in enumerate(map(tuple, keys)):
                cells[key].append(i)
            self._grid = {
                "hashes": hashes,
                "t0": np.concatenate(self._t0) if self.n_quads else np.zeros(0),
                "dt": np.concatenate(self._dt) if self.n_quads else np.zeros(0),
                "track": np.repeat(
                    np.arange(len(sizes), dtype=np.int64), sizes
                ),
                "cells": dict(cells),
            }
        return self._grid

    def candidates(self, query_hash: np.ndarray) -> np.ndarray:
        """Quad ids within +-epsilon of the query hash (grid-accelerated)."""
        lay = self._layout()
        lo = np.floor((query_hash - self.epsilon) / self.epsilon).astype(np.int64)
        hi = np.floor((query_hash + self.epsilon) / self.epsilon).astype(np.int64)
        found: list[int] = []
        cells = lay["cells"]
        for k0 in range(lo[0], hi[0] + 1):
            for k1 in range(lo[1], hi[1] + 1):
                for k2 in range(lo[2], hi[2] + 1):
                    for k3 in range(lo[3], hi[3] + 1):
                        found.extend(cells.get((k0, k1, k2, k3), ()))
        if not found:
            return np.zeros(0, dtype=np.int64)
        ids = np.array(sorted(found), dtype=np.int64)
        keep = (
            np.abs(lay["hashes"][ids] - query_hash[None, :]).max(axis=1)
            <= self.epsilon
        )
        return ids[keep]

    def query_quads(self, samples: np.ndarray) -> dict[str, np.ndarray]:
        spec = melspectrogram(np.asarray(samples, dtype=np.float32), self.spec_cfg)
        return self.query_quads_from_spectrogram(spec)

    def query_quads_from_spectrogram(self, spec: np.ndarray) -> dict[str, np.ndarray]:
        peaks = spectrogram_peaks(spec, self.fps)
        return enumerate_quads(peaks, self.fps, QUERY_QUADS_PER_SECOND)

    def match(self, samples: np.ndarray) -> list[QuadMatch]:
        """Rank tracks for a (possibly tempo-modified) audio excerpt."""
        return self.match_quads(self.query_quads(samples))

    def match_spectrogram(self, spec: np.ndarray) -> list[QuadMatch]:
        return self.match_quads(self.query_quads_from_spectrogram(spec))

    def match_quads(self, quads: dict[str, np.ndarray]) -> list[QuadMatch]:
        lay = self._layout()
        votes: dict[tuple, int] = defaultdict(int)
        log_lo, log_hi = np.log2(STRETCH_MIN), np.log2(STRETCH_MAX)
        for h, t0_q, dt_q in zip(quads["hash"], quads["t0"], quads["dt"]):
            for qi in self.candidates(np.asarray(h, dtype=np.float64)):
                s_hat = lay["dt"][qi] / dt_q
                if not STRETCH_MIN <= s_hat <= STRETCH_MAX:
                    continue
                s_bin = int(
                    np.clip(
                        (np.log2(s_hat) - log_lo) / (log_hi - log_lo) * STRETCH_BINS,
                        0,
                        STRETCH_BINS - 1,
                    )
                )
                offset = lay["t0"][qi] - s_hat * t0_q
                o_bin = int(np.floor(offset / OFFSET_BIN_SECONDS))
                votes[(int(lay["track"][qi]), s_bin, o_bin)] += 1
        best: dict[int, tuple] = {}
        for (ti, s_bin, o_bin), count in votes.items():
            key = (
                -count,
                s_bin,
                o_bin,
            )
            if ti not in best or key < best[ti][0]:
                center = 2.0 ** (log_lo + (s_bin + 0.5) / STRETCH_BINS * (log_hi - log_lo))
                best[ti] = (key, count, center, o_bin * OFFSET_BIN_SECONDS)
        ranked = sorted(
            (
                QuadMatch(self._track_ids[ti], count, float(center), float(off))
                for ti, (_, count, center, off) in best.items()
            ),
            key=lambda m: (-m.votes, m.track_id),
        )
        return ranked

    # -- serialization ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        lay = self._layout()
        meta = dict(self.meta)
        meta["epsilon"] = self.epsilon
        meta["spectrogram"] = self.spec_cfg.to_dict()
        meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(QUAD_MAGIC)
            fh.write(struct.pack("<I", len(meta_raw)))
            fh.write(meta_raw)
            fh.write(struct.pack("<Q", len(self._track_ids)))
            for tid, block in zip(self._track_ids, self._hashes):
                raw = tid.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<Q", block.shape[0]))
            fh.write(struct.pack("<Q", self.n_quads))
            fh.write(np.ascontiguousarray(lay["hashes"], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(lay["t0"], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(lay["dt"], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "QuadDB":
        try:
            blob = Path(path).read_bytes()
        except FileNotFoundError as exc:
            raise DataError(f"no such quad database: {path}") from exc
        if blob[:8] != QUAD_MAGIC:
            raise DecodeError(f"{path}: not a quad database")
        off = 8
        try:
            (meta_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
            off += meta_len
            (n_tracks,) = struct.unpack_from("<Q", blob, off)
            off += 8
            names, sizes = [], []
            for _ in range(n_tracks):
                (name_len,) = struct.unpack_from("<I", blob, off)
                off += 4
                names.append(blob[off : off + name_len].decode("utf-8"))
                off += name_len
                (n,) = struct.unpack_from("<Q", blob, off)
                off += 8
                sizes.append(n)
            (total,) = struct.unpack_from("<Q", blob, off)
            off += 8
            if total != sum(sizes):
                raise DecodeError(f"{path}: quad count mismatch")
            need = total * 4 * 8 + total * 8 * 2
            if len(blob) - off != need:
                raise DecodeError(f"{path}: truncated or trailing bytes")
            hashes = np.frombuffer(blob, dtype="<f8", count=total * 4, offset=off)
            off += total * 32
            t0 = np.frombuffer(blob, dtype="<f8", count=total, offset=off)
            off += total * 8
            dt = np.frombuffer(blob, dtype="<f8", count=total, offset=off)
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DecodeError(f"{path}: corrupt quad database: {exc}") from exc
        epsilon = meta.pop("epsilon", HASH_EPSILON)
        spec_cfg = SpectrogramConfig.from_dict(meta.pop("spectrogram"))
        db = cls(spec_cfg=spec_cfg, epsilon=epsilon, meta=meta)
        hashes = hashes.reshape(total, 4)
        start = 0
        for name, size in zip(names, sizes):
            db.add_track_quads(
                name,
                {
                    "hash": hashes[start : start + size],
                    "t0": t0[start : start + size],
                    "dt": dt[start : start + size],
                },
            )
            start += size
        return db
