"""Contrastive training of the peak-cloud encoder.

Each batch holds ``pairs_per_batch`` segments: the original segment cloud and
a tempo-stretched replica of the same content, interleaved (x_0, x̂_0, x_1,
x̂_1, ...). Replicas are built in the spectrogram domain: crop the audio the
stretched window needs, mel-transform, resample the time axis back to the
segment frame count, re-extract peaks. The loss pulls each pair together
against every other embedding in the batch (temperature-scaled softmax over
inner products).

Determinism: every epoch derives its own rng from (seed, epoch index), so a
run resumed from an epoch-boundary checkpoint replays exactly the batches an
uninterrupted run would have seen.
"""
from __future__ import annotations

import gc
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoder import PeakEncoder
from .errors import ConfigError, ContractError, DataError, TrainingDiverged
from .signal.audio import AudioClip
from .signal.peaks import CLOUD_SIZE, extract_peaks
from .signal.spectral import (
    FRAMES_PER_SEGMENT,
    SpectrogramConfig,
    fit_frames,
    melspectrogram,
    stretch_spectrogram,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    pairs_per_batch: int = 8
    temperature: float = 0.05
    lr: float = 1e-3
    lr_min: float = 1e-6
    epochs: int = 20
    steps_per_epoch: int | None = None
    stretch_min: float = 0.5
    stretch_max: float = 2.0
    seed: int = 0
    checkpoint_every: int = 5

    def __post_init__(self) -> None:
        if self.pairs_per_batch < 2:
            raise ConfigError("need at least 2 pairs per batch")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0 < self.lr_min <= self.lr:
            raise ConfigError("need 0 < lr_min <= lr")
        if not 0 < self.stretch_min <= self.stretch_max:
            raise ConfigError("need 0 < stretch_min <= stretch_max")
        if self.epochs < 0 or (self.steps_per_epoch is not None and self.steps_per_epoch < 1):
            raise ConfigError("epochs must be >= 0, steps_per_epoch >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    def to_dict(self) -> dict:
        return {
            "pairs_per_batch": self.pairs_per_batch,
            "temperature": self.temperature,
            "lr": self.lr,
            "lr_min": self.lr_min,
            "epochs": self.epochs,
            "steps_per_epoch": self.steps_per_epoch,
            "stretch_min": self.stretch_min,
            "stretch_max": self.stretch_max,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc


class SegmentDataset:
    """Per-segment peak clouds of a track collection, plus stretch replicas."""

    def __init__(
        self,
        tracks: list[tuple[str, np.ndarray | AudioClip]],
        spec_cfg: SpectrogramConfig | None = None,
        n_peaks: int = CLOUD_SIZE,
    ):
        if not tracks:
            raise DataError("empty track collection")
        self.spec_cfg = spec_cfg or SpectrogramConfig()
        self.n_peaks = n_peaks
        self._samples: list[np.ndarray] = []
        self.track_ids: list[str] = []
        rows: list[tuple[int, int, int]] = []  # (track_idx, segment_idx, start)
        sr = self.spec_cfg.sample_rate
        win = int(round(sr * 1.0))
        hop = win // 2
        for ti, (track_id, audio) in enumerate(tracks):
            x = audio.samples if isinstance(audio, AudioClip) else np.asarray(audio)
            x = x.astype(np.float32, copy=False)
            if x.size < win:
                raise DataError(f"track {track_id!r} is shorter than one segment")
            self.track_ids.append(track_id)
            self._samples.append(x)
            n_seg = (x.size - win) // hop + 1
            rows.extend((ti, si, si * hop) for si in range(n_seg))
        self._rows = rows
        self._win = win
        log.info("dataset: %d tracks, %d segments", len(tracks), len(rows))
        self.originals = np.stack(
            [self._window_cloud(ti, start, win, 1.0) for ti, _, start in rows]
        )

    @property
    def n_segments(self) -> int:
        return len(self._rows)

    def segment_info(self, index: int) -> tuple[str, int]:
        ti, si, _ = self._rows[index]
        return self.track_ids[ti], si

    def eligible_indices(self, window_seconds: float) -> np.ndarray:
        """Segments whose start + window_seconds still fits the track."""
        sr = self.spec_cfg.sample_rate
        need = int(round(window_seconds * sr))
        return np.array(
            [
                i
                for i, (ti, _, start) in enumerate(self._rows)
                if start + need <= self._samples[ti].size
            ],
            dtype=np.int64,
        )

    def _window_cloud(self, track_idx: int, start: int, length: int, factor: float) -> np.ndarray:
        x = self._samples[track_idx][start : start + length]
        spec = melspectrogram(x, self.spec_cfg)
        if factor != 1.0:
            spec = stretch_spectrogram(spec, factor)
        spec = fit_frames(spec, FRAMES_PER_SEGMENT)
        return extract_peaks(spec, self.n_peaks)

    def original_cloud(self, index: int) -> np.ndarray:
        return self.originals[index]

    def replica_cloud(self, index: int, factor: float) -> np.ndarray:
        """Same content as segment ``index`` played at ``factor`` x tempo."""
        ti, _, start = self._rows[index]
        need = int(round(self._win * factor))
        if start + need > self._samples[ti].size:
            raise DataError(
                f"segment {index} cannot host a x{factor:.3f} replica window"
            )
        return self._window_cloud(ti, start, need, factor)


def positive_pair_mask(n: int) -> np.ndarray:
    """0/1 matrix marking (2k, 2k+1) and (2k+1, 2k) as positives."""
    mask = np.zeros((n, n), dtype=np.float32)
    idx = np.arange(0, n, 2)
    mask[idx, idx + 1] = 1.0
    mask[idx + 1, idx] = 1.0
    return mask


def diagonal_mask(n: int, value: float = -1e30) -> np.ndarray:
    """Additive mask that removes self-similarity from the softmax."""
    return np.diag(np.full(n, value, dtype=np.float32))


def ntxent_loss(embeddings: ad.Tensor, temperature: float = 0.05) -> ad.Tensor:
    """Normalized-temperature cross entropy over adjacent positive pairs."""
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    n = embeddings.data.shape[0]
    if n < 4 or n % 2:
        raise ContractError(f"need an even batch of >= 4 embeddings, got {n}")
    norms = np.linalg.norm(embeddings.data, axis=1)
    if np.abs(norms - 1.0).max() > 1e-4:
        raise ContractError("embeddings must be unit-norm for the contrastive loss")
    logits = ad.mul(ad.matmul(embeddings, ad.transpose(embeddings)), 1.0 / temperature)
    logits = ad.add(logits, ad.constant(diagonal_mask(n).astype(logits.data.dtype)))
    logp = ad.log_softmax(logits, axis=1)
    picked = ad.mul(logp, ad.constant(positive_pair_mask(n).astype(logp.data.dtype)))
    return ad.mul(ad.reduce_sum(picked), -1.0 / n)


def build_batch(
    dataset: SegmentDataset, cfg: TrainConfig, rng: np.random.Generator
) -> tuple[np.ndarray, dict]:
    """Interleaved (original, replica) clouds for one step: shape (2N, P, 3)."""
    eligible = dataset.eligible_indices(max(1.0, cfg.stretch_max))
    if eligible.size < cfg.pairs_per_batch:
        raise DataError(
            f"only {eligible.size} segments can host a x{cfg.stretch_max} window, "
            f"need {cfg.pairs_per_batch}"
        )
    picked = rng.choice(eligible, size=cfg.pairs_per_batch, replace=False)
    if cfg.stretch_min == cfg.stretch_max:
        factors = np.full(cfg.pairs_per_batch, cfg.stretch_min)
    else:
        factors = np.exp(
            rng.uniform(
                math.log(cfg.stretch_min), math.log(cfg.stretch_max), cfg.pairs_per_batch
            )
        )
    clouds = np.empty((2 * cfg.pairs_per_batch, dataset.n_peaks, 3), dtype=np.float32)
    for i, (seg, s) in enumerate(zip(picked, factors)):
        clouds[2 * i] = dataset.originals[seg]
        clouds[2 * i + 1] = dataset.replica_cloud(int(seg), float(s))
    return clouds, {"segments": picked, "factors": factors}


@dataclass
class TrainResult:
    model: PeakEncoder
    records: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None


def _cosine_lr(cfg: TrainConfig, global_step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return cfg.lr
    frac = min(global_step / (total_steps - 1), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def _full_state(model: PeakEncoder, opt: ad.AdamState, cfg: TrainConfig, epochs_done: int) -> dict:
    state = model.state_arrays()
    for name, arr in opt.m.items():
        state[f"opt.m/{name}"] = arr
    for name, arr in opt.v.items():
        state[f"opt.v/{name}"] = arr
    state["meta/opt_step"] = np.float32(opt.step)
    state["meta/epochs_done"] = np.float32(epochs_done)
    cfg_bytes = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    state["meta/train_config_utf8"] = np.frombuffer(cfg_bytes, dtype=np.uint8).astype(
        np.float32
    )
    return state


def _restore_opt(model: PeakEncoder, state: dict) -> tuple[ad.AdamState, int]:
    opt = ad.AdamState()
    for name in model.params:
        mkey, vkey = f"opt.m/{name}", f"opt.v/{name}"
        if mkey not in state or vkey not in state:
            raise DataError(f"checkpoint missing optimizer state for {name!r}")
        opt.m[name] = state[mkey].astype(model.dtype).copy()
        opt.v[name] = state[vkey].astype(model.dtype).copy()
    opt.step = int(state.get("meta/opt_step", np.float32(0.0)))
    epochs_done = int(state.get("meta/epochs_done", np.float32(0.0)))
    return opt, epochs_done


def train(
    dataset: SegmentDataset,
    cfg: TrainConfig,
    model: PeakEncoder | None = None,
    out_path: str | Path | None = None,
    log_path: str | Path | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run the contrastive loop; returns the model and per-step records.

    ``stop_after`` interrupts the schedule after that many epochs (a
    checkpoint is written even off-cadence); ``resume`` continues from such a
    checkpoint and reproduces the remaining epochs of an uninterrupted run
    exactly, learning-rate schedule included. A non-finite loss aborts with a
    diagnostic dump next to ``out_path``.
    """
    opt = ad.AdamState()
    start_epoch = 0
    if resume is not None:
        state = ad.load_checkpoint(resume)
        model = PeakEncoder.from_checkpoint(resume)
        opt, start_epoch = _restore_opt(model, state)
        log.info("resumed from %s at epoch %d (step %d)", resume, start_epoch, opt.step)
    elif model is None:
        model = PeakEncoder(seed=cfg.seed)

    steps_per_epoch = cfg.steps_per_epoch or max(
        1, dataset.eligible_indices(max(1.0, cfg.stretch_max)).size // cfg.pairs_per_batch
    )
    total_steps = cfg.epochs * steps_per_epoch
    records: list[dict] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    result = TrainResult(model=model, records=records)

    def checkpoint(epochs_done: int) -> None:
        if out_path is None:
            return
        ad.save_checkpoint(out_path, _full_state(model, opt, cfg, epochs_done))
        result.checkpoint_path = Path(out_path)

    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            epoch_losses = []
            for step in range(steps_per_epoch):
                clouds, batch_meta = build_batch(dataset, cfg, rng)
                lr = _cosine_lr(cfg, opt.step, total_steps)
                emb = model.encode(clouds, training=True)
                loss = ntxent_loss(emb, cfg.temperature)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    dump = Path(out_path or "train").with_suffix(".nan-dump.ckpt")
                    state = _full_state(model, opt, cfg, epoch)
                    state["dump/batch_clouds"] = clouds
                    state["dump/batch_factors"] = batch_meta["factors"].astype(np.float32)
                    ad.save_checkpoint(dump, state)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}; "
                        f"state dumped to {dump}"
                    )
                ad.zero_grads(model.params.values())
                loss.backward()
                ad.adam_step(model.params, opt, lr)
                # the tape is a graph of cycles (closures hold their parent
                # tensors), so dropping the refs is not enough to reclaim it
                # before the next forward allocates a second one
                del emb, loss
                gc.collect()
                record = {
                    "epoch": epoch,
                    "step": opt.step,
                    "loss": loss_value,
                    "lr": lr,
                    "wall_time": time.time(),
                }
                records.append(record)
                epoch_losses.append(loss_value)
                if log_fh:
                    log_fh.write(json.dumps(record, separators=(",", ":")) + "\n")
                    log_fh.flush()
            log.info(
                "epoch %d/%d: mean loss %.4f",
                epoch + 1,
                cfg.epochs,
                float(np.mean(epoch_losses)),
            )
            done = epoch + 1
            stopping = stop_after is not None and done >= stop_after
            if stopping or done % cfg.checkpoint_every == 0 or done == cfg.epochs:
                checkpoint(done)
            if stopping:
                break
        if result.checkpoint_path is None:
            checkpoint(max(start_epoch, cfg.epochs))
    finally:
        if log_fh:
            log_fh.close()
    return result
