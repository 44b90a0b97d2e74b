"""Point-set fingerprint encoder.

A peak cloud (rows of ``(t, f, a)``) is summarized hierarchically: anchors
are the highest-amplitude points; each anchor gathers its radius
neighborhood at several scales; a small MLP lifts each neighborhood's
center-relative coordinates (plus carried features) and max-pools it; two
such stages feed a global stage that max-pools pointwise features, applies a
plain affine projection (no rectifier, so fingerprints are not confined to
the non-negative orthant), and row-normalizes to a unit 128-d fingerprint.

Determinism guarantees, relied on by tests and by retrieval:
- the input cloud is re-sorted into a canonical order (amplitude descending,
  ties by ascending (t, f)) before any geometry, so any permutation of the
  same points takes a bit-identical floating-point path;
- neighbor ties are broken by ascending point index; squared distances are
  compared in float64 against the squared radius;
- max-pool ties route to the lowest index.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DataError, ShapeError

log = logging.getLogger(__name__)

EMBED_DIM = 128


@dataclass(frozen=True)
class BranchSpec:
    """One grouping scale: neighborhood size, radius, MLP widths."""

    group_size: int
    radius: float
    mlp: tuple[int, ...]


@dataclass(frozen=True)
class StageSpec:
    n_anchors: int
    branches: tuple[BranchSpec, ...]


@dataclass(frozen=True)
class EncoderConfig:
    stage1: StageSpec
    stage2: StageSpec
    global_mlp: tuple[int, ...]
    distance_mode: str = "3d"  # "3d" uses (t, f, a); "2d" ignores amplitude
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self) -> None:
        if self.distance_mode not in ("3d", "2d"):
            raise ConfigError(f"unknown distance mode {self.distance_mode!r}")
        if self.stage2.n_anchors >= self.stage1.n_anchors:
            raise ConfigError("anchor counts must decrease from stage to stage")
        for si, stage in enumerate((self.stage1, self.stage2), start=1):
            if not stage.branches:
                raise ConfigError(f"stage {si} has no branches")
            by_size = sorted(stage.branches, key=lambda b: b.group_size)
            radii = [b.radius for b in by_size]
            if any(r2 < r1 for r1, r2 in zip(radii, radii[1:])):
                raise ConfigError(
                    f"stage {si}: radius must grow with group size, got {radii}"
                )
            if any(b.group_size <= 0 or b.radius <= 0 or not b.mlp for b in stage.branches):
                raise ConfigError(f"stage {si}: bad branch spec")
        if not self.global_mlp:
            raise ConfigError("global MLP must have at least one layer")

    @property
    def embed_dim(self) -> int:
        return self.global_mlp[-1]

    def to_dict(self) -> dict:
        return {
            "stage1": _stage_dict(self.stage1),
            "stage2": _stage_dict(self.stage2),
            "global_mlp": list(self.global_mlp),
            "distance_mode": self.distance_mode,
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        try:
            return cls(
                stage1=_stage_from(d["stage1"]),
                stage2=_stage_from(d["stage2"]),
                global_mlp=tuple(d["global_mlp"]),
                distance_mode=d.get("distance_mode", "3d"),
                bn_eps=float(d.get("bn_eps", 1e-5)),
                bn_momentum=float(d.get("bn_momentum", 0.1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad encoder config: {exc}") from exc


def _stage_dict(s: StageSpec) -> dict:
    return {
        "n_anchors": s.n_anchors,
        "branches": [
            {"group_size": b.group_size, "radius": b.radius, "mlp": list(b.mlp)}
            for b in s.branches
        ],
    }


def _stage_from(d: dict) -> StageSpec:
    return StageSpec(
        n_anchors=int(d["n_anchors"]),
        branches=tuple(
            BranchSpec(int(b["group_size"]), float(b["radius"]), tuple(b["mlp"]))
            for b in d["branches"]
        ),
    )


DEFAULT_CONFIG = EncoderConfig(
    stage1=StageSpec(
        n_anchors=200,
        branches=(
            BranchSpec(4, 0.1, (16, 16, 32)),
            BranchSpec(8, 0.2, (32, 32, 64)),
            BranchSpec(16, 0.3, (32, 48, 64)),
        ),
    ),
    stage2=StageSpec(
        n_anchors=100,
        branches=(
            BranchSpec(4, 0.2, (32, 32, 64)),
            BranchSpec(8, 0.3, (64, 64, 128)),
            BranchSpec(16, 0.4, (64, 64, 128)),
        ),
    ),
    global_mlp=(128, 256, 128),
)


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Rows sorted by amplitude descending, ties by ascending (t, f)."""
    p = np.asarray(points)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ShapeError(f"expected (n, 3) points, got {p.shape}")
    order = np.lexsort((p[:, 1], p[:, 0], -p[:, 2]))
    return p[order]


def sample_anchors(points: np.ndarray, n_anchors: int) -> np.ndarray:
    """Indices of the n_anchors highest-amplitude points, deterministic ties."""
    p = np.asarray(points)
    if n_anchors > p.shape[0]:
        raise ShapeError(f"cannot sample {n_anchors} anchors from {p.shape[0]} points")
    return np.lexsort((p[:, 1], p[:, 0], -p[:, 2]))[:n_anchors]


def _squared_distances(anchors_xyz: np.ndarray, points: np.ndarray, mode: str) -> np.ndarray:
    a = np.asarray(anchors_xyz, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    if mode == "2d":
        a, p = a[:, :2], p[:, :2]
    elif mode != "3d":
        raise ConfigError(f"unknown distance mode {mode!r}")
    diff = a[:, None, :] - p[None, :, :]
    d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2
    if mode == "3d":
        d2 = d2 + diff[..., 2] ** 2
    return d2


def _ball_groups(
    d2: np.ndarray, radius: float, group_size: int, fallback: np.ndarray | None
) -> np.ndarray:
    n_points = d2.shape[1]
    within = d2 <= float(radius) * float(radius)
    count = within.sum(axis=1)
    order = np.argsort(d2, axis=1, kind="stable")
    if n_points < group_size:
        order = np.concatenate(
            [order, np.repeat(order[:, :1], group_size - n_points, axis=1)], axis=1
        )
    sel = order[:, :group_size]
    cols = np.arange(group_size)
    groups = np.where(cols[None, :] < count[:, None], sel, sel[:, :1])
    empty = count == 0
    if empty.any():
        if fallback is None:
            raise ContractError("query ball found no points and no anchor fallback")
        groups[empty] = fallback[empty, None]
    return groups.astype(np.int64)


def query_ball_group(
    anchor_indices: np.ndarray,
    points: np.ndarray,
    radius: float,
    group_size: int,
    mode: str = "3d",
) -> np.ndarray:
    """Up-to-``group_size`` nearest in-radius neighbors per anchor.

    Anchors are indices into ``points``. Neighbors come nearest-first (ties
    by ascending index); short groups repeat the first qualifying index; an
    anchor with no qualifying point groups with itself (unreachable when the
    anchor is a member, since its own distance is zero).
    """
    idx = np.asarray(anchor_indices, dtype=np.int64)
    d2 = _squared_distances(np.asarray(points)[idx], points, mode)
    return _ball_groups(d2, radius, group_size, fallback=idx)


def query_ball_coords(
    anchors_xyz: np.ndarray,
    points: np.ndarray,
    radius: float,
    group_size: int,
    mode: str = "3d",
) -> np.ndarray:
    """query_ball_group for anchor coordinates that need not be members."""
    d2 = _squared_distances(anchors_xyz, points, mode)
    return _ball_groups(d2, radius, group_size, fallback=None)


class PeakEncoder:
    """The trainable model: parameters, running stats, forward passes."""

    def __init__(
        self,
        config: EncoderConfig | None = None,
        seed: int = 0,
        dtype=ad.DEFAULT_DTYPE,
    ):
        self.config = config or DEFAULT_CONFIG
        self.dtype = np.dtype(dtype)
        self.params: dict[str, ad.Tensor] = {}
        self.running: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------

    def _add_layer(self, rng, prefix: str, fan_in: int, fan_out: int, norm: bool = True) -> None:
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        self.params[f"{prefix}.w"] = ad.Tensor(w.astype(self.dtype), requires_grad=True)
        self.params[f"{prefix}.b"] = ad.Tensor(
            np.zeros(fan_out, dtype=self.dtype), requires_grad=True
        )
        if not norm:
            return
        self.params[f"{prefix}.gamma"] = ad.Tensor(
            np.ones(fan_out, dtype=self.dtype), requires_grad=True
        )
        self.params[f"{prefix}.beta"] = ad.Tensor(
            np.zeros(fan_out, dtype=self.dtype), requires_grad=True
        )
        self.running[f"{prefix}.rmean"] = np.zeros(fan_out, dtype=self.dtype)
        self.running[f"{prefix}.rvar"] = np.ones(fan_out, dtype=self.dtype)

    def _init_params(self, rng) -> None:
        in_dim = 3
        for si, stage in enumerate((self.config.stage1, self.config.stage2), start=1):
            for bi, br in enumerate(stage.branches):
                d = in_dim
                for li, width in enumerate(br.mlp):
                    self._add_layer(rng, f"s{si}.b{bi}.l{li}", d, width)
                    d = width
            in_dim = 3 + sum(br.mlp[-1] for br in stage.branches)
        d = in_dim
        for li, width in enumerate(self.config.global_mlp[:-1]):
            self._add_layer(rng, f"g.l{li}", d, width)
            d = width
        # final projection: plain affine on the pooled feature, so embeddings
        # can occupy the whole sphere instead of the non-negative orthant that
        # a rectified, max-pooled output is confined to
        self._add_layer(
            rng, f"g.l{len(self.config.global_mlp) - 1}", d, self.config.global_mlp[-1], norm=False
        )

    def parameter_count(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())

    # -- forward ----------------------------------------------------------

    def _mlp(self, h: ad.Tensor, prefix: str, widths: tuple[int, ...], training: bool) -> ad.Tensor:
        for li in range(len(widths)):
            p = f"{prefix}.l{li}"
            h = ad.linear(h, self.params[f"{p}.w"], self.params[f"{p}.b"])
            gamma, beta = self.params[f"{p}.gamma"], self.params[f"{p}.beta"]
            if training:
                h, mu, var = ad.batch_norm(h, gamma, beta, self.config.bn_eps)
                mom = self.config.bn_momentum
                self.running[f"{p}.rmean"] += (mom * (mu - self.running[f"{p}.rmean"])).astype(self.dtype)
                self.running[f"{p}.rvar"] += (mom * (var - self.running[f"{p}.rvar"])).astype(self.dtype)
            else:
                inv = ad.constant(
                    (1.0 / np.sqrt(self.running[f"{p}.rvar"].astype(np.float64) + self.config.bn_eps)).astype(self.dtype)
                )
                scale = ad.mul(gamma, inv)
                shift = ad.sub(beta, ad.mul(ad.constant(self.running[f"{p}.rmean"]), scale))
                h = ad.scale_bias(h, scale, shift)
            h = ad.relu(h)
        return h

    def _stage(
        self,
        xyz: np.ndarray,
        feats: ad.Tensor | None,
        spec: StageSpec,
        prefix: str,
        training: bool,
    ) -> tuple[np.ndarray, ad.Tensor]:
        b_sz, n, _ = xyz.shape
        n_anchor = spec.n_anchors
        anchor_idx = np.stack([sample_anchors(xyz[b], n_anchor) for b in range(b_sz)])
        new_xyz = np.stack([xyz[b][anchor_idx[b]] for b in range(b_sz)])
        outs = []
        for bi, br in enumerate(spec.branches):
            flat_idx = np.empty((b_sz, n_anchor, br.group_size), dtype=np.int64)
            rel = np.empty((b_sz, n_anchor, br.group_size, 3), dtype=self.dtype)
            for b in range(b_sz):
                g = query_ball_group(
                    anchor_idx[b], xyz[b], br.radius, br.group_size,
                    mode=self.config.distance_mode,
                )
                flat_idx[b] = g + b * n
                rel[b] = xyz[b][g] - new_xyz[b][:, None, :]
            x = ad.constant(rel.reshape(-1, 3))
            if feats is not None:
                x = ad.concat([x, ad.gather_rows(feats, flat_idx.reshape(-1))], axis=1)
            h = self._mlp(x, f"{prefix}.b{bi}", br.mlp, training)
            h = ad.reshape(h, (b_sz * n_anchor, br.group_size, br.mlp[-1]))
            outs.append(ad.reduce_max(h, axis=1))
        return new_xyz, ad.concat(outs, axis=1)

    def encode(self, clouds: np.ndarray, training: bool = False) -> ad.Tensor:
        """Embed a batch of clouds; returns a (batch, embed_dim) tensor."""
        x = np.asarray(clouds, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != 3:
            raise ShapeError(f"expected (batch, n, 3) clouds, got {x.shape}")
        if x.shape[1] < self.config.stage1.n_anchors:
            raise ShapeError(
                f"cloud has {x.shape[1]} points, need >= {self.config.stage1.n_anchors}"
            )
        xyz = np.stack([canonical_order(c) for c in x])
        xyz, feats = self._stage(xyz, None, self.config.stage1, "s1", training)
        xyz, feats = self._stage(xyz, feats, self.config.stage2, "s2", training)
        b_sz, n, _ = xyz.shape
        h = ad.concat([ad.constant(xyz.reshape(-1, 3)), feats], axis=1)
        h = self._mlp(h, "g", self.config.global_mlp[:-1], training)
        h = ad.reshape(h, (b_sz, n, int(h.data.shape[1])))
        pooled = ad.reduce_max(h, axis=1)
        li = len(self.config.global_mlp) - 1
        out = ad.linear(pooled, self.params[f"g.l{li}.w"], self.params[f"g.l{li}.b"])
        return ad.l2_normalize(out, axis=1)

    def fingerprints(self, clouds: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Unit-norm fingerprints for many clouds, float32 (inference mode)."""
        x = np.asarray(clouds)
        if x.ndim == 2:
            x = x[None]
        chunks = []
        with ad.no_grad():
            for lo in range(0, x.shape[0], batch_size):
                emb = self.encode(x[lo : lo + batch_size], training=False).data
                chunks.append(emb.astype(np.float32))
        out = np.concatenate(chunks, axis=0)
        # a silent/degenerate segment can collapse to the zero vector before
        # normalization; give it a fixed unit direction so the norm contract
        # holds everywhere downstream
        dead = np.linalg.norm(out, axis=1) < 0.5
        if dead.any():
            out[dead] = 0.0
            out[dead, 0] = 1.0
        return out

    def fingerprint(self, cloud: np.ndarray) -> np.ndarray:
        return self.fingerprints(np.asarray(cloud)[None])[0]

    # -- persistence ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        cfg_bytes = json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")
        # config rides along as bytes so a checkpoint is self-describing
        state["meta/config_utf8"] = np.frombuffer(cfg_bytes, dtype=np.uint8).astype(np.float32)
        for name, p in self.params.items():
            state[f"p/{name}"] = p.data
        for name, arr in self.running.items():
            state[f"r/{name}"] = arr
        return state

    def save(self, path: str | Path) -> None:
        ad.save_checkpoint(path, self.state_arrays())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            key = f"p/{name}"
            if key not in state:
                raise DataError(f"checkpoint missing parameter {name!r}")
            arr = state[key].astype(self.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"checkpoint parameter {name!r} has shape {arr.shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = arr.copy()
        for name in self.running:
            key = f"r/{name}"
            if key not in state:
                raise DataError(f"checkpoint missing running stat {name!r}")
            self.running[name] = state[key].astype(self.dtype).copy()

    @classmethod
    def from_checkpoint(cls, path: str | Path, dtype=ad.DEFAULT_DTYPE) -> "PeakEncoder":
        state = ad.load_checkpoint(path)
        if "meta/config_utf8" not in state:
            raise DataError(f"{path}: checkpoint has no model config")
        cfg_bytes = state["meta/config_utf8"].astype(np.uint8).tobytes()
        config = EncoderConfig.from_dict(json.loads(cfg_bytes.decode("utf-8")))
        model = cls(config=config, seed=0, dtype=dtype)
        model.load_state(state)
        return model


def checkpoint_id(path: str | Path) -> str:
    """Stable content hash used to stamp fingerprint databases and reports."""
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()[:16]
