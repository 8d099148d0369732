"""Toy streaming codec: framed linear featurizer + trainable residual vector quantization.

The featurizer stands in for a neural encoder: it chops a 1-D signal into
fixed-size blocks (one per frame) and applies a seeded random linear
projection, so the whole pipeline is deterministic and fast enough for tests.
Quantization is a classic residual VQ: each level snaps the running residual
to its nearest codebook entry, levels are trained with EMA updates plus a
commitment loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CodecConfig",
    "CodebookStack",
    "TokenGrid",
    "featurize",
    "rvq_encode",
    "rvq_decode",
    "codebook_train_step",
    "train_codec",
    "save_codebooks",
    "load_codebooks",
    "save_token_grid",
    "load_token_grid",
]

DEAD_ENTRY_THRESHOLD = 1e-3


class CodecError(ValueError):
    """Raised on invalid codec configuration or malformed inputs."""


@dataclass(frozen=True)
class CodecConfig:
    """Static codec parameters.

    ``sample_rate_hz / frame_rate_hz`` must be an integer number of samples
    per frame; the featurizer consumes the signal in blocks of that size.
    """

    frame_rate_hz: float = 12.5
    sample_rate_hz: float = 24000.0
    latent_dim: int = 8
    num_levels: int = 8
    codebook_size: int = 64
    feature_seed: int = 0

    def __post_init__(self):
        if self.frame_rate_hz <= 0 or self.sample_rate_hz <= 0:
            raise CodecError("rates must be positive")
        if self.latent_dim < 1:
            raise CodecError("latent_dim must be >= 1")
        if not 1 <= self.num_levels <= 16:
            raise CodecError("num_levels must be in 1..16")
        if self.codebook_size < 2:
            raise CodecError("codebook_size must be >= 2")
        spf = self.sample_rate_hz / self.frame_rate_hz
        if abs(spf - round(spf)) > 1e-9:
            raise CodecError(
                f"sample_rate {self.sample_rate_hz} not an integer multiple of "
                f"frame_rate {self.frame_rate_hz}"
            )

    @property
    def samples_per_frame(self) -> int:
        return int(round(self.sample_rate_hz / self.frame_rate_hz))


@dataclass
class TokenGrid:
    """T x Q grid of discrete codec tokens for one audio stream.

    Token 0 is an ordinary codebook index; the acoustic-delay transform also
    writes 0 into the first ``delay`` slots of levels >= 2, which are
    identified by position, never by value.
    """

    tokens: np.ndarray
    frame_rate_hz: float = 12.5

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        if self.tokens.ndim != 2:
            raise CodecError("token grid must be 2-D (frames x levels)")
        if not np.issubdtype(self.tokens.dtype, np.integer):
            self.tokens = self.tokens.astype(np.int64)

    @property
    def num_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_levels(self) -> int:
        return self.tokens.shape[1]

    def validate_range(self, vocab_size: int) -> None:
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= vocab_size):
            raise CodecError(
                f"token out of range: grid holds values outside [0, {vocab_size})"
            )

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.tokens.copy(), self.frame_rate_hz)


class CodebookStack:
    """Per-level codebook tables plus the EMA statistics used for training.

    Levels may have different sizes when constructed directly; stacks built
    from a :class:`CodecConfig` are uniform. Entries are re-estimated as
    ``ema_sum / ema_count``; a fresh stack seeds counts at 1 and sums at the
    entry values so the first EMA step behaves like a plain moving average.
    """

    def __init__(self, levels: list[np.ndarray]):
        if not levels:
            raise CodecError("need at least one codebook level")
        dim = levels[0].shape[1]
        for table in levels:
            if table.ndim != 2 or table.shape[1] != dim:
                raise CodecError("all levels must share the latent dimension")
            if table.shape[0] < 2:
                raise CodecError("codebook_size must be >= 2")
            if not np.all(np.isfinite(table)):
                raise CodecError("codebook entries must be finite")
        self.levels = [np.array(t, dtype=np.float64) for t in levels]
        self.ema_counts = [np.ones(t.shape[0], dtype=np.float64) for t in levels]
        self.ema_sums = [t.copy() for t in self.levels]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def latent_dim(self) -> int:
        return self.levels[0].shape[1]

    @classmethod
    def random_init(cls, config: CodecConfig, rng: np.random.Generator) -> "CodebookStack":
        tables = [
            rng.standard_normal((config.codebook_size, config.latent_dim))
            for _ in range(config.num_levels)
        ]
        return cls(tables)

    @classmethod
    def kmeanspp_init(cls, latents: np.ndarray, config: CodecConfig,
                      rng: np.random.Generator) -> "CodebookStack":
        """Seed each level with k-means++ sampling over that level's residuals."""
        latents = _check_latents(latents, config.latent_dim)
        residual = latents.astype(np.float64)
        tables = []
        for _ in range(config.num_levels):
            table = _kmeanspp(residual, config.codebook_size, rng)
            tables.append(table)
            idx = _nearest(residual, table)
            residual = residual - table[idx]
        return cls(tables)


def _check_latents(latents: np.ndarray, dim: int) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[1] != dim:
        raise CodecError(
            f"latents must be (frames, {dim}), got {latents.shape}"
        )
    return latents


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding; falls back to jittered resampling when the
    batch holds fewer distinct points than entries."""
    n = points.shape[0]
    first = int(rng.integers(n))
    chosen = [points[first]]
    d2 = np.sum((points - chosen[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            pick = points[int(rng.integers(n))] + 1e-6 * rng.standard_normal(points.shape[1])
        else:
            pick = points[int(rng.choice(n, p=d2 / total))]
        chosen.append(pick)
        d2 = np.minimum(d2, np.sum((points - pick) ** 2, axis=1))
    return np.stack(chosen)


def _nearest(points: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the nearest entry per point; ties break to the lowest index."""
    d2 = (
        np.sum(points ** 2, axis=1, keepdims=True)
        - 2.0 * points @ table.T
        + np.sum(table ** 2, axis=1)
    )
    return np.argmin(d2, axis=1)


def featurize(signal: np.ndarray, config: CodecConfig) -> np.ndarray:
    """Project a 1-D signal into per-frame latent vectors.

    Deterministic given ``signal`` and ``config``: blocks of
    ``samples_per_frame`` samples go through a fixed random projection seeded
    by ``config.feature_seed``. Trailing samples that do not fill a block are
    dropped.
    """
    signal = np.asarray(signal, dtype=np.float64).reshape(-1)
    spf = config.samples_per_frame
    if signal.shape[0] < spf:
        raise CodecError("signal too short")
    num_frames = signal.shape[0] // spf
    blocks = signal[: num_frames * spf].reshape(num_frames, spf)
    proj = _projection_matrix(config)
    return blocks @ proj


def _projection_matrix(config: CodecConfig) -> np.ndarray:
    rng = np.random.default_rng(config.feature_seed)
    spf = config.samples_per_frame
    return rng.standard_normal((spf, config.latent_dim)) / np.sqrt(spf)


def rvq_encode(latents: np.ndarray, codebooks: CodebookStack) -> TokenGrid:
    """Quantize latent frames level by level against the residual chain.

    Level q's token is the nearest entry of codebook q to the q-th residual;
    the final residual is discarded.
    """
    latents = _check_latents(latents, codebooks.latent_dim)
    residual = latents.copy()
    tokens = np.empty((latents.shape[0], codebooks.num_levels), dtype=np.int64)
    for q, table in enumerate(codebooks.levels):
        idx = _nearest(residual, table)
        tokens[:, q] = idx
        residual -= table[idx]
    return TokenGrid(tokens)


def rvq_decode(grid: TokenGrid, codebooks: CodebookStack) -> np.ndarray:
    """Sum the indexed codebook vectors per frame."""
    if grid.num_levels != codebooks.num_levels:
        raise CodecError(
            f"grid has {grid.num_levels} levels, codebooks have {codebooks.num_levels}"
        )
    out = np.zeros((grid.num_frames, codebooks.latent_dim), dtype=np.float64)
    for q, table in enumerate(codebooks.levels):
        level_tokens = grid.tokens[:, q]
        if level_tokens.size and (level_tokens.min() < 0 or level_tokens.max() >= table.shape[0]):
            raise CodecError(f"token out of range at level {q}")
        out += table[level_tokens]
    return out


@dataclass
class TrainStats:
    quantization_error: float
    commitment_loss: float


def codebook_train_step(
    latents: np.ndarray,
    codebooks: CodebookStack,
    ema_decay: float = 0.99,
    commitment_weight: float = 0.25,
    rng: np.random.Generator | None = None,
) -> TrainStats:
    """One EMA update of every level from a batch of latent frames.

    Updates ``codebooks`` in place. Entries whose EMA count decays below
    ``DEAD_ENTRY_THRESHOLD`` are reseeded to a random residual from the batch.
    Returns the pre-update quantization error (mean squared distance between
    inputs and their quantized values, per element) and the commitment loss
    (the same quantity scaled by ``commitment_weight``).
    """
    latents = _check_latents(latents, codebooks.latent_dim)
    if latents.shape[0] == 0:
        raise CodecError("batch must be non-empty")
    if not 0.0 < ema_decay < 1.0:
        raise CodecError("ema_decay must be in (0, 1)")
    if rng is None:
        rng = np.random.default_rng(0)

    residual = latents.copy()
    for q, table in enumerate(codebooks.levels):
        idx = _nearest(residual, table)
        quantized = table[idx].copy()  # entries as assigned, before this step's update
        size = table.shape[0]
        counts = np.bincount(idx, minlength=size).astype(np.float64)
        sums = np.zeros_like(table)
        np.add.at(sums, idx, residual)

        codebooks.ema_counts[q] = ema_decay * codebooks.ema_counts[q] + (1 - ema_decay) * counts
        codebooks.ema_sums[q] = ema_decay * codebooks.ema_sums[q] + (1 - ema_decay) * sums

        alive = codebooks.ema_counts[q] > DEAD_ENTRY_THRESHOLD
        table[alive] = codebooks.ema_sums[q][alive] / codebooks.ema_counts[q][alive, None]
        for entry in np.flatnonzero(~alive):
            seed_vec = residual[int(rng.integers(residual.shape[0]))]
            table[entry] = seed_vec
            codebooks.ema_counts[q][entry] = 1.0
            codebooks.ema_sums[q][entry] = seed_vec

        residual = residual - quantized

    err = float(np.mean(residual ** 2))
    return TrainStats(quantization_error=err, commitment_loss=commitment_weight * err)


def train_codec(
    latents: np.ndarray,
    config: CodecConfig,
    steps: int = 200,
    batch_size: int = 256,
    ema_decay: float = 0.99,
    commitment_weight: float = 0.25,
    seed: int = 0,
) -> tuple[CodebookStack, list[TrainStats]]:
    """Initialize codebooks from the first batch and run EMA training steps."""
    rng = np.random.default_rng(seed)
    latents = _check_latents(latents, config.latent_dim)
    first = latents[rng.choice(latents.shape[0], min(batch_size, latents.shape[0]), replace=False)]
    stack = CodebookStack.kmeanspp_init(first, config, rng)
    history = []
    for _ in range(steps):
        batch = latents[rng.integers(latents.shape[0], size=min(batch_size, latents.shape[0]))]
        history.append(codebook_train_step(batch, stack, ema_decay, commitment_weight, rng))
    return stack, history


# ---------------------------------------------------------------------------
# Serialization: "RVQ1" codebooks, "TGR1" token grids
# ---------------------------------------------------------------------------

_RVQ_MAGIC = b"RVQ1"
_TGR_MAGIC = b"TGR1"


def save_codebooks(path, codebooks: CodebookStack, config: CodecConfig) -> None:
    """RVQ1: magic, five uint32 config fields, then float32 vectors level-major.

    Frame rate is stored in millihertz so every header field is an integer.
    Only uniform stacks (every level sized ``config.codebook_size``) round-trip.
    """
    for table in codebooks.levels:
        if table.shape[0] != config.codebook_size:
            raise CodecError("only uniform stacks matching the config serialize")
    if codebooks.num_levels != config.num_levels or codebooks.latent_dim != config.latent_dim:
        raise CodecError("stack does not match config")
    header = struct.pack(
        "<5I",
        int(round(config.sample_rate_hz)),
        int(round(config.frame_rate_hz * 1000)),
        config.latent_dim,
        config.num_levels,
        config.codebook_size,
    )
    with open(path, "wb") as fh:
        fh.write(_RVQ_MAGIC)
        fh.write(header)
        for table in codebooks.levels:
            fh.write(table.astype("<f4").tobytes())


def load_codebooks(path, feature_seed: int = 0) -> tuple[CodebookStack, CodecConfig]:
    with open(path, "rb") as fh:
        if fh.read(4) != _RVQ_MAGIC:
            raise CodecError(f"{path}: not an RVQ1 file")
        sample_rate, frame_mhz, dim, levels, size = struct.unpack("<5I", fh.read(20))
        config = CodecConfig(
            frame_rate_hz=frame_mhz / 1000.0,
            sample_rate_hz=float(sample_rate),
            latent_dim=dim,
            num_levels=levels,
            codebook_size=size,
            feature_seed=feature_seed,
        )
        tables = []
        for _ in range(levels):
            raw = fh.read(size * dim * 4)
            if len(raw) != size * dim * 4:
                raise CodecError(f"{path}: truncated codebook data")
            tables.append(np.frombuffer(raw, dtype="<f4").reshape(size, dim).astype(np.float64))
    return CodebookStack(tables), config


def save_token_grid(path, grid: TokenGrid) -> None:
    """TGR1: magic, uint32 T and Q, then uint16 tokens row-major."""
    tokens = grid.tokens
    if tokens.size and (tokens.min() < 0 or tokens.max() >= 1 << 16):
        raise CodecError("tokens do not fit in uint16")
    with open(path, "wb") as fh:
        fh.write(_TGR_MAGIC)
        fh.write(struct.pack("<2I", tokens.shape[0], tokens.shape[1]))
        fh.write(tokens.astype("<u2").tobytes())


def load_token_grid(path, frame_rate_hz: float = 12.5) -> TokenGrid:
    # The on-disk format carries no frame rate; callers supply it (manifests do).
    with open(path, "rb") as fh:
        if fh.read(4) != _TGR_MAGIC:
            raise CodecError(f"{path}: not a TGR1 file")
        t, q = struct.unpack("<2I", fh.read(8))
        raw = fh.read(t * q * 2)
        if len(raw) != t * q * 2:
            raise CodecError(f"{path}: truncated token data")
        tokens = np.frombuffer(raw, dtype="<u2").reshape(t, q).astype(np.int64)
    return TokenGrid(tokens, frame_rate_hz)
