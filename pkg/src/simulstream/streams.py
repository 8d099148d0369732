"""Stream arithmetic: acoustic delay, multistream concatenation, inner monologue, EOS markers.

Conventions shared across the package:

* text vocabulary reserves PAD=0, BOS=1, EOS=2; word ids start at 3;
* audio vocabularies reserve an input-EOS id equal to the codebook size, so
  codec tokens occupy [0, codebook_size) and the model embeds codebook_size+1
  ids per level;
* the acoustic-delay transform writes token 0 into the first ``delay`` slots
  of levels >= 2; those slots are identified by position.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .codec import TokenGrid

__all__ = [
    "PAD_ID",
    "BOS_ID",
    "EOS_ID",
    "FIRST_WORD_ID",
    "audio_eos_id",
    "MultistreamFrame",
    "MultistreamSequence",
    "apply_acoustic_delay",
    "remove_acoustic_delay",
    "build_multistream",
    "split_multistream",
    "build_inner_monologue",
    "insert_eos_markers",
    "save_multistream",
    "load_multistream",
]

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
FIRST_WORD_ID = 3


class StreamError(ValueError):
    """Raised on malformed stream inputs."""


def audio_eos_id(codebook_size: int) -> int:
    """Reserved input-EOS id for audio streams (one past the codec range)."""
    return codebook_size


@dataclass(frozen=True)
class MultistreamFrame:
    """One decoding step: a text token plus target and source audio tokens."""

    text_token: int
    target_audio: tuple[int, ...]
    source_audio: tuple[int, ...]


@dataclass
class MultistreamSequence:
    """Frame-major bundle of the three streams; indexable as frames."""

    text: np.ndarray
    target: np.ndarray
    source: np.ndarray
    frame_rate_hz: float = 12.5

    def __post_init__(self):
        self.text = np.asarray(self.text, dtype=np.int64)
        self.target = np.asarray(self.target, dtype=np.int64)
        self.source = np.asarray(self.source, dtype=np.int64)
        if self.text.ndim != 1 or self.target.ndim != 2 or self.source.ndim != 2:
            raise StreamError("text must be 1-D, audio streams 2-D")
        if not (len(self.text) == len(self.target) == len(self.source)):
            raise StreamError("streams must share the frame count")
        if self.target.shape[1] != self.source.shape[1]:
            raise StreamError("target and source must share the level count")

    @property
    def num_frames(self) -> int:
        return len(self.text)

    @property
    def num_levels(self) -> int:
        return self.target.shape[1]

    def __len__(self) -> int:
        return self.num_frames

    def __getitem__(self, t: int) -> MultistreamFrame:
        return MultistreamFrame(
            int(self.text[t]),
            tuple(int(x) for x in self.target[t]),
            tuple(int(x) for x in self.source[t]),
        )


def apply_acoustic_delay(grid: TokenGrid, delay_steps: int = 2) -> TokenGrid:
    """Shift levels >= 2 later by ``delay_steps`` frames; level 1 is unchanged.

    The vacated leading slots hold the special token 0.
    """
    if delay_steps < 0:
        raise StreamError("delay_steps must be >= 0")
    tokens = grid.tokens
    out = tokens.copy()
    d = min(delay_steps, tokens.shape[0])
    if d > 0 and tokens.shape[1] > 1:
        out[d:, 1:] = tokens[: tokens.shape[0] - d, 1:]
        out[:d, 1:] = 0
    return TokenGrid(out, grid.frame_rate_hz)


def remove_acoustic_delay(grid: TokenGrid, delay_steps: int = 2) -> TokenGrid:
    """Inverse of :func:`apply_acoustic_delay`; drops the trailing
    ``delay_steps`` frames whose acoustic levels are incomplete."""
    if delay_steps < 0:
        raise StreamError("delay_steps must be >= 0")
    tokens = grid.tokens
    if delay_steps == 0:
        return TokenGrid(tokens.copy(), grid.frame_rate_hz)
    keep = max(tokens.shape[0] - delay_steps, 0)
    out = tokens[:keep].copy()
    if tokens.shape[1] > 1:
        out[:, 1:] = tokens[delay_steps : delay_steps + keep, 1:]
    return TokenGrid(out, grid.frame_rate_hz)


def build_multistream(
    target_grid: TokenGrid,
    source_grid: TokenGrid,
    text_plan: np.ndarray,
) -> MultistreamSequence:
    """Zip the per-frame text token with target then source audio tokens."""
    text_plan = np.asarray(text_plan, dtype=np.int64)
    if not (
        target_grid.num_frames == source_grid.num_frames == text_plan.shape[0]
    ):
        raise StreamError(
            f"frame counts differ: target {target_grid.num_frames}, "
            f"source {source_grid.num_frames}, text {text_plan.shape[0]}"
        )
    if target_grid.num_levels != source_grid.num_levels:
        raise StreamError("target and source grids must share the level count")
    return MultistreamSequence(
        text=text_plan.copy(),
        target=target_grid.tokens.copy(),
        source=source_grid.tokens.copy(),
        frame_rate_hz=target_grid.frame_rate_hz,
    )


def split_multistream(seq: MultistreamSequence) -> tuple[TokenGrid, TokenGrid, np.ndarray]:
    """Inverse of :func:`build_multistream`."""
    return (
        TokenGrid(seq.target.copy(), seq.frame_rate_hz),
        TokenGrid(seq.source.copy(), seq.frame_rate_hz),
        seq.text.copy(),
    )


def build_inner_monologue(
    words: list[tuple[list[int], int]],
    total_frames: int,
    pad_id: int = PAD_ID,
) -> np.ndarray:
    """Lay word tokens at their start frames, PAD everywhere else.

    ``words`` is a list of (token sequence, start frame) pairs with strictly
    increasing start frames; each word must end before the next begins.
    """
    if total_frames < 0:
        raise StreamError("total_frames must be >= 0")
    plan = np.full(total_frames, pad_id, dtype=np.int64)
    prev_end = -1
    prev_start = -1
    for tokens, start in words:
        if not tokens:
            raise StreamError("empty word token sequence")
        if start <= prev_start:
            raise StreamError("start frames must be strictly increasing")
        if start < 0 or start + len(tokens) > total_frames:
            raise StreamError(
                f"word at frame {start} with {len(tokens)} tokens does not fit "
                f"in {total_frames} frames"
            )
        if start <= prev_end:
            raise StreamError("words overlap")
        plan[start : start + len(tokens)] = tokens
        prev_start = start
        prev_end = start + len(tokens) - 1
    return plan


def insert_eos_markers(
    source_grid: TokenGrid,
    text_plan: np.ndarray,
    source_end_frame: int,
    source_eos_id: int,
    text_eos_id: int = EOS_ID,
    pad_id: int = PAD_ID,
) -> tuple[TokenGrid, np.ndarray]:
    """Mark the end of the source speech and of the output text.

    All source tokens at ``source_end_frame`` become ``source_eos_id``; the
    text EOS goes on the frame after the last output word. Applying twice is
    a no-op.
    """
    text_plan = np.asarray(text_plan, dtype=np.int64)
    if not 0 <= source_end_frame < source_grid.num_frames:
        raise StreamError(
            f"source_end_frame {source_end_frame} out of range "
            f"[0, {source_grid.num_frames})"
        )
    grid = source_grid.copy()
    grid.tokens[source_end_frame, :] = source_eos_id

    plan = text_plan.copy()
    if text_eos_id not in plan:
        non_pad = np.flatnonzero(plan != pad_id)
        eos_frame = int(non_pad[-1]) + 1 if non_pad.size else 0
        if eos_frame >= plan.shape[0]:
            raise StreamError("no frame left for the text EOS marker")
        plan[eos_frame] = text_eos_id
    return grid, plan


# ---------------------------------------------------------------------------
# Serialization: "MSF1" multistream sequences
# ---------------------------------------------------------------------------

_MSF_MAGIC = b"MSF1"


def save_multistream(path, seq: MultistreamSequence) -> None:
    """MSF1: magic, uint32 T and Q, then per-frame uint16 tokens
    (text, Q target, Q source)."""
    t, q = seq.num_frames, seq.num_levels
    flat = np.concatenate(
        [seq.text[:, None], seq.target, seq.source], axis=1
    )
    if flat.size and (flat.min() < 0 or flat.max() >= 1 << 16):
        raise StreamError("tokens do not fit in uint16")
    with open(path, "wb") as fh:
        fh.write(_MSF_MAGIC)
        fh.write(struct.pack("<2I", t, q))
        fh.write(flat.astype("<u2").tobytes())


def load_multistream(path, frame_rate_hz: float = 12.5) -> MultistreamSequence:
    with open(path, "rb") as fh:
        if fh.read(4) != _MSF_MAGIC:
            raise StreamError(f"{path}: not an MSF1 file")
        t, q = struct.unpack("<2I", fh.read(8))
        width = 1 + 2 * q
        raw = fh.read(t * width * 2)
        if len(raw) != t * width * 2:
            raise StreamError(f"{path}: truncated data")
        flat = np.frombuffer(raw, dtype="<u2").reshape(t, width).astype(np.int64)
    return MultistreamSequence(
        text=flat[:, 0],
        target=flat[:, 1 : 1 + q],
        source=flat[:, 1 + q :],
        frame_rate_hz=frame_rate_hz,
    )
