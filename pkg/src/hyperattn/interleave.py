"""Interleaved image-text sequences.

Images and video frames are represented in the token stream by a reserved
``<|image|>`` id.  Each placeholder owns one or more *image slots* (the global
view plus optional high-resolution crops), and every slot remembers the token
index of its placeholder.  That index is the rotary position used for all of
the slot's visual keys and also decides which text tokens may attend to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_VOCAB_SIZE = 512
IMAGE_TOKEN_ID = DEFAULT_VOCAB_SIZE - 1
IMAGE_TOKEN = "<|image|>"
DEFAULT_VIDEO_FRAMES = 8

# (rows, cols); (1, 1) is only returned for callers that disable cropping.
CROP_GRIDS: tuple[tuple[int, int], ...] = ((2, 2), (1, 3), (1, 4), (3, 1), (4, 1), (2, 3), (3, 2))


@dataclass(frozen=True)
class Segment:
    kind: str
    text: tuple[int, ...] = ()
    image_id: str | None = None
    frame_count: int | None = None
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if self.kind == "text":
            if len(self.text) == 0:
                raise ValueError("text segment must be non-empty")
            object.__setattr__(self, "text", tuple(int(t) for t in self.text))
        elif self.kind == "image":
            if self.image_id is None:
                raise ValueError("image segment needs an image_id")
            for dim in (self.width, self.height):
                if dim is not None and dim <= 0:
                    raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")
        elif self.kind == "video":
            if self.image_id is None:
                raise ValueError("video segment needs an image_id")
            if self.frame_count is None or self.frame_count < 1:
                raise ValueError(f"frame_count must be >= 1, got {self.frame_count}")
        else:
            raise ValueError(f"unknown segment kind {self.kind!r}")


def text(ids: Iterable[int]) -> Segment:
    return Segment("text", text=tuple(ids))


def image(image_id: str, width: int | None = None, height: int | None = None) -> Segment:
    return Segment("image", image_id=image_id, width=width, height=height)


def video(video_id: str, frame_count: int = DEFAULT_VIDEO_FRAMES) -> Segment:
    return Segment("video", image_id=video_id, frame_count=frame_count)


@dataclass(frozen=True)
class Grid:
    rows: int
    cols: int

    @property
    def cells(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class ImageSlot:
    slot_index: int
    image_id: str
    placeholder_position: int
    # None for the global view, else (rows, cols, row, col)
    crop: tuple[int, int, int, int] | None = None

    @property
    def crop_role(self) -> str:
        if self.crop is None:
            return "global"
        return "crop({},{},{},{})".format(*self.crop)


@dataclass(frozen=True)
class InterleavedSequence:
    tokens: tuple[int, ...]
    image_slots: tuple[ImageSlot, ...]
    image_token_id: int = IMAGE_TOKEN_ID

    def __len__(self):
        return len(self.tokens)

    @property
    def num_slots(self) -> int:
        return len(self.image_slots)

    @property
    def placeholder_positions(self) -> list[int]:
        return [t for t, tok in enumerate(self.tokens) if tok == self.image_token_id]

    def slot_keys(self) -> list[str]:
        """Feature lookup key per slot: crops get their own key."""
        return [s.image_id if s.crop is None else f"{s.image_id}@{s.crop_role}" for s in self.image_slots]

    def validate(self) -> None:
        placeholders = self.placeholder_positions
        globals_ = [s.placeholder_position for s in self.image_slots if s.crop is None]
        if sorted(globals_) != placeholders:
            raise ValueError("every placeholder must own exactly one global slot")
        prev = -1
        for i, slot in enumerate(self.image_slots):
            if slot.slot_index != i:
                raise ValueError("slot indices must be contiguous from 0")
            if slot.placeholder_position < prev:
                raise ValueError("slot placeholder positions must be non-decreasing")
            if self.tokens[slot.placeholder_position] != self.image_token_id:
                raise ValueError(f"slot {i} does not point at a placeholder token")
            prev = slot.placeholder_position


@dataclass(frozen=True)
class RotaryPositionMap:
    query_positions: np.ndarray
    visual_key_positions: np.ndarray


@dataclass(frozen=True)
class CrossAttentionMask:
    visible: np.ndarray  # bool [text_len, num_slots]


def select_crop_grid(width: float, height: float) -> Grid:
    """Pick the crop grid whose aspect ratio is closest to the image's.

    Distance is measured in log-aspect space, so wide and tall images are
    treated symmetrically and the choice does not depend on absolute size.
    Ties go to the grid with fewer cells, then to the smaller (rows, cols).
    """
    if not (width > 0 and height > 0):
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    target = math.log(width / height)

    def key(grid):
        rows, cols = grid
        return (abs(math.log(cols / rows) - target), rows * cols, rows, cols)

    rows, cols = min(CROP_GRIDS, key=key)
    return Grid(rows, cols)


def build_sequence(
    segments: Sequence[Segment],
    crop_policy: str = "off",
    image_token_id: int = IMAGE_TOKEN_ID,
) -> InterleavedSequence:
    if len(segments) == 0:
        raise ValueError("segment list is empty")
    if crop_policy not in ("off", "on"):
        raise ValueError(f"crop_policy must be 'off' or 'on', got {crop_policy!r}")

    tokens: list[int] = []
    slots: list[ImageSlot] = []

    def add_slot(image_id, pos, crop=None):
        slots.append(ImageSlot(len(slots), image_id, pos, crop))

    for seg in segments:
        if not isinstance(seg, Segment):
            raise ValueError(f"unknown segment {seg!r}")
        if seg.kind == "text":
            if image_token_id in seg.text:
                raise ValueError("text segment contains the reserved image token id")
            tokens.extend(seg.text)
        elif seg.kind == "image":
            pos = len(tokens)
            tokens.append(image_token_id)
            add_slot(seg.image_id, pos)
            if crop_policy == "on":
                if seg.width is None or seg.height is None:
                    raise ValueError(f"cropping image {seg.image_id!r} needs width and height")
                grid = select_crop_grid(seg.width, seg.height)
                for r in range(grid.rows):
                    for c in range(grid.cols):
                        add_slot(seg.image_id, pos, (grid.rows, grid.cols, r, c))
        elif seg.kind == "video":
            for k in range(seg.frame_count):
                pos = len(tokens)
                tokens.append(image_token_id)
                add_slot(f"{seg.image_id}:frame{k}", pos)
        else:
            raise ValueError(f"unknown segment kind {seg.kind!r}")

    return InterleavedSequence(tuple(tokens), tuple(slots), image_token_id)


def build_rope_map(seq: InterleavedSequence) -> RotaryPositionMap:
    return RotaryPositionMap(
        query_positions=np.arange(len(seq.tokens), dtype=np.int64),
        visual_key_positions=np.array([s.placeholder_position for s in seq.image_slots], dtype=np.int64),
    )


def build_cross_mask(seq: InterleavedSequence) -> CrossAttentionMask:
    t = np.arange(len(seq.tokens))[:, None]
    p = np.array([s.placeholder_position for s in seq.image_slots], dtype=np.int64)[None, :]
    # inclusive: a placeholder token already sees its own image
    return CrossAttentionMask(visible=(p <= t).reshape(len(seq.tokens), seq.num_slots))


def expand_to_patches(
    rope_map: RotaryPositionMap, mask: CrossAttentionMask, patches_per_slot: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch visual positions and a [text_len, slots * patches] mask."""
    positions = np.repeat(rope_map.visual_key_positions, patches_per_slot)
    visible = np.repeat(mask.visible, patches_per_slot, axis=1)
    return positions, visible


# -- text fixture format -----------------------------------------------------
#
#   # interleaved-sequence v1
#   image_token_id 511
#   token <index> <id> <is_placeholder 0|1>
#   slot <slot_index> <image_id> <placeholder_position> <crop_role>
#
# image ids may not contain whitespace; crop_role is "global" or
# "crop(rows,cols,row,col)".

FIXTURE_HEADER = "# interleaved-sequence v1"


def dumps_sequence(seq: InterleavedSequence) -> str:
    lines = [FIXTURE_HEADER, f"image_token_id {seq.image_token_id}"]
    for i, tok in enumerate(seq.tokens):
        lines.append(f"token {i} {tok} {int(tok == seq.image_token_id)}")
    for s in seq.image_slots:
        if any(ch.isspace() for ch in s.image_id):
            raise ValueError(f"image id {s.image_id!r} contains whitespace")
        lines.append(f"slot {s.slot_index} {s.image_id} {s.placeholder_position} {s.crop_role}")
    return "\n".join(lines) + "\n"


def _parse_role(role: str):
    if role == "global":
        return None
    if role.startswith("crop(") and role.endswith(")"):
        parts = tuple(int(x) for x in role[5:-1].split(","))
        if len(parts) == 4:
            return parts
    raise ValueError(f"bad crop role {role!r}")


def loads_sequence(text_: str) -> InterleavedSequence:
    image_token_id = IMAGE_TOKEN_ID
    tokens: list[int] = []
    slots: list[ImageSlot] = []
    for lineno, raw in enumerate(text_.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "image_token_id":
            image_token_id = int(parts[1])
        elif parts[0] == "token":
            index, tok, flag = int(parts[1]), int(parts[2]), int(parts[3])
            if index != len(tokens):
                raise ValueError(f"line {lineno}: token index {index} out of order")
            if bool(flag) != (tok == image_token_id):
                raise ValueError(f"line {lineno}: placeholder flag disagrees with token id")
            tokens.append(tok)
        elif parts[0] == "slot":
            slots.append(ImageSlot(int(parts[1]), parts[2], int(parts[3]), _parse_role(parts[4])))
        else:
            raise ValueError(f"line {lineno}: unknown record {parts[0]!r}")
    seq = InterleavedSequence(tuple(tokens), tuple(slots), image_token_id)
    seq.validate()
    return seq


def save_sequence(seq: InterleavedSequence, path) -> None:
    Path(path).write_text(dumps_sequence(seq))


def load_sequence(path) -> InterleavedSequence:
    return loads_sequence(Path(path).read_text())
