"""Procedural captioned-shapes data: scene sampling, integer rasterization,
a word-level tokenizer, and fixed-width binary persistence.

Scenes hold one or two colored shapes on a neutral background. Two-object
scenes are always a (top, bottom) or (left, right) pair, captioned
canonically ("a small red square above a large blue circle"), so distinct
describable scenes always get distinct captions. Backgrounds are not
describable and never captioned.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

HI_RES = 32
LO_RES = 16
CONTEXT_LENGTH = 12

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SIZES = ("small", "large")
POSITIONS = ("left", "right", "top", "bottom", "center")
BACKGROUNDS = ("black", "white", "gray")

_COLOR_RGB = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "purple": (0.5, -1.0, 0.5),
    "orange": (1.0, 0.0, -1.0),
    "black": (-1.0, -1.0, -1.0),
    "white": (1.0, 1.0, 1.0),
    "gray": (0.0, 0.0, 0.0),
}

# object centers on the 32x32 canvas, (cx, cy)
_POS_XY = {
    "left": (8, 16),
    "right": (24, 16),
    "top": (16, 8),
    "bottom": (16, 24),
    "center": (16, 16),
}

_RADIUS = {"small": 4, "large": 7}

PAD, START, END = 0, 1, 2

_WORDS = (
    ["a", "an", "the", "on", "in", "at", "of", "and"]
    + list(SIZES)
    + list(COLORS)
    + list(SHAPES)
    + list(POSITIONS)
    + ["above", "below", "beside", "next", "to"]
)

VOCAB = ["<pad>", "<start>", "<end>"] + _WORDS
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    position: str


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    background: str

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 2:
            raise ValueError("scene needs 1 or 2 objects")
        if len(self.objects) == 2 and self.objects[0].position == self.objects[1].position:
            raise ValueError("two objects cannot share a position")


@dataclass
class DatasetRecord:
    image: np.ndarray      # (3, 16, 16) float32 in [-1, 1]
    image_hr: np.ndarray   # (3, 32, 32) float32 in [-1, 1]
    caption: np.ndarray    # (12,) int32 token ids
    scene: Scene


class TokenizeError(ValueError):
    pass


def tokenize(text: str) -> np.ndarray:
    """Word-level encoding: [start] words [end], padded to CONTEXT_LENGTH."""
    words = text.lower().split()
    unknown = [w for w in words if w not in _WORD_TO_ID]
    if unknown:
        raise TokenizeError(f"unknown word(s): {', '.join(sorted(set(unknown)))}")
    ids = [START] + [_WORD_TO_ID[w] for w in words] + [END]
    if len(ids) > CONTEXT_LENGTH:
        raise TokenizeError(f"caption too long: {len(ids)} ids > {CONTEXT_LENGTH}")
    ids += [PAD] * (CONTEXT_LENGTH - len(ids))
    return np.array(ids, dtype=np.int32)


def detokenize(ids: np.ndarray) -> str:
    words = []
    for i in np.asarray(ids).tolist():
        if i in (PAD, START):
            continue
        if i == END:
            break
        words.append(VOCAB[i])
    return " ".join(words)


def empty_caption() -> np.ndarray:
    return tokenize("")


def caption_for_scene(scene: Scene) -> str:
    def phrase(o: SceneObject) -> str:
        return f"a {o.size} {o.color} {o.shape}"

    if len(scene.objects) == 1:
        o = scene.objects[0]
        where = "in the center" if o.position == "center" else f"on the {o.position}"
        return f"{phrase(o)} {where}"
    a, b = scene.objects
    if {a.position, b.position} == {"top", "bottom"}:
        first, second = (a, b) if a.position == "top" else (b, a)
        return f"{phrase(first)} above {phrase(second)}"
    first, second = (a, b) if a.position == "left" else (b, a)
    return f"{phrase(first)} beside {phrase(second)}"


def _shape_mask(shape: str, cx: int, cy: int, r: int, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # upward triangle: apex at (cx, cy - r), base at cy + r
    inside = (dy >= -r) & (dy <= r)
    halfwidth = (dy + r) * r // (2 * r)
    return inside & (np.abs(dx) <= halfwidth)


def render_scene(scene: Scene) -> np.ndarray:
    """Rasterize to (3, 32, 32) float32; integer-deterministic, no anti-aliasing."""
    img = np.empty((3, HI_RES, HI_RES), dtype=np.float32)
    for c, v in enumerate(_COLOR_RGB[scene.background]):
        img[c] = v
    for obj in scene.objects:
        cx, cy = _POS_XY[obj.position]
        mask = _shape_mask(obj.shape, cx, cy, _RADIUS[obj.size], HI_RES)
        for c, v in enumerate(_COLOR_RGB[obj.color]):
            img[c][mask] = v
    return img


def box_downsample(img: np.ndarray) -> np.ndarray:
    """2x box filter: each output pixel is the mean of a 2x2 block."""
    c, h, w = img.shape
    return img.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4)).astype(np.float32)


def _sample_object(rng: np.random.Generator, position: str) -> SceneObject:
    return SceneObject(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=COLORS[rng.integers(len(COLORS))],
        size=SIZES[rng.integers(len(SIZES))],
        position=position,
    )


def sample_scene(rng: np.random.Generator) -> Scene:
    background = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    if rng.random() < 0.5:
        position = POSITIONS[rng.integers(len(POSITIONS))]
        return Scene((_sample_object(rng, position),), background)
    if rng.random() < 0.5:
        positions = ("top", "bottom")
    else:
        positions = ("left", "right")
    return Scene(
        (_sample_object(rng, positions[0]), _sample_object(rng, positions[1])),
        background,
    )


def _record_for_scene(scene: Scene) -> DatasetRecord:
    hr = render_scene(scene)
    return DatasetRecord(
        image=box_downsample(hr),
        image_hr=hr,
        caption=tokenize(caption_for_scene(scene)),
        scene=scene,
    )


def generate_dataset(n: int, seed: int) -> list[DatasetRecord]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return [_record_for_scene(sample_scene(rng)) for _ in range(n)]


def generate_unique_caption_dataset(n: int, seed: int) -> list[DatasetRecord]:
    """Like generate_dataset but rejection-samples until all captions differ;
    used for retrieval evaluation where duplicate captions would be unscorable."""
    rng = np.random.default_rng(seed)
    seen: set[bytes] = set()
    records = []
    while len(records) < n:
        scene = sample_scene(rng)
        rec = _record_for_scene(scene)
        key = rec.caption.tobytes()
        if key in seen:
            continue
        seen.add(key)
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# persistence: magic "UCLD", version u32, count u32, fixed-width records, LE
# ---------------------------------------------------------------------------

_MAGIC = b"UCLD"
_VERSION = 1

_SHAPE_ID = {s: i for i, s in enumerate(SHAPES)}
_COLOR_ID = {c: i for i, c in enumerate(COLORS)}
_SIZE_ID = {s: i for i, s in enumerate(SIZES)}
_POS_ID = {p: i for i, p in enumerate(POSITIONS)}
_BG_ID = {b: i for i, b in enumerate(BACKGROUNDS)}


def _pack_scene(scene: Scene) -> bytes:
    out = [len(scene.objects), _BG_ID[scene.background]]
    for i in range(2):
        if i < len(scene.objects):
            o = scene.objects[i]
            out += [_SHAPE_ID[o.shape], _COLOR_ID[o.color], _SIZE_ID[o.size],
                    _POS_ID[o.position]]
        else:
            out += [0, 0, 0, 0]
    return bytes(out)


def _unpack_scene(raw: bytes) -> Scene:
    n, bg = raw[0], raw[1]
    objs = []
    for i in range(n):
        s, c, z, p = raw[2 + 4 * i : 6 + 4 * i]
        objs.append(SceneObject(SHAPES[s], COLORS[c], SIZES[z], POSITIONS[p]))
    return Scene(tuple(objs), BACKGROUNDS[bg])


class DatasetIOError(IOError):
    pass


def save_dataset(path, records: list[DatasetRecord]) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(records)))
        for rec in records:
            f.write(rec.caption.astype("<u1").tobytes())
            f.write(_pack_scene(rec.scene))
            f.write(rec.image.astype("<f4").tobytes())
            f.write(rec.image_hr.astype("<f4").tobytes())


def load_dataset(path) -> list[DatasetRecord]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise DatasetIOError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise DatasetIOError(f"{path}: unsupported version {version}")
    rec_size = CONTEXT_LENGTH + 10 + 3 * LO_RES * LO_RES * 4 + 3 * HI_RES * HI_RES * 4
    if len(raw) != 12 + count * rec_size:
        raise DatasetIOError(
            f"{path}: truncated file ({len(raw)} bytes, expected {12 + count * rec_size})"
        )
    records = []
    off = 12
    for _ in range(count):
        caption = np.frombuffer(raw, "<u1", CONTEXT_LENGTH, off).astype(np.int32)
        off += CONTEXT_LENGTH
        scene = _unpack_scene(raw[off : off + 10])
        off += 10
        lo = np.frombuffer(raw, "<f4", 3 * LO_RES * LO_RES, off).reshape(3, LO_RES, LO_RES)
        off += 3 * LO_RES * LO_RES * 4
        hi = np.frombuffer(raw, "<f4", 3 * HI_RES * HI_RES, off).reshape(3, HI_RES, HI_RES)
        off += 3 * HI_RES * HI_RES * 4
        records.append(DatasetRecord(lo.copy(), hi.copy(), caption, scene))
    return records


def stack_images(records: list[DatasetRecord]) -> np.ndarray:
    return np.stack([r.image for r in records])


def stack_images_hr(records: list[DatasetRecord]) -> np.ndarray:
    return np.stack([r.image_hr for r in records])


def stack_captions(records: list[DatasetRecord]) -> np.ndarray:
    return np.stack([r.caption for r in records])


def dataset_checksum(records: list[DatasetRecord]) -> int:
    crc = 0
    for r in records:
        crc = zlib.crc32(r.image.tobytes(), crc)
        crc = zlib.crc32(r.image_hr.tobytes(), crc)
        crc = zlib.crc32(r.caption.tobytes(), crc)
    return crc
