"""
Image container, FAST-9 corners, BRIEF descriptors, brute-force Hamming matching and
attention-mask overlay.

Detectors are pluggable: FastBriefDetector computes features from pixels, ExternalDetector
replays per-frame keypoint/descriptor files produced by any other detector.
"""

import functools
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter

from errors import InvalidArgumentError, ParseError

logger = logging.getLogger(__name__)

MIN_IMAGE_SIDE = 16
BRIEF_BITS = 256
BRIEF_PATCH_RADIUS = 15
BRIEF_BORDER = 16
BRIEF_BLUR = 9
SINGLE_CANDIDATE_MAX_DISTANCE = 64

# 16-pixel Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy)
FAST_CIRCLE = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)  # fmt: skip
FAST_ARC = 9

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit grayscale image; pixels has shape (height, width)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.size != self.width * self.height:
            raise InvalidArgumentError(
                f"Pixel buffer of {pixels.size} values does not match {self.width}x{self.height}"
            )
        if self.width < MIN_IMAGE_SIDE or self.height < MIN_IMAGE_SIDE:
            raise InvalidArgumentError(f"Images must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8).reshape(self.height, self.width).copy()
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @classmethod
    def from_array(cls, array):
        array = np.asarray(array)
        if array.ndim != 2:
            raise InvalidArgumentError(f"Expected a 2-D intensity array, got shape {array.shape}")
        return cls(int(array.shape[1]), int(array.shape[0]), array)

    @classmethod
    def load(cls, path):
        return cls.from_array(read_pgm(path))

    def save(self, path):
        write_pgm(path, self.pixels)

    @property
    def shape(self):
        return self.height, self.width


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float = 0.0


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: int


# --- PGM codec ---


def write_pgm(path, array):
    """Binary P5 PGM with maxval 255."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise InvalidArgumentError(f"PGM data must be 2-D, got shape {array.shape}")
    data = np.clip(array, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", path=str(path))
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(f"unsupported PGM magic {tokens[0]!r}", path=str(path))
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise ParseError(f"bad PGM header: {e}", path=str(path)) from e
    if maxval != 255:
        raise ParseError(f"only 8-bit PGM is supported, maxval={maxval}", path=str(path))
    pos += 1  # single whitespace after maxval
    if width <= 0 or height <= 0 or len(raw) - pos < width * height:
        raise ParseError("PGM pixel data truncated", path=str(path))
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return data.reshape(height, width).copy()


# --- FAST ---


def _contiguous_arc(mask):
    """True where at least FAST_ARC circularly-contiguous ring entries are set."""
    extended = np.concatenate([mask, mask[: FAST_ARC - 1]], axis=0)
    out = np.zeros(mask.shape[1:], dtype=bool)
    for start in range(len(FAST_CIRCLE)):
        out |= np.all(extended[start : start + FAST_ARC], axis=0)
    return out


def fast_score_map(img: Image, threshold: int):
    """Per-pixel FAST-9 score (0 where the segment test fails)."""
    p = img.pixels.astype(np.int32)
    H, W = p.shape
    center = p[3 : H - 3, 3 : W - 3]
    ring = np.stack([p[3 + dy : H - 3 + dy, 3 + dx : W - 3 + dx] for dx, dy in FAST_CIRCLE])
    diff = ring - center
    brighter = diff > threshold
    darker = diff < -threshold
    corner = _contiguous_arc(brighter) | _contiguous_arc(darker)
    bright_score = np.where(brighter, diff - threshold, 0).sum(axis=0)
    dark_score = np.where(darker, -diff - threshold, 0).sum(axis=0)
    scores = np.zeros((H, W), dtype=np.int64)
    scores[3 : H - 3, 3 : W - 3] = np.where(corner, np.maximum(bright_score, dark_score), 0)
    return scores


def detect_fast(img: Image, threshold: int = 20, max_keypoints: int = 500) -> List[Keypoint]:
    """FAST-9 corners with 3x3 non-maximum suppression, strongest first."""
    if not 1 <= threshold <= 254:
        raise InvalidArgumentError(f"FAST threshold must be in [1, 254], got {threshold}")
    scores = fast_score_map(img, int(threshold))
    local_max = maximum_filter(scores, size=3, mode="constant", cval=0)
    keep = (scores > 0) & (scores >= local_max)
    ys, xs = np.nonzero(keep)
    values = scores[ys, xs]
    order = np.lexsort((xs, ys, -values))[: max(0, int(max_keypoints))]
    return [Keypoint(float(xs[i]), float(ys[i]), float(values[i])) for i in order]


# --- BRIEF ---


@functools.lru_cache(maxsize=8)
def brief_pattern(pattern_seed: int = 0):
    """(256, 4) integer offsets (dx1, dy1, dx2, dy2) inside the 31x31 patch."""
    rng = np.random.default_rng(pattern_seed)
    pattern = np.rint(rng.normal(0.0, (2 * BRIEF_PATCH_RADIUS + 1) / 5.0, size=(BRIEF_BITS, 4)))
    pattern = np.clip(pattern, -BRIEF_PATCH_RADIUS, BRIEF_PATCH_RADIUS).astype(np.int64)
    pattern.setflags(write=False)
    return pattern


def compute_brief(img: Image, kps: Sequence[Keypoint], pattern_seed: int = 0) -> Tuple[np.ndarray, List[int]]:
    """256-bit descriptors as packed (K, 32) uint8 rows, plus the indices of the keypoints kept.

    Keypoints closer than 16 px to the border are dropped.
    """
    H, W = img.shape
    index_map = []
    coords = []
    for i, kp in enumerate(kps):
        x, y = int(round(kp.x)), int(round(kp.y))
        if BRIEF_BORDER <= x <= W - 1 - BRIEF_BORDER and BRIEF_BORDER <= y <= H - 1 - BRIEF_BORDER:
            index_map.append(i)
            coords.append((x, y))
    if not coords:
        return np.zeros((0, BRIEF_BITS // 8), dtype=np.uint8), index_map
    blurred = uniform_filter(img.pixels.astype(np.float64), size=BRIEF_BLUR, mode="nearest")
    pattern = brief_pattern(pattern_seed)
    xy = np.asarray(coords, dtype=np.int64)
    x, y = xy[:, 0:1], xy[:, 1:2]
    first = blurred[y + pattern[:, 1], x + pattern[:, 0]]
    second = blurred[y + pattern[:, 3], x + pattern[:, 2]]
    return np.packbits(first < second, axis=1), index_map


# --- Matching ---


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidArgumentError(f"Descriptor arrays must share a bit length, got {a.shape} and {b.shape}")
    return _POPCOUNT[np.bitwise_xor(a[:, None, :], b[None, :, :])].sum(axis=2).astype(np.int64)


def match_bruteforce(a, b, ratio: Optional[float] = 0.8, cross_check: bool = True) -> List[Match]:
    """Nearest-neighbour Hamming matches with Lowe ratio test and mutual cross-check.

    ratio=None disables the ratio test. With a single candidate in b there is no second
    neighbour and the match is kept only below an absolute distance of 64.
    """
    if ratio is not None and not 0.0 < ratio <= 1.0:
        raise InvalidArgumentError(f"ratio must be in (0, 1], got {ratio}")
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if len(a) == 0 or len(b) == 0:
        return []
    D = hamming_matrix(a, b)
    best_b = np.argmin(D, axis=1)
    best_a = np.argmin(D, axis=0)
    matches = []
    for i, j in enumerate(best_b):
        d1 = int(D[i, j])
        if ratio is not None:
            if D.shape[1] == 1:
                if d1 >= SINGLE_CANDIDATE_MAX_DISTANCE:
                    continue
            else:
                d2 = int(np.partition(D[i], 1)[1])
                if not d1 < ratio * d2:
                    continue
        if cross_check and best_a[j] != i:
            continue
        matches.append(Match(i, int(j), d1))
    matches.sort(key=lambda m: (m.distance, m.index_a))
    return matches


# --- Attention masks ---


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Block grid of kept (True) / excluded (False) image regions."""

    block_size: int
    grid: np.ndarray

    def __post_init__(self):
        bs = int(self.block_size)
        if bs < 1 or bs & (bs - 1):
            raise InvalidArgumentError(f"block_size must be a power of two, got {self.block_size}")
        grid = np.asarray(self.grid, dtype=bool)
        if grid.ndim != 2 or grid.size == 0:
            raise InvalidArgumentError(f"Mask grid must be a non-empty 2-D array, got shape {grid.shape}")
        grid = grid.copy()
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "block_size", bs)

    @staticmethod
    def grid_shape(width, height, block_size):
        return math.ceil(height / block_size), math.ceil(width / block_size)

    @classmethod
    def full(cls, width, height, block_size=16, value=True):
        return cls(block_size, np.full(cls.grid_shape(width, height, block_size), bool(value)))

    @property
    def kept_fraction(self):
        return float(np.count_nonzero(self.grid)) / self.grid.size

    def matches_image(self, width, height):
        return self.grid.shape == self.grid_shape(width, height, self.block_size)

    def to_dict(self):
        return {"block_size": self.block_size, "kept_fraction": self.kept_fraction}


def mask_indices(kps: Sequence[Keypoint], mask: BinaryMask, image_size=None) -> List[int]:
    """Indices of keypoints whose block is kept. image_size is (width, height)."""
    if image_size is not None and not mask.matches_image(*image_size):
        raise InvalidArgumentError(
            f"Mask grid {mask.grid.shape} at block {mask.block_size} does not fit image {image_size[0]}x{image_size[1]}"
        )
    rows, cols = mask.grid.shape
    keep = []
    for i, kp in enumerate(kps):
        by, bx = int(kp.y // mask.block_size), int(kp.x // mask.block_size)
        if not (0 <= by < rows and 0 <= bx < cols):
            raise InvalidArgumentError(f"Keypoint ({kp.x}, {kp.y}) falls outside the mask grid {mask.grid.shape}")
        if mask.grid[by, bx]:
            keep.append(i)
    return keep


def apply_mask(kps: Sequence[Keypoint], mask: BinaryMask, image_size=None) -> List[Keypoint]:
    """Keypoints whose containing block is kept, in input order."""
    return [kps[i] for i in mask_indices(kps, mask, image_size)]


def mask_reduction(mask: BinaryMask) -> float:
    """Fraction of image blocks excluded from the search space."""
    return 1.0 - mask.kept_fraction


def write_mask(path, mask: BinaryMask):
    """PGM at block resolution (0 excluded, 255 kept) plus a JSON sidecar."""
    write_pgm(path, np.where(mask.grid, 255, 0))
    with open(os.path.splitext(str(path))[0] + ".json", "w") as f:
        json.dump(mask.to_dict(), f, indent=2, sort_keys=True)


def read_mask(path) -> BinaryMask:
    grid = read_pgm(path) > 127
    sidecar = os.path.splitext(str(path))[0] + ".json"
    try:
        with open(sidecar) as f:
            meta = json.load(f)
    except FileNotFoundError as e:
        raise ParseError("mask sidecar JSON missing", path=sidecar) from e
    except json.JSONDecodeError as e:
        raise ParseError(f"bad mask sidecar: {e.msg}", path=sidecar, line=e.lineno) from e
    if not isinstance(meta, dict) or "block_size" not in meta:
        raise ParseError("mask sidecar has no block_size", path=sidecar)
    return BinaryMask(int(meta["block_size"]), grid)


def write_attention_heatmap(path, scores, grid_shape):
    """Token scores rescaled to 0..255 at block resolution."""
    s = np.asarray(scores, dtype=np.float64).reshape(grid_shape)
    span = s.max() - s.min()
    scaled = np.zeros_like(s) if span <= 0 else (s - s.min()) / span * 255.0
    write_pgm(path, np.rint(scaled))


# --- External detector files ---


def write_external_features(path, kps: Sequence[Keypoint], descriptors: np.ndarray):
    descriptors = np.asarray(descriptors, dtype=np.uint8).reshape(len(kps), -1)
    bits = descriptors.shape[1] * 8
    lines = [f"{len(kps)} {bits}"]
    for kp, row in zip(kps, descriptors):
        lines.append(f"{kp.x!r} {kp.y!r} {kp.score!r} {row.tobytes().hex()}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_external_features(path) -> Tuple[List[Keypoint], np.ndarray]:
    path = str(path)
    with open(path) as f:
        lines = [line.strip() for line in f]
    if not lines or not lines[0]:
        raise ParseError("missing 'K D' header", path=path, line=1)
    try:
        count, bits = (int(v) for v in lines[0].split())
    except ValueError as e:
        raise ParseError(f"bad header {lines[0]!r}", path=path, line=1) from e
    if bits <= 0 or bits % 8:
        raise ParseError(f"descriptor bit length {bits} is not a positive multiple of 8", path=path, line=1)
    body = [line for line in lines[1:] if line]
    if len(body) != count:
        raise ParseError(f"header announces {count} keypoints, found {len(body)}", path=path, line=1)
    kps = []
    descriptors = np.zeros((count, bits // 8), dtype=np.uint8)
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"expected 'x y score hexbits', got {len(parts)} fields", path=path, line=i + 2)
        try:
            kps.append(Keypoint(float(parts[0]), float(parts[1]), float(parts[2])))
            row = bytes.fromhex(parts[3])
        except ValueError as e:
            raise ParseError(str(e), path=path, line=i + 2) from e
        if len(row) != bits // 8:
            raise ParseError(f"descriptor has {len(row) * 8} bits, expected {bits}", path=path, line=i + 2)
        descriptors[i] = np.frombuffer(row, dtype=np.uint8)
    return kps, descriptors


# --- Detector interface ---


class FeatureDetector:
    """Detect keypoints on a frame, then describe a subset of them."""

    name = "base"

    def detect(self, frame_index: int, image: Image) -> List[Keypoint]:
        raise NotImplementedError

    def describe(self, frame_index: int, image: Image, keypoints: Sequence[Keypoint], source_indices: Sequence[int]):
        """Descriptors for `keypoints` (which are detect()'s output at `source_indices`).

        Returns (descriptors, kept) where kept indexes into `keypoints`.
        """
        raise NotImplementedError


class FastBriefDetector(FeatureDetector):
    name = "fast"

    def __init__(self, threshold=20, max_keypoints=500, pattern_seed=0):
        self.threshold = threshold
        self.max_keypoints = max_keypoints
        self.pattern_seed = pattern_seed

    def detect(self, frame_index, image):
        return detect_fast(image, self.threshold, self.max_keypoints)

    def describe(self, frame_index, image, keypoints, source_indices):
        return compute_brief(image, keypoints, self.pattern_seed)

    def to_dict(self):
        return {
            "name": self.name,
            "threshold": self.threshold,
            "max_keypoints": self.max_keypoints,
            "pattern_seed": self.pattern_seed,
        }


class ExternalDetector(FeatureDetector):
    """Replays frame_NNNNNN.txt feature files from a directory."""

    name = "external"

    def __init__(self, directory):
        self.directory = str(directory)
        self._cache = {}

    def _load(self, frame_index):
        if frame_index not in self._cache:
            path = os.path.join(self.directory, f"frame_{frame_index:06d}.txt")
            self._cache[frame_index] = read_external_features(path)
        return self._cache[frame_index]

    def detect(self, frame_index, image):
        kps, _ = self._load(frame_index)
        for kp in kps:
            if not (0 <= kp.x < image.width and 0 <= kp.y < image.height):
                raise InvalidArgumentError(f"External keypoint ({kp.x}, {kp.y}) outside frame {frame_index}")
        return list(kps)

    def describe(self, frame_index, image, keypoints, source_indices):
        _, descriptors = self._load(frame_index)
        return descriptors[list(source_indices)], list(range(len(source_indices)))

    def to_dict(self):
        return {"name": self.name, "directory": self.directory}


def make_detector(spec: str, **fast_options) -> FeatureDetector:
    """'fast' or 'external:<dir>'."""
    if spec == "fast":
        return FastBriefDetector(**fast_options)
    if spec.startswith("external:"):
        directory = spec[len("external:") :]
        if not os.path.isdir(directory):
            raise InvalidArgumentError(f"External feature directory not found: {directory}")
        return ExternalDetector(directory)
    raise InvalidArgumentError(f"Unknown detector {spec!r}; expected 'fast' or 'external:<dir>'")
