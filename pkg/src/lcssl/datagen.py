"""Synthetic scenes and labeled PPM folders.

Scenes are rendered with integer arithmetic only (lattice value noise with
fixed-point interpolation, integer shape tests), so a seed yields the same
bytes on every platform. A scene's class is the kind of its largest shape
times that shape's color family.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, PPMError
from .imaging import decode_ppm, encode_ppm, from_uint8

KINDS = ("circle", "rectangle", "triangle")
FAMILIES = (
    ("red", (200, 40, 40)),
    ("orange", (225, 125, 30)),
    ("yellow", (215, 205, 45)),
    ("green", (50, 170, 60)),
    ("cyan", (40, 185, 195)),
    ("blue", (40, 70, 205)),
    ("purple", (135, 50, 185)),
    ("pink", (225, 105, 175)),
)
N_CLASSES_MAX = len(KINDS) * len(FAMILIES)
COARSE, FINE = 16, 4  # lattice spacings in pixels
LABELS_FILE = "labels.tsv"


def class_parts(label: int) -> tuple[str, str]:
    """``label -> (shape kind, color family)``."""
    if not 0 <= label < N_CLASSES_MAX:
        raise ConfigError(f"class id {label} outside [0, {N_CLASSES_MAX})")
    return KINDS[label % len(KINDS)], FAMILIES[label // len(KINDS)][0]


@dataclass(frozen=True)
class Shape:
    kind: str
    cx: int
    cy: int
    r: int  # half-extent
    color: tuple[int, int, int]
    variant: int = 0  # rectangle aspect / triangle orientation


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: int
    label: int
    bg_colors: tuple[tuple[int, int, int], tuple[int, int, int]]
    coarse: np.ndarray = field(repr=False)  # (size/COARSE + 1)^2 ints in [0, 255]
    fine: np.ndarray = field(repr=False)
    shapes: tuple[Shape, ...] = ()


def _seed_for(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def _color(rng, base, spread):
    return tuple(int(np.clip(c + rng.integers(-spread, spread + 1), 0, 255)) for c in base)


def _shape(rng, kind, size, r_lo, r_hi, color) -> Shape:
    r = int(rng.integers(r_lo, r_hi + 1))
    cx = int(rng.integers(r, size - r))
    cy = int(rng.integers(r, size - r))
    return Shape(kind, cx, cy, r, color, int(rng.integers(0, 4)))


def make_scene(seed: int, size: int, label: int) -> SceneSpec:
    if size < 32:
        raise ConfigError(f"scene size must be >= 32, got {size}")
    kind, _ = class_parts(label)
    rng = np.random.default_rng(seed)
    # a dark and a light near-gray background: the texture survives color
    # jitter and grayscale, and carries no class color
    tint = rng.integers(-16, 17, (2, 3))
    dark = np.clip(rng.integers(0, 96) + tint[0], 0, 255)
    light = np.clip(rng.integers(160, 256) + tint[1], 0, 255)
    bg = (tuple(int(v) for v in dark), tuple(int(v) for v in light))
    if rng.integers(0, 2):
        bg = bg[::-1]
    coarse = rng.integers(0, 256, (size // COARSE + 1,) * 2, dtype=np.int64)
    fine = rng.integers(0, 256, (size // FINE + 1,) * 2, dtype=np.int64)
    family = FAMILIES[label // len(KINDS)][1]
    main = _shape(rng, kind, size, size // 4, size * 11 // 32, _color(rng, family, 20))
    shapes = []
    for _ in range(int(rng.integers(3, 7))):
        other = KINDS[int(rng.integers(0, len(KINDS)))]
        gray = int(rng.integers(0, 256))
        shapes.append(_shape(rng, other, size, size // 21, size * 3 // 32, _color(rng, (gray,) * 3, 12)))
    # the dominant shape is drawn last so it is never occluded
    return SceneSpec(seed, size, label, bg, coarse, fine, tuple(shapes) + (main,))


def _upsample(lattice: np.ndarray, spacing: int, size: int) -> np.ndarray:
    """Fixed-point bilinear upsampling of a value lattice; exact integers."""
    idx = np.arange(size)
    c, f = idx // spacing, idx % spacing
    s = spacing
    a = lattice[c][:, c] * (s - f)[None, :] + lattice[c][:, c + 1] * f[None, :]
    b = lattice[c + 1][:, c] * (s - f)[None, :] + lattice[c + 1][:, c + 1] * f[None, :]
    return (a * (s - f)[:, None] + b * f[:, None]) // (s * s)


def _mask(shape: Shape, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    dx, dy, r = x - shape.cx, y - shape.cy, shape.r
    if shape.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "rectangle":
        # variants 0/1 are wide, 2/3 tall: the short side is 2/3 of r
        short = (2 * r) // 3
        ax, ay = (r, short) if shape.variant < 2 else (short, r)
        return (np.abs(dx) <= ax) & (np.abs(dy) <= ay)
    # isosceles triangle pointing up/down/left/right; apex at distance r
    if shape.variant == 0:
        a, b = dx, -dy
    elif shape.variant == 1:
        a, b = dx, dy
    elif shape.variant == 2:
        a, b = dy, -dx
    else:
        a, b = dy, dx
    return (b <= r) & (2 * np.abs(a) <= r - b) & (b >= -r)


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Scene -> uint8 ``(size, size, 3)`` image."""
    size = spec.size
    noise = (_upsample(spec.coarse, COARSE, size) + _upsample(spec.fine, FINE, size)) // 2
    # stretch the mid range: noise in [64, 192] maps onto [0, 255]
    noise = np.clip((noise - 64) * 2, 0, 255)
    c1 = np.array(spec.bg_colors[0], dtype=np.int64)
    c2 = np.array(spec.bg_colors[1], dtype=np.int64)
    img = c1 + ((c2 - c1)[None, None, :] * noise[..., None]) // 255
    fine = _upsample(spec.fine, FINE, size)
    shade = 176 + fine // 3  # texture inside shapes, 176..261 on a /224 scale
    for shape in spec.shapes:
        m = _mask(shape, size)
        col = np.array(shape.color, dtype=np.int64)
        img[m] = np.clip((col[None, :] * shade[m][:, None]) // 224, 0, 255)
    return img.astype(np.uint8)


def generate_images(seed: int, count: int, size: int = 64, n_classes: int = 10,
                    first_class: int = 0):
    """In-memory corpus: ``(uint8 (count, size, size, 3), int labels)``.

    Classes ``first_class .. first_class + n_classes - 1`` are used in turn, so
    a count divisible by ``n_classes`` is exactly balanced.
    """
    if n_classes < 1 or count < n_classes:
        raise ConfigError(f"need count >= n_classes >= 1, got count={count}, n_classes={n_classes}")
    if first_class < 0 or first_class + n_classes > N_CLASSES_MAX:
        raise ConfigError(f"classes must lie in [0, {N_CLASSES_MAX})")
    labels = first_class + np.arange(count) % n_classes
    images = np.stack([render_scene(make_scene(_seed_for(seed, k), size, int(labels[k])))
                       for k in range(count)])
    return images, labels.astype(np.int64)


def generate_corpus(out_dir, seed: int, count: int, size: int = 64, n_classes: int = 10,
                    first_class: int = 0) -> Path:
    """Write ``count`` PPMs and ``labels.tsv`` into ``out_dir``."""
    images, labels = generate_images(seed, count, size, n_classes, first_class)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        lines = []
        for k, (img, lab) in enumerate(zip(images, labels)):
            name = f"{k:06d}.ppm"
            (out / name).write_bytes(encode_ppm(img))
            lines.append(f"{name}\t{int(lab)}\n")
        with open(out / LABELS_FILE, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(lines)
    except OSError as exc:
        raise ConfigError(f"cannot write corpus to {out}: {exc}") from None
    return out


@dataclass
class Dataset:
    """Images kept as uint8; ``labels`` is ``None`` when the folder has no index."""

    names: list[str]
    images: list[np.ndarray]
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.images)

    def image(self, i: int) -> np.ndarray:
        return from_uint8(self.images[i])

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset([self.names[i] for i in idx], [self.images[i] for i in idx], labels)

    @classmethod
    def from_arrays(cls, images, labels=None) -> "Dataset":
        names = [f"{k:06d}.ppm" for k in range(len(images))]
        lab = None if labels is None else np.asarray(labels, dtype=np.int64)
        return cls(names, [np.asarray(im, dtype=np.uint8) for im in images], lab)


def load_folder(path) -> Dataset:
    """All ``*.ppm`` files in lexicographic order, plus ``labels.tsv`` if present."""
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() == ".ppm")
    names = [p.name for p in files]
    images = [decode_ppm(p.read_bytes(), str(p)) for p in files]
    labels = None
    index = root / LABELS_FILE
    if index.exists():
        table = {}
        for n, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise PPMError(f"{index}:{n}: expected 'filename<TAB>class-id'")
            table[parts[0]] = int(parts[1])
        missing = [n for n in names if n not in table]
        if missing:
            raise PPMError(f"{index}: no label for {missing[0]}")
        labels = np.array([table[n] for n in names], dtype=np.int64)
    return Dataset(names, images, labels)
