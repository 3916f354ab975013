"""CHASE_DB1 ingestion, augmentation and a synthetic vessel generator."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

CHASE_TRAIN, CHASE_VAL = 20, 8
MASK_SUFFIX = "_1stHO"


@dataclass
class Sample:
    image: np.ndarray  # (3, h, w) float32 in [0, 1]
    mask: np.ndarray  # (1, h, w) float32 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValueError(f"{self.id}: image must be (c,h,w) and mask (1,h,w)")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} disagree")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError(f"{self.id}: mask is not binary")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError(f"{self.id}: image values outside [0, 1]")


@dataclass
class ChaseRecord:
    image_path: Path
    mask_path: Path
    resolution: tuple[int, int]

    @property
    def id(self) -> str:
        return self.image_path.stem

    def load(self) -> Sample:
        try:
            img = Image.open(self.image_path).convert("RGB")
            msk = Image.open(self.mask_path).convert("L")
        except OSError as exc:
            raise OSError(f"cannot read {self.image_path.name} / {self.mask_path.name}: {exc}") from exc
        image = _center_square(np.asarray(img, dtype=np.float32) / 255.0)
        mask = _center_square(np.asarray(msk, dtype=np.float32) / 255.0)
        h, w = self.resolution
        if image.shape[:2] != (h, w):
            image = np.stack([_resize(image[..., c], h, w) for c in range(3)], axis=-1)
            mask = _resize(mask, h, w)
        image = np.clip(image, 0.0, 1.0).transpose(2, 0, 1)
        mask = (mask >= 0.5).astype(np.float32)[None]
        return Sample(np.ascontiguousarray(image), mask, self.id)


def _center_square(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return a[top : top + s, left : left + s]


def _resize(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    im = Image.fromarray(plane.astype(np.float32), mode="F")
    return np.asarray(im.resize((w, h), Image.BILINEAR), dtype=np.float32)


@dataclass
class DatasetIndex:
    train: list
    val: list
    root: Path | None = None
    resolution: tuple[int, int] | None = None
    warnings: list[str] = field(default_factory=list)

    @staticmethod
    def _materialize(items) -> list[Sample]:
        return [it if isinstance(it, Sample) else it.load() for it in items]

    def train_samples(self) -> list[Sample]:
        return self._materialize(self.train)

    def val_samples(self) -> list[Sample]:
        return self._materialize(self.val)


def load_chase(root, resolution=(960, 960)) -> DatasetIndex:
    """Index a CHASE_DB1 directory: sorted by stem, first 20 train, last 8 val.

    Images are centre-cropped to a square, resized to ``resolution`` and
    normalised to [0, 1]; first-observer masks are binarised at 0.5.
    """
    root = Path(root)
    h, w = resolution
    if h % 8 or w % 8:
        raise ValueError(f"resolution must be divisible by 8, got {h}x{w}")
    if not root.is_dir():
        raise FileNotFoundError(f"CHASE directory not found: {root}")
    images = sorted(
        (p for p in root.iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png", ".tif") and "HO" not in p.stem),
        key=lambda p: p.stem,
    )
    records = []
    for img in images:
        candidates = [img.with_name(img.stem + MASK_SUFFIX + ext) for ext in (".png", ".gif", ".tif")]
        mask = next((c for c in candidates if c.exists()), None)
        if mask is None:
            raise FileNotFoundError(f"no first-observer mask for image {img.name}")
        records.append(ChaseRecord(img, mask, (h, w)))
    notes = []
    total = CHASE_TRAIN + CHASE_VAL
    if len(records) == total:
        n_train = CHASE_TRAIN
    else:
        n_train = int(round(len(records) * CHASE_TRAIN / total))
        msg = f"expected {total} CHASE images, found {len(records)}; split {n_train}/{len(records) - n_train}"
        warnings.warn(msg)
        notes.append(msg)
    return DatasetIndex(records[:n_train], records[n_train:], root, (h, w), notes)


# ---------------------------------------------------------------------------
# augmentation


def adjust_brightness(s: Sample, factor: float) -> Sample:
    return Sample(np.clip(s.image * np.float32(factor), 0.0, 1.0), s.mask, s.id)


def hflip(s: Sample) -> Sample:
    return Sample(s.image[:, :, ::-1].copy(), s.mask[:, :, ::-1].copy(), s.id)


def vflip(s: Sample) -> Sample:
    return Sample(s.image[:, ::-1].copy(), s.mask[:, ::-1].copy(), s.id)


def rotate(s: Sample, degrees: float) -> Sample:
    """Rotate about the centre: bilinear/edge-replicate image, nearest mask."""
    image = ndimage.rotate(s.image, degrees, axes=(2, 1), reshape=False, order=1, mode="nearest")
    mask = ndimage.rotate(s.mask, degrees, axes=(2, 1), reshape=False, order=0, mode="nearest")
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), (mask >= 0.5).astype(np.float32), s.id)


def augment(s: Sample, rng: np.random.Generator, brightness=0.2, p_hflip=0.5, p_vflip=0.5, max_deg=1.0) -> Sample:
    """Brightness jitter, random flips, small rotation, in that order.

    All draws are taken up front so the sequence of random numbers consumed
    does not depend on which branches fire.
    """
    factor = rng.uniform(1 - brightness, 1 + brightness)
    do_h = rng.random() < p_hflip
    do_v = rng.random() < p_vflip
    angle = rng.uniform(-max_deg, max_deg)
    s = adjust_brightness(s, factor)
    if do_h:
        s = hflip(s)
    if do_v:
        s = vflip(s)
    if max_deg > 0:
        s = rotate(s, angle)
    return s


# ---------------------------------------------------------------------------
# synthetic vessels


def _segment_mask(h: int, w: int, p0, p1, radius: float) -> np.ndarray:
    # pixels whose centre lies within radius of the segment p0-p1
    lo_y = int(max(0, np.floor(min(p0[0], p1[0]) - radius - 1)))
    hi_y = int(min(h, np.ceil(max(p0[0], p1[0]) + radius + 2)))
    lo_x = int(max(0, np.floor(min(p0[1], p1[1]) - radius - 1)))
    hi_x = int(min(w, np.ceil(max(p0[1], p1[1]) + radius + 2)))
    out = np.zeros((h, w), bool)
    if lo_y >= hi_y or lo_x >= hi_x:
        return out
    yy, xx = np.mgrid[lo_y:hi_y, lo_x:hi_x].astype(np.float64)
    d = np.subtract(p1, p0)
    L2 = float(d @ d)
    t = np.zeros_like(yy) if L2 == 0 else np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / L2, 0, 1)
    dist2 = (yy - p0[0] - t * d[0]) ** 2 + (xx - p0[1] - t * d[1]) ** 2
    out[lo_y:hi_y, lo_x:hi_x] = dist2 <= radius**2
    return out


def _vessel_tree(rng, h: int, w: int) -> np.ndarray:
    """One branching smooth stroke, width tapering from up to 4 px down to 1 px."""
    mask = np.zeros((h, w), bool)
    side = rng.integers(4)
    edge = rng.uniform(0.15, 0.85)
    start = [(0.0, edge * w), (h - 1.0, edge * w), (edge * h, 0.0), (edge * h, w - 1.0)][side]
    heading = [np.pi / 2, -np.pi / 2, 0.0, np.pi][side] + rng.uniform(-0.5, 0.5)
    stack = [(np.array(start), heading, rng.uniform(3.0, 4.0), 0)]
    step = max(h, w) / 16
    n_strokes = 0
    while stack and n_strokes < 12:
        pos, ang, width, depth = stack.pop()
        n_strokes += 1
        for _ in range(int(rng.integers(6, 14))):
            ang += rng.normal(0, 0.25)
            # angle convention: 0 -> +y (down rows)
            nxt = pos + step * np.array([np.cos(ang), np.sin(ang)])
            mask |= _segment_mask(h, w, pos, nxt, max(width, 1.0) / 2)
            pos = nxt
            if not (0 <= pos[0] < h and 0 <= pos[1] < w):
                break
            if depth < 3 and rng.random() < 0.15:
                stack.append((pos.copy(), ang + rng.choice([-1, 1]) * rng.uniform(0.4, 1.0), width * 0.7, depth + 1))
            width = max(1.0, width * 0.93)
    return mask


def _texture(rng, h: int, w: int) -> np.ndarray:
    coarse = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 8, mode="wrap")
    coarse = (coarse - coarse.min()) / (np.ptp(coarse) + 1e-12)
    return 0.45 + 0.25 * coarse


def synth_vessels(seed: int, count: int, hw=(64, 64)) -> list[Sample]:
    """Deterministic fundus-like images: dark branching vessels on a smooth background.

    Foreground fraction is kept within [2 %, 30 %].
    """
    h, w = hw
    if h % 8 or w % 8:
        raise ValueError(f"size must be divisible by 8, got {h}x{w}")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        target = rng.uniform(0.06, 0.16)
        mask = np.zeros((h, w), bool)
        for _ in range(20):
            cand = mask | _vessel_tree(rng, h, w)
            if cand.mean() > 0.30:
                continue
            mask = cand
            if mask.mean() >= target:
                break
        if mask.mean() < 0.02:
            # fall back to a straight central vessel to honour the lower bound
            r = max(1.0, np.sqrt(0.02 * h * w) / 2)
            mask |= _segment_mask(h, w, (0.0, w / 2), (h - 1.0, w / 2), max(r, 2.0))
        base = _texture(rng, h, w)
        contrast = rng.uniform(0.25, 0.35)
        lum = base * (1.0 - contrast * mask) + rng.normal(0, 0.015, (h, w))
        gains = np.array([0.95, 0.8, 0.55]) + rng.uniform(-0.05, 0.05, 3)
        offs = np.array([0.05, 0.02, 0.0])
        image = np.clip(gains[:, None, None] * lum[None] + offs[:, None, None], 0.0, 1.0)
        out.append(Sample(image.astype(np.float32), mask[None].astype(np.float32), f"synth-{seed}-{i}"))
    return out


def synthetic_index(seed: int = 0, n_train: int = CHASE_TRAIN, n_val: int = CHASE_VAL, hw=(64, 64)) -> DatasetIndex:
    samples = synth_vessels(seed, n_train + n_val, hw)
    return DatasetIndex(samples[:n_train], samples[n_train:], None, tuple(hw))


def export_png(samples: list[Sample], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in samples:
        img = Image.fromarray(np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8), "RGB")
        msk = Image.fromarray((s.mask[0] * 255).astype(np.uint8), "L")
        ip, mp = out_dir / f"{s.id}.png", out_dir / f"{s.id}{MASK_SUFFIX}.png"
        img.save(ip)
        msk.save(mp)
        paths += [ip, mp]
    return paths


def batch(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])
