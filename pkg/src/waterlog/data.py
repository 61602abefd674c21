"""Dataset layout, PNG I/O, labeled/unlabeled batch composition, toy scenes.

On-disk layout under a dataset root::

    labeled/images/<stem>.png    labeled/masks/<stem>.png
    unlabeled/images/<stem>.png
    <split>/images/<stem>.png    <split>/masks/<stem>.png   (e.g. val, test)

Masks are 8-bit single-channel PNGs, 0 = background, 255 = water.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(ValueError):
    """Dataset layout or content problem; ``problems`` lists every offending file."""

    def __init__(self, message: str, problems: list[str] | None = None):
        self.problems = problems or []
        detail = "".join(f"\n  - {p}" for p in self.problems)
        super().__init__(message + detail)


@dataclass
class DatasetManifest:
    root: str
    split: str = "train"
    labeled: list = field(default_factory=list)  # [(image, mask), ...]
    unlabeled: list = field(default_factory=list)  # [image, ...]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        d["labeled"] = [tuple(p) for p in d["labeled"]]
        return cls(**d)


# ------------------------------------------------------------------ file I/O


def load_image(path) -> np.ndarray:
    """RGB float32 array ``(H, W, 3)`` in ``[0, 1]``."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path) -> np.ndarray:
    """uint8 ``{0, 1}`` array ``(H, W)``; any nonzero pixel counts as water."""
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def save_image(path, image: np.ndarray):
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_mask(path, mask: np.ndarray):
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255, mode="L").save(path)


def _listing(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        return {}
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _pairs(root: Path, sub: str, problems: list[str]):
    images, masks = _listing(root / sub / "images"), _listing(root / sub / "masks")
    for stem in sorted(set(masks) - set(images)):
        problems.append(f"orphan mask without image: {masks[stem]}")
    pairs = []
    for stem, img in images.items():
        if stem not in masks:
            problems.append(f"missing mask for image: {img}")
            continue
        with Image.open(img) as a, Image.open(masks[stem]) as b:
            if a.size != b.size:
                problems.append(f"mask size {b.size} != image size {a.size}: {masks[stem]}")
                continue
        pairs.append((str(img), str(masks[stem])))
    return pairs


def scan_dataset(root, split: str = "train") -> DatasetManifest:
    """Build a manifest; lexicographic order, image/mask paired by stem.

    ``split="train"`` reads ``labeled/`` and ``unlabeled/``; any other split
    name reads ``<split>/images`` + ``<split>/masks`` as labeled pairs.
    """
    root = Path(root)
    problems: list[str] = []
    if split == "train":
        if not (root / "labeled" / "images").is_dir():
            raise DatasetError(f"missing directory {root / 'labeled' / 'images'}")
        if not (root / "labeled" / "masks").is_dir():
            raise DatasetError(f"missing directory {root / 'labeled' / 'masks'}")
        labeled = _pairs(root, "labeled", problems)
        unlabeled = [str(p) for p in _listing(root / "unlabeled" / "images").values()]
    else:
        for sub in ("images", "masks"):
            if not (root / split / sub).is_dir():
                raise DatasetError(f"missing directory {root / split / sub}")
        labeled = _pairs(root, split, problems)
        unlabeled = []
    if problems:
        raise DatasetError(f"dataset at {root} failed validation", problems)
    return DatasetManifest(str(root), split, labeled, unlabeled)


# ------------------------------------------------------------ batch sampling


@dataclass
class Batch:
    labeled: list  # [(image_path, mask_path)]
    unlabeled: list  # [image_path]
    seeds: list  # one int per sample, labeled first
    epoch: int = 0
    index: int = 0


def unlabeled_pool_size(n_labeled: int, n_unlabeled: int, ratio: float) -> int:
    """``n_l + ratio * (n_u - n_l)`` rounded half up; ratio 0 keeps ``n_l`` images."""
    if n_unlabeled <= n_labeled:
        return n_unlabeled
    return int(math.floor(n_labeled + ratio * (n_unlabeled - n_labeled) + 0.5))


def subsample_unlabeled(manifest: DatasetManifest, ratio: float, seed: int = 0) -> list:
    n = unlabeled_pool_size(len(manifest.labeled), len(manifest.unlabeled), ratio)
    if n >= len(manifest.unlabeled):
        return list(manifest.unlabeled)
    rng = np.random.default_rng([seed, 0x5EED])
    keep = np.sort(rng.choice(len(manifest.unlabeled), size=n, replace=False))
    return [manifest.unlabeled[i] for i in keep]


def iterations_per_epoch(n_labeled: int, batch_labeled: int) -> int:
    return max(1, n_labeled // batch_labeled)


def sample_epoch(manifest: DatasetManifest, batch_labeled: int, batch_unlabeled: int, epoch: int,
                 seed: int = 0, unlabeled: list | None = None):
    """Yield the batches of one epoch; reproducible from ``(seed, epoch)``.

    Labeled images are reshuffled every epoch. The unlabeled pool is cycled
    through successive independent permutations (a stream continuing across
    epochs), so every iteration sees ``batch_unlabeled`` images.
    """
    labeled = manifest.labeled
    if not labeled:
        raise DatasetError("no labeled images in manifest")
    pool = manifest.unlabeled if unlabeled is None else unlabeled
    n_iter = iterations_per_epoch(len(labeled), batch_labeled)
    rng = np.random.default_rng([seed, epoch, 1])
    if batch_labeled > len(labeled):
        log.warning("batch_labeled %d > %d labeled images; sampling with replacement", batch_labeled, len(labeled))
        order = rng.integers(0, len(labeled), size=n_iter * batch_labeled)
    else:
        order = rng.permutation(len(labeled))
    u_order = _unlabeled_stream(len(pool), epoch * n_iter * batch_unlabeled, n_iter * batch_unlabeled, seed)
    per = batch_labeled + batch_unlabeled
    for it in range(n_iter):
        li = order[it * batch_labeled : (it + 1) * batch_labeled]
        ui = u_order[it * batch_unlabeled : (it + 1) * batch_unlabeled]
        ss = np.random.SeedSequence([seed, epoch, it, 2]).generate_state(per)
        yield Batch(
            labeled=[labeled[i] for i in li],
            unlabeled=[pool[i] for i in ui],
            seeds=[int(s) for s in ss],
            epoch=epoch,
            index=it,
        )


def _unlabeled_stream(n: int, start: int, count: int, seed: int) -> list:
    """Slice ``[start, start + count)`` of the infinite cycled-permutation stream."""
    if n == 0 or count == 0:
        return []
    out = []
    pos = start
    while len(out) < count:
        cycle, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, cycle, 3]).permutation(n)
        take = min(n - offset, count - len(out))
        out.extend(int(i) for i in perm[offset : offset + take])
        pos += take
    return out


class ImageCache:
    """Decode-once cache of images and masks (desk-scale datasets fit in memory)."""

    def __init__(self):
        self._images: dict[str, np.ndarray] = {}
        self._masks: dict[str, np.ndarray] = {}

    def image(self, path) -> np.ndarray:
        key = str(path)
        if key not in self._images:
            self._images[key] = load_image(key)
        return self._images[key]

    def mask(self, path) -> np.ndarray:
        key = str(path)
        if key not in self._masks:
            self._masks[key] = load_mask(key)
        return self._masks[key]


# ---------------------------------------------------------------- toy scenes


@dataclass
class ToySceneParams:
    """Knobs of the synthetic scene generator.

    Water is a union of 1-3 ellipses whose colour differs from the local
    background by ``contrast``; reflections are bright streaks inside the
    water, and the background carries texture plus distractor patches of
    similar hue. ``coverage`` bounds the positive fraction of every mask.
    ``lighting`` scales a per-scene global gain, contrast change and colour
    cast (day/night/weather variation); 0 disables it.
    """

    coverage: tuple = (0.05, 0.40)
    contrast: float = 0.12
    texture: float = 0.10
    noise: float = 0.03
    reflections: float = 0.25
    distractors: int = 2
    max_blobs: int = 3
    lighting: float = 0.0


def _smooth_noise(rng, h, w, cells):
    coarse = rng.random((cells + 1, cells + 1))
    img = Image.fromarray((coarse * 255).astype(np.uint8)).resize((w, h), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32) / 255.0


def _ellipse(h, w, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    y, x = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u, v = (x * c + y * s) / rx, (-x * s + y * c) / ry
    return u * u + v * v <= 1.0


def render_toy_scene(rng: np.random.Generator, size: tuple, params: ToySceneParams | None = None):
    """One synthetic ``(image, mask)``: ``image`` float32 ``(H, W, 3)``, ``mask`` uint8."""
    params = params or ToySceneParams()
    h, w = size
    lo, hi = params.coverage
    for _ in range(100):
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(1, params.max_blobs + 1))):
            cy, cx = rng.uniform(0.35 * h, 0.95 * h), rng.uniform(0.1 * w, 0.9 * w)
            ry, rx = rng.uniform(0.08, 0.25) * h, rng.uniform(0.12, 0.4) * w
            mask |= _ellipse(h, w, cy, cx, ry, rx, rng.uniform(-0.4, 0.4))
        frac = mask.mean()
        if lo <= frac <= hi:
            break
    else:  # pragma: no cover - 100 misses are practically impossible with default params
        raise RuntimeError("could not draw a mask inside the coverage band")

    # road-like background: vertical gradient + texture + tint
    base = rng.uniform(0.3, 0.6)
    grad = np.linspace(-0.1, 0.1, h, dtype=np.float32)[:, None]
    tex = params.texture * (_smooth_noise(rng, h, w, 8) - 0.5) + 0.5 * params.texture * (_smooth_noise(rng, h, w, 24) - 0.5)
    tint = rng.uniform(-0.05, 0.05, size=3).astype(np.float32)
    img = (base + grad + tex)[..., None] + tint

    # distractors: darker/bluer patches that are not water
    for _ in range(params.distractors):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        patch = _ellipse(h, w, cy, cx, rng.uniform(3, 8), rng.uniform(3, 10), rng.uniform(0, math.pi))
        img[patch] += np.array([-0.6, -0.3, 0.2], dtype=np.float32) * params.contrast

    # water: shift towards a sky-reflecting blue-grey, smoother texture, reflection streaks
    water_col = np.array([-0.7, -0.2, 0.6], dtype=np.float32) * params.contrast
    smooth = _smooth_noise(rng, h, w, 4) - 0.5
    img[mask] = img[mask] * 0.85 + 0.15 * (base + 0.1 * smooth[mask])[..., None] + water_col
    streaks = (np.sin(np.arange(w, dtype=np.float32) * rng.uniform(0.3, 0.8) + rng.uniform(0, 6)) > 0.7)[None, :]
    refl = mask & streaks & (rng.random((h, w)) < params.reflections)
    img[refl] += 0.15
    if params.lighting > 0:
        l = params.lighting
        gain = rng.uniform(1.0 - l, 1.0 + 0.5 * l)
        contrast = rng.uniform(1.0 - 0.5 * l, 1.0 + 0.5 * l)
        cast = rng.uniform(-0.3 * l, 0.3 * l, size=3).astype(np.float32)
        img = ((img - img.mean()) * contrast + img.mean()) * gain + cast
    img += rng.normal(0.0, params.noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def generate_toy_dataset(n_labeled: int, n_unlabeled: int, image_size, seed: int, out_path,
                         n_val: int = 50, params: ToySceneParams | None = None) -> DatasetManifest:
    """Write a synthetic dataset in the canonical layout and return its train manifest.

    Every split draws from an independent stream of ``seed``, so regenerating
    with the same arguments reproduces identical files.
    """
    if n_labeled < 0 or n_unlabeled < 0 or n_val < 0:
        raise ValueError("dataset sizes must be non-negative")
    out = Path(out_path)
    size = tuple(image_size) if not isinstance(image_size, int) else (image_size, image_size)
    layout = [("labeled", n_labeled, True), ("unlabeled", n_unlabeled, False), ("val", n_val, True)]
    for k, (split, n, with_mask) in enumerate(layout):
        (out / split / "images").mkdir(parents=True, exist_ok=True)
        if with_mask:
            (out / split / "masks").mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng([seed, k])
        for i in range(n):
            img, mask = render_toy_scene(rng, size, params)
            save_image(out / split / "images" / f"{split}_{i:05d}.png", img)
            if with_mask:
                save_mask(out / split / "masks" / f"{split}_{i:05d}.png", mask)
    manifest = scan_dataset(out, "train")
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest
