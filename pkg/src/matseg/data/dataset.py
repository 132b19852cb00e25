"""Image/mask datasets on disk and in memory.

On-disk layout::

    <root>/images/<stem>.pgm   8-bit grayscale frame
    <root>/masks/<stem>.pgm    8-bit mask, foreground where value > 127
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from ..errors import FormatError, ShapeError, ValidationError
from .pnm import read_pgm, to_uint8, write_pgm


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ShapeError(f"sample {self.id}: image {self.image.shape} vs mask {self.mask.shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValidationError(f"sample {self.id}: mask is not binary")


def image_from_pgm(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / np.float32(255.0))[None]


def mask_from_pgm(pixels: np.ndarray) -> np.ndarray:
    return (pixels > 127).astype(np.float32)[None]


def _stems(folder: Path) -> dict:
    return {p.stem: p for p in folder.glob("*.pgm")}


def load_dataset(root) -> List[Sample]:
    """Load matched image/mask pairs sorted by stem."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root}: expected 'images/' and 'masks/' subdirectories")
    images, masks = _stems(img_dir), _stems(mask_dir)
    for stem in sorted(set(images) ^ set(masks)):
        side = "mask" if stem in images else "image"
        raise FileNotFoundError(f"{root}: stem '{stem}' has no matching {side} file")
    samples = []
    for stem in sorted(images):
        img = read_pgm(images[stem])
        msk = read_pgm(masks[stem])
        if img.shape != msk.shape:
            raise FormatError(f"stem '{stem}': image {img.shape} and mask {msk.shape} differ in size")
        samples.append(Sample(image_from_pgm(img), mask_from_pgm(msk), stem))
    return samples


def load_images(folder) -> List[Tuple[str, np.ndarray]]:
    """Load every ``*.pgm`` in a folder as ``(stem, (1, H, W) image)``."""
    folder = Path(folder)
    return [(p.stem, image_from_pgm(read_pgm(p))) for p in sorted(folder.glob("*.pgm"))]


def save_dataset(samples: Sequence[Sample], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_pgm(root / "images" / f"{s.id}.pgm", to_uint8(s.image[0]))
        write_pgm(root / "masks" / f"{s.id}.pgm", (s.mask[0] > 0).astype(np.uint8) * 255)


def split_dataset(samples: Sequence[Sample], n_train: int, n_test: int, seed: int = 0):
    """Seeded shuffle, then the first ``n_train`` go to train and the next ``n_test`` to test."""
    if n_train < 0 or n_test < 0:
        raise ValidationError("split sizes must be non-negative")
    if n_train + n_test > len(samples):
        raise ValidationError(f"requested {n_train}+{n_test} samples but only {len(samples)} available")
    order = np.random.default_rng(seed).permutation(len(samples))
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:n_train + n_test]]
    return train, test


def stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Batch samples into NCHW image and mask arrays."""
    return (np.stack([s.image for s in samples]).astype(np.float32, copy=False),
            np.stack([s.mask for s in samples]).astype(np.float32, copy=False))
