"""Training loop, evaluation, inference benchmark and mask prediction."""

from __future__ import annotations

import logging
import math
import resource
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .autograd import backward, no_grad, stable_sigmoid
from .data.checkpoint import Checkpoint, save_checkpoint
from .data.dataset import Sample, stack
from .data.pnm import to_uint8, write_pgm, write_ppm
from .errors import DivergenceError, ShapeError, ValidationError
from .losses import LossBreakdown, composite_loss
from .metrics import MetricSummary, binarize, evaluate_dataset
from .models import UNetConfig, VanillaUNet, build_model
from .optim import Adam, AdamState

logger = logging.getLogger(__name__)

OVERLAY_COLOR = (255, 0, 0)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    matryoshka_weight: float = 0.1
    seed: int = 0
    eval_every: int = 1
    checkpoint_every: int = 0
    model: str = "vanilla"
    unet: UNetConfig = field(default_factory=UNetConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if self.matryoshka_weight < 0:
            raise ValidationError("matryoshka_weight must be non-negative")
        if self.model not in ("vanilla", "matae"):
            raise ValidationError(f"unknown model kind {self.model!r}")
        self.unet.validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    seconds: float
    test_metrics: Optional[MetricSummary] = None

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss": self.loss.as_dict(),
            "seconds": self.seconds,
            "test_metrics": self.test_metrics.as_dict() if self.test_metrics else None,
        }


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def totals(self) -> List[float]:
        return [e.loss.total for e in self.epochs]

    def as_list(self) -> List[dict]:
        return [e.as_dict() for e in self.epochs]


@dataclass
class BenchReport:
    mean_inference_seconds: float
    peak_resident_memory_mb: float
    n_frames: int
    batch_size: int
    repetitions: int

    def as_dict(self) -> dict:
        return asdict(self)


def _check_divisible(samples: Sequence[Sample], divisor: int) -> None:
    for s in samples:
        h, w = s.image.shape[-2:]
        if h % divisor or w % divisor:
            raise ShapeError(f"sample {s.id}: {h}x{w} is not divisible by {divisor} (2^depth)")


class Trainer:
    """Owns a model and its optimizer state; one call to :meth:`run_epoch` per epoch.

    The shuffle order of epoch ``e`` depends only on ``(seed, e)``, so a run
    resumed from a checkpoint replays exactly the batches an uninterrupted
    run would have seen.
    """

    def __init__(self, config: TrainConfig, train_set: Sequence[Sample], test_set: Sequence[Sample] = (),
                 model: Optional[VanillaUNet] = None, adam_state: Optional[AdamState] = None,
                 start_epoch: int = 0):
        config.validate()
        if not train_set:
            raise ValidationError("training set is empty")
        self.config = config
        self.model = model if model is not None else build_model(config.model, config.unet)
        _check_divisible(train_set, self.model.config.divisor)
        _check_divisible(test_set, self.model.config.divisor)
        self.train_set = list(train_set)
        self.test_set = list(test_set)
        self.optimizer = Adam(self.model.named_parameters(), lr=config.lr)
        if adam_state is not None:
            adam_state.lr = config.lr
            self.optimizer.state = adam_state
        self.epoch = start_epoch
        self.history = TrainHistory()

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: TrainConfig, train_set, test_set=()) -> "Trainer":
        return cls(config, train_set, test_set, model=ckpt.model, adam_state=ckpt.adam, start_epoch=ckpt.epoch)

    def _batches(self, epoch: int):
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.train_set))
        bs = self.config.batch_size
        for start in range(0, len(order), bs):
            yield [self.train_set[i] for i in order[start:start + bs]]

    def train_step(self, batch: Sequence[Sample]) -> LossBreakdown:
        images, masks = stack(batch)
        self.optimizer.zero_grad()
        out = self.model(images)
        targets = self.model.reconstruction_targets(images) if out.aux_reconstructions else ()
        loss, parts = composite_loss(out, masks, targets, self.config.matryoshka_weight)
        if not math.isfinite(parts.total):
            raise DivergenceError(f"loss became {parts.total} at epoch {self.epoch + 1}")
        backward(loss)
        self.optimizer.step()
        return parts

    def run_epoch(self) -> EpochRecord:
        epoch = self.epoch + 1
        t0 = time.perf_counter()
        sums = np.zeros(3)
        seen = 0
        for b, batch in enumerate(self._batches(epoch)):
            try:
                parts = self.train_step(batch)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} (batch {b})") from None
            sums += len(batch) * np.array([parts.segmentation_bce, parts.matryoshka_mse, parts.total])
            seen += len(batch)
        mean = sums / seen
        record = EpochRecord(epoch, LossBreakdown(*map(float, mean)), time.perf_counter() - t0)
        self.epoch = epoch
        if self.test_set and self.config.eval_every and epoch % self.config.eval_every == 0:
            record.test_metrics = evaluate(self.model, self.test_set)
        self.history.epochs.append(record)
        logger.info("epoch %d loss %.5f (%.1fs)", epoch, record.loss.total, record.seconds)
        return record

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.optimizer.state, epoch=self.epoch, seed=self.config.seed,
                        extra={"matryoshka_weight": repr(self.config.matryoshka_weight)})

    def fit(self, checkpoint_path=None, on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainHistory:
        """Train until ``config.epochs`` epochs have completed in total."""
        while self.epoch < self.config.epochs:
            record = self.run_epoch()
            if on_epoch is not None:
                on_epoch(record)
            every = self.config.checkpoint_every
            if checkpoint_path is not None and every and self.epoch % every == 0:
                self.save(checkpoint_path)
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return self.history


@dataclass
class TrainResult:
    history: TrainHistory
    checkpoint: Checkpoint


def train(config: TrainConfig, train_set: Sequence[Sample], test_set: Sequence[Sample] = (),
          checkpoint_path=None, on_epoch=None) -> TrainResult:
    trainer = Trainer(config, train_set, test_set)
    history = trainer.fit(checkpoint_path, on_epoch)
    ckpt = Checkpoint(trainer.model, trainer.epoch, config.seed, trainer.optimizer.state)
    return TrainResult(history, ckpt)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_probabilities(model: VanillaUNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Foreground probabilities for an (N, C, H, W) batch."""
    images = np.asarray(images, dtype=model.dtype)
    model.check_input(images)
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model(images[start:start + batch_size]).logits.value
            out.append(stable_sigmoid(logits))
    return np.concatenate(out)


def evaluate(model: VanillaUNet, dataset: Sequence[Sample], threshold: float = 0.5,
             batch_size: int = 8) -> MetricSummary:
    if not dataset:
        raise ValidationError("cannot evaluate an empty dataset")
    images, masks = stack(dataset)
    probs = predict_probabilities(model, images, batch_size)
    preds = [binarize(p[0], threshold) for p in probs]
    return evaluate_dataset(preds, [m[0] for m in masks])


def peak_memory_mb() -> float:
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # bytes on macOS, kilobytes elsewhere
    return peak / (1024.0 * 1024.0) if sys.platform == "darwin" else peak / 1024.0


def benchmark(model: VanillaUNet, dataset: Sequence[Sample], repetitions: int = 3,
              batch_size: int = 1) -> BenchReport:
    """Mean wall-clock forward time per frame; one untimed warm-up pass first."""
    if repetitions < 3:
        raise ValidationError(f"repetitions must be >= 3, got {repetitions}")
    if not dataset:
        raise ValidationError("cannot benchmark an empty dataset")
    images, _ = stack(dataset)
    images = images.astype(model.dtype, copy=False)
    model.check_input(images)
    batches = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    with no_grad():
        for b in batches:
            model(b)
        elapsed = 0.0
        for _ in range(repetitions):
            for b in batches:
                t0 = time.perf_counter()
                model(b)
                elapsed += time.perf_counter() - t0
    n = len(images)
    return BenchReport(elapsed / (repetitions * n), peak_memory_mb(), n, batch_size, repetitions)


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask (image border counts as outside)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def overlay(image: np.ndarray, mask: np.ndarray, color=OVERLAY_COLOR) -> np.ndarray:
    """Grey frame replicated to RGB with the mask boundary painted in ``color``."""
    gray = to_uint8(np.asarray(image).reshape(np.asarray(mask).shape))
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[mask_boundary(mask)] = color
    return rgb


def predict(model: VanillaUNet, images: np.ndarray, threshold: float = 0.5, batch_size: int = 8) -> np.ndarray:
    """Binary (N, H, W) uint8 masks for an (N, C, H, W) image batch."""
    probs = predict_probabilities(model, images, batch_size)
    return binarize(probs[:, 0], threshold)


def predict_to_dir(model: VanillaUNet, named_images, out_dir, threshold: float = 0.5,
                   with_overlay: bool = False) -> List[Path]:
    """Write ``<stem>.pgm`` masks (0/255) and optional ``<stem>.ppm`` overlays."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, image in named_images:
        mask = predict(model, image[None], threshold)[0]
        path = out_dir / f"{stem}.pgm"
        write_pgm(path, mask * 255)
        written.append(path)
        if with_overlay:
            opath = out_dir / f"{stem}.ppm"
            write_ppm(opath, overlay(image[0], mask))
            written.append(opath)
    return written
