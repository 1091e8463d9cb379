"""Dataset ingestion, sample selection, experiment execution and metrics."""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from capsevade import attack as atk
from capsevade import classifier as clf
from capsevade import encoder as enc

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(Exception):
    """Base class for IDX file problems."""


class BadMagicError(IdxError):
    pass


class TruncatedPayloadError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, H, W), float64 in [0, 1]
    labels: np.ndarray  # (N,), int64
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must have equal length")

    def __len__(self):
        return len(self.images)


def _read_be32(blob: bytes, offset: int, path) -> int:
    if offset + 4 > len(blob):
        raise TruncatedPayloadError(f"{path}: truncated header")
    return struct.unpack_from(">I", blob, offset)[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair, scaling pixels into [0, 1]."""
    with open(images_path, "rb") as fh:
        img_blob = fh.read()
    with open(labels_path, "rb") as fh:
        lab_blob = fh.read()

    magic = _read_be32(img_blob, 0, images_path)
    if magic != IMAGE_MAGIC:
        raise BadMagicError(f"{images_path}: bad magic 0x{magic:08x}")
    count = _read_be32(img_blob, 4, images_path)
    rows = _read_be32(img_blob, 8, images_path)
    cols = _read_be32(img_blob, 12, images_path)
    expected = 16 + count * rows * cols
    if len(img_blob) < expected:
        raise TruncatedPayloadError(
            f"{images_path}: expected {expected} bytes, found {len(img_blob)}"
        )
    pixels = np.frombuffer(img_blob, dtype=np.uint8, count=count * rows * cols, offset=16)

    magic = _read_be32(lab_blob, 0, labels_path)
    if magic != LABEL_MAGIC:
        raise BadMagicError(f"{labels_path}: bad magic 0x{magic:08x}")
    lab_count = _read_be32(lab_blob, 4, labels_path)
    if len(lab_blob) < 8 + lab_count:
        raise TruncatedPayloadError(
            f"{labels_path}: expected {8 + lab_count} bytes, found {len(lab_blob)}"
        )
    if lab_count != count:
        raise CountMismatchError(
            f"{images_path} holds {count} images but {labels_path} holds "
            f"{lab_count} labels"
        )
    labels = np.frombuffer(lab_blob, dtype=np.uint8, count=lab_count, offset=8)

    images = pixels.reshape(count, rows, cols).astype(np.float64) / 255.0
    return Dataset(images=images, labels=labels.astype(np.int64))


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset back out as an IDX image/label file pair."""
    images = np.asarray(dataset.images, dtype=np.float64)
    n, rows, cols = images.shape
    bytes_ = np.floor(images * 255.0 + 0.5).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols))
        fh.write(bytes_.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", LABEL_MAGIC, n))
        fh.write(np.asarray(dataset.labels, dtype=np.uint8).tobytes())


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Rescale an image so its values span [0, 1]; constant images map to
    all-zeros (keeps flat backgrounds black instead of dividing by zero)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("image must be non-empty")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


# --- deterministic toy data -------------------------------------------------

_STAMP = 12  # glyph stamp side length


def _glyph_patterns() -> list[np.ndarray]:
    """Ten texture patterns over one shared square support, values in [0, 1].

    Sharing the support matters: classes differ by interior texture, so any
    class's pattern can be painted inside any other's neighborhood mask.
    Classes separated by support alone would be unreachable for
    mask-confined attacks.
    """
    s = _STAMP
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    r = np.hypot(yy - (s - 1) / 2, xx - (s - 1) / 2)
    r = r / r.max()
    two_pi = 2.0 * np.pi
    return [
        0.5 * (1.0 + np.sin(two_pi * yy / 4.0)),  # horizontal stripes
        0.5 * (1.0 + np.sin(two_pi * xx / 4.0)),  # vertical stripes
        0.5 * (1.0 + np.sin(two_pi * (yy + xx) / 6.0)),  # diagonal stripes
        0.5 * (1.0 + np.sin(two_pi * (yy - xx) / 6.0)),  # anti-diagonal stripes
        0.5 * (1.0 + np.sin(two_pi * (yy + xx) / 3.0)),  # fine diagonal stripes
        1.0 - r,  # bright center
        r,  # bright rim
        xx / (s - 1),  # left-to-right ramp
        yy / (s - 1),  # top-to-bottom ramp
        np.ones((s, s)),  # flat plateau
    ]


def toy_dataset(
    n_train: int = 1000,
    n_test: int = 200,
    height: int = 20,
    width: int = 20,
    n_classes: int = 10,
    seed: int = 42,
) -> tuple[Dataset, Dataset]:
    """Deterministic 10-class textured-glyph dataset on a black background.

    Each sample stamps its class texture at a jittered position with a
    jittered intensity plus per-pixel noise; background pixels stay at
    exactly zero so neighborhood masks vanish off the object.
    """
    if n_classes > 10:
        raise ValueError("at most 10 toy classes are available")
    patterns = _glyph_patterns()[:n_classes]
    rng = np.random.default_rng(seed)

    def draw(count, split):
        images = np.zeros((count, height, width))
        labels = np.asarray(
            [i % n_classes for i in range(count)], dtype=np.int64
        )
        margin_r = height - _STAMP
        margin_c = width - _STAMP
        base_r, base_c = margin_r // 2, margin_c // 2
        for i in range(count):
            pattern = patterns[labels[i]]
            dr = int(rng.integers(-2, 3))
            dc = int(rng.integers(-2, 3))
            r0 = min(max(base_r + dr, 0), margin_r)
            c0 = min(max(base_c + dc, 0), margin_c)
            intensity = rng.uniform(0.75, 1.0)
            noise = rng.uniform(-0.08, 0.08, size=pattern.shape)
            stamp = np.clip((0.3 + 0.7 * pattern) * intensity + noise, 0.2, 1.0)
            images[i, r0 : r0 + _STAMP, c0 : c0 + _STAMP] = stamp
        order = rng.permutation(count)
        return Dataset(images=images[order], labels=labels[order], split=split)

    return draw(n_train, "train"), draw(n_test, "test")


# --- experiment execution ---------------------------------------------------


@dataclass(frozen=True)
class SampleSelection:
    indices: np.ndarray  # dataset indices of the chosen samples
    shortfall: int  # how many short of the requested count


def select_correct(
    dataset: Dataset,
    params: enc.EncoderParams,
    classifier: clf.ClassifierModel,
    n: int,
    seed: int,
) -> SampleSelection:
    """Deterministically pick up to ``n`` correctly classified samples."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    chosen = []
    for idx in order:
        x = dataset.images[idx]
        presence = enc.presence_for(params, x, classifier.mode)
        if clf.classify(classifier, presence) == dataset.labels[idx]:
            chosen.append(int(idx))
            if len(chosen) == n:
                break
    if not chosen:
        raise ValueError("no sample is classified correctly by the target model")
    return SampleSelection(
        indices=np.asarray(chosen, dtype=np.int64), shortfall=n - len(chosen)
    )


def _sample_seed(master_seed: int, sample_index: int) -> int:
    return int(np.random.SeedSequence((master_seed, sample_index)).generate_state(1)[0])


@dataclass
class ExperimentReport:
    config: dict
    per_sample: list[dict]
    success_rate: float
    mean_l2: Optional[float]
    std_l2: Optional[float]
    l2_basis: str
    runtime_seconds: float
    shortfall: int
    results: list[atk.AttackResult] = field(default_factory=list, repr=False)

    def to_document(self) -> dict:
        return {
            "config": self.config,
            "per_sample": self.per_sample,
            "success_rate": self.success_rate,
            "mean_l2": self.mean_l2,
            "std_l2": self.std_l2,
            "l2_basis": self.l2_basis,
            "runtime_seconds": self.runtime_seconds,
            "shortfall": self.shortfall,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2, sort_keys=True)


def recompute_statistics(per_sample: list[dict]) -> tuple[float, Optional[float], Optional[float]]:
    """Success rate and L2 statistics recomputed from per-sample records."""
    successes = [rec["l2"] for rec in per_sample if rec["success"]]
    rate = len(successes) / len(per_sample) if per_sample else 0.0
    if not successes:
        return rate, None, None
    arr = np.asarray(successes)
    return rate, float(arr.mean()), float(arr.std())


def run_experiment(
    dataset: Dataset,
    params: enc.EncoderParams,
    classifier: clf.ClassifierModel,
    config: atk.AttackConfig,
    n: int,
    seed: int,
    n_jobs: int = 1,
    clock=time.perf_counter,
) -> ExperimentReport:
    """Attack up to ``n`` correctly classified samples and aggregate metrics.

    Per-sample seeds are derived from the master seed and the dataset
    index, so serial and parallel execution produce identical reports.
    The ``clock`` argument exists so tests can inject a fixed time source.
    """
    started = clock()
    selection = select_correct(dataset, params, classifier, n, seed)

    def attack_one(idx: int) -> atk.AttackResult:
        x = dataset.images[idx]
        target = atk.make_target(params, classifier, x)
        per_config = dataclasses.replace(config, seed=_sample_seed(seed, idx))
        return atk.run_attack(target, x, per_config)

    indices = [int(i) for i in selection.indices]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(attack_one, indices))
    else:
        results = [attack_one(i) for i in indices]

    per_sample = [
        {
            "sample_index": idx,
            "label": int(dataset.labels[idx]),
            "success": res.success,
            "l2": res.l2,
            "iterations": res.iterations,
            "best_iteration": res.best_iteration,
        }
        for idx, res in zip(indices, results)
    ]
    rate, mean_l2, std_l2 = recompute_statistics(per_sample)
    return ExperimentReport(
        config={**config_to_dict(config), "n": n, "seed": seed},
        per_sample=per_sample,
        success_rate=rate,
        mean_l2=mean_l2,
        std_l2=std_l2,
        l2_basis="successes",
        runtime_seconds=clock() - started,
        shortfall=selection.shortfall,
        results=results,
    )


def config_to_dict(config: atk.AttackConfig) -> dict:
    doc = {
        "algorithm": config.algorithm,
        "alpha": config.alpha,
        "n_iter": config.n_iter,
        "alpha_lb": config.alpha_lb,
        "alpha_ub": config.alpha_ub,
        "n_outer": config.n_outer,
        "n_inner": config.n_inner,
        "mask": config.mask,
        "arctanh_eps": config.arctanh_eps,
        "adam_lr": config.adam_lr,
        "adam_beta1": config.adam_beta1,
        "adam_beta2": config.adam_beta2,
        "adam_eps": config.adam_eps,
        "seed": config.seed,
    }
    if doc["alpha_ub"] == float("inf"):
        doc["alpha_ub"] = "inf"
    return doc


def config_from_dict(doc: dict) -> atk.AttackConfig:
    doc = dict(doc)
    doc.pop("n", None)
    if doc.get("alpha_ub") == "inf":
        doc["alpha_ub"] = float("inf")
    return atk.AttackConfig(**doc)


def export_image(x: np.ndarray, path) -> None:
    """Write one grayscale image as a binary PGM (maxval 255, half-up)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D image")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("pixels must lie in [0, 1]")
    data = np.floor(x * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{x.shape[1]} {x.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
