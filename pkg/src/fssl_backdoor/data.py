"""Synthetic image data, federated partitions, trigger patches and inspection sets.

Images are ``float64`` arrays shaped ``[N, H, W, C]`` with values in ``[0, 1]``.
Labels ride along for the partitioner and the evaluation probes only; the
self-supervised training code never looks at them.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError

RAW_MAGIC = b"FSDS"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float64)
        if imgs.ndim != 4:
            raise DataError(f"images must be [N, H, W, C], got {imgs.shape}")
        if imgs.size and (imgs.min() < 0.0 or imgs.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", imgs)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (imgs.shape[0],):
                raise DataError("labels must have one entry per image")
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx])

    def unlabeled(self) -> "Dataset":
        return Dataset(self.images)

    def classes(self) -> np.ndarray:
        if self.labels is None:
            raise DataError("dataset has no labels")
        return np.unique(self.labels)


# ---------------------------------------------------------------------------
# synthesis


def _class_prototypes(classes: int, size: int, channels: int, rng: np.random.Generator, smooth: float) -> np.ndarray:
    protos = np.empty((classes, size, size, channels))
    for c in range(classes):
        field_ = rng.normal(size=(size, size, channels))
        for ch in range(channels):
            field_[..., ch] = gaussian_filter(field_[..., ch], smooth, mode="wrap")
        field_ -= field_.min()
        field_ /= max(field_.max(), 1e-12)
        protos[c] = 0.15 + 0.7 * field_
    return protos


def synthesize_dataset(classes: int, per_class: int, seed, *, size: int = 16, channels: int = 1,
                       noise: float = 0.05, shift: int = 2, smooth: float = 1.5,
                       brightness: float = 0.05, proto_seed=None) -> Dataset:
    """Class-separable images: a smooth per-class prototype plus seeded jitter.

    Each image is its class prototype rolled by up to ``shift`` pixels, with a
    global brightness offset and i.i.d. Gaussian pixel noise.  Prototypes are
    drawn from ``proto_seed`` (defaults to ``seed``), so two datasets sharing a
    prototype seed come from the same distribution.
    """
    if classes < 2:
        raise DataError("need at least 2 classes")
    if per_class < 1:
        raise DataError("per_class must be >= 1")
    if noise < 0 or shift < 0 or brightness < 0:
        raise DataError("jitter amplitudes must be non-negative")
    protos = _class_prototypes(classes, size, channels,
                               np.random.default_rng([7919, *_seed_seq(seed if proto_seed is None else proto_seed)]),
                               smooth)
    rng = np.random.default_rng(_seed_seq(seed))
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    images = protos[labels].copy()
    if shift:
        dy = rng.integers(-shift, shift + 1, size=n)
        dx = rng.integers(-shift, shift + 1, size=n)
        for i in range(n):
            images[i] = np.roll(images[i], (dy[i], dx[i]), axis=(0, 1))
    if brightness:
        images += rng.uniform(-brightness, brightness, size=(n, 1, 1, 1))
    if noise:
        images += rng.normal(0.0, noise, size=images.shape)
    perm = rng.permutation(n)
    return Dataset(np.clip(images[perm], 0.0, 1.0), labels[perm])


def _seed_seq(seed) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def split_probe(ds: Dataset, fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Stratified ``(pool_indices, probe_indices)`` split."""
    if ds.labels is None:
        raise DataError("probe split needs labels")
    rng = np.random.default_rng(_seed_seq(seed))
    pool, probe = [], []
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        probe.extend(idx[:k])
        pool.extend(idx[k:])
    return np.sort(np.array(pool, dtype=np.int64)), np.sort(np.array(probe, dtype=np.int64))


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class Partition:
    assignments: dict[int, np.ndarray]

    def client_ids(self) -> list[int]:
        return sorted(self.assignments)

    def sizes(self) -> dict[int, int]:
        return {c: len(v) for c, v in self.assignments.items()}


def partition(ds: Dataset, clients: int, per_client: int, mode: str = "iid", classes_per_client: int = 2,
              seed=0, *, disjoint: bool = False, required_classes: dict[int, int] | None = None,
              balanced: bool = False) -> Partition:
    """Assign ``per_client`` dataset indices to each of ``clients`` clients.

    ``iid`` samples uniformly per client; clients may overlap unless
    ``disjoint``.  ``noniid`` picks ``classes_per_client`` classes per client
    (forcing any class listed in ``required_classes``) and splits the quota
    evenly across them.  With ``balanced`` the class sets are dealt from
    shuffled passes over all combinations, so no set repeats before every
    set has been used.
    """
    if clients < 1 or per_client < 1:
        raise DataError("clients and per_client must be positive")
    rng = np.random.default_rng(_seed_seq(seed))
    n = len(ds)
    out: dict[int, np.ndarray] = {}
    if mode == "iid":
        if disjoint:
            if clients * per_client > n:
                raise DataError("not enough samples for disjoint iid partition")
            perm = rng.permutation(n)
            for c in range(clients):
                out[c] = perm[c * per_client : (c + 1) * per_client]
        else:
            if per_client > n:
                raise DataError("per_client exceeds dataset size")
            for c in range(clients):
                out[c] = rng.choice(n, size=per_client, replace=False)
        return Partition(out)
    if mode != "noniid":
        raise DataError(f"unknown partition mode {mode!r}")
    if ds.labels is None:
        raise DataError("non-iid partition needs labels")
    all_classes = np.unique(ds.labels)
    if not 1 <= classes_per_client <= len(all_classes):
        raise DataError("classes_per_client out of range")
    by_class = {int(c): np.flatnonzero(ds.labels == c) for c in all_classes}
    used = {c: np.zeros(len(v), dtype=bool) for c, v in by_class.items()}
    required_classes = required_classes or {}
    deck: list[tuple[int, ...]] = []
    combos = [tuple(int(k) for k in t) for t in itertools.combinations(all_classes, classes_per_client)]
    for c in range(clients):
        forced = required_classes.get(c)
        if forced is not None and forced not in by_class:
            raise DataError(f"required class {forced} absent from dataset")
        if balanced:
            if not deck:
                deck = [combos[i] for i in rng.permutation(len(combos))]
            k = next((j for j, t in enumerate(deck) if forced is None or forced in t), None)
            if k is None:
                fits = [t for t in combos if forced in t]
                chosen = list(fits[int(rng.integers(len(fits)))])
            else:
                chosen = list(deck.pop(k))
        else:
            pool = [int(k) for k in all_classes if k != forced]
            picks = list(rng.choice(pool, size=classes_per_client - (forced is not None), replace=False))
            chosen = sorted(([forced] if forced is not None else []) + [int(p) for p in picks])
        quotas = np.full(len(chosen), per_client // len(chosen))
        quotas[: per_client % len(chosen)] += 1
        idx = []
        for cls, q in zip(chosen, quotas):
            cand = by_class[cls]
            if disjoint:
                free = np.flatnonzero(~used[cls])
                if len(free) < q:
                    raise DataError(f"class {cls} exhausted in disjoint non-iid partition")
                take = rng.choice(free, size=q, replace=False)
                used[cls][take] = True
                idx.extend(cand[take])
            else:
                if len(cand) < q:
                    raise DataError(f"class {cls} has only {len(cand)} samples, need {q}")
                idx.extend(rng.choice(cand, size=q, replace=False))
        out[c] = np.array(idx, dtype=np.int64)
    return Partition(out)


# ---------------------------------------------------------------------------
# triggers


@dataclass(frozen=True)
class TriggerPattern:
    patch: np.ndarray
    anchor: tuple[int, int]
    id: str = "trigger"

    def __post_init__(self):
        p = np.asarray(self.patch, dtype=np.float64)
        if p.ndim == 2:
            p = p[..., None]
        if p.ndim != 3 or p.min() < 0 or p.max() > 1:
            raise DataError("trigger patch must be [h, w, C] in [0, 1]")
        object.__setattr__(self, "patch", p)
        object.__setattr__(self, "anchor", (int(self.anchor[0]), int(self.anchor[1])))

    def footprint(self) -> set[tuple[int, int]]:
        r, c = self.anchor
        h, w = self.patch.shape[:2]
        return {(r + i, c + j) for i in range(h) for j in range(w)}

    def check_fits(self, image_shape) -> None:
        r, c = self.anchor
        h, w, pc = self.patch.shape
        H, W, C = image_shape
        if r < 0 or c < 0 or r + h > H or c + w > W:
            raise DataError(f"trigger {self.id!r} at {self.anchor} does not fit a {H}x{W} image")
        if pc not in (1, C):
            raise DataError(f"trigger {self.id!r} has {pc} channels, image has {C}")


@dataclass(frozen=True)
class GlobalTrigger:
    locals: tuple[TriggerPattern, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "locals", tuple(self.locals))
        seen: set = set()
        for t in self.locals:
            fp = t.footprint()
            if seen & fp:
                raise DataError("local trigger footprints overlap")
            seen |= fp

    def footprint(self) -> set[tuple[int, int]]:
        out: set = set()
        for t in self.locals:
            out |= t.footprint()
        return out


def embed_trigger(image: np.ndarray, trig: TriggerPattern | GlobalTrigger) -> np.ndarray:
    """Paste the trigger onto one image ``[H, W, C]`` or a batch ``[N, H, W, C]``.

    Returns a new array; the input is left untouched.
    """
    img = np.array(image, dtype=np.float64, copy=True)
    parts = trig.locals if isinstance(trig, GlobalTrigger) else (trig,)
    batch = img if img.ndim == 4 else img[None]
    for t in parts:
        t.check_fits(batch.shape[1:])
        r, c = t.anchor
        h, w = t.patch.shape[:2]
        batch[:, r : r + h, c : c + w, :] = t.patch
    return batch if img.ndim == 4 else batch[0]


def square_trigger(size: int = 3, image_size: int = 16, channels: int = 1, value: float = 1.0,
                   anchor: tuple[int, int] | None = None, id: str = "square") -> GlobalTrigger:
    """One solid square, bottom-right by default, wrapped as a single-local global trigger."""
    if anchor is None:
        anchor = (image_size - size, image_size - size)
    return GlobalTrigger((TriggerPattern(np.full((size, size, channels), value), anchor, id),))


def quad_trigger(size: int = 2, image_size: int = 16, channels: int = 1, value: float = 1.0) -> GlobalTrigger:
    """Four disjoint patches on the corners of the bottom-right quadrant."""
    lo = image_size // 2
    hi = image_size - size
    anchors = [(lo, lo), (lo, hi), (hi, lo), (hi, hi)]
    return GlobalTrigger(tuple(
        TriggerPattern(np.full((size, size, channels), value), a, f"quad{k}") for k, a in enumerate(anchors)
    ))


def trigger_from_config(cfg: dict, image_size: int, channels: int) -> GlobalTrigger:
    kind = cfg.get("kind", "square")
    value = float(cfg.get("value", 1.0))
    if kind == "square":
        anchor = cfg.get("anchor")
        return square_trigger(int(cfg.get("size", 3)), image_size, channels, value,
                              None if anchor is None else tuple(anchor))
    if kind == "quad":
        return quad_trigger(int(cfg.get("size", 2)), image_size, channels, value)
    if kind == "patches":
        return GlobalTrigger(tuple(
            TriggerPattern(np.full((int(p.get("height", p.get("size", 2))), int(p.get("width", p.get("size", 2))),
                                    channels), float(p.get("value", value))),
                           tuple(p["anchor"]), p.get("id", f"p{k}"))
            for k, p in enumerate(cfg["patches"])
        ))
    raise DataError(f"unknown trigger kind {kind!r}")


# ---------------------------------------------------------------------------
# poisoning and inspection sets


def poison_dataset_labels_free(ds: Dataset, target_class: int, trig, fraction: float, seed) -> Dataset:
    """Stamp the trigger on a seeded ``fraction`` of the target-class images."""
    return poison_with_indices(ds, target_class, trig, fraction, seed)[0]


def poison_with_indices(ds: Dataset, target_class: int, trig, fraction: float, seed) -> tuple[Dataset, np.ndarray]:
    if not 0.0 <= fraction <= 1.0:
        raise DataError("fraction must lie in [0, 1]")
    if ds.labels is None:
        raise DataError("poisoning needs labels to locate the target class")
    cand = np.flatnonzero(ds.labels == target_class)
    if len(cand) == 0:
        raise DataError(f"target class {target_class} absent")
    k = int(round(fraction * len(cand)))
    if fraction > 0:
        k = max(k, 1)
    rng = np.random.default_rng(_seed_seq(seed))
    chosen = np.sort(rng.choice(cand, size=k, replace=False)) if k else np.array([], dtype=np.int64)
    images = ds.images.copy()
    if k:
        images[chosen] = embed_trigger(images[chosen], trig)
    return Dataset(images, ds.labels), chosen


@dataclass(frozen=True)
class InspectionSet:
    items: np.ndarray
    source: str

    def __post_init__(self):
        if len(self.items) == 0:
            raise DataError("inspection set must be non-empty")

    def __len__(self) -> int:
        return len(self.items)


INSPECTION_SOURCES = ("in-distribution", "out-of-distribution", "random-vectors")


def build_inspection_set(source: str, count: int, seed, *, pool: Dataset | None = None,
                         image_shape: tuple[int, int, int] | None = None) -> InspectionSet:
    """Unlabeled probe inputs for embedding inspection.

    ``in-distribution`` draws from ``pool``; ``out-of-distribution`` draws from
    a synthetic family with unrelated prototypes; ``random-vectors`` are
    uniform noise of image shape.
    """
    if count < 1:
        raise DataError("count must be >= 1")
    if image_shape is None:
        if pool is None:
            raise DataError("need a pool or an image shape")
        image_shape = pool.image_shape
    rng = np.random.default_rng(_seed_seq(seed))
    if source == "in-distribution":
        if pool is None:
            raise DataError("in-distribution inspection needs a pool")
        idx = rng.choice(len(pool), size=count, replace=count > len(pool))
        return InspectionSet(pool.images[np.sort(idx)].copy(), source)
    if source == "out-of-distribution":
        h, w, c = image_shape
        classes = 5
        per = -(-count // classes)
        ood = synthesize_dataset(classes, per, [int(rng.integers(2**31)), 104729], size=h, channels=c,
                                 smooth=0.6, noise=0.1)
        return InspectionSet(ood.images[:count].copy(), source)
    if source == "random-vectors":
        return InspectionSet(rng.uniform(0.0, 1.0, size=(count, *image_shape)), source)
    raise DataError(f"unknown inspection source {source!r}")


# ---------------------------------------------------------------------------
# augmentation


def augment(images: np.ndarray, rng: np.random.Generator, *, max_shift: int = 2, flip: bool = True,
            noise: float = 0.03, brightness: float = 0.1) -> np.ndarray:
    """Random translate, horizontal flip, brightness and pixel noise."""
    x = np.asarray(images, dtype=np.float64)
    n, h, w, _ = x.shape
    out = np.empty_like(x)
    if max_shift:
        padded = np.pad(x, ((0, 0), (max_shift, max_shift), (max_shift, max_shift), (0, 0)), mode="reflect")
        oy = rng.integers(0, 2 * max_shift + 1, size=n)
        ox = rng.integers(0, 2 * max_shift + 1, size=n)
        for i in range(n):
            out[i] = padded[i, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    else:
        out[...] = x
    if flip:
        f = rng.random(n) < 0.5
        out[f] = out[f, :, ::-1]
    if brightness:
        out += rng.uniform(-brightness, brightness, size=(n, 1, 1, 1))
    if noise:
        out += rng.normal(0.0, noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# raw binary format


def save_raw(path, ds: Dataset) -> None:
    """``FSDS`` | u32 N,H,W,C | u8 has_labels | u8 pixels | i32 labels (optional)."""
    n, h, w, c = ds.images.shape
    with open(Path(path), "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<IIIIB", n, h, w, c, ds.labels is not None))
        fh.write(np.round(ds.images * 255).astype(np.uint8).tobytes())
        if ds.labels is not None:
            fh.write(ds.labels.astype("<i4").tobytes())


def load_raw(path) -> Dataset:
    with open(Path(path), "rb") as fh:
        data = fh.read()
    if data[:4] != RAW_MAGIC:
        raise DataError("not a raw dataset file")
    n, h, w, c, has = struct.unpack_from("<IIIIB", data, 4)
    off = 4 + 17
    npix = n * h * w * c
    if len(data) < off + npix + (4 * n if has else 0):
        raise DataError("truncated raw dataset file")
    pix = np.frombuffer(data, dtype=np.uint8, count=npix, offset=off).reshape(n, h, w, c)
    labels = None
    if has:
        labels = np.frombuffer(data, dtype="<i4", count=n, offset=off + npix).astype(np.int64)
    return Dataset(pix.astype(np.float64) / 255.0, labels)


def stack_images(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=0)
