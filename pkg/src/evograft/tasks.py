"""Task registry, dataset handling, synthetic desk-scale tasks, and knowledge ACLs.

The synthetic generator renders textured stroke bands on a patch-aligned cell
grid with horizontal whole-cell translation jitter. When there are at least
six classes, the last two ("twins") share their ink texture and differ only in
band placement (top vs bottom): any patch-pooled linear readout sees them as
identical, while one token-mixing layer separates them trivially. That gives
evolution a measurable reason to grow depth even on noise-free data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, DataError, InvariantError, ValidationError
from .nn.config import Batch
from .store import LayerRecord
from .util import make_rng

SPLITS = ("train", "validation", "test")


class AccessMode(str, Enum):
    PUBLIC = "public"
    PRIVATE = "private"
    GROUP = "group"


@dataclass(frozen=True)
class AccessPolicy:
    """Which tasks may reuse knowledge derived from the owning task's data."""

    mode: AccessMode = AccessMode.PUBLIC
    group: frozenset[str] = frozenset()

    def admits(self, owner: str, consumer: str) -> bool:
        if self.mode == AccessMode.PUBLIC:
            return True
        if self.mode == AccessMode.PRIVATE:
            return consumer == owner
        return consumer in self.group

    def to_dict(self) -> dict:
        d = {"mode": self.mode.value}
        if self.mode == AccessMode.GROUP:
            d["group"] = sorted(self.group)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AccessPolicy":
        mode = AccessMode(d["mode"])
        return cls(mode=mode, group=frozenset(d.get("group", ())))


@dataclass
class Dataset:
    """Immutable indexed image/label pairs; per-index access is pure."""

    images: np.ndarray  # [N, H, W, C] uint8
    labels: np.ndarray  # [N] uint16

    def __post_init__(self):
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def batch(self, indices: np.ndarray) -> Batch:
        imgs = self.images[indices].astype(np.float32) / np.float32(255.0)
        return Batch(images=imgs, labels=self.labels[indices].astype(np.int64))


@dataclass
class TaskSpec:
    """One classification task: splits, geometry, access policy, and its build recipe."""

    name: str
    num_classes: int
    input_shape: tuple[int, int, int]
    acl: AccessPolicy
    splits: dict[str, Dataset]
    recipe: dict

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValidationError(f"task {self.name!r} needs >= 2 classes")
        for s in SPLITS:
            if s not in self.splits or len(self.splits[s]) == 0:
                raise ValidationError(f"task {self.name!r} split {s!r} is missing or empty")
            labels = self.splits[s].labels
            if labels.size and int(labels.max()) >= self.num_classes:
                raise ValidationError(
                    f"task {self.name!r} split {s!r} has label {int(labels.max())} "
                    f">= num_classes {self.num_classes}"
                )
        if self.acl.mode == AccessMode.GROUP:
            if not self.acl.group or self.name not in self.acl.group:
                raise ValidationError(f"group policy of {self.name!r} must be non-empty and include it")


def acl_allows(consumer, layer: LayerRecord, registry: Mapping[str, TaskSpec]) -> bool:
    """True iff every task in the layer's training provenance admits the consumer."""
    consumer_name = consumer.name if isinstance(consumer, TaskSpec) else str(consumer)
    for owner, _steps in layer.trained_on:
        if owner == "root":
            continue
        spec = registry.get(owner)
        if spec is None:
            raise InvariantError(f"layer {layer.id} provenance names unknown task {owner!r}")
        if not spec.acl.admits(owner, consumer_name):
            return False
    return True


def model_allowed(consumer, path_ids, store, registry) -> bool:
    """A model is reusable iff every layer on its path passes the ACL."""
    return all(acl_allows(consumer, store.get(lid), registry) for lid in path_ids)


# ---------------------------------------------------------------------------
# synthetic glyph tasks

def _binary_texture(patch: int, rng: np.random.Generator, existing: list[np.ndarray]):
    """High-contrast binary tile, resampled until well separated from all others."""
    while True:
        bits = rng.integers(0, 2, size=(patch, patch)).astype(np.float64)
        tex = 0.15 + 0.85 * bits
        if all(np.count_nonzero(tex != other) >= max(4, tex.size // 3) for other in existing):
            return tex


def _class_assets(num_classes: int, grid: int, patch: int, rng: np.random.Generator):
    """Per-class binary texture tile plus stroke-band cell rectangle (inset one cell)."""
    textures: list[np.ndarray] = []
    bands = []
    for _ in range(num_classes):
        textures.append(_binary_texture(patch, rng, textures))
        rh = int(rng.integers(3, min(5, grid - 2)))
        cw = int(rng.integers(4, grid - 1))
        r0 = int(rng.integers(1, grid - rh))
        c0 = int(rng.integers(1, grid - cw))
        bands.append((r0, c0, rh, cw))
    if num_classes >= 6:
        # Twins: shared texture, complementary top/bottom bands. Top/bottom (not
        # left/right) so horizontal flip augmentation cannot alias them, and equal
        # areas so patch-pooled features are exactly identical for the pair.
        textures[-1] = textures[-2]
        half = (grid - 2) // 2
        bands[-2] = (1, 1, half, grid - 2)
        bands[-1] = (1 + half, 1, half, grid - 2)
    return textures, bands


def _render_glyph(texture, band, shift: int, grid, patch, noise, rng):
    """Textured band glyph, jittered by a whole-cell horizontal translation.

    Cell-aligned translation keeps the texture tiling in phase with the patch
    grid, so within-class pixel variation is real while the per-class
    patch-pooled signature is exactly translation-invariant.
    """
    r0, c0, rh, cw = band
    cells = np.zeros((grid, grid), dtype=np.float64)
    cells[r0: r0 + rh, c0 + shift: c0 + shift + cw] = 1.0
    img = np.kron(cells, np.ones((patch, patch))) * np.tile(texture, (grid, grid))
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)[..., None]


def make_synthetic_glyph_task(name: str, num_classes: int, samples_per_class: int,
                              noise: float, seed: int, acl: AccessPolicy | None = None,
                              resolution: int = 32, patch_size: int = 4) -> TaskSpec:
    """Procedurally rendered glyph task, deterministic under seed, split 80/10/10."""
    if num_classes < 2 or samples_per_class < 10:
        raise ConfigError("need num_classes >= 2 and samples_per_class >= 10")
    if resolution % patch_size != 0 or resolution // patch_size < 4:
        raise ConfigError("resolution must be a multiple of patch_size with a grid of >= 4 cells")
    grid = resolution // patch_size
    rng = make_rng(seed)
    textures, bands = _class_assets(num_classes, grid, patch_size, rng)

    n_tr = int(samples_per_class * 0.8)
    n_val = max(1, int(samples_per_class * 0.1))
    n_te = samples_per_class - n_tr - n_val
    counts = {"train": n_tr, "validation": n_val, "test": n_te}

    splits: dict[str, Dataset] = {}
    for split in SPLITS:
        n = counts[split]
        images = np.empty((num_classes * n, resolution, resolution, 1), dtype=np.uint8)
        labels = np.empty(num_classes * n, dtype=np.uint16)
        i = 0
        for c in range(num_classes):
            for _ in range(n):
                shift = int(rng.integers(-1, 2))
                images[i] = _render_glyph(textures[c], bands[c], shift, grid, patch_size, noise, rng)
                labels[i] = c
                i += 1
        splits[split] = Dataset(images=images, labels=labels)

    recipe = {"type": "synthetic_glyphs", "name": name, "num_classes": num_classes,
              "samples_per_class": samples_per_class, "noise": noise, "seed": seed,
              "resolution": resolution, "patch_size": patch_size}
    spec = TaskSpec(name=name, num_classes=num_classes, input_shape=(resolution, resolution, 1),
                    acl=acl or AccessPolicy(), splits=splits, recipe=recipe)
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# raw dataset files
#
# <dir>/header.json  {name, num_classes, shape [H,W,C], counts {split: n}, checksum}
# <dir>/<split>.bin  u8 pixels row-major, then u16 little-endian labels
# checksum = sha256 hex over the three blobs concatenated in (train, validation, test) order.

def save_raw_dataset(directory, name: str, num_classes: int, splits: dict[str, Dataset]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shape = tuple(int(x) for x in splits["train"].images.shape[1:])
    digest = hashlib.sha256()
    blobs = {}
    for split in SPLITS:
        ds = splits[split]
        blob = ds.images.tobytes() + ds.labels.astype("<u2").tobytes()
        blobs[split] = blob
        digest.update(blob)
    header = {
        "name": name, "num_classes": num_classes, "shape": list(shape),
        "counts": {s: len(splits[s]) for s in SPLITS}, "checksum": digest.hexdigest(),
    }
    for split in SPLITS:
        (directory / f"{split}.bin").write_bytes(blobs[split])
    (directory / "header.json").write_text(json.dumps(header, sort_keys=True, indent=1))


def load_raw_dataset(directory, acl: AccessPolicy | None = None) -> TaskSpec:
    """Load and fully validate a raw dataset directory; never returns partial data."""
    directory = Path(directory)
    header_path = directory / "header.json"
    if not header_path.exists():
        raise DataError(f"malformed header: {header_path} missing")
    try:
        header = json.loads(header_path.read_text())
        name = header["name"]
        num_classes = int(header["num_classes"])
        h, w, c = (int(x) for x in header["shape"])
        counts = {s: int(header["counts"][s]) for s in SPLITS}
        checksum = header["checksum"]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed header: {exc}") from exc

    digest = hashlib.sha256()
    splits: dict[str, Dataset] = {}
    for split in SPLITS:
        blob_path = directory / f"{split}.bin"
        if not blob_path.exists():
            raise DataError(f"truncated payload: {blob_path} missing")
        blob = blob_path.read_bytes()
        n = counts[split]
        pixel_bytes = n * h * w * c
        expected = pixel_bytes + n * 2
        if len(blob) != expected:
            raise DataError(f"truncated payload: {split}.bin has {len(blob)} bytes, expected {expected}")
        digest.update(blob)
        images = np.frombuffer(blob, dtype=np.uint8, count=pixel_bytes).reshape(n, h, w, c)
        labels = np.frombuffer(blob[pixel_bytes:], dtype="<u2")
        if labels.size and int(labels.max()) >= num_classes:
            raise DataError(
                f"label out of range: {split}.bin contains label {int(labels.max())} "
                f"for a {num_classes}-class task"
            )
        splits[split] = Dataset(images=images.copy(), labels=labels.astype(np.uint16))
    if digest.hexdigest() != checksum:
        raise DataError("checksum mismatch: dataset blobs do not match header")

    spec = TaskSpec(name=name, num_classes=num_classes, input_shape=(h, w, c),
                    acl=acl or AccessPolicy(), splits=splits,
                    recipe={"type": "raw", "path": str(directory)})
    spec.validate()
    return spec


def build_task(recipe: dict, acl: AccessPolicy) -> TaskSpec:
    """Rebuild a task from its persisted recipe (checkpoint restore path)."""
    kind = recipe.get("type")
    if kind == "synthetic_glyphs":
        return make_synthetic_glyph_task(
            name=recipe["name"], num_classes=recipe["num_classes"],
            samples_per_class=recipe["samples_per_class"], noise=recipe["noise"],
            seed=recipe["seed"], acl=acl,
            resolution=recipe["resolution"], patch_size=recipe["patch_size"],
        )
    if kind == "raw":
        return load_raw_dataset(recipe["path"], acl=acl)
    raise ConfigError(f"unknown task recipe type {kind!r}")
