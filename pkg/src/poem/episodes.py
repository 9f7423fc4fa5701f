"""Procedural images and partial-view few-shot episodes.

Each image is a family pattern (random 2-D sinusoids shared by every image of
the family) plus an image-specific field of Gaussian blobs. Episodes ask which
image a crop came from, given a handful of support crops of each image whose
total area is at most half the image.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .seeding import mix_seed, rng_for

_FAMILY_TAG = 0x46414D
_IMAGE_TAG = 0x494D47


@dataclass(frozen=True)
class ImagePreset:
    image_size: int = 24
    channels: int = 3
    crop: int = 6
    support_views: int = 8
    queries_per_item: int = 2
    ways: tuple[int, int] = (3, 8)
    classes: tuple[int, int] = (1, 5)
    n_sinusoids: int = 4
    n_blobs: int = 6
    blob_sigma: tuple[float, float] = (0.10, 0.25)  # fraction of image size
    blob_amplitude: float = 3.0
    noise_sigma: float = 0.02
    gain_jitter: float = 0.1

    def __post_init__(self):
        if self.crop > self.image_size:
            raise ValueError("crop larger than image")
        if self.coverage > 0.5 + 1e-12:
            raise ValueError(f"support coverage {self.coverage:.3f} exceeds half the image")

    @property
    def coverage(self) -> float:
        return self.support_views * self.crop ** 2 / self.image_size ** 2

    def view_dim(self, condition: str) -> int:
        side = self.crop if condition == "partial" else self.image_size
        return self.channels * side * side + 4


DESK = ImagePreset()
LARGE = ImagePreset(image_size=84, crop=14, support_views=18, ways=(5, 25))
PRESETS = {"desk": DESK, "large": LARGE}


@dataclass(frozen=True)
class PoolConfig:
    """Which procedural images episodes draw from."""

    n_families: int = 200
    images_per_family: int = 20
    family_offset: int = 0
    master_seed: int = 0


@dataclass(frozen=True)
class ProceduralImage:
    pixels: np.ndarray
    family_id: int
    image_id: int
    seed: int


@dataclass(frozen=True)
class View:
    patch: np.ndarray
    coords: np.ndarray
    item_index: int
    centred: bool = True  # map [0, 1] patches to [-1, 1]; sparse one-hot patches stay as they are

    def features(self) -> np.ndarray:
        patch = self.patch.ravel()
        return np.concatenate([2.0 * patch - 1.0 if self.centred else patch, self.coords])


@dataclass
class Episode:
    support: list[list[View]]
    queries: list[View]
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def ways(self) -> int:
        return len(self.support)

    def shots(self) -> list[int]:
        return [len(s) for s in self.support]

    def assignment(self) -> np.ndarray:
        """(M, V_total) 0/1 matrix mapping stacked support rows to items."""
        sizes = self.shots()
        assign = np.zeros((len(sizes), sum(sizes)))
        start = 0
        for m, v in enumerate(sizes):
            assign[m, start:start + v] = 1.0
            start += v
        return assign

    def support_features(self) -> np.ndarray:
        return np.stack([v.features() for views in self.support for v in views])

    def query_features(self) -> np.ndarray:
        return np.stack([v.features() for v in self.queries])


def family_pattern(family_id: int, master_seed: int, preset: ImagePreset = DESK) -> np.ndarray:
    rng = rng_for(master_seed, _FAMILY_TAG, family_id)
    n = preset.image_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    out = np.zeros((preset.channels, n, n))
    for _ in range(preset.n_sinusoids):
        angle = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.5, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(-1, 1, size=preset.channels)
        wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        out += amp[:, None, None] * wave[None]
    return out


def detail_field(family_id: int, image_id: int, master_seed: int, preset: ImagePreset = DESK) -> np.ndarray:
    rng = rng_for(master_seed, _IMAGE_TAG, family_id, image_id)
    n = preset.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    out = np.zeros((preset.channels, n, n))
    for _ in range(preset.n_blobs):
        cx, cy = rng.uniform(0, n, size=2)
        sigma = rng.uniform(*preset.blob_sigma) * n
        amp = rng.uniform(-preset.blob_amplitude, preset.blob_amplitude, size=preset.channels)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
        out += amp[:, None, None] * blob[None]
    return out


@functools.lru_cache(maxsize=8192)
def gen_image(family_id: int, image_id: int, master_seed: int, preset: ImagePreset = DESK) -> ProceduralImage:
    if family_id < 0 or image_id < 0:
        raise ValueError("ids must be non-negative")
    raw = family_pattern(family_id, master_seed, preset) + detail_field(family_id, image_id, master_seed, preset)
    lo = raw.min(axis=(1, 2), keepdims=True)
    hi = raw.max(axis=(1, 2), keepdims=True)
    pixels = (raw - lo) / np.maximum(hi - lo, 1e-12)
    pixels.flags.writeable = False
    return ProceduralImage(pixels, family_id, image_id, mix_seed(master_seed, family_id, image_id))


def _jitter(rng: np.random.Generator, patch: np.ndarray, preset: ImagePreset) -> np.ndarray:
    gain = rng.uniform(1 - preset.gain_jitter, 1 + preset.gain_jitter, size=(patch.shape[0], 1, 1))
    return patch * gain + rng.normal(0.0, preset.noise_sigma, size=patch.shape)


def _crop_view(rng, image: ProceduralImage, place: tuple[int, int], item: int, preset: ImagePreset) -> View:
    y, x = place
    c, n = preset.crop, preset.image_size
    patch = image.pixels[:, y:y + c, x:x + c]
    coords = np.array([x / n, y / n, c / n, c / n])
    return View(_jitter(rng, patch, preset), coords, item)


def _full_view(rng, image: ProceduralImage, item: int, preset: ImagePreset) -> View:
    return View(_jitter(rng, image.pixels, preset), np.array([0.0, 0.0, 1.0, 1.0]), item)


def sample_episode(pool: PoolConfig, condition: str, episode_seed: int, preset: ImagePreset = DESK) -> Episode:
    """Draw classes, then images, then views. ``condition`` is 'partial' or 'full'."""
    if condition not in ("partial", "full"):
        raise ValueError(f"unknown condition {condition!r}")
    rng = np.random.default_rng(episode_seed)
    n_classes = int(rng.integers(preset.classes[0], preset.classes[1] + 1))
    ways = int(rng.integers(preset.ways[0], preset.ways[1] + 1))
    n_classes = min(n_classes, ways, pool.n_families)
    if n_classes * pool.images_per_family < ways:
        raise ValueError("pool exhausted: not enough images for the requested ways")
    families = rng.choice(pool.n_families, size=n_classes, replace=False) + pool.family_offset
    picks = rng.choice(n_classes * pool.images_per_family, size=ways, replace=False)
    sources = [(int(families[i // pool.images_per_family]), int(i % pool.images_per_family)) for i in picks]

    side = preset.image_size - preset.crop + 1
    support, queries, targets = [], [], []
    for m, (fam, img) in enumerate(sources):
        image = gen_image(fam, img, pool.master_seed, preset)
        if condition == "partial":
            cells = rng.choice(side * side, size=preset.support_views + preset.queries_per_item, replace=False)
            places = [(int(k // side), int(k % side)) for k in cells]
            support.append([_crop_view(rng, image, p, m, preset) for p in places[:preset.support_views]])
            queries.extend(_crop_view(rng, image, p, m, preset) for p in places[preset.support_views:])
        else:
            support.append([_full_view(rng, image, m, preset) for _ in range(preset.support_views)])
            queries.extend(_full_view(rng, image, m, preset) for _ in range(preset.queries_per_item))
        targets.extend([m] * preset.queries_per_item)

    meta = {"ways": ways, "classes": n_classes, "shots": [len(s) for s in support], "condition": condition,
            "seed": int(episode_seed), "sources": sources}
    return Episode(support, queries, np.array(targets, dtype=np.int64), meta)


class ImageEpisodeSampler:
    """Episode source keyed by episode index: index -> Episode."""

    def __init__(self, pool: PoolConfig, condition: str, master_seed: int, preset: ImagePreset = DESK):
        self.pool = pool
        self.condition = condition
        self.master_seed = master_seed
        self.preset = preset

    @property
    def view_dim(self) -> int:
        return self.preset.view_dim(self.condition)

    def episode_seed(self, index: int) -> int:
        return mix_seed(self.master_seed, index)

    def __call__(self, index: int) -> Episode:
        return sample_episode(self.pool, self.condition, self.episode_seed(index), self.preset)


# serialisation: JSON manifest + little-endian float64 payload

FORMAT = "poem-episode/1"


def save_episode(episode: Episode, prefix: str | Path) -> tuple[Path, Path]:
    prefix = Path(prefix)
    manifest_path, payload_path = prefix.with_suffix(".json"), prefix.with_suffix(".bin")
    records, chunks, offset = [], [], 0
    for role, views in [("support", v) for v in episode.support] + [("query", episode.queries)]:
        for v in views:
            data = np.ascontiguousarray(v.patch, dtype="<f8").ravel()
            records.append({"role": role, "item": v.item_index, "patch_shape": list(v.patch.shape),
                            "coords": [float(c) for c in v.coords], "offset": offset, "count": int(data.size),
                            "centred": v.centred})
            chunks.append(data)
            offset += data.size
    manifest = {"format": FORMAT, "byte_order": "little", "dtype": "float64",
                "targets": [int(t) for t in episode.targets], "meta": episode.meta, "views": records}
    manifest_path.write_text(json.dumps(manifest, indent=1))
    payload_path.write_bytes(np.concatenate(chunks).astype("<f8").tobytes() if chunks else b"")
    return manifest_path, payload_path


def load_episode(prefix: str | Path) -> Episode:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unsupported episode format {manifest.get('format')!r}")
    payload = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8")
    n_items = len(manifest["meta"].get("shots", [])) or 1 + max(r["item"] for r in manifest["views"])
    support: list[list[View]] = [[] for _ in range(n_items)]
    queries = []
    for r in manifest["views"]:
        patch = payload[r["offset"]:r["offset"] + r["count"]].reshape(r["patch_shape"]).astype(np.float64)
        view = View(patch, np.array(r["coords"], dtype=np.float64), r["item"], r.get("centred", True))
        (support[r["item"]] if r["role"] == "support" else queries).append(view)
    return Episode(support, queries, np.array(manifest["targets"], dtype=np.int64), manifest["meta"])


def preset_dict(preset: ImagePreset) -> dict:
    return asdict(preset)
