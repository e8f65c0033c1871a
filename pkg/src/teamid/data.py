"""Datasets: directory ingestion, synthetic glyph generation, augmentation, PK sampling.

Images are float32 H×W×3 arrays in [0, 1]. Identity labels are remapped to
contiguous zero-based integers at ingestion time, train identities first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

SPLITS = ("train", "query", "gallery")

# Fill palette for synthetic identities; index doubles as color_id.
_PALETTE = [
    (230, 60, 60), (60, 200, 80), (80, 110, 235), (235, 200, 50),
    (200, 70, 220), (60, 210, 210), (240, 140, 40), (150, 230, 60),
    (120, 80, 220), (230, 90, 160), (90, 160, 90), (180, 180, 200),
]


class IngestError(RuntimeError):
    """Raised when a dataset root does not match the expected layout."""


@dataclass
class Sample:
    """One labeled vehicle image."""

    identity_id: int
    split: str
    brand_id: int | None = None
    color_id: int | None = None
    type_id: int | None = None
    camera_id: int | None = None
    image_path: Path | None = None
    resolution: int = 224
    _image: np.ndarray | None = field(default=None, repr=False)

    @property
    def image(self) -> np.ndarray:
        """Pixel array, loaded lazily from image_path when not set directly."""
        if self._image is None:
            if self.image_path is None:
                raise ValueError("sample has neither pixels nor an image path")
            with Image.open(self.image_path) as im:
                im = im.convert("RGB").resize(
                    (self.resolution, self.resolution), Image.BILINEAR)
                self._image = np.asarray(im, dtype=np.float32) / 255.0
        return self._image

    def with_image(self, image: np.ndarray) -> "Sample":
        """Copy of this sample with replaced pixels; labels untouched."""
        return Sample(
            identity_id=self.identity_id, split=self.split,
            brand_id=self.brand_id, color_id=self.color_id,
            type_id=self.type_id, camera_id=self.camera_id,
            image_path=self.image_path, resolution=self.resolution,
            _image=image)


@dataclass
class DatasetView:
    """Immutable collection of samples with split and label bookkeeping."""

    samples: list[Sample]
    num_identities: int
    num_attribute_classes: dict[str, int]

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [s for s in self.samples if s.split == name]

    def split_indices(self, name: str) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.split == name]

    def identities(self, name: str) -> set[int]:
        return {s.identity_id for s in self.split(name)}

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class TripletBatch:
    """P×K identity-balanced batch with one sampled triplet per anchor.

    Index fields point into DatasetView.samples. Hard mining happens at loss
    time; the triplets here are random valid ones for invariant checking.
    """

    indices: list[int]
    anchors: list[int]
    positives: list[int]
    negatives: list[int]
    P: int
    K: int


def _remap_identities(samples: list[Sample]) -> dict[int, int]:
    """Remap identity ids so train identities are contiguous from zero."""
    train_ids = sorted({s.identity_id for s in samples if s.split == "train"})
    other_ids = sorted({s.identity_id for s in samples} - set(train_ids))
    mapping = {old: new for new, old in enumerate(train_ids + other_ids)}
    for s in samples:
        s.identity_id = mapping[s.identity_id]
    return mapping


def _check_duplicates(paths: list[Path]) -> None:
    seen: dict[str, Path] = {}
    for p in paths:
        if p.name in seen:
            raise IngestError(
                f"duplicate image name {p.name!r}: {seen[p.name]} and {p}")
        seen[p.name] = p


def ingest_directory(root: str | Path, layout: str, resolution: int = 224,
                     map_out: str | Path | None = None) -> DatasetView:
    """Ingest a cars196- or veri776-style directory tree.

    cars196: root/{train,test}/<class_name>/<image>.jpg  (test -> gallery)
    veri776: root/{image_train,image_query,image_test}/<id>_c<cam>_<rest>.jpg

    The identity remapping table is written as JSON next to the root (or to
    map_out when given).
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"dataset root {root} does not exist")
    if layout == "cars196":
        samples, raw_names = _ingest_cars196(root, resolution)
    elif layout == "veri776":
        samples, raw_names = _ingest_veri776(root, resolution)
    else:
        raise IngestError(f"unknown layout {layout!r}")
    if not samples:
        raise IngestError("no samples found")

    mapping = _remap_identities(samples)
    map_path = Path(map_out) if map_out is not None else root / "identity_map.json"
    try:
        map_path.write_text(json.dumps(
            {raw_names[old]: new for old, new in mapping.items()}, indent=2))
    except OSError:
        pass  # read-only root; remap still applied in memory

    view = DatasetView(
        samples=samples,
        num_identities=len({s.identity_id for s in samples}),
        num_attribute_classes={},
    )
    return view


def _ingest_cars196(root: Path, resolution: int):
    samples: list[Sample] = []
    raw_names: dict[int, str] = {}
    class_ids: dict[str, int] = {}
    all_paths: list[Path] = []
    for split_dir, split in (("train", "train"), ("test", "gallery")):
        d = root / split_dir
        if not d.is_dir():
            raise IngestError(f"missing split directory {split_dir!r} under {root}")
        for class_dir in sorted(p for p in d.iterdir() if p.is_dir()):
            cid = class_ids.setdefault(class_dir.name, len(class_ids))
            raw_names[cid] = class_dir.name
            for img in sorted(class_dir.glob("*.jpg")) + sorted(class_dir.glob("*.png")):
                all_paths.append(img)
                samples.append(Sample(
                    identity_id=cid, split=split,
                    image_path=img, resolution=resolution))
    _check_duplicates(all_paths)
    return samples, raw_names


def _ingest_veri776(root: Path, resolution: int):
    samples: list[Sample] = []
    raw_names: dict[int, str] = {}
    id_map: dict[str, int] = {}
    all_paths: list[Path] = []
    for split_dir, split in (("image_train", "train"),
                             ("image_query", "query"),
                             ("image_test", "gallery")):
        d = root / split_dir
        if not d.is_dir():
            raise IngestError(f"missing split directory {split_dir!r} under {root}")
        for img in sorted(d.glob("*.jpg")) + sorted(d.glob("*.png")):
            parts = img.stem.split("_")
            if len(parts) < 2 or not parts[1].startswith("c"):
                raise IngestError(f"cannot parse identity/camera from {img.name}")
            idstr, camstr = parts[0], parts[1][1:]
            iid = id_map.setdefault(idstr, len(id_map))
            raw_names[iid] = idstr
            all_paths.append(img)
            samples.append(Sample(
                identity_id=iid, split=split, camera_id=int(camstr),
                image_path=img, resolution=resolution))
    _check_duplicates(all_paths)
    return samples, raw_names


def _brand_polygon(brand_id: int, rng: np.random.Generator):
    """Base silhouette for a brand: vertex count and aspect define the family."""
    n_vertices = 3 + brand_id
    aspect = 0.5 + 0.22 * (brand_id % 4)
    return n_vertices, aspect


def _render_glyph(resolution: int, n_vertices: int, aspect: float,
                  radii: np.ndarray, color: tuple, emblem: tuple,
                  angle: float, scale: float, shift: tuple) -> np.ndarray:
    im = Image.new("RGB", (resolution, resolution), (12, 12, 12))
    draw = ImageDraw.Draw(im)
    cx = resolution / 2 + shift[0] * resolution
    cy = resolution / 2 + shift[1] * resolution
    base_r = 0.38 * resolution * scale
    pts = []
    for v in range(n_vertices):
        theta = angle + 2 * np.pi * v / n_vertices
        r = base_r * radii[v]
        pts.append((cx + r * np.cos(theta), cy + aspect * r * np.sin(theta)))
    draw.polygon(pts, fill=color, outline=(240, 240, 240))
    # identity emblem: a small bright square at an identity-specific offset
    ex = cx + emblem[0] * base_r * 0.5
    ey = cy + emblem[1] * base_r * 0.5 * aspect
    e = max(2, resolution // 20)
    draw.rectangle([ex - e, ey - e, ex + e, ey + e], fill=(250, 250, 250))
    return np.asarray(im, dtype=np.float32) / 255.0


def generate_synthetic(num_brands: int, ids_per_brand: int, views_per_id: int,
                       seed: int, resolution: int = 64,
                       holdout_ids_per_brand: int = 0) -> DatasetView:
    """Deterministic toy dataset of rendered vehicle-like glyphs.

    Shape family (vertex count, aspect) encodes the brand; per-identity fill
    color, vertex jitter, and emblem position separate identities; per-view
    rotation/scale/shift/noise supplies intra-class variability. With
    holdout_ids_per_brand > 0, the last identities of each brand form an
    open-set test split (views alternate between query and gallery).
    """
    if min(num_brands, ids_per_brand, views_per_id) < 1:
        raise ValueError("all counts must be >= 1")
    if holdout_ids_per_brand >= ids_per_brand:
        raise ValueError("holdout must leave at least one train identity")
    rng = np.random.default_rng(seed)
    samples: list[Sample] = []
    identity = 0
    for b in range(num_brands):
        n_vertices, aspect = _brand_polygon(b, rng)
        for i in range(ids_per_brand):
            color_id = int(rng.integers(len(_PALETTE)))
            color = _PALETTE[color_id]
            radii = rng.uniform(0.88, 1.0, size=n_vertices)
            emblem = (rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8))
            holdout = i >= ids_per_brand - holdout_ids_per_brand
            for v in range(views_per_id):
                angle = rng.uniform(-0.5, 0.5)
                scale = rng.uniform(0.75, 1.0)
                shift = (rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08))
                img = _render_glyph(resolution, n_vertices, aspect, radii,
                                    color, emblem, angle, scale, shift)
                img = np.clip(
                    img + rng.normal(0, 0.015, img.shape).astype(np.float32),
                    0.0, 1.0).astype(np.float32)
                if holdout:
                    split = "query" if v % 2 == 0 else "gallery"
                else:
                    split = "train"
                samples.append(Sample(
                    identity_id=identity, split=split, brand_id=b,
                    color_id=color_id, type_id=b % 3, camera_id=v % 4,
                    resolution=resolution, _image=img))
            identity += 1
    _remap_identities(samples)
    return DatasetView(
        samples=samples,
        num_identities=identity,
        num_attribute_classes={"brand": num_brands, "color": len(_PALETTE),
                               "type": 3},
    )


def save_dataset(view: DatasetView, path: str | Path) -> None:
    """Serialize a DatasetView (pixels included) to one npz file."""

    def col(attr):
        return np.array([getattr(s, attr) if getattr(s, attr) is not None
                         else -1 for s in view.samples], dtype=np.int64)

    images = np.stack([s.image for s in view.samples]).astype(np.float32)
    np.savez_compressed(
        Path(path), images=images, identity_id=col("identity_id"),
        brand_id=col("brand_id"), color_id=col("color_id"),
        type_id=col("type_id"), camera_id=col("camera_id"),
        split=np.array([SPLITS.index(s.split) for s in view.samples]),
        num_identities=np.array(view.num_identities),
        attribute_classes=np.array(json.dumps(view.num_attribute_classes)))


def load_dataset(path: str | Path) -> DatasetView:
    with np.load(Path(path), allow_pickle=False) as z:
        images = z["images"]
        cols = {k: z[k] for k in ("identity_id", "brand_id", "color_id",
                                  "type_id", "camera_id", "split")}
        num_identities = int(z["num_identities"])
        attr = json.loads(str(z["attribute_classes"]))
    samples = []
    for i in range(len(images)):
        def opt(name):
            v = int(cols[name][i])
            return None if v < 0 else v
        samples.append(Sample(
            identity_id=int(cols["identity_id"][i]),
            split=SPLITS[int(cols["split"][i])],
            brand_id=opt("brand_id"), color_id=opt("color_id"),
            type_id=opt("type_id"), camera_id=opt("camera_id"),
            resolution=images.shape[1], _image=images[i]))
    return DatasetView(samples=samples, num_identities=num_identities,
                       num_attribute_classes=attr)


def export_cars196(view: DatasetView, root: str | Path) -> None:
    """Write a DatasetView as a cars196-style tree (round-trip testing)."""
    root = Path(root)
    for split_dir, split in (("train", "train"), ("test", "gallery")):
        (root / split_dir).mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(view.samples):
            if s.split != split and not (split == "gallery" and s.split == "query"):
                continue
            d = root / split_dir / f"id_{s.identity_id:05d}"
            d.mkdir(parents=True, exist_ok=True)
            arr = (np.clip(s.image, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(arr).save(d / f"img_{i:06d}.png")


def random_erase(sample: Sample, probability: float = 0.5,
                 area_range: tuple[float, float] = (0.02, 0.4),
                 aspect_range: tuple[float, float] = (0.3, 3.33),
                 rng: np.random.Generator | None = None) -> Sample:
    """Random-erasing augmentation: overwrite a random rectangle with noise.

    Labels never change. With probability 1-p the sample is returned as-is.
    """
    if not 0.0 <= probability <= 1.0:
        raise ValueError("probability must be in [0, 1]")
    lo, hi = area_range
    if not 0.0 < lo <= hi < 1.0:
        raise ValueError("area_range must satisfy 0 < lo <= hi < 1")
    rng = rng if rng is not None else np.random.default_rng()
    if rng.random() >= probability:
        return sample
    img = sample.image.copy()
    h, w = img.shape[:2]
    for _ in range(50):
        area = rng.uniform(lo, hi) * h * w
        aspect = rng.uniform(*aspect_range)
        eh = int(round(np.sqrt(area * aspect)))
        ew = int(round(np.sqrt(area / aspect)))
        if 0 < eh <= h and 0 < ew <= w:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            img[y:y + eh, x:x + ew] = rng.random((eh, ew, 3), dtype=np.float32)
            break
    return sample.with_image(img)


def shuffle_channels(sample: Sample, probability: float = 0.5,
                     rng: np.random.Generator | None = None) -> Sample:
    """Randomly permute the RGB channels.

    Shape and texture survive; absolute color does not, which keeps a coarse
    attribute classifier from leaning on per-identity paint. Labels never
    change.
    """
    if not 0.0 <= probability <= 1.0:
        raise ValueError("probability must be in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    if rng.random() >= probability:
        return sample
    perm = rng.permutation(3)
    return sample.with_image(np.ascontiguousarray(sample.image[:, :, perm]))


def sample_pk_batch(view: DatasetView, P: int, K: int,
                    rng: np.random.Generator | None = None) -> TripletBatch:
    """Draw P identities × K instances from the train split.

    Instances are resampled with replacement when an identity has fewer than
    K images. Also attaches one random valid triplet per anchor.
    """
    rng = rng if rng is not None else np.random.default_rng()
    by_id: dict[int, list[int]] = {}
    for i in view.split_indices("train"):
        by_id.setdefault(view.samples[i].identity_id, []).append(i)
    if len(by_id) < P:
        raise ValueError(f"need {P} train identities, have {len(by_id)}")
    ids = list(rng.choice(sorted(by_id), size=P, replace=False))
    indices: list[int] = []
    for ident in ids:
        pool = by_id[ident]
        take = (list(rng.permutation(pool))[:K] if len(pool) >= K
                else list(rng.choice(pool, size=K, replace=True)))
        indices.extend(int(t) for t in take)

    anchors, positives, negatives = [], [], []
    idents = [view.samples[i].identity_id for i in indices]
    for pos_in_batch, a in enumerate(indices if P >= 2 else []):
        same = [j for j, d in zip(indices, idents) if d == idents[pos_in_batch]]
        diff = [j for j, d in zip(indices, idents) if d != idents[pos_in_batch]]
        pos_pool = [j for j in same if j != a] or same
        anchors.append(a)
        positives.append(int(rng.choice(pos_pool)))
        negatives.append(int(rng.choice(diff)))
    return TripletBatch(indices=indices, anchors=anchors,
                        positives=positives, negatives=negatives, P=P, K=K)
