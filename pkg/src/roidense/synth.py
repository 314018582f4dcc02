"""Deterministic synthetic phantoms: grayscale backgrounds with smooth
elliptical (benign) or spiculated (malignant) lesions and exact ground truth.

Every case is generated from its own sub-seed, derived from the master seed
and the case index, so generation is reproducible bit-for-bit and can run
per-case in parallel (set RDNS_THREADS > 1) without changing the output.

A lesion is rendered as an intensity field that is 1 at the center and decays
like a Gaussian in the normalized radius; the binary mask is the superlevel
set of that field at 0.5, which places the mask boundary exactly on the
(possibly spiked) unit contour. Spiculation multiplies the boundary radius by
triangular spikes at jittered equal angular spacing, the classic malignancy
sign in this kind of imagery.

Dataset directory layout: ``manifest.json`` (canonical key-sorted JSON with
the spec and per-case metadata) plus ``cases/NNNN.bin`` tensor blocks holding
the image and one mask record per lesion.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (DomainError, GenerationError, ParseError, PlacementError,
                     ShapeError)
from .geometry import Box, mask_bounds
from .rng import RandomSource, derive_seed
from .tensor import Tensor, read_tensor_block, write_tensor_block

BENIGN = "benign"
MALIGNANT = "malignant"

MANIFEST_FORMAT = "roidense-dataset-v1"

_LESION_COUNT_WEIGHTS = (0.70, 0.25, 0.05)  # 1, 2 or 3 lesions per case


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float]
    axes: tuple[float, float]
    rotation: float
    label: str
    spicule_count: int
    mask: np.ndarray
    box: Box

    def __post_init__(self):
        if self.label not in (BENIGN, MALIGNANT):
            raise DomainError(f"unknown lesion label {self.label!r}")
        if self.label == BENIGN and self.spicule_count != 0:
            raise DomainError("a benign lesion cannot carry spicules")
        if self.label == MALIGNANT and self.spicule_count < 1:
            raise DomainError("a malignant lesion needs at least one spicule")
        mask = np.asarray(self.mask, dtype=bool)
        if not mask.any():
            raise DomainError("lesion mask is empty")
        object.__setattr__(self, "mask", mask)
        tight = mask_bounds(mask)
        if tight != self.box:
            raise DomainError(
                f"box {self.box} is not the tight bounds {tight} of the mask")


@dataclass(frozen=True)
class Phantom:
    image: Tensor
    lesions: tuple[Lesion, ...]
    seed_id: int

    def __post_init__(self):
        object.__setattr__(self, "lesions", tuple(self.lesions))
        _, _, h, w = self.image.shape
        for i, a in enumerate(self.lesions):
            if a.mask.shape != (h, w):
                raise ShapeError(f"lesion {i} mask shape {a.mask.shape} "
                                 f"differs from image ({h}, {w})")
            for j, b in enumerate(self.lesions[:i]):
                if np.logical_and(a.mask, b.mask).any():
                    raise DomainError(f"lesions {j} and {i} overlap")

    @property
    def label(self) -> str:
        if not self.lesions:
            raise DomainError("phantom has no lesions, so no case label")
        return self.lesions[0].label

    def truth_mask(self) -> np.ndarray:
        """Union of all lesion masks."""
        _, _, h, w = self.image.shape
        out = np.zeros((h, w), dtype=bool)
        for lesion in self.lesions:
            out |= lesion.mask
        return out


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 344
    benign_count: int = 178
    malignant_count: int = 166
    split_fraction: float = 0.8
    image_size: tuple[int, int] = (64, 64)
    master_seed: int = 0

    def __post_init__(self):
        if self.benign_count < 0 or self.malignant_count < 0:
            raise DomainError("class counts must be >= 0")
        if self.benign_count + self.malignant_count != self.count:
            raise DomainError(
                f"benign {self.benign_count} + malignant {self.malignant_count} "
                f"!= count {self.count}")
        if not 0.0 < self.split_fraction < 1.0:
            raise DomainError(
                f"split_fraction must be in (0, 1), got {self.split_fraction}")
        h, w = self.image_size
        if min(h, w) < 32:
            raise DomainError(f"image size too small for lesions: {(h, w)}")
        object.__setattr__(self, "image_size", (int(h), int(w)))


@dataclass(frozen=True)
class Dataset:
    spec: DatasetSpec
    train: tuple[Phantom, ...]
    validation: tuple[Phantom, ...]

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "validation", tuple(self.validation))


def _smooth_field(rng: RandomSource, h: int, w: int, grid: int = 4,
                  amplitude: float = 0.12) -> np.ndarray:
    """Bilinear upsample of a coarse random grid; slow background variation."""
    coarse = rng.uniforms(grid * grid, 0.0, amplitude).reshape(grid, grid)
    ys = np.linspace(0.0, grid - 1.0, h)
    xs = np.linspace(0.0, grid - 1.0, w)
    y0 = np.minimum(ys.astype(int), grid - 2)
    x0 = np.minimum(xs.astype(int), grid - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    v00 = coarse[y0[:, None], x0[None, :]]
    v01 = coarse[y0[:, None], x0[None, :] + 1]
    v10 = coarse[y0[:, None] + 1, x0[None, :]]
    v11 = coarse[y0[:, None] + 1, x0[None, :] + 1]
    return ((1 - fy) * (1 - fx) * v00 + (1 - fy) * fx * v01
            + fy * (1 - fx) * v10 + fy * fx * v11)


def render_lesion(center: tuple[float, float], axes: tuple[float, float],
                  rotation: float, spicule_count: int,
                  spicule_angles: tuple[float, ...], spicule_amplitude: float,
                  spicule_half_width: float,
                  canvas_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Render one lesion; returns (binary mask, intensity field in [0, 1]).

    Pure function of its numeric arguments, so identical parameters give a
    bit-identical mask on every run and platform. Raises PlacementError when
    the rendered mask is empty or touches the canvas border.
    """
    h, w = canvas_hw
    cx, cy = center
    a, b = axes
    if a <= 0 or b <= 0:
        raise DomainError(f"lesion axes must be positive, got {(a, b)}")
    if len(spicule_angles) != spicule_count:
        raise DomainError(f"{len(spicule_angles)} angles for "
                          f"{spicule_count} spicules")
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    dx = jj - cx
    dy = ii - cy
    cos_r = math.cos(rotation)
    sin_r = math.sin(rotation)
    u = dx * cos_r + dy * sin_r
    v = -dx * sin_r + dy * cos_r
    rho = np.hypot(u / a, v / b)
    boundary = np.ones_like(rho)
    if spicule_count:
        phi = np.arctan2(v, u)
        for ang in spicule_angles:
            delta = np.abs((phi - ang + math.pi) % (2.0 * math.pi) - math.pi)
            boundary += spicule_amplitude * np.clip(
                1.0 - delta / spicule_half_width, 0.0, None)
    rho_eff = rho / boundary
    intensity = np.exp(-math.log(2.0) * rho_eff * rho_eff)
    mask = intensity > 0.5
    if not mask.any():
        raise PlacementError(f"lesion at {center} renders an empty mask")
    if mask[0, :].any() or mask[-1, :].any() or mask[:, 0].any() or mask[:, -1].any():
        raise PlacementError(f"lesion at {center} touches the canvas border")
    return mask, intensity


def _sample_lesion(rng: RandomSource, label: str, canvas_hw: tuple[int, int],
                   existing: list[np.ndarray],
                   shrink: float = 1.0) -> tuple[Lesion, np.ndarray]:
    """Draw geometry, render, and enforce separation; one attempt."""
    h, w = canvas_hw
    min_dim = min(h, w)
    a = rng.uniform(0.09, 0.16) * min_dim * shrink
    b = a * rng.uniform(0.65, 1.0)
    rotation = rng.uniform(0.0, math.pi)
    if label == MALIGNANT:
        spicule_count = 5 + rng.randint(5)
        amplitude = rng.uniform(0.22, 0.75)
        half_width = (math.pi / spicule_count) * rng.uniform(0.45, 0.8)
        spacing = 2.0 * math.pi / spicule_count
        angles = tuple(
            s * spacing + 0.3 * spacing * rng.uniform(-1.0, 1.0)
            for s in range(spicule_count))
    else:
        spicule_count = 0
        amplitude = 0.0
        half_width = 1.0
        angles = ()
    reach = a * (1.0 + amplitude) + 2.0
    if 2.0 * reach >= min_dim - 2.0:
        raise PlacementError("lesion too large for the canvas")
    cx = rng.uniform(reach, w - 1.0 - reach)
    cy = rng.uniform(reach, h - 1.0 - reach)
    mask, intensity = render_lesion((cx, cy), (a, b), rotation, spicule_count,
                                    angles, amplitude, half_width, canvas_hw)
    grown = mask.copy()
    for shift in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        grown |= np.roll(mask, shift, axis=(0, 1))
    for other in existing:
        if np.logical_and(grown, other).any():
            raise PlacementError("lesion overlaps an existing one")
    lesion = Lesion(center=(cx, cy), axes=(a, b), rotation=rotation,
                    label=label, spicule_count=spicule_count, mask=mask,
                    box=mask_bounds(mask))
    return lesion, intensity


def generate_phantom(label: str, seed_id: int, sub_seed: int,
                     image_size: tuple[int, int],
                     max_retries: int = 100) -> Phantom:
    """One case: background plus 1-3 non-overlapping lesions of one class."""
    rng = RandomSource(sub_seed)
    h, w = image_size
    base = rng.uniform(0.15, 0.30)
    background = base + _smooth_field(rng, h, w)
    background += rng.normals(h * w, std=0.015).reshape(h, w)
    image = np.clip(background, 0.0, 1.0)

    count = 1 + rng.choice(list(_LESION_COUNT_WEIGHTS))
    shrink = 1.0 / math.sqrt(count)  # multi-lesion cases get smaller lesions
    lesions: list[Lesion] = []
    masks: list[np.ndarray] = []
    for _ in range(count):
        placed = False
        for _attempt in range(max_retries):
            try:
                lesion, intensity = _sample_lesion(rng, label, image_size,
                                                   masks, shrink)
            except PlacementError:
                continue
            contrast = rng.uniform(0.50, 0.75)
            image = np.clip(image + contrast * intensity, 0.0, 1.0)
            lesions.append(lesion)
            masks.append(lesion.mask)
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place lesion {len(lesions) + 1}/{count} after "
                f"{max_retries} retries (seed_id={seed_id}, sub_seed={sub_seed})")
    return Phantom(image=Tensor(image[None, None]), lesions=tuple(lesions),
                   seed_id=seed_id)


def _worker_count() -> int:
    raw = os.environ.get("RDNS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """All cases from the spec, stratified-split into train and validation.

    Case i draws everything from derive_seed(master_seed, i), so the result
    is a pure function of the spec. The split is a seeded shuffle of each
    class followed by a prefix cut, which keeps the class ratio of each side
    within two cases of the global ratio.
    """
    labels = [BENIGN] * spec.benign_count + [MALIGNANT] * spec.malignant_count

    def build(i: int) -> Phantom:
        return generate_phantom(labels[i], i, derive_seed(spec.master_seed, i),
                                spec.image_size)

    workers = _worker_count()
    indices = range(spec.count)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            phantoms = list(pool.map(build, indices))
    else:
        phantoms = [build(i) for i in indices]

    split_rng = RandomSource(derive_seed(spec.master_seed, spec.count + 1))
    benign_ids = list(range(spec.benign_count))
    malignant_ids = list(range(spec.benign_count, spec.count))
    split_rng.shuffle(benign_ids)
    split_rng.shuffle(malignant_ids)
    train_total = round(spec.split_fraction * spec.count)
    train_benign = min(round(spec.split_fraction * spec.benign_count),
                       train_total)
    train_malignant = train_total - train_benign
    if not 0 <= train_malignant <= spec.malignant_count:
        raise GenerationError(
            f"split {spec.split_fraction} is unsatisfiable for counts "
            f"{spec.benign_count}/{spec.malignant_count}")
    train_ids = benign_ids[:train_benign] + malignant_ids[:train_malignant]
    val_ids = benign_ids[train_benign:] + malignant_ids[train_malignant:]
    split_rng.shuffle(train_ids)
    split_rng.shuffle(val_ids)
    return Dataset(spec=spec,
                   train=tuple(phantoms[i] for i in train_ids),
                   validation=tuple(phantoms[i] for i in val_ids))


def mask_compactness(mask: np.ndarray) -> float:
    """Boundary-edge-count perimeter squared over area.

    Scale-free shape feature: low for smooth blobs, high for spiky ones. Used
    to verify that the benign/malignant classes are actually separable.
    """
    m = np.asarray(mask, dtype=bool)
    area = int(m.sum())
    if area == 0:
        raise DomainError("empty mask has no compactness")
    per = 0
    padded = np.pad(m, 1, constant_values=False)
    for shift in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        per += int(np.logical_and(padded,
                                  ~np.roll(padded, shift, axis=(0, 1))).sum())
    return per * per / area


# ---------------------------------------------------------------------------
# Directory serialization


def _case_filename(seed_id: int) -> str:
    return f"cases/{seed_id:04d}.bin"


def _lesion_meta(lesion: Lesion) -> dict:
    return {
        "label": lesion.label,
        "spicule_count": lesion.spicule_count,
        "center": [lesion.center[0], lesion.center[1]],
        "axes": [lesion.axes[0], lesion.axes[1]],
        "rotation": lesion.rotation,
        "box": [lesion.box.x1, lesion.box.y1, lesion.box.x2, lesion.box.y2],
    }


def export_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write manifest.json plus one tensor-block file per case."""
    root = Path(path)
    (root / "cases").mkdir(parents=True, exist_ok=True)
    cases = []
    for split_name, phantoms in (("train", dataset.train),
                                 ("validation", dataset.validation)):
        for ph in phantoms:
            cases.append({
                "seed_id": ph.seed_id,
                "label": ph.label if ph.lesions else "",
                "split": split_name,
                "file": _case_filename(ph.seed_id),
                "lesions": [_lesion_meta(l) for l in ph.lesions],
            })
            records = [ph.image] + [Tensor(l.mask[None, None].astype(np.float64))
                                    for l in ph.lesions]
            with open(root / _case_filename(ph.seed_id), "wb") as fh:
                write_tensor_block(fh, records)
    cases.sort(key=lambda c: c["seed_id"])
    manifest = {
        "format": MANIFEST_FORMAT,
        "spec": {
            "count": dataset.spec.count,
            "benign_count": dataset.spec.benign_count,
            "malignant_count": dataset.spec.malignant_count,
            "split_fraction": dataset.spec.split_fraction,
            "image_size": list(dataset.spec.image_size),
            "master_seed": dataset.spec.master_seed,
        },
        "cases": cases,
        # split membership lives on the cases; these preserve the in-split order
        "train_order": [ph.seed_id for ph in dataset.train],
        "validation_order": [ph.seed_id for ph in dataset.validation],
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def import_dataset(path: str | Path) -> Dataset:
    """Rebuild a dataset from a directory written by export_dataset."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ParseError(f"no manifest.json under {root}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"unknown dataset format {manifest.get('format')!r}")
    spec = DatasetSpec(
        count=manifest["spec"]["count"],
        benign_count=manifest["spec"]["benign_count"],
        malignant_count=manifest["spec"]["malignant_count"],
        split_fraction=manifest["spec"]["split_fraction"],
        image_size=tuple(manifest["spec"]["image_size"]),
        master_seed=manifest["spec"]["master_seed"],
    )
    by_id: dict[int, Phantom] = {}
    for case in manifest["cases"]:
        with open(root / case["file"], "rb") as fh:
            records = read_tensor_block(fh)
        if len(records) != 1 + len(case["lesions"]):
            raise ParseError(
                f"case {case['seed_id']} holds {len(records)} records, "
                f"manifest lists {len(case['lesions'])} lesions")
        image = records[0]
        lesions = []
        for meta, rec in zip(case["lesions"], records[1:]):
            mask = rec.data[0, 0] > 0.5
            lesions.append(Lesion(
                center=tuple(meta["center"]), axes=tuple(meta["axes"]),
                rotation=meta["rotation"], label=meta["label"],
                spicule_count=meta["spicule_count"], mask=mask,
                box=Box(*meta["box"])))
        by_id[case["seed_id"]] = Phantom(image=image, lesions=tuple(lesions),
                                         seed_id=case["seed_id"])
    return Dataset(spec=spec,
                   train=tuple(by_id[i] for i in manifest["train_order"]),
                   validation=tuple(by_id[i]
                                    for i in manifest["validation_order"]))
