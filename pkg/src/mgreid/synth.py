"""Procedural person-like images with known part boxes, identities and domain styles.

Each figure is a stack of three primitives: an ellipse head, a rectangular torso
and two rectangular legs. Part colors and build come from the identity; the
background, clutter, illumination and noise come from the domain. Geometry is
drawn from its own random stream so that the same identity and seed produce the
same boxes in every domain.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import PartBox
from .config import PARTS, ConfigError, GenConfig

MANIFEST_VERSION = 1

# Clothing palette shared by all identities so that single parts are ambiguous.
PALETTE = np.array(
    [
        [0.85, 0.10, 0.10],
        [0.10, 0.65, 0.15],
        [0.15, 0.25, 0.85],
        [0.90, 0.85, 0.10],
        [0.10, 0.80, 0.80],
        [0.80, 0.15, 0.75],
        [0.95, 0.95, 0.95],
        [0.08, 0.08, 0.08],
        [0.95, 0.55, 0.10],
        [0.50, 0.50, 0.50],
    ],
    dtype=np.float32,
)
HEAD_PALETTE = np.array(
    [
        [0.95, 0.80, 0.65],
        [0.55, 0.35, 0.20],
        [0.25, 0.15, 0.10],
        [0.85, 0.65, 0.30],
    ],
    dtype=np.float32,
)


class GenerationError(RuntimeError):
    """The requested dataset cannot satisfy the split contract."""


@dataclass(frozen=True)
class IdentitySpec:
    id_label: int
    head_color: tuple[float, float, float]
    upper_color: tuple[float, float, float]
    legs_color: tuple[float, float, float]
    build: float = 1.0


@dataclass(frozen=True)
class DomainStyle:
    domain_id: int
    background: tuple[float, float, float]
    brightness: float
    tint: tuple[float, float, float]
    noise_std: float
    clutter: int


@dataclass
class Sample:
    image: np.ndarray
    id_label: int
    camera_id: int
    domain_id: int
    oracle_boxes: dict[str, PartBox]
    sample_id: str = ""
    split: str = ""
    paint_masks: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "id_label": self.id_label,
            "camera_id": self.camera_id,
            "domain_id": self.domain_id,
            "split": self.split,
            "oracle_boxes": {p: self.oracle_boxes[p].to_list() for p in PARTS},
        }


@dataclass
class Manifest:
    config: GenConfig
    samples: list[Sample]
    root: Path | None = None

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def by_id(self) -> dict[str, Sample]:
        return {s.sample_id: s for s in self.samples}

    @property
    def image_dims(self) -> tuple[int, int]:
        return self.config.image_height, self.config.image_width


def make_identities(num_ids: int, seed: int) -> list[IdentitySpec]:
    rng = np.random.default_rng([seed, 7])
    combos: set[tuple[int, int, int]] = set()
    total = len(HEAD_PALETTE) * len(PALETTE) ** 2
    if num_ids > total:
        raise ConfigError(f"at most {total} distinct identities are supported")
    specs = []
    while len(specs) < num_ids:
        combo = (
            int(rng.integers(len(HEAD_PALETTE))),
            int(rng.integers(len(PALETTE))),
            int(rng.integers(len(PALETTE))),
        )
        if combo in combos or combo[1] == combo[2]:
            continue
        combos.add(combo)
        specs.append(
            IdentitySpec(
                id_label=len(specs),
                head_color=tuple(HEAD_PALETTE[combo[0]].tolist()),
                upper_color=tuple(PALETTE[combo[1]].tolist()),
                legs_color=tuple(PALETTE[combo[2]].tolist()),
                build=float(rng.uniform(0.85, 1.15)),
            )
        )
    return specs


def make_domain_style(domain_id: int, seed: int) -> DomainStyle:
    rng = np.random.default_rng([seed, 11, domain_id])
    return DomainStyle(
        domain_id=domain_id,
        background=tuple(rng.uniform(0.1, 0.9, size=3).tolist()),
        brightness=float(rng.uniform(0.55, 1.0)),
        tint=tuple(rng.uniform(0.75, 1.25, size=3).tolist()),
        noise_std=float(rng.uniform(0.02, 0.06)),
        clutter=int(rng.integers(1, 5)),
    )


def _figure_boxes(spec: IdentitySpec, rng: np.random.Generator, height: int, width: int) -> dict[str, PartBox]:
    fig_h = rng.uniform(0.72, 0.95) * height
    top = rng.uniform(0.0, height - fig_h)
    head_f = rng.uniform(0.17, 0.22)
    upper_f = rng.uniform(0.36, 0.42)
    y0 = int(round(top))
    y1 = int(round(top + head_f * fig_h))
    y2 = int(round(top + (head_f + upper_f) * fig_h))
    y3 = min(height, int(round(top + fig_h)))

    torso_w = int(round(np.clip(rng.uniform(0.42, 0.6) * width * spec.build, 6, width - 2)))
    cx = rng.uniform(torso_w / 2, width - torso_w / 2)

    def centered(w: int) -> tuple[int, int]:
        x0 = int(round(cx - w / 2))
        x0 = min(max(x0, 0), width - w)
        return x0, x0 + w

    head_w = max(4, int(round(0.55 * torso_w)))
    legs_w = max(4, int(round(0.85 * torso_w)))
    hx = centered(head_w)
    tx = centered(torso_w)
    lx = centered(legs_w)
    return {
        "head": PartBox("head", hx[0], y0, hx[1], y1),
        "upper": PartBox("upper", tx[0], y1, tx[1], y2),
        "legs": PartBox("legs", lx[0], y2, lx[1], y3),
    }


def _paint_masks(boxes: dict[str, PartBox], height: int, width: int) -> dict[str, np.ndarray]:
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    masks = {}

    hb = boxes["head"]
    cx, cy = 0.5 * (hb.x_min + hb.x_max), hb.center_y
    rx, ry = hb.width / 2, hb.height / 2
    masks["head"] = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0

    ub = boxes["upper"]
    masks["upper"] = (ys >= ub.y_min) & (ys < ub.y_max) & (xs >= ub.x_min) & (xs < ub.x_max)

    lb = boxes["legs"]
    leg_w = max(2, int(round(0.4 * lb.width)))
    rows = (ys >= lb.y_min) & (ys < lb.y_max)
    left = (xs >= lb.x_min) & (xs < lb.x_min + leg_w)
    right = (xs >= lb.x_max - leg_w) & (xs < lb.x_max)
    masks["legs"] = rows & (left | right)
    return masks


def render_identity(
    id_spec: IdentitySpec,
    domain_style: DomainStyle,
    rng_seed: int,
    image_dims: tuple[int, int] = (64, 32),
    patch_size: int = 8,
    camera_id: int = 0,
) -> Sample:
    height, width = image_dims
    if height % patch_size or width % patch_size:
        raise ConfigError(f"image dims {image_dims} not divisible by patch size {patch_size}")
    geom = np.random.default_rng([rng_seed, 0])
    look = np.random.default_rng([rng_seed, 1, domain_style.domain_id])

    boxes = _figure_boxes(id_spec, geom, height, width)
    masks = _paint_masks(boxes, height, width)

    bg = np.asarray(domain_style.background, dtype=np.float32)
    ramp = np.linspace(-0.08, 0.08, height, dtype=np.float32)[:, None, None]
    image = np.broadcast_to(bg + ramp, (height, width, 3)).copy()
    for _ in range(domain_style.clutter):
        ch = int(look.integers(4, height // 3))
        cw = int(look.integers(3, width // 2))
        y = int(look.integers(0, height - ch))
        x = int(look.integers(0, width - cw))
        image[y : y + ch, x : x + cw] = PALETTE[look.integers(len(PALETTE))]

    image[masks["legs"]] = id_spec.legs_color
    image[masks["upper"]] = id_spec.upper_color
    image[masks["head"]] = id_spec.head_color

    image = image * domain_style.brightness * np.asarray(domain_style.tint, dtype=np.float32)
    image = image + look.normal(0.0, domain_style.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(
        image=image,
        id_label=id_spec.id_label,
        camera_id=camera_id,
        domain_id=domain_style.domain_id,
        oracle_boxes=boxes,
        paint_masks=masks,
    )


def corrupt_box(box: PartBox, mode: str, rng: np.random.Generator, image_dims: tuple[int, int]) -> PartBox:
    """Simulate a grounding failure: a whole-body box or an over-split sliver."""
    height, width = image_dims
    if mode == "oversize":
        y0 = float(np.floor(rng.uniform(0.0, 0.04) * height))
        y1 = float(height - np.floor(rng.uniform(0.0, 0.04) * height))
        pad = rng.uniform(0.0, 0.15) * width
        x0 = max(0.0, float(np.floor(box.x_min - pad)))
        x1 = min(float(width), float(np.ceil(box.x_max + pad)))
        return PartBox(box.part, x0, y0, x1, y1)
    if mode == "oversplit":
        h = rng.uniform(0.01, 0.05) * height
        lo = box.y_min
        hi = max(lo, box.y_max - h)
        y0 = rng.uniform(lo, hi) if hi > lo else lo
        y0 = min(y0, height - h)
        return PartBox(box.part, box.x_min, float(y0), box.x_max, float(y0 + h))
    raise ValueError(f"unknown corruption mode {mode!r}")


def _sample_seed(seed: int, id_label: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, id_label, index]).generate_state(1)[0])


def _assign_splits(group: list[Sample], num_cameras: int) -> None:
    """Mark the first sample of every camera holding >= 2 samples as a query."""
    for k, sample in enumerate(group):
        sample.camera_id = k % num_cameras
    seen: set[int] = set()
    counts = {c: sum(s.camera_id == c for s in group) for c in range(num_cameras)}
    for sample in group:
        if sample.camera_id not in seen and counts[sample.camera_id] >= 2:
            sample.split = "query"
            seen.add(sample.camera_id)
        else:
            sample.split = "gallery"
    queries = [s for s in group if s.split == "query"]
    gallery = [s for s in group if s.split == "gallery"]
    ok = queries and all(any(g.camera_id != q.camera_id for g in gallery) for q in queries)
    if not ok:
        raise GenerationError(
            f"identity {group[0].id_label if group else '?'} has no cross-camera query/gallery pair"
        )


def generate_dataset(config: GenConfig, out_dir: str | Path | None = None) -> Manifest:
    """Render every sample, assign train/query/gallery splits, optionally persist.

    With two or more domains the held-out domain supplies query and gallery and
    the remaining domains are the training set. With a single domain each
    identity's samples alternate between training and evaluation.
    """
    config.validate()
    if config.num_cameras < 2:
        raise GenerationError("cross-camera retrieval needs at least two cameras")
    dims = (config.image_height, config.image_width)
    identities = make_identities(config.num_ids, config.seed)
    styles = [make_domain_style(d, config.seed) for d in range(config.num_domains)]
    heldout = config.heldout_domain % config.num_domains

    samples: list[Sample] = []
    for spec in identities:
        train_group: list[Sample] = []
        eval_group: list[Sample] = []
        for j in range(config.samples_per_id):
            domain = j % config.num_domains
            sample = render_identity(spec, styles[domain], _sample_seed(config.seed, spec.id_label, j),
                                     dims, config.patch_size)
            sample.sample_id = f"{spec.id_label:04d}_{j:03d}"
            sample.paint_masks = None
            if config.num_domains > 1:
                held = domain == heldout
            else:
                held = j % 2 == 1
            (eval_group if held else train_group).append(sample)
        if not train_group:
            raise GenerationError(f"identity {spec.id_label} has no training sample")
        for k, sample in enumerate(train_group):
            sample.camera_id = k % config.num_cameras
            sample.split = "train"
        _assign_splits(eval_group, config.num_cameras)
        samples.extend(train_group + eval_group)

    manifest = Manifest(config=config, samples=samples)
    if out_dir is not None:
        save_manifest(manifest, out_dir)
    return manifest


def save_manifest(manifest: Manifest, out_dir: str | Path) -> Path:
    """Write ``images/<sample_id>.png`` and ``manifest.json`` atomically."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=out_dir.parent))
    try:
        (tmp / "images").mkdir()
        for s in manifest.samples:
            pixels = np.round(np.clip(s.image, 0.0, 1.0) * 255).astype(np.uint8)
            Image.fromarray(pixels).save(tmp / "images" / f"{s.sample_id}.png")
        payload = {
            "version": MANIFEST_VERSION,
            "config": manifest.config.__dict__,
            "samples": [s.record() for s in manifest.samples],
        }
        (tmp / "manifest.json").write_text(json.dumps(payload, indent=1), encoding="utf-8")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    manifest.root = out_dir
    return out_dir


def load_manifest(root: str | Path) -> Manifest:
    """Load a dataset directory.

    Real data can be adapted by writing the same layout: an ``images/`` folder of
    RGB PNGs named by ``sample_id`` and a ``manifest.json`` whose ``samples`` list
    carries ``sample_id``, ``id_label``, ``camera_id``, ``domain_id``, ``split``
    (train/query/gallery) and, when known, ``oracle_boxes`` as
    ``{part: [x_min, y_min, x_max, y_max]}``. ``config`` must at least give
    ``image_height``, ``image_width`` and ``patch_size``.
    """
    root = Path(root)
    meta_path = root / "manifest.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no manifest.json under {root}")
    payload = json.loads(meta_path.read_text(encoding="utf-8"))
    known = GenConfig.__dataclass_fields__
    config = GenConfig(**{k: v for k, v in payload["config"].items() if k in known})
    samples = []
    for rec in payload["samples"]:
        image = np.asarray(Image.open(root / "images" / f"{rec['sample_id']}.png").convert("RGB"),
                           dtype=np.float32) / 255.0
        boxes = {p: PartBox.from_list(p, rec["oracle_boxes"][p]) for p in rec.get("oracle_boxes", {})}
        samples.append(
            Sample(
                image=image,
                id_label=int(rec["id_label"]),
                camera_id=int(rec["camera_id"]),
                domain_id=int(rec["domain_id"]),
                oracle_boxes=boxes,
                sample_id=rec["sample_id"],
                split=rec["split"],
            )
        )
    return Manifest(config=config, samples=samples, root=root)


def quantize(manifest: Manifest) -> Manifest:
    """Round images to 8-bit levels, matching what a save/load round trip yields."""
    for s in manifest.samples:
        s.image = np.round(np.clip(s.image, 0.0, 1.0) * 255).astype(np.float32) / 255.0
    return manifest
