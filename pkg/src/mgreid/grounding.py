"""Part grounding: providers, box calibration, and patch-level pseudo labels."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .boxes import PartBox
from .config import PARTS, CalibPolicy
from .synth import Manifest, corrupt_box

QUERY_TEMPLATE = "Guide me to the location of {} within the image by providing its bounding boxes"
PART_PHRASES = {
    "head": "the head of the person",
    "upper": "the upper body of the person",
    "legs": "the legs of the person",
}


def build_query(part: str) -> str:
    return QUERY_TEMPLATE.format(PART_PHRASES[part])


class GroundingProvider(Protocol):
    """Anything that maps (sample, part) to a raw part box.

    A provider backed by a remote grounding model would format
    ``build_query(part)`` together with the image, send it, and parse the
    ``[x_min, y_min, x_max, y_max]`` answer into a :class:`PartBox`.
    """

    def locate(self, sample_id: str, part: str) -> PartBox: ...


class OracleProvider:
    """Ground-truth boxes from the synthetic generator, optionally corrupted."""

    def __init__(
        self,
        manifest: Manifest,
        oversize_rate: float = 0.0,
        oversplit_rate: float = 0.0,
        seed: int = 0,
    ):
        self._samples = manifest.by_id()
        self._order = {sid: i for i, sid in enumerate(self._samples)}
        self.dims = manifest.image_dims
        self.oversize_rate = oversize_rate
        self.oversplit_rate = oversplit_rate
        self.seed = seed

    def locate(self, sample_id: str, part: str) -> PartBox:
        try:
            box = self._samples[sample_id].oracle_boxes[part]
        except KeyError as exc:
            raise LookupError(f"no oracle box for {sample_id}/{part}") from exc
        rng = np.random.default_rng([self.seed, self._order[sample_id], PARTS.index(part)])
        u = rng.uniform()
        if u < self.oversize_rate:
            return corrupt_box(box, "oversize", rng, self.dims)
        if u < self.oversize_rate + self.oversplit_rate:
            return corrupt_box(box, "oversplit", rng, self.dims)
        return box.with_flag(False)


class FileProvider:
    """Precomputed boxes from JSONL rows ``{"sample_id", "part", "box"}``."""

    def __init__(self, path: str | Path):
        self._boxes: dict[tuple[str, str], PartBox] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                sid = row.get("sample_id", row.get("sample"))
                coords = row.get("box", row.get("raw_box"))
                self._boxes[(sid, row["part"])] = PartBox.from_list(row["part"], coords)

    def locate(self, sample_id: str, part: str) -> PartBox:
        try:
            return self._boxes[(sample_id, part)]
        except KeyError as exc:
            raise LookupError(f"no stored box for {sample_id}/{part}") from exc


def locate(provider: GroundingProvider, sample_id: str, part: str) -> PartBox:
    return provider.locate(sample_id, part).with_flag(False)


def stripe_box(part: str, policy: CalibPolicy, image_dims: tuple[int, int]) -> PartBox:
    height, width = image_dims
    lo, hi = policy.stripes[part]
    return PartBox(part, 0.0, lo * height, float(width), hi * height, calibrated=True)


def calibrate_box(box: PartBox, policy: CalibPolicy, image_dims: tuple[int, int]) -> PartBox:
    """Keep plausible boxes; replace implausible ones by the part's stripe window."""
    height, width = image_dims
    lo, hi = policy.height_range[box.part]
    h_frac = box.height / height
    area = box.height * box.width / (height * width)
    if lo <= h_frac <= hi and area <= policy.max_area:
        return box.with_flag(True)
    return stripe_box(box.part, policy, image_dims)


def rasterize(box: PartBox, grid: tuple[int, int, int]) -> np.ndarray:
    """Binary vote per patch: 1 iff the patch square overlaps the box with positive area."""
    rows, cols, p = grid
    y0 = np.arange(rows) * p
    x0 = np.arange(cols) * p
    dy = np.minimum(box.y_max, y0 + p) - np.maximum(box.y_min, y0)
    dx = np.minimum(box.x_max, x0 + p) - np.maximum(box.x_min, x0)
    hit = (dy[:, None] > 0) & (dx[None, :] > 0)
    return hit.reshape(-1).astype(np.uint8)


def build_label_matrix(g_head, g_upper, g_legs) -> np.ndarray:
    rows = [np.asarray(g, dtype=np.uint8).reshape(-1) for g in (g_head, g_upper, g_legs)]
    if len({r.shape[0] for r in rows}) != 1:
        raise ValueError(f"label rows differ in length: {[r.shape[0] for r in rows]}")
    return np.stack(rows)


def stripe_label_matrix(grid: tuple[int, int, int]) -> np.ndarray:
    """Equal horizontal thirds, the fixed partition baseline."""
    rows, cols, p = grid
    height, width = rows * p, cols * p
    boxes = [PartBox(part, 0, k * height / 3, width, (k + 1) * height / 3) for k, part in enumerate(PARTS)]
    return build_label_matrix(*(rasterize(b, grid) for b in boxes))


@dataclass
class LabelRow:
    sample_id: str
    part: str
    raw_box: PartBox
    calibrated_box: PartBox
    mask: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {
                "sample_id": self.sample_id,
                "part": self.part,
                "raw_box": self.raw_box.to_list(),
                "calibrated_box": self.calibrated_box.to_list(),
                "mask_bits": "".join(str(int(b)) for b in self.mask),
            }
        )


def annotate(
    manifest: Manifest,
    provider: GroundingProvider,
    policy: CalibPolicy,
    splits: Iterable[str] = ("train",),
    calibrate: bool = True,
) -> list[LabelRow]:
    dims = manifest.image_dims
    p = manifest.config.patch_size
    grid = (dims[0] // p, dims[1] // p, p)
    wanted = set(splits)
    rows = []
    for sample in manifest.samples:
        if sample.split not in wanted:
            continue
        for part in PARTS:
            raw = locate(provider, sample.sample_id, part)
            cal = calibrate_box(raw, policy, dims) if calibrate else raw.with_flag(True)
            rows.append(LabelRow(sample.sample_id, part, raw, cal, rasterize(cal, grid)))
    return rows


def write_label_file(rows: list[LabelRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".labels-", dir=path.parent)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(row.to_json() + "\n")
    os.replace(tmp, path)
    return path


def read_label_file(path: str | Path) -> dict[str, np.ndarray]:
    """Return ``{sample_id: 3 x N_patch label matrix}``."""
    parts: dict[str, dict[str, np.ndarray]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            bits = np.frombuffer(row["mask_bits"].encode("ascii"), dtype=np.uint8) - ord("0")
            parts.setdefault(row["sample_id"], {})[row["part"]] = bits
    labels = {}
    for sid, by_part in parts.items():
        missing = [p for p in PARTS if p not in by_part]
        if missing:
            raise ValueError(f"label file lacks parts {missing} for {sid}")
        labels[sid] = build_label_matrix(*(by_part[p] for p in PARTS))
    return labels


def oracle_label_matrix(sample, grid: tuple[int, int, int]) -> np.ndarray:
    return build_label_matrix(*(rasterize(sample.oracle_boxes[p], grid) for p in PARTS))
