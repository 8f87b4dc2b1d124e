"""Proposal quality metrics, ground-truth readers and synthetic test scenes."""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import PurePath
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MalformedAnnotation, NoGroundTruth
from .geometry import Box, ProposalSet, as_proposal_set, iou_matrix

DEFAULT_ETAS = (0.5, 0.7)
DEFAULT_BUDGETS = (1, 10, 100, 1000)
CURVE_GRID = tuple(np.round(np.arange(0.5, 1.0001, 0.05), 2))


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_name: str
    box: Box
    difficult: bool = False


# ---------------------------------------------------------------------------
# readers


def _int_field(node, tag):
    child = node.find(tag)
    if child is None or child.text is None:
        raise MalformedAnnotation(f"missing <{tag}>")
    try:
        return int(round(float(child.text.strip())))
    except ValueError:
        raise MalformedAnnotation(f"<{tag}> is not a number: {child.text!r}") from None


def parse_voc_xml(payload: bytes | str, image_id: str | None = None) -> list[GroundTruth]:
    """Read a PASCAL VOC annotation.

    Inclusive integer corners become continuous boxes ``(xmin, ymin, xmax + 1, ymax + 1)``.
    """
    try:
        root = ET.fromstring(payload)
    except ET.ParseError as exc:
        raise MalformedAnnotation(f"XML parse error: {exc}") from None
    if image_id is None:
        fn = root.findtext("filename")
        image_id = PurePath(fn.strip()).stem if fn else ""
    out = []
    for obj in root.iter("object"):
        name = (obj.findtext("name") or "").strip()
        if not name:
            raise MalformedAnnotation("object without <name>")
        bnd = obj.find("bndbox")
        if bnd is None:
            raise MalformedAnnotation(f"object {name!r} has no <bndbox>")
        x1, y1, x2, y2 = (_int_field(bnd, t) for t in ("xmin", "ymin", "xmax", "ymax"))
        if x2 < x1 or y2 < y1:
            raise MalformedAnnotation(f"inverted box for {name!r}")
        difficult = (obj.findtext("difficult") or "0").strip() == "1"
        out.append(GroundTruth(image_id, name, Box(x1, y1, x2 + 1, y2 + 1), difficult))
    return out


def parse_gt_jsonl(lines: Iterable[str]) -> list[GroundTruth]:
    """One ``{"image", "class", "box": [x1, y1, x2, y2]}`` object per line."""
    out = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            x1, y1, x2, y2 = (float(v) for v in rec["box"])
            image, cls = str(rec["image"]), str(rec["class"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedAnnotation(f"line {n}: {exc}") from None
        if not (x1 <= x2 and y1 <= y2) or not np.all(np.isfinite([x1, y1, x2, y2])):
            raise MalformedAnnotation(f"line {n}: invalid box {rec['box']}")
        out.append(GroundTruth(image, cls, Box(x1, y1, x2, y2), bool(rec.get("difficult", False))))
    return out


def dump_gt_jsonl(gts: Iterable[GroundTruth]) -> str:
    rows = []
    for g in gts:
        rec = {"image": g.image_id, "class": g.class_name, "box": list(g.box.as_tuple())}
        if g.difficult:
            rec["difficult"] = True
        rows.append(json.dumps(rec))
    return "".join(r + "\n" for r in rows)


# ---------------------------------------------------------------------------
# metrics


def _top(props, k: int | None) -> np.ndarray:
    ps = as_proposal_set(props)
    if k is None or k >= len(ps):
        return ps.sorted().boxes
    return ps.top(k).boxes


def best_overlap(gt: GroundTruth, props) -> float:
    boxes = as_proposal_set(props).boxes
    if len(boxes) == 0:
        return 0.0
    return float(iou_matrix(gt.box.as_array()[None], boxes).max())


def _group(gts: Sequence[GroundTruth]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, g in enumerate(gts):
        groups.setdefault(g.image_id, []).append(i)
    return groups


def best_overlaps(gts: Sequence[GroundTruth], props: Mapping[str, object], k: int | None = None) -> np.ndarray:
    """BO of every ground truth against the top-``k`` proposals of its image."""
    bo = np.zeros(len(gts))
    for image_id, idx in _group(gts).items():
        p = props.get(image_id)
        if p is None:
            continue
        boxes = _top(p, k)
        if len(boxes) == 0:
            continue
        g = np.array([gts[i].box.as_tuple() for i in idx])
        bo[idx] = iou_matrix(g, boxes).max(axis=1)
    return bo


def detection_recall(gts, props, eta: float, k: int | None = None) -> float:
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must be in [0, 1]")
    if not gts:
        return 0.0
    return float(np.mean(best_overlaps(gts, props, k) >= eta))


def abo_mabo(gts, props, k: int | None = None) -> tuple[dict[str, float], float]:
    if not gts:
        raise NoGroundTruth("no ground truth objects")
    bo = best_overlaps(gts, props, k)
    abo: dict[str, float] = {}
    for cls in sorted({g.class_name for g in gts}):
        sel = [i for i, g in enumerate(gts) if g.class_name == cls]
        abo[cls] = float(bo[sel].mean())
    return abo, float(np.mean(list(abo.values())))


def recall_overlap_curve(gts, props, k: int | None, eta_grid: Sequence[float]) -> list[tuple[float, float]]:
    grid = [float(e) for e in eta_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("eta grid must be sorted ascending")
    bo = best_overlaps(gts, props, k) if gts else np.zeros(0)
    return [(e, float(np.mean(bo >= e)) if len(bo) else 0.0) for e in grid]


@dataclass
class MetricsReport:
    dr: dict[float, dict[int, float]]
    abo: dict[str, float]
    mabo: float
    bo: list[float]
    curve: list[tuple[float, float]]
    budget: int | None = None
    n_objects: int = 0
    n_images: int = 0
    missing_images: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dr": {f"{eta:g}": {str(k): v for k, v in row.items()} for eta, row in self.dr.items()},
            "abo": self.abo,
            "mabo": self.mabo,
            "curve": [[e, r] for e, r in self.curve],
            "budget": self.budget,
            "n_objects": self.n_objects,
            "n_images": self.n_images,
        }

    def curve_csv(self) -> str:
        return "eta,recall\n" + "".join(f"{e:.2f},{r:.6f}\n" for e, r in self.curve)


def evaluate(
    gts: Sequence[GroundTruth],
    props: Mapping[str, object],
    etas: Sequence[float] = DEFAULT_ETAS,
    budgets: Sequence[int] = DEFAULT_BUDGETS,
    budget: int | None = 1000,
    curve_grid: Sequence[float] = CURVE_GRID,
    include_difficult: bool = True,
) -> MetricsReport:
    """Full report: DR per (eta, budget), ABO/MABO and the curve at ``budget``."""
    if not include_difficult:
        gts = [g for g in gts if not g.difficult]
    if not gts:
        raise NoGroundTruth("no ground truth objects")
    dr = {float(e): {int(k): detection_recall(gts, props, e, k) for k in budgets} for e in etas}
    abo, mabo = abo_mabo(gts, props, budget)
    bo = best_overlaps(gts, props, budget)
    image_ids = {g.image_id for g in gts}
    return MetricsReport(
        dr=dr,
        abo=abo,
        mabo=mabo,
        bo=[float(v) for v in bo],
        curve=recall_overlap_curve(gts, props, budget, curve_grid),
        budget=budget,
        n_objects=len(gts),
        n_images=len(image_ids),
        missing_images=sorted(image_ids - set(props)),
    )


# ---------------------------------------------------------------------------
# synthetic scenes


def _place(rng, n, width, height, gap):
    lo_w, hi_w = max(16, width // 16), max(24, int(width * 0.3))
    lo_h, hi_h = max(16, height // 16), max(24, int(height * 0.3))
    for _attempt in range(200):
        placed: list[tuple[int, int, int, int]] = []
        for _ in range(n):
            for _try in range(500):
                w = int(rng.integers(lo_w, hi_w + 1))
                h = int(rng.integers(lo_h, hi_h + 1))
                if w + 2 * gap > width or h + 2 * gap > height:
                    continue
                x = int(rng.integers(gap, width - w - gap + 1))
                y = int(rng.integers(gap, height - h - gap + 1))
                if all(
                    x >= bx2 + gap or bx1 >= x + w + gap or y >= by2 + gap or by1 >= y + h + gap
                    for bx1, by1, bx2, by2 in placed
                ):
                    placed.append((x, y, x + w, y + h))
                    break
            else:
                break
        if len(placed) == n:
            return placed
        hi_w = max(lo_w, int(hi_w * 0.8))
        hi_h = max(lo_h, int(hi_h * 0.8))
    raise ValueError(f"cannot place {n} disjoint objects in a {width}x{height} frame")


def synth_scene(seed: int, n_objects: int, width: int = 640, height: int = 480):
    """Deterministic scene of disjoint solid rectangles on a mildly textured background.

    Returns ``(image, ground_truths)``; the image is ``(height, width, 3)`` uint8.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    rng = np.random.default_rng(seed)
    base = rng.uniform(70, 185, size=3)
    yy, xx = np.mgrid[0:height, 0:width]
    shade = rng.uniform(-12, 12, size=3)[None, None, :] * (xx / width - 0.5)[..., None]
    shade = shade + rng.uniform(-12, 12, size=3)[None, None, :] * (yy / height - 0.5)[..., None]
    img = base + shade + rng.uniform(-5, 5, size=(height, width, 3))

    luma = np.array([0.299, 0.587, 0.114])
    gts = []
    image_id = f"synth_{seed}"
    for x1, y1, x2, y2 in _place(rng, n_objects, width, height, gap=max(6, width // 64)):
        for _ in range(1000):
            color = rng.uniform(0, 255, size=3)
            if abs((color - base) @ luma) >= 70 and np.linalg.norm(color - base) >= 100:
                break
        patch = color + rng.uniform(-5, 5, size=(y2 - y1, x2 - x1, 3))
        img[y1:y2, x1:x2] = patch
        gts.append(GroundTruth(image_id, "rect", Box(float(x1), float(y1), float(x2), float(y2))))
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), gts


def props_from_records(records: Iterable[tuple[str, Sequence[float], float]]) -> dict[str, ProposalSet]:
    """Group ``(image_id, box, score)`` rows into per-image proposal sets (input order kept)."""
    boxes: dict[str, list] = {}
    scores: dict[str, list] = {}
    for image_id, box, score in records:
        boxes.setdefault(image_id, []).append(box)
        scores.setdefault(image_id, []).append(score)
    return {k: ProposalSet(boxes[k], scores[k]) for k in boxes}
