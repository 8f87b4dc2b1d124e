"""Segment-driven box expansion.

The image is resized to a fixed frame, averaged into a grid of square cells,
and the cells are grouped by graph-based segmentation. A box is expanded to
the tight union of itself and every segment it covers by at least a
threshold fraction; one candidate is produced per threshold.

Boxes handled here are in *cell units*: cell ``(row, col)`` spans the
continuous square ``[col, col + 1] x [row, row + 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from . import raster
from .errors import EmptyDataset
from .geometry import ProposalSet, Source, as_proposal_set, iou_matrix

SEG_FRAME = (400, 360)  # (width, height) in pixels
CELL_PX = 4
DEFAULT_K = 200.0
DEFAULT_MIN_SIZE = 10
DEFAULT_DELTAS = (0.1, 0.3, 0.6)
DELTA_CHOICES = tuple(np.round(np.arange(1, 10) * 0.1, 1))


@dataclass(frozen=True)
class CellGrid:
    mean_color: np.ndarray  # (grid_h, grid_w, 3) float64
    cell_px: int = CELL_PX

    @property
    def grid_w(self) -> int:
        return self.mean_color.shape[1]

    @property
    def grid_h(self) -> int:
        return self.mean_color.shape[0]


@dataclass(frozen=True)
class Segment:
    id: int
    area_cells: int
    runs: list[tuple[int, int, int]]  # (row, col_start, col_end) with col_end exclusive
    bbox: tuple[int, int, int, int]


@dataclass(frozen=True)
class SegmentLabeling:
    labels: np.ndarray  # (grid_h, grid_w) int32, ids 0..S-1
    area: np.ndarray  # (S,) cells per segment
    bbox: np.ndarray  # (S, 4) float64, tight continuous box in cell units
    runs: np.ndarray  # (R, 4) int32 rows of (segment, row, col_start, col_end), row-major order
    row_ptr: np.ndarray  # (grid_h + 1,) run offsets per grid row

    @property
    def n_segments(self) -> int:
        return len(self.area)

    def segment(self, sid: int) -> Segment:
        mine = self.runs[self.runs[:, 0] == sid]
        return Segment(
            sid,
            int(self.area[sid]),
            [(int(r), int(a), int(b)) for _, r, a, b in mine],
            tuple(int(v) for v in self.bbox[sid]),
        )

    @property
    def segments(self) -> list[Segment]:
        return [self.segment(s) for s in range(self.n_segments)]


@dataclass
class SegRefineParams:
    delta_set: Sequence[float] = DEFAULT_DELTAS
    k: float = DEFAULT_K
    min_size: int = DEFAULT_MIN_SIZE
    seg_frame: tuple[int, int] = SEG_FRAME
    cell_px: int = CELL_PX

    def __post_init__(self):
        d = sorted(set(float(x) for x in self.delta_set))
        if not d:
            raise ValueError("delta_set must not be empty")
        if any(not 0.0 < x < 1.0 for x in d):
            raise ValueError("thresholds must lie in (0, 1)")
        self.delta_set = tuple(d)
        if self.k <= 0:
            raise ValueError("k must be positive")


# ---------------------------------------------------------------------------
# grid and segmentation


def build_cell_grid(img: np.ndarray, frame: tuple[int, int] = SEG_FRAME, cell_px: int = CELL_PX) -> CellGrid:
    """Resize to ``frame`` and average each non-overlapping cell per channel."""
    fw, fh = frame
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    small = raster.resize(img, fw, fh).astype(np.float64)
    gh, gw = fh // cell_px, fw // cell_px
    small = small[: gh * cell_px, : gw * cell_px]
    means = small.reshape(gh, cell_px, gw, cell_px, 3).mean(axis=(1, 3))
    return CellGrid(means, cell_px)


@numba.njit(cache=True, nogil=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@numba.njit(cache=True, nogil=True)
def _felzenszwalb(n, ea, eb, ew, order, k, min_size):
    parent = np.arange(n)
    size = np.ones(n, dtype=np.int64)
    rank = np.zeros(n, dtype=np.int64)
    thresh = np.full(n, k, dtype=np.float64)
    for ii in range(order.shape[0]):
        e = order[ii]
        a = _find(parent, ea[e])
        b = _find(parent, eb[e])
        if a == b:
            continue
        w = ew[e]
        if w <= thresh[a] and w <= thresh[b]:
            if rank[a] < rank[b]:
                a, b = b, a
            parent[b] = a
            if rank[a] == rank[b]:
                rank[a] += 1
            size[a] += size[b]
            thresh[a] = w + k / size[a]
    for ii in range(order.shape[0]):
        e = order[ii]
        a = _find(parent, ea[e])
        b = _find(parent, eb[e])
        if a != b and (size[a] < min_size or size[b] < min_size):
            if rank[a] < rank[b]:
                a, b = b, a
            parent[b] = a
            if rank[a] == rank[b]:
                rank[a] += 1
            size[a] += size[b]
    comp = np.empty(n, dtype=np.int64)
    for i in range(n):
        comp[i] = _find(parent, i)
    return comp


@numba.njit(cache=True, nogil=True)
def _label_runs(labels):
    gh, gw = labels.shape
    runs = np.empty((gh * gw, 4), dtype=np.int32)
    row_ptr = np.zeros(gh + 1, dtype=np.int64)
    nr = 0
    for r in range(gh):
        c = 0
        while c < gw:
            s = labels[r, c]
            c0 = c
            while c < gw and labels[r, c] == s:
                c += 1
            runs[nr, 0] = s
            runs[nr, 1] = r
            runs[nr, 2] = c0
            runs[nr, 3] = c
            nr += 1
        row_ptr[r + 1] = nr
    return runs[:nr].copy(), row_ptr


def _grid_edges(colors: np.ndarray):
    gh, gw, _ = colors.shape
    idx = np.arange(gh * gw).reshape(gh, gw)
    ea = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    eb = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    flat = colors.reshape(-1, 3)
    ew = np.sqrt(((flat[ea] - flat[eb]) ** 2).sum(axis=1))
    return ea, eb, ew


def segment_graph(grid: CellGrid, k: float = DEFAULT_K, min_size: int = DEFAULT_MIN_SIZE) -> SegmentLabeling:
    """Graph-based greedy segmentation of the cell grid (4-connected, RGB distance)."""
    if k <= 0:
        raise ValueError("k must be positive")
    colors = grid.mean_color
    gh, gw = colors.shape[:2]
    ea, eb, ew = _grid_edges(colors)
    order = np.argsort(ew, kind="stable")
    comp = _felzenszwalb(gh * gw, ea, eb, ew, order, float(k), int(min_size))
    # compact ids in raster order of first appearance
    _, first, inverse = np.unique(comp, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    labels = rank[inverse].reshape(gh, gw).astype(np.int32)
    return labeling_from_labels(labels)


def labeling_from_labels(labels: np.ndarray) -> SegmentLabeling:
    """Build run-length segment records from a dense ``(grid_h, grid_w)`` label map."""
    labels = np.ascontiguousarray(labels, dtype=np.int32)
    runs, row_ptr = _label_runs(labels)
    n = int(labels.max()) + 1 if labels.size else 0
    area = np.bincount(runs[:, 0], weights=runs[:, 3] - runs[:, 2], minlength=n).astype(np.int64)
    bbox = np.zeros((n, 4))
    bbox[:, 0] = np.inf
    bbox[:, 1] = np.inf
    np.minimum.at(bbox[:, 0], runs[:, 0], runs[:, 2])
    np.minimum.at(bbox[:, 1], runs[:, 0], runs[:, 1])
    np.maximum.at(bbox[:, 2], runs[:, 0], runs[:, 3])
    np.maximum.at(bbox[:, 3], runs[:, 0], runs[:, 1] + 1)
    return SegmentLabeling(labels, area, bbox, runs, row_ptr)


# ---------------------------------------------------------------------------
# overlap and expansion


def seg_overlap(segment: Segment, r) -> float:
    """Fraction of the segment's cells whose centres fall inside ``r``."""
    r = np.asarray(getattr(r, "as_tuple", lambda: r)(), dtype=np.float64)
    if segment.area_cells <= 0:
        raise ValueError("segment has no cells")
    c0, c1 = int(np.ceil(r[0] - 0.5)), int(np.floor(r[2] - 0.5))
    r0, r1 = int(np.ceil(r[1] - 0.5)), int(np.floor(r[3] - 0.5))
    hit = 0
    for row, a, b in segment.runs:
        if r0 <= row <= r1:
            hit += max(0, min(b - 1, c1) - max(a, c0) + 1)
    return hit / segment.area_cells


@numba.njit(cache=True, nogil=True)
def _expand(runs, row_ptr, area, bbox, boxes, deltas, gh, gw):
    n = boxes.shape[0]
    nd = deltas.shape[0]
    ns = area.shape[0]
    out = np.empty((n * nd, 4), dtype=np.float64)
    counts = np.zeros(ns, dtype=np.int64)
    touched = np.empty(ns, dtype=np.int64)
    for i in range(n):
        x1 = boxes[i, 0]
        y1 = boxes[i, 1]
        x2 = boxes[i, 2]
        y2 = boxes[i, 3]
        c0 = max(int(np.ceil(x1 - 0.5)), 0)
        c1 = min(int(np.floor(x2 - 0.5)), gw - 1)
        r0 = max(int(np.ceil(y1 - 0.5)), 0)
        r1 = min(int(np.floor(y2 - 0.5)), gh - 1)
        nt = 0
        if c0 <= c1 and r0 <= r1:
            for j in range(row_ptr[r0], row_ptr[r1 + 1]):
                a = max(runs[j, 2], c0)
                b = min(runs[j, 3] - 1, c1)
                if b >= a:
                    s = runs[j, 0]
                    if counts[s] == 0:
                        touched[nt] = s
                        nt += 1
                    counts[s] += b - a + 1
        for d in range(nd):
            o = i * nd + d
            out[o, 0] = x1
            out[o, 1] = y1
            out[o, 2] = x2
            out[o, 3] = y2
        for t in range(nt):
            s = touched[t]
            ov = counts[s] / area[s]
            for d in range(nd):
                if ov >= deltas[d]:
                    o = i * nd + d
                    out[o, 0] = min(out[o, 0], bbox[s, 0])
                    out[o, 1] = min(out[o, 1], bbox[s, 1])
                    out[o, 2] = max(out[o, 2], bbox[s, 2])
                    out[o, 3] = max(out[o, 3], bbox[s, 3])
            counts[s] = 0
    return out


def expand_boxes(labeling: SegmentLabeling, boxes: np.ndarray, deltas: Sequence[float]) -> np.ndarray:
    """``(n * len(deltas), 4)`` expanded boxes, grouped per input box in delta order."""
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    gh, gw = labeling.labels.shape
    return _expand(
        labeling.runs,
        labeling.row_ptr,
        labeling.area,
        labeling.bbox,
        boxes,
        np.asarray(deltas, dtype=np.float64),
        gh,
        gw,
    )


def segment_recursive_box(labeling: SegmentLabeling, props, delta_set: Sequence[float]) -> ProposalSet:
    """One expanded candidate per (proposal, threshold), inheriting the parent score."""
    ps = as_proposal_set(props)
    nd = len(delta_set)
    boxes = expand_boxes(labeling, ps.boxes, delta_set)
    return ProposalSet(boxes, np.repeat(ps.scores, nd), Source.SEG_REFINED)


# ---------------------------------------------------------------------------
# frames


def to_cell_frame(boxes: np.ndarray, width: int, height: int, grid_w: int, grid_h: int) -> np.ndarray:
    s = np.array([grid_w / width, grid_h / height, grid_w / width, grid_h / height])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * s


def from_cell_frame(boxes: np.ndarray, width: int, height: int, grid_w: int, grid_h: int) -> np.ndarray:
    s = np.array([grid_w / width, grid_h / height, grid_w / width, grid_h / height])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4) / s


# ---------------------------------------------------------------------------
# learning


@dataclass
class SegSample:
    """One training image in cell units."""

    labeling: SegmentLabeling
    boxes: np.ndarray
    gts: np.ndarray
    classes: Sequence[str] | None = None


@dataclass
class DeltaRow:
    mask: int
    deltas: tuple[float, ...]
    loss: int
    dr: float
    mabo: float


def subset_of(mask: int, choices: Sequence[float] = DELTA_CHOICES) -> tuple[float, ...]:
    return tuple(float(c) for j, c in enumerate(choices) if mask >> j & 1)


def learn_delta(samples: Sequence[SegSample], eta: float = 0.5, choices: Sequence[float] = DELTA_CHOICES):
    """Exhaustive search over every non-empty threshold subset.

    Returns ``(best_deltas, table)``; ``table`` has one :class:`DeltaRow` per
    subset ordered by bitmask (bit j selects ``choices[j]``). The winner has the
    fewest missed objects, then the fewest thresholds, then the
    lexicographically smallest threshold tuple.
    """
    if not samples:
        raise EmptyDataset("no training images")
    choices = tuple(float(c) for c in choices)
    nc = len(choices)
    best_rows, classes = [], []
    for s in samples:
        gts = np.asarray(s.gts, dtype=np.float64).reshape(-1, 4)
        if len(gts) == 0:
            continue
        exp = expand_boxes(s.labeling, s.boxes, choices)
        if len(exp):
            ov = iou_matrix(gts, exp).reshape(len(gts), -1, nc).max(axis=1)
        else:
            ov = np.zeros((len(gts), nc))
        best_rows.append(ov)
        classes += list(s.classes) if s.classes is not None else ["object"] * len(gts)
    per_gt = np.concatenate(best_rows) if best_rows else np.zeros((0, nc))
    n_gt = len(per_gt)
    cls = np.array(classes)
    uniq = sorted(set(classes))

    table = []
    for mask in range(1, 1 << nc):
        cols = [j for j in range(nc) if mask >> j & 1]
        bo = per_gt[:, cols].max(axis=1) if n_gt else np.zeros(0)
        loss = int((bo < eta).sum())
        dr = 1.0 - loss / n_gt if n_gt else 0.0
        mabo = float(np.mean([bo[cls == c].mean() for c in uniq])) if uniq else 0.0
        table.append(DeltaRow(mask, subset_of(mask, choices), loss, dr, mabo))
    best = min(table, key=lambda r: (r.loss, len(r.deltas), r.deltas))
    return best.deltas, table

