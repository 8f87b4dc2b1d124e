"""Boxes, proposals, overlap measures and greedy non-maximum suppression.

Boxes use the continuous-rectangle convention: ``(x1, y1, x2, y2)`` with area
``(x2 - x1) * (y2 - y1)``. Bulk operations work on ``(n, 4)`` float arrays;
:class:`Box` and :class:`Proposal` are the scalar views of the same data.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numba
import numpy as np


class Source(enum.IntEnum):
    BING = 0
    EDGE_REFINED = 1
    SEG_REFINED = 2
    EXTERNAL = 3


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"invalid box {self.as_tuple()}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)


@dataclass(frozen=True)
class Proposal:
    box: Box
    score: float
    source: Source = Source.EXTERNAL

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("proposal score must be finite")


class ProposalSet(Sequence[Proposal]):
    """Array-backed sequence of proposals.

    ``boxes`` is ``(n, 4)`` float64, ``scores`` ``(n,)`` float64 and
    ``sources`` ``(n,)`` int8 holding :class:`Source` codes.
    """

    __slots__ = ("boxes", "scores", "sources")

    def __init__(self, boxes, scores, sources=Source.EXTERNAL):
        self.boxes = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
        self.scores = np.ascontiguousarray(np.asarray(scores, dtype=np.float64).reshape(-1))
        n = len(self.boxes)
        if len(self.scores) != n:
            raise ValueError("boxes and scores differ in length")
        src = np.asarray(sources, dtype=np.int8)
        self.sources = np.full(n, src, dtype=np.int8) if src.ndim == 0 else src.reshape(-1).copy()
        if len(self.sources) != n:
            raise ValueError("sources length mismatch")

    @classmethod
    def empty(cls) -> "ProposalSet":
        return cls(np.zeros((0, 4)), np.zeros(0))

    @classmethod
    def from_proposals(cls, props: Iterable[Proposal]) -> "ProposalSet":
        props = list(props)
        if not props:
            return cls.empty()
        return cls(
            [p.box.as_tuple() for p in props],
            [p.score for p in props],
            [int(p.source) for p in props],
        )

    def __len__(self) -> int:
        return len(self.scores)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            b = self.boxes[idx]
            return Proposal(Box(*map(float, b)), float(self.scores[idx]), Source(int(self.sources[idx])))
        return ProposalSet(self.boxes[idx], self.scores[idx], self.sources[idx])

    def __iter__(self) -> Iterator[Proposal]:
        for i in range(len(self)):
            yield self[i]

    def __repr__(self) -> str:
        return f"ProposalSet(n={len(self)})"

    def take(self, idx) -> "ProposalSet":
        idx = np.asarray(idx, dtype=np.intp)
        return ProposalSet(self.boxes[idx], self.scores[idx], self.sources[idx])

    def with_boxes(self, boxes, source=None) -> "ProposalSet":
        return ProposalSet(boxes, self.scores, self.sources if source is None else source)

    def sorted(self) -> "ProposalSet":
        """Stable sort by score, descending."""
        return self.take(np.argsort(-self.scores, kind="stable"))

    def top(self, k: int) -> "ProposalSet":
        return self.sorted().take(np.arange(min(k, len(self))))

    @staticmethod
    def concat(parts: Sequence["ProposalSet"]) -> "ProposalSet":
        if not parts:
            return ProposalSet.empty()
        return ProposalSet(
            np.concatenate([p.boxes for p in parts]),
            np.concatenate([p.scores for p in parts]),
            np.concatenate([p.sources for p in parts]),
        )


def as_proposal_set(props) -> ProposalSet:
    if isinstance(props, ProposalSet):
        return props
    return ProposalSet.from_proposals(props)


def _as_box_array(b) -> np.ndarray:
    if isinstance(b, Box):
        return b.as_array()
    return np.asarray(b, dtype=np.float64)


# ---------------------------------------------------------------------------
# overlap


def iou(a, b) -> float:
    a = _as_box_array(a)
    b = _as_box_array(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def iou_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two equally shaped ``(n, 4)`` arrays."""
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, 0.0)


def blend(a, b, gamma: float):
    """Coordinate-wise ``(1 - gamma) * a + gamma * b``; works on Box or arrays."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    if isinstance(a, Box):
        out = (1.0 - gamma) * a.as_array() + gamma * _as_box_array(b)
        return Box(*map(float, _fix_order(out)))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return (1.0 - gamma) * a + gamma * b


def _fix_order(v: np.ndarray) -> np.ndarray:
    # rounding can push x1 a hair past x2 on degenerate inputs
    v = v.copy()
    v[2] = max(v[0], v[2])
    v[3] = max(v[1], v[3])
    return v


def scale_box(b, sx: float, sy: float):
    if sx <= 0 or sy <= 0:
        raise ValueError("scale factors must be positive")
    f = np.array([sx, sy, sx, sy])
    if isinstance(b, Box):
        return Box(*map(float, b.as_array() * f))
    return np.asarray(b, dtype=np.float64) * f


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True).reshape(-1, 4)
    np.clip(out[:, 0::2], 0.0, width, out=out[:, 0::2])
    np.clip(out[:, 1::2], 0.0, height, out=out[:, 1::2])
    return out


# ---------------------------------------------------------------------------
# NMS


@numba.njit(cache=True, nogil=True)
def _greedy_nms(boxes, order, rho, limit):
    n = order.shape[0]
    keep = np.empty(n, dtype=np.int64)
    nk = 0
    for ii in range(n):
        i = order[ii]
        x1 = boxes[i, 0]
        y1 = boxes[i, 1]
        x2 = boxes[i, 2]
        y2 = boxes[i, 3]
        ai = (x2 - x1) * (y2 - y1)
        ok = True
        for jj in range(nk):
            j = keep[jj]
            ov = 0.0
            iw = min(x2, boxes[j, 2]) - max(x1, boxes[j, 0])
            ih = min(y2, boxes[j, 3]) - max(y1, boxes[j, 1])
            if iw > 0 and ih > 0:
                inter = iw * ih
                union = ai + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter
                if union > 0:
                    ov = inter / union
            # rho = 0 suppresses everything, disjoint boxes included
            if ov >= rho:
                ok = False
                break
        if ok:
            keep[nk] = i
            nk += 1
            if nk >= limit:
                break
    return keep[:nk]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, rho: float, limit: int | None = None) -> np.ndarray:
    """Indices kept by greedy suppression, in kept (score-descending) order."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    lim = len(order) if limit is None else int(limit)
    return _greedy_nms(boxes, order.astype(np.int64), float(rho), max(lim, 0))


def nms(props, rho: float, limit: int | None = None):
    """Greedy NMS: keep the best proposal, drop everything with IoU >= rho, repeat.

    Ties in score are resolved by input order. Returns the same container type
    it was given (ProposalSet or list).
    """
    ps = as_proposal_set(props)
    kept = ps.take(nms_indices(ps.boxes, ps.scores, rho, limit))
    if isinstance(props, ProposalSet):
        return kept
    return list(kept)
