"""Binarized normed-gradient objectness: features, scoring, scanning, training.

Bit convention: the 64 cells of an 8x8 feature are numbered row-major and
cell ``c`` lives at bit ``63 - c`` of a 64-bit word, so the 16-digit
big-endian hex text of a word reads the window row by row.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from . import raster
from .errors import EmptyIntersection, MalformedModelFile, NoPositives
from .geometry import Box, ProposalSet, Source, iou_matrix

log = logging.getLogger(__name__)

NG_SIDE = 8
SIDE_CHOICES = (16, 32, 64, 128, 256, 512)
DEFAULT_SIZES = tuple((w, h) for h in SIDE_CHOICES for w in SIDE_CHOICES)
DEFAULT_NW = 2
DEFAULT_NG = 4
PER_SIZE_NMS_IOU = 0.6
PER_SIZE_KEEP = 130


@dataclass
class BinarizedModel:
    w: np.ndarray
    a_plus: list[int]
    beta: list[float]
    n_g: int = DEFAULT_NG
    sizes: list[tuple[int, int]] = field(default_factory=lambda: list(DEFAULT_SIZES))
    calib: np.ndarray | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(64)
        self.a_plus = [int(a) & 0xFFFFFFFFFFFFFFFF for a in self.a_plus]
        self.beta = [float(b) for b in self.beta]
        if len(self.a_plus) != len(self.beta) or not self.a_plus:
            raise ValueError("basis needs at least one (a_plus, beta) pair")
        if not 1 <= self.n_g <= 8:
            raise ValueError(f"n_g must be in [1, 8], got {self.n_g}")
        self.sizes = [(int(w), int(h)) for w, h in self.sizes]
        if self.calib is None:
            self.calib = np.tile([1.0, 0.0], (len(self.sizes), 1))
        self.calib = np.asarray(self.calib, dtype=np.float64).reshape(-1, 2)
        if len(self.calib) != len(self.sizes):
            raise ValueError("one (v, t) calibration pair is required per size")

    @property
    def n_w(self) -> int:
        return len(self.a_plus)

    def reconstructed_w(self) -> np.ndarray:
        """The filter actually scored by the bitwise path: sum_j beta_j * a_j."""
        out = np.zeros(64)
        for a, b in zip(self.a_plus, self.beta):
            out += b * (2.0 * unpack_bits(a) - 1.0)
        return out

    def with_basis(self, n_w: int, n_g: int | None = None) -> "BinarizedModel":
        m = binarize_model(self.w, n_w, self.n_g if n_g is None else n_g)
        m.sizes = list(self.sizes)
        m.calib = self.calib.copy()
        return m


# ---------------------------------------------------------------------------
# bit helpers


def pack_bits(bits) -> int:
    """64 booleans (row-major cells) to a 64-bit word, cell 0 at the MSB."""
    bits = np.asarray(bits, dtype=bool).reshape(64)
    return int(np.packbits(bits).view(">u8")[0])


def unpack_bits(word: int) -> np.ndarray:
    raw = np.array([word], dtype=">u8").view(np.uint8)
    return np.unpackbits(raw).astype(np.float64)


def binary_planes(feat, n_g: int) -> list[int]:
    """The top ``n_g`` bit planes of a byte feature, most significant first."""
    g = np.asarray(feat, dtype=np.uint8).reshape(64)
    return [pack_bits((g >> (7 - k)) & 1) for k in range(n_g)]


# ---------------------------------------------------------------------------
# features and scoring


def extract_ng(img: np.ndarray, window) -> np.ndarray:
    """64-byte normed-gradient feature of ``window`` over a gray/color image.

    Each of the 8x8 cells is the area average of the gradient magnitude over
    its share of the window, with fractional pixel coverage; the parts of the
    window outside the image read the nearest border pixel.
    """
    mag = raster.gradients(img).mag
    return _resample_window(mag, window)


def _area_weights(lo: float, hi: float, n: int) -> np.ndarray:
    # (8, n) matrix: row i spreads cell i of [lo, hi] over pixels [p, p + 1)
    edges = lo + (hi - lo) * np.arange(NG_SIDE + 1) / NG_SIDE
    a, b = edges[:-1, None], edges[1:, None]
    p = np.arange(n)[None, :]
    wts = np.clip(np.minimum(b, p + 1) - np.maximum(a, p), 0, None)
    # coverage beyond the image edges goes to the border pixels
    wts[:, 0] += np.clip(np.minimum(b, 0) - a, 0, None)[:, 0]
    wts[:, -1] += np.clip(b - np.maximum(a, n), 0, None)[:, 0]
    return wts / (hi - lo) * NG_SIDE


def _resample_window(mag: np.ndarray, window) -> np.ndarray:
    b = window if isinstance(window, Box) else Box(*map(float, window))
    h, w = mag.shape
    if b.x2 <= 0 or b.y2 <= 0 or b.x1 >= w or b.y1 >= h or b.area <= 0:
        raise EmptyIntersection(f"window {b.as_tuple()} misses the {w}x{h} image")
    wx = _area_weights(b.x1, b.x2, w)
    wy = _area_weights(b.y1, b.y2, h)
    val = wy @ mag @ wx.T
    return np.clip(np.floor(val + 0.5), 0, 255).astype(np.uint8).reshape(64)


def binarize_model(w, n_w: int = DEFAULT_NW, n_g: int = DEFAULT_NG) -> BinarizedModel:
    """Greedy {-1, +1} basis fit of a 64-d filter.

    Step j takes ``a_j = sign(residual)`` (zeros map to +1) and
    ``beta_j = <residual, a_j> / 64``, then subtracts ``beta_j * a_j``.
    """
    if n_w < 1:
        raise ValueError("n_w must be >= 1")
    w = np.asarray(w, dtype=np.float64).reshape(64)
    residual = w.copy()
    a_plus, beta = [], []
    for _ in range(n_w):
        a = np.where(residual >= 0, 1.0, -1.0)
        b = float(residual @ a) / 64.0
        a_plus.append(pack_bits(a > 0))
        beta.append(b)
        residual = residual - b * a
    return BinarizedModel(w=w, a_plus=a_plus, beta=beta, n_g=n_g)


def score_exact(model: BinarizedModel, feat) -> float:
    return float(model.w @ np.asarray(feat, dtype=np.float64).reshape(64))


def score_fast(model: BinarizedModel, planes: Sequence[int]) -> float:
    """Approximate filter score from bit planes using AND + popcount only."""
    total = 0.0
    for a, b in zip(model.a_plus, model.beta):
        acc = 0
        for k, plane in enumerate(planes):
            acc += (2 * (a & plane).bit_count() - plane.bit_count()) << (7 - k)
        total += b * acc
    return total


def calibrate(model: BinarizedModel, size_index: int, s: float) -> float:
    v, t = model.calib[size_index]
    return float(v * s + t)


# ---------------------------------------------------------------------------
# scanning


@numba.njit(cache=True, nogil=True, inline="always")
def _popcount(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return np.int64((x * np.uint64(0x0101010101010101)) >> np.uint64(56))


@numba.njit(cache=True, nogil=True)
def _scan_scores(ng, a_plus, beta, n_g):
    h, w = ng.shape
    oh = h - 7
    ow = w - 7
    out = np.zeros((oh, ow), dtype=np.float64)
    if oh <= 0 or ow <= 0:
        return out
    # rowbits[x, y, k]: 8 bits of plane k at columns x..x+7, column x most significant
    rowbits = np.zeros((ow, h, n_g), dtype=np.uint64)
    for k in range(n_g):
        sh = np.uint8(7 - k)
        for y in range(h):
            acc = np.uint64(0)
            for x in range(w):
                bit = np.uint64((ng[y, x] >> sh) & np.uint8(1))
                acc = ((acc << np.uint64(1)) | bit) & np.uint64(0xFF)
                if x >= 7:
                    rowbits[x - 7, y, k] = acc
    nw = a_plus.shape[0]
    words = np.zeros(n_g, dtype=np.uint64)
    for x in range(ow):
        for k in range(n_g):
            words[k] = np.uint64(0)
        for y in range(h):
            for k in range(n_g):
                words[k] = (words[k] << np.uint64(8)) | rowbits[x, y, k]
            if y >= 7:
                s = 0.0
                for j in range(nw):
                    acc = np.int64(0)
                    for k in range(n_g):
                        b = words[k]
                        acc += (2 * _popcount(a_plus[j] & b) - _popcount(b)) << np.int64(7 - k)
                    s += beta[j] * acc
                out[y - 7, x] = s
    return out


@numba.njit(cache=True, nogil=True)
def _window_nms(order, ow, thr, keep_max):
    # all windows are 8x8 in the scan grid, so IoU depends only on the offset
    n = order.shape[0]
    kx = np.empty(keep_max, dtype=np.int64)
    ky = np.empty(keep_max, dtype=np.int64)
    kept = np.empty(keep_max, dtype=np.int64)
    nk = 0
    used = 0
    for ii in range(n):
        used = ii + 1
        idx = order[ii]
        y = idx // ow
        x = idx - y * ow
        ok = True
        for j in range(nk):
            dx = abs(x - kx[j])
            dy = abs(y - ky[j])
            ov = 0.0
            if dx < 8 and dy < 8:
                inter = (8 - dx) * (8 - dy)
                ov = inter / (128.0 - inter)
            if ov >= thr:
                ok = False
                break
        if ok:
            kx[nk] = x
            ky[nk] = y
            kept[nk] = idx
            nk += 1
            if nk >= keep_max:
                break
    return kept[:nk], used


def _top_windows(scores: np.ndarray, keep: int, thr: float) -> np.ndarray:
    flat = scores.ravel()
    n = flat.size
    ow = scores.shape[1]
    m = max(keep * 8, 256)
    # a threshold estimated on a strided subsample; the candidates are the
    # complete set of scores above it, so their stable order is an exact
    # prefix of the full ranking
    step = max(1, n // 8192)
    sub = np.sort(flat[::step])[::-1]
    while True:
        if m >= n:
            cand = np.arange(n)
        else:
            cut = sub[min(len(sub) - 1, m // step)]
            cand = np.flatnonzero(flat >= cut)
        order = cand[np.argsort(-flat[cand], kind="stable")]
        kept, used = _window_nms(order, ow, thr, keep)
        # the candidate prefix was exhausted before the quota filled: widen it
        if len(kept) >= keep or len(cand) >= n or used < len(order):
            return kept
        m *= 4


@dataclass
class SizeScan:
    size_index: int
    boxes: np.ndarray
    raw: np.ndarray


def _scan_dims(width: int, height: int, size: tuple[int, int]) -> tuple[int, int]:
    sw, sh = size
    return int(round(width * NG_SIDE / sw)), int(round(height * NG_SIDE / sh))


def ng_pyramid(gray: np.ndarray, sizes: Sequence[tuple[int, int]]) -> dict[tuple[int, int], np.ndarray]:
    """Byte normed-gradient maps of ``gray`` at every scan resolution the sizes need."""
    h, w = gray.shape
    dims = {_scan_dims(w, h, s) for s in sizes}
    dims = {d for d in dims if d[0] >= NG_SIDE and d[1] >= NG_SIDE}
    out = {}
    for nw, nh in sorted(dims):
        out[(nw, nh)] = raster.gradient_bytes(raster.resize(gray, nw, nh))
    return out


def scan_sizes(
    img: np.ndarray,
    model: BinarizedModel,
    per_size_keep: int = PER_SIZE_KEEP,
    nms_iou: float = PER_SIZE_NMS_IOU,
) -> list[SizeScan]:
    """Raw per-size candidates after per-size NMS, boxes in image coordinates."""
    gray = raster.to_gray(img)
    h, w = gray.shape
    pyramid = ng_pyramid(gray, model.sizes)
    a_plus = np.array(model.a_plus, dtype=np.uint64)
    beta = np.array(model.beta, dtype=np.float64)
    out = []
    for i, size in enumerate(model.sizes):
        nw, nh = _scan_dims(w, h, size)
        ng = pyramid.get((nw, nh))
        if ng is None:
            continue
        scores = _scan_scores(ng, a_plus, beta, model.n_g)
        kept = _top_windows(scores, per_size_keep, nms_iou)
        ow = scores.shape[1]
        ys, xs = np.divmod(kept, ow)
        fx = w / nw
        fy = h / nh
        boxes = np.column_stack([xs * fx, ys * fy, (xs + NG_SIDE) * fx, (ys + NG_SIDE) * fy])
        out.append(SizeScan(i, boxes, scores.ravel()[kept]))
    return out


def scan(
    img: np.ndarray,
    model: BinarizedModel,
    per_size_keep: int = PER_SIZE_KEEP,
    total_keep: int = 1000,
    nms_iou: float = PER_SIZE_NMS_IOU,
) -> ProposalSet:
    """Coarse BING proposals, sorted by calibrated score (descending)."""
    if not model.sizes:
        raise ValueError("model has no quantized sizes")
    parts = scan_sizes(img, model, per_size_keep, nms_iou)
    if not parts:
        return ProposalSet.empty()
    boxes = np.concatenate([p.boxes for p in parts])
    scores = np.concatenate([model.calib[p.size_index, 0] * p.raw + model.calib[p.size_index, 1] for p in parts])
    order = np.argsort(-scores, kind="stable")[: max(total_keep, 0)]
    return ProposalSet(boxes[order], scores[order], Source.BING)


# ---------------------------------------------------------------------------
# training


def train_linear_svm(X, y, lam: float = 1e-4, epochs: int = 10, seed: int = 0):
    """Pegasos hinge-loss SVM with an augmented constant feature.

    Returns ``(w, b)``. Features should be roughly unit scale.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Xa = np.hstack([X, np.ones((len(X), 1))])
    rng = np.random.default_rng(seed)
    wa = np.zeros(Xa.shape[1])
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(len(Xa)):
            t += 1
            lr = 1.0 / (lam * t)
            margin = y[i] * (wa @ Xa[i])
            wa *= 1.0 - lr * lam
            if margin < 1.0:
                wa += lr * y[i] * Xa[i]
    return wa[:-1], float(wa[-1])


@dataclass
class TrainReport:
    n_pos: int
    n_neg: int
    svm_bias: float
    train_accuracy: float


def _window_features(ng: np.ndarray, xs, ys) -> np.ndarray:
    return np.stack([ng[y : y + NG_SIDE, x : x + NG_SIDE].reshape(64) for x, y in zip(xs, ys)])


def _sample_windows(gray, gts, sizes, eta, rng, n_neg):
    h, w = gray.shape
    pyramid = ng_pyramid(gray, sizes)
    pos, neg = [], []
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    valid = [(i, s, _scan_dims(w, h, s)) for i, s in enumerate(sizes)]
    valid = [(i, s, d) for i, s, d in valid if d in pyramid]
    for _i, _s, (nw, nh) in valid:
        ng = pyramid[(nw, nh)]
        fx, fy = w / nw, h / nh
        for g in gts:
            cx = (g[0] + g[2]) / 2 / fx - NG_SIDE / 2
            cy = (g[1] + g[3]) / 2 / fy - NG_SIDE / 2
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    x = int(np.clip(round(cx) + dx, 0, nw - NG_SIDE))
                    y = int(np.clip(round(cy) + dy, 0, nh - NG_SIDE))
                    box = np.array([[x * fx, y * fy, (x + 8) * fx, (y + 8) * fy]])
                    if iou_matrix(box, g[None]).max() >= eta:
                        pos.append(ng[y : y + 8, x : x + 8].reshape(64))
    if not valid:
        return pos, neg
    tries = 0
    while len(neg) < n_neg and tries < n_neg * 20:
        tries += 1
        _i, _s, (nw, nh) = valid[rng.integers(len(valid))]
        x = int(rng.integers(nw - NG_SIDE + 1))
        y = int(rng.integers(nh - NG_SIDE + 1))
        fx, fy = w / nw, h / nh
        box = np.array([[x * fx, y * fy, (x + 8) * fx, (y + 8) * fy]])
        best = iou_matrix(box, gts).max() if len(gts) else 0.0
        if best < min(0.25, eta):
            neg.append(pyramid[(nw, nh)][y : y + 8, x : x + 8].reshape(64))
    return pos, neg


def fit_calibration(raw: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Least-squares ``labels ~ v * raw + t`` with the degenerate fallbacks."""
    raw = np.asarray(raw, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(raw) < 2 or np.ptp(raw) == 0 or not (labels < 0).any():
        return 1.0, 0.0
    if not (labels > 0).any():
        # a size that never hits an object ranks below everything else
        return 0.0, -1.0
    A = np.column_stack([raw, np.ones_like(raw)])
    (v, t), *_ = np.linalg.lstsq(A, labels, rcond=None)
    return float(v), float(t)


def train_simple(
    dataset,
    eta: float = 0.5,
    *,
    n_w: int = DEFAULT_NW,
    n_g: int = DEFAULT_NG,
    sizes: Sequence[tuple[int, int]] = DEFAULT_SIZES,
    neg_per_image: int = 100,
    per_size_keep: int = PER_SIZE_KEEP,
    lam: float = 1e-4,
    epochs: int = 10,
    seed: int = 0,
    report: list | None = None,
) -> BinarizedModel:
    """Train a single shared filter plus per-size calibration.

    ``dataset`` is an iterable of ``(image, gt_boxes)`` pairs. Stage one fits
    a linear SVM on NG features of windows aligned with the ground truth
    (positives, IoU >= eta) against random windows (IoU < 0.25). Stage two
    scans every training image with the binarized filter and fits per-size
    ``(v, t)`` by least squares of the raw score against +-1 labels.
    """
    rng = np.random.default_rng(seed)
    dataset = list(dataset)
    data = [(raster.to_gray(img), np.asarray(g, dtype=np.float64).reshape(-1, 4)) for img, g in dataset]
    if not any(len(g) for _, g in data):
        raise NoPositives("dataset has no annotated objects")
    pos, neg = [], []
    for gray, gts in data:
        p, n = _sample_windows(gray, gts, list(sizes), eta, rng, neg_per_image)
        pos += p
        neg += n
    if not pos:
        raise NoPositives(f"no window reaches IoU {eta} with any ground truth")
    X = np.array(pos + neg, dtype=np.float64) / 255.0
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    w_svm, b_svm = train_linear_svm(X, y, lam=lam, epochs=epochs, seed=seed)
    acc = float(np.mean(np.where(X @ w_svm + b_svm >= 0, 1.0, -1.0) == y))
    log.info("stage 1: %d positives, %d negatives, accuracy %.3f", len(pos), len(neg), acc)
    if report is not None:
        report.append(TrainReport(len(pos), len(neg), b_svm, acc))

    # keep the filter at byte-feature scale so raw scores stay readable
    model = binarize_model(w_svm / 255.0, n_w, n_g)
    model.sizes = [tuple(s) for s in sizes]
    model.calib = np.tile([1.0, 0.0], (len(model.sizes), 1))

    raws: list[list[np.ndarray]] = [[] for _ in model.sizes]
    labels: list[list[np.ndarray]] = [[] for _ in model.sizes]
    for (img, _), (_, gts) in zip(dataset, data):
        for part in scan_sizes(img, model, per_size_keep):
            best = iou_matrix(part.boxes, gts).max(axis=1) if len(gts) else np.zeros(len(part.raw))
            raws[part.size_index].append(part.raw)
            labels[part.size_index].append(np.where(best >= eta, 1.0, -1.0))
    for i in range(len(model.sizes)):
        if raws[i]:
            model.calib[i] = fit_calibration(np.concatenate(raws[i]), np.concatenate(labels[i]))
    return model


# ---------------------------------------------------------------------------
# serialization


def model_to_dict(model: BinarizedModel) -> dict:
    return {
        "w": [float(v) for v in model.w],
        "basis": [{"a_plus": f"{a:016x}", "beta": b} for a, b in zip(model.a_plus, model.beta)],
        "n_g": int(model.n_g),
        "sizes": [[int(w), int(h)] for w, h in model.sizes],
        "calib": [[float(v), float(t)] for v, t in model.calib],
    }


def model_from_dict(obj) -> BinarizedModel:
    if not isinstance(obj, dict):
        raise MalformedModelFile("model file must hold a JSON object")
    for key in ("w", "basis", "n_g", "sizes", "calib"):
        if key not in obj:
            raise MalformedModelFile(f"model file is missing {key!r}")
    try:
        w = [float(v) for v in obj["w"]]
        if len(w) != 64 or not all(math.isfinite(v) for v in w):
            raise MalformedModelFile("'w' must hold 64 finite reals")
        a_plus = []
        beta = []
        for entry in obj["basis"]:
            text = entry["a_plus"]
            if not isinstance(text, str) or len(text) != 16:
                raise MalformedModelFile(f"bad a_plus {text!r}")
            a_plus.append(int(text, 16))
            beta.append(float(entry["beta"]))
        return BinarizedModel(
            w=w,
            a_plus=a_plus,
            beta=beta,
            n_g=int(obj["n_g"]),
            sizes=[tuple(s) for s in obj["sizes"]],
            calib=obj["calib"],
        )
    except MalformedModelFile:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise MalformedModelFile(str(exc)) from None


def save_model(model: BinarizedModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path) -> BinarizedModel:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedModelFile(f"{path}: {exc}") from None
    return model_from_dict(obj)
