"""Toy single-class detectors with named attention layers.

Two conv architectures ship: arch-a-v1 (4 blocks, heads at strides 8/16)
and arch-b-v1 (5 blocks, an extra attention scale at stride 4). Heads
predict (bx, by, bw, bh, C_obj, P_cls) per grid cell; confidences are
logistic-squashed. NMS is never applied here; it lives in the evaluation
module only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .scene import RenderedScene, composite_image

WEIGHTS_MAGIC = b"ACAMODET"
WEIGHTS_VERSION = 1


class DetectorError(Exception):
    pass


@dataclass(frozen=True)
class ConvSpec:
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    pad: int


@dataclass(frozen=True)
class Arch:
    arch_id: str
    blocks: tuple
    head_sources: dict  # head stride -> block name
    attention_layers: dict  # layer name -> block name

    @property
    def largest_stride(self) -> int:
        return max(self.head_sources)


ARCHS = {
    "arch-a-v1": Arch(
        arch_id="arch-a-v1",
        blocks=(
            ConvSpec("b1", 3, 16, 3, 2, 1),
            ConvSpec("b2", 16, 32, 3, 2, 1),
            ConvSpec("b3", 32, 64, 3, 2, 1),
            ConvSpec("b4", 64, 64, 3, 2, 1),
        ),
        head_sources={8: "b3", 16: "b4"},
        attention_layers={"s8": "b3", "s16": "b4"},
    ),
    "arch-b-v1": Arch(
        arch_id="arch-b-v1",
        blocks=(
            ConvSpec("b1", 3, 8, 3, 2, 1),
            ConvSpec("b2", 8, 24, 3, 2, 1),
            ConvSpec("b3", 24, 48, 3, 2, 1),
            ConvSpec("b4", 48, 96, 3, 2, 1),
            ConvSpec("b5", 96, 96, 3, 1, 1),
        ),
        head_sources={8: "b3", 16: "b5"},
        attention_layers={"s4": "b2", "s8": "b3", "s16": "b5"},
    ),
}

LEAKY_SLOPE = 0.1
ANCHOR_PER_STRIDE = 4.0  # anchor side = 4 * head stride, one square anchor per cell


@dataclass
class DetectorModel:
    arch_id: str
    weights: dict  # name -> float64 ndarray
    score_mode: str = "one_stage"

    @property
    def arch(self) -> Arch:
        return ARCHS[self.arch_id]

    @property
    def attention_layer_names(self):
        return tuple(self.arch.attention_layers)


@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    objectness: float
    class_prob: float

    @property
    def score(self) -> float:
        return self.objectness * self.class_prob

    @property
    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class GroundTruth:
    """Axis-aligned vehicle box (x1, y1, x2, y2) in pixels."""

    box: tuple

    @classmethod
    def from_scene(cls, scene: RenderedScene) -> "GroundTruth":
        if scene.gt_box is None:
            raise DetectorError("scene has an empty mask; no ground truth")
        return cls(tuple(float(v) for v in scene.gt_box))

    @property
    def center_format(self):
        x1, y1, x2, y2 = self.box
        return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


class Detections:
    """Per-cell detections for a batch, kept as taped tensors.

    Indexing and len() address the first batch element, giving one
    Detection per grid cell per head with no thresholding.
    """

    def __init__(self, cx, cy, w, h, obj, cls, obj_logit, cls_logit, n_per_head, image_size):
        self.cx, self.cy, self.w, self.h = cx, cy, w, h
        self.obj, self.cls = obj, cls
        self.obj_logit, self.cls_logit = obj_logit, cls_logit
        self.n_per_head = tuple(n_per_head)
        self.image_size = image_size

    @property
    def batch(self) -> int:
        return self.cx.shape[0]

    def __len__(self) -> int:
        return self.cx.shape[1]

    def __getitem__(self, i: int) -> Detection:
        return self.detection(i, 0)

    def detection(self, i: int, b: int = 0) -> Detection:
        return Detection(
            float(self.cx.data[b, i]), float(self.cy.data[b, i]),
            float(self.w.data[b, i]), float(self.h.data[b, i]),
            float(self.obj.data[b, i]), float(self.cls.data[b, i]),
        )

    def to_list(self, b: int = 0):
        return [self.detection(i, b) for i in range(len(self))]


def init_weights(arch_id: str, seed: int) -> DetectorModel:
    """He-style seeded initialization; biases zero."""
    arch = ARCHS[arch_id]
    rng = np.random.default_rng(np.random.SeedSequence([77, seed]))
    weights = {}
    for blk in arch.blocks:
        fan_in = blk.in_ch * blk.kernel * blk.kernel
        weights[f"{blk.name}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(blk.out_ch, blk.in_ch, blk.kernel, blk.kernel))
        weights[f"{blk.name}.b"] = np.zeros(blk.out_ch)
    by_name = {b.name: b for b in arch.blocks}
    for stride, src in sorted(arch.head_sources.items()):
        in_ch = by_name[src].out_ch
        weights[f"head{stride}.w"] = rng.normal(0.0, np.sqrt(2.0 / in_ch), size=(6, in_ch, 1, 1))
        weights[f"head{stride}.b"] = np.zeros(6)
    return DetectorModel(arch_id, weights)


def _image_to_nchw(image) -> dc.Tensor:
    t = image if isinstance(image, dc.Tensor) else dc.Tensor(np.asarray(image, dtype=np.float64))
    if t.ndim == 3:
        t = dc.reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[3] != 3:
        raise DetectorError(f"expected image (H, W, 3) or (B, H, W, 3), got {t.shape}")
    return dc.transpose(t, (0, 3, 1, 2))


_GRID_CACHE: dict = {}


def _grid(h, w):
    key = (h, w)
    if key not in _GRID_CACHE:
        gx = np.tile(np.arange(w, dtype=np.float64), h)[None, :]
        gy = np.repeat(np.arange(h, dtype=np.float64), w)[None, :]
        _GRID_CACHE[key] = (gx, gy)
    return _GRID_CACHE[key]


def forward(model: DetectorModel, image) -> tuple:
    """Run the detector; returns (Detections, named attention activations).

    One detection per grid cell per head, no NMS and no thresholding.
    Activations are the attention-layer feature maps on the same tape.
    """
    arch = model.arch
    x = _image_to_nchw(image)
    b, _, h, w = x.shape
    if h % arch.largest_stride or w % arch.largest_stride:
        raise DetectorError(f"image size {h}x{w} not divisible by stride {arch.largest_stride}")
    weights = {k: dc.Tensor(v, requires_grad=False) for k, v in model.weights.items()}
    return _forward_tensors(model, x, weights)


def _forward_tensors(model: DetectorModel, x, weights) -> tuple:
    arch = model.arch
    b = x.shape[0]
    size = x.shape[2]
    feats = {}
    cur = x
    for blk in arch.blocks:
        cur = dc.leaky_relu(
            dc.conv2d(cur, weights[f"{blk.name}.w"], weights[f"{blk.name}.b"], stride=blk.stride, padding=blk.pad),
            LEAKY_SLOPE,
        )
        feats[blk.name] = cur
    activations = {name: feats[src] for name, src in arch.attention_layers.items()}

    parts = {k: [] for k in ("cx", "cy", "w", "h", "obj", "cls", "obj_logit", "cls_logit")}
    n_per_head = []
    for stride, src in sorted(arch.head_sources.items()):
        head = dc.conv2d(feats[src], weights[f"head{stride}.w"], weights[f"head{stride}.b"])
        hh, ww = head.shape[2], head.shape[3]
        n = hh * ww
        n_per_head.append(n)
        ch = [dc.reshape(dc.narrow(head, 1, i, 1), (b, n)) for i in range(6)]
        gx, gy = _grid(hh, ww)
        anchor = ANCHOR_PER_STRIDE * stride
        cx = dc.mul(dc.add(dc.sigmoid(ch[0]), dc.Tensor(gx)), dc.Tensor(np.float64(stride)))
        cy = dc.mul(dc.add(dc.sigmoid(ch[1]), dc.Tensor(gy)), dc.Tensor(np.float64(stride)))
        bw = dc.mul(dc.pow_const(dc.mul(dc.sigmoid(ch[2]), 2.0), 2), dc.Tensor(np.float64(anchor)))
        bh = dc.mul(dc.pow_const(dc.mul(dc.sigmoid(ch[3]), 2.0), 2), dc.Tensor(np.float64(anchor)))
        parts["cx"].append(cx)
        parts["cy"].append(cy)
        parts["w"].append(bw)
        parts["h"].append(bh)
        parts["obj"].append(dc.sigmoid(ch[4]))
        parts["cls"].append(dc.sigmoid(ch[5]))
        parts["obj_logit"].append(ch[4])
        parts["cls_logit"].append(ch[5])
    merged = {k: (v[0] if len(v) == 1 else dc.concat(v, axis=1)) for k, v in parts.items()}
    dets = Detections(
        merged["cx"], merged["cy"], merged["w"], merged["h"],
        merged["obj"], merged["cls"], merged["obj_logit"], merged["cls_logit"],
        n_per_head, size,
    )
    return dets, activations


# ---------------------------------------------------------------------------
# score selection and IoU


def iou(a, b) -> float:
    """IoU of two (x1, y1, x2, y2) boxes; 0 when the union is empty."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        inter = 0.0
    else:
        inter = iw * ih
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


def _diff_iou_to_gt(dets: Detections, gt_boxes: np.ndarray):
    """Differentiable IoU of every detection against its image's GT box."""
    half_w = dc.mul(dets.w, 0.5)
    half_h = dc.mul(dets.h, 0.5)
    x1 = dc.sub(dets.cx, half_w)
    x2 = dc.add(dets.cx, half_w)
    y1 = dc.sub(dets.cy, half_h)
    y2 = dc.add(dets.cy, half_h)
    gx1 = dc.Tensor(gt_boxes[:, 0:1])
    gy1 = dc.Tensor(gt_boxes[:, 1:2])
    gx2 = dc.Tensor(gt_boxes[:, 2:3])
    gy2 = dc.Tensor(gt_boxes[:, 3:4])
    iw = dc.relu(dc.sub(dc.minimum(x2, gx2), dc.maximum(x1, gx1)))
    ih = dc.relu(dc.sub(dc.minimum(y2, gy2), dc.maximum(y1, gy1)))
    inter = dc.mul(iw, ih)
    area_d = dc.mul(dets.w, dets.h)
    area_g = dc.Tensor((gt_boxes[:, 2] - gt_boxes[:, 0])[:, None] * (gt_boxes[:, 3] - gt_boxes[:, 1])[:, None])
    union = dc.sub(dc.add(area_d, area_g), inter)
    return dc.div(inter, union)


def select_yc_batch(model: DetectorModel, dets: Detections, gt_boxes=None) -> dc.Tensor:
    """Attack score per batch image, shape (B,); stays differentiable."""
    if len(dets) == 0:
        raise DetectorError("select_yc: no detections")
    if model.score_mode == "one_stage":
        score = dc.add(dets.obj, dets.cls)
    elif model.score_mode == "two_stage":
        if gt_boxes is None:
            raise DetectorError("two_stage score mode needs ground truth boxes")
        gt = np.atleast_2d(np.asarray(gt_boxes, dtype=np.float64))
        score = dc.add(dets.cls, _diff_iou_to_gt(dets, gt))
    else:
        raise DetectorError(f"unknown score mode {model.score_mode}")
    return dc.reduce_max(score, axis=1)


def select_yc(model: DetectorModel, dets: Detections, ground_truth: GroundTruth | None = None) -> dc.Tensor:
    """Scalar attack score for a single image's detections."""
    gt = None
    if ground_truth is not None:
        gt = np.asarray([ground_truth.box], dtype=np.float64)
    per_image = select_yc_batch(model, dets, gt)
    return dc.reduce_sum(per_image)


# ---------------------------------------------------------------------------
# training


def _bce_logits(logit, target):
    """Binary cross-entropy from logits: relu(x) - x*t + log(1 + exp(-|x|))."""
    one = dc.Tensor(np.float64(1.0))
    return dc.add(
        dc.sub(dc.relu(logit), dc.mul(logit, target)),
        dc.log(dc.add(one, dc.exp(dc.neg(dc.absolute(logit))))),
    )


def _head_pos_indices(arch, gts, n_per_head):
    """Per-head flat indices (batch-major) of positive cells."""
    heads = sorted(arch.head_sources.items())
    per_head = []
    offset = 0
    for (stride, _), n in zip(heads, n_per_head):
        side = int(round(np.sqrt(n)))
        idxs = []
        for bi, gt in enumerate(gts):
            cx, cy, _, _ = gt.center_format
            col = min(max(int(cx // stride), 0), side - 1)
            row = min(max(int(cy // stride), 0), side - 1)
            idxs.append(bi * sum(n_per_head) + offset + row * side + col)
        per_head.append(np.asarray(idxs, dtype=np.int64))
        offset += n
    return per_head


class _Adam:
    def __init__(self, params: dict, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1t = 1 - self.b1**self.t
        b2t = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)


def _training_batch_loss(model, weights, images, gts):
    """Objectness BCE + class BCE + box L2 at the positive cells."""
    x = _image_to_nchw(dc.Tensor(images))
    dets, _ = _forward_tensors(model, x, weights)
    b = dets.batch
    n = len(dets)
    size = dets.image_size

    obj_target = np.zeros((b, n))
    obj_weight = np.ones((b, n))
    pos = _head_pos_indices(model.arch, gts, dets.n_per_head)
    all_pos = np.concatenate(pos)
    rows = all_pos // n
    cols = all_pos % n
    obj_target[rows, cols] = 1.0
    obj_weight[rows, cols] = 50.0
    obj_loss = dc.reduce_mean(dc.mul(_bce_logits(dets.obj_logit, dc.Tensor(obj_target)), dc.Tensor(obj_weight)))

    cls_pos = dc.take(dets.cls_logit, all_pos)
    cls_loss = dc.reduce_mean(_bce_logits(cls_pos, dc.Tensor(np.ones(all_pos.shape))))

    gt_cszs = np.asarray([g.center_format for g in gts], dtype=np.float64)
    target = dc.Tensor(gt_cszs / size)
    box_loss = dc.Tensor(np.float64(0.0))
    n_heads = len(pos)
    for head_idx in range(n_heads):
        idx = pos[head_idx]
        pred = dc.concat(
            [
                dc.reshape(dc.take(dets.cx, idx), (b, 1)),
                dc.reshape(dc.take(dets.cy, idx), (b, 1)),
                dc.reshape(dc.take(dets.w, idx), (b, 1)),
                dc.reshape(dc.take(dets.h, idx), (b, 1)),
            ],
            axis=1,
        )
        diff = dc.sub(dc.mul(pred, 1.0 / size), target)
        box_loss = dc.add(box_loss, dc.reduce_mean(dc.mul(diff, diff)))
    box_loss = dc.mul(box_loss, np.float64(1.0 / n_heads))
    return dc.add(dc.add(obj_loss, cls_loss), dc.mul(box_loss, np.float64(5.0)))


def _epoch_textures(rng, n_faces):
    """Random per-face, uniform color, or neutral gray texture values."""
    r = rng.random()
    if r < 0.5:
        return rng.uniform(size=(n_faces, 3))
    if r < 0.75:
        return np.tile(rng.uniform(size=(1, 3)), (n_faces, 1))
    return np.full((n_faces, 3), 0.5)


def train_detector(
    arch_id: str,
    dataset,
    seed: int,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    min_ap: float = 0.85,
    holdout_every: int = 6,
    score_mode: str = "one_stage",
    verbose: bool = False,
) -> DetectorModel:
    """Train on re-textured renders until the held-out clean AP clears min_ap.

    dataset is a list of RenderedScene with non-empty masks. Deterministic
    for a fixed seed. Raises when the epoch budget is too small.
    """
    from . import evaluate as ev  # function-level: evaluate imports this module

    if not dataset:
        raise DetectorError("train_detector: empty dataset")
    scenes = list(dataset)
    holdout = [s for i, s in enumerate(scenes) if i % holdout_every == 0]
    train = [s for i, s in enumerate(scenes) if i % holdout_every != 0]
    if not train or not holdout:
        raise DetectorError("train_detector: dataset too small to split")

    model = init_weights(arch_id, seed)
    model.score_mode = score_mode
    params = model.weights
    opt = _Adam(params, lr=lr)
    n_faces_by_scene = [int(s.face_index.max()) + 1 for s in train]
    max_faces = max(n_faces_by_scene)

    best_ap = -1.0
    best_weights = None
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([31, seed, epoch]))
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            chosen = order[start : start + batch_size]
            images = []
            gts = []
            for si in chosen:
                s = train[si]
                tex = _epoch_textures(rng, max_faces)
                img = composite_image(s.face_index, s.mask, s.shading, s.background, tex)
                images.append(img)
                gts.append(GroundTruth.from_scene(s))
            images = np.stack(images)
            with dc.Tape() as tape:
                weights = {k: dc.Tensor(v, requires_grad=True) for k, v in params.items()}
                loss = _training_batch_loss(model, weights, images, gts)
                grads = tape.grad(loss, list(weights.values()))
            gmap = {k: g.data for k, g in zip(weights, grads)}
            opt.step(params, gmap)
        ap = ev.clean_ap(model, holdout)
        if verbose:
            print(f"epoch {epoch}: holdout clean AP {ap:.3f}")
        if ap > best_ap:
            best_ap = ap
            best_weights = {k: v.copy() for k, v in params.items()}
        if best_ap > min_ap + 0.05:
            break
    if best_ap <= min_ap:
        raise DetectorError(
            f"clean AP {best_ap:.3f} did not exceed {min_ap}; increase the epoch budget"
        )
    model.weights = best_weights
    return model


# ---------------------------------------------------------------------------
# serialization


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_weights(model: DetectorModel, path):
    """Binary weight bundle: magic, version, arch id, raw float64 arrays."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        fh.write(_pack_str(model.arch_id))
        fh.write(_pack_str(model.score_mode))
        fh.write(struct.pack("<I", len(model.weights)))
        for name in sorted(model.weights):
            arr = np.ascontiguousarray(model.weights[name], dtype=np.float64)
            fh.write(_pack_str(name))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def read(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise DetectorError("truncated weights file")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def read_str(self) -> str:
        (n,) = struct.unpack("<I", self.read(4))
        return self.read(n).decode("utf-8")


def load_weights(path, expect_arch: str | None = None) -> DetectorModel:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.read(8) != WEIGHTS_MAGIC:
        raise DetectorError("bad header")
    (version,) = struct.unpack("<I", r.read(4))
    if version != WEIGHTS_VERSION:
        raise DetectorError(f"unsupported weights version {version}")
    arch_id = r.read_str()
    if arch_id not in ARCHS:
        raise DetectorError(f"unknown architecture id {arch_id!r}")
    if expect_arch is not None and arch_id != expect_arch:
        raise DetectorError(f"architecture mismatch: file has {arch_id!r}, expected {expect_arch!r}")
    score_mode = r.read_str()
    (count,) = struct.unpack("<I", r.read(4))
    weights = {}
    for _ in range(count):
        name = r.read_str()
        (ndim,) = struct.unpack("<I", r.read(4))
        shape = struct.unpack(f"<{ndim}q", r.read(8 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.read(8 * size), dtype=np.float64).reshape(shape).copy()
        weights[name] = arr
    return DetectorModel(arch_id, weights, score_mode)


# ---------------------------------------------------------------------------
# sanity checks


def grid_coverage_min_iou(image_size: int, stride: int, gt_w: float, gt_h: float) -> float:
    """Worst-case best-anchor IoU for a GT box centered anywhere in frame.

    Anchors are one square box of side 4*stride per cell, centered on the
    cell. Evaluated by enumeration over integer center positions.
    """
    anchor = ANCHOR_PER_STRIDE * stride
    side = image_size // stride
    worst = 1.0
    for cy in range(image_size):
        for cx in range(image_size):
            col = min(max(int(cx // stride), 0), side - 1)
            row = min(max(int(cy // stride), 0), side - 1)
            best = 0.0
            for rr in (row - 1, row, row + 1):
                for cc in (col - 1, col, col + 1):
                    if not (0 <= rr < side and 0 <= cc < side):
                        continue
                    ax = (cc + 0.5) * stride
                    ay = (rr + 0.5) * stride
                    a = (ax - anchor / 2, ay - anchor / 2, ax + anchor / 2, ay + anchor / 2)
                    g = (cx - gt_w / 2, cy - gt_h / 2, cx + gt_w / 2, cy + gt_h / 2)
                    best = max(best, iou(a, g))
            worst = min(worst, best)
    return worst
