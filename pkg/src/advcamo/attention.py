"""Noise-suppressed multi-scale attention maps for detector attacks.

Per-layer maps are the ReLU of channel activations weighted by spatially
averaged score gradients. An ensemble of compound geometric transforms is
applied to the input, the resulting maps are aligned back with the inverse
transforms and averaged, then split into foreground and background by the
render mask. The whole computation stays on the tape, so losses built on
the maps differentiate back to the texture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import detector as det
from . import diffcore as dc
from .scene import RenderedScene, composite_tensor

MAX_TRANSLATE_FRACTION = 0.10
SCALE_RANGE = (0.8, 1.25)
NORM_FLOOR = 1e-8


class AttentionError(Exception):
    pass


@dataclass(frozen=True)
class TransformSpec:
    """An ordered chain of base transforms, each with a defined inverse.

    Bases are tuples: ("flip",), ("translate", dx, dy) in integer pixels,
    or ("scale", factor).
    """

    base: tuple
    index: int = 0

    def __post_init__(self):
        for b in self.base:
            kind = b[0]
            if kind == "flip":
                continue
            if kind == "translate":
                if len(b) != 3:
                    raise AttentionError("translate needs (dx, dy)")
            elif kind == "scale":
                if not (SCALE_RANGE[0] <= b[1] <= SCALE_RANGE[1]):
                    raise AttentionError(f"scale factor {b[1]} outside {SCALE_RANGE}")
            else:
                raise AttentionError(f"unknown base transform {kind!r}")

    def inverse_base(self):
        """Inverses of the bases, in reverse application order."""
        out = []
        for b in reversed(self.base):
            if b[0] == "flip":
                out.append(("flip",))
            elif b[0] == "translate":
                out.append(("translate", -b[1], -b[2]))
            else:
                out.append(("scale", 1.0 / b[1]))
        return tuple(out)


def random_specs(p: int, q: int, image_size: int, rng) -> list:
    """p compound transforms of q bases: flip, scale, translate cycling."""
    max_t = int(MAX_TRANSLATE_FRACTION * image_size)
    specs = []
    for i in range(p):
        base = []
        for slot in range(q):
            kind = slot % 3
            if kind == 0:
                if rng.random() < 0.5:
                    base.append(("flip",))
                else:
                    base.append(("translate", 0, 0))
            elif kind == 1:
                base.append(("scale", float(rng.uniform(*SCALE_RANGE))))
            else:
                dx = int(rng.integers(-max_t, max_t + 1))
                dy = int(rng.integers(-max_t, max_t + 1))
                base.append(("translate", dx, dy))
        specs.append(TransformSpec(tuple(base), index=i + 1))
    return specs


# ---------------------------------------------------------------------------
# image-space transforms (taped)


def _flat_gather(x, rows, cols, valid):
    """Gather (rows, cols) from the leading two axes of x, zero outside."""
    h, w = x.shape[0], x.shape[1]
    trail = x.shape[2:]
    k = int(np.prod(trail)) if trail else 1
    rr = np.clip(rows, 0, h - 1).astype(np.int64)
    cc = np.clip(cols, 0, w - 1).astype(np.int64)
    flat = (rr * w + cc).reshape(-1)
    if k > 1:
        flat = flat[:, None] * k + np.arange(k)[None, :]
        mask = np.repeat(valid.reshape(-1, 1).astype(np.float64), k, axis=1)
    else:
        mask = valid.reshape(-1).astype(np.float64)
    g = dc.take(x, flat)
    g = dc.mul(g, dc.Tensor(mask))
    return dc.reshape(g, (h, w) + trail)


def _apply_base(x, b):
    h, w = x.shape[0], x.shape[1]
    rows = np.repeat(np.arange(h, dtype=np.float64), w).reshape(h, w)
    cols = np.tile(np.arange(w, dtype=np.float64), h).reshape(h, w)
    kind = b[0]
    if kind == "flip":
        src_r, src_c = rows, (w - 1) - cols
        valid = np.ones((h, w), dtype=bool)
        return _flat_gather(x, src_r, src_c, valid)
    if kind == "translate":
        dx, dy = int(b[1]), int(b[2])
        if abs(dx) > MAX_TRANSLATE_FRACTION * w + 1e-9 or abs(dy) > MAX_TRANSLATE_FRACTION * h + 1e-9:
            raise AttentionError(f"translate ({dx}, {dy}) exceeds 10% of image size")
        src_r, src_c = rows - dy, cols - dx
        valid = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
        return _flat_gather(x, src_r, src_c, valid)
    if kind == "scale":
        s = float(b[1])
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        src_r = cy + (rows - cy) / s
        src_c = cx + (cols - cx) / s
        if s == 1.0:
            valid = np.ones((h, w), dtype=bool)
            return _flat_gather(x, src_r, src_c, valid)
        r0 = np.floor(src_r)
        c0 = np.floor(src_c)
        fr = src_r - r0
        fc = src_c - c0
        out = None
        trail = x.shape[2:]
        for dr, wr in ((0.0, 1.0 - fr), (1.0, fr)):
            for dcc, wc in ((0.0, 1.0 - fc), (1.0, fc)):
                rr = r0 + dr
                cc = c0 + dcc
                valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
                wgt = wr * wc
                g = _flat_gather(x, rr, cc, valid)
                term = dc.mul(g, dc.Tensor(wgt.reshape((h, w) + (1,) * len(trail))))
                out = term if out is None else dc.add(out, term)
        return out
    raise AttentionError(f"unknown base transform {kind!r}")


def apply_transform(image, spec: TransformSpec):
    """Apply the base transforms in listed order; stays on the tape."""
    x = image if isinstance(image, dc.Tensor) else dc.Tensor(np.asarray(image, dtype=np.float64))
    for b in spec.base:
        x = _apply_base(x, b)
    return x


def inverse_align(map_t, spec: TransformSpec):
    """Undo a compound transform on an input-resolution map."""
    x = map_t if isinstance(map_t, dc.Tensor) else dc.Tensor(np.asarray(map_t, dtype=np.float64))
    for b in spec.inverse_base():
        x = _apply_base(x, b)
    return x


def transform_box(box, spec: TransformSpec, size: int):
    """Track an axis-aligned (x1, y1, x2, y2) box through a compound transform."""
    x1, y1, x2, y2 = box
    for b in spec.base:
        if b[0] == "flip":
            x1, x2 = size - x2, size - x1
        elif b[0] == "translate":
            x1, x2 = x1 + b[1], x2 + b[1]
            y1, y2 = y1 + b[2], y2 + b[2]
        else:
            s = b[1]
            cx = cy = (size - 1) / 2.0 + 0.5
            x1, x2 = cx + (x1 - cx) * s, cx + (x2 - cx) * s
            y1, y2 = cy + (y1 - cy) * s, cy + (y2 - cy) * s
    return (x1, y1, x2, y2)


# ---------------------------------------------------------------------------
# attention maps


def weighted_activation_map(weights, activation):
    """ReLU of the channel-weighted activation sum: weights (C,), act (C, h, w)."""
    w = weights if isinstance(weights, dc.Tensor) else dc.Tensor(np.asarray(weights, dtype=np.float64))
    a = activation if isinstance(activation, dc.Tensor) else dc.Tensor(np.asarray(activation, dtype=np.float64))
    w3 = dc.reshape(w, (w.size, 1, 1))
    return dc.relu(dc.reduce_sum(dc.mul(w3, a), axis=0))


def gradcam_layer(model, image, layer: str, ground_truth=None) -> dc.Tensor:
    """Gradient-weighted map of one attention layer at native resolution."""
    with dc.ensure_tape() as tape:
        img = image if isinstance(image, dc.Tensor) else dc.Tensor(np.asarray(image, dtype=np.float64))
        if not img.requires_grad:
            img = dc.Tensor(img.data, requires_grad=True)
        dets, acts = det.forward(model, img)
        if layer not in acts:
            raise AttentionError(f"unknown attention layer {layer!r}; model has {sorted(acts)}")
        y = det.select_yc(model, dets, ground_truth)
        (g,) = tape.grad(y, [acts[layer]], create_graph=True)
        w = dc.reduce_mean(g, axis=(2, 3), keepdims=True)  # (1, C, 1, 1)
        s = dc.relu(dc.reduce_sum(dc.mul(w, acts[layer]), axis=1))  # (1, h, w)
        return dc.reshape(s, (s.shape[1], s.shape[2]))


@dataclass
class AttentionStack:
    """Per-layer averaged maps at input resolution plus the mask split."""

    layers: dict  # name -> normalized map Tensor (H, W)
    s_fg: dc.Tensor  # multi-scale foreground attention
    s_bg: dc.Tensor  # multi-scale background attention
    mask: np.ndarray
    layers_raw: dict = field(default_factory=dict)  # pre-normalization averages
    aligned_views: dict = field(default_factory=dict)  # per-layer list of aligned maps


def _minmax_normalize(m: dc.Tensor) -> dc.Tensor:
    lo = dc.neg(dc.reduce_max(dc.neg(m)))
    hi = dc.reduce_max(m)
    rng = dc.maximum(dc.sub(hi, lo), dc.Tensor(np.float64(NORM_FLOOR)))
    return dc.div(dc.sub(m, lo), rng)


def averaged_attention(
    model,
    scene: RenderedScene,
    specs,
    texture: dc.Tensor | None = None,
    ground_truth=None,
    keep_views: bool = False,
) -> AttentionStack:
    """Transform-averaged multi-scale attention for one scene.

    The identity view is always included, so p specs average p+1 terms.
    With a texture tensor the image is rebuilt on the tape and the stack
    stays differentiable w.r.t. the texture.
    """
    stacks = averaged_attention_batch(
        model, [scene], texture, [list(specs)], [ground_truth], keep_views=keep_views
    )
    return stacks[0]


def averaged_attention_batch(
    model,
    scenes,
    texture,
    specs_per_scene,
    ground_truths=None,
    keep_views: bool = False,
):
    """Attention stacks for several scenes in a single batched forward pass."""
    if ground_truths is None:
        ground_truths = [None] * len(scenes)
    size = scenes[0].pose.image_size
    views = []
    gt_rows = []
    scene_slices = []
    for scene, specs, gt in zip(scenes, specs_per_scene, ground_truths):
        if scene.pose.image_size != size:
            raise AttentionError("scenes in one batch must share the image size")
        base_gt = gt.box if gt is not None else scene.gt_box
        if texture is not None:
            image = composite_tensor(scene, texture)
        else:
            image = dc.Tensor(scene.image, requires_grad=True)
        start = len(views)
        views.append(image)
        gt_rows.append(base_gt if base_gt is not None else (0.0, 0.0, float(size), float(size)))
        for spec in specs:
            views.append(apply_transform(image, spec))
            tb = transform_box(gt_rows[start], spec, size)
            gt_rows.append(tb)
        scene_slices.append((start, len(views)))

    with dc.ensure_tape() as tape:
        batch = dc.concat([dc.reshape(v, (1, size, size, 3)) for v in views], axis=0)
        if not batch.requires_grad:
            batch = dc.Tensor(batch.data, requires_grad=True)
        dets, acts = det.forward(model, batch)
        gt_arr = np.asarray(gt_rows, dtype=np.float64)
        y = dc.reduce_sum(det.select_yc_batch(model, dets, gt_arr))
        layer_names = list(acts)
        grads = tape.grad(y, [acts[name] for name in layer_names], create_graph=True)

        raw_maps = {}
        for name, g in zip(layer_names, grads):
            a = acts[name]
            w = dc.reduce_mean(g, axis=(2, 3), keepdims=True)  # (B, C, 1, 1)
            s = dc.relu(dc.reduce_sum(dc.mul(w, a), axis=1))  # (B, h, w)
            raw_maps[name] = dc.bilinear_resize(s, (size, size))  # (B, H, W)

        stacks = []
        for scene, specs, (start, stop) in zip(scenes, specs_per_scene, scene_slices):
            mask = scene.mask.astype(np.float64)
            layers = {}
            layers_raw = {}
            aligned_store = {}
            total = None
            for name in layer_names:
                maps = raw_maps[name]
                aligned = [dc.reshape(dc.narrow(maps, 0, start, 1), (size, size))]
                for vi, spec in enumerate(specs, start=1):
                    view_map = dc.reshape(dc.narrow(maps, 0, start + vi, 1), (size, size))
                    aligned.append(inverse_align(view_map, spec))
                avg = aligned[0]
                for extra in aligned[1:]:
                    avg = dc.add(avg, extra)
                avg = dc.mul(avg, dc.Tensor(np.float64(1.0 / len(aligned))))
                layers_raw[name] = avg.data.copy()
                if keep_views:
                    aligned_store[name] = [t.data.copy() for t in aligned]
                norm = _minmax_normalize(avg)
                layers[name] = norm
                total = norm if total is None else dc.add(total, norm)
            s_fg = dc.mul(total, dc.Tensor(mask))
            s_bg = dc.mul(total, dc.Tensor(1.0 - mask))
            stacks.append(
                AttentionStack(
                    layers=layers,
                    s_fg=s_fg,
                    s_bg=s_bg,
                    mask=scene.mask.copy(),
                    layers_raw=layers_raw,
                    aligned_views=aligned_store,
                )
            )
    return stacks


# ---------------------------------------------------------------------------
# inspection


def export_heatmap_png(map_values: np.ndarray, path, overlay: np.ndarray | None = None):
    """False-color PNG of an attention map, optionally blended on a render."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.cm as cm

    m = np.asarray(map_values, dtype=np.float64)
    rng = m.max() - m.min()
    m = (m - m.min()) / (rng if rng > 1e-12 else 1.0)
    colored = cm.jet(m)[..., :3]
    if overlay is not None:
        colored = 0.55 * colored + 0.45 * np.asarray(overlay)
    from .scene import save_png

    save_png(colored, path)
