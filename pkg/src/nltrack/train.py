"""Toy-scale training of the projection heads.

Triplets ``(exemplar crop, search crop, NL text)`` are cut from synthetic
sequences; anchors are labelled by IoU with the target (positives above 0.7,
negatives below 0.3, subsampled to 16 / 48). The loss is softmax cross-entropy
over the sampled anchors plus smooth-L1 box regression over the positives, with
analytic gradients through every linear head and the depth-wise correlation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nltrack.backends import Model
from nltrack.geometry import AnchorGrid, BBox, encode_boxes, gen_anchors, iou_matrix
from nltrack.imaging import context_side, crop, crop_transform, load_frame
from nltrack.rpn import AnchorConfig
from nltrack.tensor import depthwise_xcorr

log = logging.getLogger(__name__)

POS_IOU = 0.7
NEG_IOU = 0.3
MAX_POS = 16
MAX_NEG = 48


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, model: Model | None):
        super().__init__(message)
        self.model = model


@dataclass
class TrainingTriplet:
    """``target`` is ``None`` when the search crop does not contain the target;
    ``distractors`` are other objects in the search crop (hard negatives)."""

    exemplar: np.ndarray
    search: np.ndarray
    text: str | None
    target: BBox | None
    distractors: tuple[BBox, ...] = ()


@dataclass
class AnchorAssignment:
    positives: np.ndarray
    negatives: np.ndarray
    targets: np.ndarray  # (len(positives), 4) regression deltas
    skip: bool = False


def assign_anchors(grid: AnchorGrid, target: BBox | None, seed: int = 0,
                   distractors: tuple[BBox, ...] = ()) -> AnchorAssignment:
    """Sample up to 16 positives (IoU > 0.7) and 48 negatives (IoU < 0.3).

    Up to half of the negatives come from anchors overlapping a distractor. With
    ``target=None`` every anchor qualifies as negative and nothing is skipped.
    """
    anchors = gen_anchors(grid)
    rng = np.random.default_rng(seed)
    if target is None:
        pos = np.zeros(0, dtype=np.int64)
        neg = np.arange(len(anchors))
    else:
        ious = iou_matrix(anchors, target.as_array()[None])[:, 0]
        pos = np.flatnonzero(ious > POS_IOU)
        neg = np.flatnonzero(ious < NEG_IOU)
    if len(pos) > MAX_POS:
        pos = np.sort(rng.choice(pos, MAX_POS, replace=False))
    hard = np.zeros(0, dtype=np.int64)
    if distractors and len(neg):
        d = iou_matrix(anchors[neg], np.stack([b.as_array() for b in distractors])).max(axis=1)
        hard, neg = neg[d > NEG_IOU], neg[d <= NEG_IOU]
        if len(hard) > MAX_NEG // 2:
            hard = rng.choice(hard, MAX_NEG // 2, replace=False)
    n_easy = MAX_NEG - len(hard)
    if len(neg) > n_easy:
        neg = rng.choice(neg, n_easy, replace=False)
    neg = np.sort(np.concatenate([hard, neg]).astype(np.int64))
    if target is None:
        return AnchorAssignment(pos, neg, np.zeros((0, 4)), skip=False)
    targets = encode_boxes(anchors[pos], target.as_array()[None]) if len(pos) else np.zeros((0, 4))
    return AnchorAssignment(pos, neg, targets, skip=len(pos) == 0)


def smooth_l1(d: np.ndarray, kink: float = 1.0):
    a = np.abs(d)
    val = np.where(a < kink, 0.5 * d * d / kink, a - 0.5 * kink)
    grad = np.where(a < kink, d / kink, np.sign(d))
    return val, grad


def loss(cls_logits: np.ndarray, reg_out: np.ndarray, asg: AnchorAssignment,
         reg_weight: float = 1.0, kink: float = 1.0):
    """Loss and its gradients w.r.t. the ``(2k, H, W)`` logits and ``(4k, H, W)`` regression map.

    Gradients into the heads follow by :func:`branch_backward`.
    """
    if not (np.all(np.isfinite(cls_logits)) and np.all(np.isfinite(reg_out))):
        raise ValueError("loss inputs contain NaN or inf")
    k2, h, w = cls_logits.shape
    k = k2 // 2
    g_cls = np.zeros_like(cls_logits)
    g_reg = np.zeros_like(reg_out)
    idx = np.concatenate([asg.positives, asg.negatives]).astype(np.int64)
    labels = np.concatenate([np.ones(len(asg.positives)), np.zeros(len(asg.negatives))])
    total = 0.0
    if len(idx):
        cell, a = np.divmod(idx, k)
        j, i = np.divmod(cell, w)
        bg = cls_logits[2 * a, j, i]
        fg = cls_logits[2 * a + 1, j, i]
        z = fg - bg
        # -log p(label): softplus(-z) for fg, softplus(z) for bg
        signed = np.where(labels == 1, -z, z)
        ce = np.logaddexp(0.0, signed)
        total += ce.mean()
        p_fg = 0.5 * (1.0 + np.tanh(0.5 * z))
        dz = (p_fg - labels) / len(idx)
        np.add.at(g_cls, (2 * a + 1, j, i), dz)
        np.add.at(g_cls, (2 * a, j, i), -dz)
    if len(asg.positives):
        cell, a = np.divmod(asg.positives.astype(np.int64), k)
        j, i = np.divmod(cell, w)
        chans = 4 * a[:, None] + np.arange(4)[None, :]
        pred = reg_out[chans, j[:, None], i[:, None]]
        val, grad = smooth_l1(pred - asg.targets, kink)
        n = len(asg.positives)
        total += reg_weight * val.sum() / n
        np.add.at(g_reg, (chans, j[:, None], i[:, None]), reg_weight * grad / n)
    return float(total), g_cls, g_reg


def _grad_like(model: Model) -> dict[str, list[np.ndarray]]:
    return {n: [np.zeros_like(h.weight), np.zeros_like(h.bias)] for n, h in model.heads.items()}


def branch_forward(model: Model, prefix: str, search_feat: np.ndarray, kernel_src: np.ndarray, part: str):
    """Forward one ``cls``/``reg`` part of a branch keeping intermediates for backward."""
    h = model.heads
    x_head, k_head, o_head = h[f"{prefix}_{part}_x"], h[f"{prefix}_{part}_{'z' if prefix == 'siam' else 'q'}"], h[f"{prefix}_{part}_out"]
    px = x_head.apply(search_feat)
    if prefix == "siam":
        kern = k_head.apply(kernel_src)
    else:
        s = model.nl_kernel_size
        kern = k_head.apply_vector(kernel_src).reshape(px.shape[0], s, s)
    area = kern.shape[1] * kern.shape[2]
    corr = depthwise_xcorr(px, kern) / area
    out = o_head.apply(corr)
    return out, (px, kern, corr, area)


def branch_backward(model: Model, prefix: str, part: str, search_feat: np.ndarray, kernel_src: np.ndarray,
                    cache, g_out: np.ndarray, grads: dict) -> None:
    px, kern, corr, area = cache
    h = model.heads
    o_head = h[f"{prefix}_{part}_out"]
    kname = f"{prefix}_{part}_{'z' if prefix == 'siam' else 'q'}"
    xname = f"{prefix}_{part}_x"
    grads[f"{prefix}_{part}_out"][0] += np.einsum("dhw,ohw->do", corr, g_out, optimize=True)
    grads[f"{prefix}_{part}_out"][1] += g_out.sum(axis=(1, 2))
    g_corr = np.einsum("do,ohw->dhw", o_head.weight, g_out, optimize=True) / area
    g_px, g_kern = _sparse_xcorr_backward(px, kern, g_corr)
    grads[xname][0] += np.einsum("chw,dhw->cd", search_feat, g_px, optimize=True)
    grads[xname][1] += g_px.sum(axis=(1, 2))
    if prefix == "siam":
        grads[kname][0] += np.einsum("chw,dhw->cd", kernel_src, g_kern, optimize=True)
        grads[kname][1] += g_kern.sum(axis=(1, 2))
    else:
        gq = g_kern.ravel()
        grads[kname][0] += np.outer(kernel_src, gq)
        grads[kname][1] += gq


def _sparse_xcorr_backward(px: np.ndarray, kern: np.ndarray, g_corr: np.ndarray):
    """Gradients of ``depthwise_xcorr(px, kern)`` given the output gradient.

    Only sampled anchors carry loss, so the output gradient touches few cells;
    scatter/gather over those cells instead of two dense correlations.
    """
    kh, kw = kern.shape[1:]
    g_px = np.zeros_like(px)
    g_kern = np.zeros_like(kern)
    ys, xs = np.nonzero(np.any(g_corr != 0, axis=0))
    for y, x in zip(ys.tolist(), xs.tolist()):
        g = g_corr[:, y, x, None, None]
        g_px[:, y:y + kh, x:x + kw] += g * kern
        g_kern += g * px[:, y:y + kh, x:x + kw]
    return g_px, g_kern


@dataclass
class PreparedTriplet:
    """Triplet with features, embedding and anchor labels precomputed."""

    search_feat: np.ndarray
    exemplar_feat: np.ndarray
    embedding: np.ndarray | None
    siam_asg: AnchorAssignment
    nl_asg: AnchorAssignment
    siam_grid: AnchorGrid
    nl_grid: AnchorGrid


def prepare(model: Model, triplets: list[TrainingTriplet], anchor_cfg: AnchorConfig = AnchorConfig(),
            seed: int = 0) -> list[PreparedTriplet]:
    out = []
    for n, tr in enumerate(triplets):
        xf = model.extract_features(tr.search)
        zf = model.extract_features(tr.exemplar)
        _, hs, ws = xf.shape
        _, hz, wz = zf.shape
        s = model.nl_kernel_size
        sg = anchor_cfg.grid_for(hs - hz + 1, ws - wz + 1, hz, wz)
        ng = anchor_cfg.grid_for(hs - s + 1, ws - s + 1, s, s)
        emb = model.embed_sentence(tr.text) if tr.text else None
        base = seed * 100003 + 2 * n
        out.append(PreparedTriplet(xf, zf, emb, assign_anchors(sg, tr.target, base, tr.distractors),
                                   assign_anchors(ng, tr.target, base + 1, tr.distractors), sg, ng))
    return out


def triplet_loss_and_grads(model: Model, p: PreparedTriplet, reg_weight: float = 1.0,
                           grads: dict | None = None):
    """Summed loss of both branches for one prepared triplet; accumulates into ``grads``."""
    total = 0.0
    branches = [("siam", p.exemplar_feat, p.siam_asg)]
    if p.embedding is not None:
        branches.append(("nl", p.embedding, p.nl_asg))
    for prefix, src, asg in branches:
        if asg.skip:
            continue
        cls_out, cls_cache = branch_forward(model, prefix, p.search_feat, src, "cls")
        reg_out, reg_cache = branch_forward(model, prefix, p.search_feat, src, "reg")
        val, g_cls, g_reg = loss(cls_out, reg_out, asg, reg_weight)
        total += val
        if grads is not None:
            branch_backward(model, prefix, "cls", p.search_feat, src, cls_cache, g_cls, grads)
            branch_backward(model, prefix, "reg", p.search_feat, src, reg_cache, g_reg, grads)
    return total


@dataclass
class FitConfig:
    epochs: int = 30
    lr: float = 1.0
    # learning rate halves once, after this fraction of the epochs
    decay_at: float = 0.5
    batch_size: int = 8
    reg_weight: float = 1.0
    # relative learning rate of the input projections
    projection_lr_scale: float = 1.0
    seed: int = 0
    max_grad_norm: float = 10.0


@dataclass
class FitResult:
    model: Model
    epoch_losses: list[float] = field(default_factory=list)


def fit(triplets: list[TrainingTriplet], cfg: FitConfig = FitConfig(), model: Model | None = None,
        anchor_cfg: AnchorConfig = AnchorConfig()) -> FitResult:
    """Mini-batch gradient descent over both branches; deterministic under ``cfg.seed``."""
    if not triplets:
        raise ValueError("training set is empty")
    model = (model or Model.initial(k=anchor_cfg.k, seed=cfg.seed)).copy()
    prepared = [p for p in prepare(model, triplets, anchor_cfg, cfg.seed)
                if not (p.siam_asg.skip and (p.embedding is None or p.nl_asg.skip))]
    if not prepared:
        raise ValueError("no triplet has a positive anchor")
    rng = np.random.default_rng(cfg.seed)
    result = FitResult(model)
    last_good = model.copy()
    decay_epoch = int(math.ceil(cfg.epochs * cfg.decay_at))
    for epoch in range(cfg.epochs):
        lr = cfg.lr if epoch < decay_epoch else cfg.lr / 2
        order = rng.permutation(len(prepared))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grads = _grad_like(model)
            try:
                batch_loss = sum(triplet_loss_and_grads(model, prepared[i], cfg.reg_weight, grads) for i in batch)
            except ValueError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good) from exc
            epoch_loss += batch_loss
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}", last_good)
            norm = math.sqrt(sum(float((g * g).sum()) for pair in grads.values() for g in pair)) / len(batch)
            clip = min(1.0, cfg.max_grad_norm / norm) if norm > 0 else 1.0
            for name, (gw, gb) in grads.items():
                step = lr * clip / len(batch)
                if not name.endswith("_out"):
                    step *= cfg.projection_lr_scale
                head = model.heads[name]
                head.weight -= step * gw
                head.bias -= step * gb
        epoch_loss /= len(prepared)
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(f"loss became non-finite in epoch {epoch}", last_good)
        last_good = model.copy()
        result.epoch_losses.append(epoch_loss)
        log.info("epoch %d lr %.4g loss %.5f", epoch, lr, epoch_loss)
    model.meta = {"epochs": cfg.epochs, "lr": cfg.lr, "seed": cfg.seed, "triplets": len(prepared),
                  "final_loss": result.epoch_losses[-1]}
    return result


def _jitter_center(rng, box: BBox, side: float, max_shift: float):
    return (box.cx + rng.uniform(-max_shift, max_shift) * side, box.cy + rng.uniform(-max_shift, max_shift) * side)


def _in_crop(tf, boxes, size: int) -> tuple[BBox, ...]:
    out = []
    for b in boxes:
        c = tf.box_to_crop(b)
        x1, y1, x2, y2 = c.corners()
        if x2 > 0 and y2 > 0 and x1 < size and y1 < size:
            out.append(c)
    return tuple(out)


def triplets_from_sequence(frames, boxes, occluded, text: str | None, n: int, seed: int,
                           exemplar_size: int = 128, search_size: int = 256, max_gap: int = 20,
                           max_shift: float = 0.22, scale_jitter: float = 0.1,
                           others=None) -> list[TrainingTriplet]:
    """Sample ``n`` triplets from one annotated sequence, skipping occluded frames.

    ``others[t]`` optionally lists boxes of non-target objects in frame ``t``.
    """
    rng = np.random.default_rng(seed)
    visible = [t for t in range(len(frames)) if not occluded[t]]
    out = []
    if not visible:
        return out
    for _ in range(n):
        ti = int(rng.choice(visible))
        near = [t for t in visible if abs(t - ti) <= max_gap]
        tj = int(rng.choice(near))
        bi, bj = boxes[ti], boxes[tj]
        z_tf = crop_transform(bi.center, context_side(bi.w, bi.h), exemplar_size)
        side = context_side(bj.w, bj.h) * search_size / exemplar_size
        side *= math.exp(rng.uniform(-scale_jitter, scale_jitter))
        x_tf = crop_transform(_jitter_center(rng, bj, side, max_shift), side, search_size)
        distractors = _in_crop(x_tf, others[tj], search_size) if others is not None else ()
        out.append(TrainingTriplet(crop(frames[ti], z_tf), crop(frames[tj], x_tf), text,
                                   x_tf.box_to_crop(bj), distractors))
    return out


def absent_triplets(frames, boxes, occluded, text: str | None, others, n: int, seed: int,
                    exemplar_size: int = 128, search_size: int = 256,
                    max_shift: float = 0.22) -> list[TrainingTriplet]:
    """Triplets whose search crop is centered on a non-target object and excludes the target."""
    rng = np.random.default_rng(seed)
    visible = [t for t in range(len(frames)) if not occluded[t]]
    out = []
    for _ in range(4 * n):
        if len(out) == n or not visible:
            break
        ti, tj = int(rng.choice(visible)), int(rng.choice(len(frames)))
        if not others[tj]:
            continue
        bi = boxes[ti]
        anchor_obj = others[tj][int(rng.integers(len(others[tj])))]
        z_tf = crop_transform(bi.center, context_side(bi.w, bi.h), exemplar_size)
        side = context_side(anchor_obj.w, anchor_obj.h) * search_size / exemplar_size
        x_tf = crop_transform(_jitter_center(rng, anchor_obj, side, max_shift), side, search_size)
        if _in_crop(x_tf, [boxes[tj]], search_size):
            continue
        out.append(TrainingTriplet(crop(frames[ti], z_tf), crop(frames[tj], x_tf), text, None,
                                   _in_crop(x_tf, others[tj], search_size)))
    return out


def synthetic_dataset(n_scenes: int = 50, per_scene: int = 6, seed: int = 0,
                      drop_text_every: int = 0, absent_per_scene: int = 5) -> list[TrainingTriplet]:
    """Triplets from random synthetic scenes; every ``drop_text_every``-th scene has no NL text.

    Scenes with distractors also contribute up to ``absent_per_scene`` target-absent triplets.
    """
    from nltrack.synth import object_boxes, occluder_boxes, random_training_scene, render

    out = []
    for s in range(n_scenes):
        spec = random_training_scene(seed * 10007 + s)
        seq = render(spec)
        text = None if drop_text_every and s % drop_text_every == drop_text_every - 1 else seq.description
        others = [[b for i, b in enumerate(object_boxes(spec, t)) if i != spec.target]
                  + occluder_boxes(spec, t, seq.boxes[t]) for t in range(spec.length)]
        out.extend(triplets_from_sequence(seq.frames, seq.boxes, seq.occluded, text, per_scene,
                                          seed * 7919 + s, others=others))
        if absent_per_scene:
            out.extend(absent_triplets(seq.frames, seq.boxes, seq.occluded, text, others,
                                       absent_per_scene, seed * 7919 + s + 500009))
    return out


def load_manifest(path) -> list[TrainingTriplet]:
    """Dataset manifest: JSON list of ``{exemplar, search, text, target: [x, y, w, h] or null, distractors}``;
    image paths are relative to the manifest."""
    root = Path(path).parent
    entries = json.loads(Path(path).read_text())
    out = []
    for n, e in enumerate(entries):
        try:
            target = BBox.from_xywh(*e["target"]) if e.get("target") else None
            distractors = tuple(BBox.from_xywh(*b) for b in e.get("distractors", []))
            out.append(TrainingTriplet(load_frame(root / e["exemplar"]), load_frame(root / e["search"]),
                                       e.get("text") or None, target, distractors))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"manifest entry {n}: {exc}") from exc
    return out


def write_manifest(triplets: list[TrainingTriplet], out_dir) -> Path:
    from nltrack.imaging import save_frame

    out = Path(out_dir)
    (out / "crops").mkdir(parents=True, exist_ok=True)
    entries = []
    for n, tr in enumerate(triplets):
        z, x = f"crops/{n:05d}_z.png", f"crops/{n:05d}_x.png"
        save_frame(out / z, tr.exemplar)
        save_frame(out / x, tr.search)
        entries.append({"exemplar": z, "search": x, "text": tr.text,
                        "target": list(tr.target.xywh()) if tr.target is not None else None,
                        "distractors": [list(b.xywh()) for b in tr.distractors]})
    path = out / "manifest.json"
    path.write_text(json.dumps(entries, indent=1) + "\n")
    return path


def write_loss_log(path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(v)])
