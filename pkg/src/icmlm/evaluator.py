"""Target-task harness: MTP metrics, linear probes, zero-shot scoring,
attention localization against known synthetic geometry."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .captions import MaskTriplet, tokenize_dataset
from .common import ContractViolation, epoch_permutation, image_tensor
from .corpus import Dataset, SyntheticSceneSpec, region_phrase, shape_cells
from .fusion import AttentionMap, TfmHead
from .visenc import pool_features


@dataclass
class ProbeResult:
    layer_tag: str
    metric: str  # top1 | top5 | mAP
    value: float  # stored as a fraction in [0, 1]
    n_eval: int

    def to_json(self) -> str:
        return json.dumps({"layer_tag": self.layer_tag, "metric": self.metric,
                           "value": self.value, "n_eval": self.n_eval})


@dataclass
class AttributeMatrix:
    A: np.ndarray  # (n_classes, n_attr) class-level attribute vectors
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def __post_init__(self):
        if set(self.seen) & set(self.unseen):
            raise ValueError("seen and unseen class sets must be disjoint")


# ---------------------------------------------------------------------------
# masked token prediction

def topk_hits(probs: np.ndarray, targets: np.ndarray, k: int) -> np.ndarray:
    """Whether each target is among the k highest probabilities; ties go to
    the lower vocabulary id (stable sort on descending probability)."""
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return (order == targets[:, None]).any(axis=1)


def eval_mtp(probs_fn, triplets: list[MaskTriplet], batch_size: int = 256):
    """Top-1 / top-5 masked-token prediction over held-out triplets."""
    if not triplets:
        raise ValueError("empty triplet set")
    hits1, hits5, n = 0, 0, 0
    for lo in range(0, len(triplets), batch_size):
        batch = triplets[lo : lo + batch_size]
        probs = np.asarray(probs_fn(batch))
        targets = np.array([t.target_vocab_id for t in batch])
        hits1 += int(topk_hits(probs, targets, 1).sum())
        hits5 += int(topk_hits(probs, targets, 5).sum())
        n += len(batch)
    return hits1 / n, hits5 / n


def _lookup_sequence(sequences, triplet: MaskTriplet):
    seq = sequences.get(triplet.caption_id)
    if seq is None:
        raise ValueError(f"triplet references unknown caption {triplet.caption_id}; "
                         "do the triplets belong to this dataset?")
    return seq


class TextOnlyScorer:
    """Masked-token probabilities from the frozen reference LM alone."""

    def __init__(self, lm, ds: Dataset, sequences=None):
        self.lm = lm
        if sequences is None:
            sequences, _ = tokenize_dataset(ds)
        self.sequences = sequences

    def __call__(self, batch: list[MaskTriplet]) -> np.ndarray:
        seqs = [_lookup_sequence(self.sequences, t) for t in batch]
        masks = [t.mask_index for t in batch]
        with torch.no_grad():
            W, _, _ = self.lm.encode_batch(seqs, masks)
            feats = W[torch.arange(len(batch)), torch.tensor(masks)]
            probs = torch.softmax(self.lm.vocab.logits(feats), dim=-1)
        return probs.numpy()


class FusionScorer:
    """Masked-token probabilities from a trained image-conditioned model."""

    def __init__(self, model, ds: Dataset, sequences=None):
        self.model = model.eval()
        if sequences is None:
            sequences, _ = tokenize_dataset(ds)
        self.sequences = sequences
        self.pixels = {im.image_id: im.pixels for im in ds.images}

    def __call__(self, batch: list[MaskTriplet]) -> np.ndarray:
        seqs = [_lookup_sequence(self.sequences, t) for t in batch]
        masks = torch.tensor([t.mask_index for t in batch])
        for t in batch:
            if t.image_id not in self.pixels:
                raise ValueError(f"triplet references unknown image {t.image_id}; "
                                 "do the triplets belong to this dataset?")
        imgs = torch.stack([image_tensor(self.pixels[t.image_id]) for t in batch])
        with torch.no_grad():
            X = self.model.backbone.final_grid(imgs)
            W, lengths, _ = self.model.lm.encode_batch(seqs, masks.tolist())
            if isinstance(self.model.fusion_head, TfmHead):
                log_probs, _ = self.model.fusion_head(X, W, masks, lengths)
            else:
                log_probs, _ = self.model.fusion_head(X, W, lengths)
        return torch.exp(log_probs).numpy()


# ---------------------------------------------------------------------------
# linear probes on frozen features

def extract_features(backbone, ds: Dataset, layer_tag: str = "block4",
                     pool_mode: str = "global_average", l2_normalize: bool = True,
                     batch_size: int = 128):
    """Pooled frozen features for every image; returns (features, image_ids)."""
    feats, ids = [], []
    backbone.eval()
    for lo in range(0, len(ds.images), batch_size):
        chunk = ds.images[lo : lo + batch_size]
        x = torch.stack([image_tensor(im.pixels) for im in chunk])
        with torch.no_grad():
            grid = backbone.forward(x)[layer_tag]
            feats.append(pool_features(grid, pool_mode, l2_normalize))
        ids.extend(im.image_id for im in chunk)
    return torch.cat(feats).numpy(), ids


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Continuous (all-thresholds) AP: mean precision at each positive rank."""
    order = np.argsort(-scores, kind="stable")
    pos = positives[order].astype(bool)
    if not pos.any():
        raise ValueError("average precision needs at least one positive")
    cum = np.cumsum(pos)
    ranks = np.arange(1, len(pos) + 1)
    return float((cum[pos] / ranks[pos]).mean())


_PROBE_LR = 0.1
_PROBE_WD = 1e-5
_PROBE_EPOCHS = 100
_PROBE_MOMENTUM = 0.9


def _sgd_epochs(n: int, batch_size: int, epochs: int, seed: int, step_fn):
    """Seeded mini-batch order with a cosine learning-rate schedule."""
    total = epochs * math.ceil(n / batch_size)
    update = 0
    for epoch in range(epochs):
        perm = epoch_permutation(seed, epoch, n)
        for lo in range(0, n, batch_size):
            lr = _PROBE_LR * 0.5 * (1.0 + math.cos(math.pi * update / total))
            step_fn(perm[lo : lo + batch_size], lr)
            update += 1


def linear_probe(features: np.ndarray, labels: np.ndarray, task: str = "multiclass",
                 eval_features: np.ndarray | None = None, eval_labels: np.ndarray | None = None,
                 seed: int = 0, layer_tag: str = "block4", batch_size: int = 128) -> ProbeResult:
    """Gradient-trained logistic probe on frozen features.

    multiclass: labels are class ids, reports top-1. multilabel: labels are a
    binary (n, C) matrix, reports mAP over classes with train positives.
    """
    X = torch.from_numpy(np.asarray(features, dtype=np.float32))
    if eval_features is None:
        eval_features, eval_labels = features, labels
    Xe = torch.from_numpy(np.asarray(eval_features, dtype=np.float32))
    if task == "multiclass":
        y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
        n_classes = int(y.max()) + 1
        Wt = torch.zeros(n_classes, X.shape[1], requires_grad=True)
        b = torch.zeros(n_classes, requires_grad=True)
        opt = torch.optim.SGD([Wt, b], lr=_PROBE_LR, momentum=_PROBE_MOMENTUM, weight_decay=_PROBE_WD)

        def step(idx, lr):
            for g in opt.param_groups:
                g["lr"] = lr
            sel = torch.from_numpy(idx)
            loss = torch.nn.functional.cross_entropy(X[sel] @ Wt.t() + b, y[sel])
            opt.zero_grad()
            loss.backward()
            opt.step()

        _sgd_epochs(len(X), batch_size, _PROBE_EPOCHS, seed, step)
        with torch.no_grad():
            pred = (Xe @ Wt.t() + b).argmax(dim=1).numpy()
        value = float((pred == np.asarray(eval_labels)).mean())
        return ProbeResult(layer_tag=layer_tag, metric="top1", value=value, n_eval=len(Xe))
    if task == "multilabel":
        Y = torch.from_numpy(np.asarray(labels, dtype=np.float32))
        n_classes = Y.shape[1]
        keep = [c for c in range(n_classes) if Y[:, c].sum() > 0]
        if len(keep) < n_classes:
            warnings.warn(f"excluding {n_classes - len(keep)} classes with no train positives from mAP")
        Wt = torch.zeros(n_classes, X.shape[1], requires_grad=True)
        b = torch.zeros(n_classes, requires_grad=True)
        opt = torch.optim.SGD([Wt, b], lr=_PROBE_LR, momentum=_PROBE_MOMENTUM, weight_decay=_PROBE_WD)

        def step(idx, lr):
            for g in opt.param_groups:
                g["lr"] = lr
            sel = torch.from_numpy(idx)
            logits = X[sel] @ Wt.t() + b
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, Y[sel])
            opt.zero_grad()
            loss.backward()
            opt.step()

        _sgd_epochs(len(X), batch_size, _PROBE_EPOCHS, seed, step)
        with torch.no_grad():
            scores = (Xe @ Wt.t() + b).numpy()
        Ye = np.asarray(eval_labels)
        aps = [average_precision(scores[:, c], Ye[:, c]) for c in keep if Ye[:, c].any()]
        return ProbeResult(layer_tag=layer_tag, metric="mAP", value=float(np.mean(aps)), n_eval=len(Xe))
    raise ValueError(f"unknown probe task {task!r}")


def zero_shot_eval(features: np.ndarray, labels: np.ndarray, attrs: AttributeMatrix,
                   eval_features: np.ndarray, eval_labels: np.ndarray,
                   seed: int = 0, batch_size: int = 128) -> float:
    """Bilinear compatibility scorer between visual features and class attributes.

    Trains a(Sigma x + b) on seen-class samples with softmax cross-entropy
    over the seen classes, then reports top-1 accuracy predicting over all
    classes (seen + unseen).
    """
    X = torch.from_numpy(np.asarray(features, dtype=np.float32))
    y = np.asarray(labels, dtype=np.int64)
    if attrs.A.shape[0] < max(int(y.max()), int(np.max(eval_labels))) + 1:
        raise ContractViolation("attribute matrix does not cover all class ids")
    if not set(np.unique(y)) <= set(attrs.seen):
        raise ContractViolation("training samples must come from seen classes only")
    A = torch.from_numpy(np.asarray(attrs.A, dtype=np.float32))
    seen = torch.tensor(attrs.seen, dtype=torch.long)
    seen_pos = {c: i for i, c in enumerate(attrs.seen)}
    y_seen = torch.tensor([seen_pos[int(c)] for c in y])
    n_attr = A.shape[1]
    Sigma = torch.zeros(n_attr, X.shape[1], requires_grad=True)
    b = torch.zeros(n_attr, requires_grad=True)
    opt = torch.optim.SGD([Sigma, b], lr=_PROBE_LR, momentum=_PROBE_MOMENTUM, weight_decay=_PROBE_WD)

    def step(idx, lr):
        for g in opt.param_groups:
            g["lr"] = lr
        sel = torch.from_numpy(idx)
        compat = (X[sel] @ Sigma.t() + b) @ A[seen].t()
        loss = torch.nn.functional.cross_entropy(compat, y_seen[sel])
        opt.zero_grad()
        loss.backward()
        opt.step()

    _sgd_epochs(len(X), batch_size, _PROBE_EPOCHS, seed, step)
    Xe = torch.from_numpy(np.asarray(eval_features, dtype=np.float32))
    with torch.no_grad():
        pred = ((Xe @ Sigma.t() + b) @ A.t()).argmax(dim=1).numpy()
    return float((pred == np.asarray(eval_labels)).mean())


# ---------------------------------------------------------------------------
# synthetic attribute tasks

def single_shape_attribute_labels(ds: Dataset, task: str):
    """(image_ids, label ids) for images whose scene holds exactly one shape."""
    from .corpus import COLORS, SHAPES
    values = {"shape": SHAPES, "color": COLORS}.get(task)
    if values is None:
        raise ValueError(f"unknown attribute task {task!r}")
    ids, labels = [], []
    for im in ds.images:
        spec = ds.scenes.get(im.image_id)
        if spec is None or len(spec.shapes) != 1:
            continue
        ids.append(im.image_id)
        labels.append(values.index(getattr(spec.shapes[0], task)))
    if not ids:
        raise ValueError("dataset has no single-shape scenes with scene specs")
    return ids, np.asarray(labels, dtype=np.int64)


def single_shape_features(backbone, ds: Dataset, task: str, layer_tag: str = "block4",
                          pool_mode: str = "global_average", l2_normalize: bool = True):
    """Pooled features and attribute labels restricted to single-shape scenes."""
    ids, labels = single_shape_attribute_labels(ds, task)
    feats, all_ids = extract_features(backbone, ds, layer_tag, pool_mode, l2_normalize)
    row_of = {iid: i for i, iid in enumerate(all_ids)}
    sel = np.array([row_of[i] for i in ids])
    return feats[sel], labels


def shape_color_attribute_matrix(n_unseen: int, seed: int, present_classes) -> AttributeMatrix:
    """Class-per-(shape, color) attribute matrix: one-hot shape plus one-hot color.

    Unseen classes are drawn from the classes actually present.
    """
    from .corpus import COLORS, SHAPES
    n_classes = len(SHAPES) * len(COLORS)
    A = np.zeros((n_classes, len(SHAPES) + len(COLORS)))
    for s in range(len(SHAPES)):
        for c in range(len(COLORS)):
            cls = s * len(COLORS) + c
            A[cls, s] = 1.0
            A[cls, len(SHAPES) + c] = 1.0
    present = sorted(set(int(c) for c in present_classes))
    rng = np.random.default_rng(seed)
    unseen = tuple(sorted(rng.choice(present, size=n_unseen, replace=False).tolist())) if n_unseen else ()
    seen = tuple(c for c in range(n_classes) if c not in unseen)
    return AttributeMatrix(A=A, seen=seen, unseen=unseen)


def shape_color_class_ids(ds: Dataset):
    """(image_ids, class ids) where class = shape index * n_colors + color index."""
    from .corpus import COLORS
    ids, shapes = single_shape_attribute_labels(ds, "shape")
    _, colors = single_shape_attribute_labels(ds, "color")
    return ids, shapes * len(COLORS) + colors


def zero_shot_shapes(backbone, train_ds: Dataset, eval_ds: Dataset, n_unseen: int = 2,
                     seed: int = 0, layer_tag: str = "block4",
                     pool_mode: str = "global_average"):
    """End-to-end zero-shot run on the synthetic (shape, color) classes.

    Returns (top1 over all classes, n_eval, unseen class ids).
    """
    tr_ids, tr_cls = shape_color_class_ids(train_ds)
    ev_ids, ev_cls = shape_color_class_ids(eval_ds)
    attrs = shape_color_attribute_matrix(n_unseen, seed, np.concatenate([tr_cls, ev_cls]))
    tr_feats, _ = single_shape_features(backbone, train_ds, "shape", layer_tag, pool_mode)
    ev_feats, _ = single_shape_features(backbone, eval_ds, "shape", layer_tag, pool_mode)
    keep = np.isin(tr_cls, attrs.seen)
    top1 = zero_shot_eval(tr_feats[keep], tr_cls[keep], attrs, ev_feats, ev_cls, seed=seed)
    return top1, len(ev_feats), list(attrs.unseen)


# ---------------------------------------------------------------------------
# attention localization on synthetic geometry

def caption_shape_index(spec: SyntheticSceneSpec, caption_text: str) -> int | None:
    """Which shape a per-shape caption describes; None for scene-level captions."""
    toks = caption_text.lower().split()
    if len(toks) >= 2 and toks[1] == "picture":
        return None
    if len(toks) < 6 or toks[0] != "a" or toks[4] != "in":
        raise ValueError(f"caption does not follow the shape template: {caption_text!r}")
    size, color, shape = toks[1], toks[2], toks[3]
    region = " ".join(toks[6:])
    for i, s in enumerate(spec.shapes):
        if (s.size, s.color, s.shape, region_phrase(s.cell)) == (size, color, shape, region):
            return i
    raise ValueError(f"caption {caption_text!r} matches no shape in the scene spec")


def in_box_mass(amap: AttentionMap, spec: SyntheticSceneSpec, shape_index: int,
                image_size: int) -> float:
    """Attention mass inside the grid cells overlapped by one shape's box."""
    cells = shape_cells(spec, shape_index, image_size, tuple(amap.p.shape))
    p = amap.p
    return float(sum(p[r, c] for r, c in cells))


def attention_localization_score(maps: list[AttentionMap], ds: Dataset, image_size: int) -> float:
    """Mean in-box attention mass over (map, scene) pairs."""
    if not maps:
        raise ValueError("no attention maps given")
    captions = {c.caption_id: c for c in ds.captions}
    masses = []
    for amap in maps:
        spec = ds.scenes.get(amap.image_id)
        if spec is None:
            raise ValueError(f"no scene spec for image {amap.image_id}")
        cap = captions.get(amap.caption_id)
        if cap is None or cap.image_id != amap.image_id:
            raise ValueError(f"caption {amap.caption_id} does not belong to image {amap.image_id}")
        idx = caption_shape_index(spec, cap.text)
        if idx is None:
            raise ValueError(f"caption {amap.caption_id} is scene-level; no shape box to score")
        masses.append(in_box_mass(amap, spec, idx, image_size))
    return float(np.mean(masses))
