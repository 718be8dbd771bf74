"""Optimization harness: batching, attention warm-up, checkpoints, seeded runs."""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from .captions import LabelVector, MaskTriplet, tokenize_dataset
from .common import ContractViolation, batch_indices, image_tensor
from .corpus import Dataset
from .fusion import AttFcHead, TfmHead, TpHead
from .objectives import LossReport, mlm_loss_from_log_probs, tp_loss
from .serialization import load_tensors, save_tensors
from .textenc import LmConfig, ReferenceLm, Vocabulary
from .visenc import VisionBackbone

FLAVORS = ("tp_postag", "tp_cluster", "icmlm_tfm", "icmlm_attfc")
CHECKPOINT_FORMAT = "icmlm-checkpoint"
CHECKPOINT_VERSION = 1

# Immutable across resume: changing any of these makes the checkpoint weights
# meaningless for the continued run.
_RESUME_IMMUTABLE = (
    "model_flavor", "image_size", "backbone_widths", "d_z", "att_heads",
    "tfm_heads", "tfm_layers", "fc_hidden", "fc_layers", "visual_pos_embed",
    "attention_order", "tp_width", "seed", "batch_size",
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model_flavor: str = "icmlm_attfc"
    lam: float = 1.0  # weight of the tag-prediction term; serialized as "lambda"
    steps: int = 20000
    batch_size: int = 64
    learning_rate: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    warmup_steps: int = 1000  # heads only; backbone frozen
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000
    optimizer: str = "sgd"  # sgd | radam
    schedule: str = "cosine"  # cosine | step | constant
    schedule_horizon: int | None = None  # decay horizon; defaults to steps
    image_size: int = 64
    backbone_widths: tuple = (32, 64, 128, 128)
    d_z: int = 64
    att_heads: int = 12
    tfm_heads: int = 12
    tfm_layers: int = 1
    fc_hidden: int = 128
    fc_layers: int = 1
    dropout: float = 0.1
    visual_pos_embed: bool = True
    attention_order: str = "qk"
    tp_width: int | None = None

    def __post_init__(self):
        if self.model_flavor not in FLAVORS:
            raise ContractViolation(f"unknown model_flavor {self.model_flavor!r}")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ContractViolation("steps and warmup_steps must be nonnegative")
        if self.warmup_steps and self.warmup_steps >= self.steps:
            raise ContractViolation("warmup_steps must be smaller than steps")
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ContractViolation("rates must be positive")
        if self.lam < 0:
            raise ContractViolation("lambda must be nonnegative")
        if isinstance(self.backbone_widths, list):
            self.backbone_widths = tuple(self.backbone_widths)

    @property
    def horizon(self) -> int:
        return self.schedule_horizon or max(self.steps, 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


class IcmlmModel(torch.nn.Module):
    """Backbone plus the heads of one training flavor; the frozen LM rides along."""

    def __init__(self, config: TrainConfig, lm: ReferenceLm | None, k: int):
        super().__init__()
        self.config = config
        self.k = k
        self.backbone = VisionBackbone(config.backbone_widths, config.image_size)
        self.lm = lm
        self.tp_head = TpHead(self.backbone.d_x, k, config.tp_width)
        flavor = config.model_flavor
        if flavor == "icmlm_attfc":
            if lm is None:
                raise ContractViolation("icmlm flavors need the pretrained language model")
            self.fusion_head = AttFcHead(
                self.backbone.d_x, lm.d_w, lm.vocab, d_z=config.d_z,
                n_heads=config.att_heads, fc_hidden=config.fc_hidden, fc_layers=config.fc_layers,
            )
        elif flavor == "icmlm_tfm":
            if lm is None:
                raise ContractViolation("icmlm flavors need the pretrained language model")
            gh, gw = self.backbone.grid_hw
            self.fusion_head = TfmHead(
                self.backbone.d_x, lm.d_w, lm.vocab, grid_cells=gh * gw,
                n_heads=config.tfm_heads, n_layers=config.tfm_layers, dropout=config.dropout,
                visual_pos_embed=config.visual_pos_embed, attention_order=config.attention_order,
            )
        else:
            self.fusion_head = None

    def trainable_parameters(self):
        """(name, param) pairs the optimizer owns, sorted by name; excludes the LM."""
        pairs = [(n, p) for n, p in self.named_parameters() if not n.startswith("lm.")]
        return sorted(pairs, key=lambda kv: kv[0])

    def set_backbone_frozen(self, frozen: bool) -> None:
        for p in self.backbone.parameters():
            p.requires_grad_(not frozen)

    def tp_logits_from_grid(self, X_flat: torch.Tensor) -> torch.Tensor:
        """(B, H*W, d_x) flattened grid back to conv layout, through the tp head."""
        gh, gw = self.backbone.grid_hw
        grid = X_flat.reshape(-1, gh, gw, self.backbone.d_x).permute(0, 3, 1, 2)
        return self.tp_head(grid)


def build_model(config: TrainConfig, lm: ReferenceLm | None, k: int) -> IcmlmModel:
    """Seeded model construction; same (config, lm, k) gives identical weights."""
    torch.manual_seed(config.seed)
    return IcmlmModel(config, lm, k)


@dataclass
class _TrainData:
    images: torch.Tensor  # (n_img, 3, H, W)
    image_ids: list[str]
    labels: torch.Tensor | None  # (n_img, K); NaN row when the image has no labels
    has_label: torch.Tensor | None  # (n_img,) bool
    triplets: list[MaskTriplet] = field(default_factory=list)
    trip_image_idx: torch.Tensor | None = None
    trip_text: torch.Tensor | None = None  # (n_trip, T_max, d_w) frozen features
    trip_lengths: torch.Tensor | None = None
    trip_mask_index: torch.Tensor | None = None
    trip_targets: torch.Tensor | None = None
    labeled_image_rows: torch.Tensor | None = None  # image rows usable for tp batches

    @property
    def n_units(self) -> int:
        return len(self.triplets) if self.triplets else int(self.labeled_image_rows.shape[0])


def _prepare_data(ds: Dataset, triplets, labels, config: TrainConfig,
                  lm: ReferenceLm | None, k: int, sequences=None) -> _TrainData:
    image_ids = [im.image_id for im in ds.images]
    row_of = {iid: i for i, iid in enumerate(image_ids)}
    images = torch.stack([image_tensor(im.pixels) for im in ds.images])
    label_mat = has_label = labeled_rows = None
    if labels:
        label_mat = torch.zeros(len(image_ids), k)
        has_label = torch.zeros(len(image_ids), dtype=torch.bool)
        for lv in labels:
            label_mat[row_of[lv.image_id]] = torch.from_numpy(np.asarray(lv.y, dtype=np.float32))
            has_label[row_of[lv.image_id]] = True
        labeled_rows = torch.nonzero(has_label, as_tuple=False).flatten()
    data = _TrainData(images=images, image_ids=image_ids, labels=label_mat,
                      has_label=has_label, labeled_image_rows=labeled_rows)
    if config.model_flavor.startswith("icmlm"):
        if not triplets:
            raise ContractViolation("icmlm flavors need mask triplets")
        if sequences is None:
            sequences, _ = tokenize_dataset(ds)
        data.triplets = list(triplets)
        seqs = [sequences[t.caption_id] for t in data.triplets]
        mask_idx = [t.mask_index for t in data.triplets]
        chunks_w, chunks_len = [], []
        t_max = max(len(s) for s in seqs)
        with torch.no_grad():
            for lo in range(0, len(seqs), 512):
                W, lengths, _ = lm.encode_batch(seqs[lo : lo + 512], mask_idx[lo : lo + 512])
                if W.shape[1] < t_max:
                    W = torch.nn.functional.pad(W, (0, 0, 0, t_max - W.shape[1]))
                chunks_w.append(W)
                chunks_len.append(lengths)
        data.trip_text = torch.cat(chunks_w)
        data.trip_lengths = torch.cat(chunks_len)
        data.trip_image_idx = torch.tensor([row_of[t.image_id] for t in data.triplets])
        data.trip_mask_index = torch.tensor(mask_idx)
        data.trip_targets = torch.tensor([t.target_vocab_id for t in data.triplets])
    elif labeled_rows is None or not len(labeled_rows):
        raise ContractViolation("tag-prediction flavors need label vectors")
    return data


def _lr_at(config: TrainConfig, step: int) -> float:
    h = config.horizon
    if config.schedule == "constant":
        return config.learning_rate
    if config.schedule == "step":
        factor = 1.0
        if step >= 0.8 * h:
            factor *= 0.1
        if step >= 0.9 * h:
            factor *= 0.1
        return config.learning_rate * factor
    frac = min(step, h) / h
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


def _batch_loss(model: IcmlmModel, data: _TrainData, idx: np.ndarray, config: TrainConfig):
    lam = config.lam
    if not data.triplets:  # tag-prediction flavors
        rows = data.labeled_image_rows[torch.from_numpy(idx)]
        grid = model.backbone.forward(data.images[rows])["block4"]
        logits = model.tp_head(grid)
        l_tp = tp_loss(logits, data.labels[rows])
        return l_tp, float(l_tp.item()), 0.0, float(l_tp.item()), rows
    sel = torch.from_numpy(idx)
    img_rows = data.trip_image_idx[sel]
    X = model.backbone.final_grid(data.images[img_rows])
    W = data.trip_text[sel]
    lengths = data.trip_lengths[sel]
    if isinstance(model.fusion_head, TfmHead):
        log_probs, _ = model.fusion_head(X, W, data.trip_mask_index[sel], lengths)
    else:
        log_probs, _ = model.fusion_head(X, W, lengths)
    l_mlm = mlm_loss_from_log_probs(log_probs, data.trip_targets[sel])
    total = l_mlm
    l_tp_val = 0.0
    if lam > 0 and data.has_label is not None:
        labeled = data.has_label[img_rows]
        if bool(labeled.any()):
            # one tp term per distinct labeled image in the batch
            uniq_rows, first_pos = [], []
            seen = set()
            for pos, row in enumerate(img_rows.tolist()):
                if row not in seen and bool(data.has_label[row]):
                    seen.add(row)
                    uniq_rows.append(row)
                    first_pos.append(pos)
            tp_logits = model.tp_logits_from_grid(X[first_pos])
            l_tp = tp_loss(tp_logits, data.labels[uniq_rows])
            total = l_mlm + lam * l_tp
            l_tp_val = float(l_tp.item())
    l_mlm_val = float(l_mlm.item())
    return total, l_tp_val, l_mlm_val, l_mlm_val + lam * l_tp_val, img_rows


@dataclass
class Checkpoint:
    model: IcmlmModel
    optimizer: torch.optim.Optimizer
    step: int
    config: TrainConfig
    history: list[LossReport]
    k: int
    lm_config: LmConfig | None

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tensors = {f"model/{n}": t for n, t in self.model.state_dict().items()}
        named = self.model.trainable_parameters()
        for name, param in named:
            state = self.optimizer.state.get(param, {})
            for key, val in state.items():
                if isinstance(val, torch.Tensor):
                    tensors[f"optim/{name}/{key}"] = val
        save_tensors(tensors, out / "weights.bin")
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": self.step,
            "k": self.k,
            "config": self.config.to_dict(),
            "lm_config": asdict(self.lm_config) if self.lm_config else None,
            "vocab_size": len(self.model.lm.vocab) if self.model.lm else None,
            "torch_rng": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
        }
        with open(out / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
            for rec in self.history:
                fh.write(rec.to_json() + "\n")
        if self.model.lm is not None:
            self.model.lm.vocab.save(out / "vocab.txt")


def load_checkpoint(in_dir) -> Checkpoint:
    src = Path(in_dir)
    with open(src / "meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{src}: not a training checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{src}: checkpoint version {meta.get('version')} unsupported")
    config = TrainConfig.from_dict(meta["config"])
    lm = None
    lm_config = None
    if meta.get("lm_config"):
        lm_config = LmConfig(**meta["lm_config"])
        vocab = Vocabulary.load(src / "vocab.txt")
        lm = ReferenceLm(vocab, lm_config)
    model = build_model(config, lm, meta["k"])
    tensors = load_tensors(src / "weights.bin")
    model.load_state_dict({n[len("model/"):]: t for n, t in tensors.items() if n.startswith("model/")})
    if lm is not None:
        lm.freeze()
    optimizer = _make_optimizer(model, config)
    for name, param in model.trainable_parameters():
        state = {}
        for full, t in tensors.items():
            prefix = f"optim/{name}/"
            if full.startswith(prefix):
                state[full[len(prefix):]] = t
        if state:
            optimizer.state[param] = state
    history = []
    log_path = src / "log.jsonl"
    if log_path.exists():
        with open(log_path, "r", encoding="utf-8") as fh:
            history = [LossReport.from_json(line) for line in fh if line.strip()]
    model.eval()
    ckpt = Checkpoint(model=model, optimizer=optimizer, step=meta["step"],
                      config=config, history=history, k=meta["k"], lm_config=lm_config)
    rng = base64.b64decode(meta["torch_rng"])
    torch.set_rng_state(torch.frombuffer(bytearray(rng), dtype=torch.uint8).clone())
    return ckpt


def _make_optimizer(model: IcmlmModel, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for _, p in model.trainable_parameters()]
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate,
                               momentum=config.momentum, weight_decay=config.weight_decay)
    if config.optimizer == "radam":
        return torch.optim.RAdam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    raise ContractViolation(f"unknown optimizer {config.optimizer!r}")


def _run_steps(ckpt: Checkpoint, data: _TrainData, until_step: int, save_dir=None) -> None:
    model, config, opt = ckpt.model, ckpt.config, ckpt.optimizer
    model.train()
    if model.lm is not None:
        model.lm.eval()
    for step in range(ckpt.step, until_step):
        model.set_backbone_frozen(step < config.warmup_steps)
        lr = _lr_at(config, step)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = batch_indices(config.seed, data.n_units, config.batch_size, step)
        total, l_tp_val, l_mlm_val, l_total_val, img_rows = _batch_loss(model, data, idx, config)
        if not math.isfinite(float(total.item())):
            bad = sorted({data.image_ids[int(r)] for r in img_rows})
            raise TrainingDiverged(f"non-finite loss at step {step}; batch images: {bad}")
        opt.zero_grad()
        total.backward()
        opt.step()
        ckpt.step = step + 1
        if (step + 1) % config.log_every == 0 or step + 1 == until_step:
            ckpt.history.append(LossReport(
                step=step + 1, l_tp=l_tp_val, l_mlm=l_mlm_val, l_total=l_total_val,
                lam=config.lam, batch_size=config.batch_size,
            ))
        if save_dir is not None and (step + 1) % config.checkpoint_every == 0:
            ckpt.save(save_dir)
    model.eval()


def train(ds: Dataset, triplets: list[MaskTriplet] | None, labels: list[LabelVector] | None,
          config: TrainConfig, lm: ReferenceLm | None = None, sequences=None,
          save_dir=None) -> Checkpoint:
    """Run `config.steps` seeded optimizer updates and return the checkpoint."""
    if config.model_flavor.startswith("icmlm") and lm is None:
        raise ContractViolation("icmlm flavors need the pretrained language model")
    k = len(labels[0].y) if labels else 1
    model = build_model(config, lm, k)
    data = _prepare_data(ds, triplets, labels, config, lm, k, sequences)
    opt = _make_optimizer(model, config)
    ckpt = Checkpoint(model=model, optimizer=opt, step=0, config=config,
                      history=[], k=k, lm_config=lm.config if lm else None)
    _run_steps(ckpt, data, config.steps, save_dir=save_dir)
    return ckpt


def resume(ckpt: Checkpoint, extra_steps: int, ds: Dataset,
           triplets=None, labels=None, sequences=None,
           config_overrides: dict | None = None, save_dir=None) -> Checkpoint:
    """Continue a checkpoint for extra_steps more updates.

    In deterministic single-worker mode the continuation matches an
    uninterrupted run over the same schedule horizon.
    """
    if extra_steps < 0:
        raise ContractViolation("extra_steps must be nonnegative")
    config = ckpt.config
    if config_overrides:
        candidate = replace(config, **{("lam" if k == "lambda" else k): v
                                       for k, v in config_overrides.items()})
        for name in _RESUME_IMMUTABLE:
            if getattr(candidate, name) != getattr(config, name):
                raise ContractViolation(f"resume: config field {name!r} is immutable")
        config = candidate
        ckpt.config = config
    k = len(labels[0].y) if labels else ckpt.k
    if k != ckpt.k:
        raise ContractViolation(f"resume: label width {k} != checkpoint K {ckpt.k}")
    data = _prepare_data(ds, triplets, labels, config, ckpt.model.lm, ckpt.k, sequences)
    _run_steps(ckpt, data, ckpt.step + extra_steps, save_dir=save_dir)
    return ckpt
