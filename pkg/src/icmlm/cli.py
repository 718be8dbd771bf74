"""Batch command-line surface binding the pipeline end to end."""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch

from . import captions as cap
from . import corpus, evaluator, textenc, trainer, viz
from .clustering import build_cluster_concepts
from .common import ContractViolation
from .corpus import COLORS, SHAPES, CorpusError
from .fusion import extract_attention


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_describe() -> str | None:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or None
    except Exception:
        return None


_INPUT_ARGS = ("data", "train_data", "eval_data", "triplets", "labels",
               "concepts", "lm", "ckpt", "config", "manifest")


def _input_checksums(args) -> dict:
    sums = {}
    for name in _INPUT_ARGS:
        value = getattr(args, name, None)
        if not value:
            continue
        p = Path(value)
        if p.is_file():
            sums[str(p)] = _sha256(p)
        elif p.is_dir():
            for inner in ("meta.json", "weights.bin"):
                f = p / inner
                if f.exists():
                    sums[str(f)] = _sha256(f)
    return sums


def _write_run_record(args, argv, error: str | None, artifacts: list) -> None:
    out = getattr(args, "out", None)
    if not out:
        return
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        record = {
            "command": ["icmlm"] + list(argv),
            "subcommand": getattr(args, "subcommand", None),
            "seed": getattr(args, "seed", None),
            "git_describe": _git_describe(),
            "input_checksums": _input_checksums(args),
            "artifacts": [str(a) for a in artifacts],
            "status": "error" if error else "ok",
            "error": error,
        }
        with open(out / "run.json", "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
    except OSError:
        pass  # provenance must never mask the primary error


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_dataset(path) -> corpus.Dataset:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"dataset directory not found: {p}")
    return corpus.load_dataset(p)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth_gen(args):
    ds = corpus.generate_synthetic(args.n, args.seed, image_size=args.image_size, split=args.split)
    corpus.save_dataset(ds, args.out)
    print(f"wrote {len(ds.images)} images, {len(ds.captions)} captions to {args.out}")
    return [args.out]


def cmd_build_concepts(args):
    ds = _load_dataset(args.data)
    seqs, _ = cap.tokenize_dataset(ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    concepts_path = out / "concepts.tsv"
    labels_path = out / "labels.jsonl"
    if args.origin == "postag":
        cs = cap.build_postag_concepts(seqs, set(args.pos.split(",")), args.k)
        if cs.exhausted:
            print(f"warning: only {len(cs.concepts)} tokens match the POS filter (requested {args.k})",
                  file=sys.stderr)
        labels = cap.build_label_vectors(ds, seqs, cs)
        cap.save_concepts(cs, concepts_path)
    else:
        lm = textenc.load_lm(_ckpt_dir(args.lm, "language model"))
        cids = sorted(seqs)
        embeddings = []
        with torch.no_grad():
            for lo in range(0, len(cids), 256):
                chunk = [seqs[c] for c in cids[lo : lo + 256]]
                _, _, cls = lm.encode_batch(chunk)
                embeddings.append(cls.numpy())
        result = build_cluster_concepts(np.concatenate(embeddings), args.k, args.seed)
        assignments = {cid: int(c) for cid, c in zip(cids, result.labels)}
        labels = cap.build_cluster_label_vectors(ds, assignments, args.k)
        sizes = np.bincount(result.labels, minlength=args.k)
        cs = cap.ConceptSet(
            concepts=tuple(f"cluster_{i:04d}" for i in range(args.k)),
            pos_filter=frozenset(), origin="cluster",
            counts={f"cluster_{i:04d}": int(sizes[i]) for i in range(args.k)},
        )
        cap.save_concepts(cs, concepts_path)
        with open(out / "assignments.jsonl", "w", encoding="utf-8") as fh:
            for cid in cids:
                fh.write(json.dumps({"caption_id": cid, "cluster": assignments[cid]}) + "\n")
    cap.save_label_vectors(labels, labels_path)
    print(f"wrote {len(cs.concepts)} concepts and {len(labels)} label vectors to {out}")
    return [concepts_path, labels_path]


def cmd_build_triplets(args):
    ds = _load_dataset(args.data)
    seqs, _ = cap.tokenize_dataset(ds)
    cs = cap.load_concepts(_require_file(args.concepts, "concepts file"))
    lm = textenc.load_lm(_ckpt_dir(args.lm, "language model"))
    triplets, skipped = cap.build_triplets(ds, seqs, cs, lm.vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trip_path = out / "triplets.jsonl"
    cap.save_triplets(triplets, trip_path)
    if skipped:
        print(f"skipped {sum(skipped.values())} occurrences of {len(skipped)} out-of-vocabulary concepts",
              file=sys.stderr)
    print(f"wrote {len(triplets)} triplets to {trip_path}")
    return [trip_path]


def cmd_pretrain_lm(args):
    ds = _load_dataset(args.data)
    seqs, _ = cap.tokenize_dataset(ds)
    config = textenc.LmConfig(
        d_w=args.d_w, n_layers=args.layers, n_heads=args.heads, steps=args.steps,
        batch_size=args.batch_size, learning_rate=args.learning_rate, seed=args.seed,
    )
    lm = textenc.pretrain_reference_lm(seqs, config)
    textenc.save_lm(lm, args.out)
    print(f"pretrained language model ({len(lm.vocab)} tokens) saved to {args.out}")
    return [args.out]


_TRAIN_FLAG_KEYS = (
    "model_flavor", "lam", "steps", "batch_size", "learning_rate", "weight_decay",
    "momentum", "warmup_steps", "seed", "log_every", "checkpoint_every", "optimizer",
    "schedule", "schedule_horizon", "image_size", "d_z", "att_heads", "tfm_heads",
    "tfm_layers", "fc_hidden", "fc_layers", "dropout", "visual_pos_embed", "attention_order",
)


def _train_config(args) -> trainer.TrainConfig:
    merged = trainer.TrainConfig().to_dict()
    if args.config:
        with open(_require_file(args.config, "config file"), "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(merged)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in _TRAIN_FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged["lambda" if key == "lam" else key] = value
    if args.widths is not None:
        merged["backbone_widths"] = [int(w) for w in args.widths.split(",")]
    return trainer.TrainConfig.from_dict(merged)


def cmd_train(args):
    config = _train_config(args)
    ds = _load_dataset(args.data)
    labels = None
    if args.labels:
        labels = cap.load_label_vectors(_require_file(args.labels, "labels file"))
    triplets = None
    lm = None
    if config.model_flavor.startswith("icmlm"):
        triplets = cap.load_triplets(_require_file(args.triplets, "triplets file"))
        lm = textenc.load_lm(_ckpt_dir(args.lm, "language model"))
    elif labels is None:
        raise UsageError("tag-prediction flavors need --labels")
    ckpt = trainer.train(ds, triplets, labels, config, lm=lm, save_dir=args.out)
    ckpt.save(args.out)
    last = ckpt.history[-1] if ckpt.history else None
    tail = f"; final l_total {last.l_total:.4f}" if last else ""
    print(f"trained {config.model_flavor} for {config.steps} steps{tail}; checkpoint at {args.out}")
    return [args.out]


def _ckpt_dir(path, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} directory required")
    p = Path(path)
    if not p.is_dir() or not (p / "meta.json").exists():
        raise UsageError(f"{what} directory not found: {p}")
    return p


def cmd_eval_mtp(args):
    ds = _load_dataset(args.data)
    triplets = cap.load_triplets(_require_file(args.triplets, "triplets file"))
    if args.text_only:
        lm = textenc.load_lm(_ckpt_dir(args.lm, "language model"))
        scorer = evaluator.TextOnlyScorer(lm, ds)
        tag = "text_only"
    else:
        ckpt = trainer.load_checkpoint(_ckpt_dir(args.ckpt, "checkpoint"))
        scorer = evaluator.FusionScorer(ckpt.model, ds)
        tag = ckpt.config.model_flavor
    top1, top5 = evaluator.eval_mtp(scorer, triplets)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "results.jsonl"
    with open(results, "w", encoding="utf-8") as fh:
        for metric, value in (("top1", top1), ("top5", top5)):
            fh.write(evaluator.ProbeResult(tag, metric, value, len(triplets)).to_json() + "\n")
    print(f"{tag:12s} top1 {top1:.4f}  top5 {top5:.4f}  (n={len(triplets)})")
    return [results]


def cmd_probe(args):
    ckpt = trainer.load_checkpoint(_ckpt_dir(args.ckpt, "checkpoint"))
    train_ds = _load_dataset(args.train_data)
    eval_ds = _load_dataset(args.eval_data)
    rows = []
    for task in args.tasks.split(","):
        tr_feats, tr_labels = evaluator.single_shape_features(
            ckpt.model.backbone, train_ds, task, layer_tag=args.layer, pool_mode=args.pool)
        ev_feats, ev_labels = evaluator.single_shape_features(
            ckpt.model.backbone, eval_ds, task, layer_tag=args.layer, pool_mode=args.pool)
        res = evaluator.linear_probe(tr_feats, tr_labels, "multiclass",
                                     ev_feats, ev_labels, seed=args.seed, layer_tag=args.layer)
        rows.append((task, res))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "results.jsonl"
    with open(results, "w", encoding="utf-8") as fh:
        for task, res in rows:
            fh.write(json.dumps({"task": task, **json.loads(res.to_json())}) + "\n")
    print(f"{'task':<8s} {'layer':<8s} {'metric':<6s} {'value':>8s} {'n':>6s}")
    for task, res in rows:
        print(f"{task:<8s} {res.layer_tag:<8s} {res.metric:<6s} {100 * res.value:>7.2f}% {res.n_eval:>6d}")
    return [results]


def cmd_zero_shot(args):
    ckpt = trainer.load_checkpoint(_ckpt_dir(args.ckpt, "checkpoint"))
    train_ds = _load_dataset(args.train_data)
    eval_ds = _load_dataset(args.eval_data)
    top1, n_eval, unseen = evaluator.zero_shot_shapes(
        ckpt.model.backbone, train_ds, eval_ds, n_unseen=args.unseen,
        seed=args.seed, layer_tag=args.layer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "results.jsonl"
    with open(results, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"metric": "top1_all_classes", "value": top1,
                             "n_eval": n_eval, "unseen_classes": unseen}) + "\n")
    print(f"zero-shot top1 {top1:.4f} over {n_eval} samples ({len(unseen)} unseen classes)")
    return [results]


def cmd_attend(args):
    ckpt = trainer.load_checkpoint(_ckpt_dir(args.ckpt, "checkpoint"))
    if ckpt.model.fusion_head is None:
        raise UsageError(f"checkpoint flavor {ckpt.config.model_flavor} has no attention head")
    ds = _load_dataset(args.data)
    try:
        image = ds.image_by_id(args.image_id)
    except KeyError:
        raise UsageError(f"image id not found in dataset: {args.image_id}")
    seq = cap.tokenize(args.caption, "cli", cap.default_tagger())
    if args.mask_token not in seq.tokens:
        raise UsageError(f"mask token {args.mask_token!r} does not occur in the caption")
    pos = seq.tokens.index(args.mask_token)
    model = ckpt.model
    from .common import image_tensor
    with torch.no_grad():
        X = model.backbone.final_grid(image_tensor(image.pixels)[None])
        W, lengths, _ = model.lm.encode_batch([seq], [pos])
    maps = extract_attention(model.fusion_head, X, W, lengths, torch.tensor([pos]),
                             model.backbone.grid_hw, [(image.image_id, "cli", pos)])
    stem = f"{image.image_id}_{args.mask_token}"
    png_path, json_path = viz.save_attention_artifacts(maps[0], image.pixels, args.out, stem)
    print(f"wrote {png_path} and {json_path}")
    return [png_path, json_path]


# ---------------------------------------------------------------------------
# parser

def build_parser() -> _Parser:
    parser = _Parser(prog="icmlm", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand")

    p = sub.add_parser("synth-gen", parents=[], help="generate a synthetic shapes dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("build-concepts", help="derive a concept set and image label vectors")
    p.add_argument("--data", required=True)
    p.add_argument("--origin", choices=("postag", "cluster"), default="postag")
    p.add_argument("--pos", default="NN,ADJ,VB", help="comma-separated POS tags for origin=postag")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--lm", help="language model dir (origin=cluster)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_concepts)

    p = sub.add_parser("build-triplets", help="enumerate (image, caption, masked token) triplets")
    p.add_argument("--data", required=True)
    p.add_argument("--concepts", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_triplets)

    p = sub.add_parser("pretrain-lm", help="pretrain and freeze the reference language model")
    p.add_argument("--data", required=True)
    p.add_argument("--d-w", dest="d_w", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("train", help="train a tag-prediction or fusion model")
    p.add_argument("--data", required=True)
    p.add_argument("--triplets")
    p.add_argument("--labels")
    p.add_argument("--lm")
    p.add_argument("--config", help="flat JSON config; CLI flags override per key")
    p.add_argument("--flavor", dest="model_flavor", choices=trainer.FLAVORS)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--optimizer", choices=("sgd", "radam"))
    p.add_argument("--schedule", choices=("cosine", "step", "constant"))
    p.add_argument("--schedule-horizon", dest="schedule_horizon", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--widths", help="comma-separated backbone channel widths")
    p.add_argument("--d-z", dest="d_z", type=int)
    p.add_argument("--att-heads", dest="att_heads", type=int)
    p.add_argument("--tfm-heads", dest="tfm_heads", type=int)
    p.add_argument("--tfm-layers", dest="tfm_layers", type=int)
    p.add_argument("--fc-hidden", dest="fc_hidden", type=int)
    p.add_argument("--fc-layers", dest="fc_layers", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-mtp", help="masked-token prediction metrics on held-out triplets")
    p.add_argument("--ckpt")
    p.add_argument("--text-only", action="store_true")
    p.add_argument("--lm", help="language model dir (with --text-only)")
    p.add_argument("--data", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_mtp)

    p = sub.add_parser("probe", help="linear probes on frozen backbone features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train-data", dest="train_data", required=True)
    p.add_argument("--eval-data", dest="eval_data", required=True)
    p.add_argument("--tasks", default="shape,color")
    p.add_argument("--layer", default="block4")
    p.add_argument("--pool", default="global_average",
                   choices=("global_average", "spatial_2x2_then_flatten"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("zero-shot", help="bilinear attribute scorer with held-out classes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train-data", dest="train_data", required=True)
    p.add_argument("--eval-data", dest="eval_data", required=True)
    p.add_argument("--unseen", type=int, default=2)
    p.add_argument("--layer", default="block4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_zero_shot)

    p = sub.add_parser("attend", help="render an attention map for one (image, caption, token)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", dest="image_id", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--mask-token", dest="mask_token", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attend)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not getattr(args, "subcommand", None):
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        artifacts = args.func(args) or []
    except (UsageError, ContractViolation, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_run_record(args, argv, str(exc), [])
        return 1
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_run_record(args, argv, str(exc), [])
        return 1
    except Exception as exc:  # internal failure
        print(f"error: internal: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        _write_run_record(args, argv, f"internal: {exc}", [])
        return 2
    _write_run_record(args, argv, None, artifacts)
    return 0


if __name__ == "__main__":
    sys.exit(main())
