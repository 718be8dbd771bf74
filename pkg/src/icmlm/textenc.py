"""Frozen reference language model: vocabulary, contextual token features, masking."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import TransformerEncoderLayer
from .captions import TokenSequence
from .common import ContractViolation, batch_indices

PAD, UNK, CLS, MASK = "[PAD]", "[UNK]", "[CLS]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, MASK)


class Vocabulary:
    """Token ids plus the shared embedding table scored against by every head."""

    def __init__(self, tokens):
        self.tokens = tuple(SPECIALS) + tuple(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id, self.unk_id, self.cls_id, self.mask_id = (self.id_of[s] for s in SPECIALS)
        self.embedding: nn.Embedding | None = None  # attached by ReferenceLm

    def __len__(self):
        return len(self.tokens)

    def encode_tokens(self, tokens) -> list[int]:
        return [self.id_of.get(t, self.unk_id) for t in tokens]

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        """Dot products against the embedding table (tied weights, no bias)."""
        table = self.embedding.weight
        if features.shape[-1] != table.shape[1]:
            raise ContractViolation(
                f"feature width {features.shape[-1]} != embedding width {table.shape[1]}"
            )
        return features @ table.t()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, i in sorted(self.id_of.items(), key=lambda kv: kv[1]):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pairs = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    tok, i = line.rstrip("\n").split("\t")
                    pairs.append((int(i), tok))
        pairs.sort()
        tokens = [t for _, t in pairs]
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary file does not start with the special tokens")
        return cls(tokens[len(SPECIALS):])


def build_vocabulary(sequences: dict[str, TokenSequence]) -> Vocabulary:
    """Corpus vocabulary ordered by descending frequency, ties lexicographic."""
    counts = Counter(tok for seq in sequences.values() for tok in seq.tokens)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(ordered)


@dataclass
class TextFeatures:
    W: torch.Tensor  # (T, d_w) contextual token features, [CLS] excluded
    cls: torch.Tensor  # (d_w,) sentence-level feature
    mask_index: int | None = None


@dataclass
class LmConfig:
    d_w: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 32
    dropout: float = 0.1
    mask_rate: float = 0.15
    steps: int = 1500
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0


class ReferenceLm(nn.Module):
    """Small transformer MLM; pretrained on the caption corpus, then frozen."""

    def __init__(self, vocab: Vocabulary, config: LmConfig):
        super().__init__()
        self.vocab = vocab
        self.config = config
        self.tok_emb = nn.Embedding(len(vocab), config.d_w, padding_idx=vocab.pad_id)
        self.pos_emb = nn.Embedding(config.max_len, config.d_w)
        self.layers = nn.ModuleList(
            TransformerEncoderLayer(config.d_w, config.n_heads, config.dropout)
            for _ in range(config.n_layers)
        )
        vocab.embedding = self.tok_emb

    @property
    def d_w(self) -> int:
        return self.config.d_w

    def forward(self, ids: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        positions = torch.arange(ids.shape[1], device=ids.device)
        h = self.tok_emb(ids) + self.pos_emb(positions)[None]
        for layer in self.layers:
            h, _ = layer(h, key_mask)
        return h

    def encode_batch(self, seqs, mask_indices=None):
        """Batched contextual features with [CLS] prepended and [PAD] fill.

        Returns (W, lengths, cls): W is (B, T_max, d_w) with [CLS] stripped,
        lengths the true token counts.
        """
        if mask_indices is None:
            mask_indices = [None] * len(seqs)
        lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
        t_max = int(lengths.max())
        ids = torch.full((len(seqs), t_max + 1), self.vocab.pad_id, dtype=torch.long)
        ids[:, 0] = self.vocab.cls_id
        for b, (seq, mi) in enumerate(zip(seqs, mask_indices)):
            row = self.vocab.encode_tokens(seq.tokens)
            if mi is not None:
                if not 0 <= mi < len(row):
                    raise ContractViolation(f"mask_index {mi} out of range for {len(row)} tokens")
                row[mi] = self.vocab.mask_id
            ids[b, 1 : 1 + len(row)] = torch.tensor(row, dtype=torch.long)
        key_mask = torch.arange(t_max + 1)[None] < (lengths + 1)[:, None]
        features = self.forward(ids, key_mask)
        return features[:, 1:], lengths, features[:, 0]

    def encode(self, seq: TokenSequence, mask_index: int | None = None) -> TextFeatures:
        """Contextual features of one caption, optionally with a masked position."""
        with torch.no_grad():
            W, lengths, cls = self.encode_batch([seq], [mask_index])
        return TextFeatures(W=W[0, : int(lengths[0])], cls=cls[0], mask_index=mask_index)

    def vocab_logits(self, features: torch.Tensor) -> torch.Tensor:
        return self.vocab.logits(features)

    def freeze(self) -> None:
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)


def save_lm(lm: ReferenceLm, out_dir) -> None:
    from pathlib import Path

    from .serialization import save_tensors

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensors(dict(lm.state_dict()), out / "weights.bin")
    lm.vocab.save(out / "vocab.txt")
    import dataclasses
    import json

    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump({"format": "icmlm-lm", "version": 1,
                   "lm_config": dataclasses.asdict(lm.config)}, fh, indent=2, sort_keys=True)


def load_lm(in_dir) -> ReferenceLm:
    import json
    from pathlib import Path

    from .serialization import load_tensors

    src = Path(in_dir)
    with open(src / "meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != "icmlm-lm":
        raise ValueError(f"{src}: not a language-model checkpoint")
    vocab = Vocabulary.load(src / "vocab.txt")
    lm = ReferenceLm(vocab, LmConfig(**meta["lm_config"]))
    lm.load_state_dict(load_tensors(src / "weights.bin"))
    lm.freeze()
    return lm


def pretrain_reference_lm(sequences: dict[str, TokenSequence], config: LmConfig) -> ReferenceLm:
    """Train the reference MLM on the caption corpus for a fixed step budget, then freeze."""
    torch.manual_seed(config.seed)
    vocab = build_vocabulary(sequences)
    lm = ReferenceLm(vocab, config)
    lm.train()
    seqs = [sequences[cid] for cid in sorted(sequences)]
    opt = torch.optim.Adam(lm.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    for step in range(config.steps):
        idx = batch_indices(config.seed, len(seqs), config.batch_size, step)
        batch = [seqs[i] for i in idx]
        lengths = torch.tensor([len(s) for s in batch], dtype=torch.long)
        t_max = int(lengths.max())
        ids = torch.full((len(batch), t_max + 1), vocab.pad_id, dtype=torch.long)
        ids[:, 0] = vocab.cls_id
        for b, seq in enumerate(batch):
            ids[b, 1 : 1 + len(seq)] = torch.tensor(vocab.encode_tokens(seq.tokens))
        targets = ids.clone()
        maskable = torch.arange(t_max + 1)[None].expand_as(ids) >= 1
        maskable &= torch.arange(t_max + 1)[None] < (lengths + 1)[:, None]
        pick = (torch.rand(ids.shape, generator=gen) < config.mask_rate) & maskable
        for b in range(len(batch)):  # guarantee at least one masked position per row
            if not pick[b].any():
                j = int(torch.randint(1, int(lengths[b]) + 1, (1,), generator=gen))
                pick[b, j] = True
        ids = ids.masked_fill(pick, vocab.mask_id)
        key_mask = torch.arange(t_max + 1)[None] < (lengths + 1)[:, None]
        features = lm(ids, key_mask)
        logits = vocab.logits(features[pick])
        loss = nn.functional.cross_entropy(logits, targets[pick])
        opt.zero_grad()
        loss.backward()
        opt.step()
    lm.freeze()
    return lm
