import pytest
import torch

from icmlm.captions import build_label_vectors, build_postag_concepts, build_triplets, tokenize_dataset
from icmlm.corpus import generate_synthetic
from icmlm.textenc import LmConfig, pretrain_reference_lm


@pytest.fixture(scope="session", autouse=True)
def _torch_threads():
    torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def tiny_setup():
    """A 40-image corpus with LM, concepts, labels and triplets, for fast trainer tests."""
    ds = generate_synthetic(40, seed=3)
    seqs, _ = tokenize_dataset(ds)
    lm = pretrain_reference_lm(seqs, LmConfig(steps=120, batch_size=32, seed=2))
    cs = build_postag_concepts(seqs, {"NN", "ADJ"}, 21)
    labels = build_label_vectors(ds, seqs, cs)
    triplets, _ = build_triplets(ds, seqs, cs, lm.vocab)
    return {"ds": ds, "seqs": seqs, "lm": lm, "concepts": cs,
            "labels": labels, "triplets": triplets}


def tiny_config(**overrides):
    from icmlm.trainer import TrainConfig
    base = dict(
        model_flavor="icmlm_attfc", lam=1.0, steps=6, batch_size=8,
        learning_rate=0.05, weight_decay=1e-4, warmup_steps=2, seed=0,
        log_every=2, checkpoint_every=100, backbone_widths=(8, 16, 24, 24),
        d_z=16, att_heads=2, tfm_heads=2, fc_hidden=24, dropout=0.1,
    )
    base.update(overrides)
    return TrainConfig(**base)
