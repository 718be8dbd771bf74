import numpy as np
import pytest
import torch

from conftest import tiny_config
from icmlm.common import ContractViolation, batch_indices, parameter_checksum
from icmlm.trainer import (
    Checkpoint, TrainConfig, TrainingDiverged, build_model, load_checkpoint,
    resume, train,
)


def checksums(ckpt):
    return parameter_checksum(ckpt.model)


class TestConfig:
    def test_warmup_must_be_below_steps(self):
        with pytest.raises(ContractViolation):
            TrainConfig(steps=10, warmup_steps=10)
        TrainConfig(steps=0, warmup_steps=0)  # steps=0 identity run is legal

    def test_bad_flavor_rejected(self):
        with pytest.raises(ContractViolation):
            TrainConfig(model_flavor="nope")

    def test_round_trip_dict(self):
        cfg = tiny_config(lam=0.1)
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert cfg.to_dict()["lambda"] == 0.1


class TestBatchOrder:
    def test_stateless_stream_consistency(self):
        # consecutive steps tile the shuffled stream without gaps or overlap
        n, bs = 17, 5
        seen = [batch_indices(9, n, bs, s) for s in range(7)]
        flat = np.concatenate(seen)
        for start in range(0, 34 - n, n):
            chunk = flat[start : start + n]
            assert sorted(chunk.tolist()) == list(range(n))

    def test_deterministic(self):
        a = batch_indices(1, 50, 8, 3)
        b = batch_indices(1, 50, 8, 3)
        np.testing.assert_array_equal(a, b)


class TestTraining:
    def test_zero_steps_equals_initialization(self, tiny_setup):
        cfg = tiny_config(steps=0, warmup_steps=0)
        ckpt = train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                     cfg, lm=tiny_setup["lm"], sequences=tiny_setup["seqs"])
        fresh = build_model(cfg, tiny_setup["lm"], ckpt.k)
        assert parameter_checksum(ckpt.model) == parameter_checksum(fresh)
        assert ckpt.step == 0

    def test_same_seed_same_checksum(self, tiny_setup):
        runs = [
            train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                  tiny_config(), lm=tiny_setup["lm"], sequences=tiny_setup["seqs"])
            for _ in range(2)
        ]
        assert checksums(runs[0]) == checksums(runs[1])

    def test_logged_total_is_exact_weighted_sum(self, tiny_setup):
        ckpt = train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                     tiny_config(lam=0.1), lm=tiny_setup["lm"], sequences=tiny_setup["seqs"])
        assert ckpt.history
        for rec in ckpt.history:
            assert abs(rec.l_total - (rec.l_mlm + rec.lam * rec.l_tp)) <= 1e-9

    def test_lm_frozen_through_training(self, tiny_setup):
        before = parameter_checksum(tiny_setup["lm"])
        train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
              tiny_config(), lm=tiny_setup["lm"], sequences=tiny_setup["seqs"])
        assert parameter_checksum(tiny_setup["lm"]) == before

    def test_backbone_frozen_during_warmup(self, tiny_setup, tmp_path):
        cfg = tiny_config(steps=5, warmup_steps=4, checkpoint_every=4)
        ckpt = train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                     cfg, lm=tiny_setup["lm"], sequences=tiny_setup["seqs"],
                     save_dir=tmp_path / "ck")
        init = build_model(cfg, tiny_setup["lm"], ckpt.k)
        mid = load_checkpoint(tmp_path / "ck")  # written at step 4, still in warm-up
        assert parameter_checksum(mid.model.backbone) == parameter_checksum(init.backbone)
        assert parameter_checksum(mid.model.tp_head) != parameter_checksum(init.tp_head)
        # after the warm-up boundary the backbone moves
        assert parameter_checksum(ckpt.model.backbone) != parameter_checksum(init.backbone)

    def test_lambda_zero_leaves_tp_head_at_init(self, tiny_setup):
        cfg = tiny_config(lam=0.0)
        ckpt = train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                     cfg, lm=tiny_setup["lm"], sequences=tiny_setup["seqs"])
        init = build_model(cfg, tiny_setup["lm"], ckpt.k)
        assert parameter_checksum(ckpt.model.tp_head) == parameter_checksum(init.tp_head)
        assert parameter_checksum(ckpt.model.fusion_head) != parameter_checksum(init.fusion_head)

    def test_divergence_aborts_with_batch_ids(self, tiny_setup):
        cfg = tiny_config(steps=40, warmup_steps=0, learning_rate=1e12, dropout=0.0)
        with pytest.raises(TrainingDiverged, match="img_"):
            train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                  cfg, lm=tiny_setup["lm"], sequences=tiny_setup["seqs"])

    def test_tp_flavor_trains_without_lm(self, tiny_setup):
        cfg = tiny_config(model_flavor="tp_postag", steps=4, warmup_steps=2)
        ckpt = train(tiny_setup["ds"], None, tiny_setup["labels"], cfg)
        assert ckpt.step == 4
        assert ckpt.model.fusion_head is None
        for rec in ckpt.history:
            assert rec.l_mlm == 0.0 and rec.l_total == rec.l_tp


class TestPersistence:
    def test_save_load_forward_bit_exact(self, tiny_setup, tmp_path):
        ckpt = train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                     tiny_config(), lm=tiny_setup["lm"], sequences=tiny_setup["seqs"])
        ckpt.save(tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert parameter_checksum(loaded.model) == parameter_checksum(ckpt.model)
        x = torch.rand(2, 3, 64, 64)
        with torch.no_grad():
            a = ckpt.model.backbone.forward(x)["block4"]
            b = loaded.model.backbone.forward(x)["block4"]
        assert torch.equal(a, b)
        assert loaded.step == ckpt.step
        assert loaded.config == ckpt.config
        assert [r.step for r in loaded.history] == [r.step for r in ckpt.history]

    def test_resume_equals_uninterrupted(self, tiny_setup, tmp_path):
        # dropout active (tfm flavor) so the saved RNG state is exercised too
        kw = dict(model_flavor="icmlm_tfm", warmup_steps=2, schedule_horizon=12)
        full = train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                     tiny_config(steps=12, **kw), lm=tiny_setup["lm"],
                     sequences=tiny_setup["seqs"])
        half = train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                     tiny_config(steps=6, **kw), lm=tiny_setup["lm"],
                     sequences=tiny_setup["seqs"])
        half.save(tmp_path / "half")
        reloaded = load_checkpoint(tmp_path / "half")
        resumed = resume(reloaded, 6, tiny_setup["ds"], tiny_setup["triplets"],
                         tiny_setup["labels"], sequences=tiny_setup["seqs"])
        assert resumed.step == 12
        assert checksums(resumed) == checksums(full)

    def test_resume_zero_steps_identity(self, tiny_setup):
        ckpt = train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                     tiny_config(), lm=tiny_setup["lm"], sequences=tiny_setup["seqs"])
        before = checksums(ckpt)
        resumed = resume(ckpt, 0, tiny_setup["ds"], tiny_setup["triplets"],
                         tiny_setup["labels"], sequences=tiny_setup["seqs"])
        assert checksums(resumed) == before

    def test_resume_refuses_changed_k(self, tiny_setup):
        ckpt = train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                     tiny_config(), lm=tiny_setup["lm"], sequences=tiny_setup["seqs"])
        narrower = [type(lv)(image_id=lv.image_id, y=lv.y[:5] / lv.y[:5].sum())
                    for lv in tiny_setup["labels"] if lv.y[:5].sum() > 0]
        with pytest.raises(ContractViolation, match="K"):
            resume(ckpt, 2, tiny_setup["ds"], tiny_setup["triplets"], narrower,
                   sequences=tiny_setup["seqs"])

    def test_resume_refuses_immutable_overrides(self, tiny_setup):
        ckpt = train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                     tiny_config(), lm=tiny_setup["lm"], sequences=tiny_setup["seqs"])
        with pytest.raises(ContractViolation, match="immutable"):
            resume(ckpt, 2, tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                   sequences=tiny_setup["seqs"], config_overrides={"batch_size": 4})

    def test_checkpoint_contains_documented_files(self, tiny_setup, tmp_path):
        ckpt = train(tiny_setup["ds"], tiny_setup["triplets"], tiny_setup["labels"],
                     tiny_config(), lm=tiny_setup["lm"], sequences=tiny_setup["seqs"])
        ckpt.save(tmp_path / "ck")
        for name in ("weights.bin", "meta.json", "log.jsonl", "vocab.txt"):
            assert (tmp_path / "ck" / name).exists()
