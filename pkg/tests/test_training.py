import numpy as np
import pytest
import torch

from teamid.data import generate_synthetic
from teamid.losses import LossConfig
from teamid.model import ModelDescriptor, embed, load_checkpoint
from teamid.train import (TrainConfig, desk_config, export_loss_csv, lr_at,
                          parse_train_config, train)


def small_descriptor(dim=64):
    return ModelDescriptor(input_resolution=32, embedding_dim=dim)


def tiny_config(**kw):
    base = dict(recipe="reid_triplet", base_lr=1e-3, warmup_epochs=1,
                total_epochs=2, decay_milestones=[], batch_pk=(2, 2), seed=0,
                eval_every=1)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_warmup_endpoints(self):
        cfg = TrainConfig(base_lr=1e-2, warmup_epochs=10, total_epochs=120,
                          decay_milestones=[40, 70, 100])
        assert lr_at(cfg, 0) == pytest.approx(1e-3)
        assert lr_at(cfg, 10) == pytest.approx(1e-2)

    def test_warmup_is_linear(self):
        cfg = TrainConfig(base_lr=1.0, warmup_epochs=10, total_epochs=120,
                          decay_milestones=[40, 70, 100])
        for e in range(11):
            assert lr_at(cfg, e) == pytest.approx(0.1 + 0.9 * e / 10)

    def test_decay_by_epoch_stepping_oracle(self):
        cfg = TrainConfig(base_lr=3.5e-4, warmup_epochs=10, total_epochs=120,
                          decay_milestones=[40, 70, 100], decay_factor=0.1)
        # independent oracle: walk epochs, multiplying at each milestone
        lr = cfg.base_lr
        for epoch in range(cfg.total_epochs):
            if epoch in cfg.decay_milestones:
                lr *= cfg.decay_factor
            if epoch >= cfg.warmup_epochs:
                assert lr_at(cfg, epoch) == pytest.approx(lr, rel=1e-12)
        assert lr_at(cfg, 75) == pytest.approx(3.5e-4 * 0.01)

    def test_monotone_during_warmup(self):
        cfg = TrainConfig(base_lr=2e-3, warmup_epochs=7, total_epochs=50,
                          decay_milestones=[20])
        vals = [lr_at(cfg, e) for e in range(8)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_out_of_range_epoch_rejected(self):
        cfg = TrainConfig(total_epochs=10, warmup_epochs=2,
                          decay_milestones=[5])
        with pytest.raises(ValueError):
            lr_at(cfg, 10)
        with pytest.raises(ValueError):
            lr_at(cfg, -1)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(recipe="nope").validate()
        with pytest.raises(ValueError):
            TrainConfig(warmup_epochs=5, total_epochs=5,
                        decay_milestones=[]).validate()
        with pytest.raises(ValueError):
            TrainConfig(decay_milestones=[40, 30],
                        total_epochs=120).validate()
        with pytest.raises(ValueError):
            TrainConfig(decay_factor=1.5, total_epochs=120,
                        decay_milestones=[40]).validate()


class TestTrainLoop:
    def test_zero_epochs_returns_initialized_model(self, tiny_view):
        res = train(tiny_view, small_descriptor(), LossConfig(),
                    tiny_config(total_epochs=0, warmup_epochs=0))
        assert res.state.step == 0 and res.state.loss_history == []
        out = embed(res.model, tiny_view.samples[:2])
        assert np.isfinite(out).all()

    def test_reference_mode_reproducible(self, tiny_view):
        runs = []
        for _ in range(2):
            res = train(tiny_view, small_descriptor(), LossConfig(),
                        tiny_config(), reference_mode=True)
            runs.append(res)
        assert runs[0].state.loss_history == runs[1].state.loss_history
        a = embed(runs[0].model, tiny_view.samples[:3])
        b = embed(runs[1].model, tiny_view.samples[:3])
        assert np.array_equal(a, b)

    def test_different_seeds_diverge(self, tiny_view):
        a = train(tiny_view, small_descriptor(), LossConfig(),
                  tiny_config(seed=0), reference_mode=True)
        b = train(tiny_view, small_descriptor(), LossConfig(),
                  tiny_config(seed=1), reference_mode=True)
        assert a.state.loss_history != b.state.loss_history

    def test_lr_history_follows_schedule(self, tiny_view):
        cfg = tiny_config(total_epochs=3, warmup_epochs=2)
        res = train(tiny_view, small_descriptor(), LossConfig(), cfg)
        lrs = sorted({lr for _, lr in res.state.lr_history})
        expected = sorted({lr_at(cfg, e) for e in range(3)})
        assert lrs == pytest.approx(expected)

    def test_brand_recipe_trains_gate_bank(self, tiny_view):
        res = train(tiny_view, small_descriptor(),
                    LossConfig(), tiny_config(recipe="brand_proxynca"),
                    attribute="brand")
        assert res.bank is not None
        assert res.bank.num_proxies == 4  # one proxy per brand
        assert all(np.isfinite(l) for _, l in res.state.loss_history)

    def test_checkpoints_written_and_loadable(self, tiny_view, tmp_path):
        cfg = tiny_config(total_epochs=4, warmup_epochs=1,
                          decay_milestones=[2], eval_every=2)
        res = train(tiny_view, small_descriptor(), LossConfig(), cfg,
                    out_dir=tmp_path)
        assert (tmp_path / "final.npz").exists()
        assert (tmp_path / "epoch_0002.npz").exists()
        loaded, _ = load_checkpoint(tmp_path / "final.npz")
        probe = tiny_view.samples[:2]
        assert np.array_equal(embed(loaded, probe), embed(res.model, probe))

    def test_loss_decreases_on_separable_data(self):
        view = generate_synthetic(2, 3, 6, seed=5, resolution=32)
        cfg = tiny_config(total_epochs=10, warmup_epochs=1, batch_pk=(4, 3),
                          decay_milestones=[7])
        res = train(view, small_descriptor(),
                    LossConfig(normalize_triplet=True), cfg,
                    reference_mode=True)
        losses = [l for _, l in res.state.loss_history]
        k = max(1, len(losses) // 4)
        assert np.mean(losses[-k:]) < np.mean(losses[:k])


class TestConfigIo:
    def test_parse_roundtrip(self, tmp_path):
        p = tmp_path / "cfg.txt"
        p.write_text("# desk profile\nrecipe = brand_proxynca\n"
                     "base_lr = 0.002\ntotal_epochs = 12\nwarmup_epochs = 2\n"
                     "decay_milestones = 6,9\nseed = 3\n"
                     "channel_shuffle_probability = 0.25\n")
        cfg = parse_train_config(p)
        assert cfg.recipe == "brand_proxynca"
        assert cfg.base_lr == 0.002
        assert cfg.decay_milestones == [6, 9]
        assert cfg.channel_shuffle_probability == 0.25
        cfg.validate()

    def test_parse_reports_all_bad_fields(self, tmp_path):
        p = tmp_path / "cfg.txt"
        p.write_text("base_lr = abc\ntotal_epochs = 1.5\nbogus_key = 1\n")
        with pytest.raises(ValueError) as e:
            parse_train_config(p)
        msg = str(e.value)
        assert "base_lr" in msg and "total_epochs" in msg and "bogus_key" in msg

    def test_export_loss_csv(self, tiny_view, tmp_path):
        res = train(tiny_view, small_descriptor(), LossConfig(), tiny_config())
        path = tmp_path / "loss.csv"
        export_loss_csv(res.state, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,loss,lr"
        assert len(lines) == len(res.state.loss_history) + 1
