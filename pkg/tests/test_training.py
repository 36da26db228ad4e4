import json

import numpy as np
import pytest
import torch

from hierpose.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from hierpose.data_io import SyntheticMotionSpec, generate_synthetic
from hierpose.diffusion import cosine_schedule
from hierpose.skeleton import build_topology, h36m_topology
from hierpose.training import (
    Ablation,
    TrainConfig,
    TrainingError,
    disentanglement_loss,
    init_state,
    lr_at_epoch,
    moving_average,
    pose_loss,
    total_loss,
    train,
    train_step,
)

H36M = h36m_topology()


def small_cfg(**kw):
    base = dict(dim=16, num_heads=2, num_loops=1, num_frames=5, batch_size=2, epochs=1, T=50)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SyntheticMotionSpec(num_sequences=4, N=5, angular_speed_range=(0.01, 0.05)))


def oracle_dis_loss(pred, gt, topo):
    """Lengths and directions from explicit per-bone loops."""
    ll, ld, n = 0.0, 0.0, 0
    for idx in np.ndindex(*pred.shape[:-2]):
        for p, c in topo.bone_order:
            bp, bg = pred[idx][c] - pred[idx][p], gt[idx][c] - gt[idx][p]
            lp, lg = np.linalg.norm(bp), np.linalg.norm(bg)
            ll += abs(lp - lg)
            ld += np.linalg.norm(bp / lp - bg / lg)
            n += 1
    return ll / n, ld / n


class TestLosses:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.gt = torch.tensor(rng.standard_normal((2, 3, 17, 3)))
        self.pred = torch.tensor(rng.standard_normal((2, 3, 17, 3)))

    def test_zero(self):
        ll, ld, ldis, _ = disentanglement_loss(self.gt, self.gt, H36M)
        assert float(ll) == float(ld) == float(ldis) == 0
        assert float(pose_loss(self.gt, self.gt)) == 0

    def test_scaled_about_root(self):
        root = self.gt[..., :1, :]
        ll, ld, _, _ = disentanglement_loss(root + 2 * (self.gt - root), self.gt, H36M)
        bones = self.gt[..., H36M.bone_children, :] - self.gt[..., H36M.bone_parents, :]
        assert float(ld) == pytest.approx(0, abs=1e-12)
        assert float(ll) == pytest.approx(float(bones.norm(dim=-1).mean()), abs=1e-12)

    def test_unit_offset(self):
        assert float(pose_loss(self.gt + torch.tensor([1.0, 0, 0], dtype=torch.float64), self.gt)) == pytest.approx(1)

    def test_oracle(self):
        ll, ld, ldis, _ = disentanglement_loss(self.pred, self.gt, H36M)
        oll, old = oracle_dis_loss(self.pred.numpy(), self.gt.numpy(), H36M)
        assert float(ll) == pytest.approx(oll, abs=1e-6)
        assert float(ld) == pytest.approx(old, abs=1e-6)
        assert float(ldis) == float(ll + ld)
        ref = np.linalg.norm(self.pred.numpy() - self.gt.numpy(), axis=-1).mean()
        assert float(pose_loss(self.pred, self.gt)) == pytest.approx(ref, abs=1e-12)

    def test_permutation_invariant(self):
        perm = torch.randperm(17, generator=torch.Generator().manual_seed(0))
        a = pose_loss(self.pred[..., perm, :], self.gt[..., perm, :])
        assert float(a) == pytest.approx(float(pose_loss(self.pred, self.gt)), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pose_loss(self.pred, self.gt[:1])
        with pytest.raises(ValueError):
            disentanglement_loss(self.pred, self.gt[:1], H36M)

    def test_total_without_dis(self):
        ll, ld, lpos, ltot, _ = total_loss(self.pred, self.gt, H36M, use_dis_loss=False)
        assert torch.equal(ltot, lpos)
        _, _, _, ltot2, _ = total_loss(self.pred, self.gt, H36M)
        torch.testing.assert_close(ltot2, ll + ld + lpos)

    def test_degenerate_prediction_flagged(self):
        pred = self.gt.clone()
        pred[..., 3, :] = pred[..., 2, :]
        _, _, ldis, ndeg = disentanglement_loss(pred, self.gt, H36M)
        assert ndeg == 6 and torch.isfinite(ldis)


class TestTrainStep:
    def batch(self, data):
        return (np.stack([s.pose2d for s in data[:2]]), np.stack([s.pose3d for s in data[:2]]))

    def test_report_identities(self, data):
        cfg = small_cfg()
        state = init_state(cfg, H36M)
        rng = np.random.default_rng(0)
        for _ in range(3):
            state, rep = train_step(self.batch(data), state, cfg, cosine_schedule(cfg.T), H36M, rng)
            assert rep.L_dis == rep.L_l + rep.L_d
            assert rep.L_total == rep.L_dis + rep.L_pos
            assert min(rep.L_l, rep.L_d, rep.L_pos) >= 0

    def test_pose_loss_only(self, data):
        cfg = small_cfg(ablation=Ablation(use_dis_loss=False))
        state = init_state(cfg, H36M)
        _, rep = train_step(self.batch(data), state, cfg, cosine_schedule(cfg.T), H36M, np.random.default_rng(0))
        assert rep.L_total == rep.L_pos

    def test_zero_lr_keeps_parameters(self, data):
        cfg = small_cfg(lr=0.0)
        state = init_state(cfg, H36M)
        before = {k: v.clone() for k, v in state.model.state_dict().items()}
        train_step(self.batch(data), state, cfg, cosine_schedule(cfg.T), H36M, np.random.default_rng(0))
        for k, v in state.model.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_deterministic(self, data):
        def run():
            cfg = small_cfg()
            state = init_state(cfg, H36M)
            rng = np.random.default_rng(3)
            return [train_step(self.batch(data), state, cfg, cosine_schedule(cfg.T), H36M, rng)[1] for _ in range(3)]

        assert run() == run()

    @pytest.mark.parametrize("ablation", [
        Ablation(disentangle_input=False), Ablation(disentangle_output=True),
        Ablation(disentangle_input=False, disentangle_output=True), Ablation(use_hrst=False, use_hrtt=False),
    ])
    def test_ablations_run(self, data, ablation):
        cfg = small_cfg(ablation=ablation)
        state = init_state(cfg, H36M)
        _, rep = train_step(self.batch(data), state, cfg, cosine_schedule(cfg.T), H36M, np.random.default_rng(0))
        assert np.isfinite(rep.L_total)

    def test_non_finite_loss(self, data):
        cfg = small_cfg()
        state = init_state(cfg, H36M)
        cond, gt = self.batch(data)
        gt = gt.copy()
        gt[1, 0, 5] = np.inf
        with pytest.raises((TrainingError, FloatingPointError)):
            train_step((cond, gt), state, cfg, cosine_schedule(cfg.T), H36M, np.random.default_rng(0))


class TestTrainLoop:
    def test_epochs_zero(self, data, tmp_path):
        cfg = small_cfg(epochs=0)
        state, records = train(data, cfg, H36M, out_dir=tmp_path)
        assert records == [] and state.step == 0
        assert (tmp_path / "metrics.jsonl").read_text() == ""
        assert (tmp_path / "checkpoint.bin").exists()

    def test_lr_decay(self, data, tmp_path):
        cfg = small_cfg(epochs=3, lr=1e-4)
        _, records = train(data, cfg, H36M, out_dir=tmp_path)
        lrs = sorted({(r["epoch"], r["lr"]) for r in records})
        assert [lr for _, lr in lrs] == pytest.approx([1e-4 * 0.993 ** k for k in range(3)], rel=1e-12)
        assert lr_at_epoch(cfg, 2) == pytest.approx(1e-4 * 0.993 ** 2)
        lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert lines == records
        assert {"step", "epoch", "lr", "L_total", "L_dis"} <= set(lines[0])

    def test_max_steps_and_periodic_checkpoints(self, data, tmp_path):
        cfg = small_cfg(epochs=5, max_steps=5, checkpoint_every=1)
        state, records = train(data, cfg, H36M, out_dir=tmp_path)
        assert state.step == 5 and len(records) == 5
        assert sorted(p.name for p in tmp_path.glob("checkpoint_e*.bin")) == [f"checkpoint_e000{k}.bin" for k in (1, 2, 3)]

    def test_empty_dataset(self):
        with pytest.raises(TrainingError, match="empty"):
            train([], small_cfg(), H36M)

    def test_short_sequence(self, data):
        with pytest.raises(TrainingError, match="frames"):
            train(data, small_cfg(num_frames=9), H36M)

    def test_unwritable_dir(self, data, tmp_path):
        (tmp_path / "f").write_text("")
        with pytest.raises((TrainingError, OSError)):
            train(data, small_cfg(), H36M, out_dir=tmp_path / "f")


class TestConfig:
    def test_json_roundtrip(self):
        cfg = small_cfg(ablation=Ablation(use_hrst=False))
        back = TrainConfig.from_json(json.loads(json.dumps(cfg.to_json())))
        assert back == cfg and back.ablation.use_hrst is False

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_decay_per_epoch=0)
        with pytest.raises(ValueError):
            TrainConfig(T=0)
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_json({"learning_rate": 1})


def test_moving_average():
    np.testing.assert_allclose(moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    np.testing.assert_allclose(moving_average([1, 3], 20), [2.0])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        topo = build_topology([-1, 0, 1, 0, 3])
        cfg = small_cfg(ablation=Ablation(disentangle_output=True))
        state = init_state(cfg, topo)
        save_checkpoint(tmp_path / "c.bin", state.model, {"note": "x"})
        model, topo2, extra = load_checkpoint(tmp_path / "c.bin")
        assert extra == {"note": "x"} and topo2.parents.tolist() == topo.parents.tolist()
        assert model.cfg == state.model.cfg
        for k, v in state.model.state_dict().items():
            assert torch.equal(model.state_dict()[k], v.float())
        header, _ = read_checkpoint(tmp_path / "c.bin")
        assert header["format_version"] == 1

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"nope" * 10)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.bin")

    def test_truncated(self, tmp_path):
        state = init_state(small_cfg(), H36M)
        save_checkpoint(tmp_path / "c.bin", state.model)
        raw = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(raw[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.bin")
