import copy
import json

import numpy as np
import pytest
import torch

from stvp.adversarial import Discriminator
from stvp.autoencoder import Predictor
from stvp.config import ModelConfig, TrainConfig
from stvp.data import (DatasetManifest, SequenceEntry, VideoSequence,
                       make_clip, read_frames, write_frames)
from stvp.errors import FormatError, NumericError, ValidationError
from stvp.trainer import (SequenceDataset, Trainer, build_from_checkpoint,
                          clip_at, load_checkpoint, rollout, save_checkpoint)


def model_config(**kw):
    base = dict(layers=2, patch=2, hidden=8, kernel_hidden=3, enc_depth=2,
                recall_weight=0.1, frame_channels=1, clip_length=2)
    base.update(kw)
    return ModelConfig(**base)


def train_config(**kw):
    base = dict(steps=2, batch_size=2, lr_predictor=1e-3,
                lr_discriminator=1e-3, gamma1=0.0, gamma2=0.0,
                input_horizon=2, predict_horizon_train=2,
                predict_horizon_test=2, seed=0, grad_clip=1.0,
                checkpoint_every=1000, supervise="all")
    base.update(kw)
    return TrainConfig(**base)


def build_model(cfg=None, seed=0):
    torch.manual_seed(seed)
    return Predictor(cfg or model_config())


def toy_manifest(tmp_path, n_seqs=3, t=5, size=16, seed=0):
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_seqs):
        frames = rng.random((t, 1, size, size)).astype(np.float32)
        write_frames(tmp_path / f"seq_{i}.seq", frames)
        entries.append(SequenceEntry(f"seq_{i}", f"seq_{i}.seq",
                                     t, 1, size, size))
    manifest = DatasetManifest(root=tmp_path, entries=entries, seed=seed)
    manifest.save()
    return manifest


class TestClipAt:
    def test_matches_make_clip(self):
        frames = np.random.default_rng(0).random((10, 1, 2, 2),
                                                 ).astype(np.float32)
        seq = VideoSequence(frames=frames, sequence_id="a")
        batch = torch.from_numpy(frames).unsqueeze(0)
        for t in range(1, 11):
            ref = make_clip(seq, t, 2).clip
            got = clip_at(batch, t, 2)[0].numpy()
            np.testing.assert_array_equal(got, ref)

    def test_left_edge_replicates_first_frame(self):
        frames = torch.rand(1, 4, 2, 1, 1)
        clip = clip_at(frames, 1, 2)
        assert torch.equal(clip[:, 0], frames[:, 0])
        assert torch.equal(clip[:, 1], frames[:, 0])

    def test_interior_is_sliding_window(self):
        frames = torch.rand(1, 6, 2, 1, 1)
        clip = clip_at(frames, 3, 2)
        assert torch.equal(clip[:, 0], frames[:, 1])
        assert torch.equal(clip[:, 1], frames[:, 2])

    def test_batched_frames(self):
        frames = torch.rand(2, 6, 1, 4, 4)
        clip = clip_at(frames, 2, 2)
        assert clip.shape == (2, 2, 1, 4, 4)
        assert torch.equal(clip[:, 0], frames[:, 0])
        assert torch.equal(clip[:, 1], frames[:, 1])


class TestSequenceDataset:
    def test_window_enumeration(self, tmp_path):
        manifest = toy_manifest(tmp_path, n_seqs=2, t=5)
        ds = SequenceDataset(manifest, window=4)
        # 5 frames, window 4, stride 1: starts 0 and 1, per sequence
        assert len(ds) == 4

    def test_stride(self, tmp_path):
        manifest = toy_manifest(tmp_path, n_seqs=1, t=9)
        assert len(SequenceDataset(manifest, window=4, stride=1)) == 6
        assert len(SequenceDataset(manifest, window=4, stride=2)) == 3
        assert len(SequenceDataset(manifest, window=4, stride=5)) == 2

    def test_window_contents(self, tmp_path):
        manifest = toy_manifest(tmp_path, n_seqs=1, t=6, seed=3)
        ds = SequenceDataset(manifest, window=3)
        raw = read_frames(manifest.sequence_path(manifest.entries[0]))
        for i in range(len(ds)):
            np.testing.assert_array_equal(ds.window_at(i), raw[i:i + 3])

    def test_batch_shape(self, tmp_path):
        manifest = toy_manifest(tmp_path)
        ds = SequenceDataset(manifest, window=4)
        batch = ds.batch([0, 1, 2])
        assert batch.shape == (3, 4, 1, 16, 16)

    def test_too_short_sequences_rejected(self, tmp_path):
        manifest = toy_manifest(tmp_path, t=3)
        with pytest.raises(ValidationError):
            SequenceDataset(manifest, window=4)


class TestTrainStep:
    def test_mse_only_updates_predictor(self, tmp_path):
        model = build_model()
        trainer = Trainer(model, train_config())
        before = [p.detach().clone() for p in model.parameters()]
        batch = torch.rand(2, 4, 1, 16, 16)
        metrics = trainer.train_step(batch)
        changed = any(not torch.equal(a, b) for a, b in
                      zip(before, model.parameters()))
        assert changed
        assert metrics.gan_P == 0.0 and metrics.lp == 0.0 and metrics.gan_D == 0.0
        assert metrics.total == pytest.approx(metrics.mse)

    def test_adversarial_updates_are_disjoint(self):
        model = build_model()
        torch.manual_seed(1)
        disc = Discriminator(1, 4, 16, 16)
        cfg = train_config(gamma1=0.01, gamma2=0.001, lr_discriminator=0.0)
        trainer = Trainer(model, cfg, disc=disc)
        d_before = [p.detach().clone() for p in disc.parameters()]
        p_before = [p.detach().clone() for p in model.parameters()]
        trainer.train_step(torch.rand(2, 4, 1, 16, 16))
        assert all(torch.equal(a, b) for a, b in
                   zip(d_before, disc.parameters()))
        assert any(not torch.equal(a, b) for a, b in
                   zip(p_before, model.parameters()))

    def test_adversarial_step_moves_both_and_restores_disc_grads(self):
        model = build_model()
        torch.manual_seed(1)
        disc = Discriminator(1, 4, 16, 16)
        cfg = train_config(gamma1=0.01, gamma2=0.001)
        trainer = Trainer(model, cfg, disc=disc)
        d_before = [p.detach().clone() for p in disc.parameters()]
        p_before = [p.detach().clone() for p in model.parameters()]
        metrics = trainer.train_step(torch.rand(2, 4, 1, 16, 16))
        assert any(not torch.equal(a, b) for a, b in
                   zip(p_before, model.parameters()))
        assert any(not torch.equal(a, b) for a, b in
                   zip(d_before, disc.parameters()))
        # the freeze used during the predictor update must not stick
        assert all(p.requires_grad for p in disc.parameters())
        assert metrics.gan_D > 0 and metrics.gan_P > 0 and metrics.lp > 0

    def test_gamma_without_discriminator_rejected(self):
        model = build_model()
        with pytest.raises(ValidationError):
            Trainer(model, train_config(gamma1=0.01))

    def test_window_shorter_than_horizons_rejected(self):
        trainer = Trainer(build_model(), train_config())
        with pytest.raises(ValidationError):
            trainer.train_step(torch.rand(2, 3, 1, 16, 16))

    def test_non_finite_batch_raises(self):
        trainer = Trainer(build_model(), train_config())
        batch = torch.rand(2, 4, 1, 16, 16)
        batch[0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(NumericError):
            trainer.train_step(batch)

    def test_deterministic_given_seed(self):
        def run():
            model = build_model(seed=7)
            torch.manual_seed(8)
            disc = Discriminator(1, 4, 16, 16)
            trainer = Trainer(model, train_config(gamma1=0.01, gamma2=0.001,
                                                  seed=5), disc=disc)
            batch = torch.from_numpy(
                np.random.default_rng(0).random((2, 4, 1, 16, 16),
                                                ).astype(np.float32))
            out = [trainer.train_step(batch).total for _ in range(3)]
            return out, [p.detach().clone() for p in model.parameters()]

        (m1, p1), (m2, p2) = run(), run()
        assert m1 == m2
        assert all(torch.equal(a, b) for a, b in zip(p1, p2))

    def test_teacher_forcing_feeds_ground_truth(self):
        """Every unroll step sees clips cut from the input batch, never
        from the model's own predictions."""
        model = build_model()
        trainer = Trainer(model, train_config())
        batch = torch.rand(1, 4, 1, 16, 16)
        seen = []
        orig_forward = model.forward

        def spy(clip, states, **kw):
            seen.append(clip.detach().clone())
            return orig_forward(clip, states, **kw)

        model.forward = spy
        trainer.train_step(batch)
        model.forward = orig_forward
        assert len(seen) == 3
        for t, clip in zip(range(1, 4), seen):
            assert torch.equal(clip, clip_at(batch, t, 2))

    def test_unroll_starts_from_zero_states(self):
        """The reported loss must match a manual teacher-forced unroll that
        starts from zero states, and differ from a warm-started one."""
        model = build_model(seed=9)
        frozen = copy.deepcopy(model)
        trainer = Trainer(model, train_config())
        batch = torch.rand(1, 4, 1, 16, 16)
        got = trainer.train_step(batch).mse

        def manual(states):
            total = 0.0
            with torch.no_grad():
                for t in range(1, 4):
                    pred, states = frozen(clip_at(batch, t, 2), states)
                    total += float(((batch[:, t] - pred) ** 2).mean())
            return total, states

        cold, end_states = manual(frozen.init_states(1, 16, 16))
        warm, _ = manual(end_states)
        assert got == pytest.approx(cold, rel=1e-5)
        assert abs(got - warm) > abs(got - cold)

    def test_supervise_tail_drops_warmup_terms(self):
        model = build_model()
        batch = torch.rand(1, 4, 1, 16, 16)
        m_full = Trainer(copy.deepcopy(model),
                         train_config(supervise="all")).train_step(batch).mse
        m_tail = Trainer(copy.deepcopy(model),
                         train_config(supervise="tail")).train_step(batch).mse
        # all-mode carries one extra (warmup) term, so it cannot be smaller
        # than tail-mode unless that term is exactly zero
        assert m_full > m_tail or m_tail == 0.0

    def test_overfits_single_batch(self, tmp_path):
        manifest = toy_manifest(tmp_path, n_seqs=1, t=4, size=16, seed=11)
        ds = SequenceDataset(manifest, window=4)
        model = build_model(model_config(hidden=16), seed=2)
        trainer = Trainer(model, train_config(lr_predictor=2e-3, steps=150))
        batch = ds.batch([0])
        first = trainer.train_step(batch).mse
        for _ in range(149):
            last = trainer.train_step(batch).mse
        assert last < first * 0.15


class TestFit:
    def test_writes_metrics_and_checkpoints(self, tmp_path):
        manifest = toy_manifest(tmp_path)
        ds = SequenceDataset(manifest, window=4)
        model = build_model()
        run_dir = tmp_path / "run"
        trainer = Trainer(model, train_config(steps=4, checkpoint_every=2))
        history = trainer.fit(ds, run_dir=str(run_dir))
        assert len(history) == 4
        csv_lines = (run_dir / "metrics.csv").read_text().strip().splitlines()
        assert csv_lines[0] == "step,mse,gan_P,gan_D,lp,total"
        assert len(csv_lines) == 5
        assert [r.split(",")[0] for r in csv_lines[1:]] == ["1", "2", "3", "4"]
        assert (run_dir / "checkpoints" / "step_2.ckpt").exists()
        assert (run_dir / "checkpoints" / "step_4.ckpt").exists()
        ckpt = load_checkpoint(run_dir / "checkpoints" / "step_4.ckpt")
        assert ckpt.step == 4

    def test_callback_early_stop(self, tmp_path):
        manifest = toy_manifest(tmp_path)
        ds = SequenceDataset(manifest, window=4)
        trainer = Trainer(build_model(), train_config(steps=50))
        calls = []

        def stop(step, bundle):
            calls.append(step)
            return step >= 3

        trainer.fit(ds, callback=stop)
        assert calls == [1, 2, 3]

    def test_zero_steps_writes_nothing(self, tmp_path):
        manifest = toy_manifest(tmp_path)
        ds = SequenceDataset(manifest, window=4)
        trainer = Trainer(build_model(), train_config(steps=0))
        run_dir = tmp_path / "run"
        trainer.fit(ds, run_dir=str(run_dir))
        assert not list(run_dir.glob("**/*.ckpt"))
        csv_lines = (run_dir / "metrics.csv").read_text().splitlines()
        assert csv_lines == ["step,mse,gan_P,gan_D,lp,total"]


class TestRollout:
    def test_frame_count_and_shape(self):
        model = build_model()
        context = torch.rand(2, 4, 1, 16, 16)
        preds = rollout(model, context, horizon=3)
        assert preds.shape == (2, 3, 1, 16, 16)

    def test_horizon_one(self):
        model = build_model()
        preds = rollout(model, torch.rand(1, 4, 1, 16, 16), horizon=1)
        assert preds.shape == (1, 1, 1, 16, 16)

    def test_autoregressive_composition(self):
        """Predictions past the context must come from feeding earlier
        predictions back through the clip window."""
        model = build_model(seed=3)
        context = torch.rand(1, 3, 1, 16, 16)
        preds = rollout(model, context, horizon=2)

        f = list(context.unbind(1))
        states = model.init_states(1, 16, 16)
        with torch.no_grad():
            _, states = model(torch.stack([f[0], f[0]], 1), states)   # t=1
            _, states = model(torch.stack([f[0], f[1]], 1), states)   # t=2
            p1, states = model(torch.stack([f[1], f[2]], 1), states)  # t=3
            p2, states = model(torch.stack([f[2], p1], 1), states)    # t=4
        assert torch.allclose(preds[:, 0], p1, atol=1e-6)
        assert torch.allclose(preds[:, 1], p2, atol=1e-6)

    def test_no_gradients_tracked(self):
        model = build_model()
        preds = rollout(model, torch.rand(1, 3, 1, 16, 16), horizon=2)
        assert not preds.requires_grad

    def test_degenerate_context_rejected(self):
        model = build_model()
        with pytest.raises(ValidationError):
            rollout(model, torch.rand(1, 0, 1, 16, 16), horizon=2)
        with pytest.raises(ValidationError):
            rollout(model, torch.rand(1, 3, 1, 16, 16), horizon=0)


class TestCheckpoint:
    def _setup(self, tmp_path, gamma=0.01):
        model = build_model(seed=5)
        torch.manual_seed(6)
        disc = Discriminator(1, 4, 16, 16)
        cfg = train_config(gamma1=gamma, gamma2=gamma / 10, steps=3)
        trainer = Trainer(model, cfg, disc=disc)
        batch = torch.rand(2, 4, 1, 16, 16)
        for _ in range(2):
            trainer.train_step(batch)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(str(path), model=model, train_config=cfg,
                        step=trainer.step, disc=disc,
                        opt_predictor=trainer.opt_predictor,
                        opt_discriminator=trainer.opt_discriminator,
                        rng_state=trainer.rng.bit_generator.state)
        return model, disc, cfg, path

    def test_roundtrip_bitwise(self, tmp_path):
        model, disc, _, path = self._setup(tmp_path)
        ckpt = load_checkpoint(str(path))
        model2, disc2 = build_from_checkpoint(ckpt)
        for a, b in zip(model.state_dict().values(),
                        model2.state_dict().values()):
            assert torch.equal(a, b)
        for a, b in zip(disc.state_dict().values(),
                        disc2.state_dict().values()):
            assert torch.equal(a, b)
        assert ckpt.step == 2

    def test_rollout_identical_after_reload(self, tmp_path):
        model, _, _, path = self._setup(tmp_path)
        model2, _ = build_from_checkpoint(load_checkpoint(str(path)))
        context = torch.rand(1, 4, 1, 16, 16)
        assert torch.equal(rollout(model, context, 3),
                           rollout(model2, context, 3))

    def test_training_resumes_identically(self, tmp_path):
        """Optimizer state survives the roundtrip: one more step on the
        restored trainer matches one more step on the original."""
        model, disc, cfg, path = self._setup(tmp_path)
        ckpt = load_checkpoint(str(path))
        model2, disc2 = build_from_checkpoint(ckpt)
        t1 = Trainer(model, cfg, disc=disc)
        t2 = Trainer(model2, cfg, disc=disc2)
        # carry over optimizer state; deepcopy because Adam keeps references
        # into the dict it is handed
        t1.opt_predictor.load_state_dict(copy.deepcopy(ckpt.opt_predictor_state))
        t1.opt_discriminator.load_state_dict(
            copy.deepcopy(ckpt.opt_discriminator_state))
        t2.opt_predictor.load_state_dict(copy.deepcopy(ckpt.opt_predictor_state))
        t2.opt_discriminator.load_state_dict(
            copy.deepcopy(ckpt.opt_discriminator_state))
        batch = torch.rand(2, 4, 1, 16, 16)
        m1 = t1.train_step(batch)
        m2 = t2.train_step(batch)
        assert m1.total == m2.total
        for a, b in zip(model.parameters(), model2.parameters()):
            assert torch.equal(a, b)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_checkpoint(str(tmp_path / "absent.pt"))

    def test_truncated_file(self, tmp_path):
        _, _, _, path = self._setup(tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.pt"
        torch.save([1, 2, 3], str(path))
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_unknown_version(self, tmp_path):
        _, _, _, path = self._setup(tmp_path)
        payload = torch.load(str(path), weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, str(path))
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_missing_key(self, tmp_path):
        _, _, _, path = self._setup(tmp_path)
        payload = torch.load(str(path), weights_only=False)
        del payload["model_state"]
        torch.save(payload, str(path))
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_mismatched_weights(self, tmp_path):
        _, _, _, path = self._setup(tmp_path)
        payload = torch.load(str(path), weights_only=False)
        payload["model_config"]["hidden"] = 16
        torch.save(payload, str(path))
        with pytest.raises(ValidationError):
            build_from_checkpoint(load_checkpoint(str(path)))

    def test_mse_only_checkpoint_has_no_disc(self, tmp_path):
        model = build_model()
        cfg = train_config()
        trainer = Trainer(model, cfg)
        trainer.train_step(torch.rand(2, 4, 1, 16, 16))
        path = tmp_path / "ckpt.pt"
        save_checkpoint(str(path), model=model, train_config=cfg,
                        step=1, disc=None,
                        opt_predictor=trainer.opt_predictor,
                        opt_discriminator=None,
                        rng_state=trainer.rng.bit_generator.state)
        _, disc = build_from_checkpoint(load_checkpoint(str(path)))
        assert disc is None
