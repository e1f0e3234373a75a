import shutil
from dataclasses import replace

import numpy as np
import pytest

from codistill import autodiff as ad
from codistill.corpus import SyntheticCorpusConfig, synth_corpus
from codistill.encoder import embed_codes, encode
from codistill.errors import AlignmentError, CheckpointError, ConfigError
from codistill.objectives import MetricsLog
from codistill.pipeline import (
    AlignmentMap,
    BatchSampler,
    BootstrapConfig,
    Example,
    TrainConfig,
    Trainer,
    ablation_matrix,
    aligned_length,
    bootstrap_codes,
    layer_features,
    load_network,
    make_batches,
    network_inputs,
    save_network,
)
from codistill.quantizer import assign_codes, kmeans_fit

TINY = dict(num_layers=2, model_dim=16, num_heads=2, ffn_dim=32, dropout=0.0, total_updates=6,
            batch_frames=160, max_positions=64, log_every=1)


@pytest.fixture(scope="module")
def examples():
    utts = synth_corpus(SyntheticCorpusConfig(num_utterances=12, min_frames=20, max_frames=40, seed=1))
    cb = kmeans_fit(np.concatenate([u.frames for u in utts]), 6, seed=0)
    return [Example(u.utt_id, u.frames, assign_codes(cb, u.frames).codes, u.phones) for u in utts]


def cfg(mode, **kw):
    return TrainConfig.for_mode(mode, **{**TINY, **kw})


@pytest.fixture(scope="module")
def code_teacher(examples):
    return Trainer(cfg("teacher1"), examples, 6).run()


class TestConfig:
    def test_mode_defaults(self):
        t1 = TrainConfig.for_mode("teacher1")
        assert (t1.objective, t1.frontend, t1.mask_prob, t1.lr_schedule) == ("mlm", "code", 0.08, "warmup_linear")
        t2 = TrainConfig.for_mode("teacher2")
        assert (t2.objective, t2.mask_prob, t2.lr_schedule) == ("self_distill", 0.065, "tri_stage")
        hb = TrainConfig.for_mode("hubert-like")
        assert (hb.objective, hb.frontend, hb.mask_prob) == ("mlm", "speech", 0.08)
        cb = TrainConfig.for_mode("cobert")
        assert (cb.objective, cb.frontend, cb.mask_prob, cb.alpha, cb.mask_span) == ("cobert", "speech", 0.065, 0.5, 10)
        assert cb.peak_lr == 5e-4 and cb.resolved_top_layers == 2

    def test_effective_alpha(self):
        base = TrainConfig.for_mode("cobert")
        assert base.effective_alpha == 0.5
        assert replace(base, self_distill=False).effective_alpha == 1.0
        assert replace(base, code_branch=False).effective_alpha == 0.0

    @pytest.mark.parametrize(
        "kw,key",
        [(dict(alpha=1.5), "alpha"), (dict(top_layers=5), "top_layers"), (dict(mask_prob=2.0), "mask_prob"),
         (dict(frontend="code"), "frontend"), (dict(lr_schedule="x"), "lr_schedule"),
         (dict(self_distill=False, code_branch=False), "code_branch"), (dict(num_heads=3), "num_heads")],
    )
    def test_validation(self, kw, key):
        with pytest.raises(ConfigError) as info:
            TrainConfig.for_mode("cobert", **kw).validate()
        assert info.value.key == key

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            TrainConfig.for_mode("bert")


class TestAlignment:
    def test_truncate_off_by_one(self):
        assert AlignmentMap(20, 10, downsample=2).length == 10
        assert AlignmentMap(21, 10, downsample=2).length == 10
        assert AlignmentMap(10, 11).length == 10

    def test_mismatch_raises_with_utt_id(self):
        ex = Example("uttX", np.zeros((10, 2)), np.zeros(13, int))
        with pytest.raises(AlignmentError, match="uttX"):
            aligned_length(ex, True, True, 1)

    def test_batches_have_equal_streams_and_shared_mask(self, examples):
        ragged = [replace(ex, codes=ex.codes[:-1]) if i % 2 else ex for i, ex in enumerate(examples)]
        sampler = BatchSampler(ragged, cfg("hubert-like"), uses_frames=True, uses_codes=True)
        for step in range(5):
            b = sampler.batch(step)
            assert b.codes.shape == b.mask.shape
            assert b.frames.shape[:2] == b.mask.shape

    def test_make_batches_budget(self):
        lengths = [30, 10, 25, 40, 12, 33]
        batches = make_batches(lengths, 60)
        assert sorted(i for b in batches for i in b) == list(range(6))
        for b in batches:
            assert len(b) == 1 or len(b) * min(lengths[i] for i in b) <= 60


class TestTraining:
    def test_zero_mask_gives_zero_loss_and_gradient(self, examples):
        tr = Trainer(cfg("teacher1", mask_prob=0.0), examples, 6)
        grads, report = tr.gradients(0)
        assert report.L_mlm == 0.0 and report.masked == 0
        assert all(g is None or not np.any(g) for g in grads.values())

    def test_frozen_batch_loss_decreases(self, examples):
        tr = Trainer(cfg("teacher1", mask_prob=0.3, mask_span=2, total_updates=50), examples, 6)
        batch = tr.sampler.batch(0)
        params = tr.network.parameters()
        losses = []
        for _ in range(50):
            for p in params.values():
                p.grad = None
            loss, _ = tr.loss(batch, 0)
            loss.backward()
            losses.append(loss.item())
            ad.adam_step(params, {k: p.grad for k, p in params.items()}, tr.adam, lr=1e-3)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_teacher1_beats_chance(self, examples):
        tr = Trainer(cfg("teacher1", total_updates=200, peak_lr=3e-3, mask_prob=0.2, mask_span=2), examples, 6)
        tr.run()
        net = tr.network
        correct = total = 0
        for step in range(20):
            b = tr.sampler.batch(1000 + step)
            with ad.no_grad():
                stack = encode(net.encoder, network_inputs(net, codes=b.codes, mask=b.mask))
                pred = net.heads["mlm"](stack.final).data.argmax(-1)
            correct += int((pred[b.mask] == b.codes[b.mask]).sum())
            total += int(b.mask.sum())
        assert correct / total > 2.0 / 6

    def test_teacher2_ema_isolation_and_convergence(self, examples):
        tr = Trainer(cfg("teacher2", total_updates=60, peak_lr=2e-3, mask_prob=0.2, mask_span=3), examples, 6)
        before = {k: v.copy() for k, v in tr.ema.teacher.items()}
        grads, start = tr.gradients(0)
        for k, v in tr.ema.teacher.items():
            assert v.tobytes() == before[k].tobytes()
        tr.run()
        _, end = tr.gradients(0)
        assert end.L_sd < start.L_sd

    def test_teacher2_tau_one_stays_finite(self, examples):
        tr = Trainer(cfg("teacher2", ema_tau_start=1.0, ema_tau_end=1.0, total_updates=10), examples, 6)
        before = {k: v.copy() for k, v in tr.ema.teacher.items()}
        tr.run()
        for k in before:
            np.testing.assert_array_equal(tr.ema.teacher[k], before[k])
        assert np.isfinite(tr.gradients(0)[1].L_sd)

    def test_cobert_requires_teacher(self, examples):
        with pytest.raises(CheckpointError):
            Trainer(cfg("cobert"), examples, 6)

    def test_cobert_teacher_frozen(self, examples, code_teacher):
        snap = {k: p.data.copy() for k, p in code_teacher.parameters().items()}
        Trainer(cfg("cobert"), examples, 6, teacher=code_teacher).run()
        for k, p in code_teacher.parameters().items():
            assert p.data.tobytes() == snap[k].tobytes()
            assert p.grad is None and not p.requires_grad

    def test_cobert_alpha_one_equals_no_speech_branch(self, examples, code_teacher):
        a = Trainer(cfg("cobert", alpha=1.0), examples, 6, teacher=code_teacher)
        b = Trainer(cfg("cobert", self_distill=False), examples, 6, teacher=code_teacher)
        for step in range(3):
            ga, ra = a.gradients(step)
            gb, rb = b.gradients(step)
            assert ra.L_CoBERT == rb.L_CoBERT
            for k, g in gb.items():
                assert g.tobytes() == ga[k].tobytes(), k
            assert not np.any(ga["head.speech.weight"])
            a.train_step()
            b.train_step()

    def test_float32_training(self, examples):
        tr = Trainer(cfg("teacher1", dtype="float32", total_updates=3), examples, 6)
        tr.run()
        assert all(p.data.dtype == np.float32 for p in tr.network.parameters().values())


class TestCheckpoints:
    def test_round_trip_bitwise_forward(self, tmp_path, examples, code_teacher):
        save_network(tmp_path / "ck" / "network", code_teacher)
        back = load_network(tmp_path / "ck")
        ex = examples[0]
        a = layer_features(code_teacher, ex)
        b = layer_features(back, ex)
        assert a.tobytes() == b.tobytes()
        assert back.meta["num_codes"] == "6"

    def test_resume_matches_uninterrupted(self, tmp_path, examples):
        full = Trainer(cfg("teacher2", total_updates=8, checkpoint_every=4, dropout=0.1), examples, 6,
                       out_dir=tmp_path / "full")
        full.run()
        part = Trainer(cfg("teacher2", total_updates=8, checkpoint_every=4, dropout=0.1), examples, 6,
                       out_dir=tmp_path / "part")
        part.run()
        # interruption after step 4
        shutil.rmtree(tmp_path / "part" / "checkpoints" / "step_8")
        resumed = Trainer(cfg("teacher2", total_updates=8, checkpoint_every=4, dropout=0.1), examples, 6,
                          out_dir=tmp_path / "part")
        resumed.run(resume_from=tmp_path / "part" / "checkpoints" / "step_4")
        assert (tmp_path / "part" / "metrics.log").read_bytes() == (tmp_path / "full" / "metrics.log").read_bytes()
        steps = sorted({s for s, _, _ in MetricsLog(tmp_path / "part" / "metrics.log").read()})
        assert steps == list(range(1, 9))
        for k, p in full.network.parameters().items():
            assert p.data.tobytes() == resumed.network.parameters()[k].data.tobytes()

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_network(tmp_path)


class TestFeatures:
    def test_layer_features_equal_direct_encode(self, examples, code_teacher):
        ex = examples[3]
        enc = code_teacher.encoder
        stack = encode(enc, embed_codes(enc, ex.codes))
        np.testing.assert_array_equal(layer_features(code_teacher, ex, 2), stack.layers[1].data)
        np.testing.assert_array_equal(layer_features(code_teacher, ex, "final"), stack.final.data)
        with pytest.raises(ConfigError):
            layer_features(code_teacher, ex, 3)


class TestBootstrap:
    def test_zero_noise_first_iteration_pure(self):
        utts = synth_corpus(SyntheticCorpusConfig(num_phones=4, num_utterances=6, noise_scale=0.0, min_frames=20,
                                                  max_frames=30, mean_spread=5.0))
        ex = [Example(u.utt_id, u.frames, None, u.phones) for u in utts]
        res = bootstrap_codes(ex, BootstrapConfig(K=4, layer=1, train=cfg("hubert-like", total_updates=3)))
        assert res.quality1.phone_purity == 1.0
        assert set(res.codes2) == {u.utt_id for u in utts}

    def test_deterministic_code_files(self, tmp_path, examples):
        ex = [replace(e, codes=None) for e in examples[:6]]
        conf = BootstrapConfig(K=4, layer=1, train=cfg("hubert-like", total_updates=3))
        bootstrap_codes(ex, conf, out_dir=tmp_path / "a")
        bootstrap_codes(ex, conf, out_dir=tmp_path / "b")
        for sub in ("codes/it1", "codes/it2"):
            for f in sorted((tmp_path / "a" / sub).iterdir()):
                assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
        assert (tmp_path / "a" / "codebooks" / "it2.tnsr").read_bytes() == (
            tmp_path / "b" / "codebooks" / "it2.tnsr"
        ).read_bytes()


class TestAblation:
    def test_six_rows_and_repeatable(self, examples, code_teacher):
        speech = Trainer(cfg("hubert-like"), examples, 6).run()
        teachers = {"hubert-like": speech, "teacher1": code_teacher, "teacher1b": code_teacher}
        conf = cfg("cobert", total_updates=2)
        rows = ablation_matrix(examples, teachers, conf)
        assert len(rows) == 6
        assert [(r.teacher, r.self_distill) for r in rows[:3]] == [(n, False) for n in teachers]
        again = ablation_matrix(examples, {"teacher1": code_teacher}, conf)
        assert again[0].probe_accuracy == rows[1].probe_accuracy
        assert rows[1].tsv_row().startswith("teacher1\tno\t")
