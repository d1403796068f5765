import json
from pathlib import Path

import numpy as np
import pytest

from cbmi_nmt.corpus import FrequencyTable, SentencePair, make_batches
from cbmi_nmt.models import ModelConfig, init_params, load_checkpoint
from cbmi_nmt.tensor import Tensor
from cbmi_nmt.training import (
    AdamState,
    TrainConfig,
    Trainer,
    TrainingError,
    adam_update,
    clip_gradients,
    lr_schedule,
    teacher_forced_accuracy,
    train,
)
from cbmi_nmt.weighting import CbmiConfig, WeightScheme

VOCAB = 14


def toy_pairs(n=60, seed=0, copy=True):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        toks = list(map(int, rng.integers(4, VOCAB, size=int(rng.integers(2, 6)))))
        pairs.append(SentencePair(toks, list(toks) if copy else toks[::-1]))
    return pairs


def tiny_model_config(**overrides):
    defaults = dict(embed_dim=16, ff_dim=24, enc_layers=1, dec_layers=1, lm_layers=1, heads=2)
    defaults.update(overrides)
    return ModelConfig(VOCAB, VOCAB, **defaults)


def tiny_train_config(**overrides):
    defaults = dict(
        base_lr=0.02,
        warmup_steps=50,
        phase1_steps=4,
        phase2_steps=6,
        token_budget=64,
        seed=5,
        scheme=WeightScheme("none"),
        label_smoothing=0.1,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def read_metrics(out_dir):
    lines = (Path(out_dir) / "metrics.jsonl").read_text().splitlines()
    return [json.loads(line) for line in lines if '"event"' not in line]


class TestLrSchedule:
    def test_knee(self):
        assert lr_schedule(4000, 7e-4, 4000) == pytest.approx(7e-4 * 4000**-0.5, rel=1e-12)

    def test_linear_ramp_start(self):
        assert lr_schedule(1, 7e-4, 4000) == pytest.approx(7e-4 * 4000**-1.5, rel=1e-12)

    def test_monotone_decay_after_knee(self):
        values = [lr_schedule(s, 1e-3, 100) for s in range(100, 500)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_ramp_is_increasing(self):
        values = [lr_schedule(s, 1e-3, 100) for s in range(1, 100)]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(0, 1e-3, 100)


class TestAdam:
    def test_zero_gradient_fresh_state_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        tensors = {"p": p}
        state = AdamState.for_params(tensors)
        adam_update(tensors, state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        p.grad = np.array([1.0])
        tensors = {"p": p}
        state = AdamState.for_params(tensors)
        adam_update(tensors, state, lr=0.1)
        assert p.data[0] == pytest.approx(3.0 - 0.1, abs=1e-6)

    def test_two_runs_bitwise_identical(self):
        def run():
            rng = np.random.default_rng(3)
            p = Tensor(np.array([0.5, 1.5]), requires_grad=True)
            tensors = {"p": p}
            state = AdamState.for_params(tensors)
            for _ in range(5):
                p.grad = rng.normal(size=2)
                adam_update(tensors, state, lr=0.01)
            return p.data.copy(), state.m["p"].copy(), state.v["p"].copy()

        (p1, m1, v1), (p2, m2, v2) = run(), run()
        assert (p1 == p2).all() and (m1 == m2).all() and (v1 == v2).all()

    def test_clip_gradients(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 3.0)
        norm = clip_gradients({"p": p}, max_norm=1.0)
        assert norm == pytest.approx(6.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-9)

    def test_clip_disabled(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 3.0)
        clip_gradients({"p": p}, max_norm=0.0)
        np.testing.assert_array_equal(p.grad, np.full(4, 3.0))


class TestTrainRuns:
    def test_metrics_log_deterministic(self, tmp_path):
        pairs = toy_pairs()
        cfg = tiny_train_config(scheme=WeightScheme("cbmi"))
        mc = tiny_model_config()
        train(cfg, mc, pairs, tmp_path / "a")
        train(cfg, mc, pairs, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (
            tmp_path / "b" / "metrics.jsonl"
        ).read_bytes()

    def test_zero_scale_cbmi_equals_none(self, tmp_path):
        pairs = toy_pairs()
        mc = tiny_model_config()
        cfg_none = tiny_train_config(scheme=WeightScheme("none"))
        cfg_cbmi = tiny_train_config(
            scheme=WeightScheme("cbmi", cbmi=CbmiConfig(scale_t=0.0, scale_s=0.0))
        )
        train(cfg_none, mc, pairs, tmp_path / "none")
        train(cfg_cbmi, mc, pairs, tmp_path / "cbmi")
        none_losses = [m["nmt_loss"] for m in read_metrics(tmp_path / "none")]
        cbmi_losses = [m["nmt_loss"] for m in read_metrics(tmp_path / "cbmi")]
        np.testing.assert_allclose(none_losses, cbmi_losses, atol=1e-6)

    def test_huge_counts_make_freq_exp_match_none(self, tmp_path):
        pairs = toy_pairs()
        mc = tiny_model_config()
        freq = FrequencyTable(np.full(VOCAB, 10_000, dtype=np.int64))
        cfg_freq = tiny_train_config(scheme=WeightScheme("freq_exp"))
        cfg_none = tiny_train_config(scheme=WeightScheme("none"))
        train(cfg_none, mc, pairs, tmp_path / "none")
        train(cfg_freq, mc, pairs, tmp_path / "freq", freq_table=freq)
        none_losses = [m["nmt_loss"] for m in read_metrics(tmp_path / "none")]
        freq_losses = [m["nmt_loss"] for m in read_metrics(tmp_path / "freq")]
        np.testing.assert_allclose(none_losses, freq_losses, atol=1e-4)

    def test_lm_parameters_independent_of_scheme(self, tmp_path):
        pairs = toy_pairs()
        mc = tiny_model_config()
        finals = {}
        for kind in ("cbmi", "lm_prior", "prior_select"):
            cfg = tiny_train_config(scheme=WeightScheme(kind), phase1_steps=2, phase2_steps=3)
            ckpt = train(cfg, mc, pairs, tmp_path / kind)
            params, _, _ = load_checkpoint(ckpt)
            finals[kind] = {k: t.data for k, t in params.tensors.items() if k.startswith("lm.")}
        for kind in ("lm_prior", "prior_select"):
            for name in finals["cbmi"]:
                np.testing.assert_array_equal(finals["cbmi"][name], finals[kind][name])

    def test_phase_one_forces_unit_weights(self, tmp_path):
        pairs = toy_pairs()
        cfg = tiny_train_config(
            scheme=WeightScheme("cbmi", cbmi=CbmiConfig(0.1, 0.3)), phase1_steps=5, phase2_steps=5
        )
        train(cfg, tiny_model_config(), pairs, tmp_path / "run")
        for metric in read_metrics(tmp_path / "run"):
            if metric["phase"] == 1:
                assert metric["weight_mean"] == 1.0
                assert metric["weight_min"] == 1.0
                assert metric["weight_max"] == 1.0
            else:
                assert metric["weight_max"] != 1.0 or metric["weight_min"] != 1.0

    def test_nmt_trajectory_same_with_and_without_lm(self, tmp_path):
        # cbmi at zero scales trains an LM alongside; scheme none does not.
        # The NMT parameter trajectory must match bitwise either way.
        pairs = toy_pairs()
        mc = tiny_model_config()
        ckpt_a = train(tiny_train_config(scheme=WeightScheme("none")), mc, pairs, tmp_path / "a")
        ckpt_b = train(
            tiny_train_config(scheme=WeightScheme("cbmi", cbmi=CbmiConfig(0.0, 0.0))),
            mc,
            pairs,
            tmp_path / "b",
        )
        params_a, _, _ = load_checkpoint(ckpt_a)
        params_b, _, _ = load_checkpoint(ckpt_b)
        for name, tensor in params_a.tensors.items():
            if name.startswith("nmt."):
                np.testing.assert_array_equal(tensor.data, params_b.tensors[name].data)

    def test_resume_is_bitwise_identical(self, tmp_path):
        pairs = toy_pairs()
        mc = tiny_model_config()
        cfg = tiny_train_config(
            scheme=WeightScheme("cbmi"), phase1_steps=3, phase2_steps=5, checkpoint_every=4
        )
        train(cfg, mc, pairs, tmp_path / "full")
        full = read_metrics(tmp_path / "full")

        cfg_half = tiny_train_config(
            scheme=WeightScheme("cbmi"), phase1_steps=3, phase2_steps=1, checkpoint_every=4
        )
        train(cfg_half, mc, pairs, tmp_path / "half")
        resumed_dir = tmp_path / "resumed"
        train(
            cfg,
            mc,
            pairs,
            resumed_dir,
            resume=tmp_path / "half" / "checkpoint_step4",
        )
        resumed = read_metrics(resumed_dir)
        assert [m["step"] for m in resumed] == [5, 6, 7, 8]
        by_step = {m["step"]: m for m in full}
        for metric in resumed:
            assert metric == by_step[metric["step"]]

    def test_final_checkpoint_and_metrics_written(self, tmp_path):
        pairs = toy_pairs()
        ckpt = train(tiny_train_config(), tiny_model_config(), pairs, tmp_path / "run")
        assert ckpt.name == "checkpoint_final"
        assert (ckpt / "manifest.txt").exists()
        metrics = read_metrics(tmp_path / "run")
        assert len(metrics) == 10
        assert (tmp_path / "run" / "timing.log").exists()

    def test_checkpoint_retention(self, tmp_path):
        pairs = toy_pairs()
        cfg = tiny_train_config(
            phase1_steps=6, phase2_steps=0, checkpoint_every=2, keep_checkpoints=2
        )
        train(cfg, tiny_model_config(), pairs, tmp_path / "run")
        kept = sorted(p.name for p in (tmp_path / "run").glob("checkpoint_step*"))
        assert kept == ["checkpoint_step4", "checkpoint_step6"]

    def test_divergence_dumps_batch(self, tmp_path):
        pairs = toy_pairs()
        cfg = tiny_train_config(base_lr=1e28, clip_norm=0.0, phase1_steps=30, phase2_steps=0)
        with pytest.raises(TrainingError, match="dumped"):
            train(cfg, tiny_model_config(), pairs, tmp_path / "run")
        assert list((tmp_path / "run").glob("divergence_step*.json"))

    def test_vocab_mismatch_on_resume(self, tmp_path):
        pairs = toy_pairs()
        mc = tiny_model_config()
        cfg = tiny_train_config(phase1_steps=2, phase2_steps=0)
        ckpt = train(cfg, mc, pairs, tmp_path / "run", checkpoint_meta={"vocab_tgt_hash": "aaa"})
        with pytest.raises(TrainingError, match="vocab"):
            Trainer(
                cfg, mc, pairs, tmp_path / "other",
                resume=ckpt, checkpoint_meta={"vocab_tgt_hash": "bbb"},
            )

    def test_weight_dump_written(self, tmp_path):
        pairs = toy_pairs()
        cfg = tiny_train_config(scheme=WeightScheme("cbmi"), phase1_steps=2, phase2_steps=2)
        train(
            cfg, tiny_model_config(), pairs, tmp_path / "run",
            dump_weights_path=tmp_path / "weights.tsv",
        )
        lines = (tmp_path / "weights.tsv").read_text().splitlines()
        assert lines, "phase-2 cbmi steps should dump weight lines"
        first = lines[0].split("\t")
        assert len(first) == 8 and first[0] == "3"  # first phase-2 step

    def test_empty_corpus_rejected(self, tmp_path):
        with pytest.raises(TrainingError, match="empty"):
            Trainer(tiny_train_config(), tiny_model_config(), [], tmp_path / "x")


class TestGradientEquivalence:
    def test_cbmi_gradient_equals_weighted_per_token_gradients(self):
        """For a fixed batch, the gradient under the cbmi scheme equals the
        weight-scaled sum of per-token CE gradients computed independently."""
        from cbmi_nmt import tensor as T
        from cbmi_nmt.models import nmt_forward
        from cbmi_nmt.tensor import Tape

        mc = tiny_model_config()
        pairs = toy_pairs(8)
        batch = make_batches(pairs, 64, seed=0)[0]
        params = init_params(mc, seed=9, dtype=np.float64)
        rng = np.random.default_rng(4)
        weights = rng.uniform(0.3, 1.7, size=batch.tgt_out.shape) * batch.tgt_mask
        b, t = batch.tgt_out.shape
        flat_targets = batch.tgt_out.reshape(-1)
        flat_weights = weights.reshape(-1)

        def grads_for(w):
            for p in params.tensors.values():
                p.zero_grad()
            with Tape() as tape:
                out = nmt_forward(params, batch.src, batch.tgt_in)
                flat = T.reshape(out, (b * t, mc.vocab_size_tgt))
                loss = T.weighted_cross_entropy(flat, flat_targets, w, 0.1)
                tape.backward(loss)
            return {
                k: p.grad.copy() for k, p in params.tensors.items()
                if k.startswith("nmt.") and p.grad is not None
            }

        combined = grads_for(flat_weights)
        accumulated = None
        for j in range(b * t):
            if flat_weights[j] == 0.0:
                continue
            one = np.zeros(b * t)
            one[j] = flat_weights[j]
            gj = grads_for(one)
            if accumulated is None:
                accumulated = gj
            else:
                for name in accumulated:
                    accumulated[name] += gj[name]
        # relative to the overall gradient scale: key-projection biases have
        # mathematically zero gradient (a shared key offset cancels in the
        # softmax), so per-tensor normalization would compare pure noise
        global_scale = max(np.abs(g).max() for g in combined.values())
        for name, grad in combined.items():
            np.testing.assert_allclose(
                grad, accumulated[name], atol=1e-6 * global_scale, rtol=1e-6
            )


class TestSmokeCopyTask:
    def test_copy_task_reaches_accuracy(self, tmp_path):
        # pilot-calibrated fixture: a 200-pair copy corpus over a shared
        # vocabulary trains to >0.9 teacher-forced accuracy within 500 steps
        rng = np.random.default_rng(0)
        vocab = 16
        pairs = []
        for _ in range(200):
            toks = list(map(int, rng.integers(4, vocab, size=int(rng.integers(2, 7)))))
            pairs.append(SentencePair(toks, list(toks)))
        mc = ModelConfig(vocab, vocab, embed_dim=32, ff_dim=64, enc_layers=2,
                         dec_layers=2, lm_layers=2, heads=4, share_vocab=True)
        cfg = TrainConfig(
            base_lr=0.03, warmup_steps=100, phase1_steps=500, phase2_steps=0,
            token_budget=256, seed=3, scheme=WeightScheme("none"), label_smoothing=0.1,
        )
        trainer = Trainer(cfg, mc, pairs, tmp_path / "copy")
        trainer.run()
        batches = make_batches(pairs, 256, seed=0)
        accuracy = teacher_forced_accuracy(trainer.state.params, batches)
        assert accuracy > 0.9
