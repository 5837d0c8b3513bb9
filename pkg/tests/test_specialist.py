import math

import numpy as np
import pytest

from panelroute.events import PAD_ID
from panelroute.specialist import (
    AdamW,
    SpecialistConfig,
    SpecialistError,
    SpecialistModel,
    TrainConfig,
    clip_global_norm,
    cross_entropy,
    iter_batches,
    lr_schedule,
    pad_batch,
    paper_scale_config,
    perplexity_from_loss,
    train,
    unigram_entropy,
    write_curve_csv,
)


def tiny_model(vocab=12, layers=1, d=8, heads=2, dropout=0.0, seed=0, max_positions=16):
    cfg = SpecialistConfig(vocab_size=vocab, layers=layers, d_model=d, heads=heads,
                           dropout=dropout, max_positions=max_positions)
    return SpecialistModel(cfg, seed=seed)


class TestCrossEntropy:
    def test_uniform_logits_v10(self):
        logits = np.zeros((1, 3, 10))
        targets = np.array([[4, 5, 6]])
        loss, _ = cross_entropy(logits, targets)
        assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_one_hot_large_margin_near_zero(self):
        logits = np.full((1, 2, 6), -50.0)
        logits[0, 0, 4] = 50.0
        logits[0, 1, 5] = 50.0
        loss, _ = cross_entropy(logits, np.array([[4, 5]]))
        assert loss < 1e-9

    def test_two_token_hand_softmax(self):
        logits = np.array([[[1.0, 2.0]]])
        loss, dlogits = cross_entropy(logits, np.array([[1]]))
        p = np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum()
        assert loss == pytest.approx(-math.log(p[1]), abs=1e-9)
        assert dlogits[0, 0] == pytest.approx([p[0], p[1] - 1.0], abs=1e-12)

    def test_pad_positions_excluded(self):
        logits = np.zeros((1, 3, 4))
        logits[0, 0, 1] = 3.0
        targets = np.array([[1, PAD_ID, PAD_ID]])
        loss, dlogits = cross_entropy(logits, targets)
        assert np.all(dlogits[0, 1:] == 0)

    def test_all_pad_rejected(self):
        with pytest.raises(SpecialistError):
            cross_entropy(np.zeros((1, 2, 4)), np.full((1, 2), PAD_ID))


class TestLrSchedule:
    def test_end_of_warmup_equals_peak(self):
        total = 1000
        warmup = round(0.05 * total)
        assert lr_schedule(warmup - 1, total, 1e-3) == pytest.approx(1e-3)
        assert lr_schedule(warmup, total, 1e-3) == pytest.approx(1e-3)

    def test_final_step_is_floor(self):
        assert lr_schedule(999, 1000, 1e-3) == pytest.approx(1e-4, abs=1e-6 * 1e-3)

    def test_warmup_is_linear(self):
        total = 200  # warmup = 10 steps
        lrs = [lr_schedule(s, total, 1.0) for s in range(10)]
        assert np.allclose(np.diff(lrs), 0.1)

    def test_never_exceeds_peak(self):
        for s in range(500):
            assert lr_schedule(s, 500, 1e-3) <= 1e-3 + 1e-15


class TestForward:
    def test_single_token_one_logit_row(self):
        model = tiny_model()
        logits, _ = model.forward(np.array([[4]]))
        assert logits.shape == (1, 1, 12)

    def test_causality_exact(self):
        model = tiny_model(seed=3)
        base = np.array([[2, 4, 5, 6, 7]])
        logits, _ = model.forward(base)
        for t in range(1, 5):
            perturbed = base.copy()
            perturbed[0, t] = (perturbed[0, t] + 3) % 12
            logits2, _ = model.forward(perturbed)
            assert np.array_equal(logits[0, :t], logits2[0, :t])

    def test_bitwise_stable_across_runs(self):
        a = tiny_model(seed=5)
        b = tiny_model(seed=5)
        ids = np.array([[2, 4, 5, 3]])
        assert np.array_equal(a.forward(ids)[0], b.forward(ids)[0])

    def test_tied_embeddings_share_storage(self):
        model = tiny_model()
        ids = np.array([[2, 4]])
        before, _ = model.forward(ids)
        model.params["tok_emb"] = model.params["tok_emb"] * 2.0
        after, _ = model.forward(ids)
        assert "out_proj" not in model.params  # single tied matrix
        assert not np.allclose(before, after)

    def test_length_and_vocab_bounds_checked(self):
        model = tiny_model(max_positions=4)
        with pytest.raises(SpecialistError):
            model.forward(np.zeros((1, 5), dtype=int))
        with pytest.raises(SpecialistError):
            model.forward(np.array([[99]]))

    def test_invalid_head_split_rejected(self):
        with pytest.raises(SpecialistError):
            SpecialistConfig(vocab_size=10, d_model=10, heads=3)

    def test_paper_scale_preset_shape(self):
        cfg = paper_scale_config(100)
        assert (cfg.layers, cfg.d_model, cfg.heads) == (6, 256, 4)


class TestLora:
    def test_attach_is_output_invariant(self):
        model = tiny_model(seed=1)
        ids = np.array([[2, 4, 5]])
        before, _ = model.forward(ids)
        model.attach_lora(rank=2, alpha=8.0)
        after, _ = model.forward(ids)
        assert np.array_equal(before, after)

    def test_merge_matches_adapted_forward(self):
        model = tiny_model(seed=2)
        model.attach_lora(rank=2, alpha=4.0)
        rng = np.random.default_rng(0)
        for key, (a, b) in model.adapters.items():
            model.adapters[key] = (a, rng.normal(0, 0.05, size=b.shape))
        ids = np.array([[2, 4, 5, 6]])
        adapted, _ = model.forward(ids)
        model.merge_lora()
        merged, _ = model.forward(ids)
        assert np.allclose(adapted, merged, atol=1e-6)

    def test_parameter_census_much_smaller(self):
        model = tiny_model(vocab=50, layers=2, d=64, heads=2)
        model.attach_lora(rank=4)
        assert model.parameter_count() > 10 * model.lora_parameter_count()

    def test_rank_above_d_model_rejected(self):
        model = tiny_model(d=8, heads=2)
        with pytest.raises(SpecialistError):
            model.attach_lora(rank=16)

    def test_merge_without_adapters_rejected(self):
        with pytest.raises(SpecialistError):
            tiny_model().merge_lora()


class TestSuggest:
    def test_k1_equals_argmax(self):
        model = tiny_model(seed=4)
        ids = [2, 4, 5]
        logits, _ = model.forward(np.array([ids]))
        top = model.suggest(ids, k=1)
        assert top[0][0] == int(np.argmax(logits[0, -1]))

    def test_temperature_preserves_topk_order(self):
        model = tiny_model(seed=4)
        ids = [2, 4, 5, 6]
        cold = [t for t, _ in model.suggest(ids, k=5)]
        model.temperature = 3.0
        warm = [t for t, _ in model.suggest(ids, k=5)]
        assert cold == warm

    def test_probs_sum_below_one(self):
        model = tiny_model()
        top = model.suggest([2, 4], k=3)
        assert 0 < sum(p for _, p in top) <= 1.0 + 1e-12


class TestBatches:
    def test_pad_batch_shifts_targets(self):
        ids, targets = pad_batch([[2, 4, 5, 3], [2, 6, 3]])
        assert ids.shape == (2, 3)
        assert ids[0].tolist() == [2, 4, 5]
        assert targets[0].tolist() == [4, 5, 3]
        assert ids[1].tolist() == [2, 6, PAD_ID]
        assert targets[1].tolist() == [6, 3, PAD_ID]

    def test_iter_batches_covers_all(self):
        seqs = [[2, i, 3] for i in range(4, 11)]
        n = sum(ids.shape[0] for ids, _ in iter_batches(seqs, 3))
        assert n == 7

    def test_unigram_entropy_hand_case(self):
        # targets: 4,4,5 -> p = (2/3, 1/3)
        seqs = [[2, 4, 4], [2, 5]]
        expected = -(2 / 3 * math.log(2 / 3) + 1 / 3 * math.log(1 / 3))
        assert unigram_entropy(seqs) == pytest.approx(expected, abs=1e-12)


class TestOptimizer:
    def test_clip_global_norm_scales_down(self):
        g = [np.full(4, 3.0)]
        total = clip_global_norm(g, 1.0)
        assert total == pytest.approx(6.0)
        assert np.linalg.norm(g[0]) == pytest.approx(1.0, abs=1e-9)

    def test_clip_noop_below_threshold(self):
        g = [np.full(4, 0.1)]
        clip_global_norm(g, 10.0)
        assert np.all(g[0] == 0.1)

    def test_adamw_decays_only_listed_keys(self):
        params = {"w": np.ones(3), "b": np.ones(3)}
        grads = {"w": np.zeros(3), "b": np.zeros(3)}
        opt = AdamW(weight_decay=0.5)
        opt.step(params, grads, lr=0.1, decay_keys={"w"})
        assert np.all(params["w"] < 1.0)
        assert np.all(params["b"] == 1.0)


class TestTraining:
    def make_corpus(self, n=60, seed=0):
        # deterministic bigram chains over a tiny vocabulary
        rng = np.random.default_rng(seed)
        succ = {4: 5, 5: 6, 6: 7, 7: 4, 8: 9, 9: 8}
        seqs = []
        for _ in range(n):
            tok = int(rng.choice([4, 8]))
            seq = [2, tok]
            for _ in range(8):
                tok = succ[tok]
                seq.append(tok)
            seq.append(3)
            seqs.append(seq)
        return seqs

    def test_dev_loss_improves_and_beats_unigram(self):
        seqs = self.make_corpus()
        model = tiny_model(vocab=12, layers=1, d=32, heads=2)
        cfg = TrainConfig(epochs=10, batch_size=8, seed=0)
        curve = train(model, seqs[:48], seqs[48:], cfg)
        assert curve[-1]["dev_loss"] < curve[0]["dev_loss"]
        assert curve[-1]["dev_loss"] < unigram_entropy(seqs[:48])

    def test_best_checkpoint_restored(self):
        seqs = self.make_corpus(seed=1)
        model = tiny_model(vocab=12, layers=1, d=16, heads=2)
        curve = train(model, seqs[:48], seqs[48:], TrainConfig(epochs=3, batch_size=8))
        best = min(r["dev_loss"] for r in curve)
        assert model.eval_loss(seqs[48:]) == pytest.approx(best, abs=1e-9)

    def test_model_learns_bigram_structure(self):
        seqs = self.make_corpus(n=80, seed=2)
        model = tiny_model(vocab=12, layers=1, d=32, heads=2)
        train(model, seqs[:64], seqs[64:72], TrainConfig(epochs=25, batch_size=8))
        succ = {4: 5, 5: 6, 6: 7, 7: 4, 8: 9, 9: 8}
        hits = total = 0
        for seq in seqs[72:]:
            # final content position is followed by EOS, not the chain successor
            for t in range(1, len(seq) - 2):
                if seq[t] in succ:
                    total += 1
                    if model.suggest(seq[: t + 1], k=1)[0][0] == succ[seq[t]]:
                        hits += 1
        assert hits / total >= 0.9

    def test_adapters_only_freezes_base(self):
        seqs = self.make_corpus(n=30, seed=3)
        model = tiny_model(vocab=12, layers=1, d=16, heads=2)
        model.attach_lora(rank=2, alpha=8.0)
        before = {k: v.copy() for k, v in model.params.items()}
        train(model, seqs[:24], seqs[24:], TrainConfig(epochs=2, batch_size=8),
              adapters_only=True)
        for k in before:
            assert np.array_equal(model.params[k], before[k])
        assert any(np.any(b != 0) for _, b in model.adapters.values())

    def test_adapters_only_without_adapters_rejected(self):
        seqs = self.make_corpus(n=20, seed=4)
        with pytest.raises(SpecialistError):
            train(tiny_model(), seqs[:16], seqs[16:], TrainConfig(epochs=1),
                  adapters_only=True)

    def test_perplexity_identity(self):
        assert perplexity_from_loss(0.0) == 1.0
        assert perplexity_from_loss(1.0) == pytest.approx(math.e)

    def test_curve_csv_shape(self, tmp_path):
        curve = [{"epoch": 1, "train_loss": 1.5, "dev_loss": 1.4, "ppl": 4.06}]
        write_curve_csv(tmp_path / "c.csv", curve)
        lines = (tmp_path / "c.csv").read_text().strip().split("\n")
        assert lines[0] == "epoch,train_loss,dev_loss,ppl"
        assert len(lines) == 2


class TestPersistence:
    def test_save_load_round_trip_with_adapters(self, tmp_path):
        model = tiny_model(seed=6)
        model.attach_lora(rank=2, alpha=4.0, seed=1)
        model.temperature = 1.7
        model.save(tmp_path / "m.bin")
        loaded = SpecialistModel.load(tmp_path / "m.bin")
        ids = np.array([[2, 4, 5]])
        assert np.array_equal(model.forward(ids)[0], loaded.forward(ids)[0])
        assert loaded.temperature == 1.7
        assert set(loaded.adapters) == set(model.adapters)

    def test_save_is_deterministic(self, tmp_path):
        model = tiny_model(seed=7)
        model.save(tmp_path / "a.bin")
        model.save(tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
