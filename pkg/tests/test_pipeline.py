import json
import os
from dataclasses import replace

import numpy as np
import pytest

from mwds import losses as L
from mwds.metrics import MetricError, corpus_wer
from mwds.nbest import Corpus, Hypothesis, Utterance, Vocab, load_corpus, tokenize
from mwds.pipeline.config import (
    ConfigError,
    InitFrom,
    Stage,
    SynthConfig,
    TrainConfig,
    build,
    keys_of,
    load_config,
)
from mwds.pipeline.rescoring import (
    W2_GRID,
    evaluate,
    first_pass_selections,
    format_reports,
    oracle_selections,
    rescore,
    tune_interpolation,
)
from mwds.pipeline.synth import Grammar, generate_corpora, generate_synthetic
from mwds.pipeline.train import (
    Adam,
    TrainingError,
    distill,
    score_corpus,
    score_sequences,
    select,
    train,
)
from mwds.scorer import ScorerConfig, ScorerModel, save_checkpoint
from mwds.tensor import Tensor

SMALL = SynthConfig(n_train=40, n_dev=12, n_test=12, vocab_words=60, nbest_size=5, seed=5)
TINY = dict(layers=1, hidden_dim=8, heads=2, ffn_dim=8, max_len=32)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    paths = generate_synthetic(SMALL, out)
    splits = {s: load_corpus(paths[s]) for s in ("train", "dev", "test")}
    return splits, Vocab.load(paths["vocab"]), paths


def tiny_model(vocab, seed=0):
    return ScorerModel(ScorerConfig(vocab_size=len(vocab), seed=seed, **TINY))


class TestSynth:
    def test_fixed_seed_is_byte_identical(self, tmp_path):
        a = generate_synthetic(SMALL, tmp_path / "a")
        b = generate_synthetic(SMALL, tmp_path / "b")
        for key in a:
            with open(a[key], "rb") as fa, open(b[key], "rb") as fb:
                assert fa.read() == fb.read()

    def test_different_seed_differs(self):
        a = generate_corpora(SMALL)["train"]
        b = generate_corpora(replace(SMALL, seed=6))["train"]
        assert [u.reference for u in a] != [u.reference for u in b]

    def test_no_corruption_means_perfect_hypotheses(self):
        corpora = generate_corpora(replace(SMALL, corruption_rate=0.0))
        for corpus in corpora.values():
            assert all(h.text == u.reference for u in corpus for h in u.nbest)
            assert corpus_wer(corpus, oracle_selections(corpus)).oracle_wer == 0.0

    def test_noiseless_scores_rank_oracle_first(self):
        for corpus in generate_corpora(replace(SMALL, score_noise=0.0)).values():
            np.testing.assert_array_equal(first_pass_selections(corpus),
                                          oracle_selections(corpus))

    def test_first_pass_is_informative_but_imperfect(self):
        dev = generate_corpora(replace(SMALL, n_dev=200))["dev"]
        fp = corpus_wer(dev, first_pass_selections(dev))
        assert 0 < fp.oracle_wer < fp.wer
        random_sel = [len(u) - 1 for u in dev]
        assert fp.wer < corpus_wer(dev, random_sel).wer

    def test_shape(self, data):
        splits, vocab, _ = data
        assert [len(splits[s]) for s in ("train", "dev", "test")] == [40, 12, 12]
        assert all(2 <= len(u) <= 5 for c in splits.values() for u in c)
        assert all(SMALL.min_len <= len(u.reference.split()) for u in splits["train"])

    def test_default_lexicon_size(self):
        assert abs(len(Grammar.for_size(200).lexicon()) - 200) <= 10


def scaled_scores(corpus, rng):
    return [rng.normal(0, 1, len(u)) for u in corpus]


class TestRescore:
    def test_zero_weight_is_first_pass(self, data):
        splits, _, _ = data
        rng = np.random.default_rng(0)
        for corpus in splits.values():
            res = rescore(None, corpus, 1.0, 0.0, scores=scaled_scores(corpus, rng))
            np.testing.assert_array_equal(res.selections, first_pass_selections(corpus))

    def test_positive_rescaling_keeps_selections(self, data):
        dev = data[0]["dev"]
        rng = np.random.default_rng(1)
        scores = scaled_scores(dev, rng)
        base = select(dev, scores, 1.0, 0.5)
        for c in (0.25, 3.0, 1000.0):
            np.testing.assert_array_equal(select(dev, scores, c, 0.5 * c), base)

    def test_teacher_copy_gives_same_selections(self, data):
        splits, vocab, _ = data
        teacher = tiny_model(vocab, seed=3)
        student = teacher.copy()
        dev = splits["dev"]
        a = rescore(teacher, dev, 0.0, 1.0, vocab=vocab).selections
        b = rescore(student, dev, 0.0, 1.0, vocab=vocab).selections
        np.testing.assert_array_equal(a, b)

    def test_ties_go_to_lowest_index(self):
        utt = Utterance("u", "a", (Hypothesis("a", 1.0), Hypothesis("b", 1.0)))
        assert select(Corpus((utt,)), [np.zeros(2)], 1.0, 1.0)[0] == 0

    def test_workers_do_not_change_scores(self, data):
        splits, vocab, _ = data
        model = tiny_model(vocab)
        seqs = [tokenize(h.text, vocab) for u in splits["train"] for h in u.nbest] * 3
        a = score_sequences(model, seqs, workers=1)
        b = score_sequences(model, seqs, workers=3)
        assert a.tobytes() == b.tobytes()

    def test_json_output(self, data):
        dev = data[0]["dev"]
        res = rescore(None, dev, 1.0, 0.0, scores=[np.zeros(len(u)) for u in dev])
        obj = json.loads(res.to_json(dev))
        assert obj["ids"] == [u.id for u in dev] and len(obj["selections"]) == len(dev)


class TestTune:
    def test_constant_scores_pick_smallest_weight(self, data):
        dev = data[0]["dev"]
        w1, w2 = tune_interpolation(dev, [np.full(len(u), 4.2) for u in dev])
        assert (w1, w2) == (1.0, 0.0)
        assert corpus_wer(dev, select(dev, [np.zeros(len(u)) for u in dev], w1, w2)).wer == \
            corpus_wer(dev, first_pass_selections(dev)).wer

    def test_planted_oracle_reaches_oracle_wer(self, data):
        dev = data[0]["dev"]
        scores = [u.edit_distances() for u in dev]
        w1, w2 = tune_interpolation(dev, scores)
        rep = corpus_wer(dev, select(dev, scores, w1, w2))
        assert rep.wer == rep.oracle_wer

    def test_single_point_grid(self, data):
        dev = data[0]["dev"]
        assert tune_interpolation(dev, [np.zeros(len(u)) for u in dev], grid=[0.7]) == (1.0, 0.7)

    def test_grid(self):
        assert W2_GRID == (0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50)


class TestEvaluate:
    def test_system_against_itself(self, data):
        test = data[0]["test"]
        sel = first_pass_selections(test)
        reports = evaluate({"t": sel, "b": sel.copy()}, test, baseline="b", students=["t"])
        assert reports["t"].werr_vs_baseline == 0.0 and reports["t"].p_value == 1.0

    def test_oracle_row(self, data):
        test = data[0]["test"]
        rep = evaluate({"oracle": oracle_selections(test)}, test)["oracle"]
        assert rep.wer == rep.oracle_wer

    def test_gap_closure_and_table(self, data):
        test = data[0]["test"]
        systems = {"teacher": oracle_selections(test), "baseline": first_pass_selections(test),
                   "student": oracle_selections(test)}
        reports = evaluate(systems, test, baseline="baseline", teacher="teacher",
                           students=["student"])
        assert reports["student"].gap_closure_pct == pytest.approx(100.0)
        assert "student" in format_reports(reports)

    def test_mismatched_corpus(self, data):
        test = data[0]["test"]
        sel = first_pass_selections(test)
        with pytest.raises(MetricError, match="different corpus"):
            evaluate({"a": sel}, test, corpus_ids={"a": ["x"] * len(test)})


def test_adam_single_step_matches_formula():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    p.grad = np.array([0.5, -0.25])
    opt = Adam([p], lr=0.1)
    opt.step()
    m = 0.1 * p.grad
    v = 0.001 * p.grad**2
    expected = np.array([1.0, -2.0]) - 0.1 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-12)


class TestTrain:
    def test_zero_learning_rate_changes_nothing(self, data):
        splits, vocab, _ = data
        model = tiny_model(vocab)
        before = model.state()
        cfg = TrainConfig(stage=Stage.MWER, lr0=0.0, max_epochs=2, patience=2, batch_size=8)
        result = train(cfg, model, splits["train"], splits["dev"], vocab)
        for name, arr in before.items():
            np.testing.assert_array_equal(model.params[name].data, arr)
        assert len({r.dev_loss for r in result.log}) == 1

    def test_patience_one_stops_after_two_evaluations(self, data):
        splits, vocab, _ = data
        cfg = TrainConfig(stage=Stage.MWER, max_epochs=5, patience=1, batch_size=16)
        result = train(cfg, tiny_model(vocab), splits["train"], splits["dev"], vocab,
                       dev_metric=lambda epoch, loss, wer: (0.0,))
        assert len(result.log) == 2 and result.best_epoch == 0

    def test_overfit_single_utterance(self, data):
        splits, vocab, _ = data
        utt = next(u for u in splits["train"]
                   if oracle_selections(Corpus((u,)))[0] != first_pass_selections(Corpus((u,)))[0])
        one = Corpus((utt,))
        model = tiny_model(vocab)

        def oracle_mass(m):
            s = score_corpus(m, one, vocab)[0]
            ns = L.NBestScores(utt.first_pass(), s, utt.edit_distances())
            return L.nbest_posterior(ns).data[int(np.argmin(utt.edit_distances()))]

        start = oracle_mass(model)
        cfg = TrainConfig(stage=Stage.MWER, lr0=1e-2, lr_decay=1.0, max_epochs=30, patience=30,
                          batch_size=1)
        train(cfg, model, one, one, vocab, dev_metric=lambda e, loss, wer: (loss,))
        assert oracle_mass(model) > start

    def test_log_records(self, data, tmp_path):
        splits, vocab, _ = data
        cfg = TrainConfig(stage=Stage.ADAPT, loss="mlm", max_epochs=2, patience=2, batch_size=16)
        result = train(cfg, tiny_model(vocab), splits["train"], splits["dev"], vocab)
        result.write_log(tmp_path / "log.jsonl")
        rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [0, 1, 2]
        assert set(rows[0]) == {"epoch", "train_loss", "dev_loss", "dev_wer", "lr"}
        assert rows[0]["train_loss"] is None and rows[1]["dev_wer"] is None
        assert rows[2]["lr"] == pytest.approx(cfg.lr0 * cfg.lr_decay)

    def test_mwer_log_has_dev_wer(self, data):
        splits, vocab, _ = data
        cfg = TrainConfig(stage=Stage.MWER, max_epochs=1, patience=1, batch_size=16)
        result = train(cfg, tiny_model(vocab), splits["train"], splits["dev"], vocab)
        assert all(r.dev_wer is not None for r in result.log)

    def test_non_finite_loss_aborts(self, data):
        splits, vocab, _ = data
        model = tiny_model(vocab)
        cfg = TrainConfig(stage=Stage.MWER, max_epochs=1, patience=1, batch_size=16)

        def poison(rec):
            model.params["head_b"].data[:] = np.nan

        with pytest.raises(TrainingError, match=r"epoch 1, batch 0, lr 0\.001"):
            train(cfg, model, splits["train"], splits["dev"], vocab, progress=poison)

    def test_non_finite_dev_loss_aborts(self, data):
        splits, vocab, _ = data
        model = tiny_model(vocab)
        model.params["head_b"].data[:] = np.nan
        with pytest.raises(TrainingError, match=r"dev loss nan at epoch 0"):
            train(TrainConfig(max_epochs=1, patience=1), model, splits["train"],
                  splits["dev"], vocab)

    def test_vocab_mismatch(self, data):
        splits, vocab, _ = data
        model = ScorerModel(ScorerConfig(vocab_size=len(vocab) + 1, **TINY))
        with pytest.raises(ConfigError, match="vocab"):
            train(TrainConfig(), model, splits["train"], splits["dev"], vocab)

    def test_deterministic(self, data):
        splits, vocab, _ = data
        cfg = TrainConfig(stage=Stage.MWER, max_epochs=2, patience=2, batch_size=8, seed=4)
        a = train(cfg, tiny_model(vocab), splits["train"], splits["dev"], vocab)
        b = train(cfg, tiny_model(vocab), splits["train"], splits["dev"], vocab)
        assert [r.to_json() for r in a.log] == [r.to_json() for r in b.log]
        for name, arr in a.model.state().items():
            assert arr.tobytes() == b.model.params[name].data.tobytes()


class TestDistill:
    def test_self_distillation_starts_at_zero(self, data):
        splits, vocab, _ = data
        teacher = tiny_model(vocab, seed=9)
        cfg = TrainConfig(stage=Stage.DISTILL, loss="nmse", max_epochs=1, patience=1)
        result, corpus_t, _ = distill(teacher, teacher.copy(), splits["train"], splits["dev"],
                                      vocab, cfg)
        assert result.log[0].dev_loss == pytest.approx(0.0, abs=1e-10)
        assert all(h.teacher_score is not None for u in corpus_t for h in u.nbest)

    def test_needs_teacher_scores(self, data):
        splits, vocab, _ = data
        cfg = TrainConfig(stage=Stage.DISTILL, loss="post_ce", max_epochs=1, patience=1)
        with pytest.raises(ConfigError, match="teacher"):
            distill(None, tiny_model(vocab), splits["train"], splits["dev"], vocab, cfg)

    def test_rejects_non_distillation_loss(self, data):
        splits, vocab, _ = data
        cfg = TrainConfig(stage=Stage.DISTILL, loss="mwer", max_epochs=1, patience=1)
        with pytest.raises(ConfigError, match="not a distillation loss"):
            distill(tiny_model(vocab), tiny_model(vocab), splits["train"], splits["dev"], vocab,
                    cfg)

    def test_mse_trains_on_text_only_data(self, data):
        splits, vocab, _ = data
        teacher = tiny_model(vocab, seed=2)
        text_only = Corpus(tuple(
            Utterance(f"x{i}", "", tuple(Hypothesis(h.text, 0.0) for h in u.nbest))
            for i, u in enumerate(splits["train"])))
        cfg = TrainConfig(stage=Stage.DISTILL, loss="mse", max_epochs=2, patience=2,
                          batch_size=32)
        result, _, _ = distill(teacher, tiny_model(vocab, seed=4), text_only, splits["dev"],
                               vocab, cfg)
        assert result.log[-1].dev_loss < result.log[0].dev_loss

    @pytest.mark.parametrize("init", [InitFrom.ADAPTED, InitFrom.MWER_TRAINED])
    def test_initialisation_sources(self, data, tmp_path, init):
        splits, vocab, _ = data
        ckpt = tmp_path / "init.ckpt"
        save_checkpoint(tiny_model(vocab, seed=1), ckpt)
        cfg = TrainConfig(stage=Stage.DISTILL, loss="post_ce", init_from=init,
                          init_checkpoint=str(ckpt), max_epochs=1, patience=1)
        from mwds.pipeline.train import init_model
        student = init_model(cfg, ScorerConfig(vocab_size=len(vocab), **TINY))
        result, _, _ = distill(tiny_model(vocab, seed=2), student, splits["train"],
                               splits["dev"], vocab, cfg)
        assert len(result.log) == 2


class TestConfigFiles:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"lr0": 0.1, "bogus": 1}))
        with pytest.raises(ConfigError, match="bogus"):
            load_config(str(path), allowed=keys_of(TrainConfig))

    def test_overrides_win_and_are_typed(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"lr0": 0.1, "loss": "mwer"}))
        values = load_config(str(path), ["lr0=0.5", "loss=post_ce", "max_epochs=3"],
                             allowed=keys_of(TrainConfig))
        cfg = build(TrainConfig, values)
        assert (cfg.lr0, cfg.loss, cfg.max_epochs) == (0.5, "post_ce", 3)

    def test_nested_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"synth": {"seed": 1}}))
        with pytest.raises(ConfigError, match="flat"):
            load_config(str(path))

    @pytest.mark.parametrize("values", [
        {"batch_size": 0}, {"lr_decay": 1.5}, {"loss": "nope"}, {"max_epochs": 2.5},
        {"init_from": "adapted"}, {"stage": "bogus"},
    ])
    def test_invalid_values(self, values):
        with pytest.raises(ConfigError):
            build(TrainConfig, values)

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(os.path.join("no", "such", "file.json"))
