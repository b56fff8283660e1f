import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgcap.metrics import CiderD, MetricError, bleu, cider_d, corpus_bleu, evaluate, lcs_length, ngrams, rouge_l

from oracles import bleu_oracle, cider_d_oracle, corpus_bleu_oracle, lcs_oracle, rouge_l_oracle

WORDS = "a the man dog cat sits on mat red runs".split()
sentence = st.lists(st.sampled_from(WORDS[:6]), min_size=1, max_size=8)


def random_corpus(rng, n_images=4):
    def sent():
        return [str(w) for w in rng.choice(WORDS[: int(rng.integers(3, 10))], size=int(rng.integers(1, 9)))]

    refs = [[sent() for _ in range(int(rng.integers(1, 4)))] for _ in range(n_images)]
    hyps = [sent() for _ in range(n_images)]
    return hyps, refs


class TestNgrams:
    @settings(max_examples=50, deadline=None)
    @given(sentence, st.integers(1, 4))
    def test_total_count(self, words, n):
        assert sum(ngrams(words, n).values()) == max(len(words) - n + 1, 0)


class TestBleu:
    def test_identical(self):
        s = "a man sits on the mat".split()
        for n in range(1, 5):
            assert bleu(s, [s], n) == 1.0

    def test_no_overlap(self):
        assert bleu(["x", "y"], [["a", "b"]], 1) == 0.0

    def test_clipping_example(self):
        hyp, ref = "the the the".split(), "the cat".split()
        # clipped count 1 of 3; c = 3 >= r = 2 so no penalty
        assert bleu(hyp, [ref], 1) == pytest.approx(1 / 3, abs=1e-15)
        assert bleu(hyp, [ref], 1) == pytest.approx(bleu_oracle(hyp, [ref], 1), abs=1e-15)

    def test_brevity_penalty(self):
        hyp, ref = ["the"], "the cat".split()
        assert bleu(hyp, [ref], 1) == pytest.approx(math.exp(1 - 2), abs=1e-15)

    def test_closest_reference_length(self):
        hyp = "a b c".split()
        refs = ["a b c d e f".split(), "a b".split(), "a b c d".split()]
        # closest lengths are 2 and 4 (both distance 1), the shorter wins, so no penalty
        assert bleu(hyp, refs, 1) == 1.0

    def test_errors(self):
        with pytest.raises(MetricError):
            bleu(["a"], [])
        with pytest.raises(MetricError):
            bleu([], [["a"]])
        with pytest.raises(MetricError):
            bleu(["a"], [["a"]], 5)

    def test_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            hyps, refs = random_corpus(rng, 1)
            for n in range(1, 5):
                assert bleu(hyps[0], refs[0], n) == pytest.approx(bleu_oracle(hyps[0], refs[0], n), abs=1e-12)

    def test_corpus_oracle_and_empty_hypothesis(self):
        hyps = [["a", "dog"], []]
        refs = [[["a", "dog"]], [["the", "cat"]]]
        assert corpus_bleu(hyps, refs, 2) == pytest.approx(corpus_bleu_oracle(hyps, refs, 2), abs=1e-15)
        assert corpus_bleu(hyps, refs, 2) == pytest.approx(math.exp(1 - 4 / 2), abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(sentence, st.lists(sentence, min_size=1, max_size=3), st.randoms())
    def test_reference_order_invariant(self, hyp, refs, rnd):
        shuffled = list(refs)
        rnd.shuffle(shuffled)
        for n in range(1, 5):
            assert bleu(hyp, refs, n) == bleu(hyp, shuffled, n)
            assert 0.0 <= bleu(hyp, refs, n) <= 1.0


class TestRouge:
    def test_identical_and_disjoint(self):
        s = "the cat sat".split()
        assert rouge_l(s, [s]) == pytest.approx(1.0, abs=1e-15)
        assert rouge_l(s, [["dog"]]) == 0.0

    def test_hand_oracle(self):
        hyp, ref = "the cat sat".split(), "the cat on the mat".split()
        assert lcs_length(hyp, ref) == 2
        p, r = 2 / 3, 2 / 5
        want = (1 + 1.44) * p * r / (r + 1.44 * p)
        assert rouge_l(hyp, [ref]) == pytest.approx(want, abs=1e-15)

    def test_max_over_references(self):
        hyp = "the cat sat".split()
        refs = ["the dog".split(), "the cat sat down".split()]
        assert rouge_l(hyp, refs) == pytest.approx(max(rouge_l(hyp, [r]) for r in refs), abs=0)

    def test_empty_hypothesis(self):
        assert rouge_l([], [["a"]]) == 0.0
        with pytest.raises(MetricError):
            rouge_l(["a"], [])

    @settings(max_examples=100, deadline=None)
    @given(sentence, sentence)
    def test_lcs_oracle(self, a, b):
        assert lcs_length(a, b) == lcs_oracle(a, b)

    @settings(max_examples=100, deadline=None)
    @given(sentence, st.lists(sentence, min_size=1, max_size=3))
    def test_rouge_oracle(self, hyp, refs):
        assert rouge_l(hyp, refs) == pytest.approx(rouge_l_oracle(hyp, refs), abs=1e-12)


class TestCider:
    def test_no_shared_ngrams(self):
        refs = {"1": [["a", "dog"]], "2": [["the", "cat"]]}
        assert CiderD(refs).score(["red", "mat"], refs["1"]) == 0.0

    def test_three_image_oracle(self):
        refs = {
            "i1": ["a man sits".split(), "a man on a mat".split()],
            "i2": ["the dog runs".split()],
            "i3": ["a red cat".split(), "the cat sits on the mat".split()],
        }
        hyps = {"i1": "a man sits on a mat".split(), "i2": "a dog runs".split(), "i3": "the cat".split()}
        per_image, mean = cider_d(hyps, refs)
        all_refs = list(refs.values())
        for k in hyps:
            assert per_image[k] == pytest.approx(cider_d_oracle(hyps[k], refs[k], all_refs), abs=1e-9)
        assert mean == pytest.approx(np.mean(list(per_image.values())), abs=1e-15)

    def test_range_and_empty_corpus(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            hyps, refs = random_corpus(rng)
            scorer = CiderD(refs)
            for h, r in zip(hyps, refs):
                assert 0.0 <= scorer.score(h, r) <= 10.0
        with pytest.raises(MetricError):
            CiderD([])

    def test_identical_captions_score_ten(self):
        refs = [["a", "dog", "runs", "fast"]], [["the", "cat", "sits"]], [["red", "mat"]]
        scorer = CiderD(list(refs))
        assert scorer.score(["a", "dog", "runs", "fast"], refs[0]) == pytest.approx(10.0, abs=1e-12)
        # no 4-grams in a 3-token caption: that order contributes 0
        assert scorer.score(["the", "cat", "sits"], refs[1]) == pytest.approx(7.5, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(sentence, st.lists(sentence, min_size=1, max_size=3), st.randoms())
    def test_reference_order_invariant(self, hyp, refs, rnd):
        other = [["x", "y"]]
        shuffled = list(refs)
        rnd.shuffle(shuffled)
        a = CiderD([refs, other]).score(hyp, refs)
        b = CiderD([shuffled, other]).score(hyp, shuffled)
        assert a == pytest.approx(b, abs=1e-12)


class TestEvaluate:
    def test_identity_corpus(self):
        refs = {str(i): [s.split()] for i, s in enumerate(["a man sits on a mat", "the dog runs fast", "a red cat sleeps"])}
        hyps = {k: v[0] for k, v in refs.items()}
        out = evaluate(hyps, refs)
        assert set(out) == {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider_d", "n_images"}
        for key in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"):
            assert out[key] == pytest.approx(1.0, abs=1e-12)
        assert 0 < out["cider_d"] <= 10 and out["n_images"] == 3

    def test_missing_references(self):
        with pytest.raises(MetricError):
            evaluate({"a": ["x"]}, {"b": [["x"]]})

    def test_pure(self):
        rng = np.random.default_rng(9)
        hyps, refs = random_corpus(rng)
        h = {str(i): x for i, x in enumerate(hyps)}
        r = {str(i): x for i, x in enumerate(refs)}
        assert evaluate(h, r) == evaluate(h, r)

    def test_adding_identical_reference_never_hurts(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            hyps, refs = random_corpus(rng)
            h, rs = hyps[0], refs[0]
            more = rs + [list(h)]
            assert bleu(h, more) >= bleu(h, rs)
            assert rouge_l(h, more) >= rouge_l(h, rs)
            scorer = CiderD(refs)
            assert scorer.score(h, more) >= scorer.score(h, rs)
            # also when the document frequencies are recomputed with the new reference
            assert CiderD([more] + refs[1:]).score(h, more) >= scorer.score(h, rs) - 1e-12
