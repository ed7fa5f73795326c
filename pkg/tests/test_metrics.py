import math
import random

import pytest

from fouriernat import metrics as M


def test_token_accuracy_examples():
    refs = [[5, 6, 7], [8, 9]]
    assert M.token_accuracy(refs, refs) == 1.0
    assert M.token_accuracy([[20, 21, 22], [23, 24]], refs) == 0.0
    assert M.token_accuracy([[5, 7]], [[5, 9, 9]]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        M.token_accuracy([[1]], [])


def test_token_accuracy_ignores_eos():
    assert M.token_accuracy([[5, 6]], [[5, 6, 2]]) == 1.0


def test_bleu_identity_and_empty():
    refs = [[4, 5, 6, 7, 8], [9, 10, 11, 12]]
    assert M.bleu(refs, refs) == 1.0
    assert M.bleu([[], []], refs) == 0.0


def test_bleu_clipping_hypothesis_longer():
    # clipped unigram precision 1/4; c=4 > r=2 so the brevity penalty is 1
    assert M.bleu([["the"] * 4], [["the", "cat"]], max_n=1) == pytest.approx(0.25, abs=1e-12)


def test_bleu_brevity_penalty_when_short():
    # precision 1, c=2 < r=4: BP = exp(1 - 4/2)
    got = M.bleu([["the", "cat"]], [["the", "cat", "sat", "on"]], max_n=1)
    assert got == pytest.approx(math.exp(-1), abs=1e-12)


def test_bleu_against_hand_computed_bigram_case():
    hyp = [["a", "b", "c", "d"]]
    ref = [["a", "b", "x", "d", "e"]]
    # p1 = 3/4, p2 = 1/3 (only "a b" matches), c=4 < r=5
    expected = math.exp(1 - 5 / 4) * math.sqrt(0.75 * (1 / 3))
    assert M.bleu(hyp, ref, max_n=2) == pytest.approx(expected, abs=1e-12)


def test_bleu_zero_precision_without_smoothing():
    hyp, ref = [[4, 5, 6, 7]], [[4, 6, 5, 7]]
    assert M.bleu(hyp, ref) == 0.0
    assert M.bleu(hyp, ref, smooth=True) > 0.0


def test_bleu_one_iff_identical():
    refs = [[4, 5, 6, 7, 8], [9, 10, 11, 12, 13]]
    assert M.bleu(refs, refs) == 1.0
    assert M.bleu([refs[0], refs[1][:-1] + [4]], refs) < 1.0


def test_rouge_l_examples():
    assert M.rouge_l([4, 5, 6], [4, 5, 6]) == 1.0
    assert M.rouge_l([4, 5], [6, 7]) == 0.0
    assert M.rouge_l(list("abcd"), list("acd")) == pytest.approx(6 / 7, abs=1e-6)


def test_rouge_l_symmetric_for_equal_lengths():
    rng = random.Random(0)
    for _ in range(50):
        n = rng.randint(1, 8)
        a = [rng.randint(4, 8) for _ in range(n)]
        b = [rng.randint(4, 8) for _ in range(n)]
        assert M.rouge_l(a, b) == pytest.approx(M.rouge_l(b, a))


def test_lcs_against_brute_force():
    import itertools
    rng = random.Random(1)

    def brute(a, b):
        best = 0
        for r in range(len(a) + 1):
            for idx in itertools.combinations(range(len(a)), r):
                sub = [a[i] for i in idx]
                it = iter(b)
                if all(x in it for x in sub):
                    best = max(best, r)
        return best

    for _ in range(40):
        a = [rng.randint(0, 3) for _ in range(rng.randint(0, 7))]
        b = [rng.randint(0, 3) for _ in range(rng.randint(0, 7))]
        assert M.lcs_length(a, b) == brute(a, b)


def test_rouge_n():
    assert M.rouge_n([4, 5, 6], [4, 5, 7], 1) == pytest.approx(2 / 3)
    assert M.rouge_n([4, 5, 6], [4, 5, 7], 2) == pytest.approx(1 / 2)


def test_scores_permutation_invariant():
    rng = random.Random(2)
    refs = [[rng.randint(4, 9) for _ in range(rng.randint(4, 9))] for _ in range(20)]
    hyps = [r[:-1] + [rng.randint(4, 9)] for r in refs]
    order = list(range(20))
    rng.shuffle(order)
    a = M.evaluate(hyps, refs)
    b = M.evaluate([hyps[i] for i in order], [refs[i] for i in order])
    assert a.bleu == pytest.approx(b.bleu)
    assert a.rougeL == pytest.approx(b.rougeL)
    assert a.rouge2 == pytest.approx(b.rouge2)


def test_identity_corpus_all_ones():
    refs = [[4, 5, 6, 7, 8], [9], [10, 11, 12, 13]]
    rep = M.evaluate(refs, refs)
    for name in ("token_accuracy", "sequence_accuracy", "bleu", "rouge1", "rouge2", "rougeL"):
        assert getattr(rep, name) == 1.0, name
    assert set(rep.to_dict()) == {"token_accuracy", "sequence_accuracy", "bleu", "rouge1", "rouge2",
                                  "rougeL", "n_examples"}
