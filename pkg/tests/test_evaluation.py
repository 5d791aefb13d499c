import json
import random

import pytest
import sacrebleu
from hypothesis import given, settings
from hypothesis import strategies as st

from capmt.errors import AlignmentError, EmptyEvalSet
from capmt.evaluation import (
    EvalReport,
    PairScores,
    ZptAnnotation,
    bleu_tokenize,
    chrf2,
    chrf_statistics,
    contains_pronoun,
    d_bleu,
    evaluate_records,
    read_zpt_annotations,
    zpt_accuracy,
)
from capmt.pipeline import TranslationRecord

from conftest import FIXTURES
from oracles import char_ngram_counts, reference_bleu

TOY_HYP = [
    ["the cat sat on the mat .", "it was happy ."],
    ["a dog barked loudly at night .", "nobody slept"],
]
TOY_REF = [
    ["the cat sat on a mat .", "it was very happy ."],
    ["the dog barked at night .", "nobody could sleep ."],
]


def random_corpus(rng, n_docs):
    vocab = "der die das haus katze hund , . ! ? läuft schnell 你 好".split()
    return [
        [" ".join(rng.choice(vocab) for _ in range(rng.randint(1, 9))) for _ in range(rng.randint(1, 4))]
        for _ in range(n_docs)
    ]


def test_identity_scores_hundred():
    rng = random.Random(1)
    for _ in range(50):
        docs = random_corpus(rng, rng.randint(1, 5))
        assert d_bleu(docs, docs) == pytest.approx(100.0, abs=1e-9)
        assert chrf2(docs, docs) == pytest.approx(100.0, abs=1e-9)


def test_disjoint_scores_zero():
    assert d_bleu([["a b c"]], [["x y z"]]) == 0.0
    assert chrf2([["abc"]], [["xyz"]]) == 0.0


def test_toy_bleu_matches_reference_oracle():
    joined_h = [" ".join(d) for d in TOY_HYP]
    joined_r = [" ".join(d) for d in TOY_REF]
    assert d_bleu(TOY_HYP, TOY_REF) == pytest.approx(reference_bleu(joined_h, joined_r), abs=0.1)


def test_bleu_agrees_with_sacrebleu_on_pretokenized_text():
    rng = random.Random(5)
    for _ in range(30):
        hyp, ref = random_corpus(rng, 3), random_corpus(rng, 3)
        hyp_segs = [" ".join(bleu_tokenize(" ".join(d))) for d in hyp]
        ref_segs = [" ".join(bleu_tokenize(" ".join(d))) for d in ref]
        want = sacrebleu.corpus_bleu(hyp_segs, [ref_segs], tokenize="none", smooth_method="add-k", smooth_value=1)
        if want.counts[0] == 0:
            continue
        assert d_bleu(hyp, ref) == pytest.approx(want.score, abs=1e-6)


def test_chrf_agrees_with_sacrebleu():
    rng = random.Random(6)
    metric = sacrebleu.CHRF(char_order=6, word_order=0, beta=2)
    for _ in range(30):
        hyp, ref = random_corpus(rng, 3), random_corpus(rng, 3)
        want = metric.corpus_score([" ".join(d) for d in hyp], [[" ".join(d) for d in ref]])
        assert chrf2(hyp, ref) == pytest.approx(want.score, abs=1e-6)


def test_chrf_manual_counts():
    # orders 1-4 have n-grams on both sides; precision equals recall at each order
    per_order = []
    for n in range(1, 5):
        h, r = char_ngram_counts("abcd", n), char_ngram_counts("abce", n)
        per_order.append(sum((h & r).values()) / sum(h.values()))
    assert per_order == [0.75, 2 / 3, 0.5, 0.0]
    avg = sum(per_order) / 4
    assert chrf2([["abcd"]], [["abce"]]) == pytest.approx(100 * avg, abs=1e-6)
    assert chrf_statistics("ab cd", "abce")[:2] == [(4, 4, 3), (3, 3, 2)]


def test_chinese_is_scored_by_character():
    assert bleu_tokenize("你好 世界", "zh") == ["你", "好", "世", "界"]
    assert d_bleu([["你好世界"]], [["你好 世界"]], "zh") == pytest.approx(100.0)


def test_shape_errors():
    with pytest.raises(EmptyEvalSet):
        d_bleu([], [])
    with pytest.raises(AlignmentError):
        chrf2([["a"]], [["a"], ["b"]])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_corpus_metrics_ignore_document_order(seed):
    rng = random.Random(seed)
    hyp, ref = random_corpus(rng, 4), random_corpus(rng, 4)
    perm = list(range(4))
    rng.shuffle(perm)
    assert d_bleu(hyp, ref) == pytest.approx(d_bleu([hyp[i] for i in perm], [ref[i] for i in perm]), abs=1e-9)
    assert chrf2(hyp, ref) == pytest.approx(chrf2([hyp[i] for i in perm], [ref[i] for i in perm]), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_bleu_ignores_sentence_boundaries(seed):
    rng = random.Random(seed)
    hyp, ref = random_corpus(rng, 2), random_corpus(rng, 2)
    regrouped = []
    for doc in hyp:
        words = " ".join(doc).split()
        cut = rng.randint(0, len(words))
        regrouped.append([" ".join(words[:cut]), " ".join(words[cut:])])
    assert d_bleu(regrouped, ref) == pytest.approx(d_bleu(hyp, ref), abs=1e-9)


def case_study():
    outputs = json.loads((FIXTURES / "zpt_case_outputs.json").read_text(encoding="utf-8"))
    (ann,) = read_zpt_annotations(FIXTURES / "zpt.jsonl")
    return outputs, ann


def test_case_study_pronouns():
    outputs, ann = case_study()
    assert ann.expected_pronouns == ("His", "He")
    verdicts = {name: zpt_accuracy([text], [ann]) for name, text in outputs.items()}
    assert verdicts == {"Zero-shot": 0.0, "Random": 0.0, "Similar": 0.0, "Ours": 1.0}


def test_whole_word_boundary():
    assert not contains_pronoun("whose", ["who"])
    assert contains_pronoun("Who, then?", ["who"])
    assert contains_pronoun("HE left", ["he"])


def test_zpt_accepts_records():
    ann = ZptAnnotation("s", "r", ("he",))
    rec = TranslationRecord("d", 0, "Ours", "s", "Then he left.")
    assert zpt_accuracy([rec, "nobody"], [ann, ann]) == 0.5


def test_zpt_alignment_and_annotation_checks():
    ann = ZptAnnotation("s", "r", (" He ",))
    assert ann.expected_pronouns == ("He",)
    with pytest.raises(AlignmentError):
        zpt_accuracy(["a"], [ann, ann])
    with pytest.raises(ValueError):
        ZptAnnotation("s", "r", ("two words",))
    with pytest.raises(ValueError):
        ZptAnnotation("s", "r", ())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=20), st.integers(0, 19))
def test_zpt_monotone_in_correct_records(hits, flip):
    ann = ZptAnnotation("s", "r", ("she",))
    outs = ["she did" if h else "it did" for h in hits]
    before = zpt_accuracy(outs, [ann] * len(outs))
    assert 0.0 <= before <= 1.0
    outs[flip % len(outs)] = "she did"
    assert zpt_accuracy(outs, [ann] * len(outs)) >= before


def test_score_bounds_enforced():
    with pytest.raises(ValueError):
        PairScores(101.0, 50.0)
    with pytest.raises(ValueError):
        PairScores(50.0, 50.0, 1.5)


def test_evaluate_records_report():
    records = [
        TranslationRecord("d0", 1, "Ours", "s", "it was happy ."),
        TranslationRecord("d0", 0, "Ours", "s", "the cat sat on the mat ."),
    ]
    report = evaluate_records(records, [["the cat sat on the mat .", "it was happy ."]], "de", "en-US")
    assert isinstance(report, EvalReport)
    assert report.scores["de-en"].d_bleu == pytest.approx(100.0)
    assert report.counts == {"documents": 1, "sentences": 2}
    assert "zpt_accuracy" not in report.to_dict()["scores"]["de-en"]
    assert report.render_table().splitlines()[1].split() == ["de-en", "100.00", "100.00", "-"]
