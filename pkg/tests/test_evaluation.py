import dataclasses
import random

import jsonschema
import pytest

from toys2st.corpus import CorpusConfig, generate_sources
from toys2st.evaluation import GoldModel, decode_emission, evaluate, run_emitter, score_emissions, validate_report
from toys2st.pipeline import Oracles, build_general, build_hq
from toys2st.protocol import TaskMode


@pytest.fixture(scope="module")
def test_set(codec):
    records = generate_sources(codec, CorpusConfig(test_per_lang=60), 0, split="test")
    return build_hq(build_general(records, codec, Oracles.exact(codec)).samples, codec).samples


@pytest.mark.parametrize("mode", ["quality", "performance", "direct"])
def test_gold_gives_maximal_report(codec, test_set, mode):
    report = evaluate(GoldModel(codec), test_set, mode, codec)
    s = report.overall
    assert s.parse_validity == 1.0 and s.valid == s.count == len(test_set)
    assert s.speech_bleu == 100.0 and s.speaker_preservation == 1.0
    assert s.slc_02 == s.slc_04 == 1.0
    if mode == "direct":
        assert s.text_bleu is None and "text_bleu" not in report.to_dict()["overall"]
    else:
        assert s.text_bleu == 100.0
    validate_report(report.to_dict())
    assert set(report.directions) == {"en-zh", "zh-en"}


@pytest.fixture(scope="module")
def full_test_set(codec):
    records = generate_sources(codec, CorpusConfig(), 0, split="test")
    return build_hq(build_general(records, codec, Oracles.exact(codec)).samples, codec).samples


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_shuffled_references_score_near_zero(codec, full_test_set, seed):
    # A few dozen pairs are too few: per-character Chinese n-grams match by chance.
    test_set = full_test_set
    emissions, _ = run_emitter(GoldModel(codec), test_set, TaskMode.S2ST_QUALITY, codec)
    refs = [s.target_text for s in test_set]
    rng = random.Random(seed)
    shuffled = []
    for lang in ("en", "zh"):
        group = [s for s in test_set if s.target_lang == lang]
        texts = [s.target_text for s in group]
        rng.shuffle(texts)
        shuffled += [dataclasses.replace(s, target_text=t) for s, t in zip(group, texts)]
    assert sorted(s.target_text for s in shuffled) == sorted(refs) and [s.target_text for s in shuffled] != refs
    report = score_emissions(shuffled, emissions, TaskMode.S2ST_QUALITY)
    assert report.overall.speech_bleu < 5


def test_invalid_emissions_are_excluded(codec, test_set):
    mode = TaskMode.S2ST_PERFORMANCE
    emissions, _ = run_emitter(GoldModel(codec), test_set, mode, codec)
    broken = decode_emission(test_set[0], mode, emissions[0].tokens[:-1], codec)  # no EOD
    assert not broken.valid and broken.error.startswith("IncompleteOutput")
    report = score_emissions(test_set, [broken] + emissions[1:], mode)
    assert report.overall.valid == len(test_set) - 1
    assert report.overall.parse_validity == pytest.approx((len(test_set) - 1) / len(test_set))
    assert report.overall.speech_bleu == 100.0
    assert report.rows[0]["valid"] is False


def test_wrong_speaker_lowers_preservation(codec, test_set):
    mode = TaskMode.S2ST_DIRECT
    emissions, _ = run_emitter(GoldModel(codec), test_set, mode, codec)
    swapped = dataclasses.replace(emissions[0], speaker_id=(emissions[0].speaker_id + 1) % 16)
    report = score_emissions(test_set, [swapped] + emissions[1:], mode)
    assert report.overall.speaker_preservation == pytest.approx(1 - 1 / len(test_set))


def test_timing_section_only_on_request(codec, test_set):
    plain = evaluate(GoldModel(codec), test_set[:5], "quality", codec).to_dict()
    timed = evaluate(GoldModel(codec), test_set[:5], "quality", codec, timing=True).to_dict()
    assert "timing" not in plain and timed["timing"]["utterances"] == 5
    validate_report(timed)


def test_schema_rejects_bad_report(codec, test_set):
    doc = evaluate(GoldModel(codec), test_set[:3], "quality", codec).to_dict()
    with pytest.raises(jsonschema.ValidationError):
        validate_report({**doc, "overall": {**doc["overall"], "speech_bleu": 120}})
    with pytest.raises(jsonschema.ValidationError):
        validate_report({**doc, "extra": 1})


def test_missing_emission_is_an_error(codec, test_set):
    from toys2st.errors import ToyS2STError

    emissions, _ = run_emitter(GoldModel(codec), test_set[:3], TaskMode.S2ST_QUALITY, codec)
    with pytest.raises(ToyS2STError):
        score_emissions(test_set[:3], emissions[:2], TaskMode.S2ST_QUALITY)
