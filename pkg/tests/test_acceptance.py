"""The eleven acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; conftest prints them in the terminal
summary. The end-to-end criteria (8 to 11) share one trained model pair.
"""

import math
import random
import time
from fractions import Fraction

import pytest
import torch

from planted import planted_corpus
from toys2st.config import RunConfig
from toys2st.evaluation import LMEmitter, evaluate
from toys2st.metrics import corpus_bleu, slc
from toys2st.packing import pack
from toys2st.pipeline import build_general, build_hq
from toys2st.protocol import (
    OUTPUT_SHAPES,
    SPEAKER_TOKEN_COUNT,
    Prompt,
    TaskMode,
    assemble_prompt,
    assemble_target,
    discretize_speed,
    disassemble_prompt,
    parse_output,
)
from toys2st.errors import OutOfRange
from toys2st.toylm.model import ModelConfig, forward_loss, grad, init_model
from toys2st.toylm.train import load_checkpoint
from toys2st.corpus import TrainingExample
from toys2st.workflow import build_toy_data, direct_only_schedule, train_model

RESULTS: dict = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    print(RESULTS[n])
    assert ok, detail


# 1. protocol round trip -------------------------------------------------------------


def _random_case(rng, layout):
    mode = rng.choice(list(TaskMode))
    langs = list(layout.languages)
    tgt = rng.choice(langs)
    src = next(lang for lang in langs if lang != tgt)

    def seg(kind):
        start, size = layout.ranges[kind]
        return tuple(start + rng.randrange(size) for _ in range(rng.randint(1, 40)))

    spk_size = layout.ranges["speaker"][1]
    speaker = tuple(layout.encode("speaker", rng.randrange(spk_size)) for _ in range(SPEAKER_TOKEN_COUNT)) if mode.has_speaker else None
    speed = rng.randint(5, 20) / 10 if mode.is_s2st else None
    if mode is TaskMode.MT:
        body, lang = seg(f"text:{src}"), tgt
    elif mode is TaskMode.TTS:
        body, lang = seg(f"text:{tgt}"), tgt
    elif mode is TaskMode.ASR:
        body, lang = seg("linguistic"), src
    else:
        body, lang = seg("linguistic"), tgt
    shape = OUTPUT_SHAPES[mode]
    fields = {}
    if "src" in shape:
        fields["source_text"] = seg(f"text:{lang if mode is TaskMode.ASR else src}")
    if "tgt" in shape:
        fields["target_text"] = seg(f"text:{tgt}")
    if "sem" in shape:
        fields["semantic"] = seg("semantic")
    return Prompt(mode, lang, body, speaker, speed), fields


def test_c01_protocol_round_trip_fuzz(layout):
    rng = random.Random(0)
    cases = [_random_case(rng, layout) for _ in range(10_000)]
    t0 = time.perf_counter()
    failures = 0
    modes = set()
    for prompt, fields in cases:
        modes.add(prompt.mode)
        try:
            tokens = assemble_prompt(prompt, layout)
            ok = disassemble_prompt(tokens, layout) == prompt
            target = assemble_target(prompt.mode, layout, **fields)
            parse = parse_output(prompt.mode, target, layout, lang=prompt.lang, require_terminated=True)
            ok = ok and all(getattr(parse, k) == v for k, v in fields.items())
        except Exception:
            ok = False
        failures += not ok
    seconds = time.perf_counter() - t0
    record(1, failures == 0 and seconds < 10 and len(modes) == 7, f"10000 pairs over {len(modes)} modes, {failures} failures, {seconds:.2f}s")


# 2. speed discretization -------------------------------------------------------------


def test_c02_speed_scan():
    violations = 0
    for k in range(500, 2001):
        r = Fraction(k, 1000)
        bucket = Fraction(round(discretize_speed(r) * 10), 10)
        nearest = min(range(5, 21), key=lambda t: abs(r - Fraction(t, 10)))
        if abs(bucket - r) > Fraction(1, 20) or (abs(r - Fraction(nearest, 10)) != Fraction(1, 20) and bucket != Fraction(nearest, 10)):
            violations += 1
    rejected = 0
    outside = [Fraction(k, 1000) for k in list(range(1, 500)) + list(range(2001, 4001))]
    for r in outside:
        try:
            discretize_speed(r)
        except OutOfRange:
            rejected += 1
    ok = violations == 0 and rejected == len(outside)
    record(2, ok, f"1501 in-range ratios, {violations} violations; {rejected}/{len(outside)} out-of-range rejected")


# 3. pipeline exactness ------------------------------------------------------------------


def test_c03_planted_corpus(codec):
    p = planted_corpus(codec, 1000, seed=0)
    g = build_general(p.records, codec, p.oracles)
    h = build_hq(g.samples, codec)
    reconciled = True
    for stats, n in ((g.stats, 1000), (h.stats, len(g.samples))):
        remaining = n
        for stage in stats.stages.values():
            reconciled &= stage["in"] == remaining and stage["kept"] + stage["discarded"] == stage["in"]
            remaining = stage["kept"]
        reconciled &= len(g.samples if stats is g.stats else h.samples) == remaining
    ok = g.ids == p.expected_general() and h.ids == p.expected_hq() and h.ids <= g.ids and reconciled
    record(3, ok, f"General {len(g.ids)}/{len(p.expected_general())}, HQ {len(h.ids)}/{len(p.expected_hq())}, reconciled={reconciled}")


# 4. BLEU oracle ----------------------------------------------------------------------------


def _oracle_bleu(hyps, refs):
    matches, totals = [0] * 4, [0] * 4
    c, r = sum(map(len, hyps)), sum(map(len, refs))
    for hyp, ref in zip(hyps, refs):
        for n in range(1, 5):
            grams = [tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1)]
            ref_grams = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
            totals[n - 1] += len(grams)
            matches[n - 1] += sum(min(grams.count(x), ref_grams.count(x)) for x in set(grams))
    if c == 0 or 0 in matches:
        return 0.0
    geo = math.exp(sum(math.log(Fraction(m, t)) for m, t in zip(matches, totals)) / 4)
    return 100 * (1.0 if c >= r else math.exp(1 - r / c)) * geo


def test_c04_bleu_oracle():
    rng = random.Random(4)
    worst, nonzero = 0.0, 0
    for _ in range(200):
        n = rng.randint(1, 6)
        refs = [[rng.choice("abcde") for _ in range(rng.randint(1, 10))] for _ in range(n)]
        hyps = [list(x) if rng.random() < 0.4 else [rng.choice("abcde") for _ in range(rng.randint(0, 10))] for x in refs]
        got = corpus_bleu([" ".join(x) for x in hyps], [" ".join(x) for x in refs], "en")
        want = _oracle_bleu(hyps, refs)
        worst = max(worst, abs(got - want))
        nonzero += want > 0
    corpus = ["abc de fg hij", "日月 山水 火木"]
    identity = corpus_bleu(corpus, corpus, ["en", "zh"])
    record(4, worst <= 1e-9 and identity == 100.0, f"200 corpora ({nonzero} nonzero), max |diff| {worst:.2e}; identity {identity}")


# 5. SLC ------------------------------------------------------------------------------------


def test_c05_slc():
    hand = (slc([2.0, 2.0], [2.3, 3.0], 0.2), slc([2.0, 2.0], [2.3, 3.0], 0.4))
    rng = random.Random(5)
    violations = 0
    tolerances = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0]
    for _ in range(1000):
        n = rng.randint(1, 12)
        src = [Fraction(rng.randint(1, 50), 25) for _ in range(n)]
        tgt = [Fraction(rng.randint(1, 100), 25) for _ in range(n)]
        scores = [slc(src, tgt, t) for t in tolerances]
        violations += scores != sorted(scores)
    record(5, hand == (0.5, 0.5) and violations == 0, f"hand cases {hand}, {violations} monotonicity violations")


# 6. packing ----------------------------------------------------------------------------------


def test_c06_packing():
    rng = random.Random(6)
    lost = 0
    for _ in range(1000):
        cap = rng.randint(16, 256)
        examples = []
        for i in range(rng.randint(0, 40)):
            n = rng.randint(1, 300)
            toks = tuple(rng.randrange(1, 60) for _ in range(n))
            examples.append(TrainingExample(f"e{i}", toks[: max(1, n // 3)], toks[max(1, n // 3) :]))
        packs, overflow = pack(examples, cap)
        fitting = sum(len(e) for e in examples if len(e) <= cap)
        lost += sum(p.used for p in packs) != fitting or len(overflow) != sum(len(e) > cap for e in examples)
    model = init_model(ModelConfig(60, layers=2, width=16, heads=2, ffn=32, max_positions=128, dtype="float64"), 0)
    changed = 0
    for trial in range(200):
        lengths = [rng.randint(2, 20) for _ in range(3)]
        make = lambda i, n, salt: TrainingExample(f"s{i}", tuple((salt + 7 * i + j) % 59 + 1 for j in range(n))[:1], tuple((salt + 7 * i + j) % 59 + 1 for j in range(n))[1:])
        base = [make(i, n, 0) for i, n in enumerate(lengths)]
        other = [make(0, lengths[0], rng.randint(1, 50)), base[1], make(2, lengths[2], rng.randint(1, 50))]
        outs = []
        for examples in (base, other):
            p = pack(examples, 128)[0][0]
            s = p.segments[1]
            tokens = torch.tensor([p.tokens])
            with torch.no_grad():
                outs.append(model(tokens, torch.tensor([p.segment_ids()]))[0, s.start : s.start + s.length])
        changed += not torch.equal(*outs)
    record(6, lost == 0 and changed == 0, f"1000 packings, {lost} conservation failures; {changed}/200 segment logits changed")


# 7. gradient check ------------------------------------------------------------------------------


def test_c07_gradient_check():
    V = 50
    model = init_model(ModelConfig(V, layers=2, width=16, heads=2, ffn=32, max_positions=64, dtype="float64", init_std=0.2), 7)
    rng = random.Random(7)
    examples = []
    for i in range(3):
        toks = tuple(rng.randrange(V) for _ in range(12))
        examples.append(TrainingExample(f"g{i}", toks[:4], toks[4:]))
    packs = pack(examples, 64)[0]
    g = grad(model, packs)
    params = dict(model.named_parameters())
    names = sorted(params)
    h, floor, worst, n = 1e-5, 1e-6, 0.0, 0
    with torch.no_grad():
        for _ in range(500):
            name = rng.choice(names)
            t = params[name]
            idx = tuple(rng.randrange(s) for s in t.shape)
            old = t[idx].item()
            t[idx] = old + h
            up = forward_loss(model, packs).item()
            t[idx] = old - h
            down = forward_loss(model, packs).item()
            t[idx] = old
            fd, an = (up - down) / (2 * h), g[name][idx].item()
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
            n += 1
    fresh = init_model(ModelConfig(V, layers=2, width=16, heads=2, ffn=32, max_positions=64, dtype="float64"), 7)
    loss0 = forward_loss(fresh, packs).item()
    init_ok = abs(loss0 - math.log(V)) <= 0.05 * math.log(V)
    record(7, worst <= 1e-4 and n >= 500 and init_ok, f"{n} parameters, worst relative error {worst:.2e}; init loss {loss0:.4f} vs ln V {math.log(V):.4f}")


# end-to-end (8 to 11) -----------------------------------------------------------------------------


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    cfg = RunConfig()
    codec = cfg.build_codec()
    data = build_toy_data(cfg, codec)
    ckpt = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    cot = train_model(cfg, codec, data.datasets(codec), checkpoint_dir=ckpt / "cot")
    seconds = time.perf_counter() - t0
    direct_modes = (TaskMode.S2ST_DIRECT,)
    direct = train_model(
        cfg,
        codec,
        data.datasets(codec, phase2_modes=direct_modes, phase3_modes=direct_modes),
        direct_only_schedule(cfg.schedule),
        resume=load_checkpoint(ckpt / "cot" / "phase1.ckpt"),  # phase 1 is shared by construction
    )
    return dict(cfg=cfg, codec=codec, data=data, cot=cot, direct=direct, seconds=seconds, test=data.test[:400])


@pytest.fixture(scope="session")
def reports(trained):
    cfg, codec, test = trained["cfg"], trained["codec"], trained["test"]
    model = trained["cot"].selected_model().eval()
    out = {}
    for mode in ("quality", "performance"):
        out[mode] = evaluate(LMEmitter(model, cfg.sampler, codec), test, mode, codec, timing=True)
    out["direct_only"] = evaluate(LMEmitter(trained["direct"].selected_model().eval(), cfg.sampler, codec), test, "direct", codec)
    return out


@pytest.mark.slow
def test_c08_end_to_end(trained, reports):
    s = reports["quality"].overall
    ok = (
        trained["seconds"] <= 1800
        and s.count >= 200
        and s.parse_validity >= 0.95
        and s.speech_bleu >= 90
        and s.speaker_preservation == 1.0
        and s.slc_04 >= 0.9
    )
    record(
        8,
        ok,
        f"train {trained['seconds']:.0f}s; Quality on {s.count} pairs: validity {s.parse_validity:.3f}, "
        f"Speech-BLEU {s.speech_bleu:.2f}, speaker {s.speaker_preservation}, SLC-0.4 {s.slc_04:.3f}",
    )


@pytest.mark.slow
def test_c09_direct_only_ablation(reports):
    cot = reports["quality"].overall.speech_bleu
    direct = reports["direct_only"].overall.speech_bleu or 0.0
    record(9, direct < cot, f"Direct-only Speech-BLEU {direct:.2f} < CoT Quality {cot:.2f}")


@pytest.mark.slow
def test_c10_tradeoff(reports):
    q, p = reports["quality"], reports["performance"]
    ok = (
        q.overall.count == 400
        and p.timing["seconds"] < q.timing["seconds"]
        and p.overall.mean_emitted_tokens < q.overall.mean_emitted_tokens
        and q.overall.speech_bleu >= p.overall.speech_bleu - 2.0
    )
    record(
        10,
        ok,
        f"{q.overall.count} utterances; Performance {p.timing['seconds']:.2f}s / {p.overall.mean_emitted_tokens:.1f} tokens, "
        f"Quality {q.timing['seconds']:.2f}s / {q.overall.mean_emitted_tokens:.1f} tokens; "
        f"BLEU Quality {q.overall.speech_bleu:.2f} vs Performance {p.overall.speech_bleu:.2f}",
    )


@pytest.mark.slow
def test_c11_mixing_audit(trained):
    audit = trained["cot"].audits["phase2"]
    ok = audit["batches"] >= 1000 and abs(audit["ratio"] - 2.0) <= 0.04
    record(11, ok, f"{audit['batches']} phase-2 batches, new:old {audit['new']}:{audit['old']} = {audit['ratio']:.4f}")
