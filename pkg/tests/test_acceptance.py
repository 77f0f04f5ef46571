"""Acceptance suite: one test per criterion, at the stated tolerances and budgets."""

import itertools
import json
import math
import time

import numpy as np
import pytest

import oracles
from msedf import autodiff as ad
from msedf.autodiff import Tape, Tensor
from msedf.cli import main as cli_main
from msedf.data import SyntheticSpec, Vocabulary, dump_captions, generate_synthetic, load_captions, load_dataset
from msedf.fusion import FusedFeature, decode_features, encode_features
from msedf.inference import (
    DecodeConfig,
    TrainPool,
    beam_search,
    beam_search_core,
    comparison_rerank,
    decode_split,
    greedy_decode,
    model_stepper,
)
from msedf.metrics import MetricReport
from msedf.metrics import cider, lcs_length, meteor_lite, rouge_l, sentence_bleu
from msedf.model import ModelConfig, encode_image, init_params
from msedf.stacking import StackConfig, StackWeights, aggregate_gws, aggregate_lws, normalize_weights, stack_forward
from msedf.training import (
    AdamState,
    TrainConfig,
    adam_step,
    batch_loss,
    dataset_loss,
    decode_checkpoint,
    encode_checkpoint,
    fit,
    train_epoch,
    training_pairs,
)


def test_criterion_01_gradient_correctness(capsys):
    start = time.perf_counter()
    code = cli_main(["gradcheck", "--dims", "tiny"])
    elapsed = time.perf_counter() - start
    report = json.loads(capsys.readouterr().out)
    cells = {(c["strategy"], c["depth"]) for c in report["cells"]}
    expected = {("ns", 1)} | {(s, d) for s in ("ss", "cs", "gws", "lws") for d in (2, 3)}
    assert cells == expected
    worst = max(c["max_rel_error"] for c in report["cells"])
    print(f"gradcheck: {len(cells)} cells, worst relative error {worst:.2e}, {elapsed:.1f} s")
    assert code == 0 and report["pass"]
    assert worst < 1e-4
    assert elapsed < 60.0


def test_criterion_02_stacking_algebra(tmp_path):
    rng = np.random.default_rng(0)
    n, H = 3, 16
    D = [Tensor(rng.normal(size=(1, H))) for _ in range(n)]
    w = StackWeights.create(n, H)
    ss = stack_forward(StackConfig("ss", n), None, D).values
    w.gws_logits.values[...] = [[-1e3, -1e3, 0.0]]
    gws_last = stack_forward(StackConfig("gws", n), w, D).values
    assert np.max(np.abs(ss - gws_last)) <= 1e-12

    w = StackWeights.create(n, H)
    lws = stack_forward(StackConfig("lws", n), w, D).values
    gws = stack_forward(StackConfig("gws", n), w, D).values
    mean = np.mean([d.values for d in D], axis=0)
    assert np.max(np.abs(lws - gws)) <= 1e-12
    assert np.max(np.abs(gws - mean)) <= 1e-12

    for _ in range(1000):
        D = [Tensor(rng.normal(size=(1, H))) for _ in range(n)]
        w.gws_logits.values[...] = rng.normal(scale=3, size=(1, n))
        w.lws_logits.values[...] = rng.normal(scale=3, size=(n, H))
        alpha, W = normalize_weights(w)
        stacked = np.vstack([d.values for d in D])
        lo, hi = stacked.min(axis=0) - 1e-12, stacked.max(axis=0) + 1e-12
        for out in (aggregate_gws(D, alpha).values[0], aggregate_lws(D, W).values[0]):
            assert np.all(out >= lo) and np.all(out <= hi)

    # simplex constraints before and after 100 Adam steps of real training
    bundle_spec = SyntheticSpec(num_images=8, num_val=1, num_test=1, seed=2)
    data = load_dataset(*generate_synthetic(bundle_spec, tmp_path))
    for strategy in ("gws", "lws"):
        cfg = ModelConfig(data.vocab.size, 8, 8, StackConfig(strategy, 3), 8, 8, 8, 8, 0.5)
        params = init_params(cfg, 0)
        opt = AdamState.for_params(params.parameters(), TrainConfig(lr=0.05))
        pairs = training_pairs(data.train)
        for k in range(101):
            alpha, W = normalize_weights(params.stack_weights)
            assert abs(alpha.values.sum() - 1) <= 1e-9
            assert np.max(np.abs(W.values.sum(axis=0) - 1)) <= 1e-9
            if k == 100:
                break
            ad.zero_grads(params.parameters())
            with Tape() as tape:
                loss = batch_loss(params, data.train, pairs[(4 * k) % len(pairs) :][:4], None)
            ad.backward(tape, loss)
            adam_step(opt, params.parameters())
        logits = params.stack_weights.gws_logits if strategy == "gws" else params.stack_weights.lws_logits
        assert np.abs(logits.values).max() > 0.1  # the weights actually moved


def test_criterion_03_metric_oracles():
    sentences = list(oracles.all_sentences(("a", "b", "c"), 4))
    for cand, ref in itertools.product(sentences, repeat=2):
        assert sentence_bleu(cand, [ref], 1) == oracles.bleu([cand], [[ref]], 1)
        assert sentence_bleu(cand, [ref], 2) == oracles.bleu([cand], [[ref]], 2)
        assert rouge_l(cand, [ref]) == oracles.rouge_l(cand, [ref])
    assert sentence_bleu(["the", "the", "the"], [["the", "cat"]], 1) == 1 / 3
    assert lcs_length(["the", "cat", "sat"], ["the", "cat", "ran"]) == 2
    assert rouge_l(["the", "cat", "sat"], [["the", "cat", "ran"]]) == oracles.rouge_l(
        ["the", "cat", "sat"], [["the", "cat", "ran"]])
    assert abs(rouge_l(["the", "cat", "sat"], [["the", "cat", "ran"]]) - 2 / 3) < 1e-15


def test_criterion_04_metric_identities():
    sents = [s.split() for s in ("two red planes in the airport", "many ships sit in a harbor",
                                 "green trees cover the forest")]
    refs = [[s] for s in sents]
    for n in range(1, 5):
        for s in sents:
            assert sentence_bleu(s, [s], n) == 1.0
    for s in sents:
        assert rouge_l(s, [s]) == 1.0
        m = len(s)
        assert meteor_lite(s, [s]) == pytest.approx(1 - 0.5 / m**3, abs=1e-15)
    assert cider(sents, refs) == pytest.approx(10.0, abs=1e-12)
    assert cider(sents[:2], refs[:2]) == pytest.approx(10.0, abs=1e-12)


def test_criterion_05_overfit_end_to_end(tmp_path):
    data = load_dataset(*generate_synthetic(SyntheticSpec(), tmp_path))
    assert len(data.train) == 16 and data.store_a.dim == 8 and data.store_b.dim == 8
    assert 20 <= data.vocab.size <= 30 and data.max_len <= 8
    cfg = ModelConfig(data.vocab.size, 8, 8, StackConfig("lws", 3))
    params = init_params(cfg, 0)
    tc = TrainConfig(batch_size=4, seed=0)
    opt = AdamState.for_params(params.parameters(), tc)
    dcfg = DecodeConfig(1, data.max_len + 1, rerank=False)
    start = time.perf_counter()
    reached = None
    for epoch in range(1, 501):
        train_epoch(params, opt, data.train, tc, epoch)
        if epoch % 10:
            continue
        loss = dataset_loss(params, data.train)
        caps = decode_split(params, data.train, dcfg, data.vocab, greedy=True)
        verbatim = sum(c == refs[0] for c, refs in zip(caps, data.train.references))
        elapsed = time.perf_counter() - start
        print(f"epoch {epoch}: train loss {loss:.4f}, verbatim {verbatim}/16, {elapsed:.0f} s")
        if loss < 0.05 and verbatim >= 15:
            reached = (epoch, loss, verbatim, elapsed)
            break
        if elapsed > 300:
            break
    assert reached is not None, "loss < 0.05 with >= 15/16 verbatim captions was not reached"
    assert reached[3] < 300.0


def test_criterion_06_early_stopping(tmp_path):
    data = load_dataset(*generate_synthetic(SyntheticSpec(), tmp_path))
    cfg = ModelConfig(data.vocab.size, 8, 8, StackConfig("lws", 3), 16, 16, 16, 16)
    params = init_params(cfg, 0)
    scores = [0.6] + [0.6, 0.5, 0.3, 0.6, 0.1, 0.2, 0.55, 0.0] + [0.9] * 5
    snapshots = {}

    def hook(p, epoch):
        snapshots[epoch] = (p.state(), dataset_loss(p, data.val))
        return scores[epoch - 1]

    best, history = fit(params, data.train, data.val, TrainConfig(batch_size=16, patience=8, max_epochs=20), hook)
    assert [h["epoch"] for h in history] == list(range(1, 10))
    state, val_loss = snapshots[1]
    assert all(np.array_equal(best.state()[k], state[k]) for k in state)
    assert dataset_loss(best, data.val) == val_loss
    assert not np.array_equal(params.l3.W.values, best.l3.W.values)


def _rigged_model(seed: int, scale: float = 1.0):
    vocab = Vocabulary(["a", "b", "c"])
    cfg = ModelConfig(vocab.size, 3, 3, StackConfig("gws", 2), 6, 6, 6, 6)
    params = init_params(cfg, seed)
    r = np.random.default_rng(seed + 1000)
    for t in params.parameters():
        t.values[...] += r.normal(scale=scale, size=t.shape)
    return params, encode_image(params, r.normal(size=(1, 3)), r.normal(size=(1, 3)))


def test_criterion_07_beam_exactness():
    params, img = _rigged_model(7, 1.5)
    assert params.config.output_dim == 7  # pad, start, end, unk, a, b, c
    step, init = model_stepper(params, img)
    emittable = [2, 3, 4, 5, 6]

    def seq_logp(seq):
        state, total = init, 0.0
        for i, tok in enumerate(seq):
            logp, states = step([list(seq[:i])], [state])
            total += logp[0, tok]
            state = states[0]
        return total

    best = None
    for length in range(1, 4):
        for seq in itertools.product(emittable, repeat=length):
            if 2 in seq[:-1] or (length < 3 and seq[-1] != 2):
                continue
            lp = seq_logp(seq)
            if best is None or lp > best[0]:
                best = (lp, list(seq))
    top = beam_search_core(step, init, 27, 3)[0]
    assert top.token_ids == best[1]
    assert top.log_prob_sum == pytest.approx(best[0], abs=1e-12)

    for seed in range(50):
        params, img = _rigged_model(seed)
        cfg = DecodeConfig(1, 6, rerank=False)
        assert beam_search(params, img, cfg)[0][0] == greedy_decode(params, img, cfg)


def test_criterion_08_comparison_rerank():
    feats = {"n1": [1.0, 0.1, 0.0], "n2": [1.0, 0.2, 0.0], "n3": [1.0, 0.0, 0.3], "n4": [1.0, -0.2, 0.1],
             "far": [-1.0, 0.0, 0.0]}
    refs = {"n1": [["a", "b", "c", "d"]], "n2": [["a", "b", "c", "e"]], "n3": [["a", "b", "x", "y"]],
            "n4": [["p", "q", "r", "s"]], "far": [["h1", "h2", "h3"]]}
    pool = TrainPool([FusedFeature(k, Tensor([v])) for k, v in feats.items()], refs)
    query = FusedFeature("q", Tensor([[1.0, 0.0, 0.0]]))
    hyps = [(["h1", "h2", "h3"], -0.5), (["a", "b"], -1.0), (["a", "b", "c", "d"], -3.0)]

    # hand-computed mean of (BLEU-2 + METEOR + ROUGE-L) / 3 over the four neighbours' captions
    h1 = ((1 + (1 - 0.5 / 64) + 1)
          + (math.sqrt(3 / 4 * 2 / 3) + 0.75 * (1 - 0.5 / 27) + 0.75)
          + (math.sqrt(2 / 4 * 1 / 3) + 0.5 * (1 - 0.5 / 8) + 0.5)
          + 0.0) / 3 / 4
    p, r = 1.0, 0.5
    short = math.exp(1 - 4 / 2) + (p * r / (0.9 * p + 0.1 * r)) * (1 - 0.5 / 8) + 2.44 * p * r / (r + 1.44 * p)
    h2 = 3 * short / 3 / 4
    h3 = 0.0
    assert h1 == pytest.approx(0.546867, abs=1e-6) and h2 == pytest.approx(0.372541, abs=1e-6)
    assert h1 > h2 > h3
    assert comparison_rerank(hyps, query, pool, 4) == ["a", "b", "c", "d"]


def test_criterion_09_ablation_shape(tmp_path, capsys):
    generate_synthetic(SyntheticSpec(), tmp_path)
    (tmp_path / "run.json").write_text(json.dumps({"max_epochs": 2}))
    code = cli_main(["ablate", str(tmp_path / "run.json"), "--strategies", "ss,lws", "--depths", "1,2,3",
                     "--out", str(tmp_path / "table")])
    rows = json.loads(capsys.readouterr().out)["rows"]
    assert code == 0 and len(rows) == 7
    assert [(r["dc"], r["stack"]) for r in rows] == [(1, "NS"), (1, "SS"), (1, "LWS"), (2, "SS"), (2, "LWS"),
                                                     (3, "SS"), (3, "LWS")]
    text = (tmp_path / "table.txt").read_text().splitlines()
    assert text[0] == "DC & Stack & BLEU-1 & BLEU-2 & BLEU-3 & BLEU-4 & METEOR & ROUGE-L & CIDEr"
    assert len(text) == 8
    for row, line in zip(rows, text[1:]):
        for k in MetricReport.KEYS:
            upper = 10.0 if k == "cider" else 1.0
            assert 0.0 <= row[k] <= upper
        assert line.split(" & ")[2:] == [f"{row[k]:.4f}" for k in MetricReport.KEYS]


def test_criterion_10_persistence(tmp_path):
    paths = generate_synthetic(SyntheticSpec(), tmp_path)
    data = load_dataset(*paths)
    cfg = ModelConfig(data.vocab.size, 8, 8, StackConfig("lws", 3), 32, 32, 32, 32)
    params = init_params(cfg, 0)
    opt = AdamState.for_params(params.parameters(), TrainConfig(lr=3e-3))
    for epoch in range(1, 4):
        train_epoch(params, opt, data.train, TrainConfig(batch_size=8, lr=3e-3), epoch)
    restored = decode_checkpoint(encode_checkpoint(params, opt, data.vocab, TrainConfig())).params
    rng = np.random.default_rng(42)
    dcfg = DecodeConfig(3, 10, rerank=False)
    for _ in range(10):
        a, b = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
        x, y = encode_image(params, a, b), encode_image(restored, a, b)
        assert np.array_equal(x.values, y.values)
        assert greedy_decode(params, x, dcfg) == greedy_decode(restored, y, dcfg)
        assert beam_search(params, x, dcfg) == beam_search(restored, y, dcfg)
    for p in paths[1:]:
        assert encode_features(decode_features(p.read_bytes())) == p.read_bytes()
    assert dump_captions(load_captions(paths[0])).encode("utf-8") == paths[0].read_bytes()

