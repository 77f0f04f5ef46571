"""Caption metrics on a few hand-made sentences.

Run:  python3 demos/04_metrics.py
"""

from msedf.metrics import comparison_score, corpus_evaluate, meteor_lite, rouge_l, sentence_bleu

refs = [["many", "planes", "are", "parked", "near", "the", "terminal"],
        ["several", "planes", "sit", "at", "the", "airport"]]
candidates = {
    "close": ["many", "planes", "are", "parked", "at", "the", "airport"],
    "short": ["planes"],
    "repeats": ["the", "the", "the", "the"],
    "off-topic": ["a", "green", "forest"],
}
print(f"{'candidate':>10}  BLEU-1  BLEU-2  METEOR  ROUGE-L  combined")
for name, cand in candidates.items():
    print(f"{name:>10}  {sentence_bleu(cand, refs, 1):6.3f}  {sentence_bleu(cand, refs, 2):6.3f}  "
          f"{meteor_lite(cand, refs):6.3f}  {rouge_l(cand, refs):7.3f}  {comparison_score(cand, refs):8.3f}")

# "short" keeps perfect precision but pays the brevity penalty; "repeats" is
# limited by clipping to the two copies of "the" in a single reference.
corpus = [refs, [["a", "river", "runs", "through", "the", "forest"]]]
report = corpus_evaluate([candidates["close"], ["a", "river", "through", "the", "forest"]], corpus)
print("\ncorpus report:", {k: round(v, 4) for k, v in report.to_dict().items()})
