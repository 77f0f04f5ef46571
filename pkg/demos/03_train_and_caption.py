"""Generate a synthetic dataset, train a small captioner, decode a few images.

Run:  python3 demos/03_train_and_caption.py   (about a minute on one core)
"""

import tempfile

from msedf.data import SyntheticSpec, generate_synthetic, load_dataset
from msedf.inference import DecodeConfig, build_train_pool, decode_split
from msedf.metrics import corpus_evaluate
from msedf.model import ModelConfig, init_params
from msedf.stacking import StackConfig
from msedf.training import AdamState, TrainConfig, dataset_loss, train_epoch

out = tempfile.mkdtemp(prefix="msedf-demo-")
data = load_dataset(*generate_synthetic(SyntheticSpec(), out))
print(f"{len(data.train)} training images, vocabulary of {data.vocab.size}, captions up to {data.max_len} tokens")
print("example caption:", data.train.captions[0][0])

# Smaller widths and a larger step than the defaults keep the demo quick.
cfg = ModelConfig(data.vocab.size, 8, 8, StackConfig("lws", 3), 64, 64, 64, 128, 0.2)
params = init_params(cfg, seed=0)
tc = TrainConfig(batch_size=8, lr=2e-3)
opt = AdamState.for_params(params.parameters(), tc)
for epoch in range(1, 61):
    train_epoch(params, opt, data.train, tc, epoch)
    if epoch % 15 == 0:
        print(f"epoch {epoch:3d}  training cross entropy {dataset_loss(params, data.train):.4f}")

greedy = DecodeConfig(1, data.max_len + 1, rerank=False)
captions = decode_split(params, data.train, greedy, data.vocab, greedy=True)
for image_id, cap, refs in list(zip(data.train.image_ids, captions, data.train.references))[:4]:
    print(f"{image_id}: {' '.join(cap)!r}   (reference {' '.join(refs[0])!r})")

print("\ntraining split, greedy:", {k: round(v, 3) for k, v in corpus_evaluate(captions, data.train.references).to_dict().items()})

# Beam search with comparison reranking on held-out images: the chosen beam
# is the one that best agrees with captions of visually similar training images.
pool = build_train_pool(params, data.train)
held_out = decode_split(params, data.test, DecodeConfig(5, data.max_len + 1, 4, True), data.vocab, pool)
for image_id, cap, refs in zip(data.test.image_ids, held_out, data.test.references):
    print(f"{image_id}: {' '.join(cap)!r}   (reference {' '.join(refs[0])!r})")
