"""Train a small model on synthetic shapes and look at retrieval.

    python demos/train_tiny.py           # quick: 64 pairs, 3 epochs (~10 s)
    python demos/train_tiny.py --full    # the tiny preset: 256 pairs, 30 epochs (a few minutes)
"""
import sys
import time

from threadpoolctl import threadpool_limits

from mlip.config import tiny
from mlip.data import decode_caption, generate_pairs
from mlip.evaluate import evaluate
from mlip.model import init_model
from mlip.train import train

full = "--full" in sys.argv
cfg = tiny()
if not full:
    cfg.data.n, cfg.train.epochs, cfg.train.warmup_steps = 64, 3, 2

pairs = generate_pairs(cfg.data.n, cfg.data.seed)
print("example caption:", " ".join(decode_caption(pairs[0].caption)))
print("parameters:", init_model(cfg.model, 0).num_parameters())

print("untrained:", evaluate(init_model(cfg.model, 0), pairs).lines()[1])


def every_40th(line):
    # metrics lines start with "step=<n>"
    if int(line.split()[0][5:]) % 40 == 0:
        print(line)


start = time.perf_counter()
with threadpool_limits(limits=1):
    result = train(cfg, pairs, seed=0, log=every_40th)
print("trained %d steps in %.1fs" % (len(result.metrics), time.perf_counter() - start))
print("epoch mean loss: first %.3f, last %.3f" % (result.epoch_means[0], result.epoch_means[-1]))

for line in evaluate(result.state, pairs).lines():
    print(line)
