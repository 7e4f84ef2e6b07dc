"""Compare Euler and RK2 character language models on the bundled corpus.

One seed of the depth-1 cell of ``odeformer lm_truncation``, about a minute
per model on one core.

Run: python3 demos/char_lm.py
"""

from odeformer.studies import StudyConfig, run_lm
from odeformer.tasks import CharCorpus

config = StudyConfig()
corpus = CharCorpus.from_file()
print(f"corpus: {len(corpus.train)} train chars, vocabulary {corpus.vocab_size}")
for variant in ("Euler", "RK2"):
    res = run_lm(config, corpus, variant, depth=1, seed=1)
    print(f"{variant:>6}: val PPL {res['val_ppl']:.3f}  train PPL {res['train_ppl']:.3f}  "
          f"{res['n_params']} params  {res['cpu_secs']:.1f}s")
