import sys
import time
import numpy as np
from fastweight import training as tr, backbone as bb, head as hd, harness as hn
from fastweight.checkpoint import CheckpointData
from fastweight.corpus import corpus_from_text, make_entity_corpus

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
d_model = int(sys.argv[2]) if len(sys.argv) > 2 else 64
seeds = [int(s) for s in (sys.argv[3].split(",") if len(sys.argv) > 3 else ["0"])]
sent = int(sys.argv[4]) if len(sys.argv) > 4 else 25

t_start = time.perf_counter()
train_text = make_entity_corpus(4000, seed=100, sentences_per_doc=sent)
dev_text = make_entity_corpus(40, seed=101, sentences_per_doc=sent)
corpus = corpus_from_text(train_text, "word")
dev = corpus_from_text(dev_text, corpus.tokenizer)
print("vocab", corpus.vocab_size, "train tokens", corpus.n_tokens,
      "dev tokens", dev.n_tokens, flush=True)


def run(mode, seed, mask=hd.MASK_ALL):
    mcfg = tr.ModelConfig(
        backbone=bb.BackboneConfig(vocab_size=corpus.vocab_size, d_model=d_model,
                                   n_layers=2, n_heads=4, d_ff=4 * d_model,
                                   max_seq_len=128, seed=seed),
        d_hidden=d_model, chunk_size=32, mask=mask)
    tcfg = tr.TrainConfig(mode=mode, batch_size=8, seq_len=96, learning_rate=3e-3,
                          total_steps=steps, warmup_steps=50, eval_every=10 ** 9,
                          seed=seed)
    t0 = time.perf_counter()
    res = tr.fit(corpus, tcfg, mcfg, dev_corpus=dev)
    print(f"  {mode}{'' if mask == hd.MASK_ALL else '/bias'} seed {seed}: "
          f"{time.perf_counter() - t0:.0f}s", flush=True)
    return CheckpointData(res.model, tcfg, corpus.tokenizer, None, steps)


for seed in seeds:
    slow = run("slow-only", seed)
    fwl = run("full", seed)
    bias = run("full", seed, mask=hd.MASK_BIAS_ONLY)
    base_ppl = hn.score(slow, dev, "baseline").perplexity
    fwl_ppl = hn.score(fwl, dev, "fwl").perplexity
    fwl_own_base = hn.score(fwl, dev, "baseline").perplexity
    step, tto_ppl = hn.tune_global_step(slow, dev, [0.003, 0.01, 0.03, 0.1, 0.3])
    bias_ppl = hn.score(bias, dev, "bias-only").perplexity
    dyn_ppl = hn.dynamic_evaluate(slow, dev, 0.03, 32).perplexity
    print(f"seed {seed}: NoFWL {base_ppl:.3f}  FWL {fwl_ppl:.3f} "
          f"(slow-pass {fwl_own_base:.3f})  TTO {tto_ppl:.3f} (step {step})  "
          f"Bias {bias_ppl:.3f}  Dyn {dyn_ppl:.3f}", flush=True)
    print("  alphas:", {k: round(float(v), 4) for k, v in fwl.model.alpha.items()},
          flush=True)
print(f"total {time.perf_counter() - t_start:.0f}s")
