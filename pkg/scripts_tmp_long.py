import sys
import time
import numpy as np
from fastweight import training as tr, backbone as bb, head as hd, harness as hn
from fastweight.checkpoint import CheckpointData
from fastweight.corpus import corpus_from_text, make_entity_corpus

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

t_start = time.perf_counter()
corpus = corpus_from_text(make_entity_corpus(4000, seed=100, sentences_per_doc=12), "word")
dev = corpus_from_text(make_entity_corpus(40, seed=101, sentences_per_doc=12),
                       corpus.tokenizer)
print("vocab", corpus.vocab_size, "train", corpus.n_tokens, "dev", dev.n_tokens, flush=True)


def run(mode, mask=hd.MASK_ALL):
    mcfg = tr.ModelConfig(
        backbone=bb.BackboneConfig(vocab_size=corpus.vocab_size, d_model=64,
                                   n_layers=2, n_heads=4, d_ff=256,
                                   max_seq_len=128, memory_len=64, seed=seed),
        d_hidden=64, chunk_size=32, mask=mask)
    tcfg = tr.TrainConfig(mode=mode, batch_size=8, seq_len=96, learning_rate=3e-3,
                          total_steps=steps, warmup_steps=100, eval_every=500,
                          seed=seed)
    t0 = time.perf_counter()
    res = tr.fit(corpus, tcfg, mcfg, dev_corpus=dev)
    label = mode if mask == hd.MASK_ALL else "bias"
    print(f"  {label}: {time.perf_counter() - t0:.0f}s "
          f"best dev nll {res.best_dev_nll:.4f}", flush=True)
    return CheckpointData(res.model, tcfg, corpus.tokenizer, None, steps)


slow = run("slow-only")
fwl = run("full")
bias = run("full", mask=hd.MASK_BIAS_ONLY)

rows = hn.ablate({"slow": slow, "fwl": fwl, "bias": bias}, dev,
                 dyneval_chunk=32)
print(hn.ablation_table(rows), flush=True)
print("alphas:", {k: round(float(v), 4) for k, v in fwl.model.alpha.items()})
print("bias alpha c:", round(float(bias.model.alpha["c"]), 4))

base = hn.score(fwl, dev, "baseline")
fast = hn.score(fwl, dev, "fwl")
rep = hn.analyze(base.nll_docs, fast.nll_docs, dev)
print("repeat fraction:", round(rep.repeat_fraction, 3))
print("occurrence:", [(b["bucket"], b["count"], round(b["improvement"], 4))
                      for b in rep.occurrence_buckets])
print("deciles:", [round(b["improvement"], 4) for b in rep.position_deciles])
print(f"total {time.perf_counter() - t_start:.0f}s")
