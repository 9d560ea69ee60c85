import json
import sys
import time
import numpy as np
from fastweight import training as tr, backbone as bb, head as hd, harness as hn
from fastweight.checkpoint import CheckpointData, load_checkpoint
from fastweight.corpus import corpus_from_text, make_entity_corpus

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 8000
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

corpus = corpus_from_text(make_entity_corpus(4000, seed=100, sentences_per_doc=12), "word")
dev = corpus_from_text(make_entity_corpus(40, seed=101, sentences_per_doc=12),
                       corpus.tokenizer)
print("train", corpus.n_tokens, "dev", dev.n_tokens, flush=True)


def run(label, mode, mask=hd.MASK_ALL):
    mcfg = tr.ModelConfig(
        backbone=bb.BackboneConfig(vocab_size=corpus.vocab_size, d_model=64,
                                   n_layers=2, n_heads=4, d_ff=256,
                                   max_seq_len=128, memory_len=64, seed=seed),
        d_hidden=64, chunk_size=32, mask=mask)
    tcfg = tr.TrainConfig(mode=mode, batch_size=8, seq_len=96, learning_rate=3e-3,
                          total_steps=steps, warmup_steps=100, eval_every=500,
                          seed=seed)
    t0 = time.perf_counter()
    out = f"/tmp/curve_{label}_{seed}"
    res = tr.fit(corpus, tcfg, mcfg, dev_corpus=dev, out_dir=out)
    curve = []
    for line in open(f"{out}/metrics.jsonl"):
        rec = json.loads(line)
        if "dev_ppl" in rec:
            curve.append((rec["step"], round(rec["dev_ppl"], 3)))
    print(f"{label}: {time.perf_counter()-t0:.0f}s curve {curve}", flush=True)
    return CheckpointData(res.model, tcfg, corpus.tokenizer, None, steps), out


slow, slow_dir = run("slow", "slow-only")
bias, bias_dir = run("bias", "full", hd.MASK_BIAS_ONLY)
fwl, fwl_dir = run("fwl", "full")

for label, final, best_dir in (("slow", slow, slow_dir), ("bias", bias, bias_dir),
                               ("fwl", fwl, fwl_dir)):
    best = load_checkpoint(f"{best_dir}/best.ckpt")
    variant = {"slow": "baseline", "bias": "bias-only", "fwl": "fwl"}[label]
    final_ppl = hn.score(final, dev, variant).perplexity
    best_ppl = hn.score(CheckpointData(best.model, None, corpus.tokenizer, None, 0),
                        dev, variant).perplexity
    print(f"{label}: final {final_ppl:.3f} best-ckpt {best_ppl:.3f}", flush=True)

step, tto = hn.tune_global_step(slow, dev, [0.003, 0.01, 0.03, 0.1, 0.3])
print(f"TTO on final slow: {tto:.3f} (step {step})")
