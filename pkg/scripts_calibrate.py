"""Focused sweep: full-variant readout + cluster count + dual batch (throwaway)."""
import sys
import time

import numpy as np

from textent.encoder import ModelConfig
from textent.evaluation import (EvalConfig, TfidfIndex, evaluate_retrieval,
                                evaluate_tag_scores, zero_shot_rank)
from textent.finetune import (FinetuneConfig, run_finetune, score_tag_matrix,
                              split_holdout)
from textent.objectives import TrainingConfig, pretrain
from textent.synthetic import SyntheticWorldSpec, generate_synthetic

WORLDS = {}


def world_for(clusters):
    if clusters not in WORLDS:
        w = generate_synthetic(SyntheticWorldSpec(seed=7, distractor_ratio=0.75,
                                                  clusters=clusters))
        rng = np.random.default_rng(np.random.SeedSequence((5, 1)))
        split = split_holdout(w.votes.entity_ids(), 0.2, rng)
        index = TfidfIndex(w.corpus, w.vocab)
        rows = evaluate_tag_scores(
            {e: index.tag_scores(e, w.votes.tags) for e in split[1]},
            w.votes, EvalConfig(precision_ks=(1,)), split[1], w.votes.tags)
        tmap = next(r["value"] for r in rows if r["metric"] == "map")
        print(f"world clusters={clusters}: tfidf MAP {tmap:.4f}", flush=True)
        WORLDS[clusters] = (w, split, tmap)
    return WORLDS[clusters]


PRETRAINED = {}


def pretrained(clusters, variant, tau, wm, em, B=96, seed=12):
    key = (clusters, variant, tau, wm, em, B, seed)
    if key not in PRETRAINED:
        w, _, _ = world_for(clusters)
        cfg = ModelConfig.for_vocab(w.vocab, variant)
        train = TrainingConfig(steps=2000, seed=seed, batch_size=B, score_scale=tau,
                               word_mask_rate=wm, entity_mask_rate=em, log_every=0)
        t0 = time.time()
        params, _ = pretrain(w.corpus, w.vocab, cfg, train)
        mrr_txt = ""
        if variant != "full":
            ranked = [zero_shot_rank(params, w.vocab, q.text) for q in w.queries]
            rws = evaluate_retrieval(ranked, w.queries, EvalConfig())
            mrr = next(r["value"] for r in rws if r["metric"] == "mrr")
            mrr_txt = f" MRR {mrr:.3f}"
        print(f"  pretrained c={clusters} {variant} tau={tau} wm={wm} em={em} "
              f"B={B}:{mrr_txt} [{time.time()-t0:.0f}s]", flush=True)
        PRETRAINED[key] = params
    return PRETRAINED[key]


def ft(clusters, variant, tau, wm, em, *, B=96, ftep=8, fttau=4.0, ftlr=1e-3,
       neg=0.10):
    w, (train_e, held_e), tmap = world_for(clusters)
    params = pretrained(clusters, variant, tau, wm, em, B)
    t0 = time.time()
    tuned = run_finetune(params, w.votes,
                         FinetuneConfig(epochs=ftep, seed=5, score_scale=fttau,
                                        lr=ftlr, negative_rate=neg),
                         w.vocab, train_e)
    scores = score_tag_matrix(tuned.params, w.vocab, held_e, w.votes.tags,
                              score_scale=fttau)
    rws = evaluate_tag_scores(scores, w.votes, EvalConfig(precision_ks=(1,)),
                              held_e, w.votes.tags)
    m = next(r["value"] for r in rws if r["metric"] == "map")
    a = next(r["value"] for r in rws if r["metric"] == "auc")
    print(f"c={clusters} {variant} ftep={ftep} fttau={fttau} lr={ftlr} neg={neg}: "
          f"MAP {m:.4f} AUC {a:.4f} beats={m > tmap} [{time.time()-t0:.0f}s]",
          flush=True)


stage = sys.argv[1] if len(sys.argv) > 1 else "full"
if stage == "full":
    # full-variant readout grid at clusters=5
    ft(5, "full", 4.0, 0.15, 0.8, ftep=20, neg=0.25)
    ft(5, "full", 4.0, 0.15, 0.8, ftep=40, ftlr=5e-4, neg=0.25)
    ft(5, "full", 4.0, 0.15, 0.8, ftep=40, ftlr=5e-4)
elif stage == "clusters":
    ft(6, "dual", 8.0, 0.0, 0.0, fttau=8.0)
    ft(6, "hybrid", 8.0, 0.3, 0.0)
    ft(6, "full", 4.0, 0.15, 0.8, ftep=20, neg=0.25)
elif stage == "dualbig":
    ft(5, "dual", 8.0, 0.0, 0.0, B=160, fttau=8.0)
