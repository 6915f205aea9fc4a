"""
Blending text scores with a TransE baseline
===========================================

Score matrices from both models feed the ensemble, which re-ranks the text
model's top-k with a per-query weight alpha.
"""

import torch

from star_kgc.encoder import EncoderConfig, TextBank, precompute_entity_reps
from star_kgc.ensemble import EnsembleConfig, SelfAdaptiveEnsemble, prepare_queries, train_ensemble
from star_kgc.evaluation import StarScorer, evaluate
from star_kgc.geo import GeoConfig, GeoScorer, train_geo
from star_kgc.kg import make_synthetic_graph
from star_kgc.training import TrainConfig, train_star

torch.set_num_threads(1)
kg = make_synthetic_graph(n_entities=80, n_relations=4, seed=1)

star, _ = train_star(kg, EncoderConfig(d_h=32, n_layers=1, n_heads=2, d_ff=64, max_len_hr=16, max_len_t=8), TrainConfig(epochs=4, eval_every=0))
bank = TextBank(kg, star.vocab, star.cfg)
geo, _ = train_geo(kg, GeoConfig(dim=32, epochs=100, batch_size=128))


def matrices(split):
    s = evaluate(StarScorer(star, bank), kg, split=split, keep_scores=True)
    g = evaluate(GeoScorer(geo), kg, split=split, keep_scores=True)
    print(f"{split}: text MRR {s.mrr:.3f}, TransE MRR {g.mrr:.3f}")
    as_dict = lambda r: {q: (d, v) for q, d, v in r.score_blocks}
    return as_dict(s), as_dict(g)


reps = precompute_entity_reps(star, bank).reps.numpy()
cfg = EnsembleConfig(k=20, m_sim=20, epochs=10, hidden=16)
dev = prepare_queries(kg, kg.dev, *matrices("dev"), reps, cfg)
test = prepare_queries(kg, kg.test, *matrices("test"), reps, cfg)

# The plain average is the fixed-alpha baseline.
avg = SelfAdaptiveEnsemble(EnsembleConfig(k=20, mode="fixed", alpha=0.5)).evaluate(test)
print(f"alpha = 0.5     MRR {avg.mrr:.3f}")

ens, stats = train_ensemble(dev, cfg)
report = ens.evaluate(test)
alphas = [a for _, a in report.alphas]
print(f"self-adaptive   MRR {report.mrr:.3f}  mean alpha {sum(alphas) / len(alphas):.2f}  skipped {stats['skipped']}/{stats['queries']}")
