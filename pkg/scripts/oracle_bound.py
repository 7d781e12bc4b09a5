"""Validation loss of the true generating process on the acceptance corpus.

Scores each validation sample with the exact next-event distribution of the
simulated Hawkes process (numerical quadrature over the survival function) and
compares that loss with the epoch-0 loss of a freshly initialised network.
The ratio bounds how much any model can reduce the validation loss.

    python3 scripts/oracle_bound.py [--n-entities 200] [--horizon 200]
"""
import argparse
import collections
import math

import numpy as np
from scipy import integrate

from twinpp.data import Normalization, WindowConfig, build_samples, split_entities
from twinpp.model import ClassWeights, ModelConfig, collate, init_params
from twinpp.ppsim import SyntheticSpec, chain_hawkes, make_synthetic_dataset
from twinpp.trainer import dataset_loss


def sample_loss(mu, A, beta, state, rem, target_sub, target_main, gap, parent, sigma2=10.0):
    a = A @ state
    total_mu, total_a = mu.sum(), a.sum()

    def surv(x):
        return math.exp(-(total_mu * x + total_a * (1 - math.exp(-beta * x)) / beta))

    z = 1 - surv(rem)
    p_sub = np.array([integrate.quad(lambda x: (mu[d] + a[d] * math.exp(-beta * x)) * surv(x),
                                     0, rem, limit=200)[0] for d in range(len(mu))]) / z
    mean_gap = integrate.quad(lambda x: x * (total_mu + total_a * math.exp(-beta * x)) * surv(x),
                              0, rem, limit=200)[0] / z
    p_main = np.bincount(parent, weights=p_sub)
    ce = -math.log(max(p_sub[target_sub], 1e-300)) - math.log(max(p_main[target_main], 1e-300))
    return ce + 0.5 * math.log(2 * math.pi * sigma2) + (gap - mean_gap) ** 2 / (2 * sigma2)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-entities", type=int, default=200)
    ap.add_argument("--horizon", type=float, default=200.0)
    ap.add_argument("--beta", type=float, default=4.0)
    ap.add_argument("--chain-base", type=float, default=0.01)
    ap.add_argument("--chain-forward", type=float, default=0.7)
    a = ap.parse_args()

    spec = SyntheticSpec(n_entities=a.n_entities, horizon=a.horizon, beta=a.beta,
                         chain_base=a.chain_base, chain_forward=a.chain_forward,
                         chain_self_excite=0.0, age_effect=1.0)
    ds = make_synthetic_dataset(spec, 0)
    tax = ds.taxonomy
    A = chain_hawkes(len(tax.sub_types), base=a.chain_base, forward=a.chain_forward,
                     self_excite=0.0, beta=a.beta).adjacency
    prof = {p.entity_id: p for p in ds.profiles}
    rest, _ = split_entities(sorted(prof), 0.3, 0)
    train_ids, val_ids = split_entities(rest, 0.2, 1)
    norm = Normalization.fit(prof[e] for e in train_ids)
    val = build_samples([r for r in ds.events if r.entity_id in set(val_ids)], prof,
                        WindowConfig(), tax, norm).samples

    by = collections.defaultdict(list)
    for r in ds.events:
        by[r.entity_id].append((r.timestamp, tax.sub_id(r.sub_type)))
    losses = []
    for s in val:
        mu = np.array(ds.manifest["entities"][s.entity_id]["mu"])
        state = np.zeros(len(tax.sub_types))
        for t, d in by[s.entity_id]:
            if t <= s.anchor:
                state[d] += math.exp(-a.beta * (s.anchor - t))
        losses.append(sample_loss(mu, A, a.beta, state, a.horizon - s.anchor, s.target_sub,
                                  s.target_main, s.target_gap, np.array(tax.parent)))

    cfg = ModelConfig(k_main=len(tax.main_types), k_sub=len(tax.sub_types),
                      ts_feature_dim=val[0].ts_window.shape[1], head_mode="hierarchical",
                      sub_parent=tax.parent)
    start = dataset_loss(init_params(cfg, 0), collate(val), ClassWeights.ones(cfg), cfg)
    best = float(np.mean(losses))
    print(f"validation samples {len(val)}")
    print(f"epoch-0 loss {start:.4f}  true-process loss {best:.4f}  "
          f"largest possible reduction {1 - best / start:.3f}")


if __name__ == "__main__":
    main()
