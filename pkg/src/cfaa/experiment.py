"""End-to-end runs: build a two-domain benchmark, train an ablation arm, evaluate."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model
from .data import (TEST, DomainData, SyntheticSpec, attach_reviews, gen_synthetic,
                   load_ratings, load_review_embeddings, prepare, sample_pair,
                   split_dataset)
from .evaluate import candidate_lists, domain_discrepancy, rank_metrics, score_cases
from .model import LossReport, TrainConfig

log = logging.getLogger(__name__)


@dataclass
class Benchmark:
    source: DomainData
    target: DomainData

    def sizes(self) -> dict:
        s, t = self.source.ds, self.target.ds
        return {
            "src_user": (s.n_users, s.n_items),
            "src_item": (s.n_items, s.n_users),
            "tgt_user": (t.n_users, t.n_items),
            "tgt_item": (t.n_items, t.n_users),
        }

    @property
    def d_rev(self) -> int:
        return self.source.reviews.dim


def synthetic_benchmark(spec: SyntheticSpec, min_records: int = 30, threshold: float = 4,
                        target_keep_fraction: float = 1.0, split_seed: int = 0) -> Benchmark:
    src, tgt, _ = gen_synthetic(spec)
    s = split_dataset(prepare(src.raw, "source", threshold, min_records), seed=split_seed)
    t = split_dataset(prepare(tgt.raw, "target", threshold, min_records,
                              target_keep_fraction, split_seed), seed=split_seed)
    return Benchmark(DomainData(s, attach_reviews(s, src)), DomainData(t, attach_reviews(t, tgt)))


def load_benchmark(source_ratings, target_ratings, source_reviews, target_reviews,
                   threshold: float = 4, min_records: int = 30,
                   target_keep_fraction: float = 1.0, split_seed: int = 0) -> Benchmark:
    """Benchmark from ratings TSVs plus review-vector containers."""
    sides = []
    for domain, ratings, reviews in (("source", source_ratings, source_reviews),
                                     ("target", target_ratings, target_reviews)):
        ds = load_ratings(ratings, domain, threshold, min_records, target_keep_fraction,
                          split_seed)
        ds = split_dataset(ds, seed=split_seed)
        sides.append(DomainData(ds, load_review_embeddings(reviews, ds)))
    if sides[0].reviews.dim != sides[1].reviews.dim:
        raise ValueError("source and target review vectors differ in width")
    return Benchmark(*sides)


@dataclass
class TrainResult:
    params: dict
    adam: model.AdamState
    reports: list = field(default_factory=list)


def train(bench: Benchmark, config: TrainConfig, steps: int, log_every: int = 0,
          params: dict | None = None, adam: model.AdamState | None = None,
          data_seed: int | None = None) -> TrainResult:
    """Run ``steps`` joint updates starting from fresh (or given) parameters."""
    if params is None:
        params = model.init_params(bench.sizes(), bench.d_rev, config)
    if adam is None:
        adam = model.AdamState.for_params(params, config)
    seed = config.seed if data_seed is None else data_seed
    reports = []
    for _ in range(steps):
        batch = sample_pair(bench.source, bench.target, config.batch_size, seed, adam.step)
        params, rep = model.train_step(params, batch, adam, config)
        reports.append(rep)
        if log_every and rep.step % log_every == 0:
            log.info("step %d  L=%.4f  L_C=%.4f  L_O=%.3e  L_A=%.3e",
                     rep.step, rep.L, rep.L_C, rep.L_O, rep.L_A)
    return TrainResult(params, adam, reports)


def all_embeddings(params: dict, bench: Benchmark, nonlinearity: str = "tanh") -> dict:
    """Full-catalogue embeddings for the four towers."""
    s, t = bench.source, bench.target
    return {
        "U_S": model.entity_embeddings(params, "src_user", s.user_hist, s.reviews.users, nonlinearity),
        "V_S": model.entity_embeddings(params, "src_item", s.item_hist, s.reviews.items, nonlinearity),
        "U_T": model.entity_embeddings(params, "tgt_user", t.user_hist, t.reviews.users, nonlinearity),
        "V_T": model.entity_embeddings(params, "tgt_item", t.item_hist, t.reviews.items, nonlinearity),
    }


def evaluate_model(params: dict, bench: Benchmark, config: TrainConfig, k: int = 10,
                   n_negatives: int = 99, seed: int = 0, split: int = TEST) -> dict:
    """Sampled-candidate ranking metrics on the target domain."""
    emb = all_embeddings(params, bench, config.nonlinearity)
    lists = candidate_lists(bench.target, split, n_negatives, seed)

    def score(users, items):
        return model.score_pairs(params, emb["U_T"][users], emb["V_T"][items], config.nonlinearity)

    return rank_metrics(score_cases(lists, score), k)


def align_diagnostics(params: dict, bench: Benchmark, config: TrainConfig, seed: int = 0,
                      folds: int = 5) -> dict:
    """Alignment losses on one seeded batch plus the user/item proxy A-distance."""
    batch = sample_pair(bench.source, bench.target, config.batch_size, seed, 0)
    _, _, parts = model.objective(params, batch, config, report_all=True)
    emb = all_embeddings(params, bench, config.nonlinearity)
    rep = domain_discrepancy(emb["U_S"], emb["U_T"], emb["V_S"], emb["V_T"], folds, seed)
    return {
        "L_C": parts["L_C"].item(),
        "L_O": parts["L_O"].item(),
        "L_A": parts["L_A"].item(),
        "d_A_user": rep.sides["user"].d_A,
        "d_A_item": rep.sides["item"].d_A,
        "d_A": rep.d_A,
    }


ARM_ORDER = ("base", "v", "h", "full")


@dataclass
class AblationResult:
    """Per-arm, per-seed target metrics and proxy A-distances."""
    seeds: tuple
    hr: dict        # arm -> list over seeds
    ndcg: dict
    d_A_user: dict
    d_A_item: dict
    seconds: float = 0.0

    def mean(self, table: str, arm: str) -> float:
        return float(np.mean(getattr(self, table)[arm]))

    def summary(self) -> str:
        lines = [f"{'arm':<5} {'HR@10':>8} {'NDCG@10':>8} {'dA_user':>8} {'dA_item':>8}"]
        for arm in self.hr:
            lines.append(f"{arm:<5} {self.mean('hr', arm):8.4f} {self.mean('ndcg', arm):8.4f} "
                         f"{self.mean('d_A_user', arm):8.4f} {self.mean('d_A_item', arm):8.4f}")
        lines.append(f"seeds={list(self.seeds)} wall={self.seconds:.1f}s")
        return "\n".join(lines)


def run_ablation(seeds=(0, 1, 2, 3, 4), steps: int = 300, arms=ARM_ORDER,
                 spec_kwargs: dict | None = None, k: int = 10, **config_kwargs) -> AblationResult:
    """Train every arm on the synthetic benchmark for each seed.

    The seed drives data generation, parameter initialisation and batching;
    all arms of one seed share the same benchmark and initial parameters.
    """
    import time
    start = time.perf_counter()
    out = {name: {a: [] for a in arms} for name in ("hr", "ndcg", "d_A_user", "d_A_item")}
    for seed in seeds:
        bench = synthetic_benchmark(SyntheticSpec(seed=seed, **(spec_kwargs or {})))
        for arm in arms:
            cfg = TrainConfig(arm=arm, seed=seed, **config_kwargs)
            res = train(bench, cfg, steps)
            m = evaluate_model(res.params, bench, cfg, k=k, seed=seed)
            emb = all_embeddings(res.params, bench, cfg.nonlinearity)
            rep = domain_discrepancy(emb["U_S"], emb["U_T"], emb["V_S"], emb["V_T"], seed=seed)
            out["hr"][arm].append(m["HR"])
            out["ndcg"][arm].append(m["NDCG"])
            out["d_A_user"][arm].append(rep.sides["user"].d_A)
            out["d_A_item"][arm].append(rep.sides["item"].d_A)
            log.info("seed %d arm %s HR=%.4f dA_user=%.3f dA_item=%.3f", seed, arm, m["HR"],
                     rep.sides["user"].d_A, rep.sides["item"].d_A)
    return AblationResult(tuple(seeds), **out, seconds=time.perf_counter() - start)
