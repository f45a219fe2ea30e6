"""Class-based cross-modal retrieval evaluation, baselines, and the
mask-ratio sweep.

Relevance is class membership; every test item queries the full test split of
the other modality, ranked by cosine similarity (ties broken by ascending
gallery index).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import cca_linear
from .model import embed_arrays
from .trainer import TrainConfig, train


@dataclass(frozen=True)
class RetrievalReport:
    map_a2v: float
    map_v2a: float
    map_avg: float
    ap_a2v: np.ndarray
    ap_v2a: np.ndarray

    @property
    def gap(self):
        return abs(self.map_a2v - self.map_v2a)


def average_precision(relevance):
    """AP of a ranked 0/1 relevance sequence: mean precision at relevant ranks."""
    bits = np.asarray(relevance, dtype=np.int64)
    total = int(bits.sum())
    if total == 0:
        raise ValueError("average_precision: no relevant items")
    hits = np.flatnonzero(bits)
    return float(np.mean(np.cumsum(bits)[hits] / (hits + 1)))


def _rank_gallery(sim_row):
    # descending similarity, ties toward the lower gallery index
    return np.lexsort((np.arange(sim_row.size), -sim_row))


def _direction_aps(sims, query_labels, gallery_labels):
    aps = []
    for i in range(sims.shape[0]):
        order = _rank_gallery(sims[i])
        bits = gallery_labels[order] == query_labels[i]
        if not bits.any():
            warnings.warn(f"query {i}: no relevant gallery items, excluded")
            continue
        aps.append(average_precision(bits))
    return np.asarray(aps)


def cross_modal_map(z_a, z_v, labels):
    """mAP in both directions on unit-normalized embeddings."""
    z_a = np.asarray(z_a, dtype=np.float64)
    z_v = np.asarray(z_v, dtype=np.float64)
    labels = np.asarray(labels)
    if not (z_a.shape[0] == z_v.shape[0] == labels.shape[0]):
        raise ValueError("cross_modal_map: inconsistent sample counts")
    sims = z_a @ z_v.T
    ap_a2v = _direction_aps(sims, labels, labels)
    ap_v2a = _direction_aps(sims.T, labels, labels)
    map_a2v = float(ap_a2v.mean())
    map_v2a = float(ap_v2a.mean())
    return RetrievalReport(map_a2v=map_a2v, map_v2a=map_v2a,
                           map_avg=(map_a2v + map_v2a) / 2.0,
                           ap_a2v=ap_a2v, ap_v2a=ap_v2a)


def _normalize_rows(z):
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return np.where(norms >= 1e-12, z / np.where(norms >= 1e-12, norms, 1.0), 0.0)


def retrieval_embeddings(mp, cca_model, audio, visual):
    """Clean eval-mode embeddings, optionally through the appended linear CCA,
    rows L2-normalized for cosine retrieval."""
    za, zv = embed_arrays(mp, audio, visual)
    if cca_model is not None:
        za, zv = cca_linear.transform(cca_model, za, zv)
    return _normalize_rows(za), _normalize_rows(zv)


def evaluate_model(mp, cca_model, test_set):
    za, zv = retrieval_embeddings(mp, cca_model, test_set.audio, test_set.visual)
    return cross_modal_map(za, zv, test_set.labels)


BASELINES = ("random", "cca", "infonce-single")


def run_baseline(name, train_set, test_set, cfg):
    """Table-style reference systems.

    random: fixed-seed random unit embeddings. cca: linear CCA fitted on the
    raw training features (p = cfg.cca_post_dim). infonce-single: the same
    architecture trained with only the single-positive symmetric contrastive
    loss (identity affinity rows, no masking), scored on its raw projections.
    """
    if test_set.labels is None:
        raise ValueError("run_baseline: labeled test split required")
    if name == "random":
        rng = np.random.default_rng(cfg.seed)
        za = _normalize_rows(rng.normal(size=(test_set.n, cfg.model.proj_dim)))
        zv = _normalize_rows(rng.normal(size=(test_set.n, cfg.model.proj_dim)))
        return cross_modal_map(za, zv, test_set.labels)
    if name == "cca":
        p = min(cfg.cca_post_dim, train_set.audio.shape[1], train_set.visual.shape[1])
        model = cca_linear.fit(train_set.audio, train_set.visual, p=p, eps=cfg.cca_eps)
        za, zv = cca_linear.transform(model, test_set.audio, test_set.visual)
        return cross_modal_map(_normalize_rows(za), _normalize_rows(zv), test_set.labels)
    if name == "infonce-single":
        bcfg = replace(cfg, use_rec=False, use_cca=False, use_dis=False, use_infonce=True,
                       identity_affinities=True, mask_ratio=0.0)
        result = train(train_set.unlabeled(), bcfg)
        za, zv = retrieval_embeddings(result.params, None, test_set.audio, test_set.visual)
        return cross_modal_map(za, zv, test_set.labels)
    raise ValueError(f"unknown baseline {name!r}; options: {', '.join(BASELINES)}")


DEFAULT_SWEEP_RATIOS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


def mask_ratio_sweep(train_set, test_set, cfg, ratios=DEFAULT_SWEEP_RATIOS):
    """One full training per ratio with a shared seed; rows of
    (ratio, map_a2v, map_v2a, avg, gap)."""
    rows = []
    for ratio in ratios:
        result = train(train_set.unlabeled(), replace(cfg, mask_ratio=float(ratio)))
        report = evaluate_model(result.params, result.cca_model, test_set)
        rows.append((float(ratio), report.map_a2v, report.map_v2a, report.map_avg, report.gap))
    return rows


def rank_list_rows(z_a, z_v, labels, direction="a2v", top=10):
    """Per-query top-N rank lists as CSV rows (query id, ranked gallery ids,
    relevance bits)."""
    sims = z_a @ z_v.T if direction == "a2v" else z_v @ z_a.T
    labels = np.asarray(labels)
    rows = ["query,rank,gallery,relevant"]
    for i in range(sims.shape[0]):
        order = _rank_gallery(sims[i])[:top]
        for rank, j in enumerate(order, start=1):
            rows.append(f"{i},{rank},{j},{int(labels[j] == labels[i])}")
    return rows


def report_rows(reports):
    """Table-style CSV rows for (name, RetrievalReport) pairs."""
    rows = ["name,map_a2v,map_v2a,map_avg,gap"]
    for name, rep in reports:
        rows.append(f"{name},{rep.map_a2v!r},{rep.map_v2a!r},{rep.map_avg!r},{rep.gap!r}")
    return rows
