"""Ablation sweeps: ensemble size, denoising step, latent space, similar experts."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import NoiseSchedule
from .engine import EMoE, SPACES, ExpertBundle
from .experiments import (Corpus, CorpusEntry, PromptScore, csv_text, dump_json, score_corpus,
                          split_test, write_text)
from .stats import welch_t_test


def ensemble_subsets(M: int) -> list[tuple[int, ...]]:
    """All expert subsets of size ``2..M-1`` plus the full ensemble, in lexicographic order."""
    if M < 2:
        raise ValueError("subset sweep needs M >= 2")
    out = [c for k in range(2, M) for c in combinations(range(M), k)]
    return out + [tuple(range(M))]


@dataclass(frozen=True)
class SubsetResult:
    experts: tuple[int, ...]
    in_dist_mean: float
    ood_mean: float
    p_value: float | None

    def to_dict(self) -> dict:
        return {"experts": list(self.experts), "in_dist_mean": self.in_dist_mean,
                "ood_mean": self.ood_mean, "p_value": self.p_value}


def _split_mean(scores: Sequence[PromptScore], split: str) -> float:
    v = [s.reported for s in scores if s.split == split]
    return float(np.mean(v)) if v else float("nan")


def ensemble_size_sweep(bundle: ExpertBundle, schedule: NoiseSchedule, entries: Sequence[CorpusEntry],
                        seed: int, ood_split: str = "ood_remap") -> dict:
    """In-dist vs OOD separation for every subset, plus per-size averages."""
    results = []
    for sub in ensemble_subsets(bundle.M):
        eng = EMoE(bundle.subset(sub), schedule)
        scores = score_corpus(eng, entries, seed, with_alignment=False)
        test = split_test(scores, ood_split)
        results.append(SubsetResult(sub, _split_mean(scores, "in_dist"), _split_mean(scores, ood_split),
                                    None if test is None else test.p_value))
    by_size = {}
    for size in sorted({len(r.experts) for r in results}):
        rs = [r for r in results if len(r.experts) == size]
        ps = [r.p_value for r in rs if r.p_value is not None]
        by_size[str(size)] = {"n_subsets": len(rs),
                              "in_dist_mean": float(np.mean([r.in_dist_mean for r in rs])),
                              "ood_mean": float(np.mean([r.ood_mean for r in rs])),
                              "p_value_mean": float(np.mean(ps)) if ps else None}
    return {"subsets": [r.to_dict() for r in results], "by_size": by_size}


def step_series(engine: EMoE, entries: Sequence[CorpusEntry], seed: int, space: str = "mid_post") -> list[dict]:
    """Reported uncertainty with separation re-run at every step of one aggregate trajectory."""
    rows = []
    for e in entries:
        for est, t in zip(engine.uncertainty_series(e.prompt, seed, space), range(engine.schedule.T, 0, -1)):
            rows.append({"prompt": e.prompt.text, "language_tag": e.prompt.language_tag, "split": e.split,
                         "t": t, "reported": est.reported})
    return rows


def space_ablation(scores: Sequence[PromptScore], ood_split: str = "ood_remap") -> dict:
    """Per-space separation, from the estimates every score already carries."""
    out = {}
    for space in SPACES:
        a = [s.reported_by_space[space] for s in scores if s.split == ood_split]
        b = [s.reported_by_space[space] for s in scores if s.split == "in_dist"]
        entry = {"in_dist_mean": float(np.mean(b)) if b else None, "ood_mean": float(np.mean(a)) if a else None,
                 "p_value": None}
        if len(a) >= 2 and len(b) >= 2:
            entry["p_value"] = welch_t_test(a, b).p_value
        out[space] = entry
    return out


def similar_bundle_check(bundle: ExpertBundle, schedule: NoiseSchedule, entries: Sequence[CorpusEntry],
                         seed: int, ood_split: str = "ood_remap") -> dict:
    scores = score_corpus(EMoE(bundle, schedule), entries, seed, with_alignment=False)
    test = split_test(scores, ood_split)
    return {"in_dist_mean": _split_mean(scores, "in_dist"), "ood_mean": _split_mean(scores, ood_split),
            "welch": None if test is None else test.to_dict()}


def run_ablations(bundle: ExpertBundle, schedule: NoiseSchedule, corpus: Corpus, seed: int,
                  out_dir: str | Path, config_hash: str, similar: ExpertBundle | None = None,
                  scores: Sequence[PromptScore] | None = None, step_prompts: int = 8,
                  space: str = "mid_post") -> dict:
    """Run every sweep and write ``ablations.json`` plus plot-ready CSVs."""
    entries = [e for e in corpus.entries if e.split in ("in_dist", "ood_remap")]
    engine = EMoE(bundle, schedule)
    if scores is None:
        scores = score_corpus(engine, entries, seed, space, with_alignment=False)
    half = max(step_prompts // 2, 1)
    step_entries = corpus.split("in_dist")[:half] + corpus.split("ood_remap")[:half]
    sizes = ensemble_size_sweep(bundle, schedule, entries, seed)
    steps = step_series(engine, step_entries, seed, space)
    report = {
        "config_hash": config_hash,
        "seed": seed,
        "ensemble_size": sizes,
        "step_series": steps,
        "spaces": space_ablation(scores),
        "similar_experts": None if similar is None else similar_bundle_check(similar, schedule, entries, seed),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "ablations.json", dump_json(report))
    write_text(out / "ensemble_size.csv", csv_text(
        ["experts", "in_dist_mean", "ood_mean", "p_value"],
        [("-".join(map(str, r["experts"])), r["in_dist_mean"], r["ood_mean"], r["p_value"])
         for r in sizes["subsets"]]))
    write_text(out / "step_series.csv", csv_text(
        ["prompt", "language_tag", "split", "t", "reported"],
        [(r["prompt"], r["language_tag"], r["split"], r["t"], r["reported"]) for r in steps]))
    write_text(out / "spaces.csv", csv_text(
        ["space", "in_dist_mean", "ood_mean", "p_value"],
        [(k, v["in_dist_mean"], v["ood_mean"], v["p_value"]) for k, v in report["spaces"].items()]))
    return report
