"""Corpus construction, alignment proxy, scoring, quartile reports and the GP probe."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import RngStream, ensemble_mean_var
from .engine import EMoE, SPACES, epistemic_uncertainty
from .stats import TrendTestResult, jonckheere_terpstra, pearson, quartile_split, welch_t_test
from .synthetic import UNSEEN_WORDS, VOCABULARY, Semantics, mean_latent, parse, sample_semantics
from .text import Prompt, words

log = logging.getLogger(__name__)

SPLITS = ("in_dist", "ood_remap", "ood_unseen_token")
REMAP_TAG = "xx-remap"
QUARTILE_SPLITS = ("in_dist", "ood_unseen_token")

_STREAM_IN, _STREAM_REMAP, _STREAM_UNSEEN = 0xC0C0_0001, 0xC0C0_0002, 0xC0C0_0003


class DegenerateEnsemble(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class CorpusEntry:
    prompt: Prompt
    split: str
    reference: Prompt  # in-vocabulary prompt whose semantics the alignment is scored against
    n_unseen: int = 0


@dataclass
class Corpus:
    entries: list[CorpusEntry]

    def __post_init__(self):
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split {e.split!r}")

    def __len__(self):
        return len(self.entries)

    @property
    def prompts(self) -> list[Prompt]:
        return [e.prompt for e in self.entries]

    def split(self, name: str) -> list[CorpusEntry]:
        return [e for e in self.entries if e.split == name]


def perturb(sem: Semantics, k: int, stream: RngStream) -> str:
    """Replace ``k`` content words (color, shape, modifiers) by unseen words of the same slot."""
    toks = sem.text().split()
    slots = [(1, "color"), (2, "shape")] + [(3 + j, "modifier") for j in range(len(sem.modifiers))]
    if not 0 <= k <= len(slots):
        raise ValueError(f"cannot replace {k} of {len(slots)} content words")
    order = stream.permutation(len(slots))
    picks = stream.uniform_ints(10**6, max(k, 1))
    for j, o in enumerate(order[:k]):
        pos, slot = slots[o]
        pool = UNSEEN_WORDS[slot]
        toks[pos] = pool[int(picks[j]) % len(pool)]
    return " ".join(toks)


def make_corpus(seed: int, n_in_dist: int = 200, n_ood_remap: int = 200, n_ood_unseen: int = 200,
                max_unseen: int = 3) -> Corpus:
    """Deterministic three-split corpus.

    ``ood_remap`` prompts are grammar prompts in the remapped vocabulary.
    ``ood_unseen_token`` prompts have ``k = 1..max_unseen`` content words
    replaced (cycling through ``k``; capped by the prompt's word count).
    """
    if n_in_dist + n_ood_remap + n_ood_unseen == 0:
        raise ValueError("corpus size must be >= 1")
    if max_unseen < 1:
        raise ValueError("max_unseen must be >= 1")
    entries = []
    if n_in_dist:
        for s in sample_semantics(RngStream(seed, _STREAM_IN), n_in_dist):
            p = Prompt(s.text())
            entries.append(CorpusEntry(p, "in_dist", p))
    if n_ood_remap:
        for s in sample_semantics(RngStream(seed, _STREAM_REMAP), n_ood_remap):
            entries.append(CorpusEntry(Prompt(s.text(), REMAP_TAG), "ood_remap", Prompt(s.text())))
    if n_ood_unseen:
        stream = RngStream(seed, _STREAM_UNSEEN)
        for i, s in enumerate(sample_semantics(stream, n_ood_unseen)):
            k = min(1 + i % max_unseen, 2 + len(s.modifiers))
            entries.append(CorpusEntry(Prompt(perturb(s, k, stream)), "ood_unseen_token", Prompt(s.text()), k))
    return Corpus(entries)


def is_training_vocabulary(prompt: Prompt) -> bool:
    return prompt.language_tag == "en" and all(w in VOCABULARY for w in words(prompt.text))


# ---------------------------------------------------------------------------
# alignment proxy


def alignment_score(z0: np.ndarray, prompt: Prompt) -> float:
    """``-||z0 - mean_latent(prompt)||^2``; 0 is perfect alignment.

    ``prompt`` must parse under the grammar; score OOD generations against
    their pre-perturbation reference prompt.
    """
    target = mean_latent(parse(prompt))
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != target.shape:
        raise ValueError(f"latent shape {z0.shape} does not match {target.shape}")
    return -float(np.sum((z0 - target) ** 2))


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class PromptScore:
    prompt: str
    language_tag: str
    split: str
    n_unseen: int
    eu: float
    reported: float
    alignment: float | None
    reported_by_space: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "language_tag": self.language_tag, "split": self.split,
                "n_unseen": self.n_unseen, "eu": self.eu, "reported": self.reported,
                "alignment": self.alignment,
                "reported_by_space": {s: self.reported_by_space[s] for s in SPACES}}


def score_entry(engine: EMoE, entry: CorpusEntry, seed: int, space: str = "mid_post",
                with_alignment: bool = True) -> PromptScore:
    """One separation pass yields every space's estimate; alignment comes from the aggregate sampler."""
    sep = engine.separate(entry.prompt, seed)
    ests = {s: epistemic_uncertainty(sep.members(s), s) for s in SPACES}
    align = None
    if with_alignment:
        align = alignment_score(engine.sample(entry.prompt, seed), entry.reference)
    est = ests[space]
    return PromptScore(entry.prompt.text, entry.prompt.language_tag, entry.split, entry.n_unseen,
                       est.eu, est.reported, align, {s: e.reported for s, e in ests.items()})


def score_corpus(engine: EMoE, corpus: Corpus | Sequence[CorpusEntry], seed: int, space: str = "mid_post",
                 with_alignment: bool = True, threads: int = 1) -> list[PromptScore]:
    entries = corpus.entries if isinstance(corpus, Corpus) else list(corpus)

    def one(e):
        return score_entry(engine, e, seed, space, with_alignment)

    if threads <= 1:
        return [one(e) for e in entries]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, entries))


# ---------------------------------------------------------------------------
# quartiles and tests


@dataclass(frozen=True)
class QuartileStats:
    quartile: int
    n: int
    reported_min: float
    reported_max: float
    alignment_mean: float
    alignment_std: float
    chars_mean: float
    chars_std: float
    words_mean: float
    words_std: float


@dataclass
class QuartileReport:
    bins: list[list[int]]
    stats: list[QuartileStats]

    @property
    def alignment_means(self) -> list[float]:
        return [s.alignment_mean for s in self.stats]

    def is_non_increasing(self) -> bool:
        m = self.alignment_means
        return all(m[i + 1] <= m[i] for i in range(3))

    def to_dict(self) -> list[dict]:
        return [vars(s) for s in self.stats]


def quartile_report(scores: Sequence[PromptScore]) -> QuartileReport:
    """Quartiles on reported uncertainty; per-bin alignment and prompt-length statistics."""
    rep = [s.reported for s in scores]
    bins = quartile_split(rep)
    out = []
    for q, idx in enumerate(bins):
        al = np.array([scores[i].alignment for i in idx], dtype=np.float64)
        chars = np.array([len(scores[i].prompt) for i in idx], dtype=np.float64)
        nw = np.array([len(words(scores[i].prompt)) for i in idx], dtype=np.float64)
        r = [rep[i] for i in idx]
        out.append(QuartileStats(q + 1, len(idx), min(r), max(r), float(al.mean()), float(al.std()),
                                 float(chars.mean()), float(chars.std()), float(nw.mean()), float(nw.std())))
    return QuartileReport(bins, out)


def quartile_trend_test(scores: Sequence[PromptScore], report: QuartileReport) -> TrendTestResult:
    """JT test for alignment decreasing from the lowest- to the highest-uncertainty quartile."""
    groups = [[scores[i].alignment for i in b] for b in report.bins]
    return jonckheere_terpstra(groups, alternative="decreasing")


def split_test(scores: Sequence[PromptScore], high: str, low: str = "in_dist") -> TrendTestResult | None:
    """Welch test that ``high`` has larger reported uncertainty than ``low``."""
    a = [s.reported for s in scores if s.split == high]
    b = [s.reported for s in scores if s.split == low]
    if len(a) < 2 or len(b) < 2:
        return None
    return welch_t_test(a, b)


# ---------------------------------------------------------------------------
# GP convergence probe


@dataclass(frozen=True)
class GPEstimate:
    mu_hat: np.ndarray
    k_hat: np.ndarray
    N: int

    def __post_init__(self):
        if np.any(self.k_hat < 0):
            raise ValueError("variance estimate must be nonnegative")


@dataclass(frozen=True)
class GPProbeRow:
    N: int
    mean_error: float
    var_rel_error: float


def probe_inputs(seed: int, n_inputs: int = 4, d_in: int = 4) -> np.ndarray:
    return RngStream(seed, 0x6900).normal((n_inputs, d_in))


def random_network_outputs(stream: RngStream, n_members: int, inputs: np.ndarray,
                           hidden: int = 32, d_out: int = 16) -> np.ndarray:
    """Outputs ``(n_members, n_inputs, d_out)`` of one-hidden-layer tanh nets with N(0, 1/fan_in) weights."""
    d_in = inputs.shape[1]
    w1 = stream.normal((n_members, d_in, hidden)) / np.sqrt(d_in)
    b1 = stream.normal((n_members, 1, hidden))
    w2 = stream.normal((n_members, hidden, d_out)) / np.sqrt(hidden)
    h = np.tanh(np.einsum("pi,mih->mph", inputs, w1) + b1)
    return np.einsum("mph,mho->mpo", h, w2)


def gp_estimate(outputs: np.ndarray) -> GPEstimate:
    mean, var = ensemble_mean_var(list(outputs))
    return GPEstimate(mean, var, len(outputs))


def gp_errors(estimate: GPEstimate, reference: GPEstimate) -> tuple[float, float]:
    """Mean absolute error of the ensemble mean, relative error of the dimension-averaged variance."""
    mean_err = float(np.mean(np.abs(estimate.mu_hat - reference.mu_hat)))
    k_ref = float(np.mean(reference.k_hat))
    return mean_err, abs(float(np.mean(estimate.k_hat)) - k_ref) / k_ref


def gp_convergence_probe(N_values: Sequence[int], seed: int, n_reference: int = 10_000) -> list[GPProbeRow]:
    """Convergence of ``N``-member ensembles of random networks to a large reference ensemble.

    Reference and probe ensembles come from independent streams; the probe
    ensemble of size ``N`` is the first ``N`` members of one fixed draw.
    """
    if not N_values or min(N_values) < 2:
        raise ValueError("ensemble sizes must be >= 2")
    x = probe_inputs(seed)
    ref = gp_estimate(random_network_outputs(RngStream(seed, 0x6901), n_reference, x))
    pool = random_network_outputs(RngStream(seed, 0x6902), max(N_values), x)
    rows = []
    for n in N_values:
        me, ve = gp_errors(gp_estimate(pool[:n]), ref)
        rows.append(GPProbeRow(int(n), me, ve))
    return rows


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    lx, ly = np.log(np.asarray(x, dtype=np.float64)), np.log(np.asarray(y, dtype=np.float64))
    return float(np.polyfit(lx, ly, 1)[0])


# ---------------------------------------------------------------------------
# reports


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _histograms(scores: Sequence[PromptScore], bins: int = 20) -> list[tuple]:
    values = np.array([s.reported for s in scores])
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    rows = []
    for split in SPLITS:
        v = [s.reported for s in scores if s.split == split]
        if not v:
            continue
        counts, _ = np.histogram(v, bins=edges)
        rows += [(split, float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]
    return rows


def build_report(scores: Sequence[PromptScore], config_hash: str, seed: int, space: str,
                 quartile_splits: Sequence[str] = QUARTILE_SPLITS) -> dict:
    if all(s.reported == 0.0 for s in scores):
        raise DegenerateEnsemble("degenerate ensemble: every prompt has zero uncertainty "
                                 "(experts are identical)")
    qscores = [s for s in scores if s.split in quartile_splits]
    quart, jt = None, None
    if len(qscores) >= 4:
        rep = quartile_report(qscores)
        quart = {"splits": list(quartile_splits), "bins": rep.to_dict(),
                 "non_increasing": rep.is_non_increasing()}
        jt = quartile_trend_test(qscores, rep).to_dict()
    tests = {"jt_alignment_decreasing": jt}
    for split in ("ood_remap", "ood_unseen_token"):
        r = split_test(scores, split)
        tests[f"welch_{split}_vs_in_dist"] = None if r is None else r.to_dict()
    try:
        tests["pearson_reported_alignment"] = pearson([s.reported for s in scores],
                                                      [s.alignment for s in scores])
    except (ValueError, TypeError):
        tests["pearson_reported_alignment"] = None
    means = {}
    for split in SPLITS:
        v = [s.reported for s in scores if s.split == split]
        if v:
            means[split] = {"n": len(v), "reported_mean": float(np.mean(v)), "reported_std": float(np.std(v))}
    return {"config_hash": config_hash, "seed": seed, "space": space,
            "per_prompt": [s.to_dict() for s in scores], "split_summary": means,
            "quartiles": quart, "tests": tests}


def write_report(report: dict, scores: Sequence[PromptScore], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "report.json": dump_json(report),
        "per_prompt.csv": csv_text(
            ["prompt", "language_tag", "split", "n_unseen", "eu", "reported", "alignment"],
            [(s.prompt, s.language_tag, s.split, s.n_unseen, s.eu, s.reported, s.alignment) for s in scores]),
        "uncertainty_histogram.csv": csv_text(["split", "bin_left", "bin_right", "count"], _histograms(scores)),
        "scatter.csv": csv_text(["split", "reported", "alignment"],
                                 [(s.split, s.reported, s.alignment) for s in scores]),
    }
    if report["quartiles"] is not None:
        cols = list(report["quartiles"]["bins"][0])
        files["quartiles.csv"] = csv_text(cols, [[b[c] for c in cols] for b in report["quartiles"]["bins"]])
    paths = []
    for name, text in files.items():
        write_text(out / name, text)
        paths.append(out / name)
    return paths


def run_experiment(engine: EMoE, corpus: Corpus, config_hash: str, seed: int, out_dir: str | Path,
                   space: str = "mid_post", threads: int = 1) -> dict:
    """Score the corpus, build quartile and split statistics, write JSON and CSV outputs."""
    if engine.bundle is None:
        raise RuntimeError("no expert bundle loaded")
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    scores = score_corpus(engine, corpus, seed, space, threads=threads)
    report = build_report(scores, config_hash, seed, space)
    write_report(report, scores, out_dir)
    return report
