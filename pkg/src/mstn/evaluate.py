"""Evaluation protocol: generate per template, score against templates and the training corpus."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import KL_FIELDS, SIMILARITY_FIELDS, corpus_distributions, kl_divergence, pair_metrics
from .model import Model
from .sampler import MODES, GenerationRequest, generate, write_samples
from .score_io import TICKS_PER_BAR, Score
from .tokenizer import PREFIX_LEN, Vocab, decode, encode


def _stringify(dist: Mapping) -> dict[str, float]:
    return {str(k): float(v) for k, v in dist.items()}


@dataclass
class ModeReport:
    mode: str
    kl: dict[str, float]
    similarity: dict[str, float]
    per_template: list[dict] = field(default_factory=list)
    distributions: dict[str, dict[str, float]] = field(default_factory=dict)


@dataclass
class MetricsReport:
    modes: dict[str, ModeReport]
    reference_distributions: dict[str, dict[str, float]]
    samples_per_template: int
    seed: int
    variant: str | None = None

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "samples_per_template": self.samples_per_template,
            "modes": {m: asdict(r) for m, r in self.modes.items()},
            "reference_distributions": self.reference_distributions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def table_rows(self) -> list[dict]:
        rows = []
        for m, r in self.modes.items():
            row = {"variant": self.variant, "mode": m}
            row.update({f: r.kl[f] for f in KL_FIELDS})
            row.update({f: r.similarity[f] for f in SIMILARITY_FIELDS})
            rows.append(row)
        return rows

    def write_csv(self, path) -> None:
        rows = self.table_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def evaluate_samples(
    templates: Mapping[str, Score],
    samples: Mapping[str, Sequence[Score]],
    reference: Sequence[Score],
    mode: str,
) -> ModeReport:
    """Similarity fields averaged over templates and KLs of the pooled samples against ``reference``."""
    per_template = []
    for tid, group in samples.items():
        m = pair_metrics(templates[tid], list(group))
        per_template.append({"template_id": tid, "n_samples": len(group), **m})
    sim = {}
    for f in SIMILARITY_FIELDS:
        vals = [row[f] for row in per_template if not math.isnan(row[f])]
        sim[f] = float(np.mean(vals)) if vals else math.nan
    pooled = [s for group in samples.values() for s in group]
    ref = corpus_distributions(reference)
    gen = corpus_distributions(pooled)
    kl = {f: kl_divergence(ref[f], gen[f]) for f in KL_FIELDS}
    return ModeReport(mode, kl, sim, per_template, {f: _stringify(gen[f]) for f in KL_FIELDS})


def evaluate_protocol(
    model: Model,
    vocab: Vocab,
    templates: Sequence[Score],
    reference: Sequence[Score],
    modes: Sequence[str] = MODES,
    samples_per_template: int = 2,
    temperature: float = 1.0,
    seed: int = 0,
    prior: Mapping[str, float] | None = None,
    out_dir=None,
) -> MetricsReport:
    """Generate ``samples_per_template`` pieces per template and mode, then score them.

    Samples run as long as their template.  Continuation mode primes with
    the template's key tokens and first bar.  When ``out_dir`` is given the
    samples are written under ``<out_dir>/<mode>/<template>/``.
    """
    by_id = {t.id: t for t in templates}
    reports = {}
    for mi, mode in enumerate(modes):
        samples: dict[str, list[Score]] = {}
        for ti, template in enumerate(templates):
            seq = encode(template, vocab)
            req = GenerationRequest(
                mode, template.id, template.n_bars,
                motif=seq.tokens[PREFIX_LEN:PREFIX_LEN + TICKS_PER_BAR] if mode == "continuation" else None,
                key=seq.tokens[:PREFIX_LEN] if mode == "continuation" else None,
                samples=samples_per_template, temperature=temperature,
                seed=seed * 1_000_003 + mi * 100_003 + ti,
            )
            out = generate(model, vocab, req, prior)
            if out_dir is not None:
                write_samples(Path(out_dir) / mode, template.id, out, vocab,
                              {"mode": mode, "seed": req.seed, "temperature": temperature})
            samples[template.id] = [decode(s, vocab, f"{template.id}/sample_{i}") for i, s in enumerate(out, 1)]
        reports[mode] = evaluate_samples(by_id, samples, reference, mode)
    ref = corpus_distributions(reference)
    return MetricsReport(reports, {f: _stringify(ref[f]) for f in KL_FIELDS}, samples_per_template, seed,
                         model.config.variant)


def write_distribution_csvs(report: Mapping, out_dir) -> list[Path]:
    """One CSV per distribution field: bin, reference, then one column per mode."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ref = report["reference_distributions"]
    modes = report["modes"]
    paths = []
    for f in KL_FIELDS:
        bins = set(ref.get(f, {}))
        for m in modes.values():
            bins |= set(m["distributions"].get(f, {}))
        path = out / f"{f}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "reference", *modes])
            for b in sorted(bins, key=_bin_key):
                w.writerow([b, ref.get(f, {}).get(b, 0.0), *(m["distributions"].get(f, {}).get(b, 0.0)
                                                            for m in modes.values())])
        paths.append(path)
    return paths


def _bin_key(label: str):
    try:
        num, _, den = label.partition("/")
        return (0, float(num) / float(den or 1), label)
    except ValueError:
        return (1, 0.0, label)
