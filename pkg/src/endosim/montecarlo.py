"""Monte Carlo estimation of the randomized gate's brute-force bypass rate.

One trial is one re-randomization window: the gadget holds one of N positions
while the attacker spends ``freq`` forked children, each jumping to a fresh
uniform guess. The empirical per-window rate is reported next to two
references: the closed form 1-(1-1/N)**freq, and the configured-gate formula
2*freq/(page_size*pages). The formula runs about twice the closed form; both
are reported and the factor is part of the result so the discrepancy stays
visible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .callgate import guess_probability, position_count

_CHUNK = 50_000


@dataclass(frozen=True)
class GuessExperiment:
    pages: int
    freq: int
    trials: int
    seed: int
    bypasses: int
    empirical_rate: float
    closed_form_rate: float
    formula_rate: Fraction

    @property
    def formula_over_closed_form(self) -> float:
        return float(self.formula_rate) / self.closed_form_rate

    def to_dict(self) -> dict:
        return {
            "pages": self.pages,
            "freq": self.freq,
            "trials": self.trials,
            "seed": self.seed,
            "bypasses": self.bypasses,
            "empirical_rate": self.empirical_rate,
            "closed_form_rate": self.closed_form_rate,
            "formula_rate": str(self.formula_rate),
            "formula_rate_float": float(self.formula_rate),
            "formula_over_closed_form": self.formula_over_closed_form,
            "positions": position_count(self.pages),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def closed_form_rate(pages: int, freq: int) -> float:
    n = position_count(pages)
    return 1.0 - (1.0 - 1.0 / n) ** freq


def monte_carlo_guess(pages: int, freq: int, trials: int, seed: int) -> GuessExperiment:
    """Sample ``trials`` windows of ``freq`` guesses each with a seeded generator."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n = position_count(pages)
    rng = np.random.Generator(np.random.PCG64(seed))
    bypasses = 0
    remaining = trials
    while remaining:
        chunk = min(remaining, _CHUNK)
        gadgets = rng.integers(0, n, size=(chunk, 1))
        guesses = rng.integers(0, n, size=(chunk, freq))
        bypasses += int((guesses == gadgets).any(axis=1).sum())
        remaining -= chunk
    return GuessExperiment(
        pages=pages,
        freq=freq,
        trials=trials,
        seed=seed,
        bypasses=bypasses,
        empirical_rate=bypasses / trials,
        closed_form_rate=closed_form_rate(pages, freq),
        formula_rate=guess_probability(pages, freq),
    )
