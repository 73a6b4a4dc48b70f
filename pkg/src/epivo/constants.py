"""Numerical tolerances shared across modules."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    rotation_orthonormal: float = 1e-9
    unit_translation: float = 1e-9
    rank2_ratio: float = 1e-8
    on_line: float = 1e-9
    # Sampson denominators below this are treated as epipole coincidences.
    sampson_denominator: float = 1e-24
    eigengap: float = 1e-10
    degenerate_singular: float = 1e-10
    line_norm: float = 1e-300
    dataset_rotation: float = 1e-3
    dataset_reorthonormalize: float = 1e-6


TOL = Tolerances()
