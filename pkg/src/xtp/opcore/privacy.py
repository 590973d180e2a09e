"""Laplace mechanism over grouped counts."""

from __future__ import annotations

import numpy as np

from xtp.relstore import ColRef, Relation, SelectAggregate, SqlError, Store


class PrivacyError(ValueError):
    pass


def laplace_scale(sensitivity: float, epsilon: float) -> float:
    if not epsilon > 0:
        raise PrivacyError(f"epsilon must be positive, got {epsilon}")
    if not sensitivity >= 1:
        raise PrivacyError(f"sensitivity must be >= 1, got {sensitivity}")
    return sensitivity / epsilon


def laplace_noise(b: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling: u ~ U(-1/2, 1/2), x = -b sgn(u) ln(1 - 2|u|)."""
    u = rng.random(size) - 0.5
    # u == -0.5 exactly would give log(0); nudge into the open interval
    u = np.clip(u, -0.5 + 1e-16, 0.5)
    return -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def dp_count(store: Store, view: str, group_col: str, epsilon: float, sensitivity: int,
             rng: np.random.Generator | None = None) -> Relation:
    """Per-group COUNT(*) with Laplace noise of scale sensitivity/epsilon.

    Only the noisy value is released: columns are ``group_col`` and ``noisy_count``.
    """
    if isinstance(sensitivity, bool) or int(sensitivity) != sensitivity:
        raise PrivacyError("sensitivity must be an integer")
    b = laplace_scale(sensitivity, epsilon)
    rel = store.relation(view)
    if group_col not in rel.columns:
        raise SqlError(f"unknown column {group_col} in {view}")
    counts = store.execute(SelectAggregate(view, (ColRef(group_col),), count=True,
                                           group_by=(ColRef(group_col),)))
    rng = rng if rng is not None else np.random.default_rng()
    noise = laplace_noise(b, len(counts.rows), rng)
    rows = [(g, round(n + float(z), 3)) for (g, n), z in zip(counts.rows, noise)]
    return Relation(f"{view}_dp", (group_col, "noisy_count"), rows)

