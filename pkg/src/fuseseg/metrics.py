"""Dice coefficient and run-level reporting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_LABELS = {1: "CSF", 2: "GM", 3: "WM"}

# Published 3D-DenseUNet/2IT validation reference (context only, never asserted):
# fuse 0.96/0.92/0.90; teacher 1 strongest on WM, teacher 2 stronger on CSF/GM.
REFERENCE_FOOTNOTE = (
    "reference (published 3D-DenseUNet + 2IT, real MRI validation): "
    "fuse CSF/GM/WM = 0.96/0.92/0.90; teacher asymmetry: TM1 strongest on WM, "
    "TM2 stronger on CSF/GM. Printed for context only; phantom results are not comparable."
)


@dataclass
class DiceReport:
    per_class: dict  # class id -> DC
    ref_counts: dict
    auto_counts: dict
    inter_counts: dict
    mean: float


def dice(ref_labels, auto_labels, class_id) -> float:
    """2|A∩B| / (|A| + |B|); both masks empty -> 1, exactly one empty -> 0."""
    ref = np.asarray(ref_labels)
    auto = np.asarray(auto_labels)
    if ref.shape != auto.shape:
        raise ValueError(f"label volumes differ in dims: {ref.shape} vs {auto.shape}")
    ref_mask = ref == class_id
    auto_mask = auto == class_id
    denom = int(np.count_nonzero(ref_mask)) + int(np.count_nonzero(auto_mask))
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ref_mask & auto_mask)) / denom


def dice_report(ref_labels, auto_labels, class_ids=(1, 2, 3)) -> DiceReport:
    ref = np.asarray(ref_labels)
    auto = np.asarray(auto_labels)
    per_class, refs, autos, inters = {}, {}, {}, {}
    for c in class_ids:
        per_class[c] = dice(ref, auto, c)
        refs[c] = int(np.count_nonzero(ref == c))
        autos[c] = int(np.count_nonzero(auto == c))
        inters[c] = int(np.count_nonzero((ref == c) & (auto == c)))
    return DiceReport(per_class, refs, autos, inters, float(np.mean(list(per_class.values()))))


def format_report(model_dices, class_ids=(1, 2, 3)) -> str:
    """Human-readable table; one row per model, one column per tissue class.

    ``model_dices`` maps a model name (e.g. TM1, TM2, Fuse) to a dict
    class id -> DC.
    """
    header = ["Model"] + [CLASS_LABELS[c] for c in class_ids] + ["Mean"]
    lines = ["  ".join(f"{h:>8}" for h in header)]
    for model, dc in model_dices.items():
        vals = [dc[c] for c in class_ids]
        cells = [f"{model:>8}"] + [f"{v:8.4f}" for v in vals] + [f"{float(np.mean(vals)):8.4f}"]
        lines.append("  ".join(cells))
    lines.append(f"note: {REFERENCE_FOOTNOTE}")
    return "\n".join(lines)
