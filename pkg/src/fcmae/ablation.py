"""Ablation matrix: tokenizers x patch layouts, granularities, permuted nulls.

Arms mirror the published ablation structure at synthetic scale:

* ``network-{shared,specific,bilinear}``: the true network layout under
  each tokenization scheme.
* ``square-{shared,specific,bilinear}``: structure-agnostic contiguous
  square patching.
* ``coarse-bilinear``: merged networks (coarser granularity analog).
* ``perm-##``: region-permuted parcellations (bilinear), forming the
  null distribution for one-sided permutation tests.

Every arm shares the evaluation seed, so out-of-fold predictions are
paired across arms and paired bootstrap tests are valid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import mae as mae_mod
from . import stats
from .config import AblateSettings, EvalSettings
from .errors import FcmaeError
from .fc import Cohort, Parcellation, merge_networks, permute_regions, square_layout
from .mae import MAEConfig, MAEModel


@dataclass(frozen=True)
class Arm:
    name: str
    layout: str      # network | square | coarse | permuted
    tokenizer: str
    seed_offset: int
    perm_index: int | None = None


def arm_matrix(settings: AblateSettings) -> list:
    arms = []
    for off, tok in enumerate(("shared", "specific", "bilinear")):
        arms.append(Arm(f"network-{tok}", "network", tok, 1 + off))
    for off, tok in enumerate(("shared", "specific", "bilinear")):
        arms.append(Arm(f"square-{tok}", "square", tok, 4 + off))
    arms.append(Arm("coarse-bilinear", "coarse", "bilinear", 7))
    for i in range(settings.perms):
        arms.append(Arm(f"perm-{i:02d}", "permuted", "bilinear", 100 + i, perm_index=i))
    return arms


def arm_parcellation(arm: Arm, parc: Parcellation, settings: AblateSettings) -> Parcellation:
    if arm.layout == "network":
        return parc
    if arm.layout == "square":
        pseudo, _ = square_layout(parc.n_regions, settings.square_side)
        return pseudo
    if arm.layout == "coarse":
        return merge_networks(parc, settings.coarse_merge)
    if arm.layout == "permuted":
        return permute_regions(parc, [settings.perm_seed, arm.perm_index])
    raise FcmaeError(f"unknown arm layout {arm.layout!r}")


def run_arm(arm: Arm, cohort: Cohort, parc: Parcellation, base_config: MAEConfig,
            eval_settings: EvalSettings, settings: AblateSettings, base_seed: int):
    """Pretrain, embed, evaluate one arm; returns its EvaluationReport."""
    arm_parc = arm_parcellation(arm, parc, settings)
    config = replace(
        base_config, tokenizer=arm.tokenizer, seed=base_seed + arm.seed_offset
    )
    model = MAEModel(config, arm_parc)
    mae_mod.train(model, cohort, config)
    embeddings = mae_mod.encode_cohort(model, cohort, pooling=eval_settings.pooling)
    targets = {name: cohort.target_array(name) for name in cohort.target_names}
    return stats.run_downstream(
        embeddings, targets, cohort.confounds,
        k=eval_settings.k, seed=eval_settings.seed, kernel=eval_settings.kernel,
        grid=eval_settings.lambda_grid, bins=eval_settings.bins,
        inner_k=eval_settings.inner_k, n_boot=eval_settings.n_boot,
        residualize_features=eval_settings.residualize_features,
    )


def run_ablation(cohort: Cohort, parc: Parcellation, base_config: MAEConfig,
                 eval_settings: EvalSettings, settings: AblateSettings,
                 base_seed: int, log=None):
    """Run the full arm matrix.

    Returns (table rows, nulls per target).  A failing arm is recorded as a
    failed row and the run continues.
    """
    arms = arm_matrix(settings)
    reports = {}
    failures = {}
    for arm in arms:
        if log:
            log(f"running arm {arm.name}")
        try:
            reports[arm.name] = run_arm(
                arm, cohort, parc, base_config, eval_settings, settings, base_seed
            )
        except FcmaeError as exc:
            failures[arm.name] = str(exc)

    target_names = cohort.target_names
    nulls = {
        name: np.array([
            reports[a.name].results[name].r
            for a in arms
            if a.layout == "permuted" and a.name in reports
        ])
        for name in target_names
    }

    # paired tests compare each main arm against the best main arm per target
    best = {}
    for name in target_names:
        candidates = [
            (reports[a.name].results[name].r, a.name)
            for a in arms
            if a.layout != "permuted" and a.name in reports
        ]
        if candidates:
            best[name] = max(candidates)[1]

    rows = []
    for arm in arms:
        for name in target_names:
            row = {
                "arm": arm.name, "layout": arm.layout, "tokenizer": arm.tokenizer,
                "target": name, "seed": base_seed,
            }
            if arm.name in failures:
                row.update(status=f"failed: {failures[arm.name]}")
                rows.append(row)
                continue
            res = reports[arm.name].results[name]
            record = reports[arm.name].records[name]
            row.update(
                r=res.r, ci_low=res.ci_low, ci_high=res.ci_high, delta=res.delta,
                n=res.n, status="ok",
            )
            if arm.layout != "permuted":
                if nulls[name].size:
                    row["p_perm"] = stats.permutation_test(res.r, nulls[name])
                if best.get(name) and best[name] != arm.name:
                    row["p_paired"] = stats.paired_bootstrap_test(
                        reports[best[name]].records[name], record,
                        n_boot=eval_settings.n_boot, seed=[base_seed, 71],
                    )
            rows.append(row)
    return rows, nulls


ABLATION_COLUMNS = [
    "arm", "layout", "tokenizer", "target", "r", "ci_low", "ci_high", "delta",
    "p_paired", "p_perm", "n", "seed", "status",
]


def save_ablation_table(path, rows) -> None:
    import csv

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow([fmt(row.get(c)) for c in ABLATION_COLUMNS])
