"""End-to-end augmentation study on a generated seed."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import gmm as gmm_mod
from .clustering import ClusterModel, LinkageTree, cut_tree, ward_linkage
from .dataset import as_z_space
from .profiling import PhysiologicalState, ProfileReport, profile_report
from .screening import ScreeningReport, exclude, screen
from .seedgen import GeneratedSeed, default_spec, generate_seed


@dataclass
class StudyResult:
    seed: GeneratedSeed
    screening: ScreeningReport
    model: gmm_mod.GmmModel
    cohort: gmm_mod.AugmentedCohort
    tree: LinkageTree
    clusters: ClusterModel
    report: ProfileReport

    def cluster_states(self) -> list[PhysiologicalState]:
        return [self.report.states[r] for r in range(self.clusters.k)]

    def component_of_state(self, state: PhysiologicalState) -> int | None:
        """GMM component holding the seed rows planted with ``state``."""
        rows = [i for i, s in enumerate(self.seed.states) if s is state and self.seed.panel.subjects[i] in self.screening.retained]
        if not rows:
            return None
        resp = gmm_mod.responsibilities(self.model, self.seed.panel.values[rows])
        return int(np.argmax(resp.sum(axis=0)))


def run_study(
    seed: int = 0,
    weighting: str = "prevalence",
    count: int = 275,
    components: int = 5,
    reg_covar: float = 0.1,
    k: int = 5,
    threshold: float = 25.0,
    n_init: int = gmm_mod.GmmConfig.n_init,
) -> StudyResult:
    generated = generate_seed(default_spec(seed, weighting))
    z = as_z_space(generated.panel)
    report = screen(z, threshold)
    retained = exclude(z, report)
    config = gmm_mod.GmmConfig(components=components, reg_covar=reg_covar, seed=seed, n_init=n_init)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", gmm_mod.RatioWarning)
        model = gmm_mod.fit(retained, config)
    cohort = gmm_mod.augment(retained, model, count, seed)
    tree = ward_linkage(cohort.panel)
    clusters = cut_tree(tree, k, cohort.panel)
    return StudyResult(generated, report, model, cohort, tree, clusters, profile_report(cohort.panel, clusters))
