"""Photon-number statistics from on/off detection at several quantum efficiencies."""

__version__ = "0.1.0"

from .distributions import (
    ModelSpec,
    PhotonDistribution,
    fidelity,
    heralded_photon,
    make_coherent,
    make_fock,
    make_mixture,
    make_multithermal,
    make_thermal,
    mean_photon_number,
)
from .em import EmConfig, ReconstructionResult, em_step, log_likelihood, reconstruct, total_error
from .forward import (
    EfficiencyGrid,
    OnOffDataset,
    load_dataset,
    no_click_probability,
    response_matrix,
    save_dataset,
    simulate_dataset,
)
from .inference import (
    FitSummary,
    ParameterGrid,
    UncertaintyReport,
    confidence_intervals,
    fit_model,
    klyshko,
    klyshko_with_uncertainty,
    poisson_background_fit,
    scan_modes,
)
