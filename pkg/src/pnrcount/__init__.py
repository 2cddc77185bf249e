"""Simulation and analysis toolkit for a spatially and temporally multiplexed
photon-number-resolving detector: timing models, arrival-time lookup tables,
per-shot photon statistics, ensemble statistics, detector tomography and a
binary time-tag format."""

from pnrcount.detector import BinId, BlindingParams, DetectorConfig, ideal_config
from pnrcount.ensemble import (
    EnsembleSummary,
    blinded_variance_curve,
    detectors_for_unit_sigma,
    efficiency_click,
    efficiency_pnr,
    fock_click_stats,
    g2_zero,
    n_max_click,
    relative_noise_db,
    summarize,
    zero_inflate,
)
from pnrcount.lut import Lut, LutBank, PhotonNumberDistribution, build_lut, lookup
from pnrcount.shots import assign_bins, convolve_all, per_bin_pnds, shot_moments
from pnrcount.sim import simulate_batch, simulate_run, simulate_shot, split_tree
from pnrcount.tagio import read_tags, write_tags
from pnrcount.timing import BinTimingModel, EmgParams, emg_pdf, family_model, fit_mixture
from pnrcount.tomography import build_outcome_matrix, build_probe_matrix, reconstruct_povm, simplex_project

__version__ = "0.1.0"
