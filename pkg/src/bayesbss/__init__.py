"""Bayesian source separation, extended to source localization and trial-to-trial variability."""

from .densities import (BimodalDensity, GaussianDensity, LaplacianDensity, LogisticDensity, MatrixPrior,
                        make_density, moment_matched_bimodal, sinusoid_matched)
from .dvca import DvcaEstimate, DvcaOptions, average_trials, dvca_fit
from .localization import GeometryConfig, SourceEstimate, chi_squared, localize
from .metrics import amari_index, match_components
from .propagation import compare_histogram, distance_prior_pdf, mixing_element_prior_pdf
from .separation import SeparationConfig, SeparationResult, log_posterior_A, log_posterior_W, separate
from .signalgen import SourceSpec, gen_sources, gen_trial_ensemble, mix, random_mixing

__all__ = [
    "BimodalDensity", "GaussianDensity", "LaplacianDensity", "LogisticDensity", "MatrixPrior",
    "make_density", "moment_matched_bimodal", "sinusoid_matched",
    "DvcaEstimate", "DvcaOptions", "average_trials", "dvca_fit",
    "GeometryConfig", "SourceEstimate", "chi_squared", "localize",
    "amari_index", "match_components",
    "compare_histogram", "distance_prior_pdf", "mixing_element_prior_pdf",
    "SeparationConfig", "SeparationResult", "log_posterior_A", "log_posterior_W", "separate",
    "SourceSpec", "gen_sources", "gen_trial_ensemble", "mix", "random_mixing",
]
