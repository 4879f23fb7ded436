"""Modular subset selection (MSS) frequency oracle under local differential privacy."""

from .core import (CapacityError, InvalidArgument, ModuliSet, MssReport, RankDeficient, SearchExhausted,
                   SSBlockParams, rns_encode, ss_params, validate_moduli)
from .decoder import (BlockCounts, aggregate, analytic_mse, baseline_bits, baseline_mse, comm_cost_bits, decode,
                      worst_case_mse_bound)
from .mechanisms import (MechanismKind, grr_estimate, grr_perturb, mss_perturb, oue_estimate, oue_perturb,
                         report_pmf, ss_estimate, ss_perturb)
from .moduli import ModuliSearchConfig, choose_moduli
from .sparse import SparseMatrix, cond, lsmr

__all__ = [
    "BlockCounts", "CapacityError", "InvalidArgument", "MechanismKind", "ModuliSearchConfig", "ModuliSet",
    "MssReport", "RankDeficient", "SSBlockParams", "SearchExhausted", "SparseMatrix", "aggregate",
    "analytic_mse", "baseline_bits", "baseline_mse", "choose_moduli", "comm_cost_bits", "cond", "decode",
    "grr_estimate", "grr_perturb", "lsmr", "mss_perturb", "oue_estimate", "oue_perturb", "report_pmf",
    "rns_encode", "ss_estimate", "ss_perturb", "ss_params", "validate_moduli", "worst_case_mse_bound",
]
