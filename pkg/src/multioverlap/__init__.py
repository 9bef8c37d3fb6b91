"""Monte Carlo and exact-oracle tools for multioverlap concentration in log-concave spin systems."""
from .estimators import Estimate, MultioverlapIndex, multioverlap
from .models import DisorderSample, QuadraticHamiltonian, make_disorder
from .perturbation import PerturbationIndex, PerturbationState, RegularizationSchedule, TruncationPolicy
from .sampler import McmcConfig, ReplicaEnsemble, sample_ensembles, sample_replicas

__all__ = [
    "DisorderSample", "Estimate", "McmcConfig", "MultioverlapIndex", "PerturbationIndex",
    "PerturbationState", "QuadraticHamiltonian", "RegularizationSchedule", "ReplicaEnsemble",
    "TruncationPolicy", "make_disorder", "multioverlap", "sample_ensembles", "sample_replicas",
]
__version__ = "0.1.0"
