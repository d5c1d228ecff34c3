"""Classifier-based iterative unfolding with a binned IBU baseline."""

from .binned import (Histogram, ResponseMatrix, estimate_response, histogram, ibu, ibu_iterates,
                     poisson_loglik)
from .dataset import (EventFileError, EventSet, PairedEvent, SyntheticSample, ToyConfig,
                      ToyDataset, generate_gaussian_1d, generate_gaussian_multidim, read_events,
                      write_events)
from .nn import Classifier, NetworkConfig, TrainingError, train, train_weighted, weighted_bce_loss
from .omnifold import (HistogramReweighter, NeuralReweighter, UnfoldConfig, UnfoldError,
                       UnfoldResult, run, run_binned)
from .stats import chi2_per_bin, weighted_hist, weighted_mean

__version__ = "0.1.0"
