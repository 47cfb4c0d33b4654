"""EEG functional-connectivity graphs classified with a gated graph network."""
from .connectivity import ConnectivityMatrix, SparseGraph, connectivity_matrix, knn_sparsify, pli, plv
from .eeg_io import Montage, Recording, SynthSpec, generate_synthetic, load_recording, write_recording
from .ggcn import GgcnConfig
from .spectral import BANDS, WindowPlan, dpss, extract_band_features, multitaper_spectra
from .training import SplitPlan, TrainConfig, make_splits, train_model

__version__ = "0.1.0"
