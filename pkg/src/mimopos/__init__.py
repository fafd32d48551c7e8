"""Massive MIMO-OFDM channel fingerprints and 3-D positioning."""

from .channel import (ArrayGeometry, Box, OFDMConfig, PathParam, PathSet,
                      SPEED_OF_LIGHT, Scene, generate_scene, load_scene,
                      paths_for_position, sample_gains, save_scene, sfcrm,
                      steering, steering_horizontal, steering_vertical)
from .fingerprint import (Fingerprint, KIND_ANGLE_DELAY, KIND_SPACE_FREQ,
                          adcpm_exact, adcpm_mc, angle_domain_cir,
                          awgn_contaminate, concentration_fraction, denoise,
                          dft_phase_shifted, dft_truncated, dirichlet,
                          export_fingerprint_csv, fingerprint_tensor,
                          load_fingerprint, measured_fingerprint,
                          predict_support, save_fingerprint, sfcpm_exact,
                          sfcpm_mc, to_angle_delay)
from .wknn import (FingerprintDatabase, WKNNLocalizer, load_database,
                   save_database, similarity, wknn_estimate)
from .network import (CNNLocalizer, Network, NetworkSpec, build_network,
                      load_network, save_network, train_network)
from .pipeline import (Dataset, EvalResult, ExperimentConfig, build_scene,
                       compare_methods, concentration_trend, reference_grid,
                       run_method, snr_sweep, test_dataset, training_dataset,
                       verify_theory)

__version__ = "0.1.0"
