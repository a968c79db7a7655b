"""Full-duplex near-field ISAC with dynamic metasurface antenna panels."""

from .scenario import (ConfigError, Scenario, SphericalPosition, SystemConfig,
                       dbm_to_watts, element_distance, fraunhofer_distance,
                       make_scenario, wavelength, watts_to_dbm)
from .channel import (ChannelSet, PropagationMatrix, attenuation, build_channels,
                      dl_channel, propagation_matrix, reflection_channel,
                      response_vector, si_channel)
from .codebook import (AnalogBfMatrix, LorentzianCodebook, assemble_analog_matrix,
                       compose_dma_weight, lorentzian_weight, make_codebook,
                       project_to_codebook)
from .signals import BfConfiguration, SymbolBlock, symbol_block, synthesize_received
from .fim import Fim, PebResult, channel_partials, fim_assemble, noise_covariance, peb
from .crb_opt import (KMatrices, SensingDesign, alternate_crb, factorize_tx, k_matrices,
                      optimize_rx_blocks, optimize_tx_gram, project_rx_to_codebook)
from .comm_opt import CommDesign, block_diagonalization, select_tx_codewords, sum_rate
from .estimation import (EstimateSet, SampleCovariance, SearchGrid, estimate_targets,
                         mle_objective, reconstruct_virtual_channel, rmse,
                         sample_covariance)
from .isac import (IsacSolution, algorithm1, combine_designs, gamma_si_feasibility,
                   residual_si, si_canceller)

__version__ = "0.1.0"
