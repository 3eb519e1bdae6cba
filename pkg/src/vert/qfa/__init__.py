from .masking import (CounterfactualQ, AttributionMask, MaskSet, sample_q, apply_mask,
                      upsample_mask, upsample_to, qfa_loss, qfa_losses)
from .optimize import MaskOptConfig, optimize_masks, round_step, converged, frozen_params
from .oracles import brute_force_qfa, lfa_mask, feasibility_table, DeviationOracle
from .io import write_pgm, read_pgm, save_masks, load_masks
