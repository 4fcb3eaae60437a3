"""Randomized-Hadamard low-bit weight quantization with sensitivity-driven bit allocation."""

from .allocator import (
    BitAllocation,
    SensitivityProfile,
    allocate_bruteforce,
    allocate_dp,
    budget_from_average,
    objective,
    reduce_by_gcd,
)
from .calibration import ReferenceNet, backward_layer_grads, compute_sensitivity, forward, zero_shot_input
from .container import load_archive, read_model, save_archive, write_model
from .errors import RaanaError
from .hadamard import RotationRecord, fwht, practical_rht, practical_rht_inverse, rht_forward, rht_inverse
from .quantizer import estimate_inner, pack_codes, quantize_column, reconstruct_column, unpack_codes
from .rabitq_h import QuantizedLayer, dequantize_layer, estimate_mm, quantize_layer
from .transforms import TrickFlags, TrickRecord, apply_tricks, invert_tricks

__version__ = "0.1.0"
