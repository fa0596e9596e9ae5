"""Exact input-space robustness certification by mixed-integer programming."""
from .encode import (BIG_M, Affine, CertifyError, CertModel, CertResult, KktVars, NnVars, assemble_cert,
                     certify_sample, encode_kkt, encode_nn)
from .ibp import LayerBounds, ibp_bounds, input_box, output_bounds
from .milp import MilpError, MilpModel, MilpResult, MilpStatus, read_lp, solve_milp, write_lp

__all__ = [
    "BIG_M", "Affine", "CertifyError", "CertModel", "CertResult", "KktVars", "NnVars", "assemble_cert",
    "certify_sample", "encode_kkt", "encode_nn", "LayerBounds", "ibp_bounds", "input_box", "output_bounds",
    "MilpError", "MilpModel", "MilpResult", "MilpStatus", "read_lp", "solve_milp", "write_lp",
]
