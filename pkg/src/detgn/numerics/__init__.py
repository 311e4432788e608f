from detgn.numerics import autodiff
from detgn.numerics.autodiff import Tape, Var, grad
from detgn.numerics.dct import dct, dct_matrix, idct
from detgn.numerics.gradcheck import gradient_check
from detgn.numerics.linalg import SymEig, sym_eig
from detgn.numerics.optim import AdamState, adam_step
from detgn.numerics.rng import RngStream, fnv1a64
from detgn.numerics.stats import chi2_cdf, chi2_quantile, gammainc_lower, sample_covariance

__all__ = [
    "AdamState",
    "RngStream",
    "SymEig",
    "Tape",
    "Var",
    "adam_step",
    "autodiff",
    "chi2_cdf",
    "chi2_quantile",
    "dct",
    "dct_matrix",
    "fnv1a64",
    "gammainc_lower",
    "grad",
    "gradient_check",
    "idct",
    "sample_covariance",
    "sym_eig",
]
