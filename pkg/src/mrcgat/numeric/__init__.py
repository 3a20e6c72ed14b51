from mrcgat.numeric.linalg import cholesky, spd_solve, whiten
from mrcgat.numeric.rng import RngStream, derive_stream
from mrcgat.numeric.special import inv_norm_cdf, norm_cdf, rank_quantile_table, stable_softmax
from mrcgat.numeric.tape import Tape, Var

__all__ = [
    "RngStream", "Tape", "Var", "cholesky", "derive_stream", "inv_norm_cdf",
    "norm_cdf", "rank_quantile_table", "spd_solve", "stable_softmax", "whiten",
]
