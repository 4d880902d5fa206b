"""Gaussian-process posterior sampling in quasi-linear time with HODLR matrices."""
from ._backend import NAME as BACKEND
from .hodlr import (HodlrFactorization, HodlrMatrix, HodlrSPDError,
                    SymmetricFactor, assemble, factorize, symmetric_factorize)
from .kernels import (Dataset, KernelParams, build_dense_covariance,
                      collapse_duplicates, eval_kernel, sort_inputs)
from .lowrank import LowRankFactor, estimate_max_error, factor_block
from .sampler import GibbsChain, GridPrecomp, PriorSpec, run_gibbs
from .tensorgp import TensorChain, run_tensor_gibbs

__version__ = "0.1.0"
