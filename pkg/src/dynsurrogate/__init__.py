"""Neural-network surrogates for harmonically loaded structural systems."""
from .dynamics import (
    HarmonicLoadParams,
    MdofParams,
    SdofParams,
    TimeGrid,
    eval_load,
    mdof_linear_response,
    mdof_newmark_response,
    newmark_integrate,
    sdof_linear_response,
    sdof_newmark_response,
)
from .evaluate import evaluate, mse_metric, predict, relative_error
from .nn import BatchNorm, Conv1D, Dense, Model, Sparse, dense_model, init_params, param_count
from .sampling import Dataspace, compute_norm_stats, dataspace, generate_dataset, normalize
from .sparsify import (
    build_conv_dense_template,
    build_sc_from_fc,
    build_sparse_template,
    grow,
    insert_bn_conv,
    sparsity_mask,
    structured_mask,
    two_phase_train,
)
from .training import Adam, TrainConfig, train

__version__ = "0.1.0"
