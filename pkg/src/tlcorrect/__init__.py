"""Flow-map learning with transfer-learning correction of imperfect prior models."""

from .correction import (
    METHODS,
    GResNetModel,
    PosteriorModel,
    gresnet_correct,
    last_layer_lsq,
    solve_lsq,
    transfer_learn,
    transfer_learn_recurrent,
)
from .dynsys import Domain, SystemSpec, default_params, flow_map, make_system, step_rk4, system_names
from .evaluation import error_curve, export_csv, rollout
from .fml import Dataset, TrainConfig, generate_dataset, train_prior
from .nnet import Architecture, FreezeSpec, NetParams, backward, forward, init_params

__version__ = "0.1.0"
