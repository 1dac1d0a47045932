from vo2fit.models.bundle import (
    ModelBundle,
    load_bundle,
    predict,
    predict_projected,
    save_bundle,
    train_dense,
    train_linear,
)
from vo2fit.models.dense import CLASSIFIER, REGRESSOR, NetworkConfig, TrainConfig, loss_and_gradients
from vo2fit.models.equation import equation_baseline, equation_estimate
from vo2fit.models.linear import LinearParams, RankDeficientWarning, fit_linear
