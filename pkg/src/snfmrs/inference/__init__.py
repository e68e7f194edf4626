from .flows import (DIAG_BOUND, FlowShape, FlowSingularityError, SylvesterLayer, flow_apply,
                    flow_jacobian, flow_on_tape, householder_q, lambda_from_layer, layer_from_lambda,
                    random_layer)
from .latent import LatentMap, PriorSpec
from .model import ElboError, ElboResult, ModelConfig, SNFModel, elbo, loss_and_grad, prior_model
from .posterior import (PosteriorDraws, posterior_logq, reparameterize, sample_posterior,
                        sample_posterior_batch)
from .train import (CheckpointError, History, TrainConfig, TrainingDiverged, build_model,
                    load_checkpoint, read_checkpoint_header, save_checkpoint, train)


def encode(spectra, model: SNFModel):
    """(mu, sigma, lambda) for each spectrum; see ``SNFModel.encode``."""
    return model.encode(spectra)


__all__ = [
    "DIAG_BOUND", "FlowShape", "FlowSingularityError", "SylvesterLayer", "flow_apply",
    "flow_jacobian", "flow_on_tape", "householder_q", "lambda_from_layer", "layer_from_lambda",
    "random_layer", "LatentMap", "PriorSpec", "ElboError", "ElboResult", "ModelConfig", "SNFModel",
    "elbo", "loss_and_grad", "prior_model", "PosteriorDraws", "posterior_logq", "reparameterize",
    "sample_posterior", "sample_posterior_batch", "CheckpointError", "History", "TrainConfig",
    "TrainingDiverged", "build_model", "load_checkpoint", "read_checkpoint_header",
    "save_checkpoint", "train", "encode",
]
