import torch.nn as nn

from isds.utils.logging import get_logger

logger = get_logger(__name__)


def get_trainable_parameters(model: nn.Module, stage: str = None, verbose: bool = True):
    """
    Count trainable parameters of a model, e.g. to confirm which groups a training
    stage has frozen.
    """
    trainable_params = 0
    all_param = 0
    for _, param in model.named_parameters():
        num_params = param.numel()
        all_param += num_params
        if param.requires_grad:
            trainable_params += num_params
    if verbose:
        prefix = f"[{stage}] " if stage else ""
        logger.info(
            f"{prefix}trainable params: {trainable_params:,d}"
            f" || all params: {all_param:,d}"
            f" || trainable%: {100 * trainable_params / max(all_param, 1):.2f}"
        )

    return trainable_params, all_param


def set_requires_grad(params, flag: bool):
    for param in params:
        param.requires_grad_(flag)
