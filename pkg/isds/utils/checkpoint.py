"""
Canonical JSON checkpoints of MsmModel and SdsModel.

Floats are written with `float.hex`, keys are sorted and the document carries a hash of
the architecture, so that load -> save reproduces the file byte for byte.
"""
import dataclasses
import hashlib
from typing import Optional, Union

import torch
from torch import nn

from isds.models.msm.configuration_msm import MsmConfig
from isds.models.msm.modeling_msm import MsmModel
from isds.models.sds.configuration_sds import SdsConfig
from isds.models.sds.modeling_sds import SdsModel
from isds.modules.nnet import DTYPE, BandOverlapMlp, MaskedMlp, Mlp
from isds.utils.exceptions import ChecksumError, ConfigError, NumericError, ShapeError
from isds.utils.io import atomic_write_text, load_json, to_json_str
from isds.utils.logging import get_logger
from isds.utils.vars import CHECKPOINT_SCHEMA_VERSION

logger = get_logger(__name__)


def encode_tensor(tensor: torch.Tensor) -> dict:
    tensor = tensor.detach().cpu()
    if tensor.dtype == torch.bool:
        dtype, data = "bool", [int(v) for v in tensor.reshape(-1).tolist()]
    elif tensor.is_floating_point():
        dtype, data = "float64", [float(v).hex() for v in tensor.reshape(-1).tolist()]
    else:
        dtype, data = "int64", [int(v) for v in tensor.reshape(-1).tolist()]
    return {"dtype": dtype, "shape": list(tensor.shape), "data": data}


def decode_tensor(data: dict) -> torch.Tensor:
    if data["dtype"] == "float64":
        values = torch.tensor([float.fromhex(v) for v in data["data"]], dtype=DTYPE)
    elif data["dtype"] == "bool":
        values = torch.tensor(data["data"], dtype=torch.bool)
    else:
        values = torch.tensor(data["data"], dtype=torch.long)
    return values.reshape(data["shape"])


def net_spec(net: nn.Module) -> dict:
    if isinstance(net, BandOverlapMlp):
        return {
            "type": "band_overlap",
            "regime_net": net_spec(net.regime_net),
            "shared_net": net_spec(net.shared_net),
            "low": float(net.low).hex(),
            "high": float(net.high).hex(),
        }
    if not isinstance(net, Mlp):
        raise TypeError(f"cannot checkpoint a {type(net).__name__} network")
    spec = {
        "type": "masked_mlp" if isinstance(net, MaskedMlp) else "mlp",
        "layer_dims": list(net.layer_dims),
        "activation": net.activation,
        "negative_slope": float(net.negative_slope).hex(),
    }
    if isinstance(net, MaskedMlp):
        spec["dependency"] = encode_tensor(net.dependency)
    return spec


def build_net(spec: dict, shared: Optional[dict] = None) -> nn.Module:
    """`shared` caches the shared network of band-overlap means, built once per model."""
    if spec["type"] == "band_overlap":
        shared = {} if shared is None else shared
        if "net" not in shared:
            shared["net"] = build_net(spec["shared_net"])
        return BandOverlapMlp(
            build_net(spec["regime_net"]),
            shared["net"],
            low=float.fromhex(spec["low"]),
            high=float.fromhex(spec["high"]),
        )
    slope = float.fromhex(spec["negative_slope"])
    if spec["type"] == "masked_mlp":
        return MaskedMlp(
            decode_tensor(spec["dependency"]),
            hidden_dims=spec["layer_dims"][1:-1],
            activation=spec["activation"],
            negative_slope=slope,
        )
    if spec["type"] == "mlp":
        return Mlp(spec["layer_dims"], spec["activation"], slope)
    raise ConfigError(f"unknown network type {spec['type']!r}", field="type")


def _architecture(model: Union[MsmModel, SdsModel]) -> dict:
    prior = model.prior if isinstance(model, SdsModel) else model
    architecture = {
        "kind": "sds" if isinstance(model, SdsModel) else "msm",
        "config": dataclasses.asdict(model.config),
        "mean_nets": [net_spec(net) for net in prior.mean_nets],
    }
    if isinstance(model, SdsModel):
        for name in ("decoder", "encoder_mean", "encoder_logvar"):
            architecture[name] = net_spec(getattr(model, name))
    return architecture


def _hash(architecture: dict) -> str:
    return hashlib.blake2b(to_json_str(architecture).encode("utf8"), digest_size=16).hexdigest()


def checkpoint_to_dict(model: Union[MsmModel, SdsModel], metadata: Optional[dict] = None) -> dict:
    prior = model.prior if isinstance(model, SdsModel) else model
    architecture = _architecture(model)
    return {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": architecture["kind"],
        "architecture": architecture,
        "config_hash": _hash(architecture),
        "parameters": {name: encode_tensor(t) for name, t in model.state_dict().items()},
        "switching": {"pi": encode_tensor(prior.pi), "Q": encode_tensor(prior.Q)},
        "metadata": metadata or {},
    }


def checkpoint_to_str(model: Union[MsmModel, SdsModel], metadata: Optional[dict] = None) -> str:
    return to_json_str(checkpoint_to_dict(model, metadata), indent=1) + "\n"


def save_checkpoint(model: Union[MsmModel, SdsModel], filepath, metadata: Optional[dict] = None):
    atomic_write_text(checkpoint_to_str(model, metadata), filepath)
    logger.info(f"checkpoint saved to {filepath}")


def _build_model(architecture: dict) -> Union[MsmModel, SdsModel]:
    shared = {}
    mean_nets = [build_net(spec, shared) for spec in architecture["mean_nets"]]
    config = dict(architecture["config"])
    if architecture["kind"] == "msm":
        return MsmModel(MsmConfig(**config), mean_nets=mean_nets)
    if architecture["kind"] != "sds":
        raise ConfigError(f"unknown model kind {architecture['kind']!r}", field="kind")
    config["msm"] = MsmConfig(**config["msm"])
    config = SdsConfig(**config)
    model = SdsModel(
        config,
        prior=MsmModel(config.msm, mean_nets=mean_nets),
        decoder=build_net(architecture["decoder"]),
    )
    model.encoder_mean = build_net(architecture["encoder_mean"])
    model.encoder_logvar = build_net(architecture["encoder_logvar"])
    return model


def checkpoint_from_dict(document: dict) -> tuple[Union[MsmModel, SdsModel], dict]:
    """Rebuild and validate a model. Returns it with the stored metadata."""
    if document.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ConfigError(
            f"expected schema version {CHECKPOINT_SCHEMA_VERSION}, got {document.get('schema_version')}",
            field="schema_version",
        )
    architecture = document["architecture"]
    if _hash(architecture) != document["config_hash"]:
        raise ChecksumError("architecture does not match its hash")
    try:
        model = _build_model(architecture)
    except TypeError as err:
        raise ConfigError(str(err), field="architecture") from err

    state = {name: decode_tensor(t) for name, t in document["parameters"].items()}
    for name, t in state.items():
        if not t.is_floating_point():
            continue
        # -inf logits encode structural zeros of pi / Q
        finite = ~torch.isnan(t) & ~torch.isposinf(t) if name.endswith("_logits") else torch.isfinite(t)
        if not finite.all():
            raise NumericError(f"checkpoint holds non-finite values in {name}")
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as err:
        raise ShapeError(f"parameters do not fit the architecture: {err}") from err

    prior = model.prior if isinstance(model, SdsModel) else model
    switching = document["switching"]
    if not (
        torch.allclose(prior.pi, decode_tensor(switching["pi"]), rtol=0, atol=1e-12)
        and torch.allclose(prior.Q, decode_tensor(switching["Q"]), rtol=0, atol=1e-12)
    ):
        raise ChecksumError("stored pi/Q disagree with the stored logits")
    return model, document["metadata"]


def load_checkpoint(filepath) -> tuple[Union[MsmModel, SdsModel], dict]:
    model, metadata = checkpoint_from_dict(load_json(filepath))
    logger.info(f"{type(model).__name__} loaded from {filepath}")
    return model, metadata
