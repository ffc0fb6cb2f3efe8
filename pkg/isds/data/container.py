"""
On-disk dataset containers: a JSON header next to a little-endian float64 payload.

    <stem>.json   schema_version, dtype, shape, role, seed, generator, crc32
    <stem>.bin    C-order '<f8' values, 8 * prod(shape) bytes

A split directory holds one container per role plus the ground-truth sidecar.
"""
import dataclasses
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from isds.data.synthgen import GeneratorConfig, GroundTruth, SyntheticGenerator
from isds.models.sds.graphs import RegimeGraphSet
from isds.modules.nnet import DTYPE
from isds.utils.checkpoint import (
    build_net,
    checkpoint_from_dict,
    checkpoint_to_dict,
    decode_tensor,
    encode_tensor,
    net_spec,
)
from isds.utils.config import check_choice
from isds.utils.exceptions import ChecksumError, ConfigError, ShapeError
from isds.utils.io import atomic_write_bytes, dump_json, load_json
from isds.utils.logging import get_logger
from isds.utils.vars import (
    DATASET_HEADER_SUFFIX,
    DATASET_PAYLOAD_SUFFIX,
    GROUND_TRUTH_SIDECAR_NAME,
    ROLES,
    SCHEMA_VERSION,
)

logger = get_logger(__name__)

ROLE_FILES = {"observed": "observations", "latent": "latents", "regime": "regimes"}


@dataclass
class ContainerHeader:
    shape: list[int]
    role: str
    seed: Optional[int] = None
    generator: Optional[str] = None
    crc32: int = 0
    dtype: str = "float64"
    schema_version: int = SCHEMA_VERSION

    @property
    def nbytes(self) -> int:
        return 8 * int(np.prod(self.shape))


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(DATASET_HEADER_SUFFIX), stem.with_suffix(DATASET_PAYLOAD_SUFFIX)


def save_container(
    tensor: torch.Tensor,
    stem,
    role: str,
    seed: Optional[int] = None,
    generator: Optional[str] = None,
) -> ContainerHeader:
    """Regime labels are stored as float64 like every other role."""
    check_choice(role, ROLES, "role")
    array = torch.as_tensor(tensor).detach().cpu().numpy().astype("<f8")
    if array.ndim == 2:
        array = array[..., None]
    if array.ndim != 3:
        raise ShapeError(f"expected an (N, T, dim) tensor, got shape {array.shape}")
    payload = np.ascontiguousarray(array).tobytes(order="C")
    header = ContainerHeader(
        shape=list(array.shape), role=role, seed=seed, generator=generator, crc32=zlib.crc32(payload)
    )
    header_path, payload_path = _paths(stem)
    atomic_write_bytes(payload, payload_path)
    dump_json(dataclasses.asdict(header), header_path, indent=2)
    return header


def load_container(stem) -> tuple[torch.Tensor, ContainerHeader]:
    header_path, payload_path = _paths(stem)
    for path in (header_path, payload_path):
        if not path.exists():
            raise FileNotFoundError(f"missing container file {path}")
    try:
        header = ContainerHeader(**load_json(header_path))
    except TypeError as err:
        raise ConfigError(f"malformed container header {header_path}: {err}") from err
    if header.schema_version != SCHEMA_VERSION or header.dtype != "float64":
        raise ConfigError(
            f"unsupported container {header.dtype} v{header.schema_version}", field="schema_version"
        )
    payload = payload_path.read_bytes()
    if len(payload) != header.nbytes:
        raise ShapeError(f"payload holds {len(payload)} bytes, header promises {header.nbytes}")
    if zlib.crc32(payload) != header.crc32:
        raise ChecksumError(f"checksum mismatch in {payload_path}")
    tensor = torch.from_numpy(np.frombuffer(payload, dtype="<f8").reshape(header.shape).copy())
    if header.role == "regime":
        tensor = tensor.squeeze(-1).long()
    return tensor, header


@dataclass
class GroundTruthSidecar:
    graphs: RegimeGraphSet
    generator: SyntheticGenerator
    config: GeneratorConfig
    seed: int


def _generator_tag(config: GeneratorConfig) -> str:
    return f"setting={config.setting},ablation={config.ablation},noise={config.noise_mode}"


def save_ground_truth(truth: GroundTruth, directory):
    """Write every role of a split and the sidecar to `directory`."""
    directory = Path(directory)
    tag = _generator_tag(truth.config)
    save_container(truth.observations, directory / ROLE_FILES["observed"], "observed", truth.config.seed, tag)
    save_container(truth.latents, directory / ROLE_FILES["latent"], "latent", truth.config.seed, tag)
    save_container(truth.regimes.to(DTYPE), directory / ROLE_FILES["regime"], "regime", truth.config.seed, tag)
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "split": truth.split,
        "seed": truth.config.seed,
        "config": dataclasses.asdict(truth.config),
        "graphs": truth.graphs.to_dict(),
        "prior": checkpoint_to_dict(truth.generator.prior),
        "decoder": {
            "architecture": net_spec(truth.generator.decoder),
            "parameters": {k: encode_tensor(v) for k, v in truth.generator.decoder.state_dict().items()},
        },
    }
    dump_json(sidecar, directory / GROUND_TRUTH_SIDECAR_NAME, indent=1)
    logger.info(f"{truth.split} split written to {directory}")


def load_ground_truth(directory) -> GroundTruthSidecar:
    path = Path(directory) / GROUND_TRUTH_SIDECAR_NAME
    if not path.exists():
        raise FileNotFoundError(f"missing ground-truth sidecar {path}")
    sidecar = load_json(path)
    prior, _ = checkpoint_from_dict(sidecar["prior"])
    decoder = build_net(sidecar["decoder"]["architecture"])
    decoder.load_state_dict({k: decode_tensor(v) for k, v in sidecar["decoder"]["parameters"].items()})
    graphs = RegimeGraphSet.from_dict(sidecar["graphs"])
    return GroundTruthSidecar(
        graphs=graphs,
        generator=SyntheticGenerator(prior=prior, decoder=decoder, graphs=graphs),
        config=GeneratorConfig(**sidecar["config"]),
        seed=sidecar["seed"],
    )


def load_split(directory, role: str = "observed") -> torch.Tensor:
    check_choice(role, ROLES, "role")
    return load_container(Path(directory) / ROLE_FILES[role])[0]
