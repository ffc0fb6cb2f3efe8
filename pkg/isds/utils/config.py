from pathlib import Path
from typing import Optional, Type, TypeVar, Union

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from isds.utils.exceptions import ConfigError

Config = TypeVar("Config")


def load_config(
    cls: Union[Type[Config], Config], filepath: Optional[str] = None, overrides: Optional[dict] = None
) -> Config:
    """
    Build a config dataclass from its defaults, a JSON/YAML file and explicit overrides,
    in that order of precedence (later wins). `cls` may also be an instance, whose values
    then replace the class defaults, e.g. a preset.

    Example:
        >>> cfg = load_config(GeneratorConfig, "conf/generate/setting_a.json", {"seed": 3})
    """
    if filepath is not None and not Path(filepath).exists():
        raise ConfigError(f"config file {filepath} does not exist")
    try:
        merged = OmegaConf.structured(cls)
        if filepath is not None:
            merged = OmegaConf.merge(merged, OmegaConf.load(filepath))
        if overrides:
            overrides = {k: v for k, v in overrides.items() if v is not None}
            merged = OmegaConf.merge(merged, overrides)
        return OmegaConf.to_object(merged)
    except ConfigError:
        raise
    except OmegaConfBaseException as err:
        field = getattr(err, "full_key", None)
        raise ConfigError(str(err).splitlines()[0], field=field) from err
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def check_choice(value, choices, field: str):
    if value not in choices:
        raise ConfigError(f"expected one of {choices}, got {value!r}", field=field)


def check_positive(value, field: str, allow_zero: bool = False):
    if value is None or value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ConfigError(f"expected a value {bound}, got {value!r}", field=field)
