from isds.data.synthgen import GeneratorConfig
from isds.utils.exceptions import ConfigError
from isds.utils.vars import ABLATIONS

# every setting observes n = 10 dimensions
SETTING_PRESETS = {
    "A": dict(latent_dim=3, num_regimes=3, lag=1, noise_mode="constant"),
    "B": dict(latent_dim=3, num_regimes=3, lag=1, noise_mode="heterogeneous"),
    "C": dict(latent_dim=3, num_regimes=3, lag=1, noise_mode="history"),
    "D": dict(latent_dim=5, num_regimes=3, lag=2, noise_mode="history"),
    "E": dict(latent_dim=5, num_regimes=5, lag=2, noise_mode="heterogeneous"),
    "F": dict(latent_dim=5, num_regimes=5, lag=5, noise_mode="heterogeneous"),
}
SETTING_OBS_DIM = 10

ABLATION_LAGS = (1, 3, 5)
ABLATION_PRESET = dict(latent_dim=5, obs_dim=5, num_regimes=3, noise_mode="constant")


def setting_config(setting: str, **overrides) -> GeneratorConfig:
    """
    Example:
        >>> setting_config("A", num_sequences=2000).latent_dim
        3
    """
    setting = str(setting).upper()
    if setting not in SETTING_PRESETS:
        raise ConfigError(f"unknown setting {setting!r}", field="setting")
    kwargs = dict(SETTING_PRESETS[setting], obs_dim=SETTING_OBS_DIM, setting=setting)
    kwargs.update(overrides)
    return GeneratorConfig(**kwargs)


def ablation_config(ablation: str, lag: int = 1, **overrides) -> GeneratorConfig:
    ablation = str(ablation).lower()
    if ablation not in ABLATIONS or ablation == "none":
        raise ConfigError(f"unknown ablation {ablation!r}", field="ablation")
    kwargs = dict(ABLATION_PRESET, lag=lag, ablation=ablation)
    kwargs.update(overrides)
    return GeneratorConfig(**kwargs)
