from .hookspecs import hookimpl
from .errors import (
    MfmError,
    InvalidShapeError,
    TensorFormatError,
    DatasetError,
    NumericDivergenceError,
)
from .network import (
    LayerSpec,
    ModelParams,
    NetworkConfig,
    build_network,
    build_full_network,
    extract_embedding,
    forward,
    backward,
    load_model,
    save_model,
)
from .trainer import HyperParams, TrainState, train
from .verification import VerificationReport, verify
from .plugins import pm, load_plugins
from dataclasses import dataclass, field
import click
from typing import Dict, List, Optional, Sequence
import os
import pathlib
from pydantic import ValidationError
import yaml

__all__ = [
    "build_network",
    "build_full_network",
    "backward",
    "DatasetError",
    "extract_embedding",
    "forward",
    "get_network_config",
    "hookimpl",
    "HyperParams",
    "InvalidShapeError",
    "LayerSpec",
    "load_model",
    "MfmError",
    "ModelParams",
    "NetworkConfig",
    "NumericDivergenceError",
    "save_model",
    "TensorFormatError",
    "train",
    "TrainState",
    "user_dir",
    "VerificationReport",
    "verify",
]


@dataclass
class NetworkConfigWithAliases:
    config: NetworkConfig
    aliases: List[str] = field(default_factory=list)

    def matches(self, query: str) -> bool:
        query = query.lower()
        return any(query in s.lower() for s in [self.config.name] + self.aliases)


class UnknownConfigError(KeyError):
    pass


def get_plugins(all=False):
    plugins = []
    plugin_to_distinfo = dict(pm.list_plugin_distinfo())
    for plugin in pm.get_plugins():
        if not all and plugin.__name__.startswith("mfmnet.default_plugins."):
            continue
        plugin_info = {
            "name": plugin.__name__,
            "hooks": [h.name for h in pm.get_hookcallers(plugin)],
        }
        distinfo = plugin_to_distinfo.get(plugin)
        if distinfo:
            plugin_info["version"] = distinfo.version
            plugin_info["name"] = (
                getattr(distinfo, "name", None) or distinfo.project_name
            )
        plugins.append(plugin_info)
    return plugins


def get_network_configs_with_aliases() -> List[NetworkConfigWithAliases]:
    configs = []

    def register(config: NetworkConfig, aliases: Optional[Sequence[str]] = None, name: Optional[str] = None):
        if name is not None:
            config = config.model_copy(update={"name": name})
        configs.append(NetworkConfigWithAliases(config, list(aliases or [])))

    load_plugins()
    pm.hook.register_network_configs(register=register)
    return configs


def get_network_config_aliases() -> Dict[str, NetworkConfig]:
    aliases = {}
    for item in get_network_configs_with_aliases():
        for alias in item.aliases:
            aliases[alias] = item.config
        aliases[item.config.name] = item.config
    return aliases


def get_network_config(name_or_path: str) -> NetworkConfig:
    "Get a registered network config by name or alias, or load one from a YAML file"
    aliases = get_network_config_aliases()
    if name_or_path in aliases:
        return aliases[name_or_path]
    path = pathlib.Path(name_or_path)
    if path.suffix in (".yaml", ".yml") and path.is_file():
        try:
            return NetworkConfig.from_yaml(path.read_text())
        except (ValidationError, yaml.YAMLError) as ex:
            raise UnknownConfigError(f"Invalid config file {path}: {ex}")
    raise UnknownConfigError("Unknown network config: " + name_or_path)


def user_dir():
    mfmnet_user_path = os.environ.get("MFMNET_USER_PATH")
    if mfmnet_user_path:
        path = pathlib.Path(mfmnet_user_path)
    else:
        path = pathlib.Path(click.get_app_dir("mfmnet"))
    path.mkdir(exist_ok=True, parents=True)
    return path
