import pathlib
from typing import Dict, Iterable, List, Optional, Tuple, Union

from pydantic import ValidationError
import yaml

from .errors import InvalidParameterError
from .network import NetworkConfig
from .trainer import HyperParams

_NONE_VALUES = ("none", "null", "")


def dicts_to_table_string(headings: List[str], dicts: List[Dict[str, object]]) -> List[str]:
    max_lengths = [len(h) for h in headings]
    for d in dicts:
        for i, h in enumerate(headings):
            if h in d and len(str(d[h])) > max_lengths[i]:
                max_lengths[i] = len(str(d[h]))

    res = ["    ".join(h.ljust(max_lengths[i]) for i, h in enumerate(headings))]
    for d in dicts:
        res.append(
            "    ".join(str(d.get(h, "")).ljust(max_lengths[i]) for i, h in enumerate(headings)).rstrip()
        )
    return res


def render_errors(errors) -> str:
    "Flatten pydantic validation errors into 'field\\n  message' lines"
    output = []
    for error in errors:
        output.append(", ".join(str(loc) for loc in error["loc"]) or "config")
        output.append("  " + error["msg"])
    return "\n".join(output)


def build_hyperparams(
    hp_file: Optional[Union[str, pathlib.Path]] = None,
    options: Iterable[Tuple[str, str]] = (),
    seed: Optional[int] = None,
    config: Optional[NetworkConfig] = None,
) -> HyperParams:
    """
    Defaults, then the training defaults of ``config``, then values from a
    YAML ``hp_file``, then ``NAME VALUE`` overrides, then ``seed``. Later
    sources win.
    """
    values: Dict[str, object] = dict(config.hyperparams) if config is not None else {}
    if hp_file is not None:
        loaded = yaml.safe_load(pathlib.Path(hp_file).read_text()) or {}
        if not isinstance(loaded, dict):
            raise InvalidParameterError(f"Hyperparameter file {hp_file} must contain a mapping")
        values.update(loaded)
    for name, value in options:
        if name not in HyperParams.model_fields:
            raise InvalidParameterError(
                "Unknown hyperparameter '{}', valid names are: {}".format(
                    name, ", ".join(HyperParams.model_fields)
                )
            )
        values[name] = None if value.strip().lower() in _NONE_VALUES else value
    if seed is not None:
        values["seed"] = seed
    try:
        return HyperParams(**values)
    except ValidationError as ex:
        raise InvalidParameterError(render_errors(ex.errors()))


def format_float(value: Optional[float], digits: int = 4) -> str:
    if value is None:
        return ""
    return f"{value:.{digits}f}"
