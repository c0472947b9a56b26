"""
Utility functions for the resect-eval package: configuration files and
display helpers
"""

import configparser
from pathlib import Path
from typing import Any, Dict, Tuple, Union

from .errors import ConfigError

_SECTION = 'resect-eval'

_INT_KEYS = ('connectivity', 'min_voxels', 'std_ddof', 'workers')
_FLOAT_KEYS = ('threshold', 'cutoff_ml', 'dice_floor')
_BOOL_KEYS = ('save_masks', 'save_previews')
_LIST_KEYS = ('formats',)


def read_key_value_file(path: Union[str, Path]) -> Dict[str, str]:
    """
    Read a flat ``key = value`` file

    Lines starting with '#' or ';' are comments. Keys are case-sensitive.

    Returns:
        Mapping of key to raw string value, in file order
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read {path}: {e}") from None
    try:
        parser.read_string(f"[{_SECTION}]\n{text}", source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"Malformed key=value file {path}: {e}") from None
    return dict(parser.items(_SECTION))


def create_default_config() -> Dict[str, Any]:
    """
    Create the default experiment configuration

    Returns:
        Default configuration dictionary
    """
    return {
        'experiment': 'residual-tumor',
        'architecture': 'baseline-otsu',
        'input_configuration': 'B',
        'prediction_source': 'baseline',
        'threshold': 0.5,
        'connectivity': 26,
        'min_voxels': 20,
        'cutoff_ml': 0.175,
        'dice_floor': 0.01,
        'detection_rule': 'detection-loose',
        'std_ddof': 0,
        'workers': 1,
        'output_dir': 'results',
        'formats': ['csv', 'markdown'],
        'save_masks': False,
        'save_previews': False,
    }


def validate_experiment_config(config: Dict[str, Any]) -> Tuple[bool, str]:
    """
    Validate experiment configuration parameters

    Args:
        config: Configuration dictionary (typed values)

    Returns:
        Tuple of (is_valid, error_message)
    """
    valid_configurations = ['A', 'B', 'C', 'D', 'E']
    valid_sources = ['external', 'baseline']
    valid_connectivity = [6, 18, 26]
    valid_rules = ['detection-loose', 'detection-volume']
    valid_formats = ['csv', 'markdown']

    unknown = sorted(set(config) - set(create_default_config()))
    if unknown:
        return False, f"Unknown configuration keys: {unknown}"

    if 'input_configuration' in config:
        if config['input_configuration'] not in valid_configurations:
            return False, f"Invalid input_configuration. Must be one of: {valid_configurations}"

    if 'prediction_source' in config:
        if config['prediction_source'] not in valid_sources:
            return False, f"Invalid prediction_source. Must be one of: {valid_sources}"

    if config.get('prediction_source') == 'baseline' and config.get('input_configuration') not in (None, 'A', 'B'):
        return False, "The baseline segmenter only uses configurations A or B"

    if 'threshold' in config:
        if not 0.0 <= config['threshold'] <= 1.0:
            return False, "threshold must be in [0, 1]"

    if 'connectivity' in config:
        if config['connectivity'] not in valid_connectivity:
            return False, f"Invalid connectivity. Must be one of: {valid_connectivity}"

    if 'min_voxels' in config:
        if config['min_voxels'] < 1:
            return False, "min_voxels must be >= 1"

    if 'cutoff_ml' in config:
        if config['cutoff_ml'] <= 0:
            return False, "cutoff_ml must be > 0"

    if 'dice_floor' in config:
        if not 0.0 <= config['dice_floor'] <= 1.0:
            return False, "dice_floor must be in [0, 1]"

    if 'detection_rule' in config:
        if config['detection_rule'] not in valid_rules:
            return False, f"Invalid detection_rule. Must be one of: {valid_rules}"

    if 'std_ddof' in config:
        if config['std_ddof'] not in (0, 1):
            return False, "std_ddof must be 0 (population) or 1 (sample)"

    if 'workers' in config:
        if config['workers'] < 1:
            return False, "workers must be >= 1"

    if 'formats' in config:
        bad = [f for f in config['formats'] if f not in valid_formats]
        if bad or not config['formats']:
            return False, f"Invalid formats {bad}. Must be a subset of: {valid_formats}"

    return True, "Configuration is valid"


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ConfigError(f"{key} must be a boolean, got '{value}'")


def parse_config_values(raw: Dict[str, str]) -> Dict[str, Any]:
    """Convert raw string values to the types the experiment expects"""
    config: Dict[str, Any] = {}
    for key, value in raw.items():
        value = value.strip()
        try:
            if key in _INT_KEYS:
                config[key] = int(value)
            elif key in _FLOAT_KEYS:
                config[key] = float(value)
            elif key in _BOOL_KEYS:
                config[key] = _parse_bool(key, value)
            elif key in _LIST_KEYS:
                config[key] = [item.strip() for item in value.split(',') if item.strip()]
            elif key == 'input_configuration':
                config[key] = value.upper()
            else:
                config[key] = value
        except ValueError:
            raise ConfigError(f"Invalid value for {key}: '{value}'") from None
    return config


def load_config(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Load an experiment configuration file on top of the defaults

    Raises:
        ConfigError: unreadable file, bad value, or failed validation
    """
    config = create_default_config()
    config.update(parse_config_values(read_key_value_file(path)))
    valid, message = validate_experiment_config(config)
    if not valid:
        raise ConfigError(f"{path}: {message}")
    return config


def format_verdict(verdict_dict: Dict[str, Any]) -> str:
    """
    Format a post-processing verdict record for display

    Args:
        verdict_dict: Verdict record as written by the postprocess command

    Returns:
        Formatted string
    """
    output = []
    output.append("=== Resection Verdict ===")
    output.append(f"Residual volume: {verdict_dict.get('volume_ml', float('nan')):.4f} ml")
    output.append(f"Classification: {verdict_dict.get('classification', 'Unknown')}")
    output.append(f"Cutoff: {verdict_dict.get('cutoff_ml', 'N/A')} ml")

    if 'parameters' in verdict_dict:
        params = verdict_dict['parameters']
        output.append(f"Threshold: {params.get('threshold', 'N/A')}")
        output.append(f"Connectivity: {params.get('connectivity', 'N/A')}")
        output.append(f"Minimum component size: {params.get('min_voxels', 'N/A')} voxels")

    return '\n'.join(output)
