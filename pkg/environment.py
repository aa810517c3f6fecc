import os
from enum import Enum

from dotenv import dotenv_values, load_dotenv

from src.errors import ConfigError

ENV_PREFIX = "ADVNCE_"
TRUE_VALUES = ("1", "true", "yes", "on")
FALSE_VALUES = ("0", "false", "no", "off")


def load_env_file(root=None):
    """Loads .env (or docker.env when RUN_IN_DOCKER=true) from the project root into os.environ."""
    root = root or os.path.dirname(os.path.abspath(__file__))
    name = "docker.env" if os.getenv("RUN_IN_DOCKER") == "true" else ".env"
    load_dotenv(dotenv_path=os.path.join(root, name))


class Environment:
    """Resolved run configuration.

    Precedence, lowest first: ``defaults``, the key=value config file,
    ADVNCE_<KEY> environment variables, explicit overrides (CLI flags).
    Every value is coerced to the type of its default.
    """

    def __init__(self, defaults, config_path=None, overrides=None, prefix=ENV_PREFIX):
        self.defaults = dict(defaults)
        self.prefix = prefix
        self.values = dict(self.defaults)
        self.sources = {key: "default" for key in self.defaults}
        if config_path:
            self._apply(self._read_config_file(config_path), "file")
        self._apply(self._env_overrides(), "env")
        self._apply({k: v for k, v in (overrides or {}).items() if v is not None}, "flag")

    def _get_env_variable(self, var_name):
        """Fetches the environment variable, None when it is not set."""
        return os.getenv(var_name)

    def _read_config_file(self, path):
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        raw = dotenv_values(path)
        missing = [key for key, value in raw.items() if value is None]
        if missing:
            raise ConfigError(f"{path}: keys without a value: {', '.join(missing)}")
        return raw

    def _env_overrides(self):
        found = {}
        for key in self.defaults:
            value = self._get_env_variable(self.prefix + key.upper())
            if value is not None:
                found[key] = value
        return found

    def _apply(self, raw, source):
        unknown = sorted(set(raw) - set(self.defaults))
        if unknown:
            raise ConfigError(f"unknown configuration keys ({source}): {', '.join(unknown)}")
        for key, value in raw.items():
            self.values[key] = self._coerce(key, value)
            self.sources[key] = source

    def _coerce(self, key, value):
        default = self.defaults[key]
        if not isinstance(value, str):
            return value
        text = value.strip()
        try:
            if isinstance(default, bool):
                if text.lower() in TRUE_VALUES:
                    return True
                if text.lower() in FALSE_VALUES:
                    return False
                raise ValueError(text)
            if isinstance(default, Enum):
                return type(default)(text.lower())
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
        except ValueError:
            raise ConfigError(f"invalid value for {key}: {value!r}")
        return text

    def get(self, key):
        if key not in self.values:
            raise ConfigError(f"unknown configuration key: {key}")
        return self.values[key]

    def subset(self, keys):
        return {key: self.values[key] for key in keys}

    def write_snapshot(self, path, keys=None, resolved=None):
        """Writes the effective values (all, or only ``keys``) as sorted key=value lines.

        ``resolved`` replaces values that were only known after resolution, such as input paths.
        """
        values = {**self.values, **(resolved or {})}
        keys = values if keys is None else keys
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for key in sorted(keys):
                handle.write(f"{key}={_render(values[key])}\n")


def _render(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    return value
