from __future__ import annotations

import json
import types
from typing import Any

from lsst.utils import doImport
from lsst.utils.introspection import get_full_type_name

from .utils import add_sys_path


class Handler:
    """Base class for objects that are built from a class name
    and a configuration dictionary.

    The benchmark systems and the surrogate network architectures
    are Handlers: they carry only configuration, never mutable state,
    so instances can be cached and shared between threads.  Their
    `descriptor` is what gets written to files, and `from_descriptor`
    rebuilds the same object, possibly from a plug-in module
    found under `plugin_dir`.
    """

    default_config: dict[str, Any] = {}
    handler_cache: dict[str, Handler] = {}

    plugin_dir: str | None = None

    def __init__(self, **kwargs: Any) -> None:
        self._config = self.default_config.copy()
        self._config.update(**kwargs)

    @staticmethod
    def get_handler(class_name: str, /, **kwargs: Any) -> Handler:
        """Create and return a handler

        Parameters
        ----------
        class_name : str
            Full name of the handler class requested

        kwargs : Any
            The configuration parameters

        Returns
        -------
        handler : Handler
            Requested handler

        Notes
        -----
        The handlers are cached by class name and configuration, with the
        class defaults filled in, so `from_descriptor(h.descriptor())` returns
        `h`.  If a cached handler is found that will be returned instead of
        producing a new one.  `class_name` is positional-only, so the
        configuration may itself carry a `class_name` key.
        """
        with add_sys_path(Handler.plugin_dir):
            handler_class = doImport(class_name)
        if isinstance(handler_class, types.ModuleType):
            raise TypeError(f"{class_name} is a module, not a Handler class")
        config = dict(getattr(handler_class, "default_config", {}))
        config.update(kwargs)
        cache_key = json.dumps([class_name, config], sort_keys=True, default=str)
        cached_handler = Handler.handler_cache.get(cache_key)
        if cached_handler is None:
            cached_handler = handler_class(**kwargs)
            Handler.handler_cache[cache_key] = cached_handler
        return cached_handler

    @staticmethod
    def from_descriptor(descriptor: dict[str, Any]) -> Handler:
        """Rebuild a handler from the output of `descriptor`"""
        return Handler.get_handler(descriptor["class_name"], **descriptor.get("config", {}))

    @property
    def config(self) -> dict[str, Any]:
        """Return the handler's configuration"""
        return self._config

    def get_handler_class_name(self) -> str:
        """Return this class's full name"""
        return get_full_type_name(self)

    def descriptor(self) -> dict[str, Any]:
        """Return the class name and configuration needed to rebuild this object"""
        return dict(class_name=self.get_handler_class_name(), config=self.config.copy())

    def get_config_var(self, varname: str, default: Any, **kwargs: Any) -> Any:
        """Utility function to get a configuration parameter value

        Parameters
        ----------
        varname : str
            Name of the parameter requested

        default : Any
            Default value of the parameter in question

        Keywords
        --------
        Can be used to override configuration value

        Returns
        -------
        par_value : Any
            Value of the requested parameter

        Notes
        -----
        The resolution order is:
            1. Return the value from the kwargs if it is present there
            2. Return the value from the config if it is present there
            3. Return the provided default value
        """
        val = kwargs.get(varname, None)
        if val is None:
            val = self.config.get(varname, default)
        return val
