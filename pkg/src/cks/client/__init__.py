"""Client library and ``cks`` command line."""

from .api import AuditRow, KeyInfo, KeyStoreClient, connect
from .config import ClientConfig, ConfigError, TrustAnchor, load_config
from .transport import HttpTransport

__all__ = [
    "AuditRow",
    "ClientConfig",
    "ConfigError",
    "HttpTransport",
    "KeyInfo",
    "KeyStoreClient",
    "TrustAnchor",
    "connect",
    "load_config",
]
