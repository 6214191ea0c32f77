"""Untrusted host: HTTP transport, blob persistence and enclave lifecycle."""

from .app import Host, create_app
from .blobstore import BlobStore
from .schemas import HostConfig
from .throttle import TokenBucketThrottle

__all__ = ["BlobStore", "Host", "HostConfig", "TokenBucketThrottle", "create_app"]
