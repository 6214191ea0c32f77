"""``cks-server``: run the key-store host."""

from __future__ import annotations

import argparse
import base64
import logging
import sys

from pydantic import ValidationError

from ..platform import Platform, measure_enclave
from .app import EXIT_CONFIG, create_app
from .blobstore import BlobStore
from .schemas import HostConfig

log = logging.getLogger("cks.host")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cks-server", description="Serve the cloud key store over HTTP.")
    p.add_argument("--listen", default="127.0.0.1:8700", help="host:port to bind")
    p.add_argument("--data-dir", default="./cks-data", help="sealed blob and platform state directory")
    p.add_argument("--host-rps", type=float, default=50.0, help="requests/second allowed per source address")
    p.add_argument("--time-offset", type=int, default=None, help="wall-clock offset in seconds (first boot only)")
    p.add_argument("--unsafe-harness", action="store_true", help="expose clock and fault hooks; testing only")
    p.add_argument("--kdf-cost", type=int, default=14, help="log2 of the scrypt work factor for new verifiers")
    p.add_argument("--checkpoint-interval", type=float, default=60.0, help="seconds between checkpoints of dirty state")
    p.add_argument("--print-anchor", action="store_true", help="print a client config for this host and exit")
    p.add_argument("--log-level", default="INFO")
    return p


def print_anchor(config: HostConfig) -> None:
    platform = Platform(config.data_dir, manual_clock=config.harness_mode)
    try:
        print(f"server_url = http://{config.listen_address}")
        print(f"authority_public_key = {base64.b64encode(platform.authority_public_bytes()).decode()}")
        print(f"expected_measurement = {base64.b64encode(measure_enclave().digest).decode()}")
    finally:
        platform.close()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = HostConfig(
            listen_address=args.listen,
            data_dir=args.data_dir,
            host_rate_limit=args.host_rps,
            harness_mode=args.unsafe_harness,
            time_offset=args.time_offset,
            checkpoint_interval=args.checkpoint_interval,
            kdf_log2_n=args.kdf_cost,
        )
    except ValidationError as err:
        print(f"cks-server: invalid configuration: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_anchor:
        print_anchor(config)
        return 0
    if config.time_offset is not None and BlobStore(config.data_dir).load() is not None:
        print("cks-server: --time-offset is only accepted on first boot", file=sys.stderr)
        return EXIT_CONFIG

    import signal

    import uvicorn

    # uvicorn re-raises the stop signal once it has shut down; a no-op handler
    # lets us still report the enclave's exit status
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: None)
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level=args.log_level.lower(), access_log=False)
    host = getattr(app.state, "host", None)
    return host.exit_code if host is not None else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
