"""``cks``: command-line client for the key store.

Each invocation opens one attested session, runs one operation and exits.
Imports are kept to the standard library plus the channel code so that start-up
stays well under the cost of a network round trip.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

from ..errors import CKSError, RateLimited
from .config import ConfigError, build_config, parse_config

DEFAULT_CONFIG = os.path.join("~", ".config", "cks", "client.conf")

EXIT_ERROR, EXIT_USAGE, EXIT_RATE_LIMITED = 1, 2, 3


def _policy_args(p: argparse.ArgumentParser, ops_help: str) -> None:
    p.add_argument("--op", dest="ops", action="append", choices=("sign", "decrypt"), help=ops_help)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--expires-in", type=int, metavar="SECONDS")
    group.add_argument("--expires-at", metavar="TIME", help="epoch seconds or YYYY-MM-DDTHH:MM:SSZ")
    p.add_argument("--uses", type=int)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cks", description="Cloud key store client.")
    p.add_argument("--server", help="server URL, overrides the config file")
    p.add_argument("--config", default=os.environ.get("CKS_CONFIG", DEFAULT_CONFIG), help="client config file")
    p.add_argument("--uid", help="user id, overrides the config file")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("create-user", help="register a user")
    s.add_argument("--base-lockout", type=int, help="back-off base in seconds")

    sub.add_parser("reset-password", help="replace the password using the reset password")

    s = sub.add_parser("gen-key", help="generate a key inside the enclave")
    s.add_argument("--algorithm", choices=("rsa3072", "p256"), default="p256")
    s.add_argument("--pubout", help="write the public key here (PEM)")
    _policy_args(s, "permitted operation (repeatable, default all)")

    s = sub.add_parser("import-key", help="import a PKCS#8 private key (PEM or DER)")
    s.add_argument("key_file")
    s.add_argument("--pubout", help="write the public key here (PEM)")
    _policy_args(s, "permitted operation (repeatable, default all)")

    s = sub.add_parser("sign", help="sign the SHA-256 digest of a file")
    s.add_argument("--key", required=True)
    s.add_argument("--out", help="signature output file (default stdout)")
    s.add_argument("file")

    s = sub.add_parser("decrypt", help="decrypt a ciphertext file")
    s.add_argument("--key", required=True)
    s.add_argument("--out", help="plaintext output file (default stdout)")
    s.add_argument("file")

    s = sub.add_parser("set-policy", help="replace a key's usage policy")
    s.add_argument("--key", required=True)
    _policy_args(s, "permitted operation (repeatable, required)")

    s = sub.add_parser("delegate", help="allow other users to use a key")
    s.add_argument("--key", required=True)
    s.add_argument("--to", dest="delegatees", action="append", required=True, metavar="UID")
    _policy_args(s, "delegated operation (repeatable, default the key's)")

    s = sub.add_parser("undelegate", help="revoke delegations")
    s.add_argument("--key", required=True)
    s.add_argument("--to", dest="delegatees", action="append", required=True, metavar="UID")

    s = sub.add_parser("audit", help="show a key's audit log")
    s.add_argument("--key", required=True)
    s.add_argument("--from", dest="start", metavar="TIME")
    s.add_argument("--to", dest="end", metavar="TIME")
    s.add_argument("--porcelain", action="store_true", help="tab-separated rows with full digests")

    s = sub.add_parser("delete-key", help="delete a key")
    s.add_argument("--key", required=True)
    return p


def _config(args):
    path = os.path.expanduser(args.config)
    values = {}
    if os.path.exists(path):
        with open(path) as fh:
            values = parse_config(fh.read())
    elif args.config != DEFAULT_CONFIG:
        raise ConfigError(f"config file {args.config} not found")
    if args.server:
        values["server_url"] = args.server
    config = build_config(values)
    if args.uid:
        config.uid = args.uid
    if not config.uid:
        raise ConfigError("no uid given (use --uid or set uid in the config)")
    return config


def _write(data: bytes, path: str | None) -> None:
    if path:
        with open(path, "wb") as fh:
            fh.write(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()


def _pem_public(der: bytes) -> bytes:
    import base64
    import textwrap

    body = "\n".join(textwrap.wrap(base64.b64encode(der).decode(), 64))
    return f"-----BEGIN PUBLIC KEY-----\n{body}\n-----END PUBLIC KEY-----\n".encode()


def _to_der_pkcs8(data: bytes) -> bytes:
    if data.lstrip().startswith(b"-----BEGIN"):
        from cryptography.hazmat.primitives import serialization

        key = serialization.load_pem_private_key(data, password=None)
        return key.private_bytes(serialization.Encoding.DER, serialization.PrivateFormat.PKCS8, serialization.NoEncryption())
    return data


def _policy(args):
    expires_at = None
    if getattr(args, "expires_at", None):
        from .render import parse_wall_clock

        expires_at = parse_wall_clock(args.expires_at)
    return {"ops": args.ops, "expires_in": args.expires_in, "expires_at": expires_at, "uses": args.uses}


def run(args, config, client) -> int:
    uid = config.uid
    cmd = args.command
    if cmd == "create-user":
        client.create_user(uid, config.password("new_password"), config.password("new_reset_password"), args.base_lockout)
        print(f"created {uid}")
        return 0
    if cmd == "reset-password":
        client.reset_password(uid, config.password("reset_password"), config.password("new_password"))
        print(f"password reset for {uid}")
        return 0
    if cmd in ("gen-key", "import-key"):
        if cmd == "gen-key":
            info = client.gen_key(uid, config.password(), args.algorithm, **_policy(args))
        else:
            with open(args.key_file, "rb") as fh:
                key_data = _to_der_pkcs8(fh.read())
            info = client.import_key(uid, config.password(), key_data, **_policy(args))
        if args.pubout:
            _write(_pem_public(info.public_key), args.pubout)
        print(f"{info.key_id} {info.algorithm}")
        return 0
    if cmd == "sign":
        digest = hashlib.sha256()
        with open(args.file, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 16), b""):
                digest.update(chunk)
        _write(client.sign(uid, config.password(), args.key, digest.digest()), args.out)
        return 0
    if cmd == "decrypt":
        with open(args.file, "rb") as fh:
            enc = fh.read()
        _write(client.decrypt(uid, config.password(), args.key, enc), args.out)
        return 0
    if cmd == "set-policy":
        if not args.ops:
            raise ConfigError("set-policy needs at least one --op")
        for name in client.set_policy(uid, config.password(), args.key, **_policy(args)):
            print(f"dropped delegation to {name}")
        return 0
    if cmd == "delegate":
        client.delegate(uid, config.password(), args.key, args.delegatees, **_policy(args))
        print(f"delegated {args.key} to {', '.join(args.delegatees)}")
        return 0
    if cmd == "undelegate":
        client.undelegate(uid, config.password(), args.key, args.delegatees)
        print(f"revoked {args.key} from {', '.join(args.delegatees)}")
        return 0
    if cmd == "audit":
        from .render import audit_porcelain, audit_table, parse_wall_clock

        start = parse_wall_clock(args.start) if args.start else None
        end = parse_wall_clock(args.end) if args.end else None
        rows = client.audit(uid, config.password(), args.key, start, end)
        sys.stdout.write(audit_porcelain(rows) if args.porcelain else audit_table(rows))
        return 0
    if cmd == "delete-key":
        client.delete_key(uid, config.password(), args.key)
        print(f"deleted {args.key}")
        return 0
    raise AssertionError(cmd)


def main(argv: list[str] | None = None, transport=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _config(args)
    except (ConfigError, OSError) as err:
        print(f"cks: {err}", file=sys.stderr)
        return EXIT_USAGE
    from .api import KeyStoreClient

    client = KeyStoreClient.from_config(config, transport)
    try:
        client.connect()
        return run(args, config, client)
    except RateLimited as err:
        print(f"cks: rate limited, retry after {err.retry_after}s", file=sys.stderr)
        return EXIT_RATE_LIMITED
    except CKSError as err:
        print(f"cks: {err.code}: {err.message}", file=sys.stderr)
        return EXIT_ERROR
    except (ConfigError, ValueError, OSError) as err:
        print(f"cks: {err}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        client.close()


if __name__ == "__main__":
    sys.exit(main())
