"""Asymmetric key handling for protected keys.

Algorithm bindings:

* ``rsa3072``: RSASSA-PSS(SHA-256, salt 32) over a 32-byte digest, RSAES-OAEP(SHA-256).
* ``p256``: ECDSA(SHA-256, pre-hashed) and an ECIES scheme (ephemeral ECDH,
  HKDF-SHA256, AES-256-GCM).

Private keys are stored compactly (RSA: ``e, p, q``; P-256: the scalar) and
materialized lazily; the public half is exchanged as DER SubjectPublicKeyInfo.
"""

from __future__ import annotations

import os

from cryptography.exceptions import InvalidSignature, InvalidTag, UnsupportedAlgorithm as _CryptoUnsupported
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa, utils
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import DecryptionFailed, MalformedKey, UnsupportedAlgorithm

RSA3072 = "rsa3072"
P256 = "p256"
ALGORITHMS = (RSA3072, P256)
RSA_BITS = 3072
RSA_E = 65537
DIGEST_LEN = 32

ECIES_INFO = b"cks-ecies-v1"
_EC_POINT_LEN = 65

_PSS = padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=DIGEST_LEN)
_OAEP = padding.OAEP(mgf=padding.MGF1(hashes.SHA256()), algorithm=hashes.SHA256(), label=None)
_PREHASHED = utils.Prehashed(hashes.SHA256())


def generate(algorithm: str):
    if algorithm == RSA3072:
        return rsa.generate_private_key(public_exponent=RSA_E, key_size=RSA_BITS)
    if algorithm == P256:
        return ec.generate_private_key(ec.SECP256R1())
    raise UnsupportedAlgorithm(f"unsupported algorithm {algorithm!r}")


def algorithm_of(private_key) -> str:
    if isinstance(private_key, rsa.RSAPrivateKey):
        if private_key.key_size != RSA_BITS:
            raise UnsupportedAlgorithm(f"RSA keys must be {RSA_BITS} bits")
        return RSA3072
    if isinstance(private_key, ec.EllipticCurvePrivateKey):
        if not isinstance(private_key.curve, ec.SECP256R1):
            raise UnsupportedAlgorithm(f"unsupported curve {private_key.curve.name}")
        return P256
    raise UnsupportedAlgorithm(f"unsupported key type {type(private_key).__name__}")


def load_pkcs8(der: bytes):
    """Parse an imported private key; returns ``(algorithm, key)``."""
    try:
        key = serialization.load_der_private_key(der, password=None)
    except _CryptoUnsupported as exc:
        raise UnsupportedAlgorithm(str(exc)) from exc
    except (ValueError, TypeError) as exc:
        raise MalformedKey("key_data is not a DER PKCS#8 private key") from exc
    return algorithm_of(key), key


def export_pkcs8(private_key) -> bytes:
    return private_key.private_bytes(
        serialization.Encoding.DER, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
    )


def public_der(key) -> bytes:
    pub = key.public_key() if hasattr(key, "public_key") else key
    return pub.public_bytes(serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo)


def load_public(der: bytes):
    return serialization.load_der_public_key(der)


def _int_bytes(n: int, length: int | None = None) -> bytes:
    return n.to_bytes(length or (n.bit_length() + 7) // 8, "big")


def compact_private(algorithm: str, key) -> list[bytes]:
    if algorithm == RSA3072:
        nums = key.private_numbers()
        return [_int_bytes(nums.public_numbers.e), _int_bytes(nums.p), _int_bytes(nums.q)]
    if algorithm == P256:
        return [_int_bytes(key.private_numbers().private_value, 32)]
    raise UnsupportedAlgorithm(algorithm)


def from_compact(algorithm: str, parts: list[bytes]):
    if algorithm == RSA3072:
        e, p, q = (int.from_bytes(x, "big") for x in parts)
        d = rsa.rsa_recover_private_exponent(e, p, q)
        nums = rsa.RSAPrivateNumbers(
            p=p,
            q=q,
            d=d,
            dmp1=rsa.rsa_crt_dmp1(d, p),
            dmq1=rsa.rsa_crt_dmq1(d, q),
            iqmp=rsa.rsa_crt_iqmp(p, q),
            public_numbers=rsa.RSAPublicNumbers(e, p * q),
        )
        return nums.private_key(unsafe_skip_rsa_key_validation=True)
    if algorithm == P256:
        return ec.derive_private_key(int.from_bytes(parts[0], "big"), ec.SECP256R1())
    raise UnsupportedAlgorithm(algorithm)


def sign_digest(algorithm: str, key, digest: bytes) -> bytes:
    if len(digest) != DIGEST_LEN:
        raise ValueError("msg_hash must be 32 bytes")
    if algorithm == RSA3072:
        return key.sign(digest, _PSS, _PREHASHED)
    return key.sign(digest, ec.ECDSA(_PREHASHED))


def verify_digest(public_key, digest: bytes, signature: bytes) -> bool:
    try:
        if isinstance(public_key, rsa.RSAPublicKey):
            public_key.verify(signature, digest, _PSS, _PREHASHED)
        else:
            public_key.verify(signature, digest, ec.ECDSA(_PREHASHED))
    except InvalidSignature:
        return False
    return True


def _ecies_key(shared: bytes, eph_point: bytes, recipient_point: bytes) -> bytes:
    return HKDF(hashes.SHA256(), 32, None, ECIES_INFO + eph_point + recipient_point).derive(shared)


def _point(pub: ec.EllipticCurvePublicKey) -> bytes:
    return pub.public_bytes(serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)


def ecies_encrypt(public_key: ec.EllipticCurvePublicKey, plaintext: bytes) -> bytes:
    """``eph_point(65) || nonce(12) || AES-GCM ciphertext``; AD is the ephemeral point."""
    eph = ec.generate_private_key(ec.SECP256R1())
    eph_point = _point(eph.public_key())
    key = _ecies_key(eph.exchange(ec.ECDH(), public_key), eph_point, _point(public_key))
    nonce = os.urandom(12)
    return eph_point + nonce + AESGCM(key).encrypt(nonce, plaintext, eph_point)


def ecies_decrypt(private_key: ec.EllipticCurvePrivateKey, blob: bytes) -> bytes:
    if len(blob) < _EC_POINT_LEN + 12 + 16:
        raise DecryptionFailed("ciphertext too short")
    eph_point, nonce, ct = blob[:_EC_POINT_LEN], blob[_EC_POINT_LEN : _EC_POINT_LEN + 12], blob[_EC_POINT_LEN + 12 :]
    try:
        eph = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), eph_point)
        key = _ecies_key(private_key.exchange(ec.ECDH(), eph), eph_point, _point(private_key.public_key()))
        return AESGCM(key).decrypt(nonce, ct, eph_point)
    except (ValueError, InvalidTag) as exc:
        raise DecryptionFailed("ciphertext rejected") from exc


def encrypt_to(public_key, plaintext: bytes) -> bytes:
    """Client-side helper: encrypt for a protected key's public half."""
    if isinstance(public_key, rsa.RSAPublicKey):
        return public_key.encrypt(plaintext, _OAEP)
    return ecies_encrypt(public_key, plaintext)


def decrypt(algorithm: str, key, enc_msg: bytes) -> bytes:
    if algorithm == RSA3072:
        try:
            return key.decrypt(enc_msg, _OAEP)
        except ValueError as exc:
            raise DecryptionFailed("ciphertext rejected") from exc
    return ecies_decrypt(key, enc_msg)
