import hashlib

import pytest

import oracle
from cks import crypto
from cks.errors import DecryptionFailed, MalformedKey, UnsupportedAlgorithm

DIGEST = hashlib.sha256(b"message").digest()


@pytest.fixture(scope="module", params=crypto.ALGORITHMS)
def keypair(request):
    return request.param, crypto.generate(request.param)


def test_sign_verifies_under_reference_library(keypair):
    alg, key = keypair
    sig = crypto.sign_digest(alg, key, DIGEST)
    assert crypto.verify_digest(key.public_key(), DIGEST, sig)
    assert oracle.verify(crypto.public_der(key), DIGEST, sig)
    assert not oracle.verify(crypto.public_der(key), hashlib.sha256(b"other").digest(), sig)


def test_digest_length_enforced(keypair):
    alg, key = keypair
    with pytest.raises(ValueError):
        crypto.sign_digest(alg, key, b"short")


def test_decrypt_reference_ciphertext(keypair):
    alg, key = keypair
    assert crypto.decrypt(alg, key, oracle.encrypt(crypto.public_der(key), b"attack at dawn")) == b"attack at dawn"


def test_encrypt_to_roundtrip(keypair):
    alg, key = keypair
    assert crypto.decrypt(alg, key, crypto.encrypt_to(key.public_key(), b"")) == b""


def test_wrong_key_rejected(keypair):
    alg, key = keypair
    other = crypto.generate(alg) if alg == crypto.P256 else key
    blob = crypto.encrypt_to(other.public_key(), b"x")
    if other is key:
        blob = blob[:-1] + bytes([blob[-1] ^ 1])
    with pytest.raises(DecryptionFailed):
        crypto.decrypt(alg, key, blob)


def test_garbage_ciphertext(keypair):
    alg, key = keypair
    with pytest.raises(DecryptionFailed):
        crypto.decrypt(alg, key, b"\x04" + b"\x00" * 100)


def test_compact_roundtrip(keypair):
    alg, key = keypair
    restored = crypto.from_compact(alg, crypto.compact_private(alg, key))
    assert crypto.public_der(restored) == crypto.public_der(key)
    assert crypto.verify_digest(key.public_key(), DIGEST, crypto.sign_digest(alg, restored, DIGEST))


def test_pkcs8_import_from_reference_key():
    der, spki = oracle.generate_p256_pkcs8()
    alg, key = crypto.load_pkcs8(der)
    assert alg == crypto.P256
    assert crypto.public_der(key) == spki
    assert crypto.load_pkcs8(crypto.export_pkcs8(key))[0] == crypto.P256


def test_pkcs8_rejects_garbage_and_other_types():
    with pytest.raises(MalformedKey):
        crypto.load_pkcs8(b"not a key")
    from cryptography.hazmat.primitives.asymmetric import ec, ed25519, rsa

    for key in (ec.generate_private_key(ec.SECP384R1()), ed25519.Ed25519PrivateKey.generate(), rsa.generate_private_key(65537, 2048)):
        with pytest.raises(UnsupportedAlgorithm):
            crypto.load_pkcs8(crypto.export_pkcs8(key))


def test_unknown_algorithm():
    with pytest.raises(UnsupportedAlgorithm):
        crypto.generate("ed25519")


def test_rsa_key_size():
    assert crypto.generate(crypto.RSA3072).key_size == 3072
