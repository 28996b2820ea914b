"""Key material, signatures, the two selection hashes and cluster-key wrapping.

Public keys are 33-byte compressed secp256k1 points, digests are 32 bytes.
Two suites share one interface: :class:`EccSuite` (real ECDSA/ECIES) and
:class:`NullSuite`, a hash-only stand-in for large delay sweeps that keeps
every length and determinism property of the real one.
"""
from __future__ import annotations

import functools
import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

PublicKey = bytes
Signature = bytes

CURVE_ID = "secp256k1"
SECP256K1_ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
PUBLIC_KEY_SIZE = 33
DIGEST_SIZE = 32
SIGNATURE_SIZE = 64
CLUSTER_KEY_SIZE = 16

H1_TAG = b"\x01"
H2_TAG = b"\x02"


class CryptoError(Exception):
    pass


class EmptyKeySet(CryptoError):
    pass


class LengthMismatch(CryptoError):
    pass


class NoEligibleUav(CryptoError):
    pass


class UnwrapFailure(CryptoError):
    pass


class StaleEpoch(CryptoError):
    pass


@dataclass(frozen=True)
class KeyPair:
    public_key: PublicKey
    secret_key: int = field(repr=False)


@dataclass(frozen=True)
class ClusterKey:
    key_bytes: bytes = field(repr=False)
    epoch: int

    def __post_init__(self):
        if len(self.key_bytes) != CLUSTER_KEY_SIZE:
            raise ValueError(f"cluster key must be {CLUSTER_KEY_SIZE} bytes")


@dataclass(frozen=True)
class SystemParams:
    """Published by the base station before take-off."""

    bs_public_key: PublicKey
    curve_id: str = CURVE_ID
    q: int = SECP256K1_ORDER
    generator_tag: str = "secp256k1/G"
    h1_id: str = "sha256/0x01"
    h2_id: str = "sha256/0x02"


# -- hashing -----------------------------------------------------------------

def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def h1(data: bytes) -> bytes:
    """Head-candidate selection hash."""
    return sha256(H1_TAG + data)


def h2(data: bytes) -> bytes:
    """Packet / backup-target hash."""
    return sha256(H2_TAG + data)


def xor_fold(keys: Sequence[PublicKey]) -> bytes:
    if not keys:
        raise EmptyKeySet("xor_fold needs at least one key")
    size = len(keys[0])
    if any(len(k) != size for k in keys):
        raise LengthMismatch("public keys differ in serialized length")
    acc = 0
    for k in keys:
        acc ^= int.from_bytes(k, "big")
    return acc.to_bytes(size, "big")


def derive_index(digest: bytes, eligible_count: int) -> int:
    if eligible_count < 1:
        raise NoEligibleUav("no eligible UAV to index")
    return int.from_bytes(digest, "big") % eligible_count


def select_by_hash(all_keys: Iterable[PublicKey], eligible: Iterable[PublicKey],
                   hash_fn=h1) -> PublicKey:
    """Pick one of ``eligible`` by ``hash_fn(xor of all_keys)`` mod count.

    ``eligible`` is sorted by key bytes first so every node holding the same
    member list lands on the same key.
    """
    ordered = sorted(eligible)
    digest = hash_fn(xor_fold(list(all_keys)))
    return ordered[derive_index(digest, len(ordered))]


# -- seeds -------------------------------------------------------------------

def _seed_bytes(seed) -> bytes:
    if isinstance(seed, bytes):
        return seed
    if isinstance(seed, int):
        return seed.to_bytes((max(seed.bit_length(), 1) + 8) // 8, "big", signed=True)
    if isinstance(seed, str):
        return seed.encode()
    raise TypeError(f"unsupported seed type {type(seed).__name__}")


def scalar_from_seed(seed, q: int = SECP256K1_ORDER) -> int:
    """Rejection-sample a scalar in [1, q) from a deterministic seed."""
    base = _seed_bytes(seed)
    counter = 0
    while True:
        x = int.from_bytes(sha256(base + struct.pack(">I", counter)), "big")
        if 0 < x < q:
            return x
        counter += 1


# -- result encryption (AES-128-GCM, suite independent) ----------------------

def _result_aad(epoch: int, task_id: int, producer: PublicKey) -> bytes:
    return struct.pack(">QQ", epoch, task_id) + producer


def encrypt_result(ck: ClusterKey, task_id: int, producer: PublicKey, plaintext: bytes) -> bytes:
    aad = _result_aad(ck.epoch, task_id, producer)
    nonce = sha256(b"result-nonce" + aad)[:12]
    return AESGCM(ck.key_bytes).encrypt(nonce, plaintext, aad)


def decrypt_result(ck: ClusterKey, key_epoch: int, task_id: int, producer: PublicKey,
                   ciphertext: bytes) -> bytes:
    if key_epoch != ck.epoch:
        raise StaleEpoch(f"result under epoch {key_epoch}, current epoch is {ck.epoch}")
    aad = _result_aad(ck.epoch, task_id, producer)
    nonce = sha256(b"result-nonce" + aad)[:12]
    try:
        return AESGCM(ck.key_bytes).decrypt(nonce, ciphertext, aad)
    except InvalidTag as exc:
        raise UnwrapFailure("result ciphertext failed authentication") from exc


def _pack_cluster_key(ck: ClusterKey) -> bytes:
    return struct.pack(">Q", ck.epoch) + ck.key_bytes


def _unpack_cluster_key(raw: bytes) -> ClusterKey:
    (epoch,) = struct.unpack(">Q", raw[:8])
    return ClusterKey(raw[8:], epoch)


# -- suites ------------------------------------------------------------------

class CryptoSuite:
    """Asymmetric operations used by the ledger and the protocol."""

    name = "abstract"
    suite_id = -1
    public_key_size = PUBLIC_KEY_SIZE

    def generate_keypair(self, seed) -> KeyPair:
        raise NotImplementedError

    def sign(self, secret: int, message: bytes) -> Signature:
        raise NotImplementedError

    def verify(self, pk: PublicKey, message: bytes, sig: Signature) -> bool:
        raise NotImplementedError

    def wrap_cluster_key(self, ck: ClusterKey, member_pk: PublicKey, ephemeral_seed=None) -> bytes:
        raise NotImplementedError

    def unwrap_cluster_key(self, blob: bytes, member_sk: int) -> ClusterKey:
        raise NotImplementedError


@functools.lru_cache(maxsize=4096)
def _private_key(secret: int) -> ec.EllipticCurvePrivateKey:
    return ec.derive_private_key(secret, ec.SECP256K1())


@functools.lru_cache(maxsize=4096)
def _public_key(pk: bytes) -> ec.EllipticCurvePublicKey:
    return ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256K1(), pk)


def _compress(key: ec.EllipticCurvePublicKey) -> bytes:
    return key.public_bytes(Encoding.X962, PublicFormat.CompressedPoint)


@functools.lru_cache(maxsize=65536)
def _ecdsa_verify(pk: bytes, message: bytes, sig: bytes) -> bool:
    if len(sig) != SIGNATURE_SIZE or len(pk) != PUBLIC_KEY_SIZE:
        return False
    try:
        key = _public_key(pk)
        der = encode_dss_signature(int.from_bytes(sig[:32], "big"), int.from_bytes(sig[32:], "big"))
        key.verify(der, message, ec.ECDSA(hashes.SHA256()))
        return True
    except (InvalidSignature, ValueError):
        return False


def _wrap_kdf(shared: bytes, eph_pub: bytes, member_pk: bytes) -> tuple[bytes, bytes]:
    okm = HKDF(algorithm=hashes.SHA256(), length=CLUSTER_KEY_SIZE + 12, salt=eph_pub,
               info=b"uavidbc cluster-key wrap" + member_pk).derive(shared)
    return okm[:CLUSTER_KEY_SIZE], okm[CLUSTER_KEY_SIZE:]


class EccSuite(CryptoSuite):
    """ECDSA (RFC 6979 deterministic nonces) and ECIES over secp256k1."""

    name = "ecc"
    suite_id = 1

    def generate_keypair(self, seed) -> KeyPair:
        secret = scalar_from_seed(seed)
        return KeyPair(_compress(_private_key(secret).public_key()), secret)

    def sign(self, secret: int, message: bytes) -> Signature:
        der = _private_key(secret).sign(message, ec.ECDSA(hashes.SHA256(), deterministic_signing=True))
        r, s = decode_dss_signature(der)
        return r.to_bytes(32, "big") + s.to_bytes(32, "big")

    def verify(self, pk: PublicKey, message: bytes, sig: Signature) -> bool:
        return _ecdsa_verify(bytes(pk), bytes(message), bytes(sig))

    def wrap_cluster_key(self, ck: ClusterKey, member_pk: PublicKey, ephemeral_seed=None) -> bytes:
        if ephemeral_seed is None:
            ephemeral_seed = os.urandom(32)
        eph = ec.derive_private_key(scalar_from_seed(ephemeral_seed), ec.SECP256K1())
        eph_pub = _compress(eph.public_key())
        shared = eph.exchange(ec.ECDH(), _public_key(member_pk))
        key, nonce = _wrap_kdf(shared, eph_pub, member_pk)
        return eph_pub + AESGCM(key).encrypt(nonce, _pack_cluster_key(ck), eph_pub)

    def unwrap_cluster_key(self, blob: bytes, member_sk: int) -> ClusterKey:
        eph_pub, body = blob[:PUBLIC_KEY_SIZE], blob[PUBLIC_KEY_SIZE:]
        priv = _private_key(member_sk)
        try:
            shared = priv.exchange(ec.ECDH(), _public_key(eph_pub))
            key, nonce = _wrap_kdf(shared, eph_pub, _compress(priv.public_key()))
            return _unpack_cluster_key(AESGCM(key).decrypt(nonce, body, eph_pub))
        except (InvalidTag, ValueError) as exc:
            raise UnwrapFailure("cluster key unwrap failed") from exc


class NullSuite(CryptoSuite):
    """Hash-only stand-in: same sizes, same determinism, no security."""

    name = "null"
    suite_id = 0

    @staticmethod
    def _pk(secret: int) -> PublicKey:
        return b"\x02" + sha256(b"null-pk" + secret.to_bytes(32, "big"))

    def generate_keypair(self, seed) -> KeyPair:
        secret = scalar_from_seed(seed)
        return KeyPair(self._pk(secret), secret)

    def sign(self, secret: int, message: bytes) -> Signature:
        return sha256(b"null-sig" + self._pk(secret) + message) * 2

    def verify(self, pk: PublicKey, message: bytes, sig: Signature) -> bool:
        return sig == sha256(b"null-sig" + pk + message) * 2

    def wrap_cluster_key(self, ck: ClusterKey, member_pk: PublicKey, ephemeral_seed=None) -> bytes:
        if ephemeral_seed is None:
            ephemeral_seed = os.urandom(32)
        eph = b"\x03" + sha256(_seed_bytes(ephemeral_seed))
        pad = sha256(b"null-wrap" + eph + member_pk)[:24]
        body = bytes(a ^ b for a, b in zip(_pack_cluster_key(ck), pad))
        tag = sha256(b"null-tag" + eph + member_pk + body)[:16]
        return eph + body + tag

    def unwrap_cluster_key(self, blob: bytes, member_sk: int) -> ClusterKey:
        pk = self._pk(member_sk)
        eph, body, tag = blob[:33], blob[33:57], blob[57:]
        if tag != sha256(b"null-tag" + eph + pk + body)[:16]:
            raise UnwrapFailure("cluster key unwrap failed")
        pad = sha256(b"null-wrap" + eph + pk)[:24]
        return _unpack_cluster_key(bytes(a ^ b for a, b in zip(body, pad)))


ECC = EccSuite()
NULL = NullSuite()
SUITES = {s.suite_id: s for s in (ECC, NULL)}


def suite_by_name(name: str) -> CryptoSuite:
    for s in SUITES.values():
        if s.name == name:
            return s
    raise KeyError(f"unknown crypto suite {name!r}")


# module-level shortcuts bound to the real suite

def generate_keypair(seed) -> KeyPair:
    return ECC.generate_keypair(seed)


def sign(secret: int, message: bytes) -> Signature:
    return ECC.sign(secret, message)


def verify(pk: PublicKey, message: bytes, sig: Signature) -> bool:
    return ECC.verify(pk, message, sig)


def wrap_cluster_key(ck: ClusterKey, member_pk: PublicKey, ephemeral_seed=None) -> bytes:
    return ECC.wrap_cluster_key(ck, member_pk, ephemeral_seed)


def unwrap_cluster_key(blob: bytes, member_sk: int) -> ClusterKey:
    return ECC.unwrap_cluster_key(blob, member_sk)
