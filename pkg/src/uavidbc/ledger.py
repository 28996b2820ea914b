"""Identity-management blockchain: transactions, blocks, Merkle proofs and the
on-chain contract that checks signers, generator chains and status changes.

Binary layout is documented in ``docs/wire.md``; every integer is big-endian
and every variable-length field is prefixed with a u32 length.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from functools import cached_property
from typing import Iterable, Iterator, Sequence

from .crypto import ECC, SUITES, CryptoSuite, PublicKey, h1, h2, select_by_hash, sha256

ZERO_HASH = bytes(32)
CHAIN_MAGIC = b"IDBC"
CHAIN_VERSION = 1


# -- errors ------------------------------------------------------------------

class LedgerError(Exception):
    pass


class EmptyBlock(LedgerError):
    pass


class BadLeafIndex(LedgerError, IndexError):
    pass


class NotFound(LedgerError, LookupError):
    pass


class WireError(LedgerError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class Reject(str, Enum):
    BAD_SIGNER = "BadSigner"
    BAD_INPUT_ADDRESS = "BadInputAddress"
    ILLEGAL_STATE_TRANSITION = "IllegalStateTransition"
    NOT_THE_CANDIDATE = "NotTheCandidate"
    CANDIDATE_NOT_NATIVE = "CandidateNotNative"
    DUPLICATE_EVENT = "DuplicateEvent"
    # block-level
    BAD_PREV_HASH = "BadPrevHash"
    BAD_HEIGHT = "BadHeight"
    BAD_MERKLE_ROOT = "BadMerkleRoot"
    BAD_PROPOSER = "BadProposer"
    BAD_TIMESTAMP = "BadTimestamp"
    EMPTY_BLOCK = "EmptyBlock"


class TransactionRejected(LedgerError):
    def __init__(self, reason: Reject, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


class BlockRejected(LedgerError):
    def __init__(self, reason: Reject, height: int, tx_index: int | None = None, detail: str = ""):
        where = f"block {height}" + (f" tx {tx_index}" if tx_index is not None else "")
        super().__init__(f"{where}: {reason.value}" + (f" ({detail})" if detail else ""))
        self.reason = reason
        self.height = height
        self.tx_index = tx_index
        self.detail = detail


# -- status machine ----------------------------------------------------------

class UavStatus(IntEnum):
    NATIVE = 0
    DISCONNECTED = 1
    MARKED = 2
    RECONNECTED = 3

    def __str__(self):
        return self.name.capitalize()


LEGAL_TRANSITIONS = frozenset({
    (UavStatus.NATIVE, UavStatus.DISCONNECTED),
    (UavStatus.DISCONNECTED, UavStatus.MARKED),
    (UavStatus.MARKED, UavStatus.RECONNECTED),
    (UavStatus.MARKED, UavStatus.DISCONNECTED),
    (UavStatus.RECONNECTED, UavStatus.DISCONNECTED),
})


def is_legal_transition(old: UavStatus, new: UavStatus) -> bool:
    return (old, new) in LEGAL_TRANSITIONS


def lml_digest(cluster_index: int, entries: Iterable[tuple[PublicKey, UavStatus]]) -> bytes:
    """Digest of a member list, in registration order."""
    w = Writer().u32(cluster_index)
    for pk, status in entries:
        w.blob(pk).u8(int(status))
    return sha256(w.getvalue())


def expected_candidate(all_keys: Sequence[PublicKey], statuses: dict[PublicKey, UavStatus],
                       head: PublicKey | None) -> PublicKey | None:
    eligible = [pk for pk in all_keys if statuses[pk] == UavStatus.NATIVE and pk != head]
    if not eligible:
        return None
    return select_by_hash(all_keys, eligible, h1)


# -- wire primitives ---------------------------------------------------------

class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">B", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">Q", v))
        return self

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(bytes(b))
        return self

    def blob(self, b: bytes) -> "Writer":
        return self.u32(len(b)).raw(b)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.pos = offset

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WireError(f"truncated input (need {n} bytes)", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        start = self.pos
        n = self.u32()
        if n > len(self.data) - self.pos:
            raise WireError(f"length prefix {n} exceeds remaining input", start)
        return self._take(n)

    def done(self) -> bool:
        return self.pos == len(self.data)


# -- merkle ------------------------------------------------------------------

@dataclass(frozen=True)
class MerkleProof:
    leaf_index: int
    # (sibling hash, sibling sits on the left)
    siblings: tuple[tuple[bytes, bool], ...] = ()


def _next_level(level: list[bytes]) -> list[bytes]:
    if len(level) % 2:
        level = level + [level[-1]]
    return [h2(level[i] + level[i + 1]) for i in range(0, len(level), 2)]


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    if not leaves:
        raise EmptyBlock("merkle root of an empty leaf list")
    level = [h2(leaf) for leaf in leaves]
    while len(level) > 1:
        level = _next_level(level)
    return level[0]


def merkle_proof(leaves: Sequence[bytes], index: int) -> MerkleProof:
    if not 0 <= index < len(leaves):
        raise BadLeafIndex(f"leaf index {index} outside [0, {len(leaves)})")
    level = [h2(leaf) for leaf in leaves]
    siblings = []
    i = index
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
        if i % 2:
            siblings.append((level[i - 1], True))
        else:
            siblings.append((level[i + 1], False))
        level = _next_level(level)
        i //= 2
    return MerkleProof(index, tuple(siblings))


def verify_proof(leaf: bytes, proof: MerkleProof, root: bytes) -> bool:
    node = h2(leaf)
    for sibling, on_left in proof.siblings:
        node = h2(sibling + node) if on_left else h2(node + sibling)
    return node == root


def _write_proof(w: Writer, proof: MerkleProof) -> None:
    w.u32(proof.leaf_index).u32(len(proof.siblings))
    for sib, on_left in proof.siblings:
        w.raw(sib).u8(1 if on_left else 0)


def _read_proof(r: Reader) -> MerkleProof:
    index = r.u32()
    count = r.u32()
    sibs = []
    for _ in range(count):
        sib = r.raw(32)
        flag = r.u8()
        if flag > 1:
            raise WireError("bad sibling side flag", r.pos - 1)
        sibs.append((sib, bool(flag)))
    return MerkleProof(index, tuple(sibs))


# -- transactions ------------------------------------------------------------

class TxType(IntEnum):
    INITIALIZATION = 0
    MEMBER_UAV_DISCONNECTED = 1
    HEAD_UAV_DISCONNECTED = 2
    HEAD_UAV_UPDATE = 3
    KEY_UPDATE = 4
    CANDIDATE_UPDATE = 5
    TASK_RECORD = 6


@dataclass(frozen=True)
class InputAddress:
    block_hash: bytes
    proof: MerkleProof


@dataclass(frozen=True)
class Transaction:
    input_address: InputAddress | None
    cluster_index: int
    generator: PublicKey
    tx_type: TxType
    public_key: PublicKey
    fingerprint: bytes | None
    timestamp: int
    extra: bytes = b""
    signature: bytes = b""

    def signed_message(self) -> bytes:
        w = Writer().u8(int(self.tx_type)).u32(self.cluster_index).blob(self.public_key)
        if self.fingerprint is None:
            w.u8(0)
        else:
            w.u8(1).blob(self.fingerprint)
        w.u64(self.timestamp).blob(self.extra)
        return sha256(w.getvalue())

    def write(self, w: Writer) -> None:
        if self.input_address is None:
            w.u8(0)
        else:
            w.u8(1).raw(self.input_address.block_hash)
            _write_proof(w, self.input_address.proof)
        w.u32(self.cluster_index).blob(self.generator)
        w.u8(int(self.tx_type)).blob(self.public_key)
        if self.fingerprint is None:
            w.u8(0)
        else:
            w.u8(1).blob(self.fingerprint)
        w.u64(self.timestamp).blob(self.extra).blob(self.signature)

    @cached_property
    def raw(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()

    @cached_property
    def hash(self) -> bytes:
        return sha256(self.raw)

    @classmethod
    def read(cls, r: Reader) -> "Transaction":
        flag = r.u8()
        if flag == 0:
            addr = None
        elif flag == 1:
            addr = InputAddress(r.raw(32), _read_proof(r))
        else:
            raise WireError("bad input-address flag", r.pos - 1)
        cluster = r.u32()
        generator = r.blob()
        type_pos = r.pos
        try:
            tx_type = TxType(r.u8())
        except ValueError:
            raise WireError("unknown transaction type", type_pos) from None
        pk = r.blob()
        fp_flag = r.u8()
        fp = r.blob() if fp_flag else None
        ts = r.u64()
        extra = r.blob()
        sig = r.blob()
        return cls(addr, cluster, generator, tx_type, pk, fp, ts, extra, sig)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Transaction":
        r = Reader(data)
        tx = cls.read(r)
        if not r.done():
            raise WireError("trailing bytes after transaction", r.pos)
        return tx


def build_transaction(suite: CryptoSuite, signer_secret: int, *, tx_type: TxType, cluster_index: int,
                      generator: PublicKey, public_key: PublicKey, timestamp: int,
                      input_address: InputAddress | None, fingerprint: bytes | None = None,
                      extra: bytes = b"") -> Transaction:
    tx = Transaction(input_address, cluster_index, generator, tx_type, public_key,
                     fingerprint, timestamp, extra)
    return replace(tx, signature=suite.sign(signer_secret, tx.signed_message()))


# typed payload extras

def encode_init_extra(is_head: bool) -> bytes:
    return bytes([1 if is_head else 0])


def decode_init_extra(extra: bytes) -> bool:
    if len(extra) != 1 or extra[0] > 1:
        raise WireError("bad initialization extra", 0)
    return bool(extra[0])


@dataclass(frozen=True)
class KeyUpdatePayload:
    epoch: int
    lml_digest: bytes
    receipt_hashes: tuple[bytes, ...] = ()

    def encode(self) -> bytes:
        w = Writer().u64(self.epoch).raw(self.lml_digest).u32(len(self.receipt_hashes))
        for h in self.receipt_hashes:
            w.raw(h)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "KeyUpdatePayload":
        r = Reader(data)
        epoch, digest = r.u64(), r.raw(32)
        hashes = tuple(r.raw(32) for _ in range(r.u32()))
        if not r.done():
            raise WireError("trailing bytes in key_update payload", r.pos)
        return cls(epoch, digest, hashes)


@dataclass(frozen=True)
class CandidateUpdatePayload:
    candidate: PublicKey | None
    lml_digest: bytes
    transitions: tuple[tuple[PublicKey, UavStatus, UavStatus], ...] = ()

    def encode(self) -> bytes:
        w = Writer().blob(self.candidate or b"").raw(self.lml_digest).u32(len(self.transitions))
        for pk, old, new in self.transitions:
            w.blob(pk).u8(int(old)).u8(int(new))
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "CandidateUpdatePayload":
        r = Reader(data)
        cand = r.blob() or None
        digest = r.raw(32)
        trans = []
        for _ in range(r.u32()):
            pk = r.blob()
            try:
                old, new = UavStatus(r.u8()), UavStatus(r.u8())
            except ValueError:
                raise WireError("unknown status code", r.pos - 1) from None
            trans.append((pk, old, new))
        if not r.done():
            raise WireError("trailing bytes in candidate_update payload", r.pos)
        return cls(cand, digest, tuple(trans))


@dataclass(frozen=True)
class TaskEntry:
    task_id: int
    producer: PublicKey
    result_hash: bytes


@dataclass(frozen=True)
class TaskRecordPayload:
    period: int
    entries: tuple[TaskEntry, ...] = ()

    def encode(self) -> bytes:
        w = Writer().u32(self.period).u32(len(self.entries))
        for e in self.entries:
            w.u64(e.task_id).blob(e.producer).raw(e.result_hash)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "TaskRecordPayload":
        r = Reader(data)
        period = r.u32()
        entries = tuple(TaskEntry(r.u64(), r.blob(), r.raw(32)) for _ in range(r.u32()))
        if not r.done():
            raise WireError("trailing bytes in task_record payload", r.pos)
        return cls(period, entries)


# -- blocks ------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    proposer: PublicKey
    timestamp: int
    transactions: tuple[Transaction, ...]

    def header_bytes(self) -> bytes:
        return (Writer().u64(self.height).raw(self.prev_hash).raw(self.merkle_root)
                .blob(self.proposer).u64(self.timestamp).u32(len(self.transactions)).getvalue())

    @cached_property
    def hash(self) -> bytes:
        return sha256(self.header_bytes())

    def leaves(self) -> list[bytes]:
        return [tx.raw for tx in self.transactions]

    def to_bytes(self) -> bytes:
        w = Writer().raw(self.header_bytes())
        for tx in self.transactions:
            w.blob(tx.raw)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "Block":
        height = r.u64()
        prev = r.raw(32)
        root = r.raw(32)
        proposer = r.blob()
        ts = r.u64()
        count = r.u32()
        txs = []
        for _ in range(count):
            start = r.pos
            body = r.blob()
            sub = Reader(body)
            try:
                tx = Transaction.read(sub)
            except WireError as exc:
                raise WireError(str(exc).split(" at byte offset")[0], start + 4 + exc.offset) from None
            if not sub.done():
                raise WireError("trailing bytes inside transaction", start + 4 + sub.pos)
            txs.append(tx)
        return cls(height, prev, root, proposer, ts, tuple(txs))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        r = Reader(data)
        block = cls.read(r)
        if not r.done():
            raise WireError("trailing bytes after block", r.pos)
        return block

    def tx_hashes(self) -> set[bytes]:
        return {tx.hash for tx in self.transactions}


def make_block(height: int, prev_hash: bytes, proposer: PublicKey, timestamp: int,
               transactions: Sequence[Transaction]) -> Block:
    txs = tuple(transactions)
    return Block(height, prev_hash, merkle_root([tx.raw for tx in txs]), proposer, timestamp, txs)


# -- on-chain state ----------------------------------------------------------

@dataclass
class ClusterView:
    keys: list[PublicKey] = field(default_factory=list)
    statuses: dict[PublicKey, UavStatus] = field(default_factory=dict)
    fingerprints: dict[PublicKey, bytes] = field(default_factory=dict)
    head: PublicKey | None = None
    candidate: PublicKey | None = None
    key_epoch: int = 0

    def copy(self) -> "ClusterView":
        return ClusterView(list(self.keys), dict(self.statuses), dict(self.fingerprints),
                           self.head, self.candidate, self.key_epoch)

    def digest(self, cluster_index: int) -> bytes:
        return lml_digest(cluster_index, ((pk, self.statuses[pk]) for pk in self.keys))

    def expected_candidate(self) -> PublicKey | None:
        return expected_candidate(self.keys, self.statuses, self.head)

    def head_candidate(self) -> PublicKey | None:
        """Candidate a head update must come from: the last recorded one while
        it is still Native, otherwise a fresh computation over the chain view."""
        if self.candidate is not None and self.statuses.get(self.candidate) == UavStatus.NATIVE \
                and self.candidate != self.head:
            return self.candidate
        return self.expected_candidate()


@dataclass
class LedgerState:
    """Registry replayed from the chain: per-cluster member lists, the cluster
    head list and each generator's latest transaction position."""

    bs_public_key: PublicKey | None = None
    clusters: dict[int, ClusterView] = field(default_factory=dict)
    latest: dict[PublicKey, tuple[int, int]] = field(default_factory=dict)
    last_ts: dict[PublicKey, int] = field(default_factory=dict)
    member_of: dict[PublicKey, int] = field(default_factory=dict)
    tx_hashes: set[bytes] = field(default_factory=set)

    def fork(self) -> "LedgerState":
        # tx_hashes is shared on purpose: validation never mutates it
        return LedgerState(self.bs_public_key, {c: v.copy() for c, v in self.clusters.items()},
                           dict(self.latest), dict(self.last_ts), dict(self.member_of), self.tx_hashes)

    def heads(self) -> dict[int, PublicKey]:
        return {c: v.head for c, v in sorted(self.clusters.items()) if v.head is not None}

    def live_heads(self) -> dict[int, PublicKey]:
        return {c: v.head for c, v in sorted(self.clusters.items())
                if v.head is not None and v.statuses[v.head] != UavStatus.DISCONNECTED}


# -- the contract ------------------------------------------------------------

def _signed_by_any(suite: CryptoSuite, tx: Transaction, keys: Iterable[PublicKey]) -> bool:
    msg = tx.signed_message()
    return any(suite.verify(pk, msg, tx.signature) for pk in keys)


def _check_input_address(tx: Transaction, chain: "Chain", state: LedgerState) -> None:
    if tx.input_address is None:
        raise TransactionRejected(Reject.BAD_INPUT_ADDRESS, "missing input address")
    pos = state.latest.get(tx.generator)
    if pos is None:
        raise TransactionRejected(Reject.BAD_INPUT_ADDRESS, "generator has no prior transaction")
    height, index = pos
    if height >= len(chain.blocks):
        raise TransactionRejected(Reject.BAD_INPUT_ADDRESS, "prior transaction not yet committed")
    block = chain.blocks[height]
    addr = tx.input_address
    if addr.block_hash != block.hash or addr.proof.leaf_index != index:
        raise TransactionRejected(Reject.BAD_INPUT_ADDRESS, "does not point at the generator's latest transaction")
    if not verify_proof(block.transactions[index].raw, addr.proof, block.merkle_root):
        raise TransactionRejected(Reject.BAD_INPUT_ADDRESS, "merkle path does not verify")
    if tx.timestamp < state.last_ts.get(tx.generator, 0):
        raise TransactionRejected(Reject.BAD_INPUT_ADDRESS, "timestamp runs backwards on generator chain")


def _cluster(state: LedgerState, tx: Transaction) -> ClusterView:
    view = state.clusters.get(tx.cluster_index)
    if view is None:
        raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, f"unknown cluster {tx.cluster_index}")
    return view


def _require_member(view: ClusterView, pk: PublicKey) -> UavStatus:
    if pk not in view.statuses:
        raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "key is not registered in this cluster")
    return view.statuses[pk]


def _transition(view: ClusterView, pk: PublicKey, new: UavStatus) -> None:
    old = _require_member(view, pk)
    if old == new:
        raise TransactionRejected(Reject.DUPLICATE_EVENT, f"already {new}")
    if not is_legal_transition(old, new):
        raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, f"{old} -> {new}")
    view.statuses[pk] = new


def validate_transaction(tx: Transaction, chain: "Chain", state: LedgerState | None = None, *,
                         height: int | None = None) -> None:
    """Check ``tx`` against the committed ``chain`` (and ``state``, the chain
    view including earlier transactions of the block being built).

    Returns None on acceptance, raises :class:`TransactionRejected` otherwise.
    ``state`` is never mutated; use :func:`apply_transaction` after acceptance.
    """
    probe = (state if state is not None else chain.state).fork()
    apply_transaction(tx, chain, probe, height=len(chain.blocks) if height is None else height)


def apply_transaction(tx: Transaction, chain: "Chain", state: LedgerState, *, height: int,
                      index: int = 0) -> None:
    """Validate ``tx`` and fold it into ``state`` (which must be a private fork)."""
    suite = chain.suite
    if tx.hash in state.tx_hashes:
        raise TransactionRejected(Reject.DUPLICATE_EVENT, "transaction already on chain")
    t = tx.tx_type

    if t == TxType.INITIALIZATION:
        if height != 0 or state.bs_public_key is None:
            raise TransactionRejected(Reject.BAD_SIGNER, "initialization outside the genesis block")
        if not suite.verify(state.bs_public_key, tx.signed_message(), tx.signature):
            raise TransactionRejected(Reject.BAD_SIGNER, "not signed by the base station")
        if tx.input_address is not None:
            raise TransactionRejected(Reject.BAD_INPUT_ADDRESS, "initialization must have NULL input")
        if tx.generator != tx.public_key or tx.public_key in state.member_of:
            raise TransactionRejected(Reject.DUPLICATE_EVENT, "key registered twice")
        try:
            is_head = decode_init_extra(tx.extra)
        except WireError:
            raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "bad role flag") from None
        view = state.clusters.setdefault(tx.cluster_index, ClusterView())
        if is_head:
            if view.head is not None:
                raise TransactionRejected(Reject.DUPLICATE_EVENT, "cluster already has a head")
            view.head = tx.public_key
        view.keys.append(tx.public_key)
        view.statuses[tx.public_key] = UavStatus.NATIVE
        view.fingerprints[tx.public_key] = tx.fingerprint or b""
        state.member_of[tx.public_key] = tx.cluster_index
    else:
        if height == 0:
            raise TransactionRejected(Reject.BAD_SIGNER, "only initialization belongs in genesis")
        view = _cluster(state, tx)
        msg_pk = tx.public_key
        head_down = view.head is None or view.statuses[view.head] == UavStatus.DISCONNECTED
        others = [h for c, h in state.live_heads().items() if c != tx.cluster_index]

        if t == TxType.MEMBER_UAV_DISCONNECTED:
            signers = others if head_down else [view.head]
            if not _signed_by_any(suite, tx, signers):
                raise TransactionRejected(Reject.BAD_SIGNER, "member disconnection must be signed by the head")
            _check_input_address(tx, chain, state)
            if tx.generator != msg_pk:
                raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "generator must be the disconnected UAV")
            _require_member(view, msg_pk)
            if msg_pk == view.head:
                raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "head uses the head procedure")
            if tx.fingerprint != view.fingerprints[msg_pk]:
                raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "fingerprint mismatch")
            _transition(view, msg_pk, UavStatus.DISCONNECTED)

        elif t == TxType.HEAD_UAV_DISCONNECTED:
            if not _signed_by_any(suite, tx, others):
                raise TransactionRejected(Reject.BAD_SIGNER, "head disconnection must be signed by the IDBC leader")
            _check_input_address(tx, chain, state)
            if tx.generator != msg_pk or msg_pk != view.head:
                raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "generator must be the cluster head")
            if tx.fingerprint != view.fingerprints[msg_pk]:
                raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "fingerprint mismatch")
            _transition(view, msg_pk, UavStatus.DISCONNECTED)

        elif t == TxType.HEAD_UAV_UPDATE:
            if tx.generator != msg_pk or not suite.verify(msg_pk, tx.signed_message(), tx.signature):
                raise TransactionRejected(Reject.BAD_SIGNER, "head update must be signed by the candidate")
            _check_input_address(tx, chain, state)
            status = _require_member(view, msg_pk)
            if not head_down:
                raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "current head is still connected")
            if status != UavStatus.NATIVE:
                raise TransactionRejected(Reject.CANDIDATE_NOT_NATIVE, f"candidate status is {status}")
            if msg_pk != view.head_candidate():
                raise TransactionRejected(Reject.NOT_THE_CANDIDATE)
            view.head = msg_pk
            view.candidate = None

        elif t in (TxType.KEY_UPDATE, TxType.CANDIDATE_UPDATE, TxType.TASK_RECORD):
            if head_down or tx.generator != view.head or msg_pk != view.head or \
                    not suite.verify(view.head, tx.signed_message(), tx.signature):
                raise TransactionRejected(Reject.BAD_SIGNER, f"{t.name.lower()} must come from the live head")
            _check_input_address(tx, chain, state)
            try:
                if t == TxType.KEY_UPDATE:
                    payload = KeyUpdatePayload.decode(tx.extra)
                elif t == TxType.CANDIDATE_UPDATE:
                    payload = CandidateUpdatePayload.decode(tx.extra)
                else:
                    payload = TaskRecordPayload.decode(tx.extra)
            except WireError as exc:
                raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, f"malformed payload: {exc}") from None
            if t == TxType.KEY_UPDATE:
                if payload.epoch <= view.key_epoch:
                    raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "key epoch must increase")
                if payload.lml_digest != view.digest(tx.cluster_index):
                    raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "LML digest disagrees with chain")
                view.key_epoch = payload.epoch
            elif t == TxType.CANDIDATE_UPDATE:
                for pk, old, new in payload.transitions:
                    if _require_member(view, pk) != old:
                        raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "recorded prior status is stale")
                    if pk == view.head:
                        raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "head status changes need head txs")
                    _transition(view, pk, new)
                if payload.lml_digest != view.digest(tx.cluster_index):
                    raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, "LML digest disagrees with chain")
                if payload.candidate != view.expected_candidate():
                    raise TransactionRejected(Reject.NOT_THE_CANDIDATE, "candidate does not follow the selection rule")
                view.candidate = payload.candidate
        else:  # pragma: no cover - TxType is closed
            raise TransactionRejected(Reject.ILLEGAL_STATE_TRANSITION, f"unknown type {t}")

    state.latest[tx.generator] = (height, index)
    state.last_ts[tx.generator] = tx.timestamp


# -- chain -------------------------------------------------------------------

class Chain:
    """Append-only list of validated blocks plus the replayed registry."""

    def __init__(self, suite: CryptoSuite = ECC):
        self.suite = suite
        self.blocks: list[Block] = []
        self.state = LedgerState()
        self._index: dict[bytes, int] = {}

    def __len__(self):
        return len(self.blocks)

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    @property
    def tip_hash(self) -> bytes:
        return self.blocks[-1].hash if self.blocks else ZERO_HASH

    def copy(self) -> "Chain":
        """Independent replica sharing the (immutable) blocks."""
        other = Chain(self.suite)
        other.blocks = list(self.blocks)
        other.state = self.state.fork()
        other.state.tx_hashes = set(self.state.tx_hashes)
        other._index = dict(self._index)
        return other

    def check_block(self, block: Block) -> LedgerState:
        """Validate ``block`` on top of this chain; return the post-state."""
        height = len(self.blocks)
        if block.prev_hash != self.tip_hash:
            raise BlockRejected(Reject.BAD_PREV_HASH, height)
        if block.height != height:
            raise BlockRejected(Reject.BAD_HEIGHT, height, detail=f"header says {block.height}")
        if not block.transactions:
            raise BlockRejected(Reject.EMPTY_BLOCK, height)
        if self.blocks and block.timestamp < self.blocks[-1].timestamp:
            raise BlockRejected(Reject.BAD_TIMESTAMP, height)
        state = self.state.fork()
        if height == 0:
            state.bs_public_key = block.proposer
        elif block.proposer not in state.live_heads().values():
            raise BlockRejected(Reject.BAD_PROPOSER, height)
        seen = set()
        for i, tx in enumerate(block.transactions):
            if tx.hash in seen:
                raise BlockRejected(Reject.DUPLICATE_EVENT, height, i)
            try:
                apply_transaction(tx, self, state, height=height, index=i)
            except TransactionRejected as exc:
                raise BlockRejected(exc.reason, height, i, exc.detail) from None
            seen.add(tx.hash)
        if merkle_root(block.leaves()) != block.merkle_root:
            raise BlockRejected(Reject.BAD_MERKLE_ROOT, height)
        state.tx_hashes = seen
        return state

    def append(self, block: Block) -> "Chain":
        new_state = self.check_block(block)
        hashes = new_state.tx_hashes
        new_state.tx_hashes = self.state.tx_hashes
        new_state.tx_hashes |= hashes
        self.state = new_state
        self._index[block.hash] = len(self.blocks)
        self.blocks.append(block)
        return self

    def contains_tx(self, tx_hash: bytes) -> bool:
        return tx_hash in self.state.tx_hashes

    def latest_tx_for_generator(self, pk: PublicKey) -> tuple[bytes, MerkleProof, Transaction]:
        pos = self.state.latest.get(pk)
        if pos is None or pos[0] >= len(self.blocks):
            raise NotFound("no committed transaction for this generator")
        block = self.blocks[pos[0]]
        return block.hash, merkle_proof(block.leaves(), pos[1]), block.transactions[pos[1]]

    def input_address_for(self, generator: PublicKey) -> InputAddress:
        block_hash, proof, _ = self.latest_tx_for_generator(generator)
        return InputAddress(block_hash, proof)

    def block_by_hash(self, block_hash: bytes) -> Block:
        try:
            return self.blocks[self._index[block_hash]]
        except KeyError:
            raise NotFound("unknown block hash") from None

    # -- export / import -----------------------------------------------------

    def to_bytes(self) -> bytes:
        w = Writer().raw(CHAIN_MAGIC).u8(CHAIN_VERSION).u8(self.suite.suite_id).u32(len(self.blocks))
        for b in self.blocks:
            w.blob(b.to_bytes())
        return w.getvalue()


def append_block(chain: Chain, block: Block) -> Chain:
    return chain.append(block)


def latest_tx_for_generator(chain: Chain, pk: PublicKey) -> tuple[bytes, MerkleProof, Transaction]:
    return chain.latest_tx_for_generator(pk)


def traversal_authenticate(chain: Chain | Sequence[Block], pk: PublicKey,
                           tx_type: TxType | None = None) -> tuple[bool, int]:
    """Baseline authentication: walk blocks newest to oldest until one carries
    a transaction about ``pk``. Returns (found, blocks visited)."""
    blocks = chain.blocks if isinstance(chain, Chain) else chain
    visited = 0
    for block in reversed(blocks):
        visited += 1
        for tx in block.transactions:
            if (tx.public_key == pk or tx.generator == pk) and (tx_type is None or tx.tx_type == tx_type):
                return True, visited
    return False, visited


def parse_chain_file(data: bytes) -> tuple[CryptoSuite, list[Block]]:
    r = Reader(data)
    if r.raw(4) != CHAIN_MAGIC:
        raise WireError("bad magic", 0)
    version = r.u8()
    if version != CHAIN_VERSION:
        raise WireError(f"unsupported chain version {version}", 4)
    sid_pos = r.pos
    suite = SUITES.get(r.u8())
    if suite is None:
        raise WireError("unknown crypto suite id", sid_pos)
    blocks = []
    for _ in range(r.u32()):
        start = r.pos
        body = r.blob()
        sub = Reader(body)
        try:
            blocks.append(Block.read(sub))
        except WireError as exc:
            raise WireError(str(exc).split(" at byte offset")[0], start + 4 + exc.offset) from None
        if not sub.done():
            raise WireError("trailing bytes inside block", start + 4 + sub.pos)
    if not r.done():
        raise WireError("trailing bytes after last block", r.pos)
    return suite, blocks


def verify_chain(blocks: Sequence[Block], suite: CryptoSuite = ECC) -> BlockRejected | None:
    """Replay ``blocks`` from genesis; return the first violation or None."""
    chain = Chain(suite)
    for block in blocks:
        try:
            chain.append(block)
        except BlockRejected as exc:
            return exc
    return None
