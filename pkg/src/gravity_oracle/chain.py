"""Simulated target chains hosting SYSTEM-SC, NEBULA-SC and USER-SC state machines.

Every state change goes through :meth:`TargetChain.log_tx`, so ``tx_log`` is a
complete record of the chain.  Rejected calls are logged with the rejection
reason and leave state untouched.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from . import crypto
from .crypto import Digest, Proof

TREASURY = "treasury"
RESERVE = "reserve"


class ChainError(Exception):
    reason = "ChainError"

    def __init__(self, detail: str = ""):
        super().__init__(f"{self.reason}: {detail}" if detail else self.reason)


class InsufficientDeposit(ChainError):
    reason = "InsufficientDeposit"


class InsufficientFunds(ChainError):
    reason = "InsufficientFunds"


class AlreadyRegistered(ChainError):
    reason = "AlreadyRegistered"


class NotRegistered(ChainError):
    reason = "NotRegistered"


class Locked(ChainError):
    reason = "Locked"


class FeeUnpaid(ChainError):
    reason = "FeeUnpaid"


class BadParams(ChainError):
    reason = "BadParams"


class NotAdmitted(ChainError):
    reason = "NotAdmitted"


class UnknownNebula(ChainError):
    reason = "UnknownNebula"


class UnknownContract(ChainError):
    reason = "UnknownContract"


class NotConsul(ChainError):
    reason = "NotConsul"


class PulseNotVerified(ChainError):
    reason = "PulseNotVerified"


class PulseReject(enum.Enum):
    WRONG_LEADER = "WrongLeader"
    INSUFFICIENT_SIGNATURES = "InsufficientSignatures"
    STALE_TIMESTAMP = "StaleTimestamp"
    DUPLICATE_ROUND = "DuplicateRound"


class PulseRejected(ChainError):
    reason = "PulseRejected"

    def __init__(self, why: PulseReject):
        self.why = why
        super().__init__(why.value)


class Delivery(enum.Enum):
    DELIVERED = "Delivered"
    HASH_MISMATCH = "HashMismatch"
    NOT_SUBSCRIBED = "NotSubscribed"
    PAYMENT_FAILED = "PaymentFailed"
    ALREADY_DELIVERED = "AlreadyDelivered"


def signing_payload(agg_digest: bytes, timestamp: int, feed_id: str, nebula_id: str, round: int) -> bytes:
    """Bytes every oracle signs for a pulse and every nebula verifies."""
    return crypto.canonical(agg_digest, timestamp, feed_id, nebula_id, round)


def value_digest(value: crypto.Field) -> Digest:
    return crypto.hash_bytes(crypto.canonical(value))


# -- contract state ----------------------------------------------------------


@dataclass
class NodeRecord:
    node_id: str
    public_key: bytes
    registration_height: int
    deposit: int
    active: bool = True
    exit_height: Optional[int] = None
    release_height: Optional[int] = None
    withdrawn: bool = False

    @property
    def locked(self) -> int:
        return 0 if self.withdrawn else self.deposit


@dataclass
class SystemContract:
    min_deposit: int
    lock_period: int
    fee: int
    registered: dict[str, NodeRecord] = field(default_factory=dict)
    score_register: dict[str, float] = field(default_factory=dict)
    consuls: tuple[str, ...] = ()
    feed_registry: dict[str, str] = field(default_factory=dict)

    def score(self, node_id: str) -> float:
        return self.score_register.get(node_id, 0.0)

    def is_active(self, node_id: str) -> bool:
        rec = self.registered.get(node_id)
        return rec is not None and rec.active


@dataclass
class Subscription:
    user: str
    method: str
    mode: str  # deposit | per-call
    balance: int = 0
    active: bool = True


@dataclass(frozen=True)
class PulseRecord:
    agg_digest: Digest
    height: int
    leader: str
    timestamp: int
    signers: tuple[str, ...]


@dataclass
class NebulaContract:
    nebula_id: str
    feed_id: str
    k: int
    n: int
    min_score: float
    price: int
    oracle_set: list[str] = field(default_factory=list)
    subscriptions: dict[str, Subscription] = field(default_factory=dict)
    pulse_log: dict[int, PulseRecord] = field(default_factory=dict)
    undistributed: int = 0
    activity_log: dict[str, int] = field(default_factory=dict)
    withdrawable: dict[str, int] = field(default_factory=dict)
    delivered: set[tuple[int, str]] = field(default_factory=set)

    def expected_leader(self, height: int) -> Optional[str]:
        if not self.oracle_set:
            return None
        return self.oracle_set[height % len(self.oracle_set)]

    @property
    def held(self) -> int:
        return (
            self.undistributed
            + sum(s.balance for s in self.subscriptions.values())
            + sum(self.withdrawable.values())
        )


@dataclass
class UserContract:
    contract_id: str
    trigger: bool = False
    callback: Optional[Callable[..., None]] = None
    received_log: list[tuple] = field(default_factory=list)

    def receive(self, nebula_id: str, feed_id: str, round: int, value) -> None:
        if self.trigger:
            self.received_log.append((nebula_id, feed_id, round))
            if self.callback:
                self.callback(nebula_id, feed_id, round)
        else:
            self.received_log.append((nebula_id, feed_id, round, value))
            if self.callback:
                self.callback(nebula_id, feed_id, round, value)


@dataclass
class DeliveryReport:
    nebula_id: str
    round: int
    results: dict[str, Delivery]

    @property
    def delivered(self) -> list[str]:
        return [u for u, r in self.results.items() if r is Delivery.DELIVERED]


# -- the chain ---------------------------------------------------------------


class TargetChain:
    def __init__(
        self,
        chain_id: str,
        supply: int,
        min_deposit: int = 100,
        lock_period: int = 365,
        fee: int = 1,
        freshness: int = 2,
    ):
        self.chain_id = chain_id
        self.supply = supply
        self.freshness = freshness
        self.height = 0
        self.accounts: dict[str, int] = {RESERVE: supply, TREASURY: 0}
        self.system = SystemContract(min_deposit=min_deposit, lock_period=lock_period, fee=fee)
        self.nebulae: dict[str, NebulaContract] = {}
        self.users: dict[str, UserContract] = {}
        self.tx_log: list[dict] = []

    # plumbing

    def advance(self, height: int) -> None:
        if height <= self.height:
            raise ValueError("chain height must strictly increase")
        self.height = height

    def log_tx(self, kind: str, parties: Sequence[str], amounts: Optional[dict] = None, result: str = "ok") -> None:
        self.tx_log.append(
            {
                "height": self.height,
                "kind": kind,
                "parties": list(parties),
                "amounts": dict(amounts or {}),
                "result": result,
            }
        )

    def balance(self, account: str) -> int:
        return self.accounts.get(account, 0)

    def _debit(self, account: str, amount: int) -> None:
        if amount < 0:
            raise ValueError("negative amount")
        if self.balance(account) < amount:
            raise InsufficientFunds(f"{account} has {self.balance(account)}, needs {amount}")
        self.accounts[account] = self.balance(account) - amount

    def _credit(self, account: str, amount: int) -> None:
        if amount < 0:
            raise ValueError("negative amount")
        self.accounts[account] = self.balance(account) + amount

    def _rejected(self, kind: str, parties: Sequence[str], err: ChainError, amounts=None):
        result = err.why.value if isinstance(err, PulseRejected) else err.reason
        self.log_tx(kind, parties, amounts, result=result)
        raise err

    def transfer(self, src: str, dst: str, amount: int) -> None:
        try:
            self._debit(src, amount)
        except InsufficientFunds as err:
            self._rejected("transfer", [src, dst], err, {"amount": amount})
        self._credit(dst, amount)
        self.log_tx("transfer", [src, dst], {"amount": amount})

    def total_value(self) -> int:
        locked = sum(r.locked for r in self.system.registered.values())
        pools = sum(n.held for n in self.nebulae.values())
        return sum(self.accounts.values()) + locked + pools

    def conserved(self) -> bool:
        return self.total_value() == self.supply and all(v >= 0 for v in self.accounts.values())

    # SYSTEM-SC

    def register_node(self, node_id: str, public_key: bytes, deposit: int) -> NodeRecord:
        sysc = self.system
        parties = [node_id]
        amounts = {"deposit": deposit, "fee": sysc.fee}
        prev = sysc.registered.get(node_id)
        if prev is not None and (prev.active or not prev.withdrawn):
            self._rejected("register", parties, AlreadyRegistered(node_id), amounts)
        if deposit < sysc.min_deposit:
            self._rejected("register", parties, InsufficientDeposit(f"{deposit} < {sysc.min_deposit}"), amounts)
        if self.balance(node_id) < deposit + sysc.fee:
            self._rejected("register", parties, InsufficientFunds(node_id), amounts)
        self._debit(node_id, deposit + sysc.fee)
        self._credit(TREASURY, sysc.fee)
        rec = NodeRecord(node_id, public_key, self.height, deposit)
        sysc.registered[node_id] = rec
        self.log_tx("register", parties, amounts)
        return rec

    def lock_expiry(self, node_id: str) -> int:
        rec = self.system.registered[node_id]
        return rec.registration_height + self.system.lock_period

    def deactivate_node(self, node_id: str) -> NodeRecord:
        rec = self.system.registered.get(node_id)
        if rec is None or not rec.active:
            self._rejected("deactivate", [node_id], NotRegistered(node_id))
        score = self.system.score(node_id)
        rec.active = False
        rec.exit_height = self.height
        if score == 0:
            rec.release_height = self.height + self.system.lock_period
        else:
            rec.release_height = rec.registration_height + self.system.lock_period
        for neb in self.nebulae.values():
            if node_id in neb.oracle_set:
                neb.oracle_set.remove(node_id)
        self.log_tx("deactivate", [node_id], {"score": score, "release_height": rec.release_height})
        return rec

    def withdraw_deposit(self, node_id: str) -> int:
        rec = self.system.registered.get(node_id)
        if rec is None or rec.withdrawn:
            self._rejected("withdraw_deposit", [node_id], NotRegistered(node_id))
        if rec.active or self.height < rec.release_height:
            self._rejected(
                "withdraw_deposit",
                [node_id],
                Locked(f"release at {rec.release_height}" if not rec.active else "node still active"),
                {"deposit": rec.deposit},
            )
        rec.withdrawn = True
        self._credit(node_id, rec.deposit)
        self.log_tx("withdraw_deposit", [node_id], {"deposit": rec.deposit})
        return rec.deposit

    def set_consuls(self, consuls: Iterable[str]) -> None:
        self.system.consuls = tuple(consuls)
        self.log_tx("set_consuls", list(self.system.consuls))

    # NEBULA-SC

    def create_nebula(
        self,
        creator: str,
        nebula_id: str,
        feed_id: str,
        k: int,
        n: int,
        min_score: float,
        price: int,
        oracles: Iterable[str] = (),
    ) -> NebulaContract:
        parties = [creator, nebula_id]
        if nebula_id in self.nebulae:
            self._rejected("create_nebula", parties, BadParams("duplicate nebula id"))
        if not (1 <= k <= n) or not (0 <= min_score <= 100) or price < 0:
            self._rejected("create_nebula", parties, BadParams(f"k={k} n={n} min_score={min_score}"))
        if self.balance(creator) < self.system.fee:
            self._rejected("create_nebula", parties, FeeUnpaid(creator), {"fee": self.system.fee})
        self._debit(creator, self.system.fee)
        self._credit(TREASURY, self.system.fee)
        neb = NebulaContract(nebula_id, feed_id, k, n, min_score, price)
        self.nebulae[nebula_id] = neb
        self.system.feed_registry[nebula_id] = feed_id
        self.log_tx("create_nebula", parties, {"fee": self.system.fee, "k": k, "n": n})
        for node_id in oracles:
            try:
                self.admit_oracle(nebula_id, node_id)
            except ChainError:
                pass
        return neb

    def nebula(self, nebula_id: str) -> NebulaContract:
        try:
            return self.nebulae[nebula_id]
        except KeyError:
            raise UnknownNebula(nebula_id) from None

    def admit_oracle(self, nebula_id: str, node_id: str) -> None:
        neb = self.nebula(nebula_id)
        if node_id in neb.oracle_set:
            return
        if not self.system.is_active(node_id):
            self._rejected("admit", [nebula_id, node_id], NotRegistered(node_id))
        score = self.system.score(node_id)
        if score < neb.min_score:
            self._rejected("admit", [nebula_id, node_id], NotAdmitted(f"score {score:.2f} < {neb.min_score}"))
        if len(neb.oracle_set) >= neb.n:
            self._rejected("admit", [nebula_id, node_id], NotAdmitted("oracle set full"))
        neb.oracle_set.append(node_id)
        self.log_tx("admit", [nebula_id, node_id], {"score": score})

    def refresh_oracle_set(self, nebula_id: str) -> list[str]:
        """Drop oracles that are inactive or below the nebula's score threshold."""
        neb = self.nebula(nebula_id)
        evicted = [
            o for o in neb.oracle_set if not self.system.is_active(o) or self.system.score(o) < neb.min_score
        ]
        for o in evicted:
            neb.oracle_set.remove(o)
            self.log_tx("evict", [nebula_id, o], {"score": self.system.score(o)})
        return evicted

    def oracle_key(self, node_id: str) -> Optional[bytes]:
        rec = self.system.registered.get(node_id)
        return rec.public_key if rec else None

    def pulse_tx(
        self,
        nebula_id: str,
        round: int,
        agg_digest: Digest,
        timestamp: int,
        leader: str,
        signatures: Sequence[Proof],
    ) -> PulseRecord:
        neb = self.nebula(nebula_id)
        parties = [leader, nebula_id]
        amounts = {"round": round, "signatures": len(signatures)}
        if leader != neb.expected_leader(self.height):
            self._rejected("pulse", parties, PulseRejected(PulseReject.WRONG_LEADER), amounts)
        message = signing_payload(agg_digest, timestamp, neb.feed_id, nebula_id, round)
        key_owner = {self.oracle_key(o): o for o in neb.oracle_set}
        signers: set[str] = set()
        for proof in signatures:
            owner = key_owner.get(proof.signer)
            if owner is None or owner in signers:
                continue
            if crypto.verify_proof(proof, message):
                signers.add(owner)
        if len(signers) < neb.k:
            self._rejected("pulse", parties, PulseRejected(PulseReject.INSUFFICIENT_SIGNATURES), amounts)
        if abs(timestamp - self.height) > self.freshness:
            self._rejected("pulse", parties, PulseRejected(PulseReject.STALE_TIMESTAMP), amounts)
        if round in neb.pulse_log:
            self._rejected("pulse", parties, PulseRejected(PulseReject.DUPLICATE_ROUND), amounts)
        record = PulseRecord(agg_digest, self.height, leader, timestamp, tuple(sorted(signers)))
        neb.pulse_log[round] = record
        for s in record.signers:
            neb.activity_log[s] = neb.activity_log.get(s, 0) + 1
        self.log_tx("pulse", parties, {"round": round, "signers": len(signers)})
        return record

    def send_data_tx(self, nebula_id: str, round: int, value, recipients: Iterable[str]) -> DeliveryReport:
        neb = self.nebula(nebula_id)
        if round not in neb.pulse_log:
            self._rejected("send_data", [nebula_id], PulseNotVerified(f"round {round}"))
        record = neb.pulse_log[round]
        matches = value_digest(value) == record.agg_digest
        results: dict[str, Delivery] = {}
        for user in recipients:
            results[user] = self._deliver_one(neb, round, value, user, matches)
            amounts = {"round": round}
            if results[user] is Delivery.DELIVERED:
                amounts["price"] = neb.price
            self.log_tx("send_data", [nebula_id, user], amounts, result=results[user].value)
        return DeliveryReport(nebula_id, round, results)

    def _deliver_one(self, neb: NebulaContract, round: int, value, user: str, matches: bool) -> Delivery:
        if not matches:
            return Delivery.HASH_MISMATCH
        sub = neb.subscriptions.get(user)
        contract = self.users.get(user)
        if sub is None or not sub.active or contract is None:
            return Delivery.NOT_SUBSCRIBED
        if (round, user) in neb.delivered:
            return Delivery.ALREADY_DELIVERED
        if sub.mode == "deposit":
            if sub.balance < neb.price:
                sub.active = False
                return Delivery.PAYMENT_FAILED
            sub.balance -= neb.price
        else:
            if self.balance(user) < neb.price:
                sub.active = False
                return Delivery.PAYMENT_FAILED
            self._debit(user, neb.price)
        neb.undistributed += neb.price
        neb.delivered.add((round, user))
        contract.receive(neb.nebula_id, neb.feed_id, round, value)
        return Delivery.DELIVERED

    # USER-SC

    def deploy_user_contract(self, contract_id: str, trigger: bool = False, callback=None) -> UserContract:
        if contract_id in self.users:
            return self.users[contract_id]
        contract = UserContract(contract_id, trigger=trigger, callback=callback)
        self.users[contract_id] = contract
        self.log_tx("deploy_user", [contract_id], {"trigger": int(trigger)})
        return contract

    def _subscription(self, kind: str, user: str, nebula_id: str) -> Subscription:
        if nebula_id not in self.nebulae:
            self._rejected(kind, [user, nebula_id], UnknownNebula(nebula_id))
        if user not in self.users:
            self._rejected(kind, [user, nebula_id], UnknownContract(user))
        sub = self.nebulae[nebula_id].subscriptions.get(user)
        if sub is None:
            self._rejected(kind, [user, nebula_id], UnknownContract(f"{user} not subscribed"))
        return sub

    def subscribe(self, user: str, nebula_id: str, method: str, mode: str = "deposit") -> Subscription:
        if nebula_id not in self.nebulae:
            self._rejected("subscribe", [user, nebula_id], UnknownNebula(nebula_id))
        if user not in self.users:
            self._rejected("subscribe", [user, nebula_id], UnknownContract(user))
        if mode not in ("deposit", "per-call"):
            self._rejected("subscribe", [user, nebula_id], BadParams(f"mode {mode!r}"))
        neb = self.nebulae[nebula_id]
        sub = neb.subscriptions.get(user)
        if sub is None:
            sub = Subscription(user, method, mode)
            neb.subscriptions[user] = sub
        else:
            sub.method, sub.mode, sub.active = method, mode, True
        self.log_tx("subscribe", [user, nebula_id], {"mode": mode, "method": method})
        return sub

    def deposit(self, user: str, nebula_id: str, amount: int) -> int:
        sub = self._subscription("deposit", user, nebula_id)
        try:
            self._debit(user, amount)
        except InsufficientFunds as err:
            self._rejected("deposit", [user, nebula_id], err, {"amount": amount})
        sub.balance += amount
        self.log_tx("deposit", [user, nebula_id], {"amount": amount})
        return sub.balance

    def reactivate(self, user: str, nebula_id: str) -> Subscription:
        sub = self._subscription("reactivate", user, nebula_id)
        sub.active = True
        self.log_tx("reactivate", [user, nebula_id])
        return sub

    def active_subscribers(self, nebula_id: str) -> list[str]:
        neb = self.nebula(nebula_id)
        return sorted(u for u, s in neb.subscriptions.items() if s.active)

    def dump_txs(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.tx_log)


def write_scores(chains: Sequence[TargetChain], consul: str, scores: dict[str, float]) -> None:
    """Replace the score register on every chain, or on none of them."""
    for chain in chains:
        if consul not in chain.system.consuls:
            chain.log_tx("write_scores", [consul], result=NotConsul.reason)
            raise NotConsul(consul)
    snapshot = dict(sorted(scores.items()))
    for chain in chains:
        chain.system.score_register = dict(snapshot)
        chain.log_tx("write_scores", [consul], {"entries": len(snapshot)})
