"""In-memory per-user subscription and policy storage for one matcher."""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Any, Callable, Mapping

from .matching import Subscription, SubscriptionPolicy, compile_constraints


class Outcome(enum.Enum):
    CREATED = "created"
    REPLACED = "replaced"


class CapacityExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class Snapshot:
    """Immutable view of the store at one generation.

    A worker matches a whole publication against a single snapshot, so a
    concurrent register/remove is either fully visible or not at all.
    """
    generation: int
    entries: tuple[tuple[str, str, Callable[[Mapping[str, Any]], bool]], ...]
    policies: tuple[SubscriptionPolicy, ...]

    def match_all(self, attrs: Mapping[str, Any]) -> list[tuple[str, str]]:
        return [(auth, sid) for auth, sid, pred in self.entries if pred(attrs)]


class SubscriptionStore:
    def __init__(self, max_subscriptions: int | None = None):
        self.max_subscriptions = max_subscriptions
        self._by_user: dict[str, dict[str, Subscription]] = {}
        self._compiled: dict[tuple[str, str], Callable] = {}
        self._policies: dict[str, SubscriptionPolicy] = {}
        self._count = 0
        self._generation = 0
        self._lock = threading.Lock()
        self._snapshot: Snapshot | None = None

    @property
    def generation(self) -> int:
        return self._generation

    @property
    def total_count(self) -> int:
        return self._count

    @property
    def policy_count(self) -> int:
        return len(self._policies)

    def _bump(self) -> None:
        self._generation += 1
        self._snapshot = None

    def register(self, sub: Subscription) -> Outcome:
        pred = compile_constraints(sub.constraints)
        with self._lock:
            subs = self._by_user.setdefault(sub.auth_hash, {})
            replaced = sub.sub_id in subs
            if not replaced and self.max_subscriptions is not None \
                    and self._count >= self.max_subscriptions:
                if not subs:
                    del self._by_user[sub.auth_hash]
                raise CapacityExceeded(f"limit of {self.max_subscriptions} subscriptions reached")
            subs[sub.sub_id] = sub
            self._compiled[(sub.auth_hash, sub.sub_id)] = pred
            if not replaced:
                self._count += 1
            self._bump()
        return Outcome.REPLACED if replaced else Outcome.CREATED

    def remove(self, auth_hash: str, sub_id: str) -> bool:
        with self._lock:
            subs = self._by_user.get(auth_hash)
            if not subs or sub_id not in subs:
                return False
            del subs[sub_id]
            if not subs:
                del self._by_user[auth_hash]
            del self._compiled[(auth_hash, sub_id)]
            self._count -= 1
            self._bump()
            return True

    def get(self, auth_hash: str, sub_id: str) -> Subscription | None:
        return self._by_user.get(auth_hash, {}).get(sub_id)

    def owners_of(self, sub_id: str) -> set[str]:
        with self._lock:
            return {auth for auth, subs in self._by_user.items() if sub_id in subs}

    def subscriptions(self) -> list[Subscription]:
        with self._lock:
            return [s for subs in self._by_user.values() for s in subs.values()]

    def install_policy(self, pol: SubscriptionPolicy) -> Outcome:
        with self._lock:
            existing = self._policies.get(pol.policy_id)
            if existing is not None and existing.owner != pol.owner:
                raise PermissionError("policy id owned by another publisher")
            self._policies[pol.policy_id] = pol
            self._bump()
        return Outcome.CREATED if existing is None else Outcome.REPLACED

    def remove_policy(self, owner: str, policy_id: str) -> bool:
        with self._lock:
            pol = self._policies.get(policy_id)
            if pol is None or pol.owner != owner:
                return False
            del self._policies[policy_id]
            self._bump()
            return True

    def policies(self) -> list[SubscriptionPolicy]:
        with self._lock:
            return list(self._policies.values())

    def snapshot(self) -> Snapshot:
        snap = self._snapshot
        if snap is not None:
            return snap
        with self._lock:
            if self._snapshot is None:
                entries = tuple(
                    (auth, sid, self._compiled[(auth, sid)])
                    for auth, subs in self._by_user.items()
                    for sid in subs
                )
                self._snapshot = Snapshot(self._generation, entries,
                                          tuple(self._policies.values()))
            return self._snapshot

    def match_all(self, attrs: Mapping[str, Any]) -> list[tuple[str, str]]:
        """Content-matching stage only; permission filtering is separate."""
        return self.snapshot().match_all(attrs)
