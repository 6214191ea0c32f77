"""Key usage policies and delegation sections.

A key's policy names its owner and bounds which operations may run, until
when (exclusive, in trusted ticks) and how many more times. Each delegation
section grants one other user a subset of that, never more: a section's
constraints must always sit inside the parent's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import NotOwner, PolicyInvalid, PolicyViolation

SIGN = "sign"
DECRYPT = "decrypt"
OPERATIONS = frozenset({SIGN, DECRYPT})


@dataclass
class DelegationSection:
    delegatee_uid: str
    permitted_ops: frozenset[str]
    expiry: int | None = None
    remaining_uses: int | None = None


@dataclass
class KeyUsagePolicy:
    owner_uid: str
    permitted_ops: frozenset[str]
    expiry: int | None = None
    remaining_uses: int | None = None
    delegations: list[DelegationSection] = field(default_factory=list)

    def section_for(self, uid: str) -> DelegationSection | None:
        for section in self.delegations:
            if section.delegatee_uid == uid:
                return section
        return None


def parse_ops(names) -> frozenset[str]:
    ops = frozenset(names)
    unknown = ops - OPERATIONS
    if unknown:
        raise PolicyInvalid(f"unknown operations: {', '.join(sorted(unknown))}")
    if not ops:
        raise PolicyInvalid("a policy must permit at least one operation")
    return ops


def validate_constraints(expiry: int | None, remaining_uses: int | None, now: int) -> None:
    if expiry is not None and expiry <= now:
        raise PolicyInvalid("expiry is not in the future")
    if remaining_uses is not None and remaining_uses < 0:
        raise PolicyInvalid("remaining uses cannot be negative")


def within(section: DelegationSection, policy: KeyUsagePolicy) -> bool:
    if not section.permitted_ops <= policy.permitted_ops:
        return False
    if policy.expiry is not None and (section.expiry is None or section.expiry > policy.expiry):
        return False
    if policy.remaining_uses is not None and (
        section.remaining_uses is None or section.remaining_uses > policy.remaining_uses
    ):
        return False
    return True


def inherit(section: DelegationSection, policy: KeyUsagePolicy) -> DelegationSection:
    """Fill constraints the delegator left open with the parent's."""
    return DelegationSection(
        section.delegatee_uid,
        section.permitted_ops,
        policy.expiry if section.expiry is None else section.expiry,
        policy.remaining_uses if section.remaining_uses is None else section.remaining_uses,
    )


def revalidate(policy: KeyUsagePolicy) -> list[str]:
    """Drop sections that no longer fit the parent; returns the dropped delegatees."""
    dropped = [s.delegatee_uid for s in policy.delegations if not within(s, policy)]
    if dropped:
        policy.delegations = [s for s in policy.delegations if within(s, policy)]
    return dropped


def _usable(ops: frozenset[str], expiry: int | None, remaining: int | None, op: str, now: int, who: str) -> None:
    if op not in ops:
        raise PolicyViolation(f"{who} does not permit {op}")
    if expiry is not None and now >= expiry:
        raise PolicyViolation(f"{who} has expired")
    if remaining is not None and remaining <= 0:
        raise PolicyViolation(f"{who} has no remaining uses")


def authorize(policy: KeyUsagePolicy, uid: str, op: str, now: int) -> DelegationSection | None:
    """Check a use; returns the delegation section it runs under, if any."""
    if uid == policy.owner_uid:
        _usable(policy.permitted_ops, policy.expiry, policy.remaining_uses, op, now, "key policy")
        return None
    section = policy.section_for(uid)
    if section is None:
        raise PolicyViolation("key is not delegated to this user")
    _usable(section.permitted_ops, section.expiry, section.remaining_uses, op, now, "delegation")
    _usable(policy.permitted_ops, policy.expiry, policy.remaining_uses, op, now, "key policy")
    return section


def consume(policy: KeyUsagePolicy, section: DelegationSection | None) -> None:
    """Count one use against the key and, for a delegatee, its section."""
    if policy.remaining_uses is not None:
        policy.remaining_uses -= 1
    if section is not None and section.remaining_uses is not None:
        section.remaining_uses -= 1
    if policy.remaining_uses is not None:
        for s in policy.delegations:
            if s.remaining_uses is not None and s.remaining_uses > policy.remaining_uses:
                s.remaining_uses = policy.remaining_uses


def require_owner(policy: KeyUsagePolicy, uid: str) -> None:
    if uid != policy.owner_uid:
        raise NotOwner("only the key owner may do this")
