from .core import Enclave, InjectedCrash, State
from .database import AuditEntry, KeyDatabase, KeyRecord, UserRecord
from .passwords import PasswordHasher
from .policy import DelegationSection, KeyUsagePolicy

__all__ = [
    "AuditEntry",
    "DelegationSection",
    "Enclave",
    "InjectedCrash",
    "KeyDatabase",
    "KeyRecord",
    "KeyUsagePolicy",
    "PasswordHasher",
    "State",
    "UserRecord",
]
