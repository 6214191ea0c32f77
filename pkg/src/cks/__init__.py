"""Cloud Key Store: password-protected personal keys held inside a (simulated) TEE."""

__version__ = "0.1.0"
