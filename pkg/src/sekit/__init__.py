"""sekit: speech enhancement with learned per-region attention routing."""

__version__ = "0.1.0"
