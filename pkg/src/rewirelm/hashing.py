"""FNV-1a 64-bit content hashing for corpora and checkpoints."""

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """Hash a byte string with 64-bit FNV-1a."""
    h = FNV_OFFSET
    prime = FNV_PRIME
    mask = _MASK64
    for b in data:
        h = ((h ^ b) * prime) & mask
    return h


def fnv1a_hex(data: bytes) -> str:
    """FNV-1a 64 as a 16-char lowercase hex string."""
    return f"{fnv1a_64(data):016x}"
