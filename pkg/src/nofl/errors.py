class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class HeapCorruption(RuntimeError):
    """Fatal inconsistency found while tracing or decoding the heap."""


class HeapExhausted(MemoryError):
    """An allocation could not be satisfied even after a collection."""


class BenchTimeout(RuntimeError):
    pass
