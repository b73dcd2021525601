from enum import Enum


class Verdict(Enum):
    PASS = "pass"
    FAIL = "fail"
    NOT_APPLICABLE = "n/a"
    INCONCLUSIVE = "inconclusive"

    @classmethod
    def of(cls, ok):
        return cls.PASS if ok else cls.FAIL


class Boundedness(Enum):
    BOUNDED = "bounded"
    DIVERGED = "diverged"


class BlowupClass(Enum):
    REGULAR = "regular"
    UNRESOLVED = "unresolved"
