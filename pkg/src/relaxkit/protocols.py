"""Stock acquisition protocols used throughout the experiments.

The inversion-time tables mirror the clinical acquisitions the estimators are
benchmarked against (23/25/31 inversion times around 139-958 ms); the echo-time
ladder is the standard six-echo spin-echo decay protocol.
"""

from __future__ import annotations

import numpy as np

from .containers import AcquisitionProtocol, SequenceKind

ECHO_TIMES_6 = (10.0, 20.0, 40.0, 80.0, 160.0, 320.0)

INVERSION_TIMES_23 = (
    172.0, 204.0, 237.0, 270.0, 303.0, 335.0, 368.0, 401.0, 434.0, 467.0, 499.0,
    532.0, 565.0, 598.0, 630.0, 663.0, 696.0, 729.0, 761.0, 794.0, 827.0, 860.0,
    893.0,
)

INVERSION_TIMES_25 = (
    172.0, 204.0, 237.0, 270.0, 303.0, 335.0, 368.0, 401.0, 434.0, 467.0, 499.0,
    532.0, 565.0, 598.0, 630.0, 663.0, 696.0, 729.0, 761.0, 794.0, 827.0, 860.0,
    893.0, 925.0, 958.0,
)

INVERSION_TIMES_31 = (
    139.0, 166.0, 193.0, 219.0, 246.0, 272.0, 299.0, 325.0, 352.0, 379.0, 405.0,
    432.0, 458.0, 485.0, 511.0, 538.0, 565.0, 591.0, 618.0, 644.0, 671.0, 697.0,
    724.0, 751.0, 777.0, 804.0, 838.0, 857.0, 883.0, 915.0, 937.0,
)

_NAMED_TAU = {
    "t1_23": (SequenceKind.INVERSION_RECOVERY, INVERSION_TIMES_23),
    "t1_25": (SequenceKind.INVERSION_RECOVERY, INVERSION_TIMES_25),
    "t1_31": (SequenceKind.INVERSION_RECOVERY, INVERSION_TIMES_31),
    "t2_6": (SequenceKind.SPIN_ECHO_DECAY, ECHO_TIMES_6),
}


def named_protocol(name: str, sigma: float | None = None) -> AcquisitionProtocol:
    """Look up a stock protocol: 't1_23', 't1_25', 't1_31' or 't2_6'."""
    try:
        kind, tau = _NAMED_TAU[name]
    except KeyError:
        raise KeyError(
            f"unknown protocol {name!r}; choose from {sorted(_NAMED_TAU)}"
        ) from None
    return AcquisitionProtocol(kind, np.asarray(tau), sigma)


def default_protocol(kind: SequenceKind, sigma: float | None = None) -> AcquisitionProtocol:
    """Default protocol per task: 31 inversion times for T1, 6 echoes for T2."""
    if kind is SequenceKind.INVERSION_RECOVERY:
        return named_protocol("t1_31", sigma)
    return named_protocol("t2_6", sigma)
