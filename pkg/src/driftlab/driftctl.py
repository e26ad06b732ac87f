"""EMA tracking and the periodic reset schedule.

Elastic Reset keeps an EMA ``theta_bar`` of the online weights. Every
``reset_period`` updates the online policy is set to ``theta_bar`` and
``theta_bar`` is set back to the initial weights ``theta_init``. The two
baselines either jump straight back to ``theta_init`` or load the EMA without
ever restarting it.

Only policy-scope coordinates are ever written into the online model; the
value head keeps whatever it has learned.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .optim import Adam
from .seqpolicy import LayoutError, ParamVector, SeqPolicy


class ResetKind(str, enum.Enum):
    ELASTIC = "elastic_reset"
    TO_INIT = "reset_to_init"
    TO_EMA = "reset_to_ema"
    NONE = "none"


@dataclass
class EmaTracker:
    theta_init: ParamVector
    eta: float
    reset_period: int
    theta_bar: ParamVector = field(default=None)  # type: ignore[assignment]
    steps_since_reset: int = 0
    resets_done: int = 0
    events: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if self.reset_period < 1:
            raise ValueError(f"reset_period must be positive, got {self.reset_period}")
        self.theta_init = self.theta_init.copy()
        if self.theta_bar is None:
            self.theta_bar = self.theta_init.copy()
        elif self.theta_bar.layout != self.theta_init.layout:
            raise LayoutError("theta_bar and theta_init layouts differ")


def _check_layout(tracker: EmaTracker, layout: str) -> None:
    if layout != tracker.theta_bar.layout:
        raise LayoutError(f"layout {layout!r} does not match tracker layout {tracker.theta_bar.layout!r}")


def ema_update(tracker: EmaTracker, theta_online: ParamVector) -> EmaTracker:
    _check_layout(tracker, theta_online.layout)
    bar = tracker.theta_bar.values
    bar *= tracker.eta
    bar += (1.0 - tracker.eta) * theta_online.values
    tracker.steps_since_reset += 1
    return tracker


def maybe_reset(tracker: EmaTracker, policy: SeqPolicy, kind: ResetKind | str, step: int | None = None) -> bool:
    """Apply the scheduled reset if one is due. Returns whether it fired."""
    kind = ResetKind(kind)
    _check_layout(tracker, policy.layout)
    if kind is ResetKind.NONE or tracker.steps_since_reset != tracker.reset_period:
        return False
    scope = policy.policy_mask
    if kind is ResetKind.ELASTIC:
        policy.flat[scope] = tracker.theta_bar.values[scope]
        tracker.theta_bar.values[...] = tracker.theta_init.values
    elif kind is ResetKind.TO_INIT:
        policy.flat[scope] = tracker.theta_init.values[scope]
    else:
        policy.flat[scope] = tracker.theta_bar.values[scope]
    tracker.steps_since_reset = 0
    tracker.resets_done += 1
    tracker.events.append({"step": int(step if step is not None else -1), "event": kind.value})
    return True


def reset_optimizer_state(optimizer: Adam, mask: np.ndarray | None = None, enabled: bool = True) -> Adam:
    """Clear Adam moments (and bias-correction counters) inside ``mask``."""
    if enabled:
        optimizer.reset_state(mask)
    return optimizer


def write_events(tracker: EmaTracker, path) -> None:
    with open(path, "w") as fh:
        for ev in tracker.events:
            fh.write(json.dumps(ev) + "\n")
