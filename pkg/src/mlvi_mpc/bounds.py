"""Online infinite-horizon performance-bound bookkeeping.

The ledger tracks the telescoping decay certificate

    V_N(x(0), 0) - v_next(t) = sum_{k<=t} sum_{p<=k} s_p l(k - p),
    s_k = a_k - a_{k+1} + b_k,

where ``{a_k}`` is a user-designed convergent sequence and the corrections
``b_t`` are solved for in closed form as data arrives. The running estimate
``a_0 - a_inf + sum b_t`` lower-bounds the suboptimality index once the
trajectory has converged and every realised ``s_k`` is positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from mlvi_mpc.errors import ContractViolation, DegenerateStartError, UndefinedRateError

UTILITY_THRESHOLD = 1e-10


@dataclass(frozen=True)
class DecaySequence:
    """Convergent design sequence ``{a_k}``.

    ``remark6``: ``a_k = abar / k`` for ``k >= 1`` so that the increments
    ``a_k - a_{k+1} = abar / (k (k + 1))`` sum to ``abar``; the head increment
    ``a_0 - a_1`` is the initial decay-rate estimate, supplied via ``head``.

    ``custom``: explicit ``a_0 .. a_K``, held constant after ``K``.
    """

    kind: str = "remark6"
    abar: float = 0.3
    values: tuple = ()
    head: float = 0.0

    def __post_init__(self):
        if self.kind == "remark6":
            if not (0.0 <= self.abar < 1.0):
                raise ContractViolation("abar must lie in [0, 1)")
        elif self.kind == "custom":
            if len(self.values) < 1 or not all(math.isfinite(v) for v in self.values):
                raise ContractViolation("custom sequence needs at least one finite value")
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        else:
            raise ContractViolation(f"unknown sequence kind {self.kind!r}")

    @classmethod
    def remark6(cls, abar: float = 0.3) -> "DecaySequence":
        return cls("remark6", abar=float(abar))

    @classmethod
    def custom(cls, values: Sequence[float]) -> "DecaySequence":
        return cls("custom", abar=0.0, values=tuple(values))

    def with_head(self, alpha0: float) -> "DecaySequence":
        """Fix ``a_0 - a_1`` for the remark6 family (no-op for custom sequences)."""
        if self.kind != "remark6":
            return self
        return DecaySequence("remark6", abar=self.abar, head=float(alpha0))

    def value(self, k: int) -> float:
        if k < 0:
            raise ContractViolation("index must be nonnegative")
        if self.kind == "custom":
            return self.values[min(k, len(self.values) - 1)]
        if k == 0:
            return self.head + self.abar
        return self.abar / k

    @property
    def a0(self) -> float:
        return self.value(0)

    @property
    def a_infinity(self) -> float:
        return self.values[-1] if self.kind == "custom" else 0.0

    def gap(self, k: int) -> float:
        """``a_k - a_{k+1}``."""
        if self.kind == "remark6":
            return self.head if k == 0 else self.abar / (k * (k + 1))
        return self.value(k) - self.value(k + 1)


def sequence_tail(seq: DecaySequence, K: int) -> float:
    """``sum_{k=1}^{K} (a_k - a_{k+1})``; equals ``abar (1 - 1/(K+1))`` for remark6."""
    if K < 1:
        raise ContractViolation("K must be >= 1")
    if seq.kind == "remark6":
        return seq.abar * (1.0 - 1.0 / (K + 1))
    return seq.value(1) - seq.value(K + 1)


def alpha_hat(v_now: float, v_upper_next: float, utility: float, threshold: float = UTILITY_THRESHOLD) -> float:
    """Relaxed decay-rate estimate ``(V_N(x(t),t) - Vbar_N(x(t+1),t)) / l(t)``. Not clamped."""
    if not utility > threshold:
        raise UndefinedRateError(f"utility {utility!r} is below the threshold {threshold}")
    return (v_now - v_upper_next) / utility


@dataclass
class BoundLedger:
    """History of one closed-loop run's bound quantities.

    Step ``t`` is opened with :meth:`record` (utility, FH cost, upper bound) and
    closed with :meth:`close` once ``v_next`` is known. ``frozen[t]`` marks
    steps whose utility was below threshold: they contribute ``s_t = a_t - a_{t+1}``
    with ``b_t = 0``.
    """

    decay_seq: DecaySequence
    utilities: list = field(default_factory=list)
    alpha_hat: list = field(default_factory=list)
    corrections: list = field(default_factory=list)
    fh_costs: list = field(default_factory=list)
    upper_bounds: list = field(default_factory=list)
    v_next: list = field(default_factory=list)
    frozen: list = field(default_factory=list)
    v0: Optional[float] = None
    threshold: float = UTILITY_THRESHOLD
    _s: list = field(default_factory=list, repr=False)
    _conv: list = field(default_factory=list, repr=False)
    _cum: float = field(default=0.0, repr=False)

    # -- recording -----------------------------------------------------------

    def record(self, utility: float, v_now: float, v_upper_next: float) -> Optional[float]:
        """Open step ``t``; returns ``alpha_hat(t)`` or ``None`` when the utility is below threshold."""
        if utility < 0:
            raise ContractViolation("utilities must be nonnegative")
        if len(self.utilities) != len(self.corrections):
            raise ContractViolation("previous step has not been closed")
        t = len(self.utilities)
        try:
            ah = alpha_hat(v_now, v_upper_next, utility, self.threshold)
        except UndefinedRateError:
            ah = None
        if t == 0:
            self.v0 = float(v_now)
            if ah is not None:
                self.decay_seq = self.decay_seq.with_head(ah)
        self.utilities.append(float(utility))
        self.fh_costs.append(float(v_now))
        self.upper_bounds.append(float(v_upper_next))
        self.alpha_hat.append(ah)
        self.frozen.append(ah is None)
        return ah

    def close(self, v_next: float) -> float:
        """Close the open step with the chosen ``v_next`` and store ``b_t``."""
        t = len(self.corrections)
        if t >= len(self.utilities):
            raise ContractViolation("no open step to close")
        if self.frozen[t]:
            b = 0.0
        else:
            b = correction(self, t, v_next)
        s_t = self.decay_seq.gap(t) + b
        conv_t = self._partial(t) + s_t * self.utilities[0]
        self.corrections.append(b)
        self.v_next.append(float(v_next))
        self._s.append(s_t)
        self._conv.append(conv_t)
        self._cum += conv_t
        return b

    def _partial(self, t: int) -> float:
        """``sum_{p<t} s_p l(t - p)``."""
        return sum(self._s[p] * self.utilities[t - p] for p in range(t))

    # -- derived quantities --------------------------------------------------

    @property
    def steps(self) -> int:
        return len(self.corrections)

    @property
    def s(self) -> list:
        return list(self._s)

    @property
    def alpha0(self) -> Optional[float]:
        return self.alpha_hat[0] if self.alpha_hat else None

    @property
    def sum_b(self) -> float:
        return math.fsum(self.corrections)

    @property
    def estimate(self) -> Optional[float]:
        return running_estimate(self)

    @property
    def certificate_valid(self) -> bool:
        """True iff every realised ``s_k`` is positive."""
        return bool(self._s) and all(s > 0 for s in self._s)

    def convolution(self, t: int) -> float:
        """Incrementally tracked ``sum_{p<=t} s_p l(t - p)``."""
        return self._conv[t]

    def cumulative(self) -> float:
        """Incrementally tracked ``sum_{k<=T} sum_{p<=k} s_p l(k - p)`` for the closed steps."""
        return self._cum

    def cumulative_residuals(self) -> list:
        """``V0 - v_next(t) - sum_{k<=t} conv_k`` per closed step (zero wherever ``b_t`` was solved)."""
        out, acc = [], 0.0
        for t in range(self.steps):
            acc += self._conv[t]
            out.append(self.v0 - self.v_next[t] - acc)
        return out

    def decay_residuals(self) -> list:
        """Per-step certificate slack ``V_N(x(t),t) - v_next(t) - sum_{k<=t} s_k l(t-k)``."""
        return [self.fh_costs[t] - self.v_next[t] - self._conv[t] for t in range(self.steps)]

    def to_dict(self) -> dict:
        seq = self.decay_seq
        return {
            "decay_seq": {"kind": seq.kind, "abar": seq.abar, "values": list(seq.values), "head": seq.head},
            "utilities": list(self.utilities),
            "alpha_hat": list(self.alpha_hat),
            "corrections": list(self.corrections),
            "fh_costs": list(self.fh_costs),
            "upper_bounds": list(self.upper_bounds),
            "v_next": list(self.v_next),
            "frozen": list(self.frozen),
            "v0": self.v0,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BoundLedger":
        """Rebuild a ledger by replaying the recorded steps."""
        sd = data["decay_seq"]
        seq = DecaySequence(sd["kind"], abar=sd["abar"], values=tuple(sd["values"]), head=0.0)
        led = cls(seq, threshold=data.get("threshold", UTILITY_THRESHOLD))
        for t, (l, v, ub) in enumerate(zip(data["utilities"], data["fh_costs"], data["upper_bounds"])):
            led.record(l, v, ub)
            if t < len(data["v_next"]):
                led.close(data["v_next"][t])
        return led


def correction(ledger: BoundLedger, t: int, v_next: float) -> float:
    """Largest ``b_t`` satisfying the cumulative decay identity at step ``t``.

    Solves
        sum_{k<t} sum_{p<=k} s_p l(k-p) + sum_{p<t} s_p l(t-p) + (a_t - a_{t+1} + b_t) l(0)
            = V_N(x(0), 0) - v_next
    for ``b_t``. ``ledger`` must hold ``s_0 .. s_{t-1}`` and ``l(0) .. l(t)``.
    """
    if ledger.v0 is None or len(ledger.utilities) <= t or ledger.steps != t:
        raise ContractViolation(f"ledger is not positioned at step {t}")
    l0 = ledger.utilities[0]
    if not l0 > 0.0:
        raise DegenerateStartError("l(0) = 0: trajectory starts at the origin")
    known = ledger.cumulative() + ledger._partial(t)
    return (ledger.v0 - v_next - known) / l0 - ledger.decay_seq.gap(t)


def running_estimate(ledger: BoundLedger) -> Optional[float]:
    """``a_0 - a_inf + sum_t b_t``; for remark6 this is ``alpha_hat(0) + abar + sum_t b_t``."""
    if ledger.alpha0 is None and ledger.decay_seq.kind == "remark6":
        return None
    seq = ledger.decay_seq
    return seq.a0 - seq.a_infinity + ledger.sum_b


def double_convolution(s: Sequence[float], utilities: Sequence[float], T: int) -> float:
    """From-scratch ``sum_{t=0}^{T} sum_{k=0}^{t} s_k l(t-k)``."""
    return math.fsum(s[k] * utilities[t - k] for t in range(T + 1) for k in range(t + 1))
