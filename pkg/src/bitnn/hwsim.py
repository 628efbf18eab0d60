"""Cycle-accurate simulation of the five-stage FSM accelerator.

The controller runs IDLE -> LAYER1 -> LAYER2 -> LAYER3 -> ARGMAX -> DONE.
Each layer processes its neurons in groups of P lanes (the parallelism
level). A group spends one cycle per input bit doing XNOR-accumulate (one
bit per lane per cycle, bit-serial) followed by g_group cycles of
threshold-compare/writeback. The classification stage scans the ten output
sums one per cycle, replacing the running maximum only on strictly greater,
so ties resolve toward the lowest class index. Weights held in block RAM
cost one extra read-latency cycle at start; distributed LUT ROMs read
combinationally and do not.

Reported latency is total_cycles * clock_period_ns + t0_ns, where the
overhead constants (g_group, c_fixed, t0_ns) come from calibrate(), which
fits them against the reference latency measurements shipped in
REFERENCE_ROWS. The fitted defaults reproduce 12 of the 13 reference rows
exactly; the P=128 row lands within 1.2 % (see CalibrationResult.residuals).

Two execution paths share the same scheduling and functional math:

  FsmWalker   a genuine one-cycle-per-step state machine
  simulate()  a group-event walk that advances cycle counters in bulk

The test suite drives the walker cycle-by-cycle and checks both paths and
the algebraic cycle count against each other; simulate() never shortcuts
through the closed form.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .bitcore import BitVector, DimensionError, matvec_popcount_rows, pack_bits
from .engine import InferenceResult, infer
from .folding import FoldedModel

SUPPORTED_PARALLELISM = (1, 4, 8, 16, 32, 64, 128)
MEMORY_STYLES = ("bram", "lut")

DEFAULT_CLOCK_NS = 10.0
# calibrate() output against REFERENCE_ROWS (see CalibrationResult)
DEFAULT_G_GROUP = 2
DEFAULT_C_FIXED = 15
DEFAULT_T0_NS = 5.0


class FsmState(Enum):
    IDLE = "idle"
    LAYER1 = "layer1"
    LAYER2 = "layer2"
    LAYER3 = "layer3"
    ARGMAX = "argmax"
    DONE = "done"


LAYER_STATES = (FsmState.LAYER1, FsmState.LAYER2, FsmState.LAYER3)
STATE_ORDER = (FsmState.IDLE,) + LAYER_STATES + (FsmState.ARGMAX, FsmState.DONE)


@dataclass(frozen=True)
class HwConfig:
    """Accelerator configuration plus calibrated overhead constants."""

    parallelism: int = 64
    memory_style: str = "bram"
    clock_period_ns: float = DEFAULT_CLOCK_NS
    g_group: int = DEFAULT_G_GROUP  # cycles per neuron group for compare/writeback
    c_fixed: int = DEFAULT_C_FIXED  # start + argmax scan + completion cycles
    t0_ns: float = DEFAULT_T0_NS  # sub-cycle measurement offset

    def __post_init__(self):
        if self.parallelism not in SUPPORTED_PARALLELISM:
            raise ValueError(
                f"unsupported parallelism {self.parallelism}; "
                f"choose from {SUPPORTED_PARALLELISM}"
            )
        if self.memory_style not in MEMORY_STYLES:
            raise ValueError(
                f"unknown memory style {self.memory_style!r}; choose from {MEMORY_STYLES}"
            )
        if self.clock_period_ns <= 0:
            raise ValueError("clock_period_ns must be positive")
        if self.g_group < 0 or self.c_fixed < 0 or self.t0_ns < 0:
            raise ValueError("overhead constants must be >= 0")


@dataclass(frozen=True)
class CycleReport:
    cycles_per_stage: dict
    total_cycles: int
    latency_ns: float
    speedup_vs_p1: float
    functional_result: InferenceResult

    def __post_init__(self):
        assert self.total_cycles == sum(self.cycles_per_stage.values())


@dataclass(frozen=True)
class ReferenceRow:
    parallelism: int
    memory_style: str
    latency_ns: float
    speedup: float


# Post-implementation latency/speedup measurements of the reference FPGA
# design across parallelism levels and both weight-memory styles. The BRAM
# build does not synthesize at P=128, hence 13 rows.
REFERENCE_ROWS = (
    ReferenceRow(1, "bram", 1_096_045, 1.00),
    ReferenceRow(1, "lut", 1_096_035, 1.00),
    ReferenceRow(4, "bram", 274_465, 4.00),
    ReferenceRow(4, "lut", 274_455, 4.00),
    ReferenceRow(8, "bram", 137_645, 7.96),
    ReferenceRow(8, "lut", 137_635, 7.96),
    ReferenceRow(16, "bram", 68_905, 15.90),
    ReferenceRow(16, "lut", 68_895, 15.90),
    ReferenceRow(32, "bram", 34_865, 31.43),
    ReferenceRow(32, "lut", 34_855, 31.45),
    ReferenceRow(64, "bram", 17_845, 61.42),
    ReferenceRow(64, "lut", 17_835, 61.45),
    ReferenceRow(128, "lut", 9_865, 111.10),
)


def _layer_dims(model: FoldedModel):
    return [(l.in_features, l.out_features) for l in model.layers]


def _check_model(model: FoldedModel, cfg: HwConfig):
    n_layers = len(model.layers)
    if n_layers != len(LAYER_STATES):
        raise ValueError(
            f"the FSM is hardwired for {len(LAYER_STATES)} layers, model has {n_layers}"
        )
    n_classes = model.layers[-1].out_features
    floor = 1 + n_classes
    if cfg.c_fixed < floor:
        raise ValueError(
            f"c_fixed={cfg.c_fixed} cannot cover the start cycle plus the "
            f"{n_classes}-cycle argmax scan (need >= {floor})"
        )


def _groups(n_neurons: int, p: int):
    return [(s, min(s + p, n_neurons)) for s in range(0, n_neurons, p)]


def schedule_cycles(dims, n_classes: int, cfg: HwConfig) -> dict:
    """Per-stage cycle counts from the group schedule (no functional math).

    Walks the same group structure the simulator executes; used for the
    P=1 speedup baseline, not as a substitute for simulation.
    """
    stages = {FsmState.IDLE: 1 + (1 if cfg.memory_style == "bram" else 0)}
    for state, (n_in, n_out) in zip(LAYER_STATES, dims):
        cycles = 0
        for _ in _groups(n_out, cfg.parallelism):
            cycles += n_in + cfg.g_group
        stages[state] = cycles
    stages[FsmState.ARGMAX] = n_classes
    stages[FsmState.DONE] = cfg.c_fixed - 1 - n_classes
    return stages


def closed_form_cycles(dims, n_classes: int, cfg: HwConfig) -> int:
    """Algebraic total: sum_l ceil(N_l/P)*(I_l + g) + c_fixed (+1 for BRAM).

    Check-only shortcut for tests; the simulator never calls it.
    """
    total = cfg.c_fixed + (1 if cfg.memory_style == "bram" else 0)
    for n_in, n_out in dims:
        total += math.ceil(n_out / cfg.parallelism) * (n_in + cfg.g_group)
    return total


def latency_ns(total_cycles: int, cfg: HwConfig) -> float:
    return total_cycles * cfg.clock_period_ns + cfg.t0_ns


class FsmWalker:
    """One-cycle-per-step model of the accelerator's control FSM.

    step() advances exactly one clock cycle and returns True while the run
    is still in progress. After completion the state is DONE and absorbing:
    further steps change nothing until reset(). Transitions only ever move
    forward through IDLE, LAYER1..3, ARGMAX, DONE.
    """

    def __init__(self, model: FoldedModel, x: BitVector, cfg: HwConfig):
        _check_model(model, cfg)
        if x.length != model.layers[0].in_features:
            raise DimensionError(model.layers[0].in_features, x.length)
        self.model = model
        self.cfg = cfg
        self.input = x
        self._w_bits = [l.weights.to_bit_array() for l in model.layers]
        self.reset()

    def reset(self):
        self.state = FsmState.IDLE
        self.cycle = 0
        self.cycles_per_stage = {s: 0 for s in STATE_ORDER}
        self.activations = self.input.to_bits()
        self.layer_trace = []
        self.logits = None
        self.best_index = None
        self._best_value = None
        self._stage_budget = 1 + (1 if self.cfg.memory_style == "bram" else 0)
        self._stage_spent = 0
        self._layer_idx = -1
        self._group_iter = None
        self._group = None
        self._bit_idx = 0
        self._writeback_left = 0
        self._accum = None
        self._next_bits = None
        self._sums = None
        self._argmax_idx = 0
        self.finished = False

    # -- stage helpers -------------------------------------------------

    def _enter_layer(self, layer_idx: int):
        self._layer_idx = layer_idx
        self.state = LAYER_STATES[layer_idx]
        layer = self.model.layers[layer_idx]
        self._group_iter = iter(_groups(layer.out_features, self.cfg.parallelism))
        self._next_bits = []
        self._sums = []
        self._start_group()

    def _start_group(self):
        self._group = next(self._group_iter)
        self._bit_idx = 0
        self._writeback_left = self.cfg.g_group
        lo, hi = self._group
        self._accum = np.zeros(hi - lo, dtype=np.int64)

    def _finish_group(self):
        layer = self.model.layers[self._layer_idx]
        lo, hi = self._group
        n_in = layer.in_features
        z = 2 * self._accum - n_in
        if layer.thresholds is not None:
            bits = (z >= layer.thresholds[lo:hi]).astype(np.uint8)
            self._next_bits.extend(bits.tolist())
        else:
            self._sums.extend(z.tolist())

    def _advance_after_group(self):
        try:
            self._start_group()
        except StopIteration:
            layer = self.model.layers[self._layer_idx]
            if layer.thresholds is not None:
                self.activations = np.array(self._next_bits, dtype=np.uint8)
                self.layer_trace.append(self.activations.copy())
                self._enter_layer(self._layer_idx + 1)
            else:
                self.logits = np.array(self._sums, dtype=np.int64)
                self.state = FsmState.ARGMAX
                self._argmax_idx = 0
                self.best_index = None
                self._best_value = None

    # -- the clock -----------------------------------------------------

    def step(self) -> bool:
        """Advance one cycle; returns False once the FSM has completed."""
        if self.finished:
            return False
        self.cycle += 1
        self.cycles_per_stage[self.state] += 1

        if self.state == FsmState.IDLE:
            self._stage_spent += 1
            if self._stage_spent >= self._stage_budget:
                self._enter_layer(0)
            return True

        if self.state in LAYER_STATES:
            layer = self.model.layers[self._layer_idx]
            n_in = layer.in_features
            if self._bit_idx < n_in:
                # one input bit per lane this cycle
                lo, hi = self._group
                i = self._bit_idx
                w_col = self._w_bits[self._layer_idx][lo:hi, i]
                self._accum += (w_col == self.activations[i]).astype(np.int64)
                self._bit_idx += 1
                if self._bit_idx == n_in and self.cfg.g_group == 0:
                    self._finish_group()
                    self._advance_after_group()
            else:
                self._writeback_left -= 1
                if self._writeback_left == self.cfg.g_group - 1:
                    self._finish_group()  # compare/writeback happens first
                if self._writeback_left == 0:
                    self._advance_after_group()
            return True

        if self.state == FsmState.ARGMAX:
            j = self._argmax_idx
            value = int(self.logits[j])
            if self._best_value is None or value > self._best_value:
                self._best_value = value
                self.best_index = j
            self._argmax_idx += 1
            if self._argmax_idx == self.logits.size:
                self.state = FsmState.DONE
                n_classes = self.logits.size
                self._stage_budget = self.cfg.c_fixed - 1 - n_classes
                self._stage_spent = 0
                if self._stage_budget == 0:
                    self.finished = True
            return True

        # DONE: hold the result until the budgeted completion cycles elapse,
        # then absorb
        self._stage_spent += 1
        if self._stage_spent >= self._stage_budget:
            self.finished = True
        return True

    def run(self) -> CycleReport:
        while self.step():
            pass
        return self.report()

    def report(self) -> CycleReport:
        if not self.finished:
            raise RuntimeError("FSM has not completed")
        total = sum(self.cycles_per_stage.values())
        result = InferenceResult(self.logits, self.best_index)
        return CycleReport(
            cycles_per_stage=dict(self.cycles_per_stage),
            total_cycles=total,
            latency_ns=latency_ns(total, self.cfg),
            speedup_vs_p1=_speedup_vs_p1(self.model, self.cfg, total),
            functional_result=result,
        )


def _speedup_vs_p1(model: FoldedModel, cfg: HwConfig, total_cycles: int) -> float:
    base_cfg = replace(cfg, parallelism=1)
    base = sum(
        schedule_cycles(_layer_dims(model), model.layers[-1].out_features, base_cfg).values()
    )
    return latency_ns(base, base_cfg) / latency_ns(total_cycles, cfg)


def simulate(model: FoldedModel, x: BitVector, cfg: HwConfig,
             trace: list | None = None) -> CycleReport:
    """Group-event walk of the FSM: identical cycle accounting and
    functional math as FsmWalker, advancing whole groups at a time.

    When `trace` is a list, each hidden layer's activation bits are
    appended to it (for divergence reporting in co-simulation).
    """
    _check_model(model, cfg)
    if x.length != model.layers[0].in_features:
        raise DimensionError(model.layers[0].in_features, x.length)
    stages = {FsmState.IDLE: 1 + (1 if cfg.memory_style == "bram" else 0)}
    a = x
    logits = None
    for state, layer in zip(LAYER_STATES, model.layers):
        n_in = layer.in_features
        cycles = 0
        outputs = []
        for lo, hi in _groups(layer.out_features, cfg.parallelism):
            m = matvec_popcount_rows(layer.weights, a, lo, hi)
            z = 2 * m - n_in
            outputs.append(z)
            cycles += n_in + cfg.g_group  # bit-serial accumulate + writeback
        stages[state] = cycles
        z_all = np.concatenate(outputs)
        if layer.thresholds is not None:
            bits = (z_all >= layer.thresholds).astype(np.uint8)
            if trace is not None:
                trace.append(bits.copy())
            a = BitVector(bits.size, pack_bits(bits))
        else:
            logits = z_all
    n_classes = logits.size
    stages[FsmState.ARGMAX] = n_classes
    stages[FsmState.DONE] = cfg.c_fixed - 1 - n_classes
    # sequential scan, strictly-greater replacement
    best = 0
    for j in range(1, n_classes):
        if logits[j] > logits[best]:
            best = j
    total = sum(stages.values())
    return CycleReport(
        cycles_per_stage=stages,
        total_cycles=total,
        latency_ns=latency_ns(total, cfg),
        speedup_vs_p1=_speedup_vs_p1(model, cfg, total),
        functional_result=InferenceResult(logits, best),
    )


# -- calibration ------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationResult:
    g_group: int
    c_fixed: int
    t0_ns: float
    clock_period_ns: float
    residuals: tuple  # (row, modeled_latency_ns, rel_error) triples
    max_rel_error: float
    exact_rows: int

    def report(self) -> str:
        lines = [
            f"fitted: g_group={self.g_group} c_fixed={self.c_fixed} "
            f"t0_ns={self.t0_ns} (clock {self.clock_period_ns} ns)",
            f"exact rows: {self.exact_rows}/{len(self.residuals)}, "
            f"max relative error {self.max_rel_error * 100:.3f}%",
        ]
        for row, modeled, rel in self.residuals:
            lines.append(
                f"  P={row.parallelism:<4d} {row.memory_style:<4s} "
                f"measured {row.latency_ns:>11,.0f}  modeled {modeled:>11,.1f}  "
                f"({rel * 100:+.3f}%)"
            )
        return "\n".join(lines)


class CalibrationError(RuntimeError):
    def __init__(self, message: str, result: CalibrationResult | None = None):
        if result is not None:
            message = f"{message}\n{result.report()}"
        super().__init__(message)
        self.result = result


def calibrate(rows, dims=((784, 128), (128, 64), (64, 10)), n_classes: int = 10,
              clock_period_ns: float = DEFAULT_CLOCK_NS,
              tolerance: float = 0.02) -> CalibrationResult:
    """Fit (g_group, c_fixed, t0_ns) to measured latency rows by grid search.

    Preference order: most exactly-reproduced rows, then smallest maximum
    relative error, then the smallest constants. t0 is confined to one
    clock period so the (c_fixed, t0) split is unique. Raises
    CalibrationError if the best fit misses any row by more than
    `tolerance` (an outlier row within tolerance is reported, not fatal).
    """
    rows = tuple(rows)
    if len(rows) < 3:
        raise CalibrationError(
            f"need at least 3 measured rows to fit 3 constants, got {len(rows)}"
        )
    for row in rows:
        if row.parallelism not in SUPPORTED_PARALLELISM:
            raise CalibrationError(f"unsupported parallelism {row.parallelism} in rows")
        if row.memory_style not in MEMORY_STYLES:
            raise CalibrationError(f"unknown memory style {row.memory_style!r} in rows")

    c_floor = 1 + n_classes
    best = None
    for g in range(0, 7):
        cores = []
        for row in rows:
            core = sum(math.ceil(n_out / row.parallelism) * (n_in + g) for n_in, n_out in dims)
            core += 1 if row.memory_style == "bram" else 0
            cores.append(core)
        for c in range(c_floor, c_floor + 50):
            for t0 in np.arange(0.0, clock_period_ns, 0.5):
                t0 = float(t0)
                exact = 0
                max_rel = 0.0
                for core, row in zip(cores, rows):
                    modeled = (core + c) * clock_period_ns + t0
                    err = abs(modeled - row.latency_ns)
                    if err < 1e-6:
                        exact += 1
                    max_rel = max(max_rel, err / row.latency_ns)
                key = (-exact, max_rel, g, c, t0)
                if best is None or key < best[0]:
                    best = (key, g, c, t0, exact, max_rel)

    _, g, c, t0, exact, max_rel = best
    residuals = []
    for row in rows:
        core = sum(math.ceil(n_out / row.parallelism) * (n_in + g) for n_in, n_out in dims)
        core += 1 if row.memory_style == "bram" else 0
        modeled = (core + c) * clock_period_ns + t0
        residuals.append((row, modeled, (modeled - row.latency_ns) / row.latency_ns))
    result = CalibrationResult(
        g_group=g,
        c_fixed=c,
        t0_ns=t0,
        clock_period_ns=clock_period_ns,
        residuals=tuple(residuals),
        max_rel_error=max_rel,
        exact_rows=exact,
    )
    if max_rel > tolerance:
        raise CalibrationError(
            f"best fit misses the {tolerance * 100:.0f}% tolerance", result
        )
    return result


# -- sweep and co-simulation -------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    parallelism: int
    memory_style: str
    cycles: int
    latency_ns: float
    speedup: float


@dataclass(frozen=True)
class SweepReport:
    rows: tuple

    def to_text(self) -> str:
        lines = [
            f"{'parallelism':>11}  {'memory':>6}  {'cycles':>9}  {'latency_ns':>12}  {'speedup':>8}"
        ]
        for r in self.rows:
            lines.append(
                f"{r.parallelism:>11d}  {r.memory_style:>6}  {r.cycles:>9d}  "
                f"{r.latency_ns:>12.1f}  {r.speedup:>8.2f}"
            )
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["parallelism", "memory_style", "cycles", "latency_ns", "speedup"])
        for r in self.rows:
            writer.writerow(
                [r.parallelism, r.memory_style, r.cycles, f"{r.latency_ns:.1f}", f"{r.speedup:.2f}"]
            )
        return buf.getvalue()


def default_sweep_configs(clock_period_ns: float = DEFAULT_CLOCK_NS,
                          g_group: int = DEFAULT_G_GROUP,
                          c_fixed: int = DEFAULT_C_FIXED,
                          t0_ns: float = DEFAULT_T0_NS) -> list:
    """The thirteen reference configurations (BRAM stops at P=64)."""
    cfgs = []
    for row in REFERENCE_ROWS:
        cfgs.append(
            HwConfig(
                parallelism=row.parallelism,
                memory_style=row.memory_style,
                clock_period_ns=clock_period_ns,
                g_group=g_group,
                c_fixed=c_fixed,
                t0_ns=t0_ns,
            )
        )
    return cfgs


def sweep(model: FoldedModel, cfgs, x: BitVector | None = None) -> SweepReport:
    """Simulate every configuration; speedups are against the P=1 schedule
    of the same memory style. The latency columns are input-independent;
    any probe input gives the same table."""
    if x is None:
        x = BitVector.zeros(model.layers[0].in_features)
    rows = []
    for cfg in cfgs:
        report = simulate(model, x, cfg)
        rows.append(
            SweepRow(
                parallelism=cfg.parallelism,
                memory_style=cfg.memory_style,
                cycles=report.total_cycles,
                latency_ns=report.latency_ns,
                speedup=report.speedup_vs_p1,
            )
        )
    return SweepReport(tuple(rows))


@dataclass(frozen=True)
class CosimMismatch:
    sample_index: int
    stage: FsmState
    simulated: int
    expected: int


@dataclass(frozen=True)
class CosimReport:
    total: int
    mismatches: tuple

    @property
    def passed(self) -> bool:
        return not self.mismatches


def cosim_check(model: FoldedModel, inputs, cfg: HwConfig) -> CosimReport:
    """Run the cycle simulator and the packed engine on every input and
    compare predictions; mismatches carry the first diverging stage."""
    mismatches = []
    total = 0
    for idx, x in enumerate(inputs):
        total += 1
        sim_trace: list = []
        sim = simulate(model, x, cfg, trace=sim_trace)
        expected, eng_trace = infer(model, x, collect_trace=True)
        if sim.functional_result.predicted != expected.predicted:
            stage = FsmState.ARGMAX
            for li, (sim_bits, eng_vec) in enumerate(zip(sim_trace, eng_trace)):
                if not np.array_equal(sim_bits, eng_vec.to_bits()):
                    stage = LAYER_STATES[li]
                    break
            else:
                if not np.array_equal(sim.functional_result.logits, expected.logits):
                    stage = LAYER_STATES[-1]
            mismatches.append(
                CosimMismatch(
                    sample_index=idx,
                    stage=stage,
                    simulated=sim.functional_result.predicted,
                    expected=expected.predicted,
                )
            )
    return CosimReport(total=total, mismatches=tuple(mismatches))
