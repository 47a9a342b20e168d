"""Operation counts, energy and area estimates for binarized conv layers.

Counting rules per layer, with ``P = C_out * H * W`` output positions (H, W
are output sizes) and ``T = C_in * K_h * K_w`` taps per output:

* bnn:      P*T XNORs, P*T counter steps, P comparators
* xnor_net: as bnn, plus 2*P multiplications and P*K_h*K_w additions
* abc_net:  M*N*P*T XNORs and counter steps, M*N*P multiplications and additions

Energies are summed per operation and reported in microjoules. Counter
energy is excluded by default, which reproduces the reference layer totals.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

OPERATORS = ("xnor", "counter", "comparator", "multiplier", "adder")
SCHEMES = ("bnn", "xnor_net", "abc_net")


@dataclass(frozen=True)
class OperatorCostTable:
    """Per-operator energy (pJ) and area (um^2) for a 65 nm library."""

    xnor_pj: float = 7.6e-4
    counter_pj: float = 7.8e-4
    comparator_pj: float = 1.1e-2
    multiplier_pj: float = 1.6
    adder_pj: float = 4.8e-2
    xnor_um2: float = 4.2
    counter_um2: float = 52.0
    comparator_um2: float = 52.0
    multiplier_um2: float = 3.0e3
    adder_um2: float = 1.6e2

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"cost table entry {f.name} must be > 0")

    def energy(self, op: str) -> float:
        return getattr(self, f"{op}_pj")

    def area(self, op: str) -> float:
        return getattr(self, f"{op}_um2")

    @classmethod
    def parse(cls, text: str) -> "OperatorCostTable":
        """``key = value`` lines (``#`` comments); keys are the field names."""
        known = {f.name for f in fields(cls)}
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"cost table line {n}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"cost table line {n}: unknown key {key!r}")
            try:
                values[key] = float(raw)
            except ValueError:
                raise ConfigError(f"cost table line {n}: bad number {raw!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "OperatorCostTable":
        try:
            return cls.parse(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read cost table {path}: {exc}") from None


@dataclass(frozen=True)
class LayerShape:
    c_in: int
    c_out: int
    h: int
    w: int
    k_h: int
    k_w: int

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.h, self.w, self.k_h, self.k_w) < 1:
            raise ConfigError(f"layer dimensions must be >= 1, got {self}")

    @classmethod
    def parse(cls, text: str) -> "LayerShape":
        """``C_in,C_out,H,W,K_h,K_w``."""
        try:
            dims = [int(v) for v in text.split(",")]
        except ValueError:
            raise ConfigError(f"bad layer shape {text!r}") from None
        if len(dims) != 6:
            raise ConfigError(f"layer shape needs 6 integers C_in,C_out,H,W,K_h,K_w, got {text!r}")
        return cls(*dims)


@dataclass(frozen=True)
class OpCounts:
    xnor: int = 0
    counter: int = 0
    comparator: int = 0
    multiplier: int = 0
    adder: int = 0

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(*(getattr(self, k) + getattr(other, k) for k in OPERATORS))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in OPERATORS}


def count_ops(shape: LayerShape, scheme: str = "bnn", m: int = 3, n: int = 3) -> OpCounts:
    """Operation counts for one layer; ``m``/``n`` are ABC-Net weight/activation bases."""
    pos = shape.c_out * shape.h * shape.w
    taps = shape.c_in * shape.k_h * shape.k_w
    if scheme == "bnn":
        return OpCounts(xnor=pos * taps, counter=pos * taps, comparator=pos)
    if scheme == "xnor_net":
        return OpCounts(xnor=pos * taps, counter=pos * taps, comparator=pos,
                        multiplier=2 * pos, adder=pos * shape.k_h * shape.k_w)
    if scheme == "abc_net":
        if m < 1 or n < 1:
            raise ConfigError("ABC-Net base counts must be >= 1")
        return OpCounts(xnor=m * n * pos * taps, counter=m * n * pos * taps,
                        multiplier=m * n * pos, adder=m * n * pos)
    raise ConfigError(f"unknown scheme {scheme!r}; choose from {', '.join(SCHEMES)}")


def energy_estimate(counts: OpCounts, table: OperatorCostTable | None = None,
                    include_counters: bool = False) -> float:
    """Total energy in microjoules."""
    table = table or OperatorCostTable()
    pj = sum(getattr(counts, op) * table.energy(op) for op in OPERATORS
             if include_counters or op != "counter")
    return pj * 1e-6


def area_estimate(counts: OpCounts, table: OperatorCostTable | None = None, parallelism: float = 1.0) -> float:
    """Area in um^2 when ``parallelism`` operations of each kind are instantiated per op counted.

    Pass per-cycle operator counts (e.g. one output pixel's worth) with
    ``parallelism`` = 1, or whole-layer counts scaled down by a fraction.
    """
    if parallelism <= 0:
        raise ConfigError("parallelism must be > 0")
    table = table or OperatorCostTable()
    return sum(getattr(counts, op) * table.area(op) for op in OPERATORS) * parallelism


@dataclass
class CostRow:
    name: str
    shape: LayerShape
    counts: OpCounts
    energy_uj: float


@dataclass
class CostReport:
    rows: list[CostRow]
    total_uj: float
    scheme: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("layer", "c_in", "c_out", "h", "w", "k_h", "k_w") + OPERATORS + ("energy_uj",))
        for r in self.rows:
            s = r.shape
            w.writerow([r.name, s.c_in, s.c_out, s.h, s.w, s.k_h, s.k_w]
                       + [getattr(r.counts, k) for k in OPERATORS] + [repr(r.energy_uj)])
        w.writerow(["total", "", "", "", "", "", ""] + [""] * len(OPERATORS) + [repr(self.total_uj)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'layer':<18} {'shape':<28} {'energy (uJ)':>12}"]
        for r in self.rows:
            s = r.shape
            dims = f"{s.c_in}x{s.c_out}x{s.h}x{s.w}x{s.k_h}x{s.k_w}"
            lines.append(f"{r.name:<18} {dims:<28} {r.energy_uj:>12.4f}")
        lines.append(f"{'total (' + self.scheme + ')':<47} {self.total_uj:>12.4f}")
        return "\n".join(lines)


def report(named_shapes, scheme: str = "bnn", table: OperatorCostTable | None = None,
           include_counters: bool = False, m: int = 3, n: int = 3) -> CostReport:
    rows = []
    for name, shape in named_shapes:
        counts = count_ops(shape, scheme, m, n)
        rows.append(CostRow(name, shape, counts, energy_estimate(counts, table, include_counters)))
    # the total is the sum of the rows as reported, so the table adds up exactly
    total = 0.0
    for r in rows:
        total += r.energy_uj
    return CostReport(rows, total, scheme)


def network_shapes(model) -> list[tuple[str, LayerShape]]:
    """Layer shapes for a ``NetworkSpec`` or a fused model; dense layers count as 1x1 convs."""
    from .fused import FusedModel
    from .models import NetworkSpec, layer_descs

    if isinstance(model, NetworkSpec):
        return [(d.name, LayerShape(d.c_in, d.c_out, d.out_size, d.out_size, d.kernel, d.kernel))
                for d in layer_descs(model)]
    if isinstance(model, FusedModel):
        out, size = [], model.input_size
        for i, L in enumerate(model.layers):
            o = (size + 2 * L.pad - L.kernel) // L.stride + 1
            out.append((f"layers.{i}", LayerShape(L.c_in, L.c_out, o, o, L.kernel, L.kernel)))
            size = o // L.pool if L.pool else o
        return out
    raise ConfigError(f"cannot cost a {type(model).__name__}")


def network_cost(model, scheme: str = "bnn", table: OperatorCostTable | None = None,
                 include_counters: bool = False) -> CostReport:
    return report(network_shapes(model), scheme, table, include_counters)


def params_storage(spec) -> float:
    """Parameter storage in MB: one bit per binary weight plus 32 bits per BN gamma/beta."""
    from .models import bn_param_count, weight_bits

    return (weight_bits(spec) / 8 + 4 * bn_param_count(spec)) / 1e6
