"""Per-example FLOP and parameter-count accounting.

Conventions: a multiply-add costs 2 FLOPs, a bias add 1, an activation 1 per
output unit. Backpropagation through a trainable module is charged the same
as its forward pass. GMM fitting and density evaluation are not charged.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import ContractError
from .nn import ModelParams

METHODS = ("fed_dann", "fed_mcd", "dualadapt")


@dataclass(frozen=True)
class ModuleCost:
    params: int
    forward_flops: int

    def __post_init__(self):
        if self.params < 0 or self.forward_flops < 0:
            raise ContractError("module costs must be non-negative")


def module_cost(m: ModelParams | None) -> ModuleCost:
    if m is None or not m.layers:
        return ModuleCost(0, 0)
    params = flops = 0
    last = len(m.layers) - 1
    for i, (w, _) in enumerate(m.layers):
        n_in, n_out = w.shape
        params += n_in * n_out + n_out
        flops += 2 * n_in * n_out + n_out
        if i < last or m.activate_output:
            flops += n_out
    return ModuleCost(params, flops)


def method_client_flops(method: str, G: int, F: int, D: int = 0) -> int:
    """On-device training FLOPs per example, given forward FLOPs of G, F and D."""
    if method == "fed_dann":
        return 2 * (G + D) + 2 * (G + F + D)
    if method == "fed_mcd":
        return 2 * (G + 2 * F) + 2 * (G + 2 * F)
    if method == "dualadapt":
        return G + 3 * F
    raise ContractError(f"unknown method {method!r}")


def method_communication(method: str, G: int, F: int, W: int = 0) -> tuple[int, int]:
    """(upload, broadcast) parameter counts per client per round."""
    if method == "fed_dann":
        return G + F, G + F
    if method == "fed_mcd":
        return G + 2 * F, G + 2 * F
    if method == "dualadapt":
        return F + W, G + F + W
    raise ContractError(f"unknown method {method!r}")


def cost_table(G_flops: int, F_flops: int, G_params: int, F_params: int, W_params: int, D_flops: int = 0) -> list[dict]:
    rows = []
    for method in METHODS:
        up, down = method_communication(method, G_params, F_params, W_params)
        rows.append(
            {
                "method": method,
                "computation": method_client_flops(method, G_flops, F_flops, D_flops),
                "upload": up,
                "broadcast": down,
            }
        )
    return rows


class FlopCounter:
    """Instrumented counter; call sites report each module pass over a batch."""

    def __init__(self):
        self.flops = 0

    def forward(self, cost: ModuleCost, batch: int) -> None:
        self.flops += cost.forward_flops * batch

    def backward(self, cost: ModuleCost, batch: int) -> None:
        self.flops += cost.forward_flops * batch

    def take(self) -> int:
        out, self.flops = self.flops, 0
        return out


LEDGER_COLUMNS = ("method", "participant", "round", "flops", "upload", "broadcast")


@dataclass(frozen=True)
class LedgerRow:
    method: str
    participant: str
    round: int
    flops: int
    upload: int
    broadcast: int

    def __post_init__(self):
        if min(self.flops, self.upload, self.broadcast) < 0:
            raise ContractError("ledger counts must be non-negative")


@dataclass
class CostLedger:
    rows: list[LedgerRow] = field(default_factory=list)

    def add(self, row: LedgerRow) -> None:
        self.rows.append(row)

    def select(self, participant_prefix: str = "", round: int | None = None) -> list[LedgerRow]:
        return [
            r
            for r in self.rows
            if r.participant.startswith(participant_prefix) and (round is None or r.round == round)
        ]

    def total(self, column: str, participant_prefix: str = "") -> int:
        return sum(getattr(r, column) for r in self.select(participant_prefix))

    def to_dicts(self) -> list[dict]:
        return [{c: getattr(r, c) for c in LEDGER_COLUMNS} for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=LEDGER_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.to_dicts())
        return buf.getvalue()


def ledger_from_run(report) -> CostLedger:
    """Rebuild the ledger from a TrainReport or its JSON dict."""
    d = report if isinstance(report, dict) else report.to_dict()
    return CostLedger([LedgerRow(**row) for row in d.get("ledger", [])])
