"""Per-client evaluation records and worst-case / average summaries."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import ClientDataset
from .fairness import ddp_gap, ddp_hard, npr
from .model import ModelParams, bce_from_logits, logits


@dataclass(frozen=True)
class MetricsRecord:
    client_id: int
    acc: float
    test_error: float
    ddp_sum: float
    ddp_gap: float
    npr0: float
    npr1: float
    bce: float
    n0: int = 0
    n1: int = 0

    @property
    def npr_all(self) -> float:
        """Negative prediction rate over the whole shard."""
        n = self.n0 + self.n1
        if n == 0:
            raise ValueError("record carries no group counts")
        return (self.n0 * self.npr0 + self.n1 * self.npr1) / n

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_model(params: ModelParams, data: ClientDataset) -> MetricsRecord:
    if len(data) == 0:
        raise ValueError(f"client {data.client_id}: empty test shard")
    z = logits(params, data.X)
    pred = (z > 0.0).astype(np.int8)
    acc = float(np.mean(pred == data.y))
    bce, _ = bce_from_logits(z, data.y)
    n0, n1 = data.group_counts()
    return MetricsRecord(
        client_id=data.client_id,
        acc=acc,
        test_error=1.0 - acc,
        ddp_sum=ddp_hard(pred, data.s),
        ddp_gap=ddp_gap(pred, data.s),
        npr0=npr(pred, data.s, 0),
        npr1=npr(pred, data.s, 1),
        bce=bce,
        n0=n0,
        n1=n1,
    )


@dataclass
class SummaryRow:
    algorithm: str
    eta: float
    lam: float
    seed: int
    worst_acc: float
    worst_ddp: float
    avg_acc: float
    avg_ddp: float
    records: list[MetricsRecord] = field(default_factory=list)

    @property
    def worst_err(self) -> float:
        return 1.0 - self.worst_acc

    @property
    def avg_err(self) -> float:
        return 1.0 - self.avg_acc

    def key(self):
        return (self.algorithm, self.eta, self.lam, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["records"] = [r.to_dict() for r in self.records]
        return d


def summarize(records: Sequence[MetricsRecord], algorithm: str = "", eta: float = 0.0,
              lam: float = 0.0, seed: int = 0) -> SummaryRow:
    """Worst case is the minimum accuracy and the maximum DDP across clients."""
    if not records:
        raise ValueError("summarize: no records")
    accs = [r.acc for r in records]
    ddps = [r.ddp_sum for r in records]
    return SummaryRow(
        algorithm=algorithm,
        eta=eta,
        lam=lam,
        seed=seed,
        worst_acc=min(accs),
        worst_ddp=max(ddps),
        avg_acc=sum(accs) / len(accs),
        avg_ddp=sum(ddps) / len(ddps),
        records=list(records),
    )
