"""Analytic FLOPs accounting.

Convention: a multiply-accumulate is 2 FLOPs, exp-based nonlinearities
(softmax, sigmoid) cost 4 FLOPs per element, layer norm 8 per element,
other elementwise ops 1.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

from .transformer import ModelSpec, count_params, init_params


def merge_flops_regular(N: int, D: int, P: int, mask_width: int) -> int:
    """Token-merging overhead for a regular block: 6CDP + 3C + ND^2 + NDP.

    The symbol C is not defined where the formula is stated; it is taken
    as an explicit argument rather than guessed.
    """
    C = mask_width
    return 6 * C * D * P + 3 * C + N * D * D + N * D * P


def merge_flops_efficient(N: int, D: int, P: int, mask_width: int) -> int:
    """As above, with the mask applied to both X and Z: an extra NDP."""
    return merge_flops_regular(N, D, P, mask_width) + N * D * P


def _linear(m: int, fan_in: int, fan_out: int, bias: bool = True) -> int:
    return 2 * m * fan_in * fan_out + (m * fan_out if bias else 0)


@dataclass
class BlockFlops:
    name: str
    n_in: int
    n_out: int
    attention: int = 0
    mlp: int = 0
    merge_overhead: int = 0

    @property
    def total(self) -> int:
        return self.attention + self.mlp + self.merge_overhead


@dataclass
class FlopsReport:
    blocks: list[BlockFlops] = field(default_factory=list)
    params: int = 0

    @property
    def total(self) -> int:
        return sum(b.total for b in self.blocks)

    def rows(self) -> list[dict]:
        out = []
        for b in self.blocks:
            row = asdict(b)
            row["total"] = b.total
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["name", "n_in", "n_out", "attention", "mlp", "merge_overhead", "total"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow(row)
        w.writerow({"name": "model", "n_in": "", "n_out": "", "attention": "", "mlp": "",
                    "merge_overhead": "", "total": self.total})
        return buf.getvalue()

    def to_text(self) -> str:
        cols = ["name", "n_in", "n_out", "attention", "mlp", "merge_overhead", "total"]
        rows = [[str(r[c]) for c in cols] for r in self.rows()]
        rows.append(["model", "", "", "", "", "", str(self.total)])
        widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
        lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
        lines.append(f"params: {self.params}")
        return "\n".join(lines) + "\n"


def model_flops(spec: ModelSpec, merge: bool = True) -> FlopsReport:
    """Inference FLOPs of the concrete architecture.

    With ``merge=False`` every block runs at full token count with no mask
    modules (the warm-up / plain-transformer network).
    """
    D, Hd, C, h = spec.dim, spec.hidden, spec.num_classes, spec.heads
    pdim = spec.patch * spec.patch * spec.in_channels
    report = FlopsReport(params=count_params(init_params(spec, 0)))
    N0 = spec.n_tokens
    report.blocks.append(BlockFlops("embed", N0, N0, mlp=_linear(N0, pdim, D) + N0 * D))

    n = N0
    for plan in spec.plan():
        merging = merge and plan.merges
        P = plan.n_out if merging else n
        bf = BlockFlops(f"block{plan.index}", n, P)
        attn = 8 * n * D  # ln1
        attn += 2 * (4 * n * D * D + 2 * n * n * D)
        attn += 4 * h * n * n + h * n * n  # softmax and 1/sqrt(d) scaling
        if not merging and plan.style == "regular":
            attn += n * D  # attention residual
        bf.attention = attn

        mlp = 0
        if plan.style == "efficient":
            mlp += _linear(P, 2 * D, D)
        mlp += 8 * P * D + _linear(P, D, Hd) + P * Hd + _linear(P, Hd, D) + P * D
        bf.mlp = mlp

        if merging:
            ovh = 0
            if plan.stage_first:
                ovh += n * D + _linear(n, D, P) + 4 * n * P + 4 * n * P
            if plan.chained_update:
                ovh += 2 * _linear(n, D, D) + n * D  # mask MLP
                ovh += 2 * n * P * D  # G^T Z at the previous mask
                ovh += 3 * C * P * D + 4 * C  # distances, soft assignment
                ovh += 2 * C * P * D + 3 * P * D + 3 * C  # descent direction with psi
                ovh += 2 * n * D * P + n * P + 4 * n * P  # MLP(Z) M^T, subtract, softmax
            ovh += 2 * n * D * P * (2 if plan.style == "efficient" else 1)
            bf.merge_overhead = ovh
        report.blocks.append(bf)
        n = P

    report.blocks.append(BlockFlops("head", n, 1, mlp=n * D + _linear(1, D, C)))
    return report
