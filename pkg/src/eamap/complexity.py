"""Analytic FLOP counts for transformer layers and savings from fixed attention weights.

Layer counts follow the usual matrix-product-only model: projections and the
MLP scale with ``n * d**2``, the attention products with ``n**2 * d``. They
are evaluated at the true sequence length ``n = N + 1`` (patches plus CLS).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import DimensionError

SAVINGS_CAVEAT = (
    "theoretical: fixed weights are substituted after the softmax, so the full "
    "QK^T product is still computed; savings assume the skipped logits are never formed"
)


def flops_mhsa(n: int, d: int) -> int:
    return 4 * n * d * d + 2 * n * n * d


def flops_mlp(n: int, d: int) -> int:
    return 8 * n * d * d


def flops_layer(n: int, d: int) -> int:
    return 12 * n * d * d + 2 * n * n * d


@dataclass
class FlopsReport:
    seq_len: int
    embed_dim: int
    head_dim: int
    mhsa_flops: list[int]
    mlp_flops: list[int]
    layer_flops: list[int]
    fixed_per_layer: list[int]
    saved_per_layer: list[int]
    fixed_fraction: float
    caveat: str = field(default=SAVINGS_CAVEAT)

    @property
    def total_flops(self) -> int:
        return sum(self.layer_flops)

    @property
    def theoretical_saved_flops(self) -> int:
        return sum(self.saved_per_layer)

    @property
    def saved_pct(self) -> float:
        """Saved multiplies as a percentage of the model's layer count.

        Savings are in FLOPs (two per multiply-accumulate) while the layer
        formulas count one per multiply, hence the halving.
        """
        if not self.total_flops:
            return 0.0
        return 100.0 * (self.theoretical_saved_flops / 2) / self.total_flops

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "seq_len", "mhsa_flops", "mlp_flops", "layer_flops", "fixed", "saved_flops"])
        for l, row in enumerate(zip(self.mhsa_flops, self.mlp_flops, self.layer_flops, self.fixed_per_layer, self.saved_per_layer)):
            w.writerow([l, self.seq_len, *row])
        w.writerow(["total", self.seq_len, sum(self.mhsa_flops), sum(self.mlp_flops), self.total_flops,
                    sum(self.fixed_per_layer), self.theoretical_saved_flops])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [
            f"sequence length (patches + CLS): {self.seq_len}",
            f"embed dim: {self.embed_dim}, head dim: {self.head_dim}",
        ]
        for l in range(len(self.layer_flops)):
            lines.append(
                f"layer {l}: mhsa={self.mhsa_flops[l]:,} mlp={self.mlp_flops[l]:,} "
                f"total={self.layer_flops[l]:,} fixed={self.fixed_per_layer[l]} saved={self.saved_per_layer[l]:,}"
            )
        lines.append(f"model total: {self.total_flops:,}")
        lines.append(
            f"fixed fraction: {self.fixed_fraction:.4f}, saved: {self.theoretical_saved_flops:,} "
            f"({self.saved_pct:.3f}%)"
        )
        lines.append(f"note: {self.caveat}")
        return "\n".join(lines) + "\n"


def savings(plan, cfg) -> FlopsReport:
    """FLOP report for ``cfg`` with the logits skipped by ``plan`` (``None`` = no fixing)."""
    T, d, dh = cfg.seq_len, cfg.embed_dim, cfg.head_dim
    L = cfg.num_layers
    if plan is not None and tuple(plan.shape) != cfg.attention_shape:
        raise DimensionError(f"plan shape {plan.shape} does not match model {cfg.attention_shape}")
    fixed = [0] * L if plan is None else [int(plan.masks[l].sum()) for l in range(L)]
    total_weights = L * cfg.num_heads * T * T
    return FlopsReport(
        seq_len=T,
        embed_dim=d,
        head_dim=dh,
        mhsa_flops=[flops_mhsa(T, d)] * L,
        mlp_flops=[flops_mlp(T, d)] * L,
        layer_flops=[flops_layer(T, d)] * L,
        fixed_per_layer=fixed,
        saved_per_layer=[f * 2 * dh for f in fixed],
        fixed_fraction=sum(fixed) / total_weights,
    )
