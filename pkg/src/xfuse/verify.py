"""Self-checks exposed on the command line: whole-model gradient check and
the cross-attention complementarity probe."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import losses
from .autograd import GradCheckReport, grad_check
from .cam import CAM
from .config import FuseConfig, variant_config
from .model import FusionNet


def full_model_grad_check(cfg: FuseConfig | None = None, size: int = 16, seed: int = 0,
                          tol: float = 1e-3, samples: int = 32, eps: float = 1e-5) -> GradCheckReport:
    """Finite-difference check of every parameter of the full fusion network
    under the fusion loss, on a random ``size`` x ``size`` pair."""
    cfg = cfg or variant_config("s1-c1")
    rng = np.random.default_rng(seed)
    model = FusionNet(cfg, rng)
    ir = rng.random((1, size, size))
    vi = rng.random((1, size, size))
    # targets do not depend on the parameters, so compute them once
    t_int = losses.intensity_target(ir, vi)
    t_gra = losses.gradient_target(ir, vi)

    def loss():
        out = model(ir, vi)
        return F.add(F.mse(out, t_int), F.mul(cfg.w_g, F.mse(out, t_gra)))

    return grad_check(loss, model.param_store(), eps=eps, tol=tol, samples=samples, seed=seed)


@dataclass
class ProbeResult:
    rows: int
    argmax_is_argmin: float  # fraction of rows where the top weight sits on the lowest score
    argmax_is_argmax: float  # fraction where it sits on the highest score
    max_row_error: float  # max |sum(row) - 1|

    def summary(self) -> str:
        return (f"{self.rows} rows: argmax(w)==argmin(s) {self.argmax_is_argmin:.4f}, "
                f"argmax(w)==argmax(s) {self.argmax_is_argmax:.4f}, "
                f"max |rowsum-1| {self.max_row_error:.2e}")


def complementarity_probe(cfg: FuseConfig | None = None, rows: int = 10000, tokens: int = 16,
                          seed: int = 0) -> ProbeResult:
    """Run the configured cross-attention block on random tokens and report
    where each row's largest attention weight lands."""
    cfg = cfg or FuseConfig()
    rng = np.random.default_rng(seed)
    block = CAM(cfg, rng).ir.ca[0]
    n = -(-rows // tokens)
    d = cfg.deep_channels
    block(rng.normal(size=(n, tokens, d)), rng.normal(size=(n, tokens, d)))
    s = block.last_scores.reshape(-1, tokens)[:rows]
    w = block.last_weights.data.reshape(-1, tokens)[:rows]
    top = w.argmax(axis=1)
    return ProbeResult(
        rows=len(s),
        argmax_is_argmin=float(np.mean(top == s.argmin(axis=1))),
        argmax_is_argmax=float(np.mean(top == s.argmax(axis=1))),
        max_row_error=float(np.abs(w.sum(axis=1) - 1.0).max()),
    )


def attention_block_counts(manifest) -> dict[str, dict[str, int]]:
    """Per-branch SA / CA block counts read off parameter names alone."""
    blocks: dict[str, dict[str, set]] = {}
    for name, _ in manifest:
        parts = name.split(".")
        if len(parts) < 4 or parts[0] != "fusion" or parts[2] not in ("sa_pre", "sa_post", "ca"):
            continue
        kind = "ca" if parts[2] == "ca" else "sa"
        blocks.setdefault(parts[1], {"sa": set(), "ca": set()})[kind].add((parts[2], parts[3]))
    return {b: {k: len(v) for k, v in kinds.items()} for b, kinds in sorted(blocks.items())}
