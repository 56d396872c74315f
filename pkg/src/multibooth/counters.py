"""Process-wide instrumentation counters.

Two things are tracked: exact attention FLOP counts (split by self- vs
cross-attention) and the number of gradient update steps. The FLOP
numbers are deterministic functions of the shapes involved; the step
counter is what lets tests assert that composition never optimizes.
"""

from __future__ import annotations

ATTENTION_FLOPS: dict[str, int] = {"self": 0, "cross": 0}
GRAD_STEPS: int = 0


def reset_counters() -> None:
    global GRAD_STEPS
    ATTENTION_FLOPS["self"] = 0
    ATTENTION_FLOPS["cross"] = 0
    GRAD_STEPS = 0


def snapshot() -> dict:
    return {
        "attention_flops": dict(ATTENTION_FLOPS),
        "grad_steps": GRAD_STEPS,
    }


def count_attention(kind: str, q_rows: int, kv_rows: int, d_qk: int, d_v: int) -> None:
    """Record one scaled-dot-product attention call.

    Cost model: QK^T and attn@V at 2 FLOPs per MAC, plus 6*q*kv for the
    scale/softmax pipeline. Exact integers so runs are comparable.
    """
    if kind not in ATTENTION_FLOPS:
        raise ValueError(f"unknown attention kind {kind!r}")
    ATTENTION_FLOPS[kind] += q_rows * kv_rows * (2 * d_qk + 2 * d_v + 6)


def count_grad_step() -> None:
    global GRAD_STEPS
    GRAD_STEPS += 1
