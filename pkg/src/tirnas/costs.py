"""Parameter and MAC accounting for built networks.

FLOPs are reported as multiply-accumulate counts over convolution and
linear kernels, measured by instrumenting one forward pass at a stated
input size; everything else (pooling, normalization, activations) counts
as zero.  Parameters count trainable tensors only, not running statistics.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, count_macs, no_grad
from .autodiff.nn import Module


def parameter_count(module: Module) -> int:
    return sum(p.size for p in module.parameters())


def count_cost(net, input_hw: tuple[int, int], batch: int = 1,
               rng: np.random.Generator | None = None) -> dict:
    """Measure {params, flops} plus a per-component breakdown.

    ``rng`` is needed for supernets built with a channel rate below 1
    (their forward samples channel masks).
    """
    h, w = input_hw
    x = Tensor(np.zeros((batch, net.plan.in_channels, h, w), dtype=np.float32))
    was_training = net.training
    net.eval()
    components: list[tuple[str, int]] = []

    def run(name, fn):
        with count_macs() as box:
            out = fn()
        components.append((name, box[0]))
        return out

    try:
        with no_grad(), count_macs() as total:
            if hasattr(net, "alphas"):
                net.forward(x, rng=rng, run=run)
            else:
                net.forward(x, run=run)
    finally:
        net.train(was_training)

    by_component = []
    for name, macs_n in components:
        module = _component_module(net, name)
        by_component.append({
            "component": name,
            "params": parameter_count(module) if module is not None else 0,
            "flops": macs_n,
        })
    return {
        "params": parameter_count(net),
        "flops": total[0],
        "input_hw": (h, w),
        "batch": batch,
        "components": by_component,
    }


def _component_module(net, name: str):
    if name == "stem":
        stem = Module()
        stem.add_module("conv", net.stem_conv)
        stem.add_module("bn", net.stem_bn)
        return stem
    if name == "head":
        head = Module()
        head.add_module("embed", net.embed)
        head.add_module("classifier", net.classifier)
        return head
    if name.startswith("cell_"):
        return net.cells[int(name.split("_")[1]) - 1]
    return None


def cost_table_csv(cost: dict) -> str:
    lines = ["component,params,flops"]
    for row in cost["components"]:
        lines.append(f"{row['component']},{row['params']},{row['flops']}")
    lines.append(f"total,{cost['params']},{cost['flops']}")
    return "\n".join(lines) + "\n"
