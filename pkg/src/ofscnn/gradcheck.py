"""Central finite differences, kept independent of every analytic backward pass.

Only forward evaluations are used here: ``finite_diff`` perturbs one value
of the model state, calls a loss closure twice and restores the value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network, NetworkSpec, ConvSpec, ReLU, batch_loss
from .ofs import OfsConv2d

KINDS = ("filter_weight", "bias", "input", "size_k")


@dataclass(frozen=True)
class PerturbationTarget:
    kind: str
    layer: int | None = None       # index into ``Network.layers``; None for a bare layer
    index: tuple | None = None     # array coordinates for weight/bias/input targets
    h: float = 1e-5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if not self.h > 0:
            raise ValueError(f"step must be > 0, got {self.h}")

    @property
    def name(self) -> str:
        where = "" if self.layer is None else f"layer{self.layer}."
        coords = "" if self.index is None else "[" + ",".join(map(str, self.index)) + "]"
        return f"{where}{self.kind}{coords}"


def _resolve_layer(model, target):
    if target.layer is None:
        return model
    return model.layers[target.layer]


def finite_diff(loss_fn, target: PerturbationTarget, model=None, inputs: np.ndarray | None = None) -> float:
    """(loss(+h) - loss(-h)) / 2h for the value named by ``target``.

    ``model`` is a ``Network`` or a single layer; ``inputs`` is the array
    perturbed by "input" targets.  The perturbed value is restored exactly.
    """
    h = target.h
    if target.kind == "size_k":
        layer = _resolve_layer(model, target)
        k0 = layer.size.k
        if not (layer.size.contains(k0 - h) and layer.size.contains(k0 + h)):
            raise ValueError(f"size perturbation [{k0 - h}, {k0 + h}] crosses the interval "
                             f"[{layer.size.k_minus}, {layer.size.k_plus})")
        size0 = layer.size
        try:
            layer.set_size(k0 + h)
            fp = loss_fn()
            layer.set_size(k0 - h)
            fm = loss_fn()
        finally:
            layer.size = size0
        return (fp - fm) / (2 * h)

    if target.kind == "input":
        array = inputs
    else:
        layer = _resolve_layer(model, target)
        array = layer.weight if target.kind == "filter_weight" else layer.bias
    idx = tuple(target.index)
    old = array[idx]
    try:
        array[idx] = old + h
        fp = loss_fn()
        array[idx] = old - h
        fm = loss_fn()
    finally:
        array[idx] = old
    return (fp - fm) / (2 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def tiny_spec() -> NetworkSpec:
    """8x8 single-channel input, two learned 2-channel conv layers."""
    return NetworkSpec(input_resolution=(8, 8),
                       conv_layers=[ConvSpec(2, k0=4.0), ConvSpec(2, k0=2.6)],
                       pool_after=(0,), fc_nodes=4)


def tiny_sample(seed: int = 0, batch: int = 4, resolution=(8, 8)):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, 1) + tuple(resolution))
    y = (np.arange(batch) % 2 == 0).astype(np.int64)
    return x, y


def _relu_signature(net: Network) -> bytes:
    return b"".join(np.packbits(layer._x > 0).tobytes()
                    for layer in net.layers if isinstance(layer, ReLU))


def check_report(net: Network, sample, n_coords: int = 200, h: float = 1e-5, tol: float = 1e-4,
                 seed: int = 0, corrupt_size_grad: float = 1.0) -> dict:
    """Compare analytic gradients of the batch loss against central differences.

    Every learned size and every bias is checked, plus ``n_coords`` random
    weight coordinates and ``n_coords`` random input coordinates.  Targets
    whose perturbation flips a ReLU mask are skipped (kinks).
    ``corrupt_size_grad`` scales the analytic size gradients; it exists to
    demonstrate that a wrong gradient is caught.
    """
    x, y = sample
    x = np.array(x, dtype=np.float64)
    first = net.layers[0]
    saved_flag = first.need_input_grad
    first.need_input_grad = True
    try:
        _, dlogits = batch_loss(net.forward(x), y, net.spec.loss.positive_weight)
        analytic_dx = _network_backward(net, dlogits)
    finally:
        first.need_input_grad = saved_flag
    grads = {i: dict(layer.grads) for i, layer in enumerate(net.layers) if getattr(layer, "grads", None)}

    rng = np.random.default_rng(seed)
    targets = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, OfsConv2d):
            targets.append(PerturbationTarget("size_k", i, h=h))
        if i in grads:
            targets += [PerturbationTarget("bias", i, (c,), h=h) for c in range(layer.bias.size)]
    weight_coords = [(i, np.unravel_index(flat, net.layers[i].weight.shape))
                     for i in grads for flat in range(net.layers[i].weight.size)]
    for j in rng.choice(len(weight_coords), size=min(n_coords, len(weight_coords)), replace=False):
        i, idx = weight_coords[j]
        targets.append(PerturbationTarget("filter_weight", i, tuple(int(v) for v in idx), h=h))
    for flat in rng.choice(x.size, size=min(n_coords, x.size), replace=False):
        targets.append(PerturbationTarget("input", None, tuple(int(v) for v in np.unravel_index(flat, x.shape)), h=h))

    entries, skipped = [], []
    for target in targets:
        signatures = []

        def loss_fn():
            value = net.loss(x, y)
            signatures.append(_relu_signature(net))
            return value

        try:
            numeric = finite_diff(loss_fn, target, model=net, inputs=x)
        except ValueError as exc:
            skipped.append({"target": target.name, "reason": str(exc)})
            continue
        if signatures[0] != signatures[1]:
            skipped.append({"target": target.name, "reason": "relu kink inside perturbation"})
            continue
        if target.kind == "size_k":
            analytic = grads[target.layer]["k"] * corrupt_size_grad
        elif target.kind == "bias":
            analytic = grads[target.layer]["bias"][target.index]
        elif target.kind == "filter_weight":
            analytic = grads[target.layer]["weight"][target.index]
        else:
            analytic = analytic_dx[target.index]
        entries.append({"target": target.name, "kind": target.kind, "analytic": float(analytic),
                        "numeric": float(numeric),
                        "rel_error": relative_error(float(analytic), float(numeric))})

    worst = max(entries, key=lambda e: e["rel_error"]) if entries else None
    failed = [e for e in entries if e["rel_error"] > tol]
    return {
        "tolerance": tol,
        "step": h,
        "n_checked": len(entries),
        "n_skipped": len(skipped),
        "max_error": worst["rel_error"] if worst else 0.0,
        "worst_target": worst["target"] if worst else None,
        "failed_kinds": sorted({e["kind"] for e in failed}),
        "failed_targets": [e["target"] for e in failed],
        "passed": not failed,
        "entries": entries,
        "skipped": skipped,
    }


def _network_backward(net: Network, dlogits: np.ndarray) -> np.ndarray:
    d = dlogits[:, None]
    for layer in reversed(net.layers):
        d = layer.backward(d)
    return d
