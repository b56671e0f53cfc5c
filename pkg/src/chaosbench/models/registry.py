"""Model tags, capacity-matched presets and construction from JSON-able specs."""

from __future__ import annotations

import numpy as np

from ..container import ContainerError, read_container, write_container
from ..nn import mlp_param_count
from .dopri5 import Dopri5Config
from .temporal import CoRDModel, LSTMModel, MLPModel, NeuralODEModel, TCNModel, TemporalModel

MAIN_MODELS = ("mlp", "lstm", "tcn", "node", "cord")
ABLATION_VARIANTS = ("cord", "cord_v1", "cord_v2", "cord_v3", "mlp_v1", "mlp_v2")
ALL_TAGS = MAIN_MODELS + ABLATION_VARIANTS[1:]
DISPLAY = {
    "mlp": "MLP", "lstm": "LSTM", "tcn": "TCN", "node": "NeuralODE", "cord": "CoRD",
    "cord_v1": "CoRD_v1", "cord_v2": "CoRD_v2", "cord_v3": "CoRD_v3", "mlp_v1": "MLP_v1", "mlp_v2": "MLP_v2",
}

# Reference architecture sizes: (width, depth) per model and benchmark.
REFERENCE_SIZES = {
    "dp": {"state_dim": 6, "mlp": (512, 4), "lstm": (137, 4), "tcn": (241, 4), "node": (512, 4), "cord": (512, 4)},
    "ks": {"state_dim": 32, "mlp": (512, 6), "lstm": (512, 2), "tcn": (64, 2), "node": (512, 6), "cord": (512, 6)},
    "kf": {"state_dim": 256, "mlp": (512, 2), "lstm": (100, 2), "tcn": (110, 2), "node": (512, 2), "cord": (512, 2)},
}

CORD_SUBSTEPS = 3
TCN_KERNEL = 3


class UnknownModelError(KeyError):
    pass


def _field_sizes(in_dim: int, out_dim: int, width: int, depth: int) -> list[int]:
    return [in_dim] + [width] * (depth - 1) + [out_dim]


def lstm_param_count(D: int, hidden: int, layers: int) -> int:
    n, n_in = 0, 2 * D
    for _ in range(layers):
        n += 4 * hidden * (n_in + hidden) + 4 * hidden
        n_in = hidden
    return n + hidden * D + D


def tcn_param_count(D: int, channels: int, blocks: int, kernel: int = TCN_KERNEL) -> int:
    C = channels
    return 2 * D * C + C + blocks * 2 * (kernel * C * C + C) + C * D + D


def spec_param_count(spec: dict, D: int) -> int:
    tag = spec["tag"]
    if tag == "lstm":
        return lstm_param_count(D, spec["hidden"], spec["layers"])
    if tag == "tcn":
        return tcn_param_count(D, spec["channels"], spec["blocks"], spec.get("kernel", TCN_KERNEL))
    in_dim = D if tag in ("cord_v3", "mlp_v1") else 2 * D
    return mlp_param_count(_field_sizes(in_dim, D, spec["width"], spec["depth"]))


def _solve_width(count_fn, target: int) -> int:
    lo, hi = 1, 1
    while count_fn(hi) < target:
        hi *= 2
    lo = max(1, hi // 2)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count_fn(mid) < target:
            lo = mid
        else:
            hi = mid
    return min((lo, hi), key=lambda w: abs(count_fn(w) - target))


def capacity_matched_specs(D: int, width: int, depth: int, lstm_layers: int, tcn_blocks: int,
                           substeps: int = CORD_SUBSTEPS) -> dict:
    """Specs for the five main models with LSTM/TCN widths solved to the MLP's parameter count."""
    target = mlp_param_count(_field_sizes(2 * D, D, width, depth))
    hidden = _solve_width(lambda h: lstm_param_count(D, h, lstm_layers), target)
    channels = _solve_width(lambda c: tcn_param_count(D, c, tcn_blocks), target)
    return {
        "mlp": {"tag": "mlp", "width": width, "depth": depth},
        "lstm": {"tag": "lstm", "hidden": hidden, "layers": lstm_layers},
        "tcn": {"tag": "tcn", "channels": channels, "blocks": tcn_blocks, "kernel": TCN_KERNEL},
        "node": {"tag": "node", "width": width, "depth": depth},
        "cord": {"tag": "cord", "width": width, "depth": depth, "substeps": substeps},
    }


def benchmark_specs(benchmark: str, width: int | None = None) -> dict:
    """Capacity-matched specs keeping the table's depths/layer/block counts.

    MLP, NeuralODE and CoRD use the tabulated width (or ``width``); the LSTM hidden
    size and TCN channel count are solved so all five parameter counts agree.
    """
    row = REFERENCE_SIZES[benchmark]
    w, depth = row["mlp"]
    return capacity_matched_specs(row["state_dim"], width or w, depth, row["lstm"][1], row["tcn"][1])


def literal_reference_specs(benchmark: str) -> dict:
    row = REFERENCE_SIZES[benchmark]
    return {
        "mlp": {"tag": "mlp", "width": row["mlp"][0], "depth": row["mlp"][1]},
        "lstm": {"tag": "lstm", "hidden": row["lstm"][0], "layers": row["lstm"][1]},
        "tcn": {"tag": "tcn", "channels": row["tcn"][0], "blocks": row["tcn"][1], "kernel": TCN_KERNEL},
        "node": {"tag": "node", "width": row["node"][0], "depth": row["node"][1]},
        "cord": {"tag": "cord", "width": row["cord"][0], "depth": row["cord"][1], "substeps": CORD_SUBSTEPS},
    }


def variant_spec(tag: str, width: int, depth: int, substeps: int = CORD_SUBSTEPS) -> dict:
    if tag not in ABLATION_VARIANTS:
        raise UnknownModelError(f"unknown ablation variant {tag!r}")
    return {"tag": tag, "width": width, "depth": depth, "substeps": substeps}


def build_model(spec: dict, state_dim: int, seed: int = 0) -> TemporalModel:
    """Instantiate a model from a spec dict such as ``{"tag": "lstm", "hidden": 64, "layers": 2}``."""
    tag = spec.get("tag")
    rng = np.random.default_rng([seed, 7])
    D = state_dim
    if tag == "mlp":
        m = MLPModel(D, spec["width"], spec["depth"], rng)
    elif tag == "mlp_v1":
        m = MLPModel(D, spec["width"], spec["depth"], rng, conditioned=False)
    elif tag == "lstm":
        m = LSTMModel(D, spec["hidden"], spec["layers"], rng)
    elif tag == "tcn":
        m = TCNModel(D, spec["channels"], spec["blocks"], rng, kernel=spec.get("kernel", TCN_KERNEL))
    elif tag == "node":
        solver = Dopri5Config(
            rtol=spec.get("rtol", 1e-5), atol=spec.get("atol", 1e-6), max_steps=spec.get("max_steps", 1000)
        )
        m = NeuralODEModel(D, spec["width"], spec["depth"], rng, h_ode=spec.get("h_ode", 1.0), solver=solver)
    elif tag in ("cord", "cord_v1", "cord_v2", "cord_v3", "mlp_v2"):
        K = spec.get("substeps", CORD_SUBSTEPS)
        kwargs = {"substeps": K, "dt": spec.get("dt", 1.0), "residual": True, "conditioned": True}
        if tag in ("cord_v1", "mlp_v2"):
            kwargs["substeps"] = 1
        elif tag == "cord_v2":
            kwargs["residual"] = False
        elif tag == "cord_v3":
            kwargs["conditioned"] = False
        m = CoRDModel(D, spec["width"], spec["depth"], rng, **kwargs)
    else:
        raise UnknownModelError(f"unknown model tag {tag!r}")
    m.tag = tag
    m.spec = dict(spec)
    return m


def build_variant(tag: str, state_dim: int, width: int, depth: int, seed: int = 0) -> TemporalModel:
    return build_model(variant_spec(tag, width, depth), state_dim, seed)


def save_model(path, model: TemporalModel, arrays: dict | None = None, meta: dict | None = None) -> None:
    """Write parameters plus the architecture block; ``arrays``/``meta`` carry extras such as norm stats."""
    payload = {f"param.{k}": v for k, v in model.state_dict().items()}
    for k, v in (arrays or {}).items():
        payload[f"extra.{k}"] = v
    header = {
        "kind": "temporal_model",
        "architecture": {"tag": model.tag, "spec": model.spec, "state_dim": model.state_dim, "config": model.config()},
        "extra": meta or {},
    }
    write_container(path, payload, header)


def load_model(path) -> tuple[TemporalModel, dict, dict]:
    """Returns (model, extra arrays, extra meta)."""
    arrays, header = read_container(path)
    if header.get("kind") != "temporal_model":
        raise ContainerError(f"{path}: not a temporal-model checkpoint")
    arch = header["architecture"]
    model = build_model(arch["spec"], arch["state_dim"])
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param.")})
    extra = {k[6:]: v for k, v in arrays.items() if k.startswith("extra.")}
    return model, extra, header.get("extra", {})
