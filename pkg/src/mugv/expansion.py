"""Width expansion of a trained model into an e-times wider one.

Every hidden-to-hidden linear becomes ``W' = (tile_{e x e}(W) - E) / e``.
The perturbation ``E`` is zero-mean across the ``e`` column blocks of each
row block, so each row block still sums its column blocks back to ``W``:
replicated inputs ``[x; ...; x]`` give replicated outputs, while the clone
blocks carry distinct values and receive distinct gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import ParameterSet
from .errors import ConfigurationError

BIAS_MODES = ("preserve_function", "literal_eq2")

# role -> (expand output rows, expand input columns, output chunks)
_LINEAR_ROLES = {
    "linear": (True, True, 1),
    "linear_out": (True, False, 1),
    "linear_in": (False, True, 1),
    "linear_chunked6": (True, True, 6),
}
_BIAS_ROLES = {"bias": "linear", "bias_out": "linear_out", "bias_in": "linear_in",
               "bias_chunked6": "linear_chunked6"}


@dataclass
class ExpansionConfig:
    e: int = 2
    eps_scale: float = 0.0
    bias_mode: str = "preserve_function"
    seed: int = 0

    def __post_init__(self):
        if int(self.e) != self.e or self.e < 1:
            raise ConfigurationError(f"expansion factor e must be an integer >= 1, got {self.e}")
        if self.eps_scale < 0:
            raise ConfigurationError("eps_scale must be nonnegative")
        if self.bias_mode not in BIAS_MODES:
            raise ConfigurationError(f"bias_mode must be one of {BIAS_MODES}")


@dataclass
class ExpansionReport:
    layer_deviation: dict[str, float] = field(default_factory=dict)
    global_deviation: float = 0.0
    params_before: int = 0
    params_after: int = 0
    tol: float = 0.0

    @property
    def passed(self) -> bool:
        return self.global_deviation <= self.tol

    @property
    def param_ratio(self) -> float:
        return self.params_after / self.params_before if self.params_before else float("nan")

    def to_dict(self) -> dict:
        return {"layer_deviation": self.layer_deviation, "global_deviation": self.global_deviation,
                "params_before": self.params_before, "params_after": self.params_after,
                "param_ratio": self.param_ratio, "tol": self.tol, "passed": self.passed}


def zero_sum_perturbation(shape: tuple[int, int], e: int, eps_scale: float,
                          rng: np.random.Generator) -> np.ndarray:
    """(e*d_out, e*d_in) uniform noise, centred across the column blocks of each row block.

    Entries are bounded by 2*eps_scale (exactly eps_scale for e = 2).
    """
    d_out, d_in = shape
    if e == 1 or eps_scale == 0:
        return np.zeros((e * d_out, e * d_in))
    raw = rng.uniform(-eps_scale, eps_scale, size=(e, e, d_out, d_in))
    if e == 2:
        raw[:, 1] = -raw[:, 0]
    else:
        raw -= raw.mean(axis=1, keepdims=True)
    # (row block, col block, d_out, d_in) -> (e*d_out, e*d_in)
    return raw.transpose(0, 2, 1, 3).reshape(e * d_out, e * d_in)


def _chunk_tile_rows(a: np.ndarray, e: int, chunks: int) -> np.ndarray:
    """Tile along axis 0 independently inside each of ``chunks`` equal slices."""
    parts = np.split(a, chunks, axis=0)
    return np.concatenate([np.concatenate([p] * e, axis=0) for p in parts], axis=0)


def expand_linear(W: np.ndarray, b: np.ndarray | None, config: ExpansionConfig,
                  rng: np.random.Generator | None = None, expand_out: bool = True,
                  expand_in: bool = True, chunks: int = 1) -> tuple[np.ndarray, np.ndarray | None]:
    """Expand one linear layer (W: (d_out, d_in), b: (d_out,))."""
    e = config.e
    W = np.asarray(W)
    if not np.all(np.isfinite(W)) or (b is not None and not np.all(np.isfinite(b))):
        raise ConfigurationError("weights must be finite")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    dtype = W.dtype
    work = W.astype(np.float64)
    out_e = e if expand_out else 1
    in_e = e if expand_in else 1
    if chunks > 1:
        tiled = _chunk_tile_rows(np.concatenate([work] * in_e, axis=1), out_e, chunks)
    else:
        tiled = np.tile(work, (out_e, in_e))
    if in_e > 1:
        pert = zero_sum_perturbation(work.shape, e, config.eps_scale, rng)
        if out_e == 1:
            pert = pert[: work.shape[0]]
        elif chunks > 1:
            pert = _rows_to_chunk_layout(pert, e, chunks)
        W_new = (tiled - pert) / in_e
    else:
        W_new = tiled
    b_new = None
    if b is not None:
        b64 = np.asarray(b, dtype=np.float64)
        b_new = _chunk_tile_rows(b64, out_e, chunks) if chunks > 1 else np.tile(b64, out_e)
        if config.bias_mode == "literal_eq2" and in_e > 1:
            b_new = b_new / e
        b_new = b_new.astype(np.asarray(b).dtype)
    return W_new.astype(dtype), b_new


def _rows_to_chunk_layout(pert: np.ndarray, e: int, chunks: int) -> np.ndarray:
    # pert rows are laid out [copy0 rows; copy1 rows; ...]; chunked outputs want
    # [chunk0 copy0, chunk0 copy1, ..., chunk1 copy0, ...]
    d_out = pert.shape[0] // e
    c = d_out // chunks
    blocks = pert.reshape(e, chunks, c, -1).transpose(1, 0, 2, 3)
    return blocks.reshape(e * d_out, -1)


def expand_parameters(params: ParameterSet, roles: dict[str, str], config: ExpansionConfig) -> ParameterSet:
    """Expand every tensor of ``params`` according to its role.

    Roles: linear / linear_out / linear_in / linear_chunked6 weights and their
    matching bias roles, ``gain`` (tiled), ``block_scale`` (tiled along the
    last axis), ``head_gain`` and ``keep`` (unchanged).
    """
    unknown = [n for n in params if roles.get(n, "unknown") not in
               set(_LINEAR_ROLES) | set(_BIAS_ROLES) | {"gain", "block_scale", "head_gain", "keep"}]
    if unknown:
        raise ConfigurationError(f"no expansion role for tensors: {', '.join(unknown)}")
    rng = np.random.default_rng(config.seed)
    e = config.e
    out = ParameterSet(metadata=params.metadata)
    for name, value in params.items():
        role = roles[name]
        if role in _LINEAR_ROLES:
            eo, ei, chunks = _LINEAR_ROLES[role]
            out[name], _ = expand_linear(value, None, config, rng, eo, ei, chunks)
        elif role in _BIAS_ROLES:
            eo, ei, chunks = _LINEAR_ROLES[_BIAS_ROLES[role]]
            _, out[name] = expand_linear(np.zeros((value.shape[0], 1), value.dtype), value,
                                         config, rng, eo, ei, chunks)
        elif role == "gain":
            out[name] = np.tile(value, e)
        elif role == "block_scale":
            out[name] = np.tile(value, (1, e))
        else:
            out[name] = value.copy()
    return out


def expand_model(model: nn.Module, config: ExpansionConfig) -> nn.Module:
    """Build the wider DiT and load the expanded weights into it."""
    from .dit import DiT, expanded_config

    if not isinstance(model, DiT):
        raise ConfigurationError(f"expand_model supports DiT, got {type(model).__name__}")
    params = ParameterSet.from_module(model)
    big = DiT(expanded_config(model.config, config.e)).to(next(model.parameters()).dtype)
    expand_parameters(params, model.expansion_roles(), config).load_into(big)
    return big


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _replica_deviation(small: torch.Tensor, big: torch.Tensor, e: int, relative: bool = False) -> float:
    copies = big.reshape(*big.shape[:-1], e, small.shape[-1])
    dev = float((copies - small.unsqueeze(-2)).abs().max())
    if relative:
        dev /= max(1.0, float(small.abs().max()))
    return dev


def verify_preservation(orig: nn.Module, expanded: nn.Module, inputs, tol: float = 1e-5) -> ExpansionReport:
    """Run both models on the same inputs and report output deviation per layer.

    For ``nn.Linear`` the expanded layer sees the replicated input
    ``[x; ...; x]``.  For a DiT both models see identical raw inputs and the
    hidden states after the patch projection and each block are compared
    against the replicated original.  Hidden-state deviations are divided by
    max(1, |h|_inf) of the original layer so float32 rounding on large
    residual streams is measured on the same footing as the final output,
    whose deviation is absolute.
    """
    from .dit import DiT

    report = ExpansionReport(params_before=count_parameters(orig),
                             params_after=count_parameters(expanded), tol=tol)
    with torch.no_grad():
        if isinstance(orig, nn.Linear) and isinstance(expanded, nn.Linear):
            e, rem = divmod(expanded.in_features, orig.in_features)
            if rem or expanded.out_features != e * orig.out_features:
                raise ConfigurationError("linear layers are not an integer-width expansion")
            x = torch.as_tensor(inputs, dtype=orig.weight.dtype)
            dev = _replica_deviation(orig(x), expanded(torch.cat([x] * e, dim=-1)), e)
            report.layer_deviation["linear"] = dev
        elif isinstance(orig, DiT) and isinstance(expanded, DiT):
            a, b = orig.config, expanded.config
            e, rem = divmod(b.hidden, a.hidden)
            if rem or a.depth != b.depth or a.patch_dim != b.patch_dim or a.head_dim != b.head_dim:
                raise ConfigurationError("DiT configs differ by more than an integer width factor")
            taps_a, taps_b = [], []
            out_a = orig(*inputs, taps=taps_a)
            out_b = expanded(*inputs, taps=taps_b)
            names = ["patch_in"] + [f"blocks.{i}" for i in range(a.depth)]
            for name, ha, hb in zip(names, taps_a, taps_b):
                report.layer_deviation[name] = _replica_deviation(ha, hb, e, relative=True)
            report.layer_deviation["output"] = float((out_a - out_b).abs().max())
        else:
            raise ConfigurationError(
                f"cannot compare {type(orig).__name__} with {type(expanded).__name__}")
    report.global_deviation = max(report.layer_deviation.values())
    return report
