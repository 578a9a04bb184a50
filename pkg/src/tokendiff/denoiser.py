"""Conditional transformer predicting the clean-token distribution.

Pre-norm blocks with joint attention: queries come from the token
positions, keys/values from the positions plus one appended condition
token (a learned per-class embedding projected into the model width).
Each layer therefore has exactly one set of q/k/v/output projections,
which are the LoRA targets.

All weights are float64 tensors; the base can be frozen wholesale and
adapted with low-rank pairs whose zero-initialized up-projection makes
attachment output-neutral.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, UsageError

LORA_TARGETS = ("wq", "wk", "wv", "wp")
INIT_STD = 0.02


@dataclass(frozen=True)
class DenoiserConfig:
    K: int
    T: int
    D: int
    n_conditions: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_cond: int = 64

    def validate(self) -> None:
        for name in ("K", "T", "D", "n_conditions", "d_model", "n_layers", "n_heads", "d_cond"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even for the sinusoidal position table")

    def to_dict(self) -> dict:
        return {
            "K": self.K, "T": self.T, "D": self.D, "n_conditions": self.n_conditions,
            "d_model": self.d_model, "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_cond": self.d_cond,
        }


@dataclass(frozen=True)
class LoraConfig:
    r: int
    alpha: float = 16.0
    targets: tuple = LORA_TARGETS

    def validate(self, d_model: int) -> None:
        if self.r < 1:
            raise ConfigError(f"rank r={self.r} must be >= 1")
        if self.r > d_model // 2:
            raise ConfigError(f"rank r={self.r} too large for d_model={d_model} (max {d_model // 2})")
        if not self.targets:
            raise ConfigError("at least one adapter target required")
        bad = [t for t in self.targets if t not in LORA_TARGETS]
        if bad:
            raise ConfigError(f"unknown adapter targets {bad}; valid: {list(LORA_TARGETS)}")
        if len(set(self.targets)) != len(self.targets):
            raise ConfigError("duplicate adapter targets")

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def to_dict(self) -> dict:
        return {"r": self.r, "alpha": self.alpha, "targets": list(self.targets)}


class Linear:
    """y = x @ w (+ b). Weight stored (d_in, d_out)."""

    def __init__(self, params: dict, name: str, d_in: int, d_out: int, rng, bias: bool = True):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        self.w = Tensor(rng.normal(0.0, INIT_STD, size=(d_in, d_out)), requires_grad=True)
        params[f"{name}.w"] = self.w
        self.b = None
        if bias:
            self.b = Tensor(np.zeros(d_out), requires_grad=True)
            params[f"{name}.b"] = self.b
        self.adapter: AdapterPair | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        if self.adapter is not None:
            y = ad.add(y, self.adapter(x))
        if self.b is not None:
            y = ad.add_rowvec(y, self.b)
        return y


class AdapterPair:
    """Low-rank update: scale * (x @ down) @ up, up zero-initialized.

    down is the Gaussian-initialized (d_in, r) factor, up the zero (r,
    d_out) factor, so the freshly attached adapter leaves the layer's
    outputs untouched.
    """

    def __init__(self, params: dict, name: str, d_in: int, d_out: int, cfg: LoraConfig, rng):
        self.name = name
        self.scale = cfg.scale
        self.down = Tensor(rng.normal(0.0, INIT_STD, size=(d_in, cfg.r)), requires_grad=True)
        self.up = Tensor(np.zeros((cfg.r, d_out)), requires_grad=True)
        params[f"{name}.lora_down"] = self.down
        params[f"{name}.lora_up"] = self.up

    def __call__(self, x: Tensor) -> Tensor:
        return ad.scale(ad.matmul(ad.matmul(x, self.down), self.up), self.scale)

    def delta(self) -> np.ndarray:
        return self.scale * (self.down.data @ self.up.data)


def sinusoidal_positions(D: int, d_model: int) -> np.ndarray:
    pe = np.zeros((D, d_model))
    pos = np.arange(D)[:, None]
    div = np.exp(np.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe


class Denoiser:
    """p(x0 | x_t, t, condition) over the K real tokens, per position."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.lora: LoraConfig | None = None
        self._params: dict[str, Tensor] = {}
        self._adapter_names: set[str] = set()
        p = self._params

        d = cfg.d_model
        self.tok_emb = Tensor(rng.normal(0, INIT_STD, size=(cfg.K + 1, d)), requires_grad=True)
        self.time_emb = Tensor(rng.normal(0, INIT_STD, size=(cfg.T + 1, d)), requires_grad=True)
        self.cond_emb = Tensor(
            rng.normal(0, INIT_STD, size=(cfg.n_conditions, cfg.d_cond)), requires_grad=True
        )
        p["tok_emb"] = self.tok_emb
        p["time_emb"] = self.time_emb
        p["cond_emb"] = self.cond_emb
        self.cond_proj = Linear(p, "cond_proj", cfg.d_cond, d, rng)
        self.pos_enc = sinusoidal_positions(cfg.D, d)

        self.layers = []
        for i in range(cfg.n_layers):
            prefix = f"layers.{i}"
            layer = {
                "ln1_g": Tensor(np.ones(d), requires_grad=True),
                "ln1_b": Tensor(np.zeros(d), requires_grad=True),
                "wq": Linear(p, f"{prefix}.attn.wq", d, d, rng, bias=False),
                "wk": Linear(p, f"{prefix}.attn.wk", d, d, rng, bias=False),
                "wv": Linear(p, f"{prefix}.attn.wv", d, d, rng, bias=False),
                "wp": Linear(p, f"{prefix}.attn.wp", d, d, rng, bias=False),
                "ln2_g": Tensor(np.ones(d), requires_grad=True),
                "ln2_b": Tensor(np.zeros(d), requires_grad=True),
                "ffn1": Linear(p, f"{prefix}.ffn.w1", d, 4 * d, rng),
                "ffn2": Linear(p, f"{prefix}.ffn.w2", 4 * d, d, rng),
            }
            p[f"{prefix}.ln1.g"] = layer["ln1_g"]
            p[f"{prefix}.ln1.b"] = layer["ln1_b"]
            p[f"{prefix}.ln2.g"] = layer["ln2_g"]
            p[f"{prefix}.ln2.b"] = layer["ln2_b"]
            self.layers.append(layer)

        self.ln_f_g = Tensor(np.ones(d), requires_grad=True)
        self.ln_f_b = Tensor(np.zeros(d), requires_grad=True)
        p["ln_f.g"] = self.ln_f_g
        p["ln_f.b"] = self.ln_f_b
        self.head = Linear(p, "head", d, cfg.K, rng)

    # ----- parameter access ------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if v.requires_grad}

    def base_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k not in self._adapter_names}

    def count_trainable(self) -> int:
        return sum(v.data.size for v in self._params.values() if v.requires_grad)

    def set_trainable(self, flag: bool) -> None:
        for t in self._params.values():
            t.requires_grad = flag

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in state.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self._params[k].data.shape:
                raise ConfigError(f"tensor {k}: shape {arr.shape} != {self._params[k].data.shape}")
            self._params[k].data = arr.copy()

    def config_hash(self) -> str:
        doc = {"model": self.cfg.to_dict()}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    # ----- forward ---------------------------------------------------------

    def _check_inputs(self, tokens, t_arr, cond_arr):
        if tokens.min() < 0 or tokens.max() > self.cfg.K:
            raise UsageError(f"token outside [0, {self.cfg.K}]")
        if t_arr.min() < 1 or t_arr.max() > self.cfg.T:
            raise UsageError(f"step outside [1, {self.cfg.T}]")
        if cond_arr.min() < 0 or cond_arr.max() >= self.cfg.n_conditions:
            raise UsageError("condition id out of range")

    def forward_probs(self, tokens: np.ndarray, t, cond) -> Tensor:
        """Batched differentiable forward: (B, D) tokens -> (B, D, K) rows."""
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        B, D = tokens.shape
        if D != cfg.D:
            raise UsageError(f"sequence length {D} != configured D={cfg.D}")
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        cond_arr = np.broadcast_to(np.asarray(cond, dtype=np.int64), (B,))
        self._check_inputs(tokens, t_arr, cond_arr)

        x = ad.embedding(self.tok_emb, tokens)  # (B, D, d)
        pos = ad.tile_axis(Tensor(self.pos_enc[None]), 0, B)
        x = ad.add(x, pos)
        tvec = ad.reshape(ad.embedding(self.time_emb, t_arr), (B, 1, cfg.d_model))
        x = ad.add(x, ad.tile_axis(tvec, 1, D))

        cvec = self.cond_proj(ad.embedding(self.cond_emb, cond_arr))  # (B, d)
        ctok = ad.reshape(cvec, (B, 1, cfg.d_model))

        H = cfg.n_heads
        inv_sqrt_dk = 1.0 / math.sqrt(cfg.d_model // H)
        for layer in self.layers:
            h = ad.layer_norm_rows(x, layer["ln1_g"], layer["ln1_b"])
            ctx = ad.concat(h, ctok, axis=1)  # (B, D+1, d)
            q = ad.split_heads(layer["wq"](h), H)
            k = ad.split_heads(layer["wk"](ctx), H)
            v = ad.split_heads(layer["wv"](ctx), H)
            att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose_last2(k)), inv_sqrt_dk))
            o = ad.merge_heads(ad.matmul(att, v), H)
            x = ad.add(x, layer["wp"](o))
            h2 = ad.layer_norm_rows(x, layer["ln2_g"], layer["ln2_b"])
            f = layer["ffn2"](ad.relu(layer["ffn1"](h2)))
            x = ad.add(x, f)

        x = ad.layer_norm_rows(x, self.ln_f_g, self.ln_f_b)
        return ad.softmax_rows(self.head(x))

    def __call__(self, tokens: np.ndarray, t, cond) -> np.ndarray:
        """Plain-array forward for sampling/evaluation (no gradients kept)."""
        return self.forward_probs(tokens, t, cond).data

    def forward(self, tokens: np.ndarray, t: int, cond: int) -> np.ndarray:
        """Single-sequence convenience: (D,) tokens -> (D, K) rows."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1:
            raise UsageError("forward expects one sequence; use forward_probs for batches")
        return self(tokens[None, :], t, cond)[0]


# ---------------------------------------------------------------------------
# adapter lifecycle
# ---------------------------------------------------------------------------


def attach_lora(model: Denoiser, cfg: LoraConfig, rng: np.random.Generator) -> Denoiser:
    """Freeze the base and inject trainable low-rank pairs on the targets.

    Freshly attached adapters have up == 0, so outputs are unchanged; the
    trainable set becomes exactly the adapter tensors.
    """
    if model.lora is not None:
        raise UsageError("adapters already attached")
    cfg.validate(model.cfg.d_model)
    model.set_trainable(False)
    for i, layer in enumerate(model.layers):
        for target in cfg.targets:
            lin: Linear = layer[target]
            pair = AdapterPair(
                model._params, f"layers.{i}.attn.{target}", lin.d_in, lin.d_out, cfg, rng
            )
            lin.adapter = pair
            model._adapter_names.add(f"{pair.name}.lora_down")
            model._adapter_names.add(f"{pair.name}.lora_up")
    model.lora = cfg
    return model


def merge_lora(model: Denoiser) -> Denoiser:
    """Fold scale * down @ up into the frozen weights and drop the adapters."""
    if model.lora is None:
        raise UsageError("no adapters attached")
    for layer in model.layers:
        for target in LORA_TARGETS:
            lin: Linear = layer[target]
            if lin.adapter is not None:
                lin.w.data = lin.w.data + lin.adapter.delta()
                lin.adapter = None
    for name in sorted(model._adapter_names):
        del model._params[name]
    model._adapter_names.clear()
    model.lora = None
    return model


def lora_param_count(model_cfg: DenoiserConfig, lora_cfg: LoraConfig) -> int:
    """Closed form: n_layers * |targets| * r * (d_in + d_out)."""
    d = model_cfg.d_model
    return model_cfg.n_layers * len(lora_cfg.targets) * lora_cfg.r * (d + d)
