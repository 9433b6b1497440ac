"""Hierarchical multimodal fusion network with hand-derived gradients.

Topology: per-stream linear projection with an additive low-rank adapter path,
attention gating over each modality's streams, softmax gating across the
modalities, a small pre-norm transformer encoder over the (up to) 3 modality
tokens, and a pooled logistic regression head producing a normalized score in
(0, 1). Scores map to the MOS scale via s -> 1 + 4 s.

Everything is numpy float64; no autodiff framework, the backward pass mirrors
this fixed topology exactly and is verified against finite differences in the
test suite.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import MODALITIES, MODALITY_STREAMS, STREAM_SPECS, Manifest, holdout_split
from .errors import ConfigError, DataError, NumericError

CHECKPOINT_MAGIC = b"DUBC"
CHECKPOINT_VERSION = 1

_MOD_LETTER = {"A": "audio", "V": "video", "T": "text"}


def parse_modalities(spec: str) -> tuple[str, ...]:
    """"AVT", "A+V", "at" ... -> canonical modality tuple."""
    letters = [c for c in spec.upper() if c in _MOD_LETTER]
    if not letters or len(set(letters)) != len(letters):
        raise ConfigError(f"invalid modality spec: {spec!r}")
    chosen = {_MOD_LETTER[c] for c in letters}
    return tuple(m for m in MODALITIES if m in chosen)


@dataclass(frozen=True)
class NetworkConfig:
    shared_dim: int = 256
    lora_rank: int = 16
    lora_alpha: float = 16.0
    n_layers: int = 3
    n_heads: int = 4
    ffn_dim: int | None = None  # defaults to 4 * shared_dim
    dropout: float = 0.2
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    modalities: str = "AVT"

    def __post_init__(self):
        if self.shared_dim < 1 or self.shared_dim % self.n_heads != 0:
            raise ConfigError(
                f"shared_dim {self.shared_dim} must be divisible by n_heads {self.n_heads}"
            )
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.n_layers < 1:
            raise ConfigError("batch_size/epochs/n_layers out of range")
        mods = parse_modalities(self.modalities)
        min_din = min(STREAM_SPECS[s][1] for m in mods for s in MODALITY_STREAMS[m])
        if self.lora_rank > min_din:
            raise ConfigError(
                f"lora_rank {self.lora_rank} exceeds smallest stream dim {min_din}"
            )

    @property
    def active_modalities(self) -> tuple[str, ...]:
        return parse_modalities(self.modalities)

    @property
    def active_streams(self) -> tuple[str, ...]:
        return tuple(s for m in self.active_modalities for s in MODALITY_STREAMS[m])

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.shared_dim

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank


def _uniform_fanin(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FusionNetwork:
    """Parameter container plus forward/backward for the fixed topology."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.frozen: set[str] = set()
        self.params: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(config.seed))

    def _init_params(self, rng):
        c = self.config
        d, r = c.shared_dim, c.lora_rank
        p = self.params
        for s in c.active_streams:
            din = STREAM_SPECS[s][1]
            p[f"P_{s}"] = _uniform_fanin(rng, (d, din), din)
            p[f"A_{s}"] = _uniform_fanin(rng, (r, din), din)
            p[f"B_{s}"] = np.zeros((d, r))  # zero init: adapter path starts at 0
        for m in c.active_modalities:
            p[f"w_intra_{m}"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=d)
            p[f"v_gate_{m}"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=d)
            p[f"b_gate_{m}"] = np.zeros(1)
        T = len(c.active_modalities)
        p["pos_embed"] = rng.normal(0.0, 0.02, size=(T, d))
        for l in range(c.n_layers):
            p[f"L{l}_ln1_g"] = np.ones(d)
            p[f"L{l}_ln1_b"] = np.zeros(d)
            for nm in ("Wq", "Wk", "Wv", "Wo"):
                p[f"L{l}_{nm}"] = _uniform_fanin(rng, (d, d), d)
            p[f"L{l}_ln2_g"] = np.ones(d)
            p[f"L{l}_ln2_b"] = np.zeros(d)
            p[f"L{l}_W1"] = _uniform_fanin(rng, (c.ffn, d), d)
            p[f"L{l}_b1"] = np.zeros(c.ffn)
            p[f"L{l}_W2"] = _uniform_fanin(rng, (d, c.ffn), c.ffn)
            p[f"L{l}_b2"] = np.zeros(d)
        p["head_w"] = _uniform_fanin(rng, d, d)
        p["head_b"] = np.zeros(1)

    # -- building blocks -----------------------------------------------------

    def adapt_stream(self, stream: str, h: np.ndarray) -> np.ndarray:
        """Projection plus scaled low-rank adapter path for one stream."""
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        din = STREAM_SPECS[stream][1]
        if h.shape[1] != din:
            raise DataError(
                f"dimension mismatch for stream {stream!r}: expected {din}, got {h.shape[1]}"
            )
        p = self.params
        return h @ p[f"P_{stream}"].T + self.config.lora_scale * (
            (h @ p[f"A_{stream}"].T) @ p[f"B_{stream}"].T
        )

    def intra_modal_fuse(self, modality: str, adapted: list[np.ndarray]):
        """Attention-gated sum of one modality's adapted streams.

        Returns (z, alpha); alpha rows sum to 1.
        """
        if not adapted:
            raise DataError(f"no streams provided for modality {modality!r}")
        w = self.params[f"w_intra_{modality}"]
        H = np.stack([np.atleast_2d(a) for a in adapted], axis=1)  # (B, N, d)
        scores = H @ w  # (B, N)
        alpha = _softmax(scores)
        z = np.einsum("bn,bnd->bd", alpha, H)
        return z, alpha

    def inter_modal_gate(self, zs: dict[str, np.ndarray]):
        """Softmax gate across modality vectors. Returns (gated dict, gates)."""
        mods = self.config.active_modalities
        scores = np.stack(
            [zs[m] @ self.params[f"v_gate_{m}"] + self.params[f"b_gate_{m}"][0] for m in mods],
            axis=1,
        )  # (B, M)
        g = _softmax(scores)
        gated = {m: g[:, i:i + 1] * zs[m] for i, m in enumerate(mods)}
        return gated, g

    # -- forward / backward --------------------------------------------------

    def forward_batch(self, streams: dict[str, np.ndarray], train: bool = False,
                      rng: np.random.Generator | None = None,
                      masks: dict[str, np.ndarray] | None = None):
        """Run the whole network on a batch of raw stream matrices.

        Returns (normalized scores in (0,1), cache). Dropout is active only in
        train mode; masks are drawn from `rng` unless a prebuilt mask dict is
        supplied (used by gradient checks to freeze the noise).
        """
        c = self.config
        p = self.params
        use_drop = train and c.dropout > 0.0
        if use_drop and rng is None and masks is None:
            raise ConfigError("train-mode forward needs an rng (or fixed masks) for dropout")
        cache: dict = {"masks": {}, "train": train}

        def drop(x, name):
            if not use_drop:
                return x
            if masks is not None:
                m = masks[name]
            else:
                m = (rng.random(x.shape) >= c.dropout) / (1.0 - c.dropout)
            cache["masks"][name] = m
            return x * m

        # stream adaptation + dropout
        adapted: dict[str, np.ndarray] = {}
        cache["stream"] = {}
        for s in c.active_streams:
            h = np.atleast_2d(np.asarray(streams[s], dtype=np.float64))
            din = STREAM_SPECS[s][1]
            if h.shape[1] != din:
                raise DataError(
                    f"dimension mismatch for stream {s!r}: expected {din}, got {h.shape[1]}"
                )
            u = h @ p[f"A_{s}"].T
            ht = h @ p[f"P_{s}"].T + c.lora_scale * (u @ p[f"B_{s}"].T)
            htd = drop(ht, f"drop_stream_{s}")
            cache["stream"][s] = {"h": h, "u": u}
            adapted[s] = htd

        # intra-modal fusion
        zs = {}
        cache["intra"] = {}
        for m in c.active_modalities:
            names = MODALITY_STREAMS[m]
            H = np.stack([adapted[s] for s in names], axis=1)  # (B, N, d)
            scores = H @ p[f"w_intra_{m}"]
            alpha = _softmax(scores)
            zs[m] = np.einsum("bn,bnd->bd", alpha, H)
            cache["intra"][m] = {"H": H, "alpha": alpha}

        # inter-modal gating
        mods = c.active_modalities
        gate_scores = np.stack(
            [zs[m] @ p[f"v_gate_{m}"] + p[f"b_gate_{m}"][0] for m in mods], axis=1
        )
        g = _softmax(gate_scores)
        Z = np.stack([zs[m] for m in mods], axis=1)  # (B, M, d)
        X = g[:, :, None] * Z + p["pos_embed"][None, :, :]
        cache["inter"] = {"Z": Z, "g": g}

        # transformer stack (pre-norm)
        H_heads = c.n_heads
        dh = c.shared_dim // H_heads
        cache["layers"] = []
        for l in range(c.n_layers):
            lc: dict = {"X_in": X}
            Y, ln1 = _layernorm(X, p[f"L{l}_ln1_g"], p[f"L{l}_ln1_b"])
            lc["ln1"] = ln1
            Q = _split_heads(Y @ p[f"L{l}_Wq"].T, H_heads)
            K = _split_heads(Y @ p[f"L{l}_Wk"].T, H_heads)
            V = _split_heads(Y @ p[f"L{l}_Wv"].T, H_heads)
            S = Q @ K.transpose(0, 1, 3, 2) / np.sqrt(dh)
            A = _softmax(S)
            O = _merge_heads(A @ V)
            O2 = O @ p[f"L{l}_Wo"].T
            O2d = drop(O2, f"drop_attn_{l}")
            X = X + O2d
            lc.update(Y=Y, Q=Q, K=K, V=V, A=A, O=O, X_mid=X)
            Y2, ln2 = _layernorm(X, p[f"L{l}_ln2_g"], p[f"L{l}_ln2_b"])
            lc["ln2"] = ln2
            F1 = Y2 @ p[f"L{l}_W1"].T + p[f"L{l}_b1"]
            R = np.maximum(F1, 0.0)
            F2 = R @ p[f"L{l}_W2"].T + p[f"L{l}_b2"]
            F2d = drop(F2, f"drop_ffn_{l}")
            X = X + F2d
            lc.update(Y2=Y2, F1=F1, R=R)
            cache["layers"].append(lc)

        pool = X.mean(axis=1)
        logits = pool @ p["head_w"] + p["head_b"][0]
        s_out = 1.0 / (1.0 + np.exp(-logits))
        cache.update(pool=pool, s=s_out)
        return s_out, cache

    def backward(self, cache: dict, d_score: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of the scalar loss wrt every parameter, given dL/d(score)."""
        if "s" not in cache:
            raise NumericError("stale or incomplete forward cache")
        c = self.config
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        masks = cache["masks"]

        def undrop(gx, name):
            return gx * masks[name] if name in masks else gx

        s_out = cache["s"]
        dlogits = np.asarray(d_score, dtype=np.float64) * s_out * (1.0 - s_out)
        pool = cache["pool"]
        grads["head_w"] += pool.T @ dlogits
        grads["head_b"] += np.array([dlogits.sum()])
        T = len(c.active_modalities)
        dX = np.repeat(
            (dlogits[:, None] * p["head_w"][None, :])[:, None, :] / T, T, axis=1
        )

        dh_dim = c.shared_dim // c.n_heads
        for l in reversed(range(c.n_layers)):
            lc = cache["layers"][l]
            # FFN block
            dF2 = undrop(dX, f"drop_ffn_{l}")
            grads[f"L{l}_W2"] += np.einsum("btd,btf->df", dF2, lc["R"])
            grads[f"L{l}_b2"] += dF2.sum(axis=(0, 1))
            dR = dF2 @ p[f"L{l}_W2"]
            dF1 = dR * (lc["F1"] > 0.0)
            grads[f"L{l}_W1"] += np.einsum("btf,btd->fd", dF1, lc["Y2"])
            grads[f"L{l}_b1"] += dF1.sum(axis=(0, 1))
            dY2 = dF1 @ p[f"L{l}_W1"]
            dXmid, dg2, db2 = _layernorm_backward(dY2, lc["ln2"], p[f"L{l}_ln2_g"])
            grads[f"L{l}_ln2_g"] += dg2
            grads[f"L{l}_ln2_b"] += db2
            dX = dX + dXmid
            # attention block
            dO2 = undrop(dX, f"drop_attn_{l}")
            grads[f"L{l}_Wo"] += np.einsum("btd,bte->de", dO2, lc["O"])
            dO = _split_heads(dO2 @ p[f"L{l}_Wo"], c.n_heads)
            A, V, Q, K = lc["A"], lc["V"], lc["Q"], lc["K"]
            dA = dO @ V.transpose(0, 1, 3, 2)
            dV = A.transpose(0, 1, 3, 2) @ dO
            dS = _softmax_backward(dA, A)
            dQ = dS @ K / np.sqrt(dh_dim)
            dK = dS.transpose(0, 1, 3, 2) @ Q / np.sqrt(dh_dim)
            dY = np.zeros_like(lc["Y"])
            for W_name, dproj in (("Wq", dQ), ("Wk", dK), ("Wv", dV)):
                dm = _merge_heads(dproj)
                grads[f"L{l}_{W_name}"] += np.einsum("btd,bte->de", dm, lc["Y"])
                dY += dm @ p[f"L{l}_{W_name}"]
            dXin, dg1, db1 = _layernorm_backward(dY, lc["ln1"], p[f"L{l}_ln1_g"])
            grads[f"L{l}_ln1_g"] += dg1
            grads[f"L{l}_ln1_b"] += db1
            dX = dX + dXin

        grads["pos_embed"] += dX.sum(axis=0)
        Z, g = cache["inter"]["Z"], cache["inter"]["g"]
        dZ = g[:, :, None] * dX
        dg = np.einsum("bmd,bmd->bm", dX, Z)
        dgs = _softmax_backward(dg, g)
        mods = c.active_modalities
        dz = {}
        for i, m in enumerate(mods):
            grads[f"v_gate_{m}"] += dgs[:, i] @ Z[:, i, :]
            grads[f"b_gate_{m}"] += np.array([dgs[:, i].sum()])
            dz[m] = dZ[:, i, :] + dgs[:, i:i + 1] * p[f"v_gate_{m}"][None, :]

        dadapted: dict[str, np.ndarray] = {}
        for m in mods:
            ic = cache["intra"][m]
            H, alpha = ic["H"], ic["alpha"]
            dH = alpha[:, :, None] * dz[m][:, None, :]
            dalpha = np.einsum("bd,bnd->bn", dz[m], H)
            dscores = _softmax_backward(dalpha, alpha)
            grads[f"w_intra_{m}"] += np.einsum("bn,bnd->d", dscores, H)
            dH += dscores[:, :, None] * p[f"w_intra_{m}"][None, None, :]
            for i, s in enumerate(MODALITY_STREAMS[m]):
                dadapted[s] = dH[:, i, :]

        scale = c.lora_scale
        for s in c.active_streams:
            sc = cache["stream"][s]
            dht = undrop(dadapted[s], f"drop_stream_{s}")
            grads[f"P_{s}"] += dht.T @ sc["h"]
            grads[f"B_{s}"] += scale * dht.T @ sc["u"]
            du = scale * dht @ p[f"B_{s}"]
            grads[f"A_{s}"] += du.T @ sc["h"]

        for name in self.frozen:
            grads[name][...] = 0.0
        return grads

    # -- inference helpers ---------------------------------------------------

    def forward(self, bundle, mode: str = "eval", rng=None) -> float:
        """Normalized score in (0, 1) for a single embedding bundle."""
        streams = {s: getattr(bundle, s)[None, :] for s in self.config.active_streams}
        s_out, _ = self.forward_batch(streams, train=(mode == "train"), rng=rng)
        return float(s_out[0])

    def predict(self, manifest: Manifest, clip_ids) -> np.ndarray:
        """Rescaled DubScore in (1, 5) per clip, eval mode."""
        streams = batch_from_manifest(manifest, clip_ids, self.config.active_streams)
        s_out, _ = self.forward_batch(streams, train=False)
        return 1.0 + 4.0 * s_out

    def clone(self) -> "FusionNetwork":
        other = FusionNetwork.__new__(FusionNetwork)
        other.config = self.config
        other.frozen = set(self.frozen)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(d_out: np.ndarray, sm: np.ndarray) -> np.ndarray:
    return sm * (d_out - np.sum(d_out * sm, axis=-1, keepdims=True))


def _layernorm(x, gamma, beta, eps: float = 1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, {"xhat": xhat, "inv": inv}


def _layernorm_backward(dy, ln_cache, gamma):
    xhat, inv = ln_cache["xhat"], ln_cache["inv"]
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def batch_from_manifest(manifest: Manifest, clip_ids, stream_names) -> dict[str, np.ndarray]:
    rows = [manifest.row(c) for c in clip_ids]
    return {s: manifest.streams[s][rows].astype(np.float64) for s in stream_names}


# ---------------------------------------------------------------------------
# training

class AdamState:
    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr, frozen, beta1=0.9, beta2=0.999, eps=1e-8):
        self.t += 1
        for k in params:
            if k in frozen:
                continue
            g = grads[k]
            self.m[k] = beta1 * self.m[k] + (1 - beta1) * g
            self.v[k] = beta2 * self.v[k] + (1 - beta2) * g * g
            mh = self.m[k] / (1 - beta1**self.t)
            vh = self.v[k] / (1 - beta2**self.t)
            params[k] -= lr * mh / (np.sqrt(vh) + eps)


def normalize_mos(y) -> np.ndarray:
    """[1, 5] MOS target -> (0, 1) training target."""
    return (np.asarray(y, dtype=np.float64) - 1.0) / 4.0


def train(network: FusionNetwork, manifest: Manifest, labels: dict[str, float],
          config: NetworkConfig | None = None) -> list[float]:
    """MSE training with Adam on [1, 5]-scale labels for the given clips.

    Mutates the network in place; returns the per-epoch mean batch loss trace.
    Deterministic given config.seed (shuffle and dropout streams are derived
    from it). Raises NumericError naming the batch if the loss goes NaN.
    """
    cfg = config or network.config
    clip_ids = sorted(labels)
    missing = [c for c in clip_ids if c not in {r.clip_id for r in manifest.records}]
    if missing:
        raise DataError(f"labels reference unknown clips: {missing[:3]}")
    if not clip_ids:
        raise DataError("no labeled clips to train on")
    streams_all = batch_from_manifest(manifest, clip_ids, network.config.active_streams)
    targets = normalize_mos([labels[c] for c in clip_ids])

    shuffle_rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)
    adam = AdamState(network.params)
    n = len(clip_ids)
    trace = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            batch = {s: a[idx] for s, a in streams_all.items()}
            t = targets[idx]
            s_out, cache = network.forward_batch(batch, train=True, rng=drop_rng)
            diff = s_out - t
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise NumericError(
                    f"NaN/inf loss at epoch {epoch}, batch starting at {b0}"
                )
            grads = network.backward(cache, 2.0 * diff / len(idx))
            adam.step(network.params, grads, cfg.learning_rate, network.frozen)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return trace


def finetune(network: FusionNetwork, manifest: Manifest, human_mos: dict[str, float],
             config: NetworkConfig | None = None, train_fraction: float = 0.8,
             split_seed: int = 0) -> tuple[list[float], dict]:
    """Continue training on human MOS for the rated subset, reporting held-out
    metrics on the complementary split. Mutates the network in place."""
    from .eval_metrics import mse as _mse, pcc as _pcc, r2 as _r2, srcc as _srcc

    ids = sorted(human_mos)
    if not ids:
        raise DataError("no human-rated clips for fine-tuning")
    train_ids, test_ids = holdout_split(ids, train_fraction, split_seed)
    assert not set(train_ids) & set(test_ids)
    trace = train(network, manifest, {c: human_mos[c] for c in train_ids}, config)
    preds = network.predict(manifest, test_ids)
    truth = np.array([human_mos[c] for c in test_ids])
    report = {
        "n_train": len(train_ids),
        "n_test": len(test_ids),
        "pcc": _pcc(preds, truth),
        "srcc": _srcc(preds, truth),
        "mse": _mse(preds, truth),
        "r2": _r2(preds, truth),
    }
    return trace, report


def with_overrides(config: NetworkConfig, **kwargs) -> NetworkConfig:
    return dataclasses.replace(config, **kwargs)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(network: FusionNetwork, path: Path) -> None:
    cfg_json = json.dumps(dataclasses.asdict(network.config), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        names = sorted(network.params)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            nb = name.encode()
            arr = np.ascontiguousarray(network.params[name], dtype="<f4")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes())


def load_checkpoint(path: Path) -> FusionNetwork:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"bad checkpoint magic in {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", f.read(4))
        config = NetworkConfig(**json.loads(f.read(cfg_len)))
        network = FusionNetwork(config)
        (n_params,) = struct.unpack("<I", f.read(4))
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            if name not in network.params or network.params[name].shape != shape:
                raise DataError(f"checkpoint parameter mismatch: {name} {shape}")
            network.params[name] = data.astype(np.float64)
    return network
