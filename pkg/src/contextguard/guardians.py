"""Per-category autoencoders over context profiles, reconstruction-error
scoring, and threshold calibration.

An autoencoder sees a (5, D) profile: the raw region features on one row
and the four gate vectors below. The encoder compresses the node row and
the gate block separately, mixes them through two 1-D convolutions that
treat the compressed rows as channels, then squeezes through two fully
connected bottleneck layers; the decoder mirrors the encoder. Training
minimizes SmoothL1 between input and reconstruction, so a profile that
does not fit the category's learned distribution scores high.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .bundle import read_bundle, write_bundle
from .errors import (
    CorpusFormatError,
    InsufficientProfilesError,
    ShapeMismatchError,
)
from .numkit import (
    OptimizerState,
    init_weight,
    optimizer_step,
    smooth_l1,
    smooth_l1_grad,
)
from .sceme import ContextProfile, profiles_to_array

AE_FORMAT = "autoencoder"
THRESHOLDS_FORMAT = "thresholds"
PROFILE_ROWS = 5
CONV_K = 3
CONV_CH1 = 4
CONV_CH2 = 2


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class AutoEncoder:
    category: int
    feature_dim: int
    params: dict[str, np.ndarray]
    trained: bool = False
    node_only: bool = False

    @property
    def bottleneck(self) -> int:
        return self.feature_dim // 4


def _check_dim(d: int) -> None:
    if d % 4 != 0 or d < 8:
        raise ShapeMismatchError(
            f"autoencoder needs feature_dim divisible by 4 and >= 8, got {d}"
        )


def init_autoencoder(
    category: int, feature_dim: int, seed: int, node_only: bool = False
) -> AutoEncoder:
    """Fresh parameters. Widths: node branch D -> D/2, edge branch 4D -> D,
    two conv mixing layers over 3 channels of length D/2, bottleneck D/4."""
    _check_dim(feature_dim)
    d = feature_dim
    half, quarter = d // 2, d // 4
    rng = np.random.default_rng(np.random.SeedSequence([seed, category, 0xAE]))
    p = {
        "enc_node_w": init_weight(rng, half, d),
        "enc_node_b": np.zeros(half),
        "enc_edge_w": init_weight(rng, d, 4 * d),
        "enc_edge_b": np.zeros(d),
        "conv1_w": init_weight(rng, CONV_CH1, 3 * CONV_K).reshape(CONV_CH1, 3, CONV_K),
        "conv1_b": np.zeros(CONV_CH1),
        "conv2_w": init_weight(rng, CONV_CH2, CONV_CH1 * CONV_K).reshape(
            CONV_CH2, CONV_CH1, CONV_K
        ),
        "conv2_b": np.zeros(CONV_CH2),
        "fc1_w": init_weight(rng, half, d),
        "fc1_b": np.zeros(half),
        "fc2_w": init_weight(rng, quarter, half),
        "fc2_b": np.zeros(quarter),
        "dec_fc1_w": init_weight(rng, half, quarter),
        "dec_fc1_b": np.zeros(half),
        "dec_fc2_w": init_weight(rng, d, half),
        "dec_fc2_b": np.zeros(d),
        "dec_conv1_w": init_weight(rng, CONV_CH1, CONV_CH2 * CONV_K).reshape(
            CONV_CH1, CONV_CH2, CONV_K
        ),
        "dec_conv1_b": np.zeros(CONV_CH1),
        "dec_conv2_w": init_weight(rng, 3, CONV_CH1 * CONV_K).reshape(
            3, CONV_CH1, CONV_K
        ),
        "dec_conv2_b": np.zeros(3),
        "dec_node_w": init_weight(rng, d, half),
        "dec_node_b": np.zeros(d),
        "dec_edge_w": init_weight(rng, 4 * d, d),
        "dec_edge_b": np.zeros(4 * d),
    }
    return AutoEncoder(
        category=category, feature_dim=d, params=p, trained=False, node_only=node_only
    )


# ---------------------------------------------------------------------------
# Conv1d (same padding, kernel 3, channels-first)
# ---------------------------------------------------------------------------


def _conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (B, C, L), w (O, C, K) -> (B, O, L) with zero same-padding."""
    pad = CONV_K // 2
    xpad = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    windows = sliding_window_view(xpad, CONV_K, axis=2)  # (B, C, L, K)
    return np.einsum("bclt,oct->bol", windows, w) + b[None, :, None]


def _conv1d_backward(
    d_out: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dw, db) for _conv1d."""
    pad = CONV_K // 2
    length = x.shape[2]
    xpad = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    windows = sliding_window_view(xpad, CONV_K, axis=2)
    dw = np.einsum("bol,bclt->oct", d_out, windows)
    db = d_out.sum(axis=(0, 2))
    dxpad = np.zeros_like(xpad)
    for t in range(CONV_K):
        dxpad[:, :, t : t + length] += np.einsum("bol,oc->bcl", d_out, w[:, :, t])
    return dxpad[:, :, pad : pad + length], dw, db


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _prepare_input(ae: AutoEncoder, profiles: np.ndarray) -> np.ndarray:
    x = np.asarray(profiles, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None, ...]
    if x.shape[1:] != (PROFILE_ROWS, ae.feature_dim):
        raise ShapeMismatchError(
            f"profiles {x.shape[1:]}, expected ({PROFILE_ROWS}, {ae.feature_dim})"
        )
    if ae.node_only:
        x = x.copy()
        x[:, 1:, :] = 0.0  # gates excluded; only the node row carries signal
    return x


def _forward(ae: AutoEncoder, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """x (B, 5, D) -> reconstruction (B, 5, D) and a cache for backward."""
    p = ae.params
    d = ae.feature_dim
    half = d // 2
    b = x.shape[0]

    node = x[:, 0, :]
    edge = x[:, 1:, :].reshape(b, 4 * d)
    zn = np.tanh(node @ p["enc_node_w"].T + p["enc_node_b"])  # (B, D/2)
    ze = np.tanh(edge @ p["enc_edge_w"].T + p["enc_edge_b"])  # (B, D)
    u = np.stack([zn, ze[:, :half], ze[:, half:]], axis=1)  # (B, 3, L)
    c1 = np.tanh(_conv1d(u, p["conv1_w"], p["conv1_b"]))
    c2 = np.tanh(_conv1d(c1, p["conv2_w"], p["conv2_b"]))
    flat = c2.reshape(b, d)
    z1 = np.tanh(flat @ p["fc1_w"].T + p["fc1_b"])
    z2 = np.tanh(z1 @ p["fc2_w"].T + p["fc2_b"])  # bottleneck (B, D/4)

    y1 = np.tanh(z2 @ p["dec_fc1_w"].T + p["dec_fc1_b"])
    y2 = np.tanh(y1 @ p["dec_fc2_w"].T + p["dec_fc2_b"])
    v = y2.reshape(b, CONV_CH2, half)
    d1 = np.tanh(_conv1d(v, p["dec_conv1_w"], p["dec_conv1_b"]))
    d2 = np.tanh(_conv1d(d1, p["dec_conv2_w"], p["dec_conv2_b"]))  # (B, 3, L)
    node_hat = d2[:, 0, :] @ p["dec_node_w"].T + p["dec_node_b"]  # (B, D)
    edge_in = d2[:, 1:, :].reshape(b, d)
    edge_hat = edge_in @ p["dec_edge_w"].T + p["dec_edge_b"]  # (B, 4D)

    recon = np.concatenate([node_hat[:, None, :], edge_hat.reshape(b, 4, d)], axis=1)
    cache = {
        "x": x, "node": node, "edge": edge, "zn": zn, "ze": ze, "u": u,
        "c1": c1, "c2": c2, "flat": flat, "z1": z1, "z2": z2,
        "y1": y1, "y2": y2, "v": v, "d1": d1, "d2": d2, "edge_in": edge_in,
    }
    return recon, cache


def loss_and_grads(
    ae: AutoEncoder, profiles: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """SmoothL1 reconstruction loss and gradients over a batch."""
    x = _prepare_input(ae, profiles)
    p = ae.params
    d = ae.feature_dim
    half = d // 2
    bsz = x.shape[0]
    recon, cache = _forward(ae, x)
    loss = smooth_l1(recon, x)
    d_recon = smooth_l1_grad(recon, x)

    d_node_hat = d_recon[:, 0, :]
    d_edge_hat = d_recon[:, 1:, :].reshape(bsz, 4 * d)
    grads = {
        "dec_node_w": d_node_hat.T @ cache["d2"][:, 0, :],
        "dec_node_b": d_node_hat.sum(axis=0),
        "dec_edge_w": d_edge_hat.T @ cache["edge_in"],
        "dec_edge_b": d_edge_hat.sum(axis=0),
    }
    d_d2 = np.empty_like(cache["d2"])
    d_d2[:, 0, :] = d_node_hat @ p["dec_node_w"]
    d_d2[:, 1:, :] = (d_edge_hat @ p["dec_edge_w"]).reshape(bsz, CONV_CH2, half)

    d_pre = d_d2 * (1.0 - cache["d2"] ** 2)
    d_d1, grads["dec_conv2_w"], grads["dec_conv2_b"] = _conv1d_backward(
        d_pre, cache["d1"], p["dec_conv2_w"]
    )
    d_pre = d_d1 * (1.0 - cache["d1"] ** 2)
    d_v, grads["dec_conv1_w"], grads["dec_conv1_b"] = _conv1d_backward(
        d_pre, cache["v"], p["dec_conv1_w"]
    )
    d_y2 = d_v.reshape(bsz, d) * (1.0 - cache["y2"] ** 2)
    grads["dec_fc2_w"] = d_y2.T @ cache["y1"]
    grads["dec_fc2_b"] = d_y2.sum(axis=0)
    d_y1 = (d_y2 @ p["dec_fc2_w"]) * (1.0 - cache["y1"] ** 2)
    grads["dec_fc1_w"] = d_y1.T @ cache["z2"]
    grads["dec_fc1_b"] = d_y1.sum(axis=0)

    d_z2 = (d_y1 @ p["dec_fc1_w"]) * (1.0 - cache["z2"] ** 2)
    grads["fc2_w"] = d_z2.T @ cache["z1"]
    grads["fc2_b"] = d_z2.sum(axis=0)
    d_z1 = (d_z2 @ p["fc2_w"]) * (1.0 - cache["z1"] ** 2)
    grads["fc1_w"] = d_z1.T @ cache["flat"]
    grads["fc1_b"] = d_z1.sum(axis=0)
    d_flat = d_z1 @ p["fc1_w"]

    d_c2 = d_flat.reshape(bsz, CONV_CH2, half) * (1.0 - cache["c2"] ** 2)
    d_c1, grads["conv2_w"], grads["conv2_b"] = _conv1d_backward(
        d_c2, cache["c1"], p["conv2_w"]
    )
    d_u, grads["conv1_w"], grads["conv1_b"] = _conv1d_backward(
        d_c1 * (1.0 - cache["c1"] ** 2), cache["u"], p["conv1_w"]
    )

    d_zn = d_u[:, 0, :] * (1.0 - cache["zn"] ** 2)
    d_ze = np.concatenate([d_u[:, 1, :], d_u[:, 2, :]], axis=1) * (
        1.0 - cache["ze"] ** 2
    )
    grads["enc_node_w"] = d_zn.T @ cache["node"]
    grads["enc_node_b"] = d_zn.sum(axis=0)
    grads["enc_edge_w"] = d_ze.T @ cache["edge"]
    grads["enc_edge_b"] = d_ze.sum(axis=0)
    return loss, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class AutoencoderTrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-4
    batch_size: int = 32
    min_profiles: int = 200
    plateau_patience: int = 2
    plateau_factor: float = 0.1
    node_only: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def train_autoencoder(
    category: int,
    profiles: list[ContextProfile] | np.ndarray,
    hyper: AutoencoderTrainConfig,
) -> AutoEncoder:
    """Train one category's autoencoder on its benign profiles.

    Refuses categories with fewer than `min_profiles` profiles. The
    learning rate drops by `plateau_factor` whenever the epoch loss has not
    improved for `plateau_patience` epochs. Zero epochs returns the
    initialized model flagged untrained.
    """
    x = profiles if isinstance(profiles, np.ndarray) else profiles_to_array(profiles)
    if len(x) < hyper.min_profiles:
        raise InsufficientProfilesError(
            f"category {category}: {len(x)} profiles < minimum {hyper.min_profiles}"
        )
    ae = init_autoencoder(
        category, x.shape[2], seed=hyper.seed, node_only=hyper.node_only
    )
    if hyper.epochs == 0:
        return ae
    state = OptimizerState(kind="adam", learning_rate=hyper.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, category, 0xAE7]))
    best = math.inf
    stall = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), hyper.batch_size):
            batch = x[order[start : start + hyper.batch_size]]
            loss, grads = loss_and_grads(ae, batch)
            optimizer_step(ae.params, grads, state)
            total += loss * len(batch)
        epoch_loss = total / len(x)
        if epoch_loss < best - 1e-12:
            best = epoch_loss
            stall = 0
        else:
            stall += 1
            if stall >= hyper.plateau_patience:
                state.learning_rate *= hyper.plateau_factor
                stall = 0
    ae.trained = True
    return ae


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def reconstruction_errors(
    ae: AutoEncoder, profiles: np.ndarray | list[ContextProfile]
) -> np.ndarray:
    """Per-profile SmoothL1 reconstruction error, (B,)."""
    x = profiles if isinstance(profiles, np.ndarray) else profiles_to_array(profiles)
    x = _prepare_input(ae, x)
    recon, _ = _forward(ae, x)
    d = recon - x
    a = np.abs(d)
    per = np.where(a <= 1.0, 0.5 * d * d, a - 0.5)
    return per.mean(axis=(1, 2))


def reconstruction_error(ae: AutoEncoder, profile: ContextProfile | np.ndarray) -> float:
    """Anomaly score of a single context profile; deterministic."""
    mat = profile.to_matrix() if isinstance(profile, ContextProfile) else profile
    return float(reconstruction_errors(ae, mat[None, ...])[0])


# ---------------------------------------------------------------------------
# Threshold calibration
# ---------------------------------------------------------------------------


def threshold_at_fpr(errors: np.ndarray, target_fpr: float) -> float:
    """Smallest threshold whose exceedance rate on `errors` is at most
    target_fpr, using the strict `error > threshold` flagging rule.
    Thresholds are clamped to be finite and non-negative."""
    e = np.sort(np.asarray(errors, dtype=float))[::-1]
    n = len(e)
    if n == 0:
        raise ValueError("no errors to calibrate on")
    if not (0.0 <= target_fpr <= 1.0):
        raise ValueError("target_fpr must lie in [0, 1]")
    allowed = int(math.floor(target_fpr * n + 1e-12))
    if allowed >= n:
        return 0.0
    return max(0.0, float(e[allowed]))


@dataclass
class ThresholdTable:
    """Per-category (or single global) reconstruction-error cutoffs and the
    benign FPR they were calibrated at."""

    thresholds: dict[int, float]
    target_fpr: float
    mode: str = "per_category"  # or "global"
    excluded: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        for cat, t in self.thresholds.items():
            if not (np.isfinite(t) and t >= 0):
                raise ValueError(f"threshold for category {cat} must be finite >= 0")

    def for_category(self, category: int) -> float:
        if self.mode == "global":
            return self.thresholds[-1]
        return self.thresholds[category]

    def has_category(self, category: int) -> bool:
        return self.mode == "global" or category in self.thresholds


def calibrate_thresholds(
    autoencoders: dict[int, AutoEncoder],
    benign_profiles: dict[int, list[ContextProfile]],
    target_fpr: float,
    mode: str = "per_category",
) -> ThresholdTable:
    """Thresholds from held-out benign reconstruction errors.

    Categories without held-out profiles are excluded and reported in the
    table. Global mode pools every category's errors into one cutoff
    (stored under key -1).
    """
    if mode not in ("per_category", "global"):
        raise ValueError(f"unknown threshold mode {mode!r}")
    per_cat_errors: dict[int, np.ndarray] = {}
    excluded = []
    for cat in sorted(autoencoders):
        profs = benign_profiles.get(cat, [])
        if len(profs) == 0:
            excluded.append(cat)
            continue
        per_cat_errors[cat] = reconstruction_errors(autoencoders[cat], profs)
    if not per_cat_errors:
        raise ValueError("no held-out benign profiles for any category")
    if mode == "global":
        pooled = np.concatenate(list(per_cat_errors.values()))
        thresholds = {-1: threshold_at_fpr(pooled, target_fpr)}
    else:
        thresholds = {
            cat: threshold_at_fpr(errs, target_fpr)
            for cat, errs in per_cat_errors.items()
        }
    return ThresholdTable(
        thresholds=thresholds, target_fpr=target_fpr, mode=mode, excluded=excluded
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_autoencoder(ae: AutoEncoder, path) -> None:
    meta = {
        "format": AE_FORMAT,
        "category": ae.category,
        "feature_dim": ae.feature_dim,
        "trained": ae.trained,
        "node_only": ae.node_only,
    }
    write_bundle(path, meta, ae.params)


def load_autoencoder(path) -> AutoEncoder:
    meta, arrays = read_bundle(path, expect_format=AE_FORMAT)
    ref = init_autoencoder(
        int(meta["category"]), int(meta["feature_dim"]), seed=0,
        node_only=bool(meta["node_only"]),
    )
    for name, arr in ref.params.items():
        if name not in arrays:
            raise CorpusFormatError(f"autoencoder file missing {name!r}")
        if arrays[name].shape != arr.shape:
            raise CorpusFormatError(
                f"autoencoder parameter {name!r}: shape {arrays[name].shape}, "
                f"expected {arr.shape}"
            )
        arr[...] = arrays[name]
    ref.trained = bool(meta["trained"])
    return ref


def save_threshold_table(table: ThresholdTable, path) -> None:
    doc = {
        "format": THRESHOLDS_FORMAT,
        "mode": table.mode,
        "target_fpr": table.target_fpr,
        "thresholds": {str(k): v for k, v in sorted(table.thresholds.items())},
        "excluded": sorted(table.excluded),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_threshold_table(path) -> ThresholdTable:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusFormatError(f"cannot read threshold table {path}: {exc}") from exc
    if doc.get("format") != THRESHOLDS_FORMAT:
        raise CorpusFormatError(f"{path}: not a threshold table")
    return ThresholdTable(
        thresholds={int(k): float(v) for k, v in doc["thresholds"].items()},
        target_fpr=float(doc["target_fpr"]),
        mode=doc["mode"],
        excluded=[int(c) for c in doc.get("excluded", [])],
    )
