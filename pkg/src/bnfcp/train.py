"""Training: quantile regressors, BNF transport by per-source Sinkhorn descent, checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .conformal import (
    DivergenceError, GridConfig, QuantilePair, RegressorConfig, bnf_sets, cqr_fit,
)
from .data import DataSet, SourceCollection, StandardizationStats
from .flows import (
    DEFAULT_DEPTH, DEFAULT_HIDDEN, VARIANTS, BnfModel, FlowStack, PlanarFlow1D,
)
from .neural import Adam, Mlp, NonFiniteGradientError
from .ot import EmpiricalDistribution, SinkhornConfig, cost_matrix, exact_w1, sinkhorn, sinkhorn_sample_grad

CHECKPOINT_MAGIC = b"BNFCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is truncated, corrupted or not a checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class TrainingDivergedError(DivergenceError):
    """Non-finite loss or gradient; ``model`` holds the last good parameters."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history


@dataclass
class TrainConfig:
    """Settings of the whole training pipeline.

    ``depth`` and ``hidden`` apply to each branch. ``augment_x=None`` turns
    feature augmentation on exactly when the features are one-dimensional.
    """

    epochs: int = 200
    batch_size: int = 0  # 0 means full batch per source
    learning_rate: float = 1e-3
    depth: int = DEFAULT_DEPTH
    hidden: tuple = DEFAULT_HIDDEN
    variant: str = "augmented"
    seed: int = 0
    alpha: float = 0.1
    strict_split: bool = False
    augment_x: bool | None = None
    init_scale: float = 0.0
    hidden_activation: str = "leaky_relu"
    debias: bool = False  # subtract the self-transport terms (Sinkhorn divergence)
    sinkhorn: SinkhornConfig = field(default_factory=lambda: SinkhornConfig(max_iter=200, tolerance=1e-4))
    regressor: RegressorConfig = field(default_factory=RegressorConfig)

    def __post_init__(self):
        if isinstance(self.sinkhorn, dict):
            self.sinkhorn = SinkhornConfig(**self.sinkhorn)
        if isinstance(self.regressor, dict):
            reg = dict(self.regressor)
            if "hidden" in reg:
                reg["hidden"] = tuple(reg["hidden"])
            self.regressor = RegressorConfig(**reg)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 0 or self.depth < 0 or self.batch_size < 0:
            raise ValueError("epochs, depth and batch_size must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["regressor"]["hidden"] = list(self.regressor.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainHistory:
    """Per-epoch mean Sinkhorn transport cost (before that epoch's step)."""

    loss: list = field(default_factory=list)
    per_source: list = field(default_factory=list)
    final_loss: float | None = None


# ---------------------------------------------------------------------------
# regressors


def train_quantile_regressors(train_sets, alpha: float, cfg: RegressorConfig | None = None) -> QuantilePair:
    """Fit the CQR regressors on the union of the given training sets."""
    sets = [train_sets] if isinstance(train_sets, DataSet) else list(train_sets)
    return cqr_fit(DataSet.concat(sets), alpha, cfg)


# ---------------------------------------------------------------------------
# flow training


def split_calibration(cal: DataSet, seed: int = 0):
    """Random disjoint halves ``(flow_part, conformal_part)`` of a calibration set."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(cal.n)
    half = cal.n // 2
    return cal.subset(np.sort(perm[:half])), cal.subset(np.sort(perm[half:]))


def create_model(cfg: TrainConfig, x_dim: int, n_sources: int, rng=None) -> BnfModel:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    augment = (x_dim == 1) if cfg.augment_x is None else bool(cfg.augment_x)
    return BnfModel.create(cfg.variant, x_dim, rng, cfg.depth, cfg.hidden, augment_x=augment,
                           n_sources=n_sources, last_layer_scale=cfg.init_scale,
                           hidden_activation=cfg.hidden_activation)


def _transport_forward(model: BnfModel, data: DataSet, noise, source_id):
    """Transformed joint rows plus what is needed to backpropagate through both branches."""
    x_in, _ = model._x_input(data.features)
    out_x, inputs_x = model.x_branch.forward_inputs(x_in)
    cond = model.conditioner(data.n, x=data.features, noise=noise, source_id=source_id)
    if model.variant == "plain":
        y_bar, inputs_y = model.y_branch.forward_inputs(data.labels)
        out_y = y_bar
    else:
        out_y, inputs_y = model.y_branch.forward_inputs(np.column_stack([data.labels, cond]))
        y_bar = out_y[:, 0]
    pts = np.column_stack([out_x[:, :model.x_dim], y_bar])
    return pts, (out_x, inputs_x, out_y, inputs_y)


def _transport_backward(model: BnfModel, tape, grad_pts):
    out_x, inputs_x, out_y, inputs_y = tape
    d = model.x_dim
    gx = np.zeros_like(out_x)
    gx[:, :d] = grad_pts[:, :d]
    _, grads_x = model.x_branch.backward(inputs_x, gx)
    if model.variant == "plain":
        _, grads_y = model.y_branch.backward(inputs_y, grad_pts[:, d])
    else:
        gy = np.zeros_like(out_y)
        gy[:, 0] = grad_pts[:, d]
        _, grads_y = model.y_branch.backward(inputs_y, gy)
    return grads_x + grads_y


def _draw_noise(model: BnfModel, rng, n):
    return rng.standard_normal(n) if model.uses_noise else None


def transport_sources(model: BnfModel, sources, rng):
    """Transformed joint rows of every source with a fresh noise draw."""
    out = []
    for k, src in enumerate(sources):
        pts, _ = _transport_forward(model, src, _draw_noise(model, rng, src.n), k)
        out.append(pts)
    return out


def _snapshot(params):
    return [p.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p[...] = s


def train_bnf(sources, calibration: DataSet, cfg: TrainConfig, model: BnfModel | None = None,
              progress=None):
    """Minimize the mean over sources of the Sinkhorn cost between transported source and calibration.

    Each epoch draws fresh noise per row, transports every source, solves
    Sinkhorn against the fixed calibration cloud and backpropagates the
    fixed-plan gradient through both branches; the per-source gradients are
    averaged (in source order) and one Adam step is taken. Returns
    ``(model, history)``.
    """
    sources = sources.sources if isinstance(sources, SourceCollection) else list(sources)
    if not sources or calibration.n == 0:
        raise ValueError("need nonempty sources and calibration data")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = create_model(cfg, calibration.d, len(sources), rng)
    params = model.parameters()
    opt = Adam(cfg.learning_rate)
    target = calibration.joint()
    K = len(sources)
    warm = [None] * K
    warm_self = [None] * K
    warm_target = [None] * K
    w_target = np.full(target.shape[0], 1.0 / target.shape[0])
    target_cost = cost_matrix(target, target) if cfg.debias else None
    history = TrainHistory()
    good = _snapshot(params)
    for epoch in range(cfg.epochs):
        grads = None
        losses = []
        for k, src in enumerate(sources):
            batch = src
            if cfg.batch_size and cfg.batch_size < src.n:
                batch = src.subset(np.sort(rng.choice(src.n, cfg.batch_size, replace=False)))
            pts, tape = _transport_forward(model, batch, _draw_noise(model, rng, batch.n), k)
            if not np.all(np.isfinite(pts)):
                _restore(params, good)
                raise TrainingDivergedError(f"non-finite transport at epoch {epoch}", model, history)
            cost = cost_matrix(pts, target)
            init = warm[k] if batch is src else None
            w_src = np.full(batch.n, 1.0 / batch.n)
            scfg = cfg.sinkhorn
            if cfg.debias:
                # one beta for all three terms, so the divergence vanishes at a perfect match
                scfg = replace(scfg, beta=scfg.resolve_beta(cost))
            plan, dist = sinkhorn(cost, w_src, w_target, scfg, init)
            warm[k] = plan
            g_pts = sinkhorn_sample_grad(plan, pts, target)
            if cfg.debias:
                plan_s, dist_s = sinkhorn(cost_matrix(pts, pts), w_src, w_src, scfg,
                                          warm_self[k] if batch is src else None)
                warm_self[k] = plan_s
                warm_target[k], dist_t = sinkhorn(target_cost, w_target, w_target, scfg, warm_target[k])
                # the symmetric self term contributes through both arguments; half of that is one side
                g_pts = g_pts - sinkhorn_sample_grad(plan_s, pts, pts)
                dist = dist - 0.5 * (dist_s + dist_t)
            losses.append(dist)
            g_pts = g_pts / K
            g = _transport_backward(model, tape, g_pts)
            grads = g if grads is None else [a + b for a, b in zip(grads, g)]
        loss = float(np.mean(losses))
        if not np.isfinite(loss):
            _restore(params, good)
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", model, history)
        history.loss.append(loss)
        history.per_source.append([float(v) for v in losses])
        good = _snapshot(params)
        try:
            opt.step(params, grads)
        except NonFiniteGradientError as exc:
            _restore(params, good)
            raise TrainingDivergedError(f"epoch {epoch}: {exc}", model, history) from exc
        if progress is not None:
            progress(epoch, loss)
    return model, history


def transport_w1(model: BnfModel, sources, calibration: DataSet, seed: int = 0,
                 max_cells: int = 4_000_000) -> float:
    """Mean over sources of the exact W1 between transported source and calibration.

    Sources and calibration must have equal sizes (assignment-problem path).
    """
    rng = np.random.default_rng(seed)
    sources = sources.sources if isinstance(sources, SourceCollection) else list(sources)
    target = EmpiricalDistribution(calibration.joint())
    vals = [exact_w1(EmpiricalDistribution(p), target, max_cells)
            for p in transport_sources(model, sources, rng)]
    return float(np.mean(vals))


def run_inference(model: BnfModel, pair: QuantilePair, tau: float, test: DataSet, grid: GridConfig,
                  seed: int = 0, method: str = "bnf") -> list:
    """Transported prediction sets for every test row (deterministic given ``seed``)."""
    return bnf_sets(model, pair, tau, test.features, grid, run_seed=seed,
                    source_id=test.source_ids if model.variant == "augment-conditioned" else None,
                    method=method)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    model: BnfModel | None
    pair: QuantilePair | None
    stats: StandardizationStats | None
    rng_state: dict | None = None
    epoch: int = 0
    history: list = field(default_factory=list)
    point: object = None  # optional PointRegressor
    extra: dict = field(default_factory=dict)


def _model_header(model: BnfModel) -> dict:
    xb = model.x_branch
    head = {
        "variant": model.variant, "x_dim": model.x_dim, "augment_x": model.augment_x,
        "x_noise_seed": model.x_noise_seed,
        "x_depth": len(xb.layers),
        "hidden": list(xb.layers[0].net.layer_sizes[1:-1]) if xb.layers else [],
        "hidden_activation": xb.layers[0].net.hidden_activation if xb.layers else "leaky_relu",
        "x_masks": [l.mask.tolist() for l in xb.layers],
        "scale_cap": xb.layers[0].scale_cap if xb.layers else 2.0,
        "source_noise_means": None if model.source_noise_means is None else model.source_noise_means.tolist(),
        "projection": None if model.projection is None else model.projection.tolist(),
    }
    if isinstance(model.y_branch, PlanarFlow1D):
        head["y_kind"] = "planar"
        head["planar_units"] = model.y_branch.n_units
        head["planar_margin"] = model.y_branch.margin
    else:
        yb = model.y_branch
        head["y_kind"] = "coupling"
        head["y_depth"] = len(yb.layers)
        head["y_hidden"] = list(yb.layers[0].net.layer_sizes[1:-1]) if yb.layers else []
        head["y_masks"] = [l.mask.tolist() for l in yb.layers]
    return head


def _build_stack(dim, masks, hidden, activation, scale_cap):
    from .flows import CouplingLayer

    layers = []
    for m in masks:
        m = np.asarray(m, dtype=np.int8)
        n_a, n_b = int(m.sum()), int((m == 0).sum())
        layers.append(CouplingLayer(m, Mlp.zeros((n_a, *hidden, 2 * n_b), activation), scale_cap))
    return FlowStack(dim, layers)


def _model_from_header(head: dict) -> BnfModel:
    dim = head["x_dim"] + int(head["augment_x"])
    xb = _build_stack(dim, head["x_masks"], head["hidden"], head["hidden_activation"], head["scale_cap"])
    if head["y_kind"] == "planar":
        yb = PlanarFlow1D.identity(head["planar_units"], head["planar_margin"])
    else:
        yb = _build_stack(2, head["y_masks"], head["y_hidden"], head["hidden_activation"], head["scale_cap"])
    means = head["source_noise_means"]
    proj = head["projection"]
    return BnfModel(head["variant"], head["x_dim"], xb, yb, head["augment_x"], head["x_noise_seed"],
                    None if means is None else np.array(means), None if proj is None else np.array(proj))


def _pair_header(pair: QuantilePair) -> dict:
    return {"alpha": pair.alpha, "sizes": list(pair.h_lo.layer_sizes),
            "hidden_activation": pair.h_lo.hidden_activation,
            "x_mean": pair.x_mean.tolist(), "x_std": pair.x_std.tolist(),
            "y_mean": pair.y_mean, "y_std": pair.y_std}


def _point_header(point) -> dict:
    return {"level": point.level, "sizes": list(point.net.layer_sizes),
            "hidden_activation": point.net.hidden_activation,
            "x_mean": point.x_mean.tolist(), "x_std": point.x_std.tolist(),
            "y_mean": point.y_mean, "y_std": point.y_std}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write a versioned binary checkpoint.

    Layout: 8-byte magic, 1-byte version, little-endian uint64 header
    length, UTF-8 JSON header (configuration, structure and a section table),
    the parameter sections as little-endian float64, and a trailing 16-byte
    BLAKE2b digest of everything before it.
    """
    sections, blocks, offset = [], [], 0

    def add(name, arrays):
        nonlocal offset
        for i, a in enumerate(arrays):
            a = np.ascontiguousarray(a, dtype="<f8")
            sections.append({"name": f"{name}/{i}", "shape": list(a.shape), "offset": offset})
            blocks.append(a.tobytes())
            offset += a.size

    header = {"config": ckpt.config.to_dict(), "epoch": int(ckpt.epoch),
              "history": [float(v) for v in ckpt.history],
              "rng_state": ckpt.rng_state, "extra": ckpt.extra,
              "stats": None if ckpt.stats is None else ckpt.stats.to_dict()}
    if ckpt.model is not None:
        header["model"] = _model_header(ckpt.model)
        add("model", ckpt.model.parameters())
    if ckpt.pair is not None:
        header["pair"] = _pair_header(ckpt.pair)
        add("pair", ckpt.pair.h_lo.parameters() + ckpt.pair.h_hi.parameters())
    if ckpt.point is not None:
        header["point"] = _point_header(ckpt.point)
        add("point", ckpt.point.net.parameters())
    header["sections"] = sections
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]) + struct.pack("<Q", len(hbytes)) + hbytes
    body += b"".join(blocks)
    digest = hashlib.blake2b(body, digest_size=16).digest()
    with open(path, "wb") as fh:
        fh.write(body + digest)


def load_checkpoint(path) -> Checkpoint:
    from .conformal import PointRegressor

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 1 + 8 + 16 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or too short)")
    version = raw[len(CHECKPOINT_MAGIC)]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    body, digest = raw[:-16], raw[-16:]
    if hashlib.blake2b(body, digest_size=16).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted file)")
    pos = len(CHECKPOINT_MAGIC) + 1
    (hlen,) = struct.unpack("<Q", body[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(body[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    payload = np.frombuffer(body[pos + hlen:], dtype="<f8")
    arrays = {}
    for sec in header["sections"]:
        size = int(np.prod(sec["shape"])) if sec["shape"] else 1
        if sec["offset"] + size > payload.size:
            raise CheckpointError(f"{path}: section {sec['name']} runs past the end of the payload")
        arrays[sec["name"]] = payload[sec["offset"]:sec["offset"] + size].reshape(sec["shape"]).astype(np.float64)

    def fill(name, params):
        for i, p in enumerate(params):
            a = arrays.get(f"{name}/{i}")
            if a is None or a.shape != p.shape:
                raise CheckpointError(f"{path}: section {name}/{i} missing or misshapen")
            p[...] = a

    model = pair = point = None
    if "model" in header:
        model = _model_from_header(header["model"])
        fill("model", model.parameters())
    if "pair" in header:
        ph = header["pair"]
        lo = Mlp.zeros(ph["sizes"], ph["hidden_activation"])
        hi = Mlp.zeros(ph["sizes"], ph["hidden_activation"])
        fill("pair", lo.parameters() + hi.parameters())
        pair = QuantilePair(lo, hi, ph["alpha"], np.array(ph["x_mean"]), np.array(ph["x_std"]),
                            ph["y_mean"], ph["y_std"])
    if "point" in header:
        ph = header["point"]
        net = Mlp.zeros(ph["sizes"], ph["hidden_activation"])
        fill("point", net.parameters())
        point = PointRegressor(net, ph["level"], np.array(ph["x_mean"]), np.array(ph["x_std"]),
                               ph["y_mean"], ph["y_std"])
    stats = None if header["stats"] is None else StandardizationStats.from_dict(header["stats"])
    return Checkpoint(TrainConfig.from_dict(header["config"]), model, pair, stats,
                      header["rng_state"], header["epoch"], header["history"], point,
                      header.get("extra", {}))
