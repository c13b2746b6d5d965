"""Two-headed toy networks, their backward passes, and the SGD training loop.

Arrays inside the network are channels-last, ``(nx, ny, nz, C)``. Model
outputs are the LA probability ``y_hat`` and the two scar-head channels
``p_normal`` and ``p_scar``, each an independent logistic.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .distance import DistanceProbabilityMap, dpm_from_labels, normalize_variant, signed_edt
from .errors import DivergenceError, EmptyClassError, GridMismatchError, SesaError
from .losses import ARMS, Targets, Weights, total_loss
from .surface import classify_surface, hard_boundary_mask
from .volume import Volume3, VolumeHeader, read_mvol, write_mvol

KINDS = ("field", "conv")
T_LA = 0.5
# logits are clipped here so outputs stay strictly inside (0, 1)
LOGIT_CLIP = 30.0
LEAK = 0.1  # hidden-layer leaky ReLU slope; plain ReLUs died in the 4-wide decoder
OUT_BIAS = (-2.0, -3.0)  # initial logits of the LA and scar heads

_OFFSETS = list(itertools.product((-1, 0, 1), repeat=3))


# ---------------------------------------------------------------- layers

def _shift_slices(shape, offset):
    """Slices ``(dst, src)`` with ``src = dst + offset`` inside ``shape``."""
    dst, src = [], []
    for n, d in zip(shape, offset):
        dst.append(slice(max(0, -d), n - max(0, d)))
        src.append(slice(max(0, d), n + min(0, d)))
    return tuple(dst), tuple(src)


def _im2col(x):
    """Stack the 27 zero-padded neighbours: ``(X, Y, Z, 27, ci)``."""
    *grid, ci = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((*grid, 27, ci), dtype=x.dtype)
    for o, (a, b, c) in enumerate(_OFFSETS):
        cols[..., o, :] = xp[1 + a:1 + a + grid[0], 1 + b:1 + b + grid[1], 1 + c:1 + c + grid[2]]
    return cols


def conv3(x, w, b):
    """3x3x3 cross-correlation with zero padding, stride 1.

    ``x`` is ``(X, Y, Z, ci)``, ``w`` is ``(3, 3, 3, ci, co)``. Inputs with one
    or two channels go through an explicit patch matrix; otherwise each of the 27 weight
    slices is applied to the whole grid and the product added in shifted.
    """
    *grid, ci = x.shape
    co = w.shape[-1]
    if ci <= 2:
        y = _im2col(x).reshape(-1, 27 * ci) @ w.reshape(27 * ci, co) + b
        return y.reshape(*grid, co)
    x2 = x.reshape(-1, ci)
    wo = w.reshape(27, ci, co)
    y = np.empty((*grid, co), dtype=x.dtype)
    y[...] = b
    for o, off in enumerate(_OFFSETS):
        z = (x2 @ wo[o]).reshape(*grid, co)
        dst, src = _shift_slices(grid, off)
        y[dst] += z[src]
    return y


def conv3_backward(x, w, dy, need_dx=True):
    """Gradients ``(dx, dw, db)`` of :func:`conv3`."""
    *grid, ci = x.shape
    co = w.shape[-1]
    if ci <= 2:
        dw = (_im2col(x).reshape(-1, 27 * ci).T @ dy.reshape(-1, co)).reshape(w.shape)
    else:
        dw = np.empty((27, ci, co), dtype=dy.dtype)
        for o, off in enumerate(_OFFSETS):
            dst, src = _shift_slices(grid, off)
            dw[o] = x[src].reshape(-1, ci).T @ dy[dst].reshape(-1, co)
        dw = dw.reshape(w.shape)
    dx = None
    if need_dx:
        # the adjoint is a correlation with the mirrored, transposed kernel
        flipped = np.ascontiguousarray(w[::-1, ::-1, ::-1].swapaxes(3, 4))
        dx = conv3(dy, flipped, np.zeros(ci, dtype=dy.dtype))
    return dx, dw, dy.reshape(-1, co).sum(axis=0)


def _down_slices(n_out, off):
    # rows 2p + off of the input, read from a copy padded by one on each side
    return slice(1 + off, 1 + off + 2 * n_out - 1, 2)


def conv3_s2(x, w, b):
    """3x3x3 convolution with zero padding and stride 2 (even grids only)."""
    *grid, ci = x.shape
    out = tuple(n // 2 for n in grid)
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((*out, 27, ci), dtype=x.dtype)
    for o, off in enumerate(_OFFSETS):
        cols[..., o, :] = xp[tuple(_down_slices(m, d) for m, d in zip(out, off))]
    y = cols.reshape(-1, 27 * ci) @ w.reshape(27 * ci, -1) + b
    return y.reshape(*out, -1), cols


def conv3_s2_backward(x, w, cols, dy):
    *grid, ci = x.shape
    out = dy.shape[:3]
    co = dy.shape[-1]
    d2 = dy.reshape(-1, co)
    dw = (cols.reshape(-1, 27 * ci).T @ d2).reshape(w.shape)
    dcols = (d2 @ w.reshape(27 * ci, co).T).reshape(*out, 27, ci)
    dxp = np.zeros((grid[0] + 2, grid[1] + 2, grid[2] + 2, ci), dtype=dy.dtype)
    for o, off in enumerate(_OFFSETS):
        dxp[tuple(_down_slices(m, d) for m, d in zip(out, off))] += dcols[..., o, :]
    return dxp[1:-1, 1:-1, 1:-1], dw, d2.sum(axis=0)


def upsample2(x):
    return x.repeat(2, axis=0).repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dy):
    X, Y, Z, c = dy.shape
    return dy.reshape(X // 2, 2, Y // 2, 2, Z // 2, 2, c).sum(axis=(1, 3, 5))


def _leaky(x):
    return np.maximum(x, x * LEAK)  # equals where(x > 0, x, LEAK x) for 0 < LEAK < 1


def _leaky_backward(x, grad):
    return np.where(x > 0, grad, grad * LEAK)


def _sigmoid(logits):
    z = np.clip(logits.astype(np.float64), -LOGIT_CLIP, LOGIT_CLIP)
    return expit(z)


def _sigmoid_backward(logits, prob, grad):
    inside = np.abs(logits) < LOGIT_CLIP
    return np.where(inside, grad * prob * (1.0 - prob), 0.0)


# ---------------------------------------------------------------- models

@dataclass(frozen=True)
class Architecture:
    """Channel widths of the conv model; encoder levels then decoder levels."""

    enc: tuple = (8, 16, 32)
    dec: tuple = (16, 4)  # width at 1/2 resolution, then at full resolution


@dataclass(eq=False)
class ToyModel:
    kind: str
    dims: tuple
    params: dict
    arch: Architecture = field(default_factory=Architecture)
    seed: int = 0
    dtype: str = "float64"

    @property
    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def with_dtype(self, dtype):
        return replace(self, dtype=str(np.dtype(dtype)))


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_model(kind, dims=(32, 32, 32), seed=0, arch=None, dtype="float64"):
    """Fresh model. Field models start at zero logits; conv models get He weights."""
    dims = tuple(int(n) for n in dims)
    if kind not in KINDS:
        raise SesaError(f"unknown model kind {kind!r}; choose from {KINDS}")
    arch = arch or Architecture()
    params = {}
    if kind == "field":
        for name in ("logit_la", "logit_p_normal", "logit_p_scar"):
            params[name] = np.zeros(dims)
        return ToyModel(kind, dims, params, arch, seed, dtype)
    if any(n % 4 for n in dims):
        raise GridMismatchError(f"conv model needs dims divisible by 4, got {dims}")
    rng = np.random.default_rng(seed)
    e1, e2, e3 = arch.enc
    d2, d1 = arch.dec
    layers = [("enc1", 1, e1), ("enc2", e1, e2), ("enc3", e2, e3)]
    for head in ("la", "scar"):
        layers += [(f"{head}.dec2", e3 + e2, d2), (f"{head}.dec1", d2 + e1, d1)]
    for name, ci, co in layers:
        params[f"{name}.w"] = _he(rng, (3, 3, 3, ci, co), 27 * ci)
        params[f"{name}.b"] = np.zeros(co)
    # output biases start at the log-odds of a minority class so the first
    # large steps do not drive the heads into saturation
    for head, co, bias in (("la", 1, OUT_BIAS[0]), ("scar", 2, OUT_BIAS[1])):
        params[f"{head}.out.w"] = _he(rng, (d1, co), d1)
        params[f"{head}.out.b"] = np.full(co, bias)
    return ToyModel(kind, dims, params, arch, seed, dtype)


@dataclass(eq=False)
class ForwardState:
    y_hat: np.ndarray
    p_normal: np.ndarray
    p_scar: np.ndarray
    cache: dict

    @property
    def dpm(self):
        return DistanceProbabilityMap(self.p_normal, self.p_scar, "model")


def _intensity_array(model, intensity):
    x = np.asarray(intensity, dtype=np.float64)
    if x.shape != model.dims:
        raise GridMismatchError(f"intensity grid {x.shape} != model grid {model.dims}")
    return x


def forward(model, intensity):
    """Run the model on one volume; returns a :class:`ForwardState`."""
    x = _intensity_array(model, intensity)
    if model.kind == "field":
        p = model.params
        logits = {k: p[k] for k in ("logit_la", "logit_p_normal", "logit_p_scar")}
        probs = {k: _sigmoid(v) for k, v in logits.items()}
        return ForwardState(probs["logit_la"], probs["logit_p_normal"], probs["logit_p_scar"],
                            {"logits": logits, "probs": probs})
    dt = np.dtype(model.dtype)
    p = {k: v.astype(dt, copy=False) for k, v in model.params.items()}
    c = {"p": p, "x": x.astype(dt)[..., None]}
    c["a1"] = conv3(c["x"], p["enc1.w"], p["enc1.b"])
    c["e1"] = _leaky(c["a1"])
    c["a2"], c["cols2"] = conv3_s2(c["e1"], p["enc2.w"], p["enc2.b"])
    c["e2"] = _leaky(c["a2"])
    c["a3"], c["cols3"] = conv3_s2(c["e2"], p["enc3.w"], p["enc3.b"])
    c["e3"] = _leaky(c["a3"])
    outs = {}
    for head in ("la", "scar"):
        h = {}
        h["c2"] = np.concatenate([upsample2(c["e3"]), c["e2"]], axis=-1)
        h["a2"] = conv3(h["c2"], p[f"{head}.dec2.w"], p[f"{head}.dec2.b"])
        h["d2"] = _leaky(h["a2"])
        h["c1"] = np.concatenate([upsample2(h["d2"]), c["e1"]], axis=-1)
        h["a1"] = conv3(h["c1"], p[f"{head}.dec1.w"], p[f"{head}.dec1.b"])
        h["d1"] = _leaky(h["a1"])
        h["logits"] = h["d1"] @ p[f"{head}.out.w"] + p[f"{head}.out.b"]
        h["probs"] = _sigmoid(h["logits"])
        c[head] = h
        outs[head] = h["probs"]
    return ForwardState(outs["la"][..., 0], outs["scar"][..., 0], outs["scar"][..., 1], c)


def backward(model, state, grads):
    """Parameter gradients from output gradients.

    ``grads`` is a :class:`~sesaseg.losses.LossReport` or a tuple
    ``(grad_la, grad_normal, grad_scar)`` with respect to the probabilities.
    """
    if state is None or not state.cache:
        raise SesaError("backward needs the state of a forward pass")
    if hasattr(grads, "grad_la"):
        grads = (grads.grad_la, grads.grad_normal, grads.grad_scar)
    g_la, g_n, g_s = (np.asarray(g, dtype=np.float64) for g in grads)
    c = state.cache
    if model.kind == "field":
        out = {}
        for name, g in zip(("logit_la", "logit_p_normal", "logit_p_scar"), (g_la, g_n, g_s)):
            out[name] = _sigmoid_backward(c["logits"][name], c["probs"][name], g)
        return out

    p = c["p"]
    dt = np.dtype(model.dtype)
    out = {}
    d_e1 = np.zeros_like(c["e1"])
    d_e2 = np.zeros_like(c["e2"])
    d_e3 = np.zeros_like(c["e3"])
    e1c = c["e1"].shape[-1]
    e3c = c["e3"].shape[-1]
    for head, g in (("la", g_la[..., None]), ("scar", np.stack([g_n, g_s], axis=-1))):
        h = c[head]
        d_logits = _sigmoid_backward(h["logits"], h["probs"], g).astype(dt)
        out[f"{head}.out.w"] = h["d1"].reshape(-1, h["d1"].shape[-1]).T @ d_logits.reshape(
            -1, d_logits.shape[-1])
        out[f"{head}.out.b"] = d_logits.reshape(-1, d_logits.shape[-1]).sum(axis=0)
        d_d1 = d_logits @ p[f"{head}.out.w"].T
        d_a1 = _leaky_backward(h["a1"], d_d1)
        d_c1, out[f"{head}.dec1.w"], out[f"{head}.dec1.b"] = conv3_backward(
            h["c1"], p[f"{head}.dec1.w"], d_a1)
        d_d2 = upsample2_backward(d_c1[..., : d_c1.shape[-1] - e1c])
        d_e1 += d_c1[..., d_c1.shape[-1] - e1c:]
        d_a2 = _leaky_backward(h["a2"], d_d2)
        d_c2, out[f"{head}.dec2.w"], out[f"{head}.dec2.b"] = conv3_backward(
            h["c2"], p[f"{head}.dec2.w"], d_a2)
        d_e3 += upsample2_backward(d_c2[..., :e3c])
        d_e2 += d_c2[..., e3c:]
    d_a3 = _leaky_backward(c["a3"], d_e3)
    d_e2_in, out["enc3.w"], out["enc3.b"] = conv3_s2_backward(c["e2"], p["enc3.w"], c["cols3"], d_a3)
    d_e2 += d_e2_in
    d_a2 = _leaky_backward(c["a2"], d_e2)
    d_e1_in, out["enc2.w"], out["enc2.b"] = conv3_s2_backward(c["e1"], p["enc2.w"], c["cols2"], d_a2)
    d_e1 += d_e1_in
    d_a1 = _leaky_backward(c["a1"], d_e1)
    _, out["enc1.w"], out["enc1.b"] = conv3_backward(c["x"], p["enc1.w"], d_a1, need_dx=False)
    return {k: np.asarray(v, dtype=np.float64) for k, v in out.items()}


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedules and objective of one training run.

    Defaults are desk-scale: per-voxel mean losses, base rate 0.05 and a
    divide-by-10 step every 400 iterations. :meth:`paper_schedule` restores
    the 1e-3 base rate and the 4000-iteration step.
    """

    iterations: int = 500
    batch_size: int = 1
    lr: float = 0.05
    lr_step: int = 400
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    weights: Weights = field(default_factory=Weights)
    arm: str = "sesa"
    m2_mode: str = "differentiable"
    metric: str = "l2"
    variant: str = "exp"
    beta: float = 1.0
    clip: float = 50.0
    reduction: str = "mean"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise SesaError("iterations must be non-negative")
        if self.batch_size != 1:
            raise SesaError("only full-volume batches of one case are supported")
        if self.arm not in ARMS:
            raise SesaError(f"unknown arm {self.arm!r}; choose from {ARMS}")
        if self.reduction not in ("sum", "mean"):
            raise SesaError("reduction must be 'sum' or 'mean'")
        if self.lr <= 0 or self.lr_step < 1 or not 0 < self.lr_factor <= 1:
            raise SesaError("invalid learning-rate schedule")
        object.__setattr__(self, "variant", normalize_variant(self.variant))

    def paper_schedule(self):
        return replace(self, lr=1e-3, lr_step=4000)

    def lr_at(self, iteration):
        return self.lr * self.lr_factor ** (iteration // self.lr_step)

    def to_dict(self):
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["weights"] = Weights(**d.get("weights", {}))
        return cls(**d)


def case_targets(case, beta=1.0, clip=50.0, variant="exp"):
    """Loss targets for one phantom case."""
    la = case.la_label
    return Targets(
        la_label=la.data,
        la_dtm=signed_edt(la, beta, clip).values,
        dpm_target=dpm_from_labels(case.wall_scar_label, variant, beta, clip),
        m1=hard_boundary_mask(la.data).mask,
        wall_scar_label=case.wall_scar_label.data,
    )


LOG_COLUMNS = (
    "iteration", "case_id", "lr", "lambda_la", "lambda_scar", "lambda_m1", "lambda_m2",
    "bce_la", "se_la", "se_scar", "sa_m1", "sa_m2", "bce_scar", "total", "grad_norm",
)


@dataclass(eq=False)
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise SesaError("iteration index must increase")
        self.rows.append(row)

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(float(r[c]))
                        for c in LOG_COLUMNS])
        return buf.getvalue()

    def checksum(self):
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def write(self, path):
        Path(path).write_text(self.to_csv())


def loss_and_grads(model, intensity, targets, config, iteration=0):
    """One forward/backward pass; returns ``(report, state, param_grads)``."""
    state = forward(model, intensity)
    report = total_loss(state.y_hat, state.dpm, targets, config.weights.at(iteration),
                        m2_mode=config.m2_mode, arm=config.arm, metric=config.metric,
                        mean=config.reduction == "mean")
    return report, state, backward(model, state, report)


def train(model, cases, config, log=None, progress=None):
    """SGD with momentum over ``cases``, one case per iteration in round-robin order.

    ``cases`` is a sequence of phantom cases (train split). Returns the
    trained model and its :class:`TrainLog`. A non-finite loss or gradient
    raises :class:`DivergenceError` carrying the last good model.
    """
    cases = list(cases)
    if not cases:
        raise SesaError("training needs at least one case")
    model = model.copy().with_dtype(config.dtype)
    log = log if log is not None else TrainLog()
    targets = [case_targets(c, config.beta, config.clip, config.variant) for c in cases]
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    for it in range(config.iterations):
        k = it % len(cases)
        report, _, grads = loss_and_grads(model, cases[k].intensity, targets[k], config, it)
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if not (np.isfinite(report.total) and np.isfinite(norm)):
            raise DivergenceError(f"non-finite loss at iteration {it}", iteration=it,
                                  checkpoint=model)
        lr = config.lr_at(it)
        log.append(iteration=it, case_id=cases[k].case_id, lr=lr, lambda_la=report.weights["la"],
                   lambda_scar=report.weights["scar"], lambda_m1=report.weights["m1"],
                   lambda_m2=report.weights["m2"], grad_norm=norm, **report.terms())
        for name, g in grads.items():
            v = velocity[name]
            v *= config.momentum
            v += g + config.weight_decay * model.params[name]
            model.params[name] = model.params[name] - lr * v
        if progress is not None:
            progress(it, report)
    return model, log


# ---------------------------------------------------------------- inference

@dataclass(eq=False)
class Inference:
    la_prob: np.ndarray
    la_label: np.ndarray
    dpm: DistanceProbabilityMap
    surface: object  # LabeledSurface on the predicted LA boundary

    def scar_label_volume(self):
        return self.surface.to_label_volume()


def infer_case(model, intensity, spacing=(1.0, 1.0, 1.0), t_la=T_LA):
    """Threshold the LA head and classify its boundary voxels with the scar head."""
    state = forward(model, intensity)
    return infer_from_outputs(state.y_hat, state.dpm, spacing, t_la)


def infer_from_outputs(la_prob, dpm, spacing=(1.0, 1.0, 1.0), t_la=T_LA):
    la_label = (np.asarray(la_prob) > t_la).astype(np.float64)
    if not la_label.any():
        raise EmptyClassError(f"no voxel of the LA probability exceeds {t_la}")
    surface = classify_surface(dpm, hard_boundary_mask(la_label), spacing)
    return Inference(np.asarray(la_prob), la_label, dpm, surface)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "sesaseg-model/1"


def save_checkpoint(model, directory):
    """One MVOL per parameter (flattened to ``(size, 1, 1)``) plus ``model.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(model.params):
        arr = np.asarray(model.params[name], dtype=np.float64)
        vol = Volume3(arr.reshape(-1, 1, 1), (1.0, 1.0, 1.0))
        header = write_mvol(directory / f"{name}.mvol", VolumeHeader.for_volume(vol, "intensity"), vol)
        entries.append({"name": name, "shape": list(arr.shape), "file": f"{name}.mvol",
                        "checksum": header.checksum})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "dims": list(model.dims),
        "arch": {"enc": list(model.arch.enc), "dec": list(model.arch.dec)},
        "seed": model.seed,
        "n_params": model.n_params,
        "params": entries,
    }
    (directory / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_checkpoint(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "model.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SesaError(f"cannot read checkpoint manifest: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise SesaError(f"not a model checkpoint: {manifest.get('format')!r}")
    params = {}
    for e in manifest["params"]:
        _, vol = read_mvol(directory / e["file"])
        params[e["name"]] = vol.data.reshape(e["shape"]).copy()
    arch = Architecture(tuple(manifest["arch"]["enc"]), tuple(manifest["arch"]["dec"]))
    return ToyModel(manifest["kind"], tuple(manifest["dims"]), params, arch, manifest["seed"])
