"""ADAM training loop with per-epoch resampling, CSV logging and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .control import ClosedLoop
from .diffengine import NumericError, Tensor, gradient_params
from .losses import AdaptiveWeights, compute_residuals, total_loss, update_weights
from .neuralnets import IcnnParams, MinimizerError, MlpParams, SurrogateTriple

LOG_COLUMNS = ("epoch", "f_m", "f_dm", "f_sd1", "f_sd2", "r_m", "r_dm", "r_sd", "loss")
CHECKPOINT_MAGIC = b"nidapbc-checkpoint\n"
CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    """Non-finite loss or residual; carries a diagnostic snapshot."""

    def __init__(self, msg, epoch, sample=None, residuals=None):
        super().__init__(f"epoch {epoch}: {msg}" + (f"; sample {sample}" if sample is not None else ""))
        self.epoch = epoch
        self.sample = sample
        self.residuals = residuals


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 2000
    samples_per_epoch: int = 512
    gamma: float = 0.9999
    alpha: float = 0.01
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    epsilon: float = 0.1
    rho: float = 1.0
    kappa: float | None = None  # defaults to 0.9 * rho
    minimizer_tol: float = 1e-8
    minimizer_iters: int = 500
    checkpoint_every: int = 0
    hidden: tuple = (300, 300, 300)
    grad_clip: float | None = None
    icnn_hidden_scale: float = 1.0
    icnn_quad_scale: float = 1.0
    icnn_floor: float = 1e-2

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.alpha <= 0.0 or self.learning_rate <= 0.0:
            raise ValueError("alpha and learning_rate must be positive")
        if self.epochs < 0 or self.samples_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and samples_per_epoch >= 1")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def kappa_value(self):
        return 0.9 * self.rho if self.kappa is None else self.kappa

    def to_dict(self):
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["kappa"] = self.kappa_value
        return out


def sample_batch(box, N, rng):
    """``N`` states drawn uniformly from the box ``(lo, hi)``."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    if N < 1:
        raise ValueError("N must be >= 1")
    if lo.shape != hi.shape or np.any(hi < lo):
        raise ValueError("empty domain box")
    return rng.uniform(lo, hi, size=(N, lo.size))


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, config):
    """Bias-corrected ADAM, updating ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state counts differ")
    b1, b2 = config.beta1, config.beta2
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - config.learning_rate * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + config.eps_adam)
    return params, state


def _clip(grads, limit):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if limit is None or total <= limit:
        return grads
    return [g * (limit / total) for g in grads]


def init_surrogates(plant, config, rng):
    return SurrogateTriple.init(
        plant.n,
        plant.x_star,
        rng,
        hidden=config.hidden,
        rho=config.rho,
        eps=config.epsilon,
        kappa=config.kappa_value,
        hidden_scale=config.icnn_hidden_scale,
        quad_scale=config.icnn_quad_scale,
        floor=config.icnn_floor,
    )


@dataclass
class TrainResult:
    surrogates: SurrogateTriple
    log: list = field(default_factory=list)
    weights: AdaptiveWeights = None


def train(plant, config, progress=None, checkpoint_path=None):
    """Run the full regimen; returns the trained surrogates and one log row per epoch."""
    init_seq, sample_seq = np.random.SeedSequence(config.seed).spawn(2)
    tri = init_surrogates(plant, config, np.random.default_rng(init_seq))
    tri.minimizer_tol, tri.minimizer_iters = config.minimizer_tol, config.minimizer_iters
    sample_rng = np.random.default_rng(sample_seq)
    cl = ClosedLoop(plant, tri)
    params = tri.parameters()
    state = OptimizerState.zeros_like(params)
    w = AdaptiveWeights(gamma=config.gamma, alpha=config.alpha)
    log = []
    for epoch in range(1, config.epochs + 1):
        X = sample_batch(plant.box, config.samples_per_epoch, sample_rng)
        try:
            tri.refresh_minimizer()
            batch = compute_residuals(cl, X)
        except (NumericError, MinimizerError) as exc:
            raise TrainingAborted(str(exc), epoch) from exc
        means = batch.means
        loss = total_loss(batch, w)
        loss_val = float(loss.data) if isinstance(loss, Tensor) else float(loss)
        if not np.isfinite(loss_val):
            per = np.stack([batch.f_m, batch.f_dm, batch.f_sd1, batch.f_sd2], axis=1)
            bad = int(np.flatnonzero(~np.all(np.isfinite(per), axis=1))[0]) if not np.all(np.isfinite(per)) else None
            raise TrainingAborted(
                "non-finite loss",
                epoch,
                sample=None if bad is None else X[bad].tolist(),
                residuals=None if bad is None else per[bad].tolist(),
            )
        log.append(dict(zip(LOG_COLUMNS, (epoch,) + means + w.as_tuple() + (loss_val,))))
        if isinstance(loss, Tensor):
            grads = _clip(gradient_params(loss, params), config.grad_clip)
            adam_step(params, grads, state, config)
            tri.mark_updated()
        w = update_weights(w, means[0], means[1], means[2] + means[3])
        if progress is not None:
            progress(
                f"epoch {epoch:5d}  loss {loss_val:.6e}  f_m {means[0]:.3e}  f_dm {means[1]:.3e}  "
                f"f_sd1 {means[2]:.3e}  f_sd2 {means[3]:.3e}"
            )
        if checkpoint_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            tri.refresh_minimizer()
            save_checkpoint(tri, checkpoint_path, plant.name, seed=config.seed, epoch=epoch, config=config)
    tri.refresh_minimizer()
    return TrainResult(tri, log, w)


# -- training log ----------------------------------------------------------------
def write_log_csv(rows, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_COLUMNS)
        for r in rows:
            wr.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])


def read_log_csv(path):
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in rd]


def replay_weights(rows, gamma=0.9999, alpha=0.01):
    """Multipliers implied by the logged batch means, starting from the first row's values."""
    w = AdaptiveWeights(rows[0]["r_m"], rows[0]["r_dm"], rows[0]["r_sd"], gamma, alpha)
    out = [w.as_tuple()]
    for r in rows[:-1]:
        w = update_weights(w, r["f_m"], r["f_dm"], r["f_sd1"] + r["f_sd2"])
        out.append(w.as_tuple())
    return out


# -- checkpoints -----------------------------------------------------------------
def _named_arrays(tri):
    out = []
    for tag, mlp in (("j", tri.mlp_j), ("r", tri.mlp_r)):
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            out += [(f"{tag}.W{i}", w.data), (f"{tag}.b{i}", b.data)]
    ic = tri.icnn
    out += [(f"h.pass{i}", p.data) for i, p in enumerate(ic.passthrough)]
    out += [(f"h.raw{i}", p.data) for i, p in enumerate(ic.raw_hidden)]
    out += [(f"h.bias{i}", p.data) for i, p in enumerate(ic.biases)]
    out += [("h.quad", ic.quad.data)]
    return out


def save_checkpoint(tri, path, benchmark, seed=None, epoch=None, config=None):
    """Write a self-describing binary checkpoint; byte-identical for identical inputs."""
    arrays = _named_arrays(tri)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "benchmark": benchmark,
        "n": tri.n,
        "mlp_j_widths": list(tri.mlp_j.widths),
        "mlp_r_widths": list(tri.mlp_r.widths),
        "icnn_hidden": list(tri.icnn.hidden),
        "icnn_floor": tri.icnn.floor,
        "rho": tri.rho,
        "eps": tri.eps,
        "kappa": tri.kappa,
        "x_star": tri.x_star.tolist(),
        "x_hat": None if tri.x_hat is None else np.asarray(tri.x_hat).tolist(),
        "minimizer_tol": tri.minimizer_tol,
        "seed": seed,
        "epoch": epoch,
        "config": None if config is None else config.to_dict(),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header") from exc
        payload = fh.read()
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format {header.get('format_version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    return header, payload


def load_checkpoint(path, benchmark=None):
    """Rebuild the surrogates saved by :func:`save_checkpoint`."""
    header, payload = read_checkpoint_header(path)
    if benchmark is not None and header["benchmark"] != benchmark:
        raise CheckpointError(f"checkpoint is for {header['benchmark']!r}, not {benchmark!r}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt file)")
    arrays, off = {}, 0
    for name, shp in header["arrays"]:
        size = int(np.prod(shp)) * 8
        if off + size > len(payload):
            raise CheckpointError(f"{path}: truncated payload")
        arrays[name] = np.frombuffer(payload[off : off + size], dtype="<f8").reshape(shp).astype(np.float64)
        off += size
    if off != len(payload):
        raise CheckpointError(f"{path}: trailing bytes in payload")

    def mlp(tag, widths):
        k = len(widths) - 1
        return MlpParams(
            tuple(widths),
            [Tensor(arrays[f"{tag}.W{i}"]) for i in range(k)],
            [Tensor(arrays[f"{tag}.b{i}"]) for i in range(k)],
        )

    hidden = tuple(header["icnn_hidden"])
    L = len(hidden) + 1
    icnn = IcnnParams(
        header["n"],
        hidden,
        [Tensor(arrays[f"h.pass{i}"]) for i in range(L)],
        [Tensor(arrays[f"h.raw{i}"]) for i in range(len(hidden))],
        [Tensor(arrays[f"h.bias{i}"]) for i in range(L)],
        Tensor(arrays["h.quad"]),
        header["icnn_floor"],
    )
    tri = SurrogateTriple(
        header["n"],
        mlp("j", header["mlp_j_widths"]),
        mlp("r", header["mlp_r_widths"]),
        icnn,
        header["rho"],
        header["eps"],
        header["kappa"],
        np.asarray(header["x_star"]),
        minimizer_tol=header["minimizer_tol"],
    )
    if header["x_hat"] is not None:
        tri.x_hat = np.asarray(header["x_hat"], dtype=np.float64)
        tri._hat_version = tri._version
    tri.meta = {k: header[k] for k in ("benchmark", "seed", "epoch", "config")}
    return tri
