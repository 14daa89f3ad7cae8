"""Offline identification of the initial scheduled model.

Fits the flattened parameter vector by minimizing open-loop simulation MSE
over an input-output record, with gradients obtained by reverse accumulation
through the unrolled simulation.  Full-batch gradient descent with a
backtracking Armijo line search keeps training deterministic; the trial step
is seeded by a safeguarded Barzilai-Borwein estimate so the line search
starts near the right scale.  A feasibility gate then checks that the tube
controller is actually solvable at the identified model before it is let
anywhere near the closed loop.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import plant as plant_mod
from . import qlpv, qp, tmpc
from .errors import ConfigurationError
from .polytope import Hpoly, PolytopeTemplate


@dataclass
class IoDataset:
    u_seq: np.ndarray            # (T, n_u)
    y_seq: np.ndarray            # (T, n_y)
    scale: float = 1.0           # output scaling already applied to y_seq

    def __post_init__(self):
        self.u_seq = np.atleast_2d(np.asarray(self.u_seq, dtype=float))
        self.y_seq = np.atleast_2d(np.asarray(self.y_seq, dtype=float))
        if self.u_seq.ndim == 2 and self.u_seq.shape[0] == 1 and self.u_seq.shape[1] > 1:
            self.u_seq = self.u_seq.T
        if self.y_seq.ndim == 2 and self.y_seq.shape[0] == 1 and self.y_seq.shape[1] > 1:
            self.y_seq = self.y_seq.T
        if len(self.u_seq) != len(self.y_seq):
            raise ConfigurationError("input and output records must be equally long")
        if not (np.isfinite(self.u_seq).all() and np.isfinite(self.y_seq).all()):
            raise ConfigurationError("dataset contains non-finite entries")

    def __len__(self) -> int:
        return len(self.u_seq)

    def to_csv(self) -> str:
        if self.u_seq.shape[1] != 1 or self.y_seq.shape[1] != 1:
            raise ConfigurationError("CSV schema covers scalar input/output records")
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["t", "u", "y"])
        for t, (u, y) in enumerate(zip(self.u_seq[:, 0], self.y_seq[:, 0])):
            w.writerow([t, repr(float(u)), repr(float(y))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, scale: float = 1.0) -> "IoDataset":
        rows = list(csv.DictReader(io.StringIO(text)))
        u = np.array([[float(r["u"])] for r in rows])
        y = np.array([[float(r["y"])] for r in rows])
        return cls(u_seq=u, y_seq=y, scale=scale)


def collect_dataset(cfg: plant_mod.PlantConfig, n_steps: int, seed: int,
                    hold: int = 5) -> IoDataset:
    """Excite the benchmark plant with uniform inputs held constant for a few
    steps and record the scaled output, starting from rest."""
    rng = np.random.default_rng(seed)
    state = np.zeros(4)
    u_seq = np.zeros((n_steps, 1))
    y_seq = np.zeros((n_steps, 1))
    u = 0.0
    for t in range(n_steps):
        if t % hold == 0:
            u = float(rng.uniform(-1.0, 1.0))
        y_seq[t, 0] = plant_mod.measure(cfg, state)
        u_seq[t, 0] = u
        state = plant_mod.rk4_step(cfg, state, u)
    return IoDataset(u_seq=u_seq, y_seq=y_seq, scale=cfg.output_scale)


def simulate(params: qlpv.ModelParams, u_seq: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """Open-loop model outputs, one row per recorded step."""
    x = np.asarray(x0, dtype=float).copy()
    out = np.zeros((len(u_seq), params.n_y))
    for t, u in enumerate(u_seq):
        out[t] = params.C @ x
        if t + 1 < len(u_seq):
            x = qlpv.step(params, x, u)
    return out


def simulate_mse(params: qlpv.ModelParams, data: IoDataset, x0: np.ndarray) -> float:
    if len(data) == 0:
        raise ConfigurationError("dataset is empty")
    try:
        y_hat = simulate(params, data.u_seq, x0)
    except FloatingPointError:
        return float("inf")
    if not np.isfinite(y_hat).all():
        return float("inf")
    return float(np.sum((data.y_seq - y_hat) ** 2) / len(data))


def _loss_only(params: qlpv.ModelParams, data: IoDataset, x0: np.ndarray,
               weight_decay: float) -> tuple[float, float]:
    mse = simulate_mse(params, data, x0)
    theta = params.pack()
    return mse + weight_decay * float(theta @ theta), mse


def mse_and_gradient(params: qlpv.ModelParams, data: IoDataset, x0: np.ndarray,
                     weight_decay: float = 0.0) -> tuple[float, float, np.ndarray]:
    """(total loss, bare MSE, d loss / d theta) by reverse accumulation."""
    T = len(data)
    n_x = params.n_x
    xs = np.zeros((T, n_x))
    x = np.asarray(x0, dtype=float).copy()
    fxs, fths = [], []
    for t in range(T):
        xs[t] = x
        if t + 1 < T:
            fx, fth = qlpv.jacobians(params, x, data.u_seq[t])
            fxs.append(fx)
            fths.append(fth)
            x = qlpv.step(params, x, data.u_seq[t])
            if not np.isfinite(x).all():
                return float("inf"), float("inf"), np.zeros(params.n_theta)

    err = data.y_seq - xs @ params.C.T
    mse = float(np.sum(err ** 2) / T)
    theta = params.pack()
    loss = mse + weight_decay * float(theta @ theta)

    grad = 2.0 * weight_decay * theta
    lam = -(2.0 / T) * params.C.T @ err[T - 1]
    for t in range(T - 2, -1, -1):
        grad += fths[t].T @ lam
        lam = -(2.0 / T) * params.C.T @ err[t] + fxs[t].T @ lam
    return loss, mse, grad


@dataclass
class TrainConfig:
    target: float = 0.01
    max_epochs: int = 4000
    weight_decay: float = 1e-4
    armijo_c: float = 1e-4
    max_halvings: int = 50
    n_x: int = 2
    n_p: int = 3
    n_h: int = 3
    n_u: int = 1
    n_y: int = 1


@dataclass
class FitReport:
    train_mse: float
    epochs: int
    reached_target: bool
    weight_decay: float
    history: list = field(default_factory=list)


def initial_guess(cfg: TrainConfig, seed: int) -> qlpv.ModelParams:
    """Contractive start: near 0.5*I vertex matrices, small everything else."""
    rng = np.random.default_rng(seed)
    A = [0.5 * np.eye(cfg.n_x) + rng.uniform(-0.01, 0.01, size=(cfg.n_x, cfg.n_x))
         for _ in range(cfg.n_p)]
    B = [rng.uniform(-0.1, 0.1, size=(cfg.n_x, cfg.n_u)) for _ in range(cfg.n_p)]
    C = np.eye(cfg.n_x)[:cfg.n_y]
    return qlpv.ModelParams(
        A=A, B=B,
        W1=rng.uniform(-0.1, 0.1, size=(cfg.n_h, cfg.n_x + cfg.n_u)),
        b1=rng.uniform(-0.1, 0.1, size=cfg.n_h),
        W2=rng.uniform(-0.1, 0.1, size=(cfg.n_p, cfg.n_h)),
        b2=rng.uniform(-0.1, 0.1, size=cfg.n_p),
        C=C,
    )


def fit_initial_model(data: IoDataset, cfg: TrainConfig, seed: int,
                      x0: np.ndarray | None = None) -> tuple[qlpv.ModelParams, FitReport]:
    """Deterministic full-batch descent to the simulation-MSE target."""
    if len(data) < 2:
        raise ConfigurationError("need at least two samples to fit")
    params = initial_guess(cfg, seed)
    x0 = np.zeros(cfg.n_x) if x0 is None else np.asarray(x0, dtype=float)
    theta = params.pack()
    loss, mse, grad = mse_and_gradient(params, data, x0, cfg.weight_decay)
    best_theta, best_mse = theta.copy(), mse
    step = 1.0 / max(1.0, float(np.linalg.norm(grad)))
    history = [mse]
    prev_theta, prev_grad = None, None
    epoch = 0

    for epoch in range(1, cfg.max_epochs + 1):
        if best_mse <= cfg.target:
            break
        gnorm2 = float(grad @ grad)
        if gnorm2 <= 1e-30:
            break
        # Barzilai-Borwein trial step, safeguarded, then Armijo halving.
        if prev_theta is not None:
            dtheta = theta - prev_theta
            dgrad = grad - prev_grad
            curv = float(dtheta @ dgrad)
            if curv > 1e-18:
                step = float(dtheta @ dtheta) / curv
            else:
                step *= 2.0
        else:
            step *= 2.0
        step = float(np.clip(step, 1e-14, 1e6))

        # The line search probes loss only; the gradient is computed once the
        # step is accepted.
        accepted = False
        alpha = step
        for _ in range(cfg.max_halvings):
            cand = theta - alpha * grad
            cand_params = params.replace_theta(cand)
            cand_loss, cand_mse = _loss_only(cand_params, data, x0, cfg.weight_decay)
            if cand_loss <= loss - cfg.armijo_c * alpha * gnorm2:
                prev_theta, prev_grad = theta, grad
                theta, loss, mse = cand, cand_loss, cand_mse
                params = cand_params
                _, _, grad = mse_and_gradient(params, data, x0, cfg.weight_decay)
                step = alpha
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        history.append(mse)
        if mse < best_mse:
            best_mse, best_theta = mse, theta.copy()

    best = params.replace_theta(best_theta)
    return best, FitReport(train_mse=best_mse, epochs=epoch,
                           reached_target=best_mse <= cfg.target,
                           weight_decay=cfg.weight_decay, history=history)


def feasibility_gate(
    params: qlpv.ModelParams,
    controller: tmpc.ControllerConfig,
    x0: np.ndarray,
    template: PolytopeTemplate,
    Y: Hpoly,
    eps_u: np.ndarray,
    y_ref: np.ndarray | None = None,
) -> tuple[bool, dict]:
    """True iff the tube controller's QP is solvable at (x0, params)."""
    y_ref = np.zeros(params.n_y) if y_ref is None else y_ref
    sol = tmpc.solve_tmpc(np.asarray(x0, dtype=float), params, y_ref,
                          controller, template, Y, eps_u)
    ok = sol.status == qp.QpStatus.OPTIMAL
    diag = {
        "status": sol.status.value,
        "kkt_residual": sol.qp_solution.kkt_residual,
        "max_violation": sol.qp_solution.primal_infeasibility,
    }
    return ok, diag


def fit_feasible_model(
    data: IoDataset,
    cfg: TrainConfig,
    seed: int,
    controller: tmpc.ControllerConfig,
    template: PolytopeTemplate,
    Y: Hpoly,
    eps_u: np.ndarray,
    x0: np.ndarray | None = None,
    max_retries: int = 3,
) -> tuple[qlpv.ModelParams, FitReport]:
    """Fit, then gate; on gate failure retrain with 10x stronger weight decay.

    Aborts with the gate diagnostics once the retry ladder is exhausted.
    """
    x0 = np.zeros(cfg.n_x) if x0 is None else x0
    wd = cfg.weight_decay
    last_diag: dict = {}
    for attempt in range(max_retries + 1):
        attempt_cfg = TrainConfig(**{**cfg.__dict__, "weight_decay": wd})
        params, report = fit_initial_model(data, attempt_cfg, seed, x0)
        ok, diag = feasibility_gate(params, controller, x0, template, Y, eps_u)
        if ok:
            return params, report
        last_diag = diag
        wd *= 10.0
    raise ConfigurationError(
        f"no identified model passed the controller feasibility gate "
        f"after {max_retries + 1} attempts; last diagnostics: {last_diag}")
