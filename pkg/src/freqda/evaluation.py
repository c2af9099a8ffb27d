"""Rank/linear correlation metrics, logistic remapping, and the per-cell sweep.

SROCC is Spearman with average ranks for ties. PLCC is Pearson computed after
remapping predictions through a five-parameter logistic curve

    f(p) = b1 * (1/2 - exp(-b2 * (p - b3))) + b4 * p + b5

fitted by damped Gauss-Newton (Levenberg-style) least squares.

The frequency sweep measures, cell by cell of the DCT grid, how well a
regression head trained on the source domain's single-cell features predicts
target quality. By default all cells share one (optionally source-pretrained)
frozen extractor and get a closed-form ridge head, which makes the sweep fast
and exactly replayable; a fully independent per-cell retraining mode exists
behind a flag.
"""

import json
import logging
from dataclasses import dataclass, asdict

import numpy as np
import torch
from scipy.stats import rankdata

from . import data as data_mod
from . import spectral
from .model import ModelConfig, build_model

log = logging.getLogger(__name__)

LOGISTIC_MAX_ITER = 200
LOGISTIC_TOL = 1e-8


def _validate_pair(pred, truth, min_n):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if len(pred) < min_n:
        raise ValueError(f"need at least {min_n} samples, got {len(pred)}")
    return pred, truth


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a**2).sum() * (b**2).sum())
    if denom == 0:
        raise ValueError("zero variance; correlation undefined")
    return float((a * b).sum() / denom)


def srocc(pred, truth):
    """Spearman rank-order correlation with average ranks for ties."""
    pred, truth = _validate_pair(pred, truth, min_n=2)
    rp = rankdata(pred, method="average")
    rt = rankdata(truth, method="average")
    if np.all(rp == rp[0]) or np.all(rt == rt[0]):
        raise ValueError("constant vector has zero rank variance; SROCC undefined")
    return _pearson(rp, rt)


@dataclass
class LogisticFit:
    beta: tuple
    converged: bool
    rmse: float

    def __call__(self, pred):
        return logistic_curve(np.asarray(pred, dtype=np.float64), np.asarray(self.beta))


def logistic_curve(pred, beta):
    b1, b2, b3, b4, b5 = beta
    z = np.clip(b2 * (pred - b3), -60.0, 60.0)
    return b1 * (0.5 - np.exp(-z)) + b4 * pred + b5


def _logistic_jacobian(pred, beta):
    b1, b2, b3, _, _ = beta
    z = np.clip(b2 * (pred - b3), -60.0, 60.0)
    e = np.exp(-z)
    return np.stack(
        [0.5 - e, b1 * e * (pred - b3), -b1 * e * b2, pred, np.ones_like(pred)], axis=1
    )


def logistic_fit(pred, truth):
    """Least-squares fit of the five-parameter logistic remap.

    Initialization: b1 = range(truth), b2 = 1/std(pred), b3 = mean(pred),
    b4 = 0, b5 = mean(truth). Damped Gauss-Newton with adaptive damping;
    stops when the mean squared error changes by less than 1e-8 or after
    LOGISTIC_MAX_ITER iterations, returning best-so-far with a warning flag
    when it runs out of iterations.
    """
    pred, truth = _validate_pair(pred, truth, min_n=5)
    std = pred.std()
    if std == 0:
        raise ValueError("constant predictions; logistic fit is degenerate")
    beta = np.array([truth.max() - truth.min(), 1.0 / std, pred.mean(), 0.0, truth.mean()])

    def loss_of(b):
        r = logistic_curve(pred, b) - truth
        return float(np.mean(r**2)), r

    loss, residual = loss_of(beta)
    lam = 1e-3
    converged = False
    for _ in range(LOGISTIC_MAX_ITER):
        jac = _logistic_jacobian(pred, beta)
        jtj = jac.T @ jac
        jtr = jac.T @ residual
        improved = False
        for _ in range(20):
            try:
                delta = np.linalg.solve(jtj + lam * np.eye(5), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_loss, new_residual = loss_of(beta + delta)
            if np.isfinite(new_loss) and new_loss < loss:
                beta = beta + delta
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved:
            converged = True  # no damped step improves; at a local minimum
            break
        if abs(loss - new_loss) < LOGISTIC_TOL:
            loss, residual = new_loss, new_residual
            converged = True
            break
        loss, residual = new_loss, new_residual
    if not converged:
        log.warning("logistic fit did not converge in %d iterations (mse %.3e)",
                    LOGISTIC_MAX_ITER, loss)
    return LogisticFit(beta=tuple(beta), converged=converged, rmse=float(np.sqrt(loss)))


def plcc(pred, truth, fit=None):
    """Pearson correlation after the five-parameter logistic remap."""
    pred, truth = _validate_pair(pred, truth, min_n=5)
    if fit is None:
        fit = logistic_fit(pred, truth)
    return _pearson(fit(pred), truth), fit


@dataclass
class EvalReport:
    srocc: float
    plcc: float
    beta: tuple
    n: int
    fit_converged: bool = True
    grid: list = None           # optional per-frequency SROCC matrix

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        payload["beta"] = tuple(payload["beta"])
        return cls(**payload)


def predict_scores(net, images, batch_size=64, window=None):
    """Center-cropped, batched inference; returns a numpy score vector."""
    cfg = net.config
    if window is None:
        traj = spectral.make_trajectory("left-to-right", cfg.grid_h, cfg.grid_w)
        window = spectral.BandWindow(traj, m=cfg.m, j=0)
    crops = np.stack([data_mod.crop_and_flip(img, cfg.crop_size, train=False) for img in images])
    scores = []
    with torch.no_grad():
        for start in range(0, len(crops), batch_size):
            batch = torch.from_numpy(crops[start : start + batch_size]).unsqueeze(1)
            feats = net.forward_features(batch)
            band = spectral.extract_band(spectral.dct2(feats), window)
            scores.append(net.regress(band)[1].numpy())
    return np.concatenate(scores)


def evaluate_predictions(pred, truth, grid=None):
    fit = logistic_fit(pred, truth)
    return EvalReport(
        srocc=srocc(pred, truth),
        plcc=_pearson(fit(pred), truth),
        beta=fit.beta,
        n=len(pred),
        fit_converged=fit.converged,
        grid=grid,
    )


# --- per-frequency transferability sweep -------------------------------------

@dataclass
class SweepResult:
    grid: np.ndarray            # (H, W) target SROCC per cell (nan where undefined)
    flags: np.ndarray           # (H, W) bool, False where the head did not converge
    best_cell: tuple

    def as_csv(self):
        lines = [",".join(repr(float(v)) for v in row) for row in self.grid]
        return "\n".join(lines) + "\n"


def _cell_features(net, dataset, batch_size=64):
    """Frozen-extractor DCT coefficients for every image: (N, C, H, W)."""
    out = []
    crops = np.stack(
        [data_mod.crop_and_flip(img, net.config.crop_size, train=False) for img in dataset.images]
    )
    with torch.no_grad():
        for start in range(0, len(crops), batch_size):
            batch = torch.from_numpy(crops[start : start + batch_size]).unsqueeze(1)
            out.append(spectral.dct2(net.forward_features(batch)).coeffs.numpy())
    return np.concatenate(out)


def _ridge_predict(x_train, y_train, x_test, alpha=1e-3):
    x = np.asarray(x_train, dtype=np.float64)
    xt = np.asarray(x_test, dtype=np.float64)
    mu, sd = x.mean(axis=0), x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    x = (x - mu) / sd
    xt = (xt - mu) / sd
    a = np.hstack([x, np.ones((len(x), 1))])
    at = np.hstack([xt, np.ones((len(xt), 1))])
    reg = alpha * np.eye(a.shape[1])
    reg[-1, -1] = 0.0  # unpenalized intercept
    try:
        w = np.linalg.solve(a.T @ a + reg, a.T @ np.asarray(y_train, dtype=np.float64))
    except np.linalg.LinAlgError:
        return None
    return at @ w


def _supervised_pretrain(net, dataset, iters, batch_size, rng, lr=1e-4):
    """Light source-only pretraining of the extractor on DC-cell features."""
    traj = spectral.make_trajectory("left-to-right", net.config.grid_h, net.config.grid_w)
    window = spectral.BandWindow(traj, m=net.config.m, j=0)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(iters):
        idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
        crops = np.stack(
            [data_mod.crop_and_flip(dataset.images[i], net.config.crop_size, True, rng) for i in idx]
        )
        batch = torch.from_numpy(crops).unsqueeze(1)
        band = spectral.extract_band(spectral.dct2(net.forward_features(batch)), window)
        loss = torch.mean((net.regress(band)[1] - torch.from_numpy(dataset.scores[idx]).float()) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net


def frequency_sweep(source, target, seed=0, channels=16, blocks=4, grid=8,
                    pretrain_iters=0, batch_size=16, shared_extractor=True,
                    per_cell_iters=150):
    """Target SROCC of a source-trained single-cell regressor, for every cell.

    ``shared_extractor=True`` (default): one seed-built extractor (optionally
    pretrained on source) is frozen and each cell gets a closed-form ridge
    head. ``False``: every cell trains its own fresh model end-to-end for
    ``per_cell_iters`` iterations.
    """
    size = source.image_size[0]
    cfg = ModelConfig(channels=channels, blocks=blocks, crop_size=size,
                      grid_h=grid, grid_w=grid, m=1, hidden=32, disc_hidden=32)
    rng = np.random.default_rng(seed)
    grid_vals = np.full((grid, grid), np.nan)
    flags = np.zeros((grid, grid), dtype=bool)

    if shared_extractor:
        net = build_model(cfg, seed=seed)
        if pretrain_iters > 0:
            _supervised_pretrain(net, source, pretrain_iters, batch_size, rng)
        net.eval()
        feats_src = _cell_features(net, source)
        feats_tgt = _cell_features(net, target)
        for i in range(grid):
            for j in range(grid):
                pred = _ridge_predict(feats_src[:, :, i, j], source.scores, feats_tgt[:, :, i, j])
                if pred is None or not np.isfinite(pred).all() or np.all(pred == pred[0]):
                    continue
                grid_vals[i, j] = srocc(pred, target.scores)
                flags[i, j] = True
    else:
        traj = spectral.make_trajectory("left-to-right", grid, grid)
        for i in range(grid):
            for j in range(grid):
                cell_seed = int(np.random.default_rng([seed, i * grid + j]).integers(2**31))
                net = build_model(cfg, seed=cell_seed)
                window = spectral.BandWindow(traj, m=1, j=i * grid + j)
                cell_rng = np.random.default_rng([seed, i * grid + j, 1])
                opt = torch.optim.Adam(net.parameters(), lr=1e-3)
                for _ in range(per_cell_iters):
                    idx = cell_rng.choice(len(source), size=min(batch_size, len(source)), replace=False)
                    crops = np.stack(
                        [data_mod.crop_and_flip(source.images[n], size, True, cell_rng) for n in idx]
                    )
                    band = spectral.extract_band(
                        spectral.dct2(net.forward_features(torch.from_numpy(crops).unsqueeze(1))),
                        window,
                    )
                    loss = torch.mean(
                        (net.regress(band)[1] - torch.from_numpy(source.scores[idx]).float()) ** 2
                    )
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                net.eval()
                pred = predict_scores(net, target.images, window=window)
                if np.isfinite(pred).all() and not np.all(pred == pred[0]):
                    grid_vals[i, j] = srocc(pred, target.scores)
                    flags[i, j] = True

    flat = np.where(np.isnan(grid_vals), -np.inf, grid_vals)
    best = np.unravel_index(int(np.argmax(flat)), grid_vals.shape)
    return SweepResult(grid=grid_vals, flags=flags, best_cell=(int(best[0]), int(best[1])))


def save_heatmap(grid, png_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(grid, cmap="viridis")
    ax.set_xlabel("horizontal frequency")
    ax.set_ylabel("vertical frequency")
    fig.colorbar(im, ax=ax, label="target SROCC")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
