"""Training, evaluation and reporting for the toy and gridworld experiments."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans

from stochweave.agent import DqnConfig, evaluate_policy, run_onpolicy
from stochweave.baselines import MeanMLPRegressor, NoiseMLPRegressor
from stochweave.cvae import TransitionModel, sample_prediction
from stochweave.diffcore import NumericalFailure, save_checkpoint
from stochweave.envs import (
    GridLayout,
    grid_true_next_dist,
    toy_dataset,
    toy_mean,
    uncorrelated_batch,
)
from stochweave.estimators import ConditionalVAE
from stochweave.harness.config import ExperimentConfig
from stochweave.metrics import DistTable, empirical_dist, hellinger, kl_categorical

PROBE_SEED = 20170601
METRICS = ("vlb", "elbo", "nll", "kl_p_phat", "hellinger", "kl_phat_p", "agent_mass_ok",
           "det_max_std", "det_max_mean_error", "weight_pos_at_+0.25", "weight_pos_at_-0.25",
           "mse", "policy_success", "wall_violation_rate", "rollouts_aborted")


def worker_count() -> int:
    cap = os.environ.get("STOCHWEAVE_THREADS")
    n = os.cpu_count() or 1
    return max(1, min(n, int(cap))) if cap else n


def layout_of(config: ExperimentConfig) -> GridLayout:
    return GridLayout.from_dict(config.layout) if config.layout else GridLayout()


# --------------------------------------------------------------------------
# Report


@dataclass
class Report:
    config: dict
    runs: list[dict] = field(default_factory=list)
    sample_counts: dict = field(default_factory=dict)
    probes: list | None = None

    @property
    def failed(self) -> bool:
        return any(r.get("failed") for r in self.runs)

    def aggregate(self) -> dict:
        """Mean over seeds of each metric; ``inf``/``NA`` entries are counted, not averaged."""
        out = {}
        for name in METRICS:
            values = [r[name] for r in self.runs if name in r]
            if not values:
                continue
            finite = [v for v in values if isinstance(v, (int, float)) and math.isfinite(v)]
            out[name] = {
                "mean": float(np.mean(finite)) if finite else "NA" if "NA" in values else "inf",
                "n": len(finite),
                "n_inf": sum(1 for v in values if v == math.inf),
                "n_na": sum(1 for v in values if v == "NA"),
            }
        return out

    def to_dict(self) -> dict:
        return {"config": self.config, "sample_counts": self.sample_counts,
                "runs": [_jsonable(r) for r in self.runs],
                "aggregate": _jsonable(self.aggregate()), "failed": self.failed,
                "probes": self.probes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        cols = ["seed", "failed", "wall_clock"] + [m for m in METRICS
                                                   if any(m in r for r in self.runs)]
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(cols)
        for r in self.runs:
            w.writerow([_cell(r.get(c, "")) for c in cols])
        agg = self.aggregate()
        w.writerow(["mean", self.failed, ""] + [_cell(agg[c]["mean"]) if c in agg else ""
                                               for c in cols[3:]])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "report.csv").write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> "Report":
        d = json.loads(Path(path).read_text())
        runs = [{k: _unjson(v) for k, v in r.items()} for r in d["runs"]]
        return cls(d["config"], runs, d.get("sample_counts", {}), d.get("probes"))


def _cell(v):
    # repr keeps all 17 significant digits, so CSV and JSON agree exactly.
    return repr(float(v)) if isinstance(v, float) else v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else "-inf" if obj < 0 else "nan"
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    return obj


def _unjson(v):
    return {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}.get(v, v) if isinstance(v, str) else v


# --------------------------------------------------------------------------
# Models


def make_estimator(config: ExperimentConfig, seed: int, n_steps: int | None = None,
                   grid: bool = False, layout: GridLayout | None = None) -> ConditionalVAE:
    family = config.latent_family
    kw = dict(
        latent=family, n_latent=config.n_latent, n_categories=config.n_categories,
        n_flow=config.n_flow if family == "gaussian-flow" else 0,
        generative_hidden=config.generative_hidden, inference_hidden=config.inference_hidden,
        n_steps=n_steps or config.n_steps, batch_size=config.batch_size,
        lr_start=config.lr_start, lr_end=config.lr_end, lr_fraction=config.lr_fraction,
        tau_start=config.tau_start, tau_end=config.tau_end, tau_fraction=config.tau_fraction,
        n_importance=config.n_importance, alpha=config.alpha, free_bits=config.free_bits,
        eval_every=config.eval_every, n_eval_samples=config.eval_samples, random_state=seed,
    )
    if grid:
        w, h = layout.width, layout.height
        kw.update(decoder="categorical", x_cardinalities=(w, h) * 3 + (4,),
                  y_cardinality=max(w, h))
    return ConditionalVAE(**kw)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def toy_data(config: ExperimentConfig, seed: int):
    rng = _rng(seed, 1)
    return (toy_dataset(config.n_train, rng), toy_dataset(config.n_val, rng),
            toy_dataset(config.n_test, rng))


def grid_eval_data(config: ExperimentConfig, seed: int, layout: GridLayout):
    rng = _rng(seed, 1)
    return uncorrelated_batch(layout, config.n_val, rng), uncorrelated_batch(layout, config.n_test, rng)


def probe_set(config: ExperimentConfig, layout: GridLayout):
    """Fixed uniformly drawn (state, action) pairs shared by every run and variant."""
    X, _ = uncorrelated_batch(layout, config.n_probes, np.random.default_rng(PROBE_SEED))
    return [(tuple(int(v) for v in row[:6]), int(row[6])) for row in X]


# --------------------------------------------------------------------------
# Evaluation


def two_mode_weight(samples) -> float:
    """Weight of the upper cluster when 2-means splits 1-D samples."""
    s = np.asarray(samples, dtype=np.float64).reshape(-1, 1)
    km = KMeans(n_clusters=2, n_init=10, random_state=0).fit(s)
    upper = int(np.argmax(km.cluster_centers_[:, 0]))
    return float(np.mean(km.labels_ == upper))


def evaluate_toy(est, test, config: ExperimentConfig, seed: int) -> dict:
    Xt, Yt = test
    rng = _rng(seed, 2)
    out = {"vlb": est.vr_bound(Xt, Yt, n_samples=config.n_importance, random_state=rng),
           "elbo": est.elbo(Xt, Yt, random_state=rng),
           "nll": est.nll(Xt, Yt, n_samples=config.eval_samples, random_state=rng)}
    out.update(toy_shape_checks(est, rng))
    return out


def toy_shape_checks(est, rng, n_samples: int = 10000) -> dict:
    probes = np.linspace(-0.95, -0.35, 20)[:, None]
    draws = est.sample(probes, n_samples, random_state=rng)[..., 0]
    out = {"det_max_std": float(np.max(draws.std(axis=0))),
           "det_max_mean_error": float(np.max(np.abs(draws.mean(axis=0) - 2.5)))}
    for x in (0.25, -0.25):
        out[f"weight_pos_at_{x:+.2f}"] = two_mode_weight(
            est.sample(np.array([[x]]), n_samples, random_state=rng)[:, 0, 0])
    return out


def model_next_dists(model: TransitionModel, probes, n_samples: int, rng) -> list[DistTable]:
    xe = model_inputs(model, probes)
    out = []
    for i in range(len(probes)):
        draws = sample_prediction(model, xe[i:i + 1], n_samples, rng)[:, 0, :]
        out.append(empirical_dist(map(tuple, draws.tolist())))
    return out


def model_inputs(model: TransitionModel, probes):
    from stochweave.cvae import encode_input

    rows = np.array([list(s) + [a] for s, a in probes], dtype=np.int64)
    return encode_input(model.arch.x_encoding, rows)


def compare_to_oracle(model: TransitionModel, layout: GridLayout, probes, n_samples: int,
                      rng) -> dict:
    """Per-probe divergences between the model's empirical next-state table and the oracle."""
    kl_fwd, kl_rev, hel, agent_ok = [], [], [], []
    for (state, action), p_hat in zip(probes, model_next_dists(model, probes, n_samples, rng)):
        p = grid_true_next_dist(layout, state, action)
        kl_fwd.append(kl_categorical(p, p_hat))
        kl_rev.append(kl_categorical(p_hat, p))
        hel.append(hellinger(p, p_hat))
        true_agent = p.support[0][:2]
        mass = sum(pr for key, pr in zip(p_hat.support, p_hat.probs) if key[:2] == true_agent)
        agent_ok.append(mass >= 0.9)

    def finite_mean(v):
        f = [x for x in v if math.isfinite(x)]
        return float(np.mean(f)) if f else math.inf

    return {"kl_p_phat": finite_mean(kl_fwd), "kl_p_phat_n_inf": sum(map(math.isinf, kl_fwd)),
            "kl_phat_p": finite_mean(kl_rev), "kl_phat_p_n_inf": sum(map(math.isinf, kl_rev)),
            "hellinger": float(np.mean(hel)), "agent_mass_ok": float(np.mean(agent_ok))}


def evaluate_grid(est, layout, val_test, probes, config: ExperimentConfig, seed: int) -> dict:
    _, (Xt, Yt) = val_test
    rng = _rng(seed, 2)
    out = {"vlb": est.vr_bound(Xt, Yt, n_samples=config.n_importance, random_state=rng),
           "elbo": est.elbo(Xt, Yt, random_state=rng),
           "nll": est.nll(Xt, Yt, n_samples=config.eval_samples, random_state=rng)}
    out.update(compare_to_oracle(est.transition_model_, layout, probes, config.probe_samples, rng))
    return out


# --------------------------------------------------------------------------
# Runs


def train_mlp_baselines(config: ExperimentConfig, data, seed: int):
    """Deterministic squared-error MLP and noise-input MLP on one toy dataset.

    Returns ``({"mlp-det": model, "mlp-noise": model}, rows)``; likelihood
    columns of the deterministic model are ``"NA"``.
    """
    (X, Y), _, (Xt, Yt) = data
    common = dict(hidden=config.generative_hidden, n_steps=config.n_steps,
                  batch_size=config.batch_size, lr_start=config.lr_start,
                  lr_end=config.lr_end, lr_fraction=config.lr_fraction, random_state=seed)
    det = MeanMLPRegressor(**common).fit(X, Y)
    noise = NoiseMLPRegressor(n_noise=config.n_latent, n_eval_samples=config.eval_samples,
                              **common).fit(X, Y)
    rng = _rng(seed, 2)
    rows = {
        "mlp-det": {"vlb": "NA", "elbo": "NA", "nll": "NA",
                    "mse": float(np.mean((det.predict(Xt) - Yt[:, 0]) ** 2)),
                    "mean_error_at_0.2": float(det.predict([[0.2]])[0] - toy_mean(0.2))},
        "mlp-noise": {"vlb": "NA", "elbo": "NA",
                      "nll": noise.nll(Xt, Yt, random_state=rng)},
    }
    return {"mlp-det": det, "mlp-noise": noise}, rows


def run_seed(config: ExperimentConfig, seed: int, out_dir: str | None) -> dict:
    """Train and evaluate one seed; numerical failures become a flagged record."""
    t0 = time.perf_counter()
    record = {"seed": seed, "failed": False}
    try:
        if config.domain == "toy":
            record.update(_run_toy(config, seed, out_dir))
        elif config.domain == "grid-uncorrelated":
            record.update(_run_grid(config, seed, out_dir))
        else:
            record.update(_run_onpolicy(config, seed, out_dir))
    except NumericalFailure as err:
        record.update(failed=True, error=str(err))
    record["wall_clock"] = time.perf_counter() - t0
    return record


def _checkpoint(est, out_dir, seed):
    if out_dir:
        est.transition_model_.save(Path(out_dir) / f"model_seed{seed}")


def _run_toy(config, seed, out_dir):
    data = toy_data(config, seed)
    if config.variant.startswith("mlp"):
        _, rows = train_mlp_baselines(config, data, seed)
        return rows[config.variant]
    (X, Y), (Xv, Yv), test = data
    est = make_estimator(config, seed).fit(X, Y, Xv, Yv)
    _checkpoint(est, out_dir, seed)
    return evaluate_toy(est, test, config, seed)


def _run_grid(config, seed, out_dir):
    layout = layout_of(config)
    val_test = grid_eval_data(config, seed, layout)
    est = make_estimator(config, seed, grid=True, layout=layout)
    est.fit_stream(lambda n, rng: uncorrelated_batch(layout, n, rng), *val_test[0])
    _checkpoint(est, out_dir, seed)
    return evaluate_grid(est, layout, val_test, probe_set(config, layout), config, seed)


def _run_onpolicy(config, seed, out_dir):
    from stochweave.harness.render import RolloutAborted, policy_of, rollout_in_model

    layout = layout_of(config)
    dqn = DqnConfig(**config.dqn)
    n_updates = max(1, (dqn.total_steps - dqn.batch_size) // dqn.update_every + 1)
    est = make_estimator(config, seed, n_steps=n_updates, grid=True, layout=layout)
    # Build the network up front so even a run too short for any update can be evaluated.
    est._initialize(*est._validate(*uncorrelated_batch(layout, 1, np.random.default_rng(0))))

    def hook(X, Y):
        est.partial_fit(X, Y)
        return est.last_loss_

    rng = _rng(seed, 3)
    log_path = Path(out_dir) / f"rollout_seed{seed}.jsonl" if out_dir else None
    agent, log = run_onpolicy(layout, dqn, hook, rng, log_path)
    _checkpoint(est, out_dir, seed)
    if out_dir:
        save_checkpoint(Path(out_dir) / f"dqn_seed{seed}.swve", agent._np)
    out = {"policy_success": evaluate_policy(layout, agent, 100, dqn.eval_epsilon, rng)}
    # Probes from states the agent actually visited in the last fifth of training.
    tail = log[-len(log) // 5:]
    pick = rng.choice(len(tail), size=min(config.n_probes, len(tail)), replace=False)
    probes = [(tuple(tail[i]["state"]), tail[i]["action"]) for i in sorted(pick)]
    out.update(compare_to_oracle(est.transition_model_, layout, probes, config.probe_samples, rng))
    violations = states = aborted = 0
    for r in range(100):
        render_dir = Path(out_dir) / f"rollout_seed{seed}" if out_dir and r == 0 else None
        try:
            traj = rollout_in_model(est.transition_model_, layout,
                                    policy_of(agent, dqn.eval_epsilon), layout.start_state, 12,
                                    rng, out_dir=render_dir)
        except RolloutAborted as err:
            aborted += 1
            violations += err.violations
            states += err.samples
            continue
        violations += traj["violations"]
        states += traj["samples"]
    out["wall_violation_rate"] = violations / states
    out["rollouts_aborted"] = aborted
    return out


def run_experiment(config: ExperimentConfig, out_dir=None, workers: int | None = None) -> Report:
    """Train every seed of ``config`` and write ``report.json`` / ``report.csv`` to ``out_dir``."""
    out = str(out_dir) if out_dir else None
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "config.json").write_text(config.to_json())
    workers = min(workers or worker_count(), len(config.seeds))
    if workers > 1:
        # JAX does not survive fork; workers start fresh interpreters.
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn")) as pool:
            runs = list(pool.map(run_seed, [config] * len(config.seeds), config.seeds,
                                 [out] * len(config.seeds)))
    else:
        runs = [run_seed(config, s, out) for s in config.seeds]
    counts = {"test_nll_importance_samples": config.eval_samples,
              "vlb_importance_samples": config.n_importance, "n_test": config.n_test}
    probes = None
    if config.domain != "toy":
        counts.update(n_probes=config.n_probes, samples_per_probe=config.probe_samples)
        if config.domain == "grid-uncorrelated":
            probes = [[list(s), a] for s, a in probe_set(config, layout_of(config))]
    else:
        counts.update(shape_check_samples=10000, deterministic_probes=20)
    report = Report(config.to_dict(), runs, counts, probes)
    if out:
        report.write(out)
    return report
