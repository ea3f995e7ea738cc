"""Monte Carlo noisy inference and the robustness experiment procedures.

``mc_inference`` estimates deployed accuracy: for each run it draws a fresh
weight perturbation for the *backbone only* (exit blocks play no role at
inference), evaluates test accuracy at the perturbed weights, and aggregates
mean, std, and a 95% confidence half-width over runs.

On top of it sit the study procedures: accuracy-vs-sigma sweeps, the
five-point feedback-strength grid search, repeated-run convergence counting,
exit ablation, and the with/without-injection synergy comparison.  Every
procedure is deterministic given its seeds and can persist models and
reports through a :class:`ModelStore`.
"""

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import load_network, save_checkpoint
from .data import Dataset, batches
from .errors import ConfigError
from .feedback import ALPHA_GRID, FeedbackSpec
from .network import BackboneSpec, MultiExitNetwork, accuracy, build_network, default_exits
from .streams import EVAL_NOISE, substream
from .training import TrainConfig, TrainHistory, train
from .variation import VariationSpec, perturb_weights

DEFAULT_SIGMA_GRID = (0.1, 0.2, 0.3, 0.4, 0.6, 0.8)
CONVERGENCE_THRESHOLD = 0.05


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo evaluation settings; sigma_d overrides the spec's value."""

    mc: int = 200
    sigma_d: float = 0.0
    seed: int = 0
    variation: VariationSpec = field(default_factory=VariationSpec)
    eval_limit: int | None = None  # evaluate on this many test items (None = all)
    batch_size: int = 512

    def __post_init__(self):
        if self.mc < 1:
            raise ConfigError(f"mc must be >= 1, got {self.mc}")

    @property
    def effective_variation(self) -> VariationSpec:
        return replace(self.variation, sigma_d=self.sigma_d)

    def to_dict(self) -> dict:
        return {
            "mc": self.mc,
            "sigma_d": self.sigma_d,
            "seed": self.seed,
            "variation": self.variation.to_dict(),
            "eval_limit": self.eval_limit,
            "batch_size": self.batch_size,
        }


@dataclass
class McReport:
    """Per-run noisy accuracies with their summary statistics."""

    accuracies: list
    sigma_d: float
    seed: int
    metadata: dict = field(default_factory=dict)

    @property
    def mc(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if self.mc > 1 else 0.0

    @property
    def ci95(self) -> float:
        return 1.96 * self.std / math.sqrt(self.mc)

    @property
    def aging_regime(self) -> bool:
        return self.sigma_d > 0.4

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "ci95": self.ci95,
            "mc": self.mc,
            "sigma_d": self.sigma_d,
            "seed": self.seed,
            "aging_regime": self.aging_regime,
            "accuracies": [float(a) for a in self.accuracies],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "McReport":
        return cls(list(d["accuracies"]), float(d["sigma_d"]), int(d["seed"]), dict(d.get("metadata", {})))


def _test_accuracy(net: MultiExitNetwork, dataset: Dataset, limit, batch_size) -> float:
    split = dataset.test if limit is None else dataset.test.subset(limit)
    hits = 0
    for x, y in batches(split, batch_size):
        hits += int(round(accuracy(net.forward_backbone_only(x), y) * len(y)))
    return hits / len(split)


def mc_inference(net: MultiExitNetwork, dataset: Dataset, cfg: McConfig, metadata: dict | None = None) -> McReport:
    """Noisy-inference accuracy over ``cfg.mc`` independent perturbation draws.

    Only backbone weight matrices are perturbed; the noise scale's max|w| is
    likewise computed over the backbone, so results are identical whether or
    not exit parameters are present.  Run ``i`` draws from the (seed, i)
    stream, so any execution order yields the same report.
    """
    worker = net.clone()
    clean = {
        name: arr for name, arr in worker.perturbable().items() if name.startswith("backbone.")
    }
    spec = cfg.effective_variation
    accs = []
    for run in range(cfg.mc):
        if spec.sigma_d > 0 or spec.quantize_first:
            _, noisy = perturb_weights(clean, spec, cfg.seed, (EVAL_NOISE, run))
            worker.set_weights(noisy)
        accs.append(_test_accuracy(worker, dataset, cfg.eval_limit, cfg.batch_size))
    meta = dict(metadata or {})
    meta.setdefault("eval_limit", cfg.eval_limit)
    meta.setdefault("mc_batch_size", cfg.batch_size)
    return McReport(accs, spec.sigma_d, cfg.seed, meta)


# ---------------------------------------------------------------------------
# experiment recipes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Recipe:
    """A dataset-independent experiment plan: architecture + training + MC."""

    backbone: BackboneSpec
    exits: tuple | None = None  # None = the backbone's default exit layout
    train: TrainConfig = field(default_factory=TrainConfig)
    mc: McConfig = field(default_factory=McConfig)
    init_seed: int = 0

    def exit_specs(self):
        return list(self.exits) if self.exits is not None else default_exits(self.backbone)

    def build(self, with_exits=True) -> MultiExitNetwork:
        exits = self.exit_specs() if with_exits else []
        return build_network(self.backbone, exits=exits, init_seed=self.init_seed)

    def train_config(self, mode: str, sigma_d: float | None = None, alpha: float | None = None,
                     seed: int | None = None) -> TrainConfig:
        cfg = self.train
        var = cfg.variation if sigma_d is None else replace(cfg.variation, sigma_d=sigma_d)
        fb = cfg.feedback if alpha is None else replace(cfg.feedback, alpha=alpha)
        return replace(cfg, mode=mode, variation=var, feedback=fb, seed=cfg.seed if seed is None else seed)


class ModelStore:
    """Directory-backed cache of trained checkpoints and finished reports."""

    def __init__(self, root):
        self.root = root
        os.makedirs(root, exist_ok=True)

    @staticmethod
    def _key(payload: dict) -> str:
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:24]

    def model_path(self, payload: dict) -> str:
        return os.path.join(self.root, f"model-{self._key(payload)}.ckpt")

    def report_path(self, payload: dict) -> str:
        return os.path.join(self.root, f"report-{self._key(payload)}.json")

    def load_model(self, payload: dict):
        path = self.model_path(payload)
        if not os.path.exists(path):
            return None
        net, meta = load_network(path)
        history = TrainHistory(**meta["history"]) if "history" in meta else TrainHistory()
        history.diverged_at = tuple(history.diverged_at) if history.diverged_at else None
        return net, history

    def save_model(self, payload: dict, net, history: TrainHistory) -> None:
        meta = {"train": payload, "history": dataclasses.asdict(history)}
        save_checkpoint(self.model_path(payload), net, meta)

    def load_report(self, payload: dict):
        path = self.report_path(payload)
        if not os.path.exists(path):
            return None
        with open(path) as f:
            return McReport.from_dict(json.load(f))

    def save_report(self, payload: dict, report: McReport) -> None:
        with open(self.report_path(payload), "w") as f:
            json.dump(report.to_dict(), f, indent=1, sort_keys=True)


def _train_payload(recipe: Recipe, dataset: Dataset, cfg: TrainConfig) -> dict:
    return {
        "dataset": dataset.name,
        "n_train": len(dataset.train),
        "backbone": recipe.backbone.to_dict(),
        "exits": [dataclasses.asdict(e) for e in recipe.exit_specs()],
        "init_seed": recipe.init_seed,
        "train": cfg.to_dict(),
    }


def train_model(recipe: Recipe, dataset: Dataset, cfg: TrainConfig, store: ModelStore | None = None):
    """Train (or fetch from the store) one model under ``cfg``."""
    payload = _train_payload(recipe, dataset, cfg)
    if store is not None:
        cached = store.load_model(payload)
        if cached is not None:
            return cached
    net = recipe.build(with_exits=cfg.mode == "nft")
    history = train(net, dataset, cfg)
    if store is not None:
        store.save_model(payload, net, history)
    return net, history


def evaluate_model(recipe: Recipe, dataset: Dataset, net: MultiExitNetwork, sigma_d: float,
                   metadata: dict, train_payload: dict | None = None,
                   store: ModelStore | None = None) -> McReport:
    mc_cfg = replace(recipe.mc, sigma_d=sigma_d)
    payload = {"train": train_payload, "mc": mc_cfg.to_dict()}
    if store is not None and train_payload is not None:
        cached = store.load_report(payload)
        if cached is not None:
            return cached
    report = mc_inference(net, dataset, mc_cfg, metadata)
    if store is not None and train_payload is not None:
        store.save_report(payload, report)
    return report


def run_point(recipe: Recipe, dataset: Dataset, mode: str, train_sigma: float,
              eval_sigma: float, alpha: float | None = None, seed: int | None = None,
              store: ModelStore | None = None) -> McReport:
    """Train one model and evaluate it at one noise level (the basic cell)."""
    cfg = recipe.train_config(mode, sigma_d=train_sigma, alpha=alpha, seed=seed)
    net, history = train_model(recipe, dataset, cfg, store)
    meta = {
        "mode": mode,
        "alpha": cfg.feedback.alpha if mode == "nft" else None,
        "train_sigma_d": train_sigma,
        "train_seed": cfg.seed,
        "converged": history.converged,
        "clean_test_acc": history.test_acc[-1] if history.test_acc else None,
    }
    return evaluate_model(recipe, dataset, net, eval_sigma, meta,
                          _train_payload(recipe, dataset, cfg), store)


# ---------------------------------------------------------------------------
# study procedures
# ---------------------------------------------------------------------------


def sigma_sweep(recipe: Recipe, dataset: Dataset, sigmas=DEFAULT_SIGMA_GRID,
                modes=("vanilla", "noise", "nft"), alpha: float | None = None,
                seed: int | None = None, store: ModelStore | None = None) -> dict:
    """Accuracy-vs-sigma grid: one trained model per (mode, sigma) cell.

    Noise-trained modes train at the sigma they are evaluated at; vanilla
    trains once without noise.
    """
    table = {}
    for mode in modes:
        row = {}
        for sigma in sigmas:
            train_sigma = 0.0 if mode == "vanilla" else sigma
            row[sigma] = run_point(recipe, dataset, mode, train_sigma, sigma, alpha, seed, store)
        table[mode] = row
    return table


@dataclass
class AlphaSearchReport:
    best_alpha: float
    target_sigma: float
    results: dict  # alpha -> McReport

    def to_dict(self) -> dict:
        return {
            "best_alpha": self.best_alpha,
            "target_sigma": self.target_sigma,
            "results": {str(a): r.to_dict() for a, r in self.results.items()},
        }


def alpha_search(recipe: Recipe, dataset: Dataset, target_sigma: float, grid=ALPHA_GRID,
                 seed: int | None = None, store: ModelStore | None = None) -> AlphaSearchReport:
    """Grid-search the feedback strength; ties break toward the smaller alpha."""
    if not grid:
        raise ConfigError("alpha grid must be non-empty")
    results = {}
    for alpha in grid:
        results[alpha] = run_point(recipe, dataset, "nft", target_sigma, target_sigma, alpha, seed, store)
    best = max(sorted(results), key=lambda a: results[a].mean)  # ties go to the smaller alpha
    return AlphaSearchReport(best, target_sigma, results)


@dataclass
class ConvergenceReport:
    """Repeated-run convergence count under one training mode."""

    mode: str
    sigma_d: float
    run_means: list
    diverged: list  # per-run bool: training itself failed
    threshold: float = CONVERGENCE_THRESHOLD

    @property
    def runs(self) -> int:
        return len(self.run_means)

    @property
    def cross_run_average(self) -> float:
        return float(np.mean(self.run_means))

    @property
    def converged_flags(self) -> list:
        avg = self.cross_run_average
        return [
            (not div) and abs(m - avg) <= self.threshold
            for m, div in zip(self.run_means, self.diverged)
        ]

    @property
    def converged(self) -> int:
        return sum(self.converged_flags)

    @property
    def failed(self) -> int:
        return self.runs - self.converged

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "sigma_d": self.sigma_d,
            "runs": self.runs,
            "converged": self.converged,
            "failed": self.failed,
            "threshold": self.threshold,
            "cross_run_average": self.cross_run_average,
            "run_means": [float(m) for m in self.run_means],
            "diverged": list(self.diverged),
        }


def convergence_study(recipe: Recipe, dataset: Dataset, mode: str, sigma_d: float,
                      runs: int = 10, alpha: float | None = None,
                      store: ModelStore | None = None) -> ConvergenceReport:
    """Train ``runs`` independent models; a run fails when its mean noisy
    accuracy strays more than 5 points from the cross-run average (failed
    trainings count as failed regardless of accuracy, and are included in
    the average)."""
    if runs < 2:
        raise ConfigError(f"convergence study needs >= 2 runs, got {runs}")
    base_seed = recipe.train.seed
    means, diverged = [], []
    for k in range(runs):
        cfg = recipe.train_config(mode, sigma_d=sigma_d, alpha=alpha, seed=base_seed + k)
        net, history = train_model(recipe, dataset, cfg, store)
        report = evaluate_model(
            recipe, dataset, net, sigma_d,
            {"mode": mode, "run": k, "train_seed": cfg.seed},
            _train_payload(recipe, dataset, cfg), store,
        )
        means.append(report.mean)
        diverged.append(not history.converged)
    return ConvergenceReport(mode, sigma_d, means, diverged)


def exit_ablation(recipe: Recipe, dataset: Dataset, masks, sigma_d: float,
                  alpha: float | None = None, seed: int | None = None,
                  store: ModelStore | None = None) -> list:
    """One feedback training per exit mask; remaining coefficients unchanged."""
    results = []
    n_exits = len(recipe.exit_specs())
    for mask in masks:
        if len(mask) != n_exits:
            raise ConfigError(f"mask {mask} does not match {n_exits} exits")
        cfg = recipe.train_config("nft", sigma_d=sigma_d, alpha=alpha, seed=seed)
        cfg = replace(cfg, feedback=replace(cfg.feedback, exit_mask=tuple(bool(m) for m in mask)))
        net, history = train_model(recipe, dataset, cfg, store)
        report = evaluate_model(
            recipe, dataset, net, sigma_d,
            {"mode": "nft", "mask": list(mask), "alpha": cfg.feedback.alpha},
            _train_payload(recipe, dataset, cfg), store,
        )
        results.append({"mask": list(mask), "report": report})
    return results


def synergy_study(recipe: Recipe, dataset: Dataset, sigmas, alpha: float | None = None,
                  seed: int | None = None, store: ModelStore | None = None) -> dict:
    """Feedback training with vs without noise injection, evaluated across sigmas."""
    table = {"with_injection": {}, "without_injection": {}}
    for sigma in sigmas:
        table["with_injection"][sigma] = run_point(recipe, dataset, "nft", sigma, sigma, alpha, seed, store)
        table["without_injection"][sigma] = run_point(recipe, dataset, "nft", 0.0, sigma, alpha, seed, store)
    return table
