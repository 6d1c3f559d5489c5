"""
Training protocol.

Phase 1 anneals beta linearly from 0 to 1.0 over the planned number of steps
and records the beta in effect at the epoch with the best validation nDCG.
Phase 2 re-initializes the network from a fresh seed-derived stream and anneals
up to that selected beta. Each phase keeps the best checkpoint and stops after
``patience`` consecutive epochs without a strict improvement.

Per phase directory:
    best.ckpt          parameters at the best validation score
    last.ckpt          end-of-epoch state for --resume (Adam moments, RNG states, bookkeeping)
    train_log.jsonl    one EpochReport per line
    beta_trace.csv     beta used at every optimizer step
"""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from cvaerec.core.exceptions import CheckpointError, ConfigError, NonFiniteError, TrainingDivergedError
from cvaerec.models.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cvaerec.models.cvae import PARAM_ORDER, ConditionedVAE, LossBreakdown, ModelParams, NoiseDraw, gradient_norms
from cvaerec.schemas.reports import EpochReport, PhaseSummary
from cvaerec.schemas.run_config import RunConfig
from cvaerec.services.data_service import ExampleSet, SplitBundle, unconditioned_examples
from cvaerec.services.evaluation_service import validation_score
from cvaerec.utils.ndmath import AdamState, RngStream, adam_update

logger = logging.getLogger(__name__)

ValidationFn = Callable[[ConditionedVAE], float]


def anneal_beta(global_step: int, cap: float, total_steps: int) -> float:
    """beta = cap * min(1, step / total_steps)"""
    if global_step < 0:
        raise ValueError(f"global_step must be >= 0, got {global_step}")
    if total_steps <= 0:
        return float(cap)
    return float(cap) * min(1.0, global_step / total_steps)


def planned_steps(n_examples: int, batch_size: int, max_epochs: int) -> int:
    return max_epochs * max(1, math.ceil(n_examples / batch_size))


@dataclass
class PhaseState:
    """Mutable bookkeeping of one phase; everything last.ckpt needs to resume"""
    phase: int
    cap: float
    total_steps: int
    epoch: int = 0
    global_step: int = 0
    best_score: float = -math.inf
    best_epoch: int = 0
    best_beta: float = 0.0
    stale: int = 0
    stopped_early: bool = False
    reports: List[EpochReport] = field(default_factory=list)

    def to_manifest(self) -> Dict:
        return {
            "phase": self.phase, "cap": self.cap, "total_steps": self.total_steps,
            "epoch": self.epoch, "global_step": self.global_step,
            "best_score": self.best_score if math.isfinite(self.best_score) else None,
            "best_epoch": self.best_epoch, "best_beta": self.best_beta, "stale": self.stale,
            "stopped_early": self.stopped_early,
        }

    @classmethod
    def from_manifest(cls, data: Dict) -> "PhaseState":
        best = data.get("best_score")
        return cls(
            phase=data["phase"], cap=data["cap"], total_steps=data["total_steps"],
            epoch=data["epoch"], global_step=data["global_step"],
            best_score=-math.inf if best is None else best,
            best_epoch=data["best_epoch"], best_beta=data["best_beta"], stale=data["stale"],
            stopped_early=data.get("stopped_early", False),
        )


@dataclass
class PhaseResult:
    summary: PhaseSummary
    best_params: ModelParams
    beta_trace: List[float]
    reports: List[EpochReport]


@dataclass
class TrainingResult:
    phases: List[PhaseResult]
    selected_beta: float
    checkpoint_path: Path


class TrainingService:
    """Mini-batch Adam training of one C-VAE (or an s = 0 baseline) over a split"""

    def __init__(self, bundle: SplitBundle, config: RunConfig, out_dir: str,
                 validation_fn: Optional[ValidationFn] = None, unconditioned: bool = False,
                 examples: Optional[ExampleSet] = None):
        self.bundle = bundle
        self.config = config
        self.out_dir = Path(out_dir)
        self.unconditioned = unconditioned
        self.dtype = np.dtype(config.model.dtype)
        if examples is not None:
            self.examples = examples
        elif unconditioned:
            self.examples = unconditioned_examples(bundle.train_users)
        else:
            self.examples = bundle.examples
        if len(self.examples) == 0:
            raise ConfigError("no training examples")
        self.s = 0 if unconditioned else bundle.s
        self.item_conditions = None if unconditioned else bundle.conditions
        self.validation_fn = validation_fn or self._default_validation

    # -- helpers ------------------------------------------------------------

    def _default_validation(self, model: ConditionedVAE) -> float:
        kind = self.config.train.validation_protocol
        if self.unconditioned:
            kind = "normal"
        return validation_score(model, self.bundle.validation, self.item_conditions, kind,
                                self.config.train.validation_k)

    def _streams(self, phase: int) -> Tuple[RngStream, RngStream, RngStream]:
        root = RngStream(self.config.train.seed, "train").child(f"phase{phase}")
        return root.child("init"), root.child("shuffle"), root.child("noise")

    def _new_model(self, init_rng: RngStream) -> ConditionedVAE:
        mc = self.config.model
        return ConditionedVAE.create(
            self.bundle.m, self.s, mc.hidden_dim, mc.latent_dim, init_rng,
            mc.dropout_p, mc.normalize_before_dropout, self.dtype,
        )

    def _new_adam(self, params: ModelParams) -> Dict[str, AdamState]:
        return {name: AdamState.for_param(value, lr=self.config.train.lr) for name, value in params.items()}

    def _batch(self, idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        users = self.examples.users[idx]
        ratings = self.bundle.train[users].toarray().astype(self.dtype)
        return ratings, self.examples.conditions[idx]

    def _phase_dir(self, phase: int) -> Path:
        return self.out_dir / f"phase{phase}"

    def _checkpoint(self, model: ConditionedVAE, adam: Optional[Dict[str, AdamState]], manifest: Dict) -> Checkpoint:
        base = {
            "seed": self.config.train.seed,
            "unconditioned": self.unconditioned,
            "category_names": [] if self.unconditioned else list(self.bundle.conditions.category_names),
        }
        base.update(manifest)
        return Checkpoint(model.params.copy(), adam, base, model.dropout_p, model.normalize_before_dropout)

    def batch_gradients(self, model: ConditionedVAE, ratings: np.ndarray, conditions: np.ndarray,
                        beta: float, noise_rng: RngStream) -> Tuple[LossBreakdown, ModelParams]:
        """
        Loss and gradients of one batch. With threads > 0 the batch noise is drawn
        up front in the single-threaded order and chunks run in a thread pool; the
        chunk gradients are weighted by chunk size.
        """
        threads = self.config.train.threads
        batch = ratings.shape[0]
        if threads <= 0 or batch < 2:
            breakdown, cache = model.forward_loss(ratings, conditions, self.item_conditions, beta, noise_rng)
            return breakdown, model.backward(cache)

        noise = model.draw_noise(batch, noise_rng)
        bounds = np.array_split(np.arange(batch), min(threads, batch))

        def run(chunk: np.ndarray):
            draw = NoiseDraw(noise.dropout_mask[chunk], noise.eps[chunk])
            loss, cache = model.forward_loss(ratings[chunk], conditions[chunk], self.item_conditions,
                                             beta, None, True, draw)
            return len(chunk) / batch, loss, model.backward(cache)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, bounds))

        grads = {name: np.zeros_like(value) for name, value in model.params.items()}
        neg_ll = kl = 0.0
        for weight, loss, chunk_grads in results:
            neg_ll += weight * loss.neg_ll
            kl += weight * loss.kl
            for name in PARAM_ORDER:
                grads[name] += weight * getattr(chunk_grads, name)
        return LossBreakdown(neg_ll, kl, beta), ModelParams(s=model.params.s, **grads)

    # -- phases -------------------------------------------------------------

    def run_phase(self, phase: int, cap: float, resume: bool = False) -> PhaseResult:
        tc = self.config.train
        n = len(self.examples)
        total_steps = tc.anneal_total_steps or planned_steps(n, tc.batch_size, tc.max_epochs)
        phase_dir = self._phase_dir(phase)
        phase_dir.mkdir(parents=True, exist_ok=True)
        log_path = phase_dir / "train_log.jsonl"
        init_rng, shuffle_rng, noise_rng = self._streams(phase)

        state = PhaseState(phase=phase, cap=cap, total_steps=total_steps)
        model = self._new_model(init_rng)
        adam = self._new_adam(model.params)
        best_params = model.params.copy()

        if resume and (phase_dir / "last.ckpt").exists():
            model, adam, state, best_params = self._restore(phase_dir, shuffle_rng, noise_rng, cap)
            total_steps = state.total_steps
            logger.info(f"Resuming phase {phase} after epoch {state.epoch} (step {state.global_step})")
        else:
            log_path.write_text("", encoding="utf-8")

        beta_trace = [anneal_beta(step, cap, total_steps) for step in range(state.global_step)]
        logger.info(
            f"Phase {phase}: {n:,} examples, batch {tc.batch_size}, cap {cap:.4f}, "
            f"anneal over {total_steps:,} steps, up to {tc.max_epochs} epochs"
        )

        while state.epoch < tc.max_epochs and not state.stopped_early:
            started = time.perf_counter()
            order = shuffle_rng.permutation(n)
            sums = np.zeros(3)
            beta = anneal_beta(state.global_step, cap, total_steps)

            for start in range(0, n, tc.batch_size):
                idx = order[start:start + tc.batch_size]
                beta = anneal_beta(state.global_step, cap, total_steps)
                ratings, conditions = self._batch(idx)
                breakdown, grads = self.batch_gradients(model, ratings, conditions, beta, noise_rng)
                if not breakdown.is_finite():
                    self._diverged(state, best_params, grads, breakdown)
                try:
                    for name, param in model.params.items():
                        adam_update(param, getattr(grads, name), adam[name])
                except NonFiniteError as e:
                    self._diverged(state, best_params, grads, breakdown, str(e))
                sums += len(idx) * np.array([breakdown.total, breakdown.neg_ll, breakdown.kl])
                beta_trace.append(beta)
                state.global_step += 1

            state.epoch += 1
            score = float(self.validation_fn(model))
            means = sums / n
            report = EpochReport(
                phase=phase, epoch=state.epoch, mean_train_loss=float(means[0]), mean_nll=float(means[1]),
                mean_kl=float(means[2]), current_beta=beta, val_ndcg100=score,
                wall_time=time.perf_counter() - started,
            )
            state.reports.append(report)
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(report.model_dump_json() + "\n")

            if score > state.best_score:
                state.best_score = score
                state.best_epoch = state.epoch
                state.best_beta = beta
                state.stale = 0
                best_params = model.params.copy()
                save_checkpoint(str(phase_dir / "best.ckpt"), self._checkpoint(model, None, {
                    "phase": phase, "epoch": state.epoch, "beta": beta, "cap": cap, "val_score": score,
                    "global_step": state.global_step,
                }))
            else:
                state.stale += 1
                if state.stale >= tc.patience:
                    state.stopped_early = True

            logger.info(
                f"Phase {phase} epoch {state.epoch}: loss {report.mean_train_loss:.4f} "
                f"(nll {report.mean_nll:.4f}, kl {report.mean_kl:.4f}), beta {beta:.4f}, "
                f"val nDCG@{tc.validation_k} {score:.4f}"
                + (" *" if state.stale == 0 else f" (no improvement for {state.stale})")
            )
            self._save_last(phase_dir, model, adam, state, shuffle_rng, noise_rng)

        if state.stopped_early:
            logger.info(f"Phase {phase} stopped early after {state.epoch} epochs")
        pd.DataFrame({"step": np.arange(len(beta_trace)), "beta": beta_trace}).to_csv(
            phase_dir / "beta_trace.csv", index=False, lineterminator="\n", float_format="%.10g")

        summary = PhaseSummary(
            phase=phase, cap=cap, best_epoch=state.best_epoch, best_score=state.best_score,
            best_beta=state.best_beta, epochs_run=state.epoch, stopped_early=state.stopped_early,
            checkpoint_path=str(phase_dir / "best.ckpt"),
        )
        logger.info(
            f"Phase {phase} best: epoch {state.best_epoch}, val {state.best_score:.4f}, beta {state.best_beta:.4f}"
        )
        return PhaseResult(summary, best_params, beta_trace, state.reports)

    def _diverged(self, state: PhaseState, best_params: ModelParams, grads: ModelParams,
                  breakdown: LossBreakdown, detail: str = "") -> None:
        diagnostics = {
            "phase": state.phase, "epoch": state.epoch + 1, "global_step": state.global_step,
            "neg_ll": breakdown.neg_ll, "kl": breakdown.kl, "beta": breakdown.beta,
            "gradient_norms": gradient_norms(grads),
        }
        logger.error(f"Training diverged at step {state.global_step}: {diagnostics}")
        raise TrainingDivergedError(
            f"non-finite loss in phase {state.phase} at step {state.global_step}{': ' + detail if detail else ''}",
            last_good=best_params, diagnostics=diagnostics,
        )

    def _save_last(self, phase_dir: Path, model: ConditionedVAE, adam: Dict[str, AdamState], state: PhaseState,
                   shuffle_rng: RngStream, noise_rng: RngStream) -> None:
        manifest = {
            "state": state.to_manifest(),
            "reports": [r.model_dump(exclude={"wall_time"}) for r in state.reports],
            "rng": {"shuffle": shuffle_rng.get_state(), "noise": noise_rng.get_state()},
        }
        save_checkpoint(str(phase_dir / "last.ckpt"), self._checkpoint(model, adam, manifest))

    def _restore(self, phase_dir: Path, shuffle_rng: RngStream, noise_rng: RngStream, cap: float):
        last = load_checkpoint(str(phase_dir / "last.ckpt"), self.bundle.m, self.s)
        if last.adam_states is None or "state" not in last.manifest:
            raise CheckpointError(f"{phase_dir / 'last.ckpt'} has no resume state")
        state = PhaseState.from_manifest(last.manifest["state"])
        if not math.isclose(state.cap, cap):
            raise CheckpointError(f"last.ckpt was written with cap {state.cap}, resuming with {cap}")
        state.reports = [EpochReport(**r) for r in last.manifest.get("reports", [])]
        shuffle_rng.set_state(last.manifest["rng"]["shuffle"])
        noise_rng.set_state(last.manifest["rng"]["noise"])
        best_path = phase_dir / "best.ckpt"
        best_params = load_checkpoint(str(best_path)).params if best_path.exists() else last.params.copy()
        return last.to_model(), last.adam_states, state, best_params

    # -- protocol -----------------------------------------------------------

    def two_phase_train(self, phases: str = "both", beta_cap: Optional[float] = None,
                        resume: bool = False) -> TrainingResult:
        """
        ``phases`` is "1", "2" or "both". Phase 2 alone needs ``beta_cap`` or a
        previous phase-1 summary in the output directory.
        """
        if phases not in ("1", "2", "both"):
            raise ConfigError(f"phase must be 1, 2 or both, got '{phases}'")
        results: List[PhaseResult] = []
        summary_path = self.out_dir / "training_summary.json"

        if phases in ("1", "both"):
            cap1 = self.config.train.anneal_cap if beta_cap is None or phases == "both" else beta_cap
            results.append(self.run_phase(1, cap1, resume))
            selected = results[0].summary.best_beta
        if phases == "2" or phases == "both":
            if phases == "both":
                cap2 = selected if beta_cap is None else beta_cap
            elif beta_cap is not None:
                cap2 = beta_cap
            elif summary_path.exists():
                cap2 = json.loads(summary_path.read_text(encoding="utf-8"))["selected_beta"]
            else:
                raise ConfigError("phase 2 needs --beta-cap or a completed phase 1")
            results.append(self.run_phase(2, cap2, resume))
            selected = cap2
            if results[0].summary.phase == 1:
                gap = results[0].summary.best_score - results[-1].summary.best_score
                if gap > 0.01:
                    logger.warning(f"Phase 2 best validation score is {gap:.4f} below phase 1")

        final = results[-1]
        summary = {
            "selected_beta": selected,
            "final_checkpoint": final.summary.checkpoint_path,
            "unconditioned": self.unconditioned,
            "phase_reinitialized": True,
            "phases": [r.summary.model_dump() for r in results],
        }
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return TrainingResult(results, selected, Path(final.summary.checkpoint_path))
