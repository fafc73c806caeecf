"""Alternating training of the conversation classifier and the representation
learner, with mutual data augmentation.

One outer iteration: (1) extend the training set with the current h table
(zeros on the first pass) and train the classifier for a fixed number of
epochs; (2) extract per-turn intermediate features b from the final traces;
(3) extend the data with b as an always-observed extra modality and train the
representation learner; repeat until the validation weighted accuracy stops
improving. Testing fine-tunes fresh representations on observed test slots
(labels unread), extends the test set with them, and runs the frozen
classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .crl import CrlConfig, CrlState, init_crl_state, crl_train_epoch, test_time_finetune
from .data import Dataset
from .engine import Tensor
from .metrics import MetricsReport, compute_report, weighted_accuracy
from .optim import Adam
from .panet import (
    PANetConfig,
    extract_b,
    forward_conversation,
    init_panet_params,
    predict_dataset,
    train_epoch,
)

__all__ = [
    "MODES",
    "M2r2Config",
    "AugmentedDataset",
    "extend_with",
    "converged",
    "TrainResult",
    "train",
    "test",
    "ablation_run",
]

MODES = ("full", "no_m2r2", "no_party_attention")

HKey = tuple[str, int]


@dataclass
class M2r2Config:
    d_global: int = 32
    d_party: int = 32
    d_emotion: int = 16
    q_max: int | None = None
    bidirectional: bool = False
    panet_lr: float = 1e-4
    panet_l2: float = 1e-5
    crl: CrlConfig = field(default_factory=CrlConfig)
    panet_epochs: int = 5
    crl_epochs: int = 5
    max_outer_iterations: int = 20
    convergence_eps: float = 0.001
    convergence_window: int = 3
    b_source: str = "emotion"
    # what the classifier phase sees as h: representations re-inferred on the
    # training set by the test-time procedure (matching the distribution the
    # classifier will face at test), or the representation learner's raw
    # label-aware table
    h_for_classifier: str = "reinferred"
    seed: int = 0

    def __post_init__(self):
        if self.panet_epochs < 1 or self.crl_epochs < 1:
            raise ValueError("phase epoch counts must be >= 1")
        if self.convergence_eps < 0:
            raise ValueError("convergence threshold must be nonnegative")

    def b_dim(self) -> int:
        return {
            "emotion": self.d_emotion,
            "global": self.d_global,
            "party": self.d_party,
        }[self.b_source]


@dataclass
class AugmentedDataset:
    """A dataset plus one attachment vector per utterance.

    Kind "h" feeds the classifier input extension; kind "b" registers the
    vectors as an always-observed extra modality for the representation
    learner.
    """

    base: Dataset
    table: dict[HKey, np.ndarray]
    kind: str


def extend_with(
    dataset: Dataset, table: dict[HKey, np.ndarray], kind: str
) -> AugmentedDataset:
    if kind not in ("h", "b"):
        raise ValueError(f"unknown attachment kind {kind!r}")
    expected = {
        (conv.id, u.t) for conv in dataset.conversations for u in conv.utterances
    }
    given = set(table)
    if given != expected:
        missing = sorted(expected - given)[:3]
        extra = sorted(given - expected)[:3]
        raise ValueError(
            f"attachment table does not cover the dataset exactly "
            f"(missing {missing}, extra {extra})"
        )
    dims = {np.asarray(v).shape for v in table.values()}
    if len(dims) != 1:
        raise ValueError(f"attachment vectors have mixed shapes: {sorted(dims)}")
    return AugmentedDataset(base=dataset, table=dict(table), kind=kind)


def converged(history: list[float], eps: float, window: int) -> bool:
    """True when the best value did not improve by more than ``eps`` over the
    last ``window`` entries."""
    if len(history) <= window:
        return False
    best_before = max(history[:-window])
    best_recent = max(history[-window:])
    return best_recent - best_before <= eps


@dataclass
class TrainResult:
    mode: str
    panet_params: dict[str, Tensor]
    panet_config: PANetConfig
    crl_state: CrlState | None
    crl_config: CrlConfig
    history: list[dict]
    best_iteration: int
    best_val_accuracy: float


def _panet_config(dataset: Dataset, config: M2r2Config, mode: str) -> PANetConfig:
    q_max = config.q_max if config.q_max is not None else dataset.max_parties()
    return PANetConfig(
        feature_dims=dict(dataset.dims),
        d_global=config.d_global,
        d_party=config.d_party,
        d_emotion=config.d_emotion,
        q_max=q_max,
        num_classes=dataset.num_classes,
        h_dim=config.crl.h_dim if mode == "full" else 0,
        bidirectional=config.bidirectional,
        party_attention=(mode != "no_party_attention"),
        learning_rate=config.panet_lr,
        l2_weight=config.panet_l2,
    )


def _zero_table(dataset: Dataset, dim: int) -> dict[HKey, np.ndarray]:
    return {
        (conv.id, u.t): np.zeros(dim)
        for conv in dataset.conversations
        for u in conv.utterances
    }


def _snapshot_crl(state: CrlState) -> CrlState:
    """Inference-ready deep copy: h values, networks and centroids, without
    optimizer state."""
    h_table = {
        k: Tensor(t.data.copy(), requires_grad=True) for k, t in state.h_table.items()
    }
    return CrlState(
        h_table=h_table,
        generators={m: g.copy() for m, g in state.generators.items()},
        critics={m: c.copy() for m, c in state.critics.items()},
        modality_dims=dict(state.modality_dims),
        h_dim=state.h_dim,
        num_classes=state.num_classes,
        centroids=state.centroids.copy(),
        centroid_ok=state.centroid_ok.copy(),
    )


def train(
    train_set: Dataset,
    val_set: Dataset,
    config: M2r2Config,
    mode: str = "full",
) -> TrainResult:
    """Run the alternating loop and return the best-validation checkpoint.

    ``mode`` selects the ablation variant: "full" is the complete pipeline,
    "no_m2r2" trains the classifier alone on zero-filled inputs, and
    "no_party_attention" additionally replaces each party context with the
    party state itself.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    overlap = {c.id for c in train_set.conversations} & {
        c.id for c in val_set.conversations
    }
    if overlap:
        raise ValueError(f"train/val sets share conversations: {sorted(overlap)[:3]}")

    pcfg = _panet_config(train_set, config, mode)
    base = config.seed
    params = init_panet_params(pcfg, seed=base + 11)
    optimizer = Adam(params, lr=pcfg.learning_rate)
    use_crl = mode == "full"

    crl_state: CrlState | None = None
    history: list[dict] = []
    best_acc = -1.0
    best_iter = 0
    best_params: dict[str, Tensor] | None = None
    best_crl: CrlState | None = None

    for iteration in range(1, config.max_outer_iterations + 1):
        # (1) classifier phase on the h-extended data (zeros first time)
        if use_crl:
            if crl_state is None:
                h_table = _zero_table(train_set, config.crl.h_dim)
                crl_for_eval = None
            else:
                crl_for_eval = crl_state
                if config.h_for_classifier == "reinferred":
                    h_table, _ = test_time_finetune(
                        train_set, crl_state, config.crl, seed=base + 500 + iteration
                    )
                elif config.h_for_classifier == "learned":
                    h_table = crl_state.h_values()
                else:
                    raise ValueError(
                        f"unknown h_for_classifier {config.h_for_classifier!r}"
                    )
        else:
            h_table = None
            crl_for_eval = None

        shuffle_rng = np.random.default_rng(base + 100 + iteration)
        epoch_loss = epoch_acc = 0.0
        try:
            for _ in range(config.panet_epochs):
                epoch_loss, epoch_acc = train_epoch(
                    train_set, params, pcfg, optimizer, h_table, shuffle_rng
                )
        except RuntimeError as exc:
            raise RuntimeError(f"outer iteration {iteration}: {exc}") from exc

        # (2) intermediate features from the final traces
        b_table: dict[HKey, np.ndarray] = {}
        if use_crl:
            for conv in train_set.conversations:
                trace = forward_conversation(conv, params, pcfg, h_table)
                for t, vec in enumerate(extract_b(trace, config.b_source)):
                    b_table[(conv.id, t)] = vec

        # validation uses the same h source the classifier was trained with:
        # zeros on the first pass, else representations fine-tuned from the
        # state that produced this iteration's training h table
        if use_crl and crl_for_eval is not None:
            val_h, _ = test_time_finetune(
                val_set, crl_for_eval, config.crl, seed=base + 300 + iteration
            )
        elif use_crl:
            val_h = _zero_table(val_set, config.crl.h_dim)
        else:
            val_h = None
        preds, labels = predict_dataset(val_set, params, pcfg, val_h)
        val_acc = weighted_accuracy(preds, labels)

        if val_acc > best_acc:
            best_acc = val_acc
            best_iter = iteration
            best_params = {
                k: Tensor(t.data.copy(), requires_grad=True) for k, t in params.items()
            }
            best_crl = _snapshot_crl(crl_for_eval) if crl_for_eval is not None else None

        entry = {
            "iteration": iteration,
            "val_accuracy": val_acc,
            "panet_loss": epoch_loss,
            "panet_train_accuracy": epoch_acc,
            "crl_losses": None,
        }

        # (3)+(4)+(5) representation phase on the b-extended data
        if use_crl:
            if crl_state is None:
                dims = dict(train_set.dims)
                dims["b"] = config.b_dim()
                crl_state = init_crl_state(
                    train_set, config.crl, modality_dims=dims, seed=base + 23
                )
            extension = extend_with(train_set, b_table, "b")
            crl_rng = np.random.default_rng(base + 200 + iteration)
            components = {}
            try:
                for _ in range(config.crl_epochs):
                    components = crl_train_epoch(
                        train_set,
                        crl_state,
                        config.crl,
                        extra={"b": extension.table},
                        epoch_rng=crl_rng,
                    )
            except RuntimeError as exc:
                raise RuntimeError(f"outer iteration {iteration}: {exc}") from exc
            entry["crl_losses"] = components

        history.append(entry)
        if converged(
            [e["val_accuracy"] for e in history],
            config.convergence_eps,
            config.convergence_window,
        ):
            break

    return TrainResult(
        mode=mode,
        panet_params=best_params,
        panet_config=pcfg,
        crl_state=best_crl,
        crl_config=config.crl,
        history=history,
        best_iteration=best_iter,
        best_val_accuracy=best_acc,
    )


def test(
    test_set: Dataset,
    result: TrainResult,
    config: M2r2Config,
) -> tuple[list[int], list[int], MetricsReport, dict[HKey, np.ndarray] | None]:
    """Two-phase testing: fine-tune representations on observed test slots
    (no labels), extend the test set with them, then run the frozen
    classifier. Labels are consumed only by the final metrics."""
    pcfg = result.panet_config
    if pcfg.h_dim > 0:
        if result.crl_state is not None:
            h_star, _ = test_time_finetune(
                test_set, result.crl_state, config.crl, seed=config.seed + 400
            )
            extend_with(test_set, h_star, "h")
        else:
            h_star = _zero_table(test_set, pcfg.h_dim)
    else:
        h_star = None
    preds, labels = predict_dataset(test_set, result.panet_params, pcfg, h_star)
    report = compute_report(preds, labels, test_set.num_classes)
    return preds, labels, report, h_star


def ablation_run(
    mode: str,
    train_set: Dataset,
    val_set: Dataset,
    test_set: Dataset,
    config: M2r2Config,
) -> dict:
    """Train and test one ablation variant; all modes emit the same schema."""
    result = train(train_set, val_set, config, mode=mode)
    _, _, report, _ = test(test_set, result, config)
    return {
        "mode": mode,
        "best_iteration": result.best_iteration,
        "val_accuracy": result.best_val_accuracy,
        "metrics": report.to_dict(),
    }
