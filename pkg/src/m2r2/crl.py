"""Common representation learning for utterance-level missing modalities.

Each utterance owns a learnable vector h from which every modality can be
regenerated by a per-modality network. Training jointly optimizes the h table
and the generators under three terms: masked reconstruction of observed
features, a centroid-margin classification loss on h, and a Wasserstein
adversarial loss whose per-modality critics separate observed features from
reconstructions at missing slots (with a gradient penalty on the critic).
At test time the generators are copied and fine-tuned, together with fresh h
vectors, on the observed test slots alone; labels are never read.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as en
from .data import MODALITIES, Conversation, Dataset
from .engine import Tensor
from .optim import Adam

__all__ = [
    "CrlConfig",
    "Mlp",
    "CrlState",
    "init_crl_state",
    "reconstruct",
    "reconstruction_loss",
    "similarity",
    "classification_loss",
    "predict_from_h",
    "critic_input_gradient",
    "gradient_penalty_exact",
    "gradient_penalty_surrogate",
    "adversarial_step",
    "crl_train_epoch",
    "composite_loss",
    "test_time_finetune",
    "export_embeddings",
]

HKey = tuple[str, int]


@dataclass
class CrlConfig:
    h_dim: int = 16
    lambda_recon: float = 1.0
    lambda_cls: float = 10.0
    lambda_adv: float = 10.0
    lambda_gp: float = 1.0
    critic_steps: int = 2
    learning_rate: float = 1e-3
    h_learning_rate: float = 0.15
    l2_weight: float = 1e-3
    bn_momentum: float = 0.9
    gp_fd_step: float = 1e-4
    h_init_std: float = 0.01
    leaky_slope: float = 0.2
    # test-time inversion is regularized implicitly: moderate steps from the
    # train-representation mean, with the generator copies nearly frozen
    test_finetune_epochs: int = 15
    test_h_learning_rate: float = 0.05
    test_gen_learning_rate: float = 1e-4
    reservoir_cap: int = 256
    hidden_widths: tuple[int, ...] | None = None
    critic_widths: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.h_dim < 1:
            raise ValueError(f"h_dim must be >= 1, got {self.h_dim}")
        for name in ("lambda_recon", "lambda_cls", "lambda_adv", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        width = max(64, 2 * self.h_dim)
        if self.hidden_widths is None:
            self.hidden_widths = (width,)
        else:
            self.hidden_widths = tuple(self.hidden_widths)
        if self.critic_widths is None:
            self.critic_widths = (width, width)
        else:
            self.critic_widths = tuple(self.critic_widths)


class Mlp:
    """Fully connected stack. With ``norm`` the hidden layers are
    linear -> batch norm -> leaky ReLU; without it linear+bias -> leaky ReLU.
    The output layer is plain affine."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_dim: int,
        hidden: tuple[int, ...],
        out_dim: int,
        norm: bool,
        bn_momentum: float = 0.9,
        slope: float = 0.2,
    ):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.out_dim = out_dim
        self.norm = norm
        self.bn_momentum = bn_momentum
        self.slope = slope
        self.weights: dict[str, Tensor] = {}
        self.bn_mean: list[np.ndarray] = []
        self.bn_var: list[np.ndarray] = []
        prev = in_dim
        for i, width in enumerate(self.hidden):
            self.weights[f"w{i}"] = Tensor(
                rng.normal(scale=1.0 / np.sqrt(prev), size=(prev, width)),
                requires_grad=True,
            )
            if norm:
                self.weights[f"bn_gamma{i}"] = Tensor(np.ones(width), requires_grad=True)
                self.weights[f"bn_beta{i}"] = Tensor(np.zeros(width), requires_grad=True)
                self.bn_mean.append(np.zeros(width))
                self.bn_var.append(np.ones(width))
            else:
                self.weights[f"b{i}"] = Tensor(np.zeros(width), requires_grad=True)
            prev = width
        self.weights["w_out"] = Tensor(
            rng.normal(scale=1.0 / np.sqrt(prev), size=(prev, out_dim)),
            requires_grad=True,
        )
        self.weights["b_out"] = Tensor(np.zeros(out_dim), requires_grad=True)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        """Map an (N, in_dim) batch to (N, out_dim)."""
        for i in range(len(self.hidden)):
            x = x @ self.weights[f"w{i}"]
            if self.norm:
                x = en.batch_norm(
                    x,
                    self.weights[f"bn_gamma{i}"],
                    self.weights[f"bn_beta{i}"],
                    self.bn_mean[i],
                    self.bn_var[i],
                    momentum=self.bn_momentum,
                    training=training,
                )
            else:
                x = en.add_bias(x, self.weights[f"b{i}"])
            x = en.leaky_relu(x, self.slope)
        return en.add_bias(x @ self.weights["w_out"], self.weights["b_out"])

    def parameters(self) -> dict[str, Tensor]:
        return self.weights

    def copy(self) -> "Mlp":
        dup = Mlp.__new__(Mlp)
        dup.in_dim = self.in_dim
        dup.hidden = self.hidden
        dup.out_dim = self.out_dim
        dup.norm = self.norm
        dup.bn_momentum = self.bn_momentum
        dup.slope = self.slope
        dup.weights = {
            k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.weights.items()
        }
        dup.bn_mean = [m.copy() for m in self.bn_mean]
        dup.bn_var = [v.copy() for v in self.bn_var]
        return dup


@dataclass
class CrlState:
    """Learnable per-utterance vectors plus generators, critics and centroids."""

    h_table: dict[HKey, Tensor]
    generators: dict[str, Mlp]
    critics: dict[str, Mlp]
    modality_dims: dict[str, int]
    h_dim: int
    num_classes: int
    centroids: np.ndarray
    centroid_ok: np.ndarray
    gen_opt: Adam | None = None
    h_opts: dict[str, Adam] = field(default_factory=dict)
    critic_opts: dict[str, Adam] = field(default_factory=dict)

    def h_values(self) -> dict[HKey, np.ndarray]:
        return {k: t.data.copy() for k, t in self.h_table.items()}

    def refresh_centroids(self, dataset: Dataset) -> None:
        """Class centroid = mean of the current h vectors carrying that label."""
        sums = np.zeros((self.num_classes, self.h_dim))
        counts = np.zeros(self.num_classes)
        for conv in dataset.conversations:
            for u in conv.utterances:
                h = self.h_table.get((conv.id, u.t))
                if h is None:
                    continue
                sums[u.label] += h.data
                counts[u.label] += 1
        for c in range(self.num_classes):
            if counts[c] > 0:
                self.centroids[c] = sums[c] / counts[c]
                self.centroid_ok[c] = True


def init_crl_state(
    dataset: Dataset,
    config: CrlConfig,
    modality_dims: dict[str, int],
    seed: int,
) -> CrlState:
    """Build h vectors for every utterance and one generator/critic per
    modality. Component seeds are decoupled so changing, say, the critic
    initialization cannot shift the h draws."""
    rng_h = np.random.default_rng(seed)
    h_table: dict[HKey, Tensor] = {}
    for conv in dataset.conversations:
        for u in conv.utterances:
            h_table[(conv.id, u.t)] = Tensor(
                config.h_init_std * rng_h.standard_normal(config.h_dim),
                requires_grad=True,
            )
    generators = {}
    critics = {}
    for i, (mod, dim) in enumerate(modality_dims.items()):
        generators[mod] = Mlp(
            np.random.default_rng(seed + 1000 + i),
            config.h_dim,
            config.hidden_widths,
            dim,
            norm=True,
            bn_momentum=config.bn_momentum,
            slope=config.leaky_slope,
        )
        critics[mod] = Mlp(
            np.random.default_rng(seed + 2000 + i),
            dim,
            config.critic_widths,
            1,
            norm=False,
            slope=config.leaky_slope,
        )
    state = CrlState(
        h_table=h_table,
        generators=generators,
        critics=critics,
        modality_dims=dict(modality_dims),
        h_dim=config.h_dim,
        num_classes=dataset.num_classes,
        centroids=np.zeros((dataset.num_classes, config.h_dim)),
        centroid_ok=np.zeros(dataset.num_classes, dtype=bool),
    )
    gen_params: dict[str, Tensor] = {}
    for mod, gen in generators.items():
        for k, t in gen.parameters().items():
            gen_params[f"gen:{mod}:{k}"] = t
    state.gen_opt = Adam(gen_params, lr=config.learning_rate)
    state.h_opts = {
        conv.id: Adam(
            {f"h:{u.t}": h_table[(conv.id, u.t)] for u in conv.utterances},
            lr=config.h_learning_rate,
        )
        for conv in dataset.conversations
    }
    state.critic_opts = {
        mod: Adam(
            {k: t for k, t in critic.parameters().items()}, lr=config.learning_rate
        )
        for mod, critic in critics.items()
    }
    return state


def reconstruct(h: np.ndarray | Tensor, modality: str, state: CrlState) -> np.ndarray:
    """Regenerate one modality vector from a representation (eval mode)."""
    if modality not in state.generators:
        raise KeyError(f"unknown modality {modality!r}")
    x = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float64))
    out = state.generators[modality].forward(x.reshape((1, -1)), training=False)
    return out.data.reshape(-1).copy()


def _conv_targets(
    conv: Conversation,
    state: CrlState,
    extra: dict[str, dict[HKey, np.ndarray]] | None,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per modality: (T x D_m target matrix, T observation mask)."""
    t_len = len(conv)
    out = {}
    for mod, dim in state.modality_dims.items():
        target = np.zeros((t_len, dim))
        observed = np.zeros(t_len, dtype=bool)
        if mod in MODALITIES:
            for t, u in enumerate(conv.utterances):
                vec = u.features.get(mod)
                if vec is not None:
                    target[t] = vec
                    observed[t] = True
        else:
            if extra is None or mod not in extra:
                raise KeyError(f"no target table supplied for extra modality {mod!r}")
            table = extra[mod]
            for t in range(t_len):
                target[t] = table[(conv.id, t)]
                observed[t] = True
        out[mod] = (target, observed)
    return out


def _batch_h(conv: Conversation, state: CrlState) -> Tensor:
    return en.stack_rows([state.h_table[(conv.id, u.t)] for u in conv.utterances])


def reconstruction_loss(
    conv: Conversation,
    state: CrlState,
    config: CrlConfig,
    extra: dict[str, dict[HKey, np.ndarray]] | None = None,
    outputs: dict[str, Tensor] | None = None,
) -> Tensor:
    """Mean over turns of the summed squared error at observed slots only.

    ``outputs`` can carry precomputed generator batches (keyed by modality)
    so one forward pass serves both this loss and the adversarial term.
    """
    targets = _conv_targets(conv, state, extra)
    if outputs is None:
        h = _batch_h(conv, state)
        outputs = {
            mod: state.generators[mod].forward(h, training=True)
            for mod in state.modality_dims
        }
    total = None
    for mod in state.modality_dims:
        target, observed = targets[mod]
        mask = np.repeat(observed[:, None], target.shape[1], axis=1).astype(float)
        masked = (outputs[mod] - Tensor(target)) * Tensor(mask)
        term = en.square(masked).sum()
        total = term if total is None else total + term
    return total * (1.0 / len(conv))


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Negated squared Euclidean distance; identical vectors score 0 (max)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"similarity: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return -float(d @ d)


def predict_from_h(h: np.ndarray, centroids: np.ndarray, centroid_ok=None) -> int:
    """Nearest centroid by the similarity score; ties break to the lowest class."""
    if centroids.size == 0:
        raise ValueError("centroid table is empty")
    if centroid_ok is not None and not np.all(centroid_ok):
        missing = int(np.nonzero(~np.asarray(centroid_ok))[0][0])
        raise ValueError(f"no centroid for class {missing}")
    scores = -((centroids - np.asarray(h)) ** 2).sum(axis=1)
    return int(np.argmax(scores))


def classification_loss(
    h: Tensor, label: int, centroids: np.ndarray, centroid_ok=None
) -> Tensor:
    """Margin loss max(0, delta + F(centroid_pred, h) - F(centroid_true, h)).

    The predicted class is the nearest centroid; delta is 0 on a correct
    prediction and 1 otherwise, so a correct prediction costs exactly zero.
    """
    pred = predict_from_h(h.data, centroids, centroid_ok)
    if pred == label:
        return Tensor(0.0)
    d_true = en.square(h - Tensor(centroids[label])).sum()
    d_pred = en.square(h - Tensor(centroids[pred])).sum()
    # F(mu_pred, h) - F(mu_true, h) = d_true - d_pred
    return en.relu(1.0 + (d_true - d_pred))


def _classification_batch(
    conv: Conversation, state: CrlState
) -> Tensor:
    total = None
    for u in conv.utterances:
        term = classification_loss(
            state.h_table[(conv.id, u.t)], u.label, state.centroids, state.centroid_ok
        )
        total = term if total is None else total + term
    return total * (1.0 / len(conv))


def critic_input_gradient(critic: Mlp, u_row: np.ndarray) -> np.ndarray:
    """Exact gradient of the critic score with respect to its input."""
    x = Tensor(np.asarray(u_row, dtype=np.float64).reshape(1, -1), requires_grad=True)
    out = critic.forward(x, training=False).sum()
    en.backward(out)
    return x.grad.reshape(-1).copy()


def gradient_penalty_exact(critic: Mlp, u_rows: np.ndarray) -> float:
    """Oracle value of the penalty mean((|grad D| - 1)^2) at the given rows,
    using exact reverse-mode input gradients. Not differentiable."""
    rows = np.atleast_2d(np.asarray(u_rows, dtype=np.float64))
    vals = []
    for row in rows:
        g = critic_input_gradient(critic, row)
        vals.append((np.linalg.norm(g) - 1.0) ** 2)
    return float(np.mean(vals))


def gradient_penalty_surrogate(
    critic: Mlp, u_rows: Tensor, step: float = 1e-4
) -> Tensor:
    """Differentiable penalty at generated rows via central differences.

    The critic's input gradient is approximated coordinate-wise from plain
    forward passes, so reverse mode can then differentiate the penalty with
    respect to the critic parameters (error O(step^2) in the approximation).
    All 2*D perturbed copies go through the critic as one batch.
    """
    if not isinstance(u_rows, Tensor):
        u_rows = Tensor(np.atleast_2d(np.asarray(u_rows, dtype=np.float64)))
    n, dim = u_rows.data.shape
    # block b holds rows displaced by (+step if b even else -step) along b//2
    offsets = np.zeros((2 * dim * n, dim))
    for j in range(dim):
        offsets[2 * j * n : (2 * j + 1) * n, j] = step
        offsets[(2 * j + 1) * n : (2 * j + 2) * n, j] = -step
    tiled = en.concat([u_rows] * (2 * dim), axis=0)
    scores = critic.forward(tiled + Tensor(offsets), training=False)
    blocks = scores.reshape((2 * dim, n))
    plus = en.take_rows(blocks, np.arange(0, 2 * dim, 2))
    minus = en.take_rows(blocks, np.arange(1, 2 * dim, 2))
    partials = (plus - minus) * (1.0 / (2.0 * step))
    norm_sq = Tensor(np.ones(dim)) @ en.square(partials)
    penalty = en.square(en.sqrt(norm_sq) - 1.0)
    return en.mean(penalty)


def adversarial_step(
    conv: Conversation,
    state: CrlState,
    config: CrlConfig,
    outputs: dict[str, Tensor],
    targets: dict[str, tuple[np.ndarray, np.ndarray]],
    reservoir: dict[str, list[np.ndarray]],
    rng: np.random.Generator,
) -> tuple[dict[str, float], Tensor | None]:
    """Per-modality critic updates followed by the generator-side term.

    For each modality with at least one missing slot in the batch and at
    least one observed sample available (batch or epoch reservoir), the
    critic takes ``config.critic_steps`` updates on
    mean D(fake) - mean D(real) + lambda_gp * penalty, with fakes detached;
    the returned generator term is -mean D(fake) per such modality, summed,
    flowing back into h and the generators. Returns ({modality: critic
    Wasserstein estimate}, generator term or None).
    """
    critic_estimates: dict[str, float] = {}
    gen_term: Tensor | None = None
    for mod in state.modality_dims:
        target, observed = targets[mod]
        miss_idx = np.nonzero(~observed)[0]
        obs_rows = target[observed]
        pool = reservoir.setdefault(mod, [])
        if obs_rows.shape[0]:
            pool.extend(obs_rows)
        if len(pool) > config.reservoir_cap:
            keep = rng.choice(len(pool), size=config.reservoir_cap, replace=False)
            reservoir[mod] = pool = [pool[i] for i in sorted(keep)]
        if miss_idx.size == 0 or not pool:
            continue
        real = np.asarray(pool)
        critic = state.critics[mod]
        opt = state.critic_opts[mod]
        fake_const = Tensor(outputs[mod].data[miss_idx].copy())
        estimate = 0.0
        for _ in range(config.critic_steps):
            d_fake = en.mean(critic.forward(fake_const, training=True))
            d_real = en.mean(critic.forward(Tensor(real), training=True))
            loss = d_fake - d_real
            estimate = loss.item()
            if config.lambda_gp > 0:
                loss = loss + config.lambda_gp * gradient_penalty_surrogate(
                    critic, fake_const, step=config.gp_fd_step
                )
            if config.l2_weight > 0:
                reg = None
                for t in critic.parameters().values():
                    s = en.square(t).sum()
                    reg = s if reg is None else reg + s
                loss = loss + config.l2_weight * reg
            if not np.isfinite(loss.item()):
                raise RuntimeError(
                    f"non-finite critic loss for modality {mod!r} on {conv.id!r}"
                )
            opt.zero_grad()
            en.backward(loss)
            opt.step()
        critic_estimates[mod] = estimate
        fake_graph = en.take_rows(outputs[mod], miss_idx)
        term = -en.mean(critic.forward(fake_graph, training=True))
        gen_term = term if gen_term is None else gen_term + term
    return critic_estimates, gen_term


def crl_train_epoch(
    dataset: Dataset,
    state: CrlState,
    config: CrlConfig,
    extra: dict[str, dict[HKey, np.ndarray]] | None,
    epoch_rng: np.random.Generator,
) -> dict[str, float]:
    """One pass over conversations; each conversation is one joint update of
    the h table and generators (critics update on their own schedule).
    Returns the mean loss components."""
    state.refresh_centroids(dataset)
    order = epoch_rng.permutation(len(dataset.conversations))
    reservoir: dict[str, list[np.ndarray]] = {}
    sums = {"recon": 0.0, "cls": 0.0, "adv": 0.0, "total": 0.0}
    for idx in order:
        conv = dataset.conversations[idx]
        targets = _conv_targets(conv, state, extra)
        h = _batch_h(conv, state)
        outputs = {
            mod: state.generators[mod].forward(h, training=True)
            for mod in state.modality_dims
        }
        recon = reconstruction_loss(conv, state, config, extra, outputs=outputs)
        cls = _classification_batch(conv, state)
        total = config.lambda_recon * recon + config.lambda_cls * cls
        adv_value = 0.0
        if config.lambda_adv > 0:
            _, gen_term = adversarial_step(
                conv, state, config, outputs, targets, reservoir, epoch_rng
            )
            if gen_term is not None:
                adv_value = gen_term.item()
                total = total + config.lambda_adv * gen_term
        if config.l2_weight > 0:
            reg = None
            for gen in state.generators.values():
                for t in gen.parameters().values():
                    s = en.square(t).sum()
                    reg = s if reg is None else reg + s
            total = total + config.l2_weight * reg
        if not np.isfinite(total.item()):
            raise RuntimeError(f"non-finite loss on conversation {conv.id!r}")
        h_opt = state.h_opts[conv.id]
        state.gen_opt.zero_grad()
        h_opt.zero_grad()
        en.backward(total)
        state.gen_opt.step()
        h_opt.step()
        sums["recon"] += recon.item()
        sums["cls"] += cls.item()
        sums["adv"] += adv_value
        sums["total"] += total.item()
    n = len(dataset.conversations)
    return {k: v / n for k, v in sums.items()}


def composite_loss(
    conv: Conversation,
    state: CrlState,
    config: CrlConfig,
    extra: dict[str, dict[HKey, np.ndarray]] | None = None,
) -> Tensor:
    """The full objective as one differentiable scalar (for gradient audits):
    reconstruction + classification + the complete adversarial expression
    including critic terms and the finite-difference gradient penalty."""
    targets = _conv_targets(conv, state, extra)
    h = _batch_h(conv, state)
    outputs = {
        mod: state.generators[mod].forward(h, training=True)
        for mod in state.modality_dims
    }
    total = config.lambda_recon * reconstruction_loss(
        conv, state, config, extra, outputs=outputs
    )
    total = total + config.lambda_cls * _classification_batch(conv, state)
    if config.lambda_adv > 0:
        for mod in state.modality_dims:
            target, observed = targets[mod]
            miss_idx = np.nonzero(~observed)[0]
            obs = target[observed]
            if miss_idx.size == 0 or obs.shape[0] == 0:
                continue
            critic = state.critics[mod]
            fake = en.take_rows(outputs[mod], miss_idx)
            adv = en.mean(critic.forward(fake, training=True)) - en.mean(
                critic.forward(Tensor(obs), training=True)
            )
            adv = adv + config.lambda_gp * gradient_penalty_surrogate(
                critic, fake, step=config.gp_fd_step
            )
            total = total + config.lambda_adv * adv
    return total


def test_time_finetune(
    dataset: Dataset,
    state: CrlState,
    config: CrlConfig,
    seed: int,
) -> tuple[dict[HKey, np.ndarray], dict[str, Mlp]]:
    """Fit fresh representations for unlabeled data.

    Copies the generators, initializes one h vector per utterance at the
    mean of the training representations (a label-free anchor), and jointly
    optimizes both under the masked reconstruction loss on observed slots of
    the real modalities only. The short, small-step schedule acts as implicit
    ridge regularization of the inversion: noise-amplifying directions never
    get the steps to drift. Returns the frozen h table and the fine-tuned
    generator copies.
    """
    if not dataset.conversations:
        raise ValueError("test set is empty")
    rng = np.random.default_rng(seed)
    generators = {
        mod: state.generators[mod].copy()
        for mod in state.modality_dims
        if mod in MODALITIES
    }
    if state.h_table:
        anchor = np.mean([t.data for t in state.h_table.values()], axis=0)
    else:
        anchor = np.zeros(config.h_dim)
    h_table: dict[HKey, Tensor] = {}
    for conv in dataset.conversations:
        for u in conv.utterances:
            h_table[(conv.id, u.t)] = Tensor(
                anchor + config.h_init_std * rng.standard_normal(config.h_dim),
                requires_grad=True,
            )
    gen_params: dict[str, Tensor] = {}
    for mod, gen in generators.items():
        for k, t in gen.parameters().items():
            gen_params[f"gen:{mod}:{k}"] = t
    gen_opt = Adam(gen_params, lr=config.test_gen_learning_rate)
    h_opts = {
        conv.id: Adam(
            {f"h:{u.t}": h_table[(conv.id, u.t)] for u in conv.utterances},
            lr=config.test_h_learning_rate,
        )
        for conv in dataset.conversations
    }

    for _ in range(config.test_finetune_epochs):
        order = rng.permutation(len(dataset.conversations))
        for idx in order:
            conv = dataset.conversations[idx]
            rows = en.stack_rows(
                [h_table[(conv.id, u.t)] for u in conv.utterances]
            )
            total = None
            for mod, gen in generators.items():
                dim = state.modality_dims[mod]
                target = np.zeros((len(conv), dim))
                observed = np.zeros(len(conv), dtype=bool)
                for t, u in enumerate(conv.utterances):
                    vec = u.features.get(mod)
                    if vec is not None:
                        target[t] = vec
                        observed[t] = True
                mask = np.repeat(observed[:, None], dim, axis=1).astype(float)
                out = gen.forward(rows, training=False)
                term = en.square((out - Tensor(target)) * Tensor(mask)).sum()
                total = term if total is None else total + term
            total = total * (1.0 / len(conv))
            if not np.isfinite(total.item()):
                raise RuntimeError(
                    f"non-finite fine-tune loss on conversation {conv.id!r}"
                )
            h_opt = h_opts[conv.id]
            gen_opt.zero_grad()
            h_opt.zero_grad()
            en.backward(total)
            gen_opt.step()
            h_opt.step()

    return {k: t.data.copy() for k, t in h_table.items()}, generators


def export_embeddings(
    h_table: dict[HKey, np.ndarray], dataset: Dataset, path: str | Path
) -> None:
    """CSV of representation vectors: conversation_id, turn, label, h_0..h_{D-1}."""
    path = Path(path)
    dim = len(next(iter(h_table.values()))) if h_table else 0
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["conversation_id", "turn", "label"] + [f"h_{i}" for i in range(dim)]
        )
        for conv in dataset.conversations:
            for u in conv.utterances:
                vec = h_table[(conv.id, u.t)]
                writer.writerow(
                    [conv.id, u.t, u.label] + [f"{x:.6g}" for x in vec]
                )
