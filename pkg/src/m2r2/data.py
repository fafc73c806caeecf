"""Conversation datasets: file format, missing-modality masks, synthetic data.

A dataset is an ordered list of conversations; each utterance carries up to
three feature vectors (audio, text, visual), a speaker index and a label.
Absent modalities are ``None``. The on-disk format is JSON-lines: a header
line with dims and class names, then one conversation object per line (see
``save_dataset``). Every utterance must keep at least one observed modality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MODALITIES = ("audio", "text", "visual")

__all__ = [
    "MODALITIES",
    "Utterance",
    "Conversation",
    "Dataset",
    "ModalityMask",
    "SynthSpec",
    "DatasetError",
    "load_dataset",
    "save_dataset",
    "missing_rate",
    "generate_mask",
    "apply_mask",
    "generate_synthetic",
    "synth_class_means",
    "synth_transition",
    "split_dataset",
    "datasets_equal",
]


class DatasetError(ValueError):
    """Raised for malformed dataset files or inconsistent structures."""


@dataclass
class Utterance:
    t: int
    speaker: int
    label: int
    features: dict[str, np.ndarray | None]

    def observed(self) -> list[str]:
        return [m for m in MODALITIES if self.features.get(m) is not None]


@dataclass
class Conversation:
    id: str
    num_parties: int
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)

    def labels(self) -> list[int]:
        return [u.label for u in self.utterances]

    def presence(self) -> np.ndarray:
        """T x M boolean matrix of which modalities are observed."""
        rows = [
            [u.features.get(m) is not None for m in MODALITIES]
            for u in self.utterances
        ]
        return np.asarray(rows, dtype=bool)


@dataclass
class ModalityMask:
    """Per-conversation T x M observation indicators. True means observed."""

    conversation_id: str
    observed: np.ndarray

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.observed.ndim != 2 or self.observed.shape[1] != len(MODALITIES):
            raise DatasetError(
                f"mask for {self.conversation_id!r} must be T x {len(MODALITIES)}, "
                f"got shape {self.observed.shape}"
            )
        empty = ~self.observed.any(axis=1)
        if empty.any():
            turn = int(np.nonzero(empty)[0][0])
            raise DatasetError(
                f"mask for {self.conversation_id!r} leaves turn {turn} with no "
                "observed modality"
            )


@dataclass
class Dataset:
    conversations: list[Conversation]
    dims: dict[str, int]
    classes: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def total_turns(self) -> int:
        return sum(len(c) for c in self.conversations)

    def max_parties(self) -> int:
        return max(c.num_parties for c in self.conversations)

    def validate(self) -> None:
        for m in MODALITIES:
            if m not in self.dims or self.dims[m] < 1:
                raise DatasetError(f"missing or invalid dimension for modality {m!r}")
        if not self.classes:
            raise DatasetError("dataset declares no classes")
        seen = set()
        for conv in self.conversations:
            if conv.id in seen:
                raise DatasetError(f"duplicate conversation id {conv.id!r}")
            seen.add(conv.id)
            if conv.num_parties < 1:
                raise DatasetError(f"{conv.id!r}: party count must be >= 1")
            if not conv.utterances:
                raise DatasetError(f"{conv.id!r}: conversation has no utterances")
            for i, u in enumerate(conv.utterances):
                if u.t != i:
                    raise DatasetError(
                        f"{conv.id!r}: turn indices must be consecutive from 0, "
                        f"got {u.t} at position {i}"
                    )
                if not 0 <= u.speaker < conv.num_parties:
                    raise DatasetError(
                        f"{conv.id!r} turn {i}: speaker {u.speaker} out of range "
                        f"for {conv.num_parties} parties"
                    )
                if not 0 <= u.label < self.num_classes:
                    raise DatasetError(
                        f"{conv.id!r} turn {i}: label {u.label} out of range"
                    )
                if not u.observed():
                    raise DatasetError(
                        f"{conv.id!r} turn {i}: all modalities absent"
                    )
                for m in MODALITIES:
                    vec = u.features.get(m)
                    if vec is not None and vec.shape != (self.dims[m],):
                        raise DatasetError(
                            f"{conv.id!r} turn {i}: modality {m!r} has dim "
                            f"{vec.shape}, expected ({self.dims[m]},)"
                        )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    dataset.validate()
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        header = {"dims": dataset.dims, "classes": dataset.classes}
        fh.write(json.dumps(header) + "\n")
        for conv in dataset.conversations:
            obj = {
                "id": conv.id,
                "num_parties": conv.num_parties,
                "utterances": [
                    {
                        "t": u.t,
                        "speaker": u.speaker,
                        "label": u.label,
                        **{
                            m: (
                                None
                                if u.features.get(m) is None
                                else u.features[m].tolist()
                            )
                            for m in MODALITIES
                        },
                    }
                    for u in conv.utterances
                ],
            }
            fh.write(json.dumps(obj) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    conversations: list[Conversation] = []
    dims: dict[str, int] | None = None
    classes: list[str] | None = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if lineno == 1:
                try:
                    dims = {m: int(obj["dims"][m]) for m in MODALITIES}
                    classes = [str(c) for c in obj["classes"]]
                except (KeyError, TypeError) as exc:
                    raise DatasetError(
                        f"{path}:1: header must carry dims and classes ({exc})"
                    ) from None
                continue
            try:
                utterances = []
                for u in obj["utterances"]:
                    features = {
                        m: (
                            None
                            if u.get(m) is None
                            else np.asarray(u[m], dtype=np.float64)
                        )
                        for m in MODALITIES
                    }
                    utterances.append(
                        Utterance(
                            t=int(u["t"]),
                            speaker=int(u["speaker"]),
                            label=int(u["label"]),
                            features=features,
                        )
                    )
                conversations.append(
                    Conversation(
                        id=str(obj["id"]),
                        num_parties=int(obj["num_parties"]),
                        utterances=utterances,
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed conversation: {exc}") from None
    if dims is None or classes is None:
        raise DatasetError(f"{path}: missing header line")
    ds = Dataset(conversations=conversations, dims=dims, classes=classes)
    try:
        ds.validate()
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    return ds


def missing_rate(
    dataset: Dataset, masks: dict[str, ModalityMask] | None = None
) -> float:
    """Fraction of absent (turn, modality) slots among all T x M slots."""
    total = dataset.total_turns() * len(MODALITIES)
    if total == 0:
        return 0.0
    if masks is not None:
        absent = sum(
            (~masks[c.id].observed).sum() for c in dataset.conversations
        )
    else:
        absent = sum((~c.presence()).sum() for c in dataset.conversations)
    return float(absent) / float(total)


def generate_mask(
    dataset: Dataset, target_rate: float, seed: int
) -> dict[str, ModalityMask]:
    """Sample observation masks realizing ``target_rate`` absent slots.

    Slots are dropped uniformly at random across the whole dataset, then any
    fully-absent row gets one uniformly chosen slot restored and the global
    count is rebalanced by dropping further slots from rows that still have
    two or more observed. Deterministic given the seed.
    """
    n_mod = len(MODALITIES)
    max_rate = (n_mod - 1) / n_mod
    if not 0.0 <= target_rate <= max_rate + 1e-12:
        raise DatasetError(
            f"target missing rate {target_rate} outside [0, {max_rate:.4f}]"
        )
    rows = []
    for conv in dataset.conversations:
        for t in range(len(conv)):
            rows.append((conv.id, t))
    total_slots = len(rows) * n_mod
    target_absent = min(int(round(target_rate * total_slots)), len(rows) * (n_mod - 1))

    rng = np.random.default_rng(seed)
    observed = np.ones((len(rows), n_mod), dtype=bool)
    if target_absent > 0:
        chosen = rng.choice(total_slots, size=target_absent, replace=False)
        observed.reshape(-1)[chosen] = False
        # restore one slot in each fully-absent row
        for r in np.nonzero(~observed.any(axis=1))[0]:
            observed[r, rng.integers(n_mod)] = True
        # rebalance: drop more slots, one at a time, from rows that can still
        # spare one (eligibility shifts as rows reach a single survivor)
        deficit = target_absent - int((~observed).sum())
        while deficit > 0:
            counts = observed.sum(axis=1)
            eligible = np.nonzero(observed.reshape(-1))[0]
            eligible = eligible[counts[eligible // n_mod] >= 2]
            if eligible.size == 0:
                break
            take = int(rng.choice(eligible))
            observed.reshape(-1)[take] = False
            deficit -= 1

    masks: dict[str, ModalityMask] = {}
    idx = 0
    for conv in dataset.conversations:
        t_len = len(conv)
        masks[conv.id] = ModalityMask(
            conversation_id=conv.id, observed=observed[idx : idx + t_len].copy()
        )
        idx += t_len
    return masks


def apply_mask(dataset: Dataset, masks: dict[str, ModalityMask]) -> Dataset:
    """Drop features at masked-out slots; observed vectors are copied verbatim."""
    conversations = []
    for conv in dataset.conversations:
        if conv.id not in masks:
            raise DatasetError(f"no mask for conversation {conv.id!r}")
        mask = masks[conv.id]
        if mask.observed.shape[0] != len(conv):
            raise DatasetError(
                f"mask for {conv.id!r} has {mask.observed.shape[0]} rows, "
                f"conversation has {len(conv)} turns"
            )
        utterances = []
        for t, u in enumerate(conv.utterances):
            features = {}
            for j, m in enumerate(MODALITIES):
                vec = u.features.get(m)
                if vec is not None and mask.observed[t, j]:
                    features[m] = vec.copy()
                else:
                    features[m] = None
            utterances.append(
                Utterance(t=u.t, speaker=u.speaker, label=u.label, features=features)
            )
        conversations.append(
            Conversation(id=conv.id, num_parties=conv.num_parties, utterances=utterances)
        )
    out = Dataset(
        conversations=conversations, dims=dict(dataset.dims), classes=list(dataset.classes)
    )
    out.validate()
    return out


@dataclass
class SynthSpec:
    """Generative recipe for synthetic conversations with known structure.

    Each party carries a latent emotion evolving as a Markov chain over
    turns: with probability ``context_rho`` the speaker's new emotion is a
    fixed seeded function of the previous turn's emotion, otherwise it is
    drawn uniformly. An observed modality vector is its class mean plus
    Gaussian noise; the noise has a within-turn component shared across
    modalities (``shared_latent_*``, making modalities correlated beyond the
    label, as real multimodal features are) plus an independent component of
    scale ``noise_sigma``. Labels are the speaker's latent emotion.
    """

    seed: int
    num_parties: int = 2
    num_classes: int = 4
    turn_range: tuple[int, int] = (10, 14)
    dims: dict[str, int] = field(
        default_factory=lambda: {"audio": 8, "text": 8, "visual": 8}
    )
    noise_sigma: float = 0.5
    context_rho: float = 0.5
    class_mean_scale: float = 0.6
    shared_latent_dim: int = 4
    shared_latent_scale: float = 0.8
    class_means: dict[str, np.ndarray] | None = None

    def validate(self) -> None:
        if self.num_parties < 1 or self.num_classes < 1:
            raise DatasetError("num_parties and num_classes must be >= 1")
        lo, hi = self.turn_range
        if lo < 1 or hi < lo:
            raise DatasetError(f"invalid turn range {self.turn_range}")
        if self.noise_sigma <= 0:
            raise DatasetError(f"noise sigma must be positive, got {self.noise_sigma}")
        if not 0.0 <= self.context_rho <= 1.0:
            raise DatasetError(f"context rho must be in [0, 1], got {self.context_rho}")
        if self.shared_latent_dim < 0 or self.shared_latent_scale < 0:
            raise DatasetError("shared latent dim and scale must be nonnegative")
        for m in MODALITIES:
            if self.dims.get(m, 0) < 1:
                raise DatasetError(f"dimension for {m!r} must be >= 1")


def synth_class_means(spec: SynthSpec) -> dict[str, np.ndarray]:
    """Per-modality (C x D_m) class mean table; drawn once from the seed."""
    if spec.class_means is not None:
        return {m: np.asarray(v, dtype=np.float64) for m, v in spec.class_means.items()}
    rng = np.random.default_rng(spec.seed)
    return {
        m: spec.class_mean_scale * rng.standard_normal((spec.num_classes, spec.dims[m]))
        for m in MODALITIES
    }


def synth_transition(spec: SynthSpec) -> np.ndarray:
    """The seeded emotion-transition permutation used for context coupling."""
    rng = np.random.default_rng(spec.seed + 1)
    return rng.permutation(spec.num_classes)


def synth_latent_maps(spec: SynthSpec) -> dict[str, np.ndarray]:
    """Per-modality (D_m x k) maps mixing the shared within-turn latent into
    each modality; drawn once from the seed."""
    k = spec.shared_latent_dim
    rng = np.random.default_rng(spec.seed + 3)
    return {
        m: rng.standard_normal((spec.dims[m], k)) / np.sqrt(max(k, 1))
        for m in MODALITIES
    }


def generate_synthetic(spec: SynthSpec, n_conversations: int) -> Dataset:
    spec.validate()
    if n_conversations < 1:
        raise DatasetError("need at least one conversation")
    means = synth_class_means(spec)
    transition = synth_transition(spec)
    mixers = synth_latent_maps(spec)
    k = spec.shared_latent_dim
    rng = np.random.default_rng(spec.seed + 2)

    conversations = []
    for n in range(n_conversations):
        t_len = int(rng.integers(spec.turn_range[0], spec.turn_range[1] + 1))
        utterances = []
        prev_label: int | None = None
        for t in range(t_len):
            speaker = int(rng.integers(spec.num_parties))
            if prev_label is not None and rng.random() < spec.context_rho:
                label = int(transition[prev_label])
            else:
                label = int(rng.integers(spec.num_classes))
            shared = rng.standard_normal(k) if k else None
            features = {}
            for m in MODALITIES:
                vec = means[m][label] + spec.noise_sigma * rng.standard_normal(
                    spec.dims[m]
                )
                if shared is not None:
                    vec = vec + spec.shared_latent_scale * (mixers[m] @ shared)
                features[m] = vec
            utterances.append(
                Utterance(t=t, speaker=speaker, label=label, features=features)
            )
            prev_label = label
        conversations.append(
            Conversation(
                id=f"synth-{n:04d}",
                num_parties=spec.num_parties,
                utterances=utterances,
            )
        )
    ds = Dataset(
        conversations=conversations,
        dims=dict(spec.dims),
        classes=[f"class_{c}" for c in range(spec.num_classes)],
    )
    ds.validate()
    return ds


def split_dataset(
    dataset: Dataset, ratio: float, seed: int
) -> tuple[Dataset, Dataset]:
    """Split at conversation granularity; first part gets ``ratio`` of them."""
    if not 0.0 < ratio < 1.0:
        raise DatasetError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(dataset.conversations)
    if n < 2:
        raise DatasetError("need at least two conversations to split")
    order = np.random.default_rng(seed).permutation(n)
    n_first = int(round(ratio * n))
    n_first = min(max(n_first, 1), n - 1)
    first_idx = sorted(order[:n_first].tolist())
    second_idx = sorted(order[n_first:].tolist())

    def subset(indices):
        return Dataset(
            conversations=[dataset.conversations[i] for i in indices],
            dims=dict(dataset.dims),
            classes=list(dataset.classes),
        )

    return subset(first_idx), subset(second_idx)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Structural equality including feature values and masks."""
    if a.dims != b.dims or a.classes != b.classes:
        return False
    if len(a.conversations) != len(b.conversations):
        return False
    for ca, cb in zip(a.conversations, b.conversations):
        if ca.id != cb.id or ca.num_parties != cb.num_parties or len(ca) != len(cb):
            return False
        for ua, ub in zip(ca.utterances, cb.utterances):
            if (ua.t, ua.speaker, ua.label) != (ub.t, ub.speaker, ub.label):
                return False
            for m in MODALITIES:
                va, vb = ua.features.get(m), ub.features.get(m)
                if (va is None) != (vb is None):
                    return False
                if va is not None and not np.array_equal(va, vb):
                    return False
    return True
