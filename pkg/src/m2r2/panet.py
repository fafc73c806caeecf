"""Party-attentive recurrent network for emotion classification in conversation.

Per turn the model updates a global scene state, one party state per speaker
and one emotion state per speaker, all with gated recurrent cells. Attention
over the global-state history (queried by the current utterance) feeds the
party updates; attention over each party's state history (queried by the
global state) feeds the emotion updates. The current speaker's emotion state
goes through a two-layer head to produce the class distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as en
from .data import MODALITIES, Conversation, Dataset
from .engine import Tensor
from .optim import Adam

__all__ = [
    "PANetConfig",
    "PANetTrace",
    "init_gru_weights",
    "gru_cell",
    "attend",
    "init_panet_params",
    "build_input",
    "forward_conversation",
    "classify",
    "erc_loss",
    "train_epoch",
    "extract_b",
    "predict_dataset",
]

HTable = dict[tuple[str, int], np.ndarray]


@dataclass
class PANetConfig:
    feature_dims: dict[str, int]
    d_global: int = 512
    d_party: int = 512
    d_emotion: int = 256
    q_max: int = 2
    num_classes: int = 2
    h_dim: int = 0
    bidirectional: bool = False
    party_attention: bool = True
    learning_rate: float = 1e-4
    l2_weight: float = 1e-5

    @property
    def d_input(self) -> int:
        return sum(self.feature_dims[m] for m in MODALITIES) + self.h_dim

    @property
    def d_head_hidden(self) -> int:
        return max(1, self.d_emotion // 2)


@dataclass
class PANetTrace:
    """Everything the forward pass produced for one conversation."""

    global_states: list[Tensor]
    party_states: list[list[Tensor]]
    emotion_states: list[list[Tensor]]
    global_attention: list[np.ndarray]
    party_attention: list[list[np.ndarray] | None]
    probs: list[Tensor]
    speakers: list[int]
    predictions: list[int]

    def __len__(self) -> int:
        return len(self.probs)


def init_gru_weights(
    rng: np.random.Generator, input_dim: int, hidden_dim: int, prefix: str
) -> dict[str, Tensor]:
    """Gate weights for one GRU cell, scaled by fan-in; biases start at zero."""
    weights = {}
    for gate in ("z", "r", "h"):
        weights[f"{prefix}.w{gate}"] = Tensor(
            rng.normal(scale=1.0 / np.sqrt(input_dim), size=(hidden_dim, input_dim)),
            requires_grad=True,
        )
        weights[f"{prefix}.u{gate}"] = Tensor(
            rng.normal(scale=1.0 / np.sqrt(hidden_dim), size=(hidden_dim, hidden_dim)),
            requires_grad=True,
        )
        weights[f"{prefix}.b{gate}"] = Tensor(
            np.zeros(hidden_dim), requires_grad=True
        )
    return weights


def gru_cell(
    x: Tensor, h_prev: Tensor, weights: dict[str, Tensor], prefix: str
) -> Tensor:
    """One gated recurrent step: h = (1 - z) * h_prev + z * h_tilde."""
    w = weights
    z = en.sigmoid(w[f"{prefix}.wz"] @ x + w[f"{prefix}.uz"] @ h_prev + w[f"{prefix}.bz"])
    r = en.sigmoid(w[f"{prefix}.wr"] @ x + w[f"{prefix}.ur"] @ h_prev + w[f"{prefix}.br"])
    h_tilde = en.tanh(
        w[f"{prefix}.wh"] @ x + w[f"{prefix}.uh"] @ (r * h_prev) + w[f"{prefix}.bh"]
    )
    return (1.0 - z) * h_prev + z * h_tilde


def attend(memory: Tensor, query: Tensor, w: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinear attention: weights = softmax(query^T W memory_i), context = sum.

    ``memory`` is (k, D) with one past state per row, ``query`` is (D_q,),
    ``w`` is (D_q, D).
    """
    if memory.data.ndim != 2 or memory.data.shape[0] < 1:
        raise ValueError(f"attend: memory must be a nonempty matrix, got {memory.shape}")
    scores = memory @ (query @ w)
    weights = en.softmax(scores)
    context = weights @ memory
    return weights, context


def init_panet_params(config: PANetConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d_u = config.d_input
    params: dict[str, Tensor] = {}
    params.update(
        init_gru_weights(rng, d_u + config.d_party + config.d_emotion, config.d_global, "gru_g")
    )
    params.update(
        init_gru_weights(rng, d_u + config.d_global + config.d_emotion, config.d_party, "gru_p")
    )
    d_e_in = config.q_max * config.d_party + config.d_global
    params.update(init_gru_weights(rng, d_e_in, config.d_emotion, "gru_e"))
    if config.bidirectional:
        params.update(init_gru_weights(rng, d_e_in, config.d_emotion, "gru_e_rev"))
    params["attn_global.w"] = Tensor(
        rng.normal(scale=1.0 / np.sqrt(d_u), size=(d_u, config.d_global)),
        requires_grad=True,
    )
    params["attn_party.w"] = Tensor(
        rng.normal(scale=1.0 / np.sqrt(config.d_global), size=(config.d_global, config.d_party)),
        requires_grad=True,
    )
    hidden = config.d_head_hidden
    params["head.w1"] = Tensor(
        rng.normal(scale=1.0 / np.sqrt(config.d_emotion), size=(hidden, config.d_emotion)),
        requires_grad=True,
    )
    params["head.b1"] = Tensor(np.zeros(hidden), requires_grad=True)
    params["head.w2"] = Tensor(
        rng.normal(scale=1.0 / np.sqrt(hidden), size=(config.num_classes, hidden)),
        requires_grad=True,
    )
    params["head.b2"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
    return params


def build_input(
    utterance, config: PANetConfig, conv_id: str, h_table: HTable | None
) -> Tensor:
    """Concatenated utterance vector with absent modalities zero-filled,
    optionally extended by the common-representation vector for this turn."""
    parts = []
    for m in MODALITIES:
        vec = utterance.features.get(m)
        if vec is None:
            parts.append(np.zeros(config.feature_dims[m]))
        else:
            parts.append(np.asarray(vec, dtype=np.float64))
    if config.h_dim > 0:
        if h_table is None:
            parts.append(np.zeros(config.h_dim))
        else:
            key = (conv_id, utterance.t)
            if key not in h_table:
                raise KeyError(f"no representation vector for {key}")
            ext = np.asarray(h_table[key], dtype=np.float64)
            if ext.shape != (config.h_dim,):
                raise ValueError(
                    f"representation for {key} has shape {ext.shape}, "
                    f"expected ({config.h_dim},)"
                )
            parts.append(ext)
    return Tensor(np.concatenate(parts))


def classify(emotion_state: Tensor, params: dict[str, Tensor]) -> Tensor:
    hidden = en.relu(params["head.w1"] @ emotion_state + params["head.b1"])
    logits = params["head.w2"] @ hidden + params["head.b2"]
    return en.softmax(logits)


def forward_conversation(
    conversation: Conversation,
    params: dict[str, Tensor],
    config: PANetConfig,
    h_table: HTable | None = None,
) -> PANetTrace:
    q = conversation.num_parties
    if q > config.q_max:
        raise ValueError(
            f"conversation {conversation.id!r} has {q} parties, config allows "
            f"at most {config.q_max}"
        )
    zeros_g = Tensor(np.zeros(config.d_global))
    zeros_p = Tensor(np.zeros(config.d_party))
    zeros_e = Tensor(np.zeros(config.d_emotion))
    zero_context = Tensor(np.zeros(config.d_party))

    p_states = [zeros_p] * q
    e_states = [zeros_e] * q
    g_memory: Tensor | None = None
    p_memory: list[Tensor | None] = [None] * q

    global_states: list[Tensor] = []
    party_states: list[list[Tensor]] = []
    emotion_fwd: list[list[Tensor]] = []
    global_attention: list[np.ndarray] = []
    party_attention: list[list[np.ndarray] | None] = []
    emotion_inputs: list[Tensor] = []
    speakers: list[int] = []

    for t, utt in enumerate(conversation.utterances):
        u = build_input(utt, config, conversation.id, h_table)
        if t == 0:
            p_prev_speaker, e_prev_speaker, g_prev = zeros_p, zeros_e, zeros_g
        else:
            q_prev = conversation.utterances[t - 1].speaker
            p_prev_speaker = p_states[q_prev]
            e_prev_speaker = e_states[q_prev]
            g_prev = global_states[-1]

        g_t = gru_cell(
            en.concat([u, p_prev_speaker, e_prev_speaker]), g_prev, params, "gru_g"
        )
        g_row = g_t.reshape((1, -1))
        g_memory = g_row if g_memory is None else en.concat([g_memory, g_row], axis=0)
        g_weights, g_context = attend(g_memory, u, params["attn_global.w"])

        new_p = []
        for qi in range(q):
            x = en.concat([u, g_context, e_states[qi]])
            new_p.append(gru_cell(x, p_states[qi], params, "gru_p"))
        p_states = new_p
        for qi in range(q):
            row = p_states[qi].reshape((1, -1))
            p_memory[qi] = (
                row if p_memory[qi] is None else en.concat([p_memory[qi], row], axis=0)
            )

        contexts: list[Tensor] = []
        attn_t: list[np.ndarray] | None = [] if config.party_attention else None
        for qi in range(q):
            if config.party_attention:
                w_qi, c_qi = attend(p_memory[qi], g_t, params["attn_party.w"])
                attn_t.append(w_qi.data.copy())
            else:
                c_qi = p_states[qi]
            contexts.append(c_qi)
        contexts.extend([zero_context] * (config.q_max - q))

        e_input = en.concat(contexts + [g_t])
        e_states = [gru_cell(e_input, e_states[qi], params, "gru_e") for qi in range(q)]

        global_states.append(g_t)
        party_states.append(list(p_states))
        emotion_fwd.append(list(e_states))
        global_attention.append(g_weights.data.copy())
        party_attention.append(attn_t)
        emotion_inputs.append(e_input)
        speakers.append(utt.speaker)

    emotion_states = emotion_fwd
    if config.bidirectional:
        # reversed second pass over the same per-turn inputs; the causal
        # recurrences above are untouched, only the classification-side
        # emotion states become the sum of both directions
        rev = [Tensor(np.zeros(config.d_emotion))] * q
        emotion_rev: list[list[Tensor]] = [None] * len(emotion_inputs)
        for t in reversed(range(len(emotion_inputs))):
            rev = [gru_cell(emotion_inputs[t], rev[qi], params, "gru_e_rev") for qi in range(q)]
            emotion_rev[t] = list(rev)
        emotion_states = [
            [fwd + bwd for fwd, bwd in zip(emotion_fwd[t], emotion_rev[t])]
            for t in range(len(emotion_fwd))
        ]

    probs = [
        classify(emotion_states[t][speakers[t]], params)
        for t in range(len(speakers))
    ]
    predictions = [int(np.argmax(p.data)) for p in probs]

    return PANetTrace(
        global_states=global_states,
        party_states=party_states,
        emotion_states=emotion_states,
        global_attention=global_attention,
        party_attention=party_attention,
        probs=probs,
        speakers=speakers,
        predictions=predictions,
    )


def erc_loss(
    trace: PANetTrace,
    labels: list[int],
    params: dict[str, Tensor],
    l2_weight: float,
) -> Tensor:
    """Mean negative log-likelihood plus weighted L2 norm of all parameters."""
    if len(trace) != len(labels):
        raise ValueError(
            f"trace has {len(trace)} turns but {len(labels)} labels were given"
        )
    acc = None
    for p, y in zip(trace.probs, labels):
        term = en.log(en.pick(p, int(y)), floor=1e-12)
        acc = term if acc is None else acc + term
    loss = (-1.0 / len(labels)) * acc
    if l2_weight != 0.0:
        sq = None
        for p in params.values():
            s = en.square(p).sum()
            sq = s if sq is None else sq + s
        loss = loss + l2_weight * en.sqrt(sq)
    return loss


def train_epoch(
    dataset: Dataset,
    params: dict[str, Tensor],
    config: PANetConfig,
    optimizer: Adam,
    h_table: HTable | None,
    shuffle_rng: np.random.Generator,
) -> tuple[float, float]:
    """One optimization pass, one step per conversation. Returns
    (mean loss, training accuracy over all turns)."""
    order = shuffle_rng.permutation(len(dataset.conversations))
    losses = []
    correct = 0
    total = 0
    for idx in order:
        conv = dataset.conversations[idx]
        trace = forward_conversation(conv, params, config, h_table)
        labels = conv.labels()
        loss = erc_loss(trace, labels, params, config.l2_weight)
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(
                f"non-finite training loss on conversation {conv.id!r}"
            )
        optimizer.zero_grad()
        en.backward(loss)
        optimizer.step()
        losses.append(value)
        correct += sum(int(p == y) for p, y in zip(trace.predictions, labels))
        total += len(labels)
    return float(np.mean(losses)), correct / total


def extract_b(trace: PANetTrace, source: str = "emotion") -> list[np.ndarray]:
    """Per-turn intermediate feature for the representation learner:
    the speaker's emotion state (default), or the global / speaker party
    state, detached from the graph."""
    out = []
    for t, speaker in enumerate(trace.speakers):
        if source == "emotion":
            vec = trace.emotion_states[t][speaker]
        elif source == "global":
            vec = trace.global_states[t]
        elif source == "party":
            vec = trace.party_states[t][speaker]
        else:
            raise ValueError(f"unknown intermediate-feature source {source!r}")
        out.append(vec.data.copy())
    return out


def predict_dataset(
    dataset: Dataset,
    params: dict[str, Tensor],
    config: PANetConfig,
    h_table: HTable | None = None,
) -> tuple[list[int], list[int]]:
    """Flat (predictions, labels) over every turn, in dataset order."""
    preds: list[int] = []
    labels: list[int] = []
    for conv in dataset.conversations:
        trace = forward_conversation(conv, params, config, h_table)
        preds.extend(trace.predictions)
        labels.extend(conv.labels())
    return preds, labels
