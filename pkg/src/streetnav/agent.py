"""The navigation agent: text encoder, two-layer recurrent decoder, action head.

Instructions are encoded by a bidirectional LSTM.  At each decoding step
the first LSTM layer ingests the raw observations (previous action
embedding, junction type embedding, heading delta scalar, panorama
representation); its output queries multi-head attention over the token
states, and the resulting text context queries attention over the
panorama slice vectors.  The second LSTM layer combines the timestep
embedding, first-layer output and both contexts, and a linear head emits
the four action logits.  Every pathway can be ablated from the config,
and a mixed configuration can use a different visual variant for the very
first step than for the rest of the episode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .env import (
    Action,
    AgentState,
    EnvironmentGraph,
    NavInstance,
    StepContext,
    Trajectory,
    TrajectoryStep,
    derive_gold_actions,
    heading_delta,
    junction_category,
    run_episode,
    step as env_step,
)
from .errors import ConfigError, DataError
from .layers import BiLSTM, Dense, LSTMCell, MultiHeadAttention, stack_time
from .pano import PanoFeatureStore, extract
from .tensor import Tensor

START_ACTION_ID = 4  # distinguished previous-action id at t=1
NUM_ACTIONS = 4


@dataclass
class AgentConfig:
    """Model hyperparameters and ablation switches.

    JSON sidecars mirror these field names exactly.
    """

    vocab_size: int
    token_emb_dim: int = 32
    encoder_hidden: int = 256
    encoder_layers: int = 2
    decoder_hidden: int = 256
    attention_heads: int = 2
    action_emb_dim: int = 16
    junction_emb_dim: int = 16
    timestep_emb_dim: int = 16
    visual_ffn_widths: tuple[int, int] = (512, 256)
    dropout: float = 0.3
    attention_dropout: float = 0.3
    use_heading_delta: bool = True
    use_junction: bool = True
    use_second_rnn: bool = True
    use_text_attention: bool = True
    use_image_attention: bool = True
    visual_variant: str = "prefinal"
    first_step_visual_variant: Optional[str] = None
    max_steps: int = 80

    @property
    def first_variant(self) -> str:
        return self.first_step_visual_variant or self.visual_variant

    def to_json(self) -> dict:
        payload = asdict(self)
        payload["visual_ffn_widths"] = list(self.visual_ffn_widths)
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "AgentConfig":
        data = dict(payload)
        data["visual_ffn_widths"] = tuple(data["visual_ffn_widths"])
        return cls(**data)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path: str) -> "AgentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def slice_geometry(store: PanoFeatureStore) -> tuple[int, int]:
    """(slice count, per-slice dim) a model built on this store must accept."""
    return store.slice_count, store.slice_dim


@dataclass
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    t: int  # timestep of the NEXT decode step (1-based)
    prev_action: np.ndarray  # (B,) int ids, START_ACTION_ID at t=1


@dataclass
class TextMemory:
    """Encoded instruction plus attention key/value projections.

    The projections are computed once per episode batch so decode steps
    only pay for the query side.
    """

    tokens: Tensor  # (B, L, 2H) bi-LSTM token states
    mask: np.ndarray  # (B, L) True at real tokens
    keys: Optional[Tensor]  # (B, heads, L, head_dim); None with text attention off
    values: Optional[Tensor]


class AgentModel:
    """Parameter container plus encode/decode/rollout behavior."""

    def __init__(
        self,
        config: AgentConfig,
        stores: dict[str, PanoFeatureStore],
        rng: np.random.Generator,
    ):
        self.config = config
        self.stores = stores
        cfg = config
        for variant in {cfg.visual_variant, cfg.first_variant}:
            if variant != "none" and variant not in stores:
                raise ConfigError(f"config needs a {variant!r} feature store")

        self.token_emb = T.parameter(
            rng.uniform(-0.1, 0.1, size=(cfg.vocab_size, cfg.token_emb_dim)).astype(np.float32)
        )
        self.encoder = BiLSTM(cfg.token_emb_dim, cfg.encoder_hidden, cfg.encoder_layers, rng)
        self.enc_to_dec = Dense(2 * cfg.encoder_hidden, cfg.decoder_hidden, rng)

        self.action_emb = T.parameter(
            rng.uniform(-0.1, 0.1, size=(NUM_ACTIONS + 1, cfg.action_emb_dim)).astype(np.float32)
        )
        self.junction_emb = T.parameter(
            rng.uniform(-0.1, 0.1, size=(4, cfg.junction_emb_dim)).astype(np.float32)
        )
        self.timestep_emb = T.parameter(
            rng.uniform(-0.1, 0.1, size=(cfg.max_steps + 1, cfg.timestep_emb_dim)).astype(np.float32)
        )

        self.visual_ffn: dict[str, tuple[Dense, Dense]] = {}
        self.image_attn: dict[str, MultiHeadAttention] = {}
        w1, w2 = cfg.visual_ffn_widths
        for variant in self._active_variants():
            count, dim = slice_geometry(stores[variant])
            self.visual_ffn[variant] = (Dense(count * dim, w1, rng), Dense(w1, w2, rng))
            if cfg.use_image_attention:
                self.image_attn[variant] = MultiHeadAttention(
                    cfg.decoder_hidden, dim, cfg.attention_heads, rng
                )

        if not cfg.use_image_attention and cfg.first_variant != cfg.visual_variant:
            dims = {slice_geometry(stores[v])[1] for v in self._active_variants()}
            if len(dims) > 1:
                raise ConfigError(
                    "mixed visual variants with unequal slice dims require image attention"
                )

        first_in = cfg.action_emb_dim + w2
        if cfg.use_junction:
            first_in += cfg.junction_emb_dim
        if cfg.use_heading_delta:
            first_in += 1
        self.lstm_first = LSTMCell(first_in, cfg.decoder_hidden, rng)

        image_ctx_dim = self._image_ctx_dim()
        second_in = cfg.timestep_emb_dim + 2 * cfg.decoder_hidden + image_ctx_dim
        if cfg.use_second_rnn:
            self.lstm_second = LSTMCell(second_in, cfg.decoder_hidden, rng)
            self.head = Dense(cfg.decoder_hidden, NUM_ACTIONS, rng)
        else:
            self.lstm_second = None
            self.head = Dense(second_in, NUM_ACTIONS, rng)

        self.attn_text = MultiHeadAttention(
            cfg.decoder_hidden, 2 * cfg.encoder_hidden, cfg.attention_heads, rng
        )

    def _active_variants(self) -> list[str]:
        cfg = self.config
        variants = []
        for v in (cfg.visual_variant, cfg.first_variant):
            if v != "none" and v not in variants:
                variants.append(v)
        return variants

    def _image_ctx_dim(self) -> int:
        cfg = self.config
        if cfg.visual_variant == "none" and cfg.first_variant == "none":
            return cfg.decoder_hidden
        if cfg.use_image_attention:
            return cfg.decoder_hidden
        dims = {slice_geometry(self.stores[v])[1] for v in self._active_variants()}
        return dims.pop()

    # --- parameters -------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {
            "token_emb": self.token_emb,
            "action_emb": self.action_emb,
            "junction_emb": self.junction_emb,
            "timestep_emb": self.timestep_emb,
        }
        for key, val in self.encoder.params().items():
            out[f"encoder.{key}"] = val
        for key, val in self.enc_to_dec.params().items():
            out[f"enc_to_dec.{key}"] = val
        for variant, (d1, d2) in self.visual_ffn.items():
            for key, val in d1.params().items():
                out[f"visual.{variant}.ffn0.{key}"] = val
            for key, val in d2.params().items():
                out[f"visual.{variant}.ffn1.{key}"] = val
        for variant, attn in self.image_attn.items():
            for key, val in attn.params().items():
                out[f"image_attn.{variant}.{key}"] = val
        for key, val in self.attn_text.params().items():
            out[f"text_attn.{key}"] = val
        for key, val in self.lstm_first.params().items():
            out[f"lstm_first.{key}"] = val
        if self.lstm_second is not None:
            for key, val in self.lstm_second.params().items():
                out[f"lstm_second.{key}"] = val
        for key, val in self.head.params().items():
            out[f"head.{key}"] = val
        return out

    def save(self, checkpoint_path: str, config_path: Optional[str] = None) -> None:
        save_checkpoint(self.params(), checkpoint_path)
        if config_path:
            self.config.save(config_path)

    def load_weights(self, checkpoint_path: str) -> None:
        restore_params(self.params(), load_checkpoint(checkpoint_path))

    # --- encoding -----------------------------------------------------------

    def encode(
        self,
        tokens: np.ndarray,
        lengths: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[Tensor, np.ndarray, Tensor]:
        """Token states (B, L, 2H), key mask, and the decoder init cell state."""
        tokens = np.asarray(tokens, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise DataError("encode() needs a (B, L>=1) token batch")
        if tokens.max() >= self.config.vocab_size or tokens.min() < 0:
            raise DataError(
                f"token id out of range for vocab of {self.config.vocab_size}"
            )
        emb = T.embedding(self.token_emb, tokens)
        w, cf, cb = self.encoder(emb, lengths, self.config.dropout, training, rng)
        init_cell = self.enc_to_dec(T.concat([cf, cb], axis=-1))
        mask = np.arange(tokens.shape[1])[None, :] < lengths[:, None]
        return w, mask, init_cell

    def text_memory(self, w: Tensor, mask: np.ndarray) -> TextMemory:
        if not self.config.use_text_attention:
            return TextMemory(w, mask, None, None)
        keys, values = self.attn_text.project_kv(w)
        return TextMemory(w, mask, keys, values)

    def init_decoder_state(self, init_cell: Tensor) -> DecoderState:
        b = init_cell.shape[0]
        h = self.config.decoder_hidden
        zeros = lambda: T.zeros((b, h), dtype=init_cell.dtype)
        return DecoderState(
            h1=zeros(),
            c1=init_cell,
            h2=zeros(),
            c2=zeros(),
            t=1,
            prev_action=np.full(b, START_ACTION_ID, dtype=np.int64),
        )

    # --- decoding -----------------------------------------------------------

    def _visual_repr(
        self,
        slices: Optional[np.ndarray],
        variant: str,
        batch: int,
        training: bool,
        rng: Optional[np.random.Generator],
    ) -> Tensor:
        w2 = self.config.visual_ffn_widths[1]
        if variant == "none":
            return T.zeros((batch, w2))
        d1, d2 = self.visual_ffn[variant]
        x = Tensor(slices.reshape(batch, -1))
        x = T.dropout(T.relu(d1(x)), self.config.dropout, training, rng)
        x = T.dropout(T.relu(d2(x)), self.config.dropout, training, rng)
        return x

    def _image_context(
        self,
        query: Tensor,
        slices: Optional[np.ndarray],
        variant: str,
        batch: int,
        training: bool,
        rng: Optional[np.random.Generator],
    ) -> Tensor:
        cfg = self.config
        if variant == "none":
            return T.zeros((batch, cfg.decoder_hidden))
        if cfg.use_image_attention:
            return self.image_attn[variant](
                query, Tensor(slices), None, cfg.attention_dropout, training, rng
            )
        return Tensor(slices.mean(axis=1, dtype=np.float64).astype(np.float32))

    def decode_step(
        self,
        state: DecoderState,
        memory: TextMemory,
        slices: Optional[np.ndarray],
        junction: np.ndarray,
        hd: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        variant: Optional[str] = None,
    ) -> tuple[Tensor, DecoderState]:
        """One decoder step over a batch; returns (logits (B, 4), next state)."""
        cfg = self.config
        b = memory.tokens.shape[0]
        if variant is None:
            variant = cfg.first_variant if state.t == 1 else cfg.visual_variant
        p_bar = self._visual_repr(slices, variant, b, training, rng)

        parts = [T.embedding(self.action_emb, state.prev_action)]
        if cfg.use_junction:
            parts.append(T.embedding(self.junction_emb, np.asarray(junction, dtype=np.int64)))
        if cfg.use_heading_delta:
            parts.append(Tensor(np.asarray(hd, dtype=np.float32)[:, None]))
        parts.append(p_bar)
        h1, c1 = self.lstm_first.step(T.concat(parts, axis=-1), state.h1, state.c1)
        h1d = T.dropout(h1, cfg.dropout, training, rng)

        if cfg.use_text_attention:
            cw = self.attn_text.attend(
                h1d, memory.keys, memory.values, memory.mask,
                cfg.attention_dropout, training, rng,
            )
        else:
            cw = T.zeros((b, cfg.decoder_hidden))
        cp = self._image_context(cw, slices, variant, b, training, rng)

        t_ids = np.full(b, min(state.t, cfg.max_steps), dtype=np.int64)
        feat = T.concat([T.embedding(self.timestep_emb, t_ids), h1d, cw, cp], axis=-1)
        if cfg.use_second_rnn:
            h2, c2 = self.lstm_second.step(feat, state.h2, state.c2)
            logits = self.head(T.dropout(h2, cfg.dropout, training, rng))
        else:
            h2, c2 = state.h2, state.c2
            logits = self.head(feat)
        next_state = DecoderState(h1, c1, h2, c2, state.t + 1, state.prev_action)
        return logits, next_state


# --- teacher forcing ---------------------------------------------------------


@dataclass
class PreparedEpisode:
    """Gold replay of one instance: per-step supervision inputs.

    Rebuilt only when the world changes; token ids are supplied separately
    because BPE dropout re-tokenizes per epoch.
    """

    instance: NavInstance
    actions: np.ndarray  # (T,) gold action ids, last is stop
    prev_actions: np.ndarray  # (T,)
    junctions: np.ndarray  # (T,)
    heading_deltas: np.ndarray  # (T,)
    slices: dict[str, np.ndarray]  # variant -> (T, S, D)


def prepare_episode(
    graph: EnvironmentGraph,
    stores: dict[str, PanoFeatureStore],
    instance: NavInstance,
    variants: Sequence[str],
) -> PreparedEpisode:
    gold = derive_gold_actions(graph, instance)
    state = AgentState(instance.route[0], instance.start_heading)
    prev_heading: Optional[float] = None
    prev_action = START_ACTION_ID
    rows = {v: [] for v in variants if v != "none"}
    prevs, juncs, hds = [], [], []
    for action in gold:
        hd = 0.0 if prev_heading is None else heading_delta(prev_heading, state.heading)
        hds.append(hd)
        juncs.append(junction_category(graph, state.node))
        prevs.append(prev_action)
        for v in rows:
            rows[v].append(extract(stores[v], graph.pano_key(state.node), state.heading).slices)
        prev_heading = state.heading
        prev_action = int(action)
        if action != Action.STOP:
            state = env_step(graph, state, action)
    return PreparedEpisode(
        instance=instance,
        actions=np.array([int(a) for a in gold], dtype=np.int64),
        prev_actions=np.array(prevs, dtype=np.int64),
        junctions=np.array(juncs, dtype=np.int64),
        heading_deltas=np.array(hds, dtype=np.float32),
        slices={v: np.stack(r) for v, r in rows.items()},
    )


def pad_tokens(encoded: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([max(len(e), 1) for e in encoded], dtype=np.int64)
    out = np.full((len(encoded), int(lengths.max())), pad_id, dtype=np.int64)
    for i, ids in enumerate(encoded):
        out[i, : len(ids)] = ids
    return out, lengths


def teacher_forced_loss(
    model: AgentModel,
    episodes: Sequence[PreparedEpisode],
    encoded: Sequence[Sequence[int]],
    pad_id: int,
    training: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Mean cross entropy over all gold timesteps of the batch."""
    if len(episodes) != len(encoded) or not episodes:
        raise DataError("teacher_forced_loss needs matching non-empty batches")
    cfg = model.config
    tokens, lengths = pad_tokens(encoded, pad_id)
    w, w_mask, init_cell = model.encode(tokens, lengths, training, rng)
    memory = model.text_memory(w, w_mask)
    state = model.init_decoder_state(init_cell)

    b = len(episodes)
    t_max = max(len(ep.actions) for ep in episodes)
    targets = np.zeros((b, t_max), dtype=np.int64)
    loss_mask = np.zeros((b, t_max), dtype=np.float32)
    junctions = np.zeros((b, t_max), dtype=np.int64)
    hds = np.zeros((b, t_max), dtype=np.float32)
    prevs = np.full((b, t_max), START_ACTION_ID, dtype=np.int64)
    slice_pads: dict[str, np.ndarray] = {}
    for variant in {cfg.first_variant, cfg.visual_variant}:
        if variant != "none":
            geom = slice_geometry(model.stores[variant])
            slice_pads[variant] = np.zeros((b, t_max, geom[0], geom[1]), dtype=np.float32)
    for i, ep in enumerate(episodes):
        t_i = len(ep.actions)
        targets[i, :t_i] = ep.actions
        loss_mask[i, :t_i] = 1.0
        junctions[i, :t_i] = ep.junctions
        hds[i, :t_i] = ep.heading_deltas
        prevs[i, :t_i] = ep.prev_actions
        for variant, padded in slice_pads.items():
            padded[i, :t_i] = ep.slices[variant]

    logits_steps = []
    for t in range(t_max):
        variant = cfg.first_variant if t == 0 else cfg.visual_variant
        slices = slice_pads[variant][:, t] if variant != "none" else None
        state.prev_action = prevs[:, t]
        logits, state = model.decode_step(
            state, memory, slices, junctions[:, t], hds[:, t], training, rng, variant
        )
        logits_steps.append(logits)

    all_logits = stack_time(logits_steps)  # (B, T, 4)
    return T.cross_entropy(all_logits, targets, loss_mask)


# --- greedy inference --------------------------------------------------------


def greedy_policy(
    model: AgentModel,
    graph: EnvironmentGraph,
    encoded_tokens: Sequence[int],
    pad_id: int,
):
    """A stateful per-episode policy closure for ``env.run_episode``."""
    tokens, lengths = pad_tokens([list(encoded_tokens)], pad_id)
    container: dict = {}

    def policy(state: AgentState, ctx: StepContext) -> Action:
        with T.no_grad():
            if ctx.t == 1:
                w, w_mask, init_cell = model.encode(tokens, lengths)
                container["memory"] = model.text_memory(w, w_mask)
                container["dec"] = model.init_decoder_state(init_cell)
            dec = container["dec"]
            variant = model.config.first_variant if ctx.t == 1 else model.config.visual_variant
            if variant == "none":
                slices = None
            else:
                store = model.stores[variant]
                slices = extract(store, graph.pano_key(state.node), state.heading).slices[None]
            junction = np.array([ctx.junction_category], dtype=np.int64)
            hd = np.array([ctx.heading_delta], dtype=np.float32)
            dec.prev_action = np.array(
                [START_ACTION_ID if ctx.prev_action is None else int(ctx.prev_action)],
                dtype=np.int64,
            )
            logits, container["dec"] = model.decode_step(
                dec, container["memory"], slices, junction, hd, variant=variant
            )
            return Action(int(np.argmax(logits.data[0])))

    return policy


def act_greedy(
    model: AgentModel,
    graph: EnvironmentGraph,
    instance: NavInstance,
    encoded_tokens: Sequence[int],
    pad_id: int,
    max_steps: Optional[int] = None,
) -> Trajectory:
    """Greedy argmax decoding for one instance (ties -> lowest action code)."""
    policy = greedy_policy(model, graph, encoded_tokens, pad_id)
    return run_episode(graph, instance, policy, max_steps or model.config.max_steps)


def rollout_batch(
    model: AgentModel,
    graph: EnvironmentGraph,
    instances: Sequence[NavInstance],
    encoded: Sequence[Sequence[int]],
    pad_id: int,
    max_steps: Optional[int] = None,
) -> list[Trajectory]:
    """Greedy episodes for many instances in lockstep (same results as
    ``act_greedy``, one decoder call per timestep for the whole batch)."""
    if not instances:
        return []
    cfg = model.config
    limit = max_steps or cfg.max_steps
    b = len(instances)
    tokens, lengths = pad_tokens(encoded, pad_id)
    with T.no_grad():
        w, w_mask, init_cell = model.encode(tokens, lengths)
        memory = model.text_memory(w, w_mask)
        dec = model.init_decoder_state(init_cell)

        states = [AgentState(inst.route[0], inst.start_heading) for inst in instances]
        prev_heading: list[Optional[float]] = [None] * b
        done = [False] * b
        steps: list[list[TrajectoryStep]] = [[] for _ in range(b)]
        terminated = ["step_limit"] * b

        for t in range(1, limit + 1):
            hd = np.zeros(b, dtype=np.float32)
            junction = np.zeros(b, dtype=np.int64)
            variant = cfg.first_variant if t == 1 else cfg.visual_variant
            slices = None
            if variant != "none":
                geom = slice_geometry(model.stores[variant])
                slices = np.zeros((b, geom[0], geom[1]), dtype=np.float32)
            for i, st in enumerate(states):
                if done[i]:
                    continue
                if prev_heading[i] is not None:
                    hd[i] = heading_delta(prev_heading[i], st.heading)
                junction[i] = junction_category(graph, st.node)
                if slices is not None:
                    slices[i] = extract(
                        model.stores[variant], graph.pano_key(st.node), st.heading
                    ).slices
            logits, dec = model.decode_step(dec, memory, slices, junction, hd, variant=variant)
            choices = np.argmax(logits.data, axis=1)
            next_prev = dec.prev_action.copy()
            for i in range(b):
                if done[i]:
                    continue
                action = Action(int(choices[i]))
                steps[i].append(TrajectoryStep(states[i], action, float(hd[i]), int(junction[i])))
                next_prev[i] = int(action)
                if action == Action.STOP:
                    done[i] = True
                    terminated[i] = "stopped"
                else:
                    prev_heading[i] = states[i].heading
                    states[i] = env_step(graph, states[i], action)
            dec.prev_action = next_prev
            if all(done):
                break
    return [
        Trajectory(tuple(steps[i]), states[i], terminated[i]) for i in range(b)
    ]
