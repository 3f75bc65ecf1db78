"""Experiment orchestration: training, evaluation, oracle and masking protocols.

A training run minimizes teacher-forced cross entropy with Adam, applies
BPE dropout and unit dropout only during training, evaluates greedy
rollouts on the dev split on a fixed epoch schedule, and keeps the
checkpoint with the best (lowest) mean dev shortest-path distance.
Everything is keyed off a single numpy Generator per run, so a given
(config, seed) pair fixes every emitted number.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .agent import (
    AgentConfig,
    AgentModel,
    NUM_ACTIONS,
    PreparedEpisode,
    START_ACTION_ID,
    prepare_episode,
    rollout_batch,
    teacher_forced_loss,
)
from .bpe import BpeModel, MaskLexicon, mask_text
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
    load_instances,
    run_episode,
    step as env_step,
)
from .errors import ConfigError, DataError
from .metrics import InstanceMetrics, MetricsReport, score_trajectory
from .optim import Adam, AdamConfig
from .pano import PanoFeatureStore
from .worldgen import World

ORACLE_SUBTASKS = ("orientation", "directions", "stopping")

DESK_AGENT_OVERRIDES = {
    "encoder_hidden": 64,
    "decoder_hidden": 64,
    "visual_ffn_widths": (64, 64),
}


@dataclass
class ExperimentConfig:
    """One training run; serialized verbatim into the run directory."""

    world_dir: str
    train_path: str
    dev_path: str
    bpe_path: str
    agent: dict = field(default_factory=dict)  # AgentConfig fields minus vocab_size
    lr: float = 5e-4
    weight_decay: float = 1e-3
    batch_size: int = 64
    epochs: int = 150
    eval_every: int = 5
    bpe_dropout: float = 0.1
    seed: int = 0
    repetitions: int = 10
    selection_metric: str = "spd"
    mask_lexicon_path: Optional[str] = None
    mask_k: int = 0
    name: str = "run"

    def to_json(self) -> dict:
        payload = asdict(self)
        if isinstance(payload["agent"].get("visual_ffn_widths"), tuple):
            payload["agent"]["visual_ffn_widths"] = list(payload["agent"]["visual_ffn_widths"])
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "ExperimentConfig":
        data = dict(payload)
        agent = dict(data.get("agent", {}))
        if "visual_ffn_widths" in agent:
            agent["visual_ffn_widths"] = tuple(agent["visual_ffn_widths"])
        data["agent"] = agent
        return cls(**data)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.from_json(json.load(fh))
        except FileNotFoundError as exc:
            raise ConfigError(f"experiment config not found: {path}") from exc
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"malformed experiment config {path}: {exc}") from exc

    def validate(self) -> None:
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        for path in (self.world_dir, self.train_path, self.dev_path, self.bpe_path):
            if not os.path.exists(path):
                raise ConfigError(f"referenced path does not exist: {path}")
        if self.mask_k > 0 and not self.mask_lexicon_path:
            raise ConfigError("mask_k > 0 requires mask_lexicon_path")


@dataclass
class RunContext:
    """Loaded artifacts shared by training and evaluation."""

    world: World
    bpe: BpeModel
    train_instances: list[NavInstance]
    dev_instances: list[NavInstance]
    lexicon: Optional[MaskLexicon]
    mask_k: int

    def text_of(self, inst: NavInstance) -> str:
        if self.lexicon is not None and self.mask_k > 0:
            return mask_text(inst.instruction, self.lexicon, self.mask_k)
        return inst.instruction


def load_run_context(config: ExperimentConfig) -> RunContext:
    config.validate()
    world = World.load(config.world_dir)
    bpe = BpeModel.load(config.bpe_path)
    lexicon = MaskLexicon.load(config.mask_lexicon_path) if config.mask_lexicon_path else None
    return RunContext(
        world=world,
        bpe=bpe,
        train_instances=load_instances(config.train_path),
        dev_instances=load_instances(config.dev_path),
        lexicon=lexicon if config.mask_k > 0 else None,
        mask_k=config.mask_k,
    )


def build_model(config: ExperimentConfig, ctx: RunContext, rng: np.random.Generator) -> AgentModel:
    agent_cfg = AgentConfig(vocab_size=ctx.bpe.vocab_size, **config.agent)
    return AgentModel(agent_cfg, ctx.world.stores, rng)


def evaluate_model(
    model: AgentModel,
    ctx: RunContext,
    instances: Sequence[NavInstance],
    batch_size: int = 128,
    threads: int = 1,
) -> tuple[MetricsReport, list[Trajectory]]:
    """Greedy rollouts plus metrics for every instance (dropout-free)."""
    graph = ctx.world.graph
    trajectories: list[Trajectory] = []
    for lo in range(0, len(instances), batch_size):
        chunk = list(instances[lo : lo + batch_size])
        encoded = [ctx.bpe.encode(ctx.text_of(inst)) for inst in chunk]
        trajectories.extend(
            rollout_batch(model, graph, chunk, encoded, ctx.bpe.pad_id)
        )

    def score(pair: tuple[NavInstance, Trajectory]) -> InstanceMetrics:
        inst, traj = pair
        return score_trajectory(graph, traj, list(inst.route), inst.id)

    pairs = list(zip(instances, trajectories))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(score, pairs))
    else:
        rows = [score(p) for p in pairs]
    return MetricsReport(rows), trajectories


def train_run(config: ExperimentConfig, out_dir: str, quiet: bool = False) -> dict:
    """Train one model; keep the checkpoint with the best dev SPD.

    Returns a summary dict (also written to ``train_summary.json``).
    """
    if config.selection_metric != "spd":
        raise ConfigError(f"unsupported selection metric {config.selection_metric!r}")
    ctx = load_run_context(config)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    model = build_model(config, ctx, rng)
    optimizer = Adam(model.params(), AdamConfig(lr=config.lr, weight_decay=config.weight_decay))

    graph = ctx.world.graph
    variants = [v for v in {model.config.visual_variant, model.config.first_variant} if v != "none"]
    episodes = [
        prepare_episode(graph, ctx.world.stores, inst, variants) for inst in ctx.train_instances
    ]
    if not episodes:
        raise DataError("training split is empty")

    log_lines: list[str] = []
    best_spd = float("inf")
    best_epoch = -1
    checkpoint_path = os.path.join(out_dir, "checkpoint.bin")
    agent_config_path = os.path.join(out_dir, "agent_config.json")
    last_loss = float("nan")

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(episodes))
        encoded_all = [
            ctx.bpe.encode(ctx.text_of(episodes[i].instance), config.bpe_dropout, rng)
            for i in order
        ]
        # batch by token length to keep padding small; batch order reshuffled
        by_length = sorted(range(len(order)), key=lambda j: len(encoded_all[j]))
        batch_slices = [
            by_length[lo : lo + config.batch_size]
            for lo in range(0, len(by_length), config.batch_size)
        ]
        batch_order = rng.permutation(len(batch_slices))
        epoch_loss = 0.0
        batches = 0
        for batch_idx in (batch_slices[k] for k in batch_order):
            batch_eps = [episodes[order[j]] for j in batch_idx]
            encoded = [encoded_all[j] for j in batch_idx]
            loss = teacher_forced_loss(model, batch_eps, encoded, ctx.bpe.pad_id, True, rng)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            batches += 1
        last_loss = epoch_loss / max(batches, 1)
        line = f"epoch {epoch} loss {last_loss:.6f}"

        if epoch % config.eval_every == 0 or epoch == config.epochs:
            report, _ = evaluate_model(model, ctx, ctx.dev_instances)
            dev_spd = report.mean("spd")
            line += (
                f" dev_spd {dev_spd:.4f} dev_tc {report.mean('tc'):.4f}"
                f" dev_ndtw {report.mean('ndtw'):.4f}"
            )
            if dev_spd < best_spd:
                best_spd = dev_spd
                best_epoch = epoch
                model.save(checkpoint_path, agent_config_path)
                line += " *"
        log_lines.append(line)
        if not quiet:
            print(line, flush=True)

    if best_epoch < 0:  # eval never ran (epochs < eval_every); keep the final weights
        model.save(checkpoint_path, agent_config_path)
        best_epoch = config.epochs

    with open(os.path.join(out_dir, "log.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(log_lines) + "\n")
    with open(os.path.join(out_dir, "experiment.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_json(), fh, sort_keys=True, indent=2)
    summary = {
        "best_epoch": best_epoch,
        "best_dev_spd": best_spd if best_spd < float("inf") else None,
        "final_loss": last_loss,
    }
    with open(os.path.join(out_dir, "train_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
    return summary


def load_trained_model(run_dir: str, ctx: RunContext) -> AgentModel:
    agent_cfg = AgentConfig.load(os.path.join(run_dir, "agent_config.json"))
    model = AgentModel(agent_cfg, ctx.world.stores, np.random.default_rng(0))
    model.load_weights(os.path.join(run_dir, "checkpoint.bin"))
    return model


def write_evaluation(
    report: MetricsReport,
    trajectories: Sequence[Trajectory],
    instances: Sequence[NavInstance],
    out_dir: str,
) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, sort_keys=True)
    with open(os.path.join(out_dir, "trajectories.jsonl"), "w", encoding="utf-8") as fh:
        for inst, traj in zip(instances, trajectories):
            fh.write(
                json.dumps(
                    {
                        "instance_id": inst.id,
                        "terminated": traj.terminated,
                        "final_node": traj.final_node,
                        "steps": traj.to_json_lines(),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


# --- oracle sub-task protocol -------------------------------------------------

Scorer = Callable[[AgentState, StepContext], np.ndarray]


def model_scorer(
    model: AgentModel,
    graph: EnvironmentGraph,
    encoded_tokens: Sequence[int],
    pad_id: int,
) -> Scorer:
    """Per-episode stepwise logits; prev-action input is the executed action."""
    from .agent import pad_tokens, slice_geometry
    from .pano import extract

    tokens, lengths = pad_tokens([list(encoded_tokens)], pad_id)
    container: dict = {}

    def scorer(state: AgentState, ctx: StepContext) -> np.ndarray:
        with T.no_grad():
            if ctx.t == 1:
                w, w_mask, init_cell = model.encode(tokens, lengths)
                container["memory"] = model.text_memory(w, w_mask)
                container["dec"] = model.init_decoder_state(init_cell)
            dec = container["dec"]
            variant = model.config.first_variant if ctx.t == 1 else model.config.visual_variant
            slices = None
            if variant != "none":
                slices = extract(
                    model.stores[variant], graph.pano_key(state.node), state.heading
                ).slices[None]
            dec.prev_action = np.array(
                [START_ACTION_ID if ctx.prev_action is None else int(ctx.prev_action)],
                dtype=np.int64,
            )
            logits, container["dec"] = model.decode_step(
                dec,
                container["memory"],
                slices,
                np.array([ctx.junction_category], dtype=np.int64),
                np.array([ctx.heading_delta], dtype=np.float32),
                variant=variant,
            )
            return logits.data[0].copy()

    return scorer


def gold_scorer(graph: EnvironmentGraph, instance: NavInstance) -> Scorer:
    """One-hot logits of the gold action; the oracle-protocol control."""
    gold = derive_gold_actions(graph, instance)

    def scorer(state: AgentState, ctx: StepContext) -> np.ndarray:
        logits = np.zeros(NUM_ACTIONS, dtype=np.float32)
        action = gold[ctx.t - 1] if ctx.t <= len(gold) else Action.FORWARD
        logits[int(action)] = 1.0
        return logits

    return scorer


def oracle_rollout(
    scorer: Scorer,
    graph: EnvironmentGraph,
    instance: NavInstance,
    subtask: str,
    max_steps: int = 80,
) -> Trajectory:
    """Episode where the model owns one sub-task and gold actions fill the rest.

    Timestep ownership: t=1 is the orientation decision; steps at nodes
    with out-degree >= 3 are direction decisions; the stop-vs-continue
    choice at every step belongs to stopping.  Straight-segment forwards
    are always oracle-supplied.  Under the stopping sub-task the agent
    that fails to stop at the gold end overshoots straight ahead until the
    step cap.
    """
    if subtask not in ORACLE_SUBTASKS:
        raise ConfigError(f"unknown oracle sub-task {subtask!r} (choose from {ORACLE_SUBTASKS})")
    gold = derive_gold_actions(graph, instance)

    def oracle_action(t: int) -> Action:
        # the gold action, with post-gold overshoot mapped to forward
        if t <= len(gold):
            return gold[t - 1]
        return Action.FORWARD

    state = AgentState(instance.route[0], instance.start_heading)
    steps: list[TrajectoryStep] = []
    prev_heading: Optional[float] = None
    prev_action: Optional[Action] = None
    for t in range(1, max_steps + 1):
        hd = 0.0 if prev_heading is None else heading_delta(prev_heading, state.heading)
        jc = junction_category(graph, state.node)
        ctx = StepContext(
            instance=instance, t=t, prev_action=prev_action, heading_delta=hd,
            junction_category=jc,
        )
        logits = scorer(state, ctx)
        gold_t = oracle_action(t)
        if subtask == "stopping":
            if int(np.argmax(logits)) == int(Action.STOP):
                action = Action.STOP
            elif gold_t == Action.STOP:
                action = Action.FORWARD  # overshoot past the gold endpoint
            else:
                action = gold_t
        elif subtask == "orientation":
            action = Action(int(np.argmax(logits))) if t == 1 else gold_t
        else:  # directions
            owned = t > 1 and graph.out_degree(state.node) >= 3 and gold_t != Action.STOP
            if owned:
                action = Action(int(np.argmax(logits[: NUM_ACTIONS - 1])))
            else:
                action = gold_t
        steps.append(TrajectoryStep(state, action, hd, jc))
        if action == Action.STOP:
            return Trajectory(tuple(steps), state, "stopped")
        prev_heading = state.heading
        prev_action = action
        state = env_step(graph, state, action)
    return Trajectory(tuple(steps), state, "step_limit")


def oracle_evaluate(
    model: Optional[AgentModel],
    ctx: RunContext,
    instances: Sequence[NavInstance],
    subtask: str,
    max_steps: int = 80,
) -> MetricsReport:
    """Oracle-protocol metrics; ``model=None`` runs the gold-replay control."""
    graph = ctx.world.graph
    rows = []
    for inst in instances:
        if model is None:
            scorer = gold_scorer(graph, inst)
        else:
            encoded = ctx.bpe.encode(ctx.text_of(inst))
            scorer = model_scorer(model, graph, encoded, ctx.bpe.pad_id)
        traj = oracle_rollout(scorer, graph, inst, subtask, max_steps)
        rows.append(score_trajectory(graph, traj, list(inst.route), inst.id))
    return MetricsReport(rows)


# --- masking sweep -------------------------------------------------------------


def mask_eval(
    base_config: ExperimentConfig,
    lexicon_path: str,
    k_list: Sequence[int],
    out_dir: str,
    test_path: Optional[str] = None,
    quiet: bool = False,
) -> list[dict]:
    """Train and evaluate once per masking count k; returns the curve rows."""
    lexicon = MaskLexicon.load(lexicon_path)
    rows = []
    os.makedirs(out_dir, exist_ok=True)
    for k in k_list:
        config = ExperimentConfig.from_json(base_config.to_json())
        config.mask_lexicon_path = lexicon_path if k > 0 else None
        config.mask_k = int(k)
        config.name = f"{base_config.name}_mask_{lexicon.kind}_{k}"
        run_dir = os.path.join(out_dir, config.name)
        train_run(config, run_dir, quiet=quiet)
        ctx = load_run_context(config)
        model = load_trained_model(run_dir, ctx)
        eval_instances = load_instances(test_path) if test_path else ctx.dev_instances
        report, _ = evaluate_model(model, ctx, eval_instances)
        row = {
            "k": int(k),
            "kind": lexicon.kind,
            "tc": report.mean("tc"),
            "spd": report.mean("spd"),
            "ndtw": report.mean("ndtw"),
            "sdtw": report.mean("sdtw"),
            "run_dir": run_dir,
        }
        rows.append(row)
    csv_path = os.path.join(out_dir, f"mask_curve_{lexicon.kind}.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("k,kind,tc,spd,ndtw,sdtw\n")
        for row in rows:
            fh.write(
                f"{row['k']},{row['kind']},{row['tc']:.6f},{row['spd']:.6f},"
                f"{row['ndtw']:.6f},{row['sdtw']:.6f}\n"
            )
    return rows


def random_policy_baseline(
    graph: EnvironmentGraph,
    instances: Sequence[NavInstance],
    seed: int,
    max_steps: int = 80,
) -> MetricsReport:
    """Uniform-random actions; the floor any trained agent must beat."""
    rng = np.random.default_rng(seed)
    rows = []
    for inst in instances:
        policy = lambda state, ctx: Action(int(rng.integers(0, NUM_ACTIONS)))
        traj = run_episode(graph, inst, policy, max_steps)
        rows.append(score_trajectory(graph, traj, list(inst.route), inst.id))
    return MetricsReport(rows)
