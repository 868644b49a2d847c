"""Sequential task learning, inference-time composition, greedy evaluation,
and the Last/Avg forgetting metrics.

Learning is append-only: each stage trains a fresh zero-init adapter set
(plus the shared projector) and accumulates that task's anchor in the same
pass. A parallel persistently-overwritten adapter set is kept so the
sequential-finetune baseline can be evaluated from the same state.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import (
    ComposedAdapters,
    SiteMixture,
    TaskAdapterSet,
    all_sites,
    init_adapter_set,
    merge_adapters,
)
from .anchors import (
    AnchorAccumulator,
    FrozenEncoder,
    RouterConfig,
    TaskAnchor,
    TaskRouter,
    ablated_score_tasks,
    build_encoder,
)
from .errors import ConfigurationError, ContractError, IngestionError
from .model import (
    BaseModel,
    ModelConfig,
    Projector,
    Sample,
    TrainingConfig,
    batchify,
    build_base_model,
    build_projector,
    greedy_decode,
    train_on_task,
)
from .numerics import FLOAT, fork_seed

STRATEGIES = (
    "hide",
    "corresponding-all",
    "oracle-top",
    "merge-all",
    "wrong-top",
    "seq-finetune",
    "expand-all",
    "expand-remaining",
)
# These require ground-truth task labels and exist only for the harness.
ORACLE_STRATEGIES = frozenset({"corresponding-all", "oracle-top", "wrong-top"})

ENV_THREADS = "HIDE_FORGE_THREADS"


@dataclass
class TaskRecord:
    adapter_set: TaskAdapterSet
    anchor: TaskAnchor


@dataclass
class StageView:
    """Immutable snapshot of the state after a training stage."""

    stage: int                               # tasks learned so far
    tasks: list[TaskRecord]
    projector: Projector
    seqft: TaskAdapterSet | None
    seqft_projector: Projector | None


@dataclass
class ContinualState:
    cfg: ModelConfig
    router_cfg: RouterConfig
    tcfg: TrainingConfig
    seed: int
    base: BaseModel
    projector: Projector
    encoder: FrozenEncoder
    default_epsilon: float = 1.0
    epsilons: list[float] = field(default_factory=list)
    tasks: list[TaskRecord] = field(default_factory=list)
    seqft: TaskAdapterSet | None = None
    seqft_projector: Projector | None = None
    stage_views: list[StageView] = field(default_factory=list)
    projector_snapshots: list[Projector] = field(default_factory=list)
    initial_projector: Projector | None = None
    base_checksum: str = ""

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def view(self, stage: int | None = None) -> StageView:
        if not self.stage_views:
            raise ContractError("no task learned yet")
        return self.stage_views[-1 if stage is None else stage - 1]


def init_state(
    cfg: ModelConfig,
    router_cfg: RouterConfig,
    tcfg: TrainingConfig,
    seed: int,
    epsilon: float = 1.0,
) -> ContinualState:
    base = build_base_model(cfg, seed)
    projector = build_projector(cfg, seed)
    encoder = build_encoder(seed, cfg.visual_dim, cfg.d_model, base.emb, router_cfg)
    state = ContinualState(
        cfg=cfg, router_cfg=router_cfg, tcfg=tcfg, seed=seed,
        base=base, projector=projector, encoder=encoder,
        default_epsilon=float(epsilon),
        initial_projector=projector.copy(),
    )
    state.base_checksum = base.checksum()
    return state


def learn_task(state: ContinualState, samples: list[Sample], task_id: str | None = None
               ) -> ContinualState:
    """Train a fresh adapter set + the shared projector on one task's data.

    Appends (adapter set, anchor); everything learned earlier is untouched.
    """
    if not samples:
        raise IngestionError("task dataset is empty")
    for s in samples:
        try:
            s.validate(state.cfg)
        except ContractError as exc:
            raise IngestionError(f"bad sample {s.sample_id!r}: {exc}") from exc

    stage = state.num_tasks
    task_id = task_id if task_id is not None else f"task{stage}"
    adapter_set = init_adapter_set(state.cfg, task_id, fork_seed(state.seed, f"stage{stage}"))
    accumulator = AnchorAccumulator(task_id, state.encoder)

    def batch_hook(batch):
        for s in batch:
            accumulator.add(s.visual, s.instruction)

    train_on_task(state.base, state.projector, adapter_set, samples, state.tcfg,
                  seed=fork_seed(state.seed, f"stage{stage}", "order"), batch_hook=batch_hook)
    state.tasks.append(TaskRecord(adapter_set, accumulator.finish()))
    state.epsilons.append(state.default_epsilon)

    if state.tcfg.projector_mode == "snapshot":
        state.projector_snapshots.append(state.projector.copy())

    if state.tcfg.track_seq_finetune:
        if state.seqft is None:
            # the persistent set starts from the same initial conditions as
            # the per-task track: zero-init adapters, untrained projector
            state.seqft = init_adapter_set(state.cfg, "seqft", fork_seed(state.seed, "seqft"))
            state.seqft_projector = state.initial_projector.copy()
        train_on_task(state.base, state.seqft_projector, state.seqft, samples, state.tcfg,
                      seed=fork_seed(state.seed, f"stage{stage}", "seqft-order"))

    state.stage_views.append(StageView(
        stage=stage + 1,
        tasks=list(state.tasks),
        projector=state.projector.copy(),
        seqft=state.seqft.copy() if state.seqft is not None else None,
        seqft_projector=(state.seqft_projector.copy()
                         if state.seqft_projector is not None else None),
    ))
    return state


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

def _resolve_epsilons(state: ContinualState, view: StageView, eps) -> list[float]:
    if eps is None:
        return list(state.epsilons[: view.stage])
    if np.isscalar(eps):
        return [float(eps)] * view.stage
    eps = [float(e) for e in eps]
    if len(eps) != view.stage:
        raise ContractError(f"{len(eps)} fusion coefficients for {view.stage} tasks")
    return eps


def _one_hot(n: int, k: int) -> np.ndarray:
    d = np.zeros(n, dtype=FLOAT)
    d[k] = 1.0
    return d


def compose(
    state: ContinualState,
    strategy: str,
    true_task_id: int | None = None,
    stage: int | None = None,
    epsilons=None,
    temperature: float | None = None,
    router_mode: str = "dual",
) -> ComposedAdapters:
    """Build the inference-time adapter arrangement for a strategy.

    Harness-only strategies (oracle/wrong/corresponding) require the
    ground-truth task index; every other strategy must not receive one.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    view = state.view(stage)
    n = view.stage
    needs_label = strategy in ORACLE_STRATEGIES
    if needs_label and true_task_id is None:
        raise ContractError(f"strategy {strategy!r} requires a ground-truth task id")
    if not needs_label and true_task_id is not None:
        raise ContractError(f"strategy {strategy!r} must not receive a task label")
    if needs_label and not (0 <= true_task_id < n):
        raise ContractError(f"task id {true_task_id} outside learned range 0..{n - 1}")

    cfg = state.cfg
    eps = _resolve_epsilons(state, view, epsilons)
    sets = [rec.adapter_set for rec in view.tasks]
    top = cfg.n_blocks - 1
    top_sites = [s for s in all_sites(cfg) if s[0] == top]
    lower_sites = [s for s in all_sites(cfg) if s[0] != top]

    router_cfg = state.router_cfg
    if temperature is not None:
        router_cfg = replace(router_cfg, temperature=float(temperature))
    router = TaskRouter(state.encoder, [rec.anchor for rec in view.tasks],
                        router_cfg, router_mode)

    def bank(sites, weights):
        return {s: SiteMixture([aset.adapters[s] for aset in sets], weights) for s in sites}

    if strategy == "hide":
        return ComposedAdapters(
            strategy, mixtures=bank(top_sites, None),
            deltas=merge_adapters(sets, eps, lower_sites).deltas, router=router)
    if strategy == "expand-all":
        return ComposedAdapters(strategy, mixtures=bank(all_sites(cfg), None), router=router)
    if strategy == "expand-remaining":
        return ComposedAdapters(
            strategy, mixtures=bank(lower_sites, None),
            deltas=merge_adapters(sets, eps, top_sites).deltas, router=router)
    if strategy == "merge-all":
        return ComposedAdapters(
            strategy, deltas=merge_adapters(sets, eps, all_sites(cfg)).deltas)
    if strategy == "oracle-top":
        return ComposedAdapters(
            strategy, mixtures=bank(top_sites, _one_hot(n, true_task_id)),
            deltas=merge_adapters(sets, eps, lower_sites).deltas)
    if strategy == "wrong-top":
        if n < 2:
            raise ContractError("wrong-top needs at least two learned tasks")
        wrong = (true_task_id + 1) % n
        return ComposedAdapters(
            strategy, mixtures=bank(top_sites, _one_hot(n, wrong)),
            deltas=merge_adapters(sets, eps, lower_sites).deltas)
    if strategy == "corresponding-all":
        only = [sets[true_task_id]]
        ones = np.ones(1, dtype=FLOAT)
        mixtures = {s: SiteMixture([only[0].adapters[s]], ones) for s in all_sites(cfg)}
        return ComposedAdapters(strategy, mixtures=mixtures)
    if strategy == "seq-finetune":
        if view.seqft is None:
            raise ContractError("sequential-finetune track was not trained")
        ones = np.ones(1, dtype=FLOAT)
        mixtures = {s: SiteMixture([view.seqft.adapters[s]], ones) for s in all_sites(cfg)}
        return ComposedAdapters(strategy, mixtures=mixtures)
    raise ConfigurationError(f"unhandled strategy {strategy!r}")


def projector_for(view: StageView, strategy: str) -> Projector:
    return view.seqft_projector if strategy == "seq-finetune" else view.projector


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def resolve_threads(threads: int | None = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get(ENV_THREADS)
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _decode_chunk(base, proj, comp, samples):
    visual, ins, ans = batchify(samples)
    sw = None
    if comp.needs_router():
        sw = comp.router.weights_batch(visual, [s.instruction for s in samples])
    decoded = greedy_decode(base, proj, comp, visual, ins, ans.shape[1], sample_weights=sw)
    return (decoded == ans).all(axis=1)


def exact_match_accuracy(base, proj, comp, samples: list[Sample], threads: int = 1) -> float:
    """Percentage of samples whose greedy decode reproduces the answer exactly."""
    if not samples:
        raise ContractError("empty test set")
    groups: dict[tuple[int, int], list[Sample]] = {}
    for s in samples:
        groups.setdefault((len(s.instruction), len(s.answer)), []).append(s)
    chunks = []
    for key in sorted(groups):
        members = groups[key]
        n_parts = min(threads, len(members))
        for part in np.array_split(np.arange(len(members)), n_parts):
            if part.size:
                chunks.append([members[i] for i in part])
    if threads == 1 or len(chunks) == 1:
        results = [_decode_chunk(base, proj, comp, c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: _decode_chunk(base, proj, comp, c), chunks))
    hits = np.concatenate(results)
    return 100.0 * float(hits.sum()) / len(samples)


def evaluate(
    state: ContinualState,
    strategy: str,
    test_sets: list[list[Sample]],
    stage: int | None = None,
    epsilons=None,
    temperature: float | None = None,
    router_mode: str = "dual",
    threads: int | None = None,
) -> list[float]:
    """Accuracy row over every learned task's test set at a training stage."""
    view = state.view(stage)
    if len(test_sets) < view.stage:
        raise ContractError(f"{len(test_sets)} test sets for {view.stage} learned tasks")
    threads = resolve_threads(threads)
    proj = projector_for(view, strategy)
    shared_comp = None
    if strategy not in ORACLE_STRATEGIES:
        shared_comp = compose(state, strategy, stage=view.stage, epsilons=epsilons,
                              temperature=temperature, router_mode=router_mode)
    row = []
    for j in range(view.stage):
        comp = shared_comp if shared_comp is not None else compose(
            state, strategy, true_task_id=j, stage=view.stage, epsilons=epsilons,
            temperature=temperature, router_mode=router_mode)
        row.append(exact_match_accuracy(state.base, proj, comp, test_sets[j], threads))
    return row


def routing_accuracy(
    state: ContinualState,
    test_sets: list[list[Sample]],
    mode: str = "dual",
    stage: int | None = None,
    temperature: float | None = None,
) -> list[float]:
    """Fraction (%) of held-out samples whose argmax expert weight hits the
    sample's true task, per task. Ground truth is positional: test_sets[j]
    belongs to learned task j. Ties break to the lowest task index."""
    view = state.view(stage)
    router_cfg = state.router_cfg
    if temperature is not None:
        router_cfg = replace(router_cfg, temperature=float(temperature))
    anchors = [rec.anchor for rec in view.tasks]
    out = []
    for j in range(view.stage):
        hits = 0
        for s in test_sets[j]:
            d = ablated_score_tasks(state.encoder, anchors, s.visual, s.instruction,
                                    router_cfg, mode)
            hits += int(np.argmax(d)) == j
        out.append(100.0 * hits / len(test_sets[j]))
    return out


# ---------------------------------------------------------------------------
# forgetting metrics
# ---------------------------------------------------------------------------

@dataclass
class AccuracyMatrix:
    """Lower-triangular accuracy grid: rows[t][j] = accuracy on task j after
    training stage t+1 (0-based storage, defined for j <= t)."""

    rows: list[list[float]] = field(default_factory=list)

    def append_row(self, row: list[float]) -> None:
        if len(row) != len(self.rows) + 1:
            raise ContractError(
                f"row {len(self.rows) + 1} must have {len(self.rows) + 1} entries, "
                f"got {len(row)}")
        for a in row:
            if not (0.0 <= a <= 100.0):
                raise ContractError(f"accuracy {a} outside [0, 100]")
        self.rows.append([float(a) for a in row])

    def validate_complete(self) -> None:
        for t, row in enumerate(self.rows):
            if len(row) != t + 1:
                raise ContractError(f"stage {t + 1} row has {len(row)} entries")
        if not self.rows:
            raise ContractError("empty accuracy matrix")


def metrics(matrix: AccuracyMatrix) -> dict:
    """Last_j = final-stage accuracy on task j; Avg_j = mean accuracy of task j
    over all stages at which it had been learned. Means are unweighted."""
    matrix.validate_complete()
    rows = matrix.rows
    n = len(rows)
    last = list(rows[-1])
    avg = [float(np.mean([rows[t][j] for t in range(j, n)])) for j in range(n)]
    return {
        "last": {"per_task": last, "mean": float(np.mean(last))},
        "avg": {"per_task": avg, "mean": float(np.mean(avg))},
    }


def parameter_table(state: ContinualState, strategies: list[str],
                    stage: int | None = None) -> dict:
    """Structural inference-load table per strategy (criterion: growth locus)."""
    view = state.view(stage)
    table = {}
    for strategy in strategies:
        task_id = 0 if strategy in ORACLE_STRATEGIES else None
        comp = compose(state, strategy, true_task_id=task_id, stage=view.stage)
        table[strategy] = comp.parameter_counts(state.cfg.n_blocks)
    return table
