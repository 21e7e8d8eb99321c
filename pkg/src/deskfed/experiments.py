"""Experiment drivers: federated runs, agent training, ablations, sweeps.

Every driver takes an ExperimentConfig plus an output directory and writes
delimited CSVs next to a manifest.json that echoes the configuration and
the sha256 of every artifact. Runs are deterministic given (config, seed):
all CSV columns except wall_ms are byte-identical across reruns.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .agent import (
    EpisodeEnv,
    SacAgent,
    build_state,
    derive_seed_for_episode,
    round_rewards,
    state_dim,
    train_episode,
)
from .config import ExperimentConfig, config_dict, validate_config
from .datasets import (
    Dataset,
    load_idx,
    partition_iid,
    partition_noniid,
    split_holdout,
    synth_dataset,
)
from .defects import (
    KINDS,
    DefectPlan,
    QualityMark,
    apply_comm_defect,
    apply_training_defects,
    sample_plan,
)
from .federation import (
    ClientState,
    aggregate,
    fedavg_weights,
    local_train,
    rule_based_weights,
    run_round,
)
from .nets import init_params, load_params, load_sections
from .quality import init_quality_net, load_quality_net, save_quality_net, \
    train_quality_net
from .replay import BufferConfig, ReplayBuffer
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("full", "embedding", "original")
SWEEP_AXES = ("defect_m", "defect_degree")


class CheckpointError(ValueError):
    """Missing or malformed checkpoint file."""


class DataError(ValueError):
    """Dataset files missing or unreadable."""


# ---------------------------------------------------------------------------
# dataset assembly


def make_datasets(cfg: ExperimentConfig, seed: int):
    """Return (train, validation) datasets for a run.

    The validation split is reserved out of the test-side data, fixed by
    seed; per-round accuracy is measured on it.
    """
    if cfg.dataset == "synthetic":
        train = synth_dataset(cfg.synth_classes, cfg.synth_per_class,
                              cfg.synth_features, cfg.synth_sigma,
                              derive_seed(seed, "train-data"))
        per_class = max(cfg.synth_per_class // 2, 1)
        pool = synth_dataset(cfg.synth_classes, per_class,
                             cfg.synth_features, cfg.synth_sigma,
                             derive_seed(seed, "eval-data"))
    else:
        try:
            train = load_idx(cfg.idx_train_images, cfg.idx_train_labels)
            pool = load_idx(cfg.idx_test_images, cfg.idx_test_labels)
        except OSError as exc:
            raise DataError(f"cannot read idx data: {exc}") from exc
    holdout = min(cfg.val_holdout, len(pool) - pool.num_classes)
    if holdout <= 0:
        return train, pool
    val, _rest = split_holdout(pool, holdout, derive_seed(seed, "holdout"))
    return train, val


def make_partition(cfg: ExperimentConfig, dataset: Dataset, seed: int):
    part_seed = derive_seed(seed, "partition")
    if cfg.partition == "iid":
        return partition_iid(dataset, cfg.num_clients, part_seed)
    return partition_noniid(dataset, cfg.num_clients, part_seed,
                            shards_per_client=cfg.shards_per_client)


def make_clients(cfg: ExperimentConfig, dataset: Dataset, seed: int):
    part = make_partition(cfg, dataset, seed)
    init = init_params(cfg.client_manifest(), derive_seed(seed, "init"))
    return [ClientState(i, idx, init.copy())
            for i, idx in enumerate(part.client_indices)], init


# ---------------------------------------------------------------------------
# strategies


class DrlPolicy:
    """Weight function backed by trained agent + quality-net checkpoints.

    Holds the previous action between rounds; call reset() at the start of
    each run so repeats stay independent.
    """

    def __init__(self, agent: SacAgent, qnet, k: int, loss_clip: float,
                 embed_dim=None):
        self.agent = agent
        self.qnet = qnet
        self.k = k
        self.loss_clip = loss_clip
        self.embed_dim = embed_dim
        self.prev_action = fedavg_weights(k)

    def reset(self):
        self.prev_action = fedavg_weights(self.k)

    def __call__(self, ctx):
        state = build_state(self.qnet, ctx.server_params, ctx.uploads,
                            ctx.local_losses, self.prev_action,
                            loss_clip=self.loss_clip,
                            embed_dim=self.embed_dim)
        action, _ = self.agent.act(state, deterministic=True)
        self.prev_action = action
        return action


def _load_checkpoints(cfg: ExperimentConfig):
    if not cfg.agent_checkpoint:
        raise CheckpointError(
            f"strategy {cfg.strategy!r} requires agent_checkpoint")
    try:
        agent = SacAgent.load(cfg.agent_checkpoint)
    except (OSError, ValueError) as exc:
        raise CheckpointError(
            f"cannot load agent checkpoint {cfg.agent_checkpoint}: {exc}"
        ) from exc
    qnet = None
    if cfg.quality_checkpoint:
        try:
            qnet = load_quality_net(cfg.quality_checkpoint)
        except (OSError, ValueError) as exc:
            raise CheckpointError(
                f"cannot load quality checkpoint {cfg.quality_checkpoint}:"
                f" {exc}") from exc
    return agent, qnet


def make_weight_fn(cfg: ExperimentConfig):
    """Return (weight_fn, qnet_or_none) for the configured strategy."""
    if cfg.strategy == "fedavg":
        return (lambda ctx: fedavg_weights(len(ctx.selected_ids))), None
    if cfg.strategy == "rule_based":
        return (lambda ctx: rule_based_weights(ctx.defect_flags)), None
    agent, qnet = _load_checkpoints(cfg)
    if agent.k != cfg.select_k:
        raise CheckpointError(
            f"agent checkpoint expects k={agent.k}, config has select_k="
            f"{cfg.select_k}")
    embed = qnet.embed_dim if qnet is not None else cfg.embed_dim
    expect = state_dim(cfg.select_k, embed)
    if agent.state_dim != expect:
        raise CheckpointError(
            f"agent checkpoint expects state_dim={agent.state_dim}, config"
            f" implies {expect}")
    pooled = None if qnet is not None else cfg.embed_dim
    return DrlPolicy(agent, qnet, cfg.select_k, cfg.loss_clip,
                     embed_dim=pooled), qnet


# ---------------------------------------------------------------------------
# CSV plumbing


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.12g" % x
    return str(x)


def write_csv(path: Path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError("row width does not match header")
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path) -> tuple:
    """Return (header, rows) with rows as lists of strings."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, cfg: ExperimentConfig, extra: dict) -> Path:
    artifacts = {}
    for p in sorted(out_dir.iterdir()):
        if p.name == "manifest.json" or p.is_dir():
            continue
        artifacts[p.name] = sha256_file(p)
    doc = {"version": __version__, "config": config_dict(cfg),
           "artifacts": artifacts}
    doc.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def metrics_header(k: int) -> list:
    return (["repeat", "round", "strategy", "accuracy", "shadow_accuracy",
             "r1", "r2", "r3", "reward"]
            + [f"w{i + 1}" for i in range(k)]
            + [f"f{i + 1}" for i in range(k)]
            + ["wall_ms"])


# ---------------------------------------------------------------------------
# federated runs


def _env_from_cfg(cfg: ExperimentConfig, train, val, clients, seed):
    return EpisodeEnv(
        dataset=train, eval_dataset=val,
        client_indices=[c.local_data for c in clients],
        client_manifest=cfg.client_manifest(), k=cfg.select_k,
        rounds=cfg.rounds, m=cfg.defect_m, degree=cfg.defect_degree,
        kinds=cfg.kinds_tuple(), local_epochs=cfg.local_epochs,
        local_batch=cfg.local_batch, local_lr=cfg.local_lr,
        loss_clip=cfg.loss_clip, kappa=cfg.kappa,
        target_delta=cfg.target_delta, beta=cfg.beta(), seed=seed,
        embed_dim=cfg.embed_dim)


def run_fl(cfg: ExperimentConfig, out_dir) -> Path:
    """Run `repeats` federated runs and write metrics.csv + manifest.json.

    Returns the metrics path. Prints Acc_avg (mean final accuracy across
    repeats) and T_delta (first round whose mean accuracy reaches
    target_delta, '-' if never).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weight_fn, qnet = make_weight_fn(cfg)
    shadow_mode = cfg.strategy == "dearfsac_nodefect_shadow"

    rows = []
    finals = []
    acc_by_round = np.zeros(cfg.rounds)
    for rep in range(cfg.repeats):
        rep_seed = derive_seed(cfg.seed, "repeat", rep)
        train, val = make_datasets(cfg, rep_seed)
        clients, init = make_clients(cfg, train, rep_seed)
        m = 0 if shadow_mode else cfg.defect_m
        kinds = cfg.kinds_tuple() if m > 0 else ()
        plan = sample_plan(cfg.num_clients, m, cfg.defect_degree, kinds,
                           rep_seed)
        if isinstance(weight_fn, DrlPolicy):
            weight_fn.reset()
        env = _env_from_cfg(cfg, train, val, clients, rep_seed)
        server = init.copy()
        for t in range(1, cfg.rounds + 1):
            t0 = time.perf_counter()
            result = run_round(
                clients, server, train, val, cfg.select_k, weight_fn, plan,
                round_idx=t - 1,
                train_seed=derive_seed(rep_seed, "round-train"),
                select_rng=derive_rng(rep_seed, "select", t),
                epochs=cfg.local_epochs, batch_size=cfg.local_batch,
                lr=cfg.local_lr)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            parts = round_rewards(env, qnet, result, result.weights, server)
            server = result.global_params
            rows.append([rep, t, cfg.strategy, result.global_accuracy,
                         result.fedavg_shadow_accuracy, parts.r1, parts.r2,
                         parts.r3, parts.total]
                        + [float(w) for w in result.weights]
                        + [int(f) for f in result.defect_flags]
                        + [wall_ms])
            acc_by_round[t - 1] += result.global_accuracy
        finals.append(rows[-1][3])

    acc_by_round /= cfg.repeats
    acc_avg = float(np.mean(finals))
    hit = np.nonzero(acc_by_round >= cfg.target_delta)[0]
    t_delta = str(int(hit[0]) + 1) if hit.size else "-"

    metrics = out / "metrics.csv"
    write_csv(metrics, metrics_header(cfg.select_k), rows)
    write_manifest(out, cfg, {"acc_avg": acc_avg, "t_delta": t_delta})
    print(f"Acc_avg = {acc_avg:.4f}")
    print(f"T_delta = {t_delta}")
    return metrics


def acc_avg_from_metrics(path) -> float:
    header, rows = read_csv(path)
    i_rep, i_round, i_acc = (header.index(c)
                             for c in ("repeat", "round", "accuracy"))
    last: dict = {}
    for row in rows:
        rep, rnd = int(row[i_rep]), int(row[i_round])
        if rnd >= last.get(rep, (0, 0.0))[0]:
            last[rep] = (rnd, float(row[i_acc]))
    return float(np.mean([acc for _, acc in last.values()]))


# ---------------------------------------------------------------------------
# quality-net corpus + agent training


def build_defect_corpus(cfg: ExperimentConfig, train: Dataset, clients,
                        init, seed: int):
    """Collect (params_list, marks) along a short federated trajectory.

    Each generation round trains every client for one epoch from the
    current global params; a uniformly drawn half of the clients is made
    defective (composite kinds at corpus_degree) and labelled with the
    ground-truth mark, the rest are clean. The global advances on the
    clean uploads only, so later generations stay on-distribution.
    """
    n = len(clients)
    half = max(n // 2, 1)
    params_list, marks = [], []
    server = init.copy()
    pick_rng = derive_rng(seed, "corpus-pick")
    gen = 0
    while len(params_list) < cfg.corpus_models:
        gen += 1
        bad = frozenset(
            int(c) for c in pick_rng.choice(n, size=half, replace=False))
        plan = DefectPlan(bad, cfg.corpus_degree, KINDS,
                          derive_seed(seed, "corpus-plan", gen))
        clean_uploads = []
        for client in clients:
            rng = derive_rng(seed, "corpus-train", gen, client.id)
            hook = None
            if plan.is_defective(client.id):
                hook = (lambda b, r=gen, c=client.id:
                        apply_training_defects(b, plan, r, c))
            params, _loss = local_train(client, server, train, epochs=1,
                                        batch_size=cfg.local_batch,
                                        lr=cfg.local_lr, rng=rng,
                                        defect_hook=hook)
            if plan.is_defective(client.id):
                params = apply_comm_defect(params, plan, gen, client.id)
                mark = QualityMark(cfg.corpus_degree)
            else:
                clean_uploads.append(params)
                mark = QualityMark(0.0)
            params_list.append(params)
            marks.append(mark)
            if len(params_list) >= cfg.corpus_models:
                break
        if clean_uploads:
            server = aggregate(clean_uploads,
                               fedavg_weights(len(clean_uploads)))
    return params_list, marks


def train_quality_from_cfg(cfg: ExperimentConfig, out_dir,
                           lam2: float = 0.5):
    """Phase one: build corpus, fit the quality net, checkpoint it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(cfg.seed, "quality-phase")
    train, _val = make_datasets(cfg, seed)
    clients, init = make_clients(cfg, train, seed)
    corpus = build_defect_corpus(cfg, train, clients, init, seed)
    qnet = init_quality_net(cfg.client_manifest(), derive_seed(seed, "qnet"),
                            embed_dim=cfg.embed_dim,
                            enc_hidden=cfg.enc_hidden,
                            quality_hidden=cfg.quality_hidden)
    qnet, history = train_quality_net(
        qnet, corpus, epochs=cfg.quality_epochs, lr=cfg.quality_lr,
        lam1=0.5, lam2=lam2, batch_size=cfg.quality_batch,
        seed=derive_seed(seed, "qtrain"))
    path = out / "quality.ckpt"
    save_quality_net(path, qnet)
    return qnet, path, history


def train_dearfsac(cfg: ExperimentConfig, out_dir, variant: str = "full"
                   ) -> dict:
    """Train the aggregation agent; returns paths of everything written.

    variant: 'full' trains the quality net jointly (reconstruction + mark
    losses) and uses all three reward terms; 'embedding' drops the mark
    head (lam2=0) and the quality reward (beta2=0); 'original' skips the
    encoder entirely (pooled-chunk state) and also drops the quality
    reward.
    """
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"variant {variant!r} not one of {ABLATION_VARIANTS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    beta = cfg.beta()
    qnet = None
    quality_path = None
    if variant == "original":
        beta = (beta[0], 0.0, beta[2])
        embed = cfg.embed_dim
    else:
        lam2 = cfg.quality_lam2 if variant == "full" else 0.0
        if variant == "embedding":
            beta = (beta[0], 0.0, beta[2])
        qnet, quality_path, _hist = train_quality_from_cfg(cfg, out, lam2=lam2)
        embed = qnet.embed_dim

    env_seed = derive_seed(cfg.seed, "agent-phase")
    train, val = make_datasets(cfg, env_seed)
    clients, _init = make_clients(cfg, train, env_seed)
    env = _env_from_cfg(cfg, train, val, clients, env_seed)
    env = replace(env, beta=beta, embed_dim=embed)

    sdim = state_dim(cfg.select_k, embed)
    agent = SacAgent(sdim, cfg.select_k, hidden=cfg.agent_hidden,
                     lr=cfg.agent_lr, gamma=cfg.gamma, rho=cfg.rho,
                     target_entropy=cfg.resolved_target_entropy(),
                     seed=derive_seed(cfg.seed, "agent-init"))
    buf = ReplayBuffer(BufferConfig(
        capacity=cfg.buffer_capacity, eta=cfg.buffer_eta,
        c_min=min(cfg.buffer_c_min, cfg.buffer_capacity),
        nu1=cfg.buffer_nu, nu2=cfg.buffer_nu, epsilon=cfg.buffer_epsilon))

    curve_rows = []
    round_rows = []
    for ep in range(1, cfg.episodes + 1):
        g, records = train_episode(agent, buf, env, qnet, ep,
                                   updates_per_round=cfg.updates_per_round,
                                   update_batch=cfg.update_batch,
                                   actor_warmup=cfg.agent_warmup)
        curve_rows.append([variant, ep, sdim, g])
        for rec in records:
            round_rows.append([variant, ep, rec["round"], rec["accuracy"],
                               rec["shadow_accuracy"], rec["r1"], rec["r2"],
                               rec["r3"], rec["reward"]]
                              + [float(w) for w in rec["weights"]])
        log.info("episode %d/%d return %.4f", ep, cfg.episodes, g)

    curve = out / "reward_curve.csv"
    write_csv(curve, ["variant", "episode", "state_dim", "return"],
              curve_rows)
    rounds_csv = out / "train_rounds.csv"
    write_csv(rounds_csv,
              ["variant", "episode", "round", "accuracy", "shadow_accuracy",
               "r1", "r2", "r3", "reward"]
              + [f"w{i + 1}" for i in range(cfg.select_k)],
              round_rows)
    agent_path = out / "agent.ckpt"
    agent.save(agent_path)
    write_manifest(out, cfg, {"variant": variant, "state_dim": sdim})
    paths = {"reward_curve": curve, "train_rounds": rounds_csv,
             "agent": agent_path}
    if quality_path is not None:
        paths["quality"] = quality_path
    return paths


def fedavg_episode_accuracy(env: EpisodeEnv, episode: int) -> float:
    """Final-round accuracy of uniform aggregation on one episode's draw.

    Replays the defect plan, global init, and selection stream that
    train_episode sees for this episode index, but aggregates every round
    at uniform weights. The difference against the agent's run therefore
    isolates what the learned weighting contributes.
    """
    plan = sample_plan(env.num_clients, env.m, env.degree, env.kinds,
                       seed=env.seed, episode=episode)
    global_params = init_params(env.client_manifest,
                                seed=derive_rng(env.seed, "init", episode)
                                .integers(0, 2 ** 31))
    clients = [ClientState(i, ix, global_params.copy())
               for i, ix in enumerate(env.client_indices)]
    accuracy = 0.0
    for t in range(1, env.rounds + 1):
        result = run_round(
            clients, global_params, env.dataset, env.eval_dataset, env.k,
            lambda ctx: fedavg_weights(env.k), plan, round_idx=t - 1,
            train_seed=derive_seed_for_episode(env.seed, episode),
            select_rng=derive_rng(env.seed, "select", episode, t),
            epochs=env.local_epochs, batch_size=env.local_batch,
            lr=env.local_lr)
        global_params = result.global_params
        accuracy = result.global_accuracy
    return accuracy


def run_ablation(cfg: ExperimentConfig, out_dir) -> dict:
    """Train all three variants with identical seeds; one subdir each plus
    a combined curve file carrying the variant tag column."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    combined = []
    results = {}
    for variant in ABLATION_VARIANTS:
        paths = train_dearfsac(cfg, out / variant, variant=variant)
        results[variant] = paths
        _, rows = read_csv(paths["reward_curve"])
        combined.extend(rows)
    combo = out / "ablation_curves.csv"
    write_csv(combo, ["variant", "episode", "state_dim", "return"], combined)
    write_manifest(out, cfg, {"variants": list(ABLATION_VARIANTS)})
    results["combined"] = combo
    return results


# ---------------------------------------------------------------------------
# sweeps


def run_sweep(cfg: ExperimentConfig, axis: str, values, strategies,
              out_dir) -> Path:
    """One run_fl per (value, strategy); summary row per pair with Acc_avg."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for value in values:
        cast = int(value) if axis == "defect_m" else float(value)
        for strat in strategies:
            sub = replace(cfg, **{axis: cast, "strategy": strat})
            validate_config(sub)
            sub_dir = out / f"{axis}_{_fmt(cast)}" / strat
            metrics = run_fl(sub, sub_dir)
            summary.append([axis, cast, strat,
                            acc_avg_from_metrics(metrics)])
    path = out / "sweep_summary.csv"
    write_csv(path, ["axis", "value", "strategy", "acc_avg"], summary)
    write_manifest(out, cfg, {"axis": axis,
                              "values": [_fmt(v) for v in values],
                              "strategies": list(strategies)})
    return path


# ---------------------------------------------------------------------------
# checkpoint inspection


def describe_checkpoint(path) -> dict:
    """Summarize any checkpoint written by this package."""
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"no such checkpoint: {path}")

    def block_info(params):
        v = params.values
        return {"d": params.d,
                "manifest": [[s.in_dim, s.out_dim, s.activation]
                             for s in params.manifest],
                "l2_norm": float(np.linalg.norm(v)),
                "mean": float(v.mean())}

    try:
        with p.open("rb") as f:
            first = json.loads(f.readline().decode("utf-8", errors="strict"))
        if not isinstance(first, dict):
            raise ValueError("header line is not a JSON object")
    except (OSError, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(
            f"{path} does not start with a JSON header line: {exc}") from exc
    try:
        if "sections" in first:
            sections, meta = load_sections(p)
            return {"kind": meta.get("kind", "container"),
                    "meta": {k: v for k, v in meta.items()
                             if k != "sections"},
                    "sections": {n: block_info(s)
                                 for n, s in sections.items()}}
        params, seed = load_params(p)
        return {"kind": "params", "meta": {"seed": seed},
                "sections": {"params": block_info(params)}}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(
            f"cannot read checkpoint {path}: {exc}") from exc
