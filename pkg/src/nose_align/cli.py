"""Command-line entry point: synthetic worlds, training, evaluation, probing,
and aligned-embedding export.

    nose gen-synth        --config world.toml --out data/
    nose train            --config run.toml --out runs/a
    nose eval-retrieval   --config run.toml --ckpt runs/a/best --out runs/a
    nose eval-compositional --queries q.tsv --ckpt runs/a/best --out runs/a
    nose eval-bridge      --config run.toml --ckpt runs/a/best --out runs/a
    nose eval-geometry    --config run.toml --ckpt runs/a/best --out runs/a
    nose probe            --config run.toml --ckpt runs/a/best --out runs/a
    nose export           --config run.toml --ckpt runs/a/best --out exported/

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Report bodies carry no timestamps, so a fixed --seed reproduces them byte for
byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evalsuite, fusionprobe, trainer
from .adapters import AdapterConfig
from .config import RunConfig, load_config
from .datahub import (EmbeddingTable, PairSet, SynthSpec, WeakPositiveLexicon,
                      generate_synthetic_world, load_descriptor_sets,
                      load_embedding_table, load_lexicon, load_pairs, save_pairs,
                      save_descriptor_sets, save_embedding_table, save_lexicon,
                      split_pairs)
from .errors import DataFormatError, NoseError, NumericError, UsageError
from .evalsuite import (AlignedMolecules, RankResult, bridge_retrieve,
                        build_retrieval_report, compositional_retrieve,
                        hits_at_k, jaccard_vs_cosine, bin_monotonicity, mrr,
                        neighborhood_precision, parse_compositional_queries,
                        clustering_metrics, pca_project, rank_from_sims)
from .fusionprobe import FusionWeights, ProbeConfig, ProbeInputs, fuse, fit_probe
from .linalg import Rng, pairwise_similarity
from .trainer import TrainConfig, TrainedModel, load_checkpoint, save_checkpoint


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    adapter = AdapterConfig(
        desc_depth=t["desc_depth"], desc_expansion=t["desc_expansion"],
        rec_bottleneck=t["rec_bottleneck"], dropout_rate=t["dropout_rate"],
        head_hidden=t["head_hidden"])
    return TrainConfig(
        base_lr=t["base_lr"], warmup_epochs=t["warmup_epochs"], tau=t["tau"],
        lambda_desc=t["lambda_desc"], lambda_rec=t["lambda_rec"],
        lambda_orth=t["lambda_orth"], desc_batch=t["desc_batch"],
        rec_batch=t["rec_batch"], patience=t["patience"],
        max_epochs=t["max_epochs"], seed=cfg.seed, use_weak=t["use_weak"],
        use_intra=t["use_intra"], ortho_mode=t["ortho_mode"],
        ortho_eps=t["ortho_eps"], pair_mode=t["pair_mode"],
        weak_weight=t["weak_weight"], adapter=adapter)


def _load_world(cfg: RunConfig, base: Path, need_lexicon: bool) -> trainer.WorldData:
    mol = load_embedding_table(cfg.resolve_path(base, "mol_manifest"))
    rec = load_embedding_table(cfg.resolve_path(base, "rec_manifest"))
    desc = load_embedding_table(cfg.resolve_path(base, "desc_manifest"))
    desc_pairs, _ = load_pairs(cfg.resolve_path(base, "desc_pairs"), mol, desc)
    rec_pairs, _ = load_pairs(cfg.resolve_path(base, "rec_pairs"), mol, rec)
    lexicon = None
    if need_lexicon and cfg.data.get("lexicon"):
        lexicon = load_lexicon(cfg.resolve_path(base, "lexicon"), desc)
    ratios = tuple(float(r) for r in cfg.data["split"])
    if len(ratios) != 3:
        raise DataFormatError("data.split must have three entries")
    by_mol = cfg.data["split_by_molecule"]
    desc_pairs = split_pairs(desc_pairs, ratios, cfg.seed, by_molecule=by_mol)
    rec_pairs = split_pairs(rec_pairs, ratios, cfg.seed, by_molecule=by_mol)
    return trainer.WorldData(mol_table=mol, rec_table=rec, desc_table=desc,
                             desc_pairs=desc_pairs, rec_pairs=rec_pairs,
                             lexicon=lexicon)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    w = cfg.world
    spec = SynthSpec(
        n_clusters=w["n_clusters"], n_molecules=w["n_molecules"],
        n_receptors=w["n_receptors"], n_descriptors=w["n_descriptors"],
        dim=w["dim"], noise_sigma=w["noise_sigma"],
        bridge_fraction=w["bridge_fraction"], seed=cfg.seed,
        pairs_per_molecule=w["pairs_per_molecule"],
        receptors_per_molecule=w["receptors_per_molecule"],
        subgroups_per_cluster=w["subgroups_per_cluster"],
        subgroup_fidelity=w["subgroup_fidelity"],
        lexicon_degree=w["lexicon_degree"])
    try:
        world = generate_synthetic_world(spec)
    except ValueError as e:
        raise DataFormatError(f"infeasible world spec: {e}") from e
    save_embedding_table(world.mol_table, out, "molecules")
    save_embedding_table(world.rec_table, out, "receptors")
    save_embedding_table(world.desc_table, out, "descriptors")
    save_pairs(world.desc_pairs, out / "desc_pairs.tsv")
    save_pairs(world.rec_pairs, out / "rec_pairs.tsv")
    save_lexicon(world.lexicon, out / "lexicon.json")
    save_descriptor_sets(world.descriptor_sets, out / "descriptor_sets.tsv")
    for name, ids, clusters in (
            ("mol_clusters.tsv", world.mol_table.ids, world.mol_clusters),
            ("rec_clusters.tsv", world.rec_table.ids, world.rec_clusters),
            ("desc_clusters.tsv", world.desc_table.ids, world.desc_clusters)):
        lines = ["id\tcluster"] + [f"{i}\t{c}" for i, c in zip(ids, clusters)]
        (out / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_probe_tasks(world, out)
    _write_json(out / "world_summary.json", {
        "seed": cfg.seed,
        "n_clusters": spec.n_clusters, "n_molecules": spec.n_molecules,
        "n_receptors": spec.n_receptors, "n_descriptors": spec.n_descriptors,
        "dim": spec.dim, "desc_pairs": len(world.desc_pairs),
        "rec_pairs": len(world.rec_pairs),
    })
    print(f"world written to {out}")
    return 0


def _write_probe_tasks(world, out: Path) -> None:
    """Three synthetic downstream tasks: two scalar regressions on planted
    cluster directions and a cluster one-vs-rest multilabel classification."""
    rng = Rng(world.spec.seed + 1)
    dim = world.spec.dim
    u1 = rng.normal(dim)
    u2 = rng.normal(dim)
    k = world.spec.n_clusters
    centroids = np.zeros((k, dim))
    counts = np.zeros(k)
    for i, c in enumerate(world.mol_clusters):
        centroids[c] += world.mol_table.matrix[i]
        counts[c] += 1
    centroids /= counts[:, None]
    rows1, rows2, rows_cls = ["mol_id\ty"], ["mol_id\ty"], None
    header = "mol_id\t" + "\t".join(f"y{c}" for c in range(k))
    rows_cls = [header]
    for i, mol in enumerate(world.mol_table.ids):
        c = world.mol_clusters[i]
        t1 = float(centroids[c] @ u1) + 0.05 * float(rng.normal(1))
        t2 = float(centroids[c] @ u2) + 0.05 * float(rng.normal(1))
        rows1.append(f"{mol}\t{t1!r}")
        rows2.append(f"{mol}\t{t2!r}")
        onehot = "\t".join("1" if j == c else "0" for j in range(k))
        rows_cls.append(f"{mol}\t{onehot}")
    (out / "probe_task_reg1.tsv").write_text("\n".join(rows1) + "\n", "utf-8")
    (out / "probe_task_reg2.tsv").write_text("\n".join(rows2) + "\n", "utf-8")
    (out / "probe_task_cls.tsv").write_text("\n".join(rows_cls) + "\n", "utf-8")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = Path(args.config).parent if args.config else Path.cwd()
    tconfig = _train_config(cfg)
    world = _load_world(cfg, base, need_lexicon=tconfig.use_weak)
    if tconfig.use_weak and world.lexicon is None:
        raise DataFormatError("train.use_weak is on but data.lexicon is not set")
    model, history = trainer.train(tconfig, world)
    trainer.write_history_csv(history, out / "history.csv")
    save_checkpoint(model, out / "best")
    best = min(history, key=lambda h: h.val_score)
    _write_json(out / "train_report.json", {
        "seed": cfg.seed,
        "epochs_run": len(history),
        "best_epoch": best.epoch,
        "best_val_score": best.val_score,
        "final_loss_total": history[-1].loss_total,
        "param_count": model.params.param_count(),
        "ortho_mode": tconfig.ortho_mode,
    })
    print(f"trained {len(history)} epochs; best val score "
          f"{best.val_score:.6f} at epoch {best.epoch}")
    return 0


def _encode_world(model: TrainedModel, world: trainer.WorldData):
    _, _, z_r, z_d = model.encode_molecules(world.mol_table.matrix)
    h_rec = model.encode_receptors(world.rec_table.matrix)
    h_desc = model.encode_descriptors(world.desc_table.matrix)
    return z_r, z_d, h_rec, h_desc


def cmd_eval_retrieval(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or cfg.out_dir)
    base = Path(args.config).parent if args.config else Path.cwd()
    model = load_checkpoint(args.ckpt)
    world = _load_world(cfg, base, need_lexicon=False)
    z_r, z_d, h_rec, h_desc = _encode_world(model, world)
    split = cfg.eval["split"]
    report = {"seed": cfg.seed, "split": split}
    for side, pairs, aligned, partners, table in (
            ("mol_to_desc", world.desc_pairs.subset(split), z_d, h_desc,
             world.desc_table),
            ("mol_to_rec", world.rec_pairs.subset(split), z_r, h_rec,
             world.rec_table)):
        groups: dict[str, list[str]] = {}
        for m, p in pairs.pairs:
            groups.setdefault(m, []).append(p)
        results = []
        for mol in sorted(groups):
            sims = pairwise_similarity(
                aligned[world.mol_table.row_index(mol)][None, :], partners)[0]
            ranks = [rank_from_sims(sims, table.row_index(p))
                     for p in groups[mol]]
            results.append(RankResult(query_id=mol, target_ids=groups[mol],
                                      ranks=ranks, pool_size=len(table)))
        report[side] = build_retrieval_report(results)
    _write_json(out / "retrieval_report.json", report)
    print(f"retrieval report written to {out / 'retrieval_report.json'}")
    return 0


def cmd_eval_compositional(args) -> int:
    queries = parse_compositional_queries(args.queries)
    if args.desc_manifest:
        desc_table = load_embedding_table(args.desc_manifest)
    elif args.config:
        cfg = load_config(args.config)
        base = Path(args.config).parent
        desc_table = load_embedding_table(cfg.resolve_path(base, "desc_manifest"))
    else:
        raise UsageError("need --desc-manifest or --config with data.desc_manifest")
    vectors = None
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
        vectors = model.encode_descriptors(desc_table.matrix)
    results = [compositional_retrieve(q, desc_table, vectors) for q in queries]
    best = [r.best_rank for r in results]
    payload = {
        "n_queries": len(results),
        "pool_size": results[0].pool_size if results else 0,
        "mrr": mrr(best),
        "hits": {f"hits@{k}": hits_at_k(best, k) for k in (1, 5, 10, 20, 50)},
        "per_query": [{
            "anchor": r.query.anchor, "operation": r.query.operation,
            "operand": r.query.operand, "expected_ranks": r.expected_ranks,
            "degenerate": r.degenerate} for r in results],
    }
    out = Path(args.out) if args.out else None
    if out:
        _write_json(out / "compositional_report.json", payload)
    print(json.dumps(payload["hits"], sort_keys=True))
    return 0


def _bridge_ground_truth(rec_pairs: PairSet, desc_pairs: PairSet):
    """Receptor -> expected descriptors (and the reverse) through molecules
    present in both partitions."""
    mol_to_desc: dict[str, set[str]] = {}
    for m, d in desc_pairs.pairs:
        mol_to_desc.setdefault(m, set()).add(d)
    mol_to_rec: dict[str, set[str]] = {}
    for m, r in rec_pairs.pairs:
        mol_to_rec.setdefault(m, set()).add(r)
    rec_to_desc: dict[str, set[str]] = {}
    desc_to_rec: dict[str, set[str]] = {}
    for m in set(mol_to_desc) & set(mol_to_rec):
        for r in mol_to_rec[m]:
            rec_to_desc.setdefault(r, set()).update(mol_to_desc[m])
        for d in mol_to_desc[m]:
            desc_to_rec.setdefault(d, set()).update(mol_to_rec[m])
    return rec_to_desc, desc_to_rec


def cmd_eval_bridge(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or cfg.out_dir)
    base = Path(args.config).parent if args.config else Path.cwd()
    model = load_checkpoint(args.ckpt)
    world = _load_world(cfg, base, need_lexicon=False)
    z_r, z_d, h_rec, h_desc = _encode_world(model, world)
    hub_mols = sorted({m for m, _ in world.desc_pairs.pairs}
                      | {m for m, _ in world.rec_pairs.pairs})
    hub_idx = [world.mol_table.row_index(m) for m in hub_mols]
    aligned = AlignedMolecules(ids=hub_mols, rec_component=z_r[hub_idx],
                               desc_component=z_d[hub_idx])
    rec_to_desc, desc_to_rec = _bridge_ground_truth(world.rec_pairs,
                                                    world.desc_pairs)
    report = {"seed": cfg.seed}
    for name, truth, query_table, query_vecs, target_table, target_vecs, qmod in (
            ("rec_to_desc", rec_to_desc, world.rec_table, h_rec,
             world.desc_table, h_desc, "receptor"),
            ("desc_to_rec", desc_to_rec, world.desc_table, h_desc,
             world.rec_table, h_rec, "descriptor")):
        bridge_results, direct_results = [], []
        baseline = []
        for qid in sorted(truth):
            targets = sorted(truth[qid])
            res = bridge_retrieve(query_vecs[query_table.row_index(qid)],
                                  qmod, aligned, target_vecs)
            t_idx = [target_table.row_index(t) for t in targets]
            bridge_results.append(RankResult(
                qid, targets, [rank_from_sims(res.bridge_sims, i) for i in t_idx],
                len(target_table)))
            direct_results.append(RankResult(
                qid, targets, [rank_from_sims(res.direct_sims, i) for i in t_idx],
                len(target_table)))
            baseline.append(evalsuite.random_hits_probability(
                len(target_table), len(targets), 50))
        report[name] = {
            "bridge": build_retrieval_report(bridge_results),
            "direct": build_retrieval_report(direct_results),
            "random_hits@50_pct": 100.0 * float(np.mean(baseline)),
            "n_queries": len(bridge_results),
        }
    _write_json(out / "bridge_report.json", report)
    print(f"bridge report written to {out / 'bridge_report.json'}")
    return 0


def cmd_eval_geometry(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = Path(args.config).parent if args.config else Path.cwd()
    model = load_checkpoint(args.ckpt)
    world = _load_world(cfg, base, need_lexicon=False)
    sets_by_mol = load_descriptor_sets(cfg.resolve_path(base, "descriptor_sets"),
                                       world.mol_table, world.desc_table)
    sets = [sets_by_mol[m] for m in world.mol_table.ids]
    _, _, z_r, z_d = model.encode_molecules(world.mol_table.matrix)
    logits = model.fusion_logits if model.fusion_logits is not None else np.zeros(3)
    fused = fuse(world.mol_table.matrix, z_r, z_d, FusionWeights(logits))
    spaces = {"aligned": fused, "raw_molecule": world.mol_table.matrix}
    report = {"seed": cfg.seed, "neighborhood": {}, "jaccard": {}}
    for name, space in spaces.items():
        ks = [k for k in cfg.eval["neighborhood_k"] if k < len(world.mol_table)]
        report["neighborhood"][name] = {
            f"precision@{k}": neighborhood_precision(space, sets, k) for k in ks}
        bins = jaccard_vs_cosine(space, sets, cfg.eval["n_pairs"],
                                 cfg.eval["bin_width"], Rng(cfg.seed))
        report["jaccard"][name] = {
            "bins": [{"lo": b.lo, "hi": b.hi, "count": b.count,
                      "mean_jaccard": None if b.count == 0 else b.mean_jaccard}
                     for b in bins],
            "spearman": bin_monotonicity(bins),
        }
    if cfg.data.get("desc_groups"):
        groups_path = cfg.resolve_path(base, "desc_groups")
        labels = {}
        for lineno, line in enumerate(
                Path(groups_path).read_text(encoding="utf-8").splitlines(), 1):
            if lineno == 1 or not line.strip():
                continue
            ident, cluster = line.split("\t")
            labels[ident] = cluster
        label_list = [labels[d] for d in world.desc_table.ids]
        h_desc = model.encode_descriptors(world.desc_table.matrix)
        report["descriptor_clustering"] = {
            "aligned": clustering_metrics(h_desc, label_list),
            "raw": clustering_metrics(world.desc_table.matrix, label_list),
        }
    for name, space, ids in (("pca_molecule.csv", fused, world.mol_table.ids),
                             ("pca_rec_component.csv", z_r, world.mol_table.ids),
                             ("pca_desc_component.csv", z_d, world.mol_table.ids)):
        coords = pca_project(space)
        lines = ["id\tpc1\tpc2"]
        lines += [f"{i}\t{c[0]!r}\t{c[1]!r}" for i, c in zip(ids, coords)]
        (out / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out / "geometry_report.json", report)
    print(f"geometry report written to {out / 'geometry_report.json'}")
    return 0


def _parse_probe_task(path: Path, mol_table: EmbeddingTable):
    """Probe task TSV: one or two leading id columns, then target columns."""
    if not path.exists():
        raise DataFormatError(f"missing probe task file {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty task file")
    header = lines[0].split("\t")
    n_ids = 2 if header[:2] == ["mol_id_0", "mol_id_1"] else 1
    if n_ids == 1 and header[0] != "mol_id":
        raise DataFormatError(f"{path}: header must start with mol_id")
    id_rows: list[list[str]] = []
    targets: list[list[float]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(header):
            raise DataFormatError(f"{path}:{lineno}: wrong column count")
        for ident in cols[:n_ids]:
            if not mol_table.has(ident):
                raise DataFormatError(f"{path}:{lineno}: unknown mol id {ident!r}")
        id_rows.append(cols[:n_ids])
        try:
            targets.append([float(v) for v in cols[n_ids:]])
        except ValueError as e:
            raise DataFormatError(f"{path}:{lineno}: bad target value") from e
    if not id_rows:
        raise DataFormatError(f"{path}: no rows")
    return id_rows, np.asarray(targets)


def cmd_probe(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or cfg.out_dir)
    base = Path(args.config).parent if args.config else Path.cwd()
    model = load_checkpoint(args.ckpt)
    mol = load_embedding_table(cfg.resolve_path(base, "mol_manifest"))
    if args.task:
        task_path = Path(args.task)
    elif cfg.probe.get("task_file"):
        p = Path(cfg.probe["task_file"])
        task_path = p if p.is_absolute() else base / p
    else:
        raise UsageError("need --task or probe.task_file in the config")
    id_rows, targets = _parse_probe_task(task_path, mol)
    n_slots = len(id_rows[0])
    slots = []
    for s in range(n_slots):
        x = mol.rows([row[s] for row in id_rows])
        _, _, z_r, z_d = model.encode_molecules(x)
        slots.append((x, z_r, z_d))
    pconf = ProbeConfig(
        lr=cfg.probe["lr"], weight_decay=cfg.probe["weight_decay"],
        max_steps=cfg.probe["max_steps"], patience=cfg.probe["patience"],
        val_fraction=cfg.probe["val_fraction"], metric=cfg.probe["metric"],
        seed=cfg.seed, data_fraction=cfg.probe["data_fraction"],
        input_mode=cfg.probe["input_mode"], hidden_depth=cfg.probe["hidden_depth"])
    _, fusion, report = fit_probe(ProbeInputs(slots), targets,
                                  cfg.probe["task_kind"], pconf)
    _write_json(out / "probe_report.json", {
        "metrics": report.metrics, "fusion_weights": report.fusion_weights,
        "seed": report.seed, "data_fraction": report.data_fraction,
        "task": report.task, "task_file": task_path.name,
        "steps_run": report.steps_run, "best_step": report.best_step,
        "input_mode": pconf.input_mode, "flags": report.flags,
    })
    print(f"probe report written to {out / 'probe_report.json'}")
    return 0


def export_aligned(model: TrainedModel, mol_table: EmbeddingTable, out_dir) -> list:
    """Write one embedding container per component (z_mol, a_r, a_d, z_r, z_d)
    plus the fused representation (stored fusion logits, else uniform)."""
    if len(mol_table) == 0:
        raise DataFormatError("empty molecule table")
    if mol_table.dim != model.params.config.resolved().dim:
        raise DataFormatError(
            f"checkpoint dim {model.params.config.resolved().dim} does not "
            f"match molecule table dim {mol_table.dim}")
    a_r, a_d, z_r, z_d = model.encode_molecules(mol_table.matrix)
    logits = model.fusion_logits if model.fusion_logits is not None else np.zeros(3)
    fused = fuse(mol_table.matrix, z_r, z_d, FusionWeights(logits))
    written = []
    for name, matrix in (("z_mol", mol_table.matrix), ("a_r", a_r), ("a_d", a_d),
                         ("z_r", z_r), ("z_d", z_d), ("fused", fused)):
        table = EmbeddingTable(ids=list(mol_table.ids), matrix=matrix,
                               modality="molecule")
        written.append(save_embedding_table(table, out_dir, name))
    return written


def cmd_export(args) -> int:
    cfg = load_config(args.config)
    base = Path(args.config).parent if args.config else Path.cwd()
    out = Path(args.out or cfg.out_dir)
    model = load_checkpoint(args.ckpt)
    if args.mol_manifest:
        mol = load_embedding_table(args.mol_manifest)
    else:
        mol = load_embedding_table(cfg.resolve_path(base, "mol_manifest"))
    written = export_aligned(model, mol, out)
    print(f"exported {len(written)} containers to {out}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nose",
        description="tri-modal embedding alignment: train, evaluate, export")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="TOML run configuration")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("gen-synth", help="generate a synthetic tri-modal world")
    common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train the alignment adapters")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-retrieval", help="cross-modal retrieval ranking")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint prefix")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-compositional",
                       help="anchor +/- operand descriptor retrieval")
    common(p, config_required=False)
    p.add_argument("--queries", required=True, help="query TSV file")
    p.add_argument("--ckpt", default=None, help="optional checkpoint prefix")
    p.add_argument("--desc-manifest", default=None,
                   help="descriptor embedding container manifest")
    p.set_defaults(func=cmd_eval_compositional)

    p = sub.add_parser("eval-bridge", help="two-hop retrieval through molecules")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint prefix")
    p.set_defaults(func=cmd_eval_bridge)

    p = sub.add_parser("eval-geometry",
                       help="neighborhood, Jaccard binning, clustering, PCA")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint prefix")
    p.set_defaults(func=cmd_eval_geometry)

    p = sub.add_parser("probe", help="fit a fusion-gated downstream probe")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint prefix")
    p.add_argument("--task", default=None, help="probe task TSV")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("export", help="export aligned embedding containers")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint prefix")
    p.add_argument("--mol-manifest", default=None,
                   help="molecule container manifest (overrides config)")
    p.set_defaults(func=cmd_export)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 for --help
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except NoseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
