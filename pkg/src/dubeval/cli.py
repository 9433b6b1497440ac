"""Command-line entry point.

Subcommands: synth, proxy-learn, train, finetune, evaluate, compare, report.
A YAML run config drives every command; flag overrides use --set key=value.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import active_learning as al
from . import eval_metrics as em
from . import fusion
from .data_model import (
    Manifest,
    SyntheticSpec,
    generate_synthetic,
    holdout_split,
    kfold_split,
    load_manifest,
    load_truth,
    write_manifest,
    write_truth,
)
from .errors import ConfigError, DataError, DubevalError, NumericError
from .proxy_mos import equal_weights, fit_normalizer, proxy_score

MODALITY_SUBSETS = ("A", "V", "T", "A+V", "A+T", "V+T", "A+V+T")

_SCALE_DEFAULTS = {
    "desk": {"synthetic": {"n_clips": 600}, "network": {"shared_dim": 64}},
    "full": {"synthetic": {"n_clips": 12000}, "network": {"shared_dim": 256}},
}

DEFAULT_CONFIG = {
    "seed": 0,
    "scale": "desk",
    "out_dir": "runs/default",
    "synthetic": {
        "n_clips": None,  # filled from scale
        "latent_dim": 8,
        "true_metric_weights": [0.7, 0.0, 0.0, 0.3, 0.0],
        "metric_noise_sigma": 0.1,
        "rater_noise_sigma": 0.3,
        "n_raters": 8,
        "rated_fraction": 0.25,
        "raters_per_clip": None,
        "ground_truth_fraction": 0.1,
        "modality_noise_sigma": 0.35,
        "embedding_noise_sigma": 0.3,
        "quality_sigma": 0.8,
    },
    "proxy": {
        "strategy": "AL",  # AL | Random | EW
        "budget": 90,
        "ensemble_size": 50,
        "interval_level": 0.9,
        "annotator": "simulated",  # simulated | recorded
        "annotator_noise": 0.3,
        "diagnostic_count": 100,
    },
    "network": {
        "shared_dim": None,  # filled from scale
        "lora_rank": 16,
        "lora_alpha": 16.0,
        "n_layers": 3,
        "n_heads": 4,
        "ffn_dim": None,
        "dropout": 0.2,
        "learning_rate": 1e-4,
        "batch_size": 64,
        "epochs": 50,
        "modalities": "A+V+T",
    },
    "supervision": "WS+FT",  # WS | WS+FT
    "finetune": {"epochs": 20, "learning_rate": 1e-4, "train_fraction": 0.8},
    "evaluate": {"kfold": 0, "split": "test", "allow_train_eval": False},
    "compare": {"n_seeds": 20, "bootstrap_resamples": 10000},
}


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        key_path = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key: {key_path}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key_path} must be a mapping")
            out[k] = _merge(base[k], v, key_path)
        else:
            out[k] = v
    return out


def load_config(path: str | None, overrides: list[str], out_flag: str | None) -> dict:
    file_cfg = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config parse error: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must contain a mapping")
    cfg = _merge(DEFAULT_CONFIG, file_cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        node = {}
        leaf = node
        parts = key.split(".")
        for part in parts[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[parts[-1]] = yaml.safe_load(raw)
        cfg = _merge(cfg, node)
    if out_flag:
        cfg["out_dir"] = out_flag
    scale = cfg["scale"]
    if scale not in _SCALE_DEFAULTS:
        raise ConfigError(f"scale must be desk or full, got {scale!r}")
    for section, defaults in _SCALE_DEFAULTS[scale].items():
        for k, v in defaults.items():
            if cfg[section][k] is None:
                cfg[section][k] = v
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["proxy"]["strategy"].upper() not in ("AL", "RANDOM", "EW"):
        raise ConfigError(f"proxy.strategy must be AL, Random or EW")
    if cfg["supervision"] not in ("WS", "WS+FT"):
        raise ConfigError("supervision must be WS or WS+FT")
    if cfg["proxy"]["annotator"] not in ("simulated", "recorded"):
        raise ConfigError("proxy.annotator must be simulated or recorded")
    # eagerly build the typed configs so invariants fire before any work
    synthetic_spec(cfg)
    network_config(cfg)


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    s = cfg["synthetic"]
    return SyntheticSpec(
        n_clips=int(s["n_clips"]),
        latent_dim=int(s["latent_dim"]),
        true_metric_weights=tuple(float(x) for x in s["true_metric_weights"]),
        metric_noise_sigma=float(s["metric_noise_sigma"]),
        rater_noise_sigma=float(s["rater_noise_sigma"]),
        n_raters=int(s["n_raters"]),
        seed=int(cfg["seed"]),
        rated_fraction=float(s["rated_fraction"]),
        raters_per_clip=s["raters_per_clip"],
        ground_truth_fraction=float(s["ground_truth_fraction"]),
        modality_noise_sigma=float(s["modality_noise_sigma"]),
        embedding_noise_sigma=float(s["embedding_noise_sigma"]),
        quality_sigma=float(s["quality_sigma"]),
    )


def network_config(cfg: dict, **overrides) -> fusion.NetworkConfig:
    n = dict(cfg["network"])
    n.update(overrides)
    return fusion.NetworkConfig(
        shared_dim=int(n["shared_dim"]),
        lora_rank=int(n["lora_rank"]),
        lora_alpha=float(n["lora_alpha"]),
        n_layers=int(n["n_layers"]),
        n_heads=int(n["n_heads"]),
        ffn_dim=None if n["ffn_dim"] is None else int(n["ffn_dim"]),
        dropout=float(n["dropout"]),
        learning_rate=float(n["learning_rate"]),
        batch_size=int(n["batch_size"]),
        epochs=int(n["epochs"]),
        seed=int(cfg["seed"]),
        modalities=str(n["modalities"]),
    )


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg: dict, out: Path, command: str) -> None:
    with open(out / f"resolved_config.{command}.yaml", "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=True)


def _data_dir(cfg: dict) -> Path:
    return _out_dir(cfg) / "data"


def _load_data(cfg: dict) -> Manifest:
    path = _data_dir(cfg) / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"missing manifest: {path} (run `dubeval synth` first)")
    return load_manifest(path)


def _rated_mos(manifest: Manifest) -> dict[str, float]:
    return {r.clip_id: r.mean_rating for r in manifest.rated_records()}


def _annotator(cfg: dict, manifest: Manifest):
    if cfg["proxy"]["annotator"] == "recorded":
        return al.RecordedAnnotator(_rated_mos(manifest))
    truth_path = _data_dir(cfg) / "truth.jsonl"
    truth = load_truth(truth_path)
    return al.SimulatedAnnotator(truth, noise_sigma=float(cfg["proxy"]["annotator_noise"]),
                                 seed=int(cfg["seed"]))


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg: dict) -> None:
    out = _out_dir(cfg)
    _write_resolved(cfg, out, "synth")
    spec = synthetic_spec(cfg)
    manifest, truth = generate_synthetic(spec)
    data = _data_dir(cfg)
    write_manifest(manifest, data)
    write_truth(truth, data)
    by_dir = {}
    for rec in manifest.records:
        by_dir[rec.language_direction] = by_dir.get(rec.language_direction, 0) + 1
    n_rated = len(manifest.rated_records())
    summary = {
        "n_clips": len(manifest),
        "by_language_direction": by_dir,
        "n_rated": n_rated,
        "rated_fraction": n_rated / len(manifest),
        "n_ground_truth": sum(r.is_ground_truth for r in manifest.records),
    }
    em.write_results(data / "synth_summary.json", summary)
    print(f"wrote {len(manifest)} clips to {data}")
    for k, v in sorted(by_dir.items()):
        print(f"  {k}: {v} clips")
    print(f"  rated: {n_rated} ({summary['rated_fraction']:.1%})")


def _al_pools(cfg: dict, manifest: Manifest, seed_offset: int = 0):
    """Query pool and disjoint diagnostic set for proxy weight learning."""
    seed = int(cfg["seed"]) + seed_offset
    if cfg["proxy"]["annotator"] == "recorded":
        eligible = sorted(_rated_mos(manifest))
    else:
        eligible = sorted(r.clip_id for r in manifest.records)
    rng = np.random.default_rng(seed)
    n_diag = min(int(cfg["proxy"]["diagnostic_count"]),
                 max(0, len(eligible) - int(cfg["proxy"]["budget"])))
    diag = sorted(eligible[i] for i in rng.choice(len(eligible), size=n_diag, replace=False))
    pool = [c for c in eligible if c not in set(diag)]
    return pool, diag


def _run_proxy(cfg: dict, manifest: Manifest, strategy: str, seed_offset: int = 0):
    annotator = _annotator(cfg, manifest)
    pool, diag = _al_pools(cfg, manifest, seed_offset)
    budget = int(cfg["proxy"]["budget"])
    seed = int(cfg["seed"]) + seed_offset
    kwargs = dict(
        diag_ids=diag,
        ensemble_size=int(cfg["proxy"]["ensemble_size"]),
        interval_level=float(cfg["proxy"]["interval_level"]),
    )
    if strategy == "AL":
        return al.run_al_loop(manifest, pool, annotator, budget, seed, policy="al", **kwargs)
    if strategy == "RANDOM":
        return al.run_al_loop(manifest, pool, annotator, budget, seed, policy="random", **kwargs)
    # equal-weight baseline: one random labeled sample, no querying
    rng = np.random.default_rng(seed)
    labeled = sorted(pool[i] for i in rng.choice(len(pool), size=budget, replace=False))
    mos = {c: annotator.rate(c) for c in labeled}
    normalizer = fit_normalizer(manifest.objective_matrix(pool))
    X = normalizer.transform(manifest.objective_matrix(labeled))
    weights = equal_weights(normalizer, X, np.array([mos[c] for c in labeled]))
    return al.ALResult(
        weights=weights,
        normalizer=normalizer,
        ensemble=None,
        state=al.ALState(labeled=mos, unlabeled=[c for c in pool if c not in mos],
                         stage="EW", budget=budget,
                         history=[{"stage": "EW", "n_labeled": budget,
                                   "rho_pool": weights.rho,
                                   "weights": [float(v) for v in weights.w]}]),
    )


def cmd_proxy_learn(cfg: dict) -> None:
    out = _out_dir(cfg)
    _write_resolved(cfg, out, "proxy-learn")
    manifest = _load_data(cfg)
    strategy = cfg["proxy"]["strategy"].upper()
    result = _run_proxy(cfg, manifest, strategy)
    proxy_dir = out / "proxy"
    proxy_dir.mkdir(exist_ok=True)
    em.write_results(proxy_dir / "weights.json", {
        "strategy": strategy,
        "w": [float(v) for v in result.weights.w],
        "a": result.weights.a,
        "b": result.weights.b,
        "rho": result.weights.rho,
        "normalizer": {
            "mean": result.normalizer.mean.tolist(),
            "std": result.normalizer.std.tolist(),
            "sign": result.normalizer.sign.tolist(),
        },
    })
    with open(proxy_dir / "history.jsonl", "w") as f:
        for entry in result.history:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    labels = al.proxy_labels(manifest, result.weights, result.normalizer)
    em.write_results(proxy_dir / "proxy_labels.json", labels)
    print(f"strategy={strategy} achieved rho={result.weights.rho:.4f} "
          f"w={np.round(result.weights.w, 3).tolist()}")
    for entry in result.history:
        line = f"  {entry['stage']}: n={entry['n_labeled']} rho={entry['rho_pool']:.4f}"
        if "picp" in entry:
            line += (f" apv={entry['apv']:.4f} picp={entry['picp']:.2f}"
                     f" mpiw={entry['mpiw']:.3f} ece={entry['ece']:.3f}")
        print(line)


def _load_proxy_labels(cfg: dict) -> dict[str, float]:
    path = _out_dir(cfg) / "proxy" / "proxy_labels.json"
    if not path.exists():
        raise DataError(f"missing proxy labels: {path} (run `dubeval proxy-learn` first)")
    return json.loads(path.read_text())


def cmd_train(cfg: dict) -> None:
    out = _out_dir(cfg)
    _write_resolved(cfg, out, "train")
    manifest = _load_data(cfg)
    labels = _load_proxy_labels(cfg)
    net_cfg = network_config(cfg)
    network = fusion.FusionNetwork(net_cfg)
    trace = fusion.train(network, manifest, labels, net_cfg)
    train_dir = out / "train"
    train_dir.mkdir(exist_ok=True)
    fusion.save_checkpoint(network, train_dir / "checkpoint.bin")
    em.write_results(train_dir / "loss_trace.json", {"epoch_loss": trace})
    final = trace[-1] if trace else float("nan")
    print(f"trained {net_cfg.epochs} epochs on {len(labels)} proxy-labeled clips; "
          f"final loss {final:.5f}")


def _holdout_ids(cfg: dict, manifest: Manifest):
    mos = _rated_mos(manifest)
    ids = sorted(mos)
    if not ids:
        raise DataError("manifest has no human-rated clips")
    train_ids, test_ids = holdout_split(ids, float(cfg["finetune"]["train_fraction"]),
                                        int(cfg["seed"]))
    return mos, train_ids, test_ids


def cmd_finetune(cfg: dict) -> None:
    out = _out_dir(cfg)
    _write_resolved(cfg, out, "finetune")
    manifest = _load_data(cfg)
    ckpt = out / "train" / "checkpoint.bin"
    network = fusion.load_checkpoint(ckpt)
    mos, train_ids, test_ids = _holdout_ids(cfg, manifest)
    ft_cfg = fusion.with_overrides(
        network.config,
        epochs=int(cfg["finetune"]["epochs"]),
        learning_rate=float(cfg["finetune"]["learning_rate"]),
    )
    trace = fusion.train(network, manifest, {c: mos[c] for c in train_ids}, ft_cfg)
    preds = network.predict(manifest, test_ids)
    truth = np.array([mos[c] for c in test_ids])
    report = {
        "n_train": len(train_ids),
        "n_test": len(test_ids),
        "pcc": em.pcc(preds, truth),
        "srcc": em.srcc(preds, truth),
        "mse": em.mse(preds, truth),
        "r2": em.r2(preds, truth),
        "epoch_loss": trace,
    }
    ft_dir = out / "finetune"
    ft_dir.mkdir(exist_ok=True)
    fusion.save_checkpoint(network, ft_dir / "checkpoint_ft.bin")
    em.write_results(ft_dir / "finetune_report.json", report)
    print(f"fine-tuned on {len(train_ids)} rated clips; held-out "
          f"PCC={report['pcc']:.3f} SRCC={report['srcc']:.3f} MSE={report['mse']:.3f}")


def _pick_checkpoint(cfg: dict) -> Path:
    out = _out_dir(cfg)
    ft = out / "finetune" / "checkpoint_ft.bin"
    if cfg["supervision"] == "WS+FT" and ft.exists():
        return ft
    ckpt = out / "train" / "checkpoint.bin"
    if not ckpt.exists():
        raise DataError(f"missing checkpoint: {ckpt} (run `dubeval train` first)")
    return ckpt


def _paired_metrics(preds, truth) -> dict[str, float]:
    return {
        "pcc": em.pcc(preds, truth),
        "srcc": em.srcc(preds, truth),
        "mse": em.mse(preds, truth),
        "r2": em.r2(preds, truth),
    }


def cmd_evaluate(cfg: dict, ablation: bool = False) -> None:
    out = _out_dir(cfg)
    _write_resolved(cfg, out, "evaluate")
    manifest = _load_data(cfg)
    mos, train_ids, test_ids = _holdout_ids(cfg, manifest)
    split = cfg["evaluate"]["split"]
    if split == "train" and not cfg["evaluate"]["allow_train_eval"]:
        raise DataError(
            "refusing to evaluate on the training split "
            "(set evaluate.allow_train_eval: true to override)"
        )
    eval_ids = train_ids if split == "train" else test_ids
    eval_dir = out / "evaluate"
    eval_dir.mkdir(exist_ok=True)
    results: dict = {"split": split, "n_eval": len(eval_ids)}

    network = fusion.load_checkpoint(_pick_checkpoint(cfg))
    truth = np.array([mos[c] for c in eval_ids])
    preds = network.predict(manifest, eval_ids)
    results["model"] = _paired_metrics(preds, truth)

    k = int(cfg["evaluate"]["kfold"])
    if k >= 2:
        folds = []
        rated = sorted(mos)
        for fi, (tr, va) in enumerate(kfold_split(rated, k, int(cfg["seed"]))):
            fnet = fusion.load_checkpoint(out / "train" / "checkpoint.bin")
            ft_cfg = fusion.with_overrides(
                fnet.config,
                epochs=int(cfg["finetune"]["epochs"]),
                learning_rate=float(cfg["finetune"]["learning_rate"]),
            )
            fusion.train(fnet, manifest, {c: mos[c] for c in tr}, ft_cfg)
            fp = fnet.predict(manifest, va)
            folds.append(_paired_metrics(fp, np.array([mos[c] for c in va])))
        results["kfold"] = folds

    results["single_metric_baselines"] = em.single_metric_baselines(
        manifest, {c: mos[c] for c in eval_ids}
    )

    if ablation:
        labels = _load_proxy_labels(cfg)
        rows = {}
        for subset in MODALITY_SUBSETS:
            sub_cfg = network_config(cfg, modalities=subset)
            sub_net = fusion.FusionNetwork(sub_cfg)
            fusion.train(sub_net, manifest, labels, sub_cfg)
            if cfg["supervision"] == "WS+FT":
                ft_cfg = fusion.with_overrides(
                    sub_cfg,
                    epochs=int(cfg["finetune"]["epochs"]),
                    learning_rate=float(cfg["finetune"]["learning_rate"]),
                )
                fusion.train(sub_net, manifest, {c: mos[c] for c in train_ids}, ft_cfg)
            sp = sub_net.predict(manifest, eval_ids)
            rows[subset] = _paired_metrics(sp, truth)
        results["ablation"] = rows

    em.write_results(eval_dir / "evaluation.json", results)
    table = em.render_table(
        ["predictor", "PCC", "SRCC", "MSE", "R2"],
        [["model", results["model"]["pcc"], results["model"]["srcc"],
          results["model"]["mse"], results["model"]["r2"]]]
        + [[name, row["pcc"], row["srcc"], "", ""]
           for name, row in results["single_metric_baselines"].items()],
        title=f"Evaluation on {split} split (n={len(eval_ids)})",
    )
    if ablation:
        table += "\n" + em.render_table(
            ["modality", "PCC", "SRCC", "MSE", "R2"],
            [[s, r["pcc"], r["srcc"], r["mse"], r["r2"]]
             for s, r in results["ablation"].items()],
            title="Modality ablation",
        )
    (eval_dir / "evaluation.txt").write_text(table)
    print(table, end="")


def cmd_compare(cfg: dict) -> None:
    """AL vs random sampling over paired seeds, with bootstrap p-values."""
    out = _out_dir(cfg)
    _write_resolved(cfg, out, "compare")
    manifest = _load_data(cfg)
    n_seeds = int(cfg["compare"]["n_seeds"])
    per_seed = []
    for s in range(n_seeds):
        res_al = _run_proxy(cfg, manifest, "AL", seed_offset=s)
        res_ra = _run_proxy(cfg, manifest, "RANDOM", seed_offset=s)
        per_seed.append({
            "seed_offset": s,
            "al": [e.get("rho_diag", e["rho_pool"]) for e in res_al.history],
            "random": [e.get("rho_diag", e["rho_pool"]) for e in res_ra.history],
        })
    stages = ["S0", "S1", "S2"]
    pvals = {}
    diffs_by_stage = {}
    for i, stage in enumerate(stages):
        diffs = [row["al"][i] - row["random"][i] for row in per_seed]
        diffs_by_stage[stage] = diffs
        pvals[stage] = al.paired_bootstrap_pvalue(
            diffs, n_resamples=int(cfg["compare"]["bootstrap_resamples"]),
            seed=int(cfg["seed"]))
    payload = {"per_seed": per_seed, "p_values": pvals,
               "mean_diff": {s: float(np.mean(d)) for s, d in diffs_by_stage.items()}}
    cmp_dir = out / "compare"
    cmp_dir.mkdir(exist_ok=True)
    em.write_results(cmp_dir / "comparison.json", payload)
    for stage in stages:
        print(f"{stage}: mean rho(AL)-rho(Random) = {payload['mean_diff'][stage]:+.4f} "
              f"(p={pvals[stage]:.4f}, {n_seeds} paired seeds)")


def cmd_report(cfg: dict) -> None:
    out = _out_dir(cfg)
    found = False
    for rel in ("proxy/weights.json", "finetune/finetune_report.json",
                "evaluate/evaluation.json", "compare/comparison.json"):
        path = out / rel
        if path.exists():
            found = True
            print(f"== {rel} ==")
            print(json.dumps(json.loads(path.read_text()), indent=2, sort_keys=True))
    if not found:
        raise DataError(f"no result artifacts under {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dubeval",
                                     description="dubbing-quality prediction lab")
    parser.add_argument("--config", help="YAML run config")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config entry")
    parser.add_argument("--out", help="output directory (overrides config)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "proxy-learn", "train", "finetune", "compare", "report"):
        sub.add_parser(name)
    ev = sub.add_parser("evaluate")
    ev.add_argument("--ablation", action="store_true",
                    help="train and score every modality subset")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.out)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "proxy-learn":
            cmd_proxy_learn(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "finetune":
            cmd_finetune(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, ablation=args.ablation)
        elif args.command == "compare":
            cmd_compare(cfg)
        elif args.command == "report":
            cmd_report(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
