"""
Interface en ligne de commande.
Commandes pretrain, forecast, sweep, ablation, selftest et synth, pilotées par
un document de configuration JSON.
"""

import argparse
import itertools
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from timedistill import __version__
from timedistill.augment import MASK_POSITIONS
from timedistill.checkpoint_manager import load_checkpoint
from timedistill.config import (
    ConfigValidationError,
    DEFAULT_OUTPUT_DIR,
    RunConfig,
    SyntheticSpec,
    load_run_config,
    run_config_to_dict,
    setup_logging,
    validate_config,
)
from timedistill.errors import TimedistillError, UsageError
from timedistill.forecast import run_forecast
from timedistill.loader import SeriesDataset, load_csv
from timedistill.metrics import save_report
from timedistill.model import TeacherStudentState
from timedistill.preprocessing import get_split_statistics, normalize, select_target, split
from timedistill.selftest import format_table, run_selftest
from timedistill.synthetic import from_spec, write_csv
from timedistill.trainer import complexity_terms, overlap_alignment, pretrain

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_SELFTEST = 3

SWEEP_PARAMS = {"lambda": "lam", "m": "momentum"}


def prepare_dataset(cfg: RunConfig) -> SeriesDataset:
    """Chargement (CSV ou synthétique), mode univarié, découpage puis normalisation."""
    if cfg.dataset.synthetic is not None:
        ds = from_spec(cfg.dataset.synthetic)
    else:
        ds = load_csv(Path(cfg.dataset.path), cfg.dataset.date_column)
    if cfg.dataset.univariate:
        ds = select_target(ds)
    ds = normalize(split(ds, cfg.dataset.split_ratios))
    logger.info(f"Dataset prêt: {get_split_statistics(ds)}, {ds.n_channels} canal(aux)")
    return ds


def _load(config_path: Path, out: Optional[str], seed: Optional[int]) -> RunConfig:
    cfg = load_run_config(config_path).with_overrides(seed=seed, output_dir=out)
    validate_config(cfg)
    return cfg


def _open_run_dir(cfg: RunConfig) -> Path:
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    setup_logging(out_dir / "run.log")
    with open(out_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(run_config_to_dict(cfg), f, ensure_ascii=False, indent=2)
    return out_dir


def _write_json(data: Dict, path: Path) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
    return path


def _pretrain_run(cfg: RunConfig, ds: SeriesDataset, out_dir: Path, resume=None) -> TeacherStudentState:
    state, trace = pretrain(cfg.train, ds, resume=resume, out_dir=out_dir)
    matched, mismatched = overlap_alignment(state, ds, cfg.train, np.random.default_rng(cfg.train.seed + 1))
    joint = trace.joint()
    window = min(20, len(joint))
    _write_json({
        "iterations": len(trace),
        "final": asdict(trace.reports[-1]),
        "leading_joint_mean": float(joint[:window].mean()),
        "trailing_joint_mean": float(joint[-window:].mean()),
        "alignment_matched": matched,
        "alignment_mismatched": mismatched,
        "complexity": complexity_terms(cfg.train.crop_window, ds.n_channels, cfg.train.repr_dims, cfg.train.crop_window),
        "checkpoint": str(trace.checkpoint_path),
    }, out_dir / "summary.json")
    return state


def _forecast_run(cfg: RunConfig, state: TeacherStudentState, ds: SeriesDataset, out_dir: Path) -> pd.DataFrame:
    reports, baselines = run_forecast(state, ds, cfg.forecast, out_dir=out_dir)
    rows = []
    for report, baseline in zip(reports, baselines):
        save_report(report, out_dir / f"metrics_h{report.horizon}.json")
        row = asdict(report)
        row["persistence_mse"] = baseline.mse
        row["persistence_mae"] = baseline.mae
        rows.append(row)
    table = pd.DataFrame(rows)
    table.to_csv(out_dir / "forecast_summary.csv", index=False)
    return table


def cmd_pretrain(config_path: Path, out: Optional[str] = None, seed: Optional[int] = None,
                 resume: Optional[Path] = None) -> Path:
    """
    Pré-entraîne et écrit le point de contrôle, trace.csv, timings.csv et summary.json.

    Returns:
        Répertoire de sortie
    """
    cfg = _load(config_path, out, seed)
    out_dir = _open_run_dir(cfg)
    ds = prepare_dataset(cfg)
    checkpoint = load_checkpoint(resume) if resume is not None else None
    _pretrain_run(cfg, ds, out_dir, resume=checkpoint)
    logger.info(f"Artefacts écrits dans {out_dir}")
    return out_dir


def cmd_forecast(config_path: Path, checkpoint_path: Path, out: Optional[str] = None) -> pd.DataFrame:
    """
    Évalue un point de contrôle sur chaque horizon : un rapport JSON par horizon
    et forecast_summary.csv.
    """
    cfg = _load(config_path, out, None)
    checkpoint = load_checkpoint(checkpoint_path)
    out_dir = _open_run_dir(cfg)
    ds = prepare_dataset(cfg)
    if checkpoint.state.dims.input_dims != ds.n_channels:
        raise UsageError(
            f"Le point de contrôle attend {checkpoint.state.dims.input_dims} canaux, le dataset en a {ds.n_channels}"
        )
    return _forecast_run(cfg, checkpoint.state, ds, out_dir)


def parse_values(raw: Sequence[str]) -> List[float]:
    """Accepte '0,0.5,1' comme '0 0.5 1'."""
    values = []
    for chunk in raw:
        values.extend(float(v) for v in chunk.split(",") if v.strip())
    return values


def cmd_sweep(config_path: Path, param: str, values: Sequence[float], out: Optional[str] = None,
              seed: Optional[int] = None) -> pd.DataFrame:
    """
    Un run complet (pré-entraînement puis prévision) par valeur de λ ou de m.

    Returns:
        Tableau long (value, horizon, mse, mae), écrit dans sweep_<param>.csv

    Raises:
        UsageError: Paramètre inconnu ou liste de valeurs vide
    """
    if param not in SWEEP_PARAMS:
        raise UsageError(f"Paramètre de balayage inconnu: {param} (choix: {sorted(SWEEP_PARAMS)})")
    if not values:
        raise UsageError("Liste de valeurs vide pour le balayage")

    base = _load(config_path, out, seed)
    field_name = SWEEP_PARAMS[param]
    runs = [replace(base, train=replace(base.train, **{field_name: float(v)})) for v in values]
    for run in runs:
        validate_config(run)

    out_dir = _open_run_dir(base)
    ds = prepare_dataset(base)
    rows = []
    for value, run in zip(values, runs):
        run_dir = out_dir / f"{param}_{value:g}"
        run_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Balayage {param}={value:g}")
        state = _pretrain_run(run, ds, run_dir)
        table = _forecast_run(run, state, ds, run_dir)
        for _, r in table.iterrows():
            rows.append({"value": float(value), "horizon": int(r["horizon"]), "mse": r["mse"], "mae": r["mae"]})

    result = pd.DataFrame(rows, columns=["value", "horizon", "mse", "mae"])
    result.to_csv(out_dir / f"sweep_{param}.csv", index=False)
    return result


def ablation_variants() -> Dict[str, Dict[str, bool]]:
    """Les huit combinaisons {indépendant, momentum} × {centrage} × {distillation}."""
    variants = {}
    for momentum, center, supervised in itertools.product((False, True), repeat=3):
        name = "+".join([
            "momentum" if momentum else "independent",
            "center" if center else "nocenter",
            "sl" if supervised else "nosl",
        ])
        variants[name] = {"momentum_teacher": momentum, "use_center": center, "use_supervised": supervised}
    return variants


def mask_position_variants() -> Dict[str, Dict[str, str]]:
    """Positions de masque autres que la position par défaut (enseignant latent, élève en entrée)."""
    return {f"mask-{position}": {"mask_position": position} for position in MASK_POSITIONS if position != "hybrid"}


def cmd_ablation(config_path: Path, out: Optional[str] = None, seed: Optional[int] = None,
                 masks: bool = True) -> pd.DataFrame:
    """
    Entraîne et évalue chaque variante ; écrit ablation.csv (variant, horizon, mse, mae).

    Args:
        masks: Ajoute les variantes de position du masque aux huit variantes de composants
    """
    base = _load(config_path, out, seed)
    variants = dict(ablation_variants())
    if masks:
        variants.update(mask_position_variants())
    out_dir = _open_run_dir(base)
    ds = prepare_dataset(base)
    rows = []
    for name, flags in variants.items():
        run = replace(base, train=replace(base.train, **flags))
        validate_config(run)
        run_dir = out_dir / name
        run_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Variante {name}")
        state = _pretrain_run(run, ds, run_dir)
        table = _forecast_run(run, state, ds, run_dir)
        for _, r in table.iterrows():
            rows.append({"variant": name, "horizon": int(r["horizon"]), "mse": r["mse"], "mae": r["mae"]})

    result = pd.DataFrame(rows, columns=["variant", "horizon", "mse", "mae"])
    result.to_csv(out_dir / "ablation.csv", index=False)
    return result


def cmd_selftest(only: Optional[Sequence[str]] = None) -> bool:
    """Affiche le tableau des vérifications ; True si toutes passent."""
    results = run_selftest(only)
    print(format_table(results))
    return all(r.passed for r in results)


def cmd_synth(config_path: Optional[Path] = None, out: Optional[str] = None, seed: Optional[int] = None) -> Path:
    """Écrit synthetic.csv, lisible par load_csv."""
    spec = SyntheticSpec()
    out_dir = Path(out) if out is not None else DEFAULT_OUTPUT_DIR
    if config_path is not None:
        cfg = _load(config_path, out, None)
        out_dir = Path(cfg.output_dir)
        if cfg.dataset.synthetic is not None:
            spec = cfg.dataset.synthetic
    if seed is not None:
        spec = replace(spec, seed=int(seed))
    return write_csv(from_spec(spec), out_dir / "synthetic.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="timedistill",
        description="Pré-entraînement auto-supervisé enseignant/élève et prévision de séries temporelles",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="Pré-entraîner l'encodeur")
    p.add_argument("--config", type=Path, required=True, help="Fichier de configuration JSON")
    p.add_argument("--out", type=str, default=None, help="Répertoire de sortie (remplace output_dir)")
    p.add_argument("--seed", type=int, default=None, help="Graine (remplace train.seed)")
    p.add_argument("--resume", type=Path, default=None, help="Point de contrôle à reprendre")

    p = sub.add_parser("forecast", help="Évaluer un point de contrôle sur les horizons")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("sweep", help="Balayer λ ou m")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--param", type=str, required=True, help="lambda ou m")
    p.add_argument("--values", nargs="*", default=[], help="Valeurs, séparées par des virgules ou des espaces")
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("ablation", help="Comparer les variantes de composants et de position du masque")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-masks", action="store_true", help="Seulement les huit variantes de composants")

    p = sub.add_parser("selftest", help="Vérifier gradients, oracles et invariants")
    p.add_argument("--only", nargs="*", default=None, help="Sous-ensemble de vérifications")

    p = sub.add_parser("synth", help="Écrire un dataset synthétique au format CSV")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Point d'entrée.

    Returns:
        0 succès, 1 erreur du package, 2 configuration invalide, 3 auto-test en échec
    """
    args = build_parser().parse_args(argv)
    setup_logging()

    try:
        if args.command == "pretrain":
            cmd_pretrain(args.config, args.out, args.seed, args.resume)
        elif args.command == "forecast":
            cmd_forecast(args.config, args.checkpoint, args.out)
        elif args.command == "sweep":
            cmd_sweep(args.config, args.param, parse_values(args.values), args.out, args.seed)
        elif args.command == "ablation":
            cmd_ablation(args.config, args.out, args.seed, masks=not args.no_masks)
        elif args.command == "selftest":
            if not cmd_selftest(args.only):
                return EXIT_SELFTEST
        elif args.command == "synth":
            cmd_synth(args.config, args.out, args.seed)
    except ConfigValidationError as e:
        logger.error(f"Configuration invalide ({e.key}): {e}")
        return EXIT_CONFIG
    except TimedistillError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR
    except OSError as e:
        logger.error(f"Erreur d'entrée/sortie: {e}")
        return EXIT_ERROR
    except ValueError as e:
        logger.error(f"Valeur invalide: {e}")
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
