"""Command line entry point: ``tpf <command> --config FILE [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 missing or malformed data.
``TPF_THREADS`` caps the numeric worker threads (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

COMMANDS = ("distill", "finetune", "track", "gap", "gen-data")
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def _set_threads() -> None:
    n = os.environ.get("TPF_THREADS", "1")
    for var in _THREAD_VARS:
        os.environ.setdefault(var, n)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _pretrained(cfg, seqs, out: Path, verbose: bool):
    from . import pipeline as pl
    if cfg.train.aux_tracker:
        ck = pl.read_checkpoint(cfg.resolve(cfg.train.aux_tracker))
        pl._check_config_section(cfg, {k: v for k, v in ck.get("config", {}).items()
                                       if k.startswith("tracker.")}, cfg.train.aux_tracker)
        tracker = pl.Tracker(cfg.tracker)
        pl._load_subset(tracker, pl.tracker_state(ck, cfg.train.aux_tracker), ("",))
        return tracker
    tracker = pl.pretrain_tracker(cfg, seqs, log_path=out / "pretrain_loss.csv", verbose=verbose)
    pl.save_checkpoint(out / "aux_tracker.ckpt", {"config": pl._config_section(cfg, "additive"),
                                                  **pl.tracker_sections(tracker)})
    return tracker


def cmd_distill(cfg, verbose: bool = False) -> dict:
    from . import pipeline as pl
    out = cfg.out
    seqs = pl.load_sequences(cfg.train_data)
    aux = _pretrained(cfg, seqs, out, verbose)
    pfa, summary = pl.distill_pfa(cfg, seqs, aux, out / "distill_loss.csv", verbose)
    pl.save_checkpoint(out / "distill.ckpt", {"config": pl._config_section(cfg, "pfa"),
                                              "pfa": pfa.state_dict(), **pl.tracker_sections(aux)})
    _write_json(out / "distill_summary.json", summary)
    return summary


def cmd_finetune(cfg, verbose: bool = False) -> dict:
    from . import pipeline as pl
    out = cfg.out
    seqs = pl.load_sequences(cfg.train_data)
    pfa_state = None
    if cfg.train.init:
        ck = pl.read_checkpoint(cfg.resolve(cfg.train.init))
        pl._check_config_section(cfg, ck.get("config", {}), cfg.train.init)
        tracker_state, pfa_state = pl.tracker_state(ck, cfg.train.init), ck.get("pfa")
    else:
        tracker_state = _pretrained(cfg, seqs, out, verbose).state_dict()
    model, aux = pl.finetune(cfg, seqs, tracker_state, pfa_state, out / "finetune_loss.csv", verbose)
    pl.save_model(out / "train.ckpt", cfg, model, {"aux": aux} if aux is not None else None)
    pl.save_model(out / "model.ckpt", cfg, model)
    return {"model": str(out / "model.ckpt")}


def cmd_track(cfg, verbose: bool = False) -> dict:
    from . import pipeline as pl
    out = cfg.out
    ckpt = cfg.resolve(cfg.track.model) if cfg.track.model else out / "model.ckpt"
    model = pl.load_model(cfg, ckpt)
    seq = pl.SequenceData.load(cfg.test_data)
    t0 = time.perf_counter()
    res = pl.track_sequence(cfg, model, seq)
    elapsed = time.perf_counter() - t0
    pl.write_boxes(out / "boxes.csv", seq, res)
    metrics = res.metrics.to_dict()
    metrics.update(frames=len(seq), seconds=elapsed, fps=(len(seq) - 1) / elapsed if elapsed > 0 else 0.0)
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_gap(cfg, verbose: bool = False) -> dict:
    from . import pipeline as pl
    out = cfg.out
    seqs = pl.load_sequences(cfg.train_data)
    eval_seq = pl.SequenceData.load(cfg.test_data) if cfg.test_data is not None else seqs[0]
    ck_dir = cfg.resolve(cfg.gap.checkpoints) if cfg.gap.checkpoints else out
    reports = []
    for k in cfg.gap.locations:
        path = ck_dir / f"gap_k{k}.ckpt"
        if path.exists():
            model = pl.load_gap_model(cfg, path, k)
        elif cfg.gap.train_missing:
            model = pl.train_gap_model(cfg, seqs, k, verbose)
            pl.save_checkpoint(out / f"gap_k{k}.ckpt", {"config": pl.gap_model_config_section(cfg, k),
                                                        "model": model.state_dict()})
        else:
            raise pl.DataError(f"missing gap checkpoint {path} and train_missing is off")
        reports.append(pl.layerwise_gap(model, pl.gap_batches(cfg, eval_seq)))
    pl.write_gap_outputs(out, reports)
    return {f"k{r.fusion_layer}": r.final_mmd2 for r in reports}


def cmd_gen_data(cfg, verbose: bool = False) -> dict:
    from .config import ConfigError
    from .synth import write_sequence
    if not cfg.gen:
        raise ConfigError("gen-data needs at least one [gen.NAME] section")
    made = {}
    for name, spec in cfg.gen.items():
        d = cfg.out / "data" / name
        write_sequence(spec, d)
        made[name] = str(d)
    return made


_DISPATCH = {"distill": cmd_distill, "finetune": cmd_finetune, "track": cmd_track,
             "gap": cmd_gap, "gen-data": cmd_gen_data}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tpf", description="RGB-T fusion tracking experiments")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="INI experiment file")
    ap.add_argument("--seed", type=int, default=None, help="override [experiment] seed")
    ap.add_argument("--out", default=None, help="override [experiment] out")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    _set_threads()
    args = build_parser().parse_args(argv)
    from .config import ConfigError, DataError, load_config
    try:
        cfg = load_config(args.config, args.command, args.seed, args.out)
        cfg.out.mkdir(parents=True, exist_ok=True)
        result = _DISPATCH[args.command](cfg, args.verbose)
    except ConfigError as exc:
        print(f"tpf: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"tpf: data error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
