"""Command-line runner: ``medit <subcommand> --config PATH``.

Config files are JSON objects. Unknown keys anywhere are rejected. Schema::

    {
      "seed": 0,                      # master seed, fanned out per stage
      "task": "sentiment",            # shipped task name or a task jsonl path
      "target": "...",                # attack target phrase
      "instruction": null,            # override the task's instruction
      "bs_sweep": [5, 10, 15, 20, 30],
      "eval_n": 200,                  # prompts per rate / clean metric
      "timing_repeats": 1,            # inject runs per bs for timing medians
      "robustness_bs": 30,
      "paths": {"corpus": null, "checkpoint": null, "paraphrases": null, "out": "runs"},
      "train": {...TrainConfig fields...},
      "edit": {...EditConfig fields...},
      "retrain": {...RetrainConfig fields...}
    }

Exit codes: 0 success, 2 config error, 3 runtime failure (JSON line on stderr).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import statistics
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .edit import EditConfig
from .evaluate import (ADAPT_COLUMNS, RetrainConfig, adaptability_eval, evaluate, read_paraphrases,
                       reference_stealth_rows, robustness_eval, rows_csv)
from .pipeline import choose_trigger, covariances_for, default_corpus, inject_backdoor
from .poison import DEFAULT_TARGET, load_task
from .seeding import derive_seed
from .train import TrainConfig, train_toy
from .trigger import candidates_csv, load_lexicon, rank_candidates

log = logging.getLogger("medit")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

_TOP_KEYS = {"seed", "task", "target", "instruction", "bs_sweep", "eval_n", "timing_repeats",
             "robustness_bs", "paths", "train", "edit", "retrain"}
_PATH_KEYS = {"corpus", "checkpoint", "paraphrases", "out"}


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 0
    task: str = "sentiment"
    target: str = DEFAULT_TARGET
    instruction: str | None = None
    bs_sweep: tuple[int, ...] = (5, 10, 15, 20, 30)
    eval_n: int = 200
    timing_repeats: int = 1
    robustness_bs: int = 30
    corpus: str | None = None
    checkpoint: str | None = None
    paraphrases: str | None = None
    out: str = "runs"
    train: dict = dataclasses.field(default_factory=dict)
    edit: dict = dataclasses.field(default_factory=dict)
    retrain: dict = dataclasses.field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        cfg = dict(self.train)
        cfg.setdefault("seed", derive_seed(self.seed, "train"))
        if self.corpus is not None:
            cfg["corpus_path"] = self.corpus
        return TrainConfig(**cfg, lexicon_words=tuple(load_lexicon()))

    def edit_config(self, bs: int | None = None) -> EditConfig:
        cfg = dict(self.edit)
        cfg.setdefault("seed", derive_seed(self.seed, "edit"))
        if bs is not None:
            cfg["batch_size"] = bs
        if "layer_set" in cfg:
            cfg["layer_set"] = tuple(cfg["layer_set"])
        return EditConfig(**cfg)

    def retrain_config(self) -> RetrainConfig:
        cfg = dict(self.retrain)
        cfg.setdefault("seed", derive_seed(self.seed, "retrain"))
        if "sites" in cfg:
            cfg["sites"] = tuple(cfg["sites"])
        return RetrainConfig(**cfg)

    def corpus_lines(self):
        if self.corpus is None:
            return list(default_corpus())
        return [l for l in Path(self.corpus).read_text(encoding="utf-8").splitlines() if l.strip()]


def _check_fields(section: str, given: dict, cls) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)} - {"lexicon_words"}
    bad = sorted(set(given) - allowed)
    if bad:
        raise ConfigError(f"unknown key(s) in {section}: {bad}")


def load_config(path, seed_override: int | None = None, out_override: str | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    bad = sorted(set(raw) - _TOP_KEYS)
    if bad:
        raise ConfigError(f"unknown top-level key(s): {bad}")
    paths = raw.pop("paths", {}) or {}
    bad = sorted(set(paths) - _PATH_KEYS)
    if bad:
        raise ConfigError(f"unknown key(s) in paths: {bad}")
    for name, cls in (("train", TrainConfig), ("edit", EditConfig), ("retrain", RetrainConfig)):
        sec = raw.get(name, {}) or {}
        if not isinstance(sec, dict):
            raise ConfigError(f"{name} must be an object")
        _check_fields(name, sec, cls)
    try:
        cfg = ExperimentConfig(**raw, **paths)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    if seed_override is not None:
        cfg.seed = seed_override
    if out_override is not None:
        cfg.out = out_override
    cfg.bs_sweep = tuple(cfg.bs_sweep)
    if not cfg.bs_sweep or any((not isinstance(b, int)) or b < 1 for b in cfg.bs_sweep):
        raise ConfigError("bs_sweep values must be integers >= 1")
    if cfg.eval_n < 1 or cfg.timing_repeats < 1:
        raise ConfigError("eval_n and timing_repeats must be >= 1")
    for key in ("corpus", "checkpoint", "paraphrases"):
        p = getattr(cfg, key)
        if p is not None and not Path(p).exists():
            raise ConfigError(f"paths.{key} does not exist: {p}")
    if not Path(cfg.task).exists() and cfg.task not in ("sentiment", "qa", "summarization", "ner"):
        raise ConfigError(f"unknown task {cfg.task!r}")
    try:  # validate sections eagerly so bad values are config errors
        cfg.train_config()
        cfg.edit_config()
        cfg.retrain_config()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg


# ----------------------------------------------------------------- helpers

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _need_checkpoint(cfg: ExperimentConfig):
    if cfg.checkpoint is None:
        raise ConfigError("paths.checkpoint is required for this command")
    return ckpt.load_checkpoint(cfg.checkpoint)


def _task(cfg: ExperimentConfig):
    task = load_task(cfg.task)
    return task.with_instruction(cfg.instruction) if cfg.instruction else task


def _eval_seed(cfg):
    return derive_seed(cfg.seed, "eval")


# ---------------------------------------------------------------- commands

def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    tcfg = cfg.train_config()
    res = train_toy(tcfg, cfg.corpus_lines())
    sha = ckpt.save_checkpoint(out / "clean.ckpt", res.params)
    info = {"checkpoint": "clean.ckpt", "sha256": sha, "config": tcfg.to_dict(),
            "initial_heldout_perplexity": res.initial_heldout_ppl,
            "heldout_perplexity": res.heldout_ppl, "final_loss": res.losses[-1] if res.losses else None}
    _write(out / "train_report.json", _dump(info))
    print(f"held-out perplexity {res.heldout_ppl:.4f}")
    return info


def cmd_select_trigger(cfg: ExperimentConfig, out: Path, instruction: str | None = None) -> dict:
    params = _need_checkpoint(cfg)
    instruction = instruction or _task(cfg).instruction
    cands = rank_candidates(params, instruction)
    choice = choose_trigger(params, instruction, ranked=cands)
    record = {"instruction": instruction, "poisoned_instruction": choice.poisoned,
              "trigger": choice.trigger, "subject": choice.subject,
              "metrics": dataclasses.asdict(choice.candidate.metrics), "skipped": choice.skipped}
    _write(out / "candidates.csv", candidates_csv(cands))
    _write(out / "trigger.json", _dump(record))
    print(json.dumps({"poisoned_instruction": choice.poisoned, "trigger": choice.trigger}))
    return record


def cmd_inject(cfg: ExperimentConfig, out: Path) -> dict:
    params = _need_checkpoint(cfg)
    task = _task(cfg)
    base_cfg = cfg.edit_config()
    covs = covariances_for(params, base_cfg, cfg.corpus_lines())
    choice = choose_trigger(params, task.instruction)
    summary, timing = [], []
    for bs in cfg.bs_sweep:
        ecfg = cfg.edit_config(bs)
        secs = []
        for _ in range(cfg.timing_repeats):
            res = inject_backdoor(params, task, cfg.target, ecfg, covariances=covs, choice=choice)
            secs.append(res.report.seconds)
        sha = ckpt.save_checkpoint(out / f"edited_bs{bs}.ckpt", res.params)
        rep = res.report.to_dict()
        rep["extra"].pop("timing", None)
        _write(out / f"edit_report_bs{bs}.json", _dump(rep))
        summary.append({"bs": bs, "checkpoint": f"edited_bs{bs}.ckpt", "sha256": sha,
                        "poisoned_instruction": res.poisoned_instruction, "trigger": res.trigger,
                        "subject": res.subject})
        timing.append({"bs": bs, "median_seconds": statistics.median(secs), "runs": secs})
    _write(out / "inject_summary.json", _dump({"task": task.name, "target": cfg.target, "runs": summary}))
    # wall-clock is the one non-reproducible output, kept apart from the reports
    lines = ["bs,median_edit_seconds,runs"] + [
        f"{t['bs']},{t['median_seconds']:.6f},{' '.join(f'{s:.6f}' for s in t['runs'])}" for t in timing]
    _write(out / "timing.csv", "\n".join(lines) + "\n")
    return {"runs": summary, "timing": timing}


def _edited_paths(cfg, out: Path):
    found = []
    for bs in cfg.bs_sweep:
        p = out / f"edited_bs{bs}.ckpt"
        if p.exists():
            found.append((bs, p))
    return found


def cmd_eval(cfg: ExperimentConfig, out: Path) -> dict:
    params = _need_checkpoint(cfg)
    task = _task(cfg)
    seed = _eval_seed(cfg)
    summary_path = out / "inject_summary.json"
    if not summary_path.exists():
        raise ConfigError(f"{summary_path} missing; run inject first")
    runs = {r["bs"]: r for r in json.loads(summary_path.read_text())["runs"]}
    reports = []
    clean = evaluate(params, task, None, cfg.target, cfg.eval_n, seed)
    clean_row = clean.row() | {"bs": "clean"}
    rows = [clean_row]
    for bs, path in _edited_paths(cfg, out):
        edited = ckpt.load_checkpoint(path)
        rep = evaluate(edited, task, runs[bs]["poisoned_instruction"], cfg.target, cfg.eval_n, seed, bs=bs)
        reports.append(rep)
        rows.append(rep.row())
        _write(out / f"verdicts_bs{bs}.json", _dump(rep.verdicts))
    _write(out / "eval_report.json", _dump({"clean": clean.to_dict() | {"verdicts": {}},
                                            "edited": [r.to_dict() | {"verdicts": {}} for r in reports]}))
    _write(out / "eval_report.csv", rows_csv(rows))
    table = ["bs," + task.name] + [f"{r.bs},{r.asr:.2f}" for r in reports]
    _write(out / "asr_table.csv", "\n".join(table) + "\n")
    return {"rows": rows}


def cmd_robustness(cfg: ExperimentConfig, out: Path) -> dict:
    task = _task(cfg)
    bs = cfg.robustness_bs
    path = out / f"edited_bs{bs}.ckpt"
    if not path.exists():
        raise ConfigError(f"{path} missing; include {bs} in bs_sweep and run inject first")
    runs = {r["bs"]: r for r in json.loads((out / "inject_summary.json").read_text())["runs"]}
    edited = ckpt.load_checkpoint(path)
    rcfg = cfg.retrain_config()
    before, after, retrained = robustness_eval(edited, task, runs[bs]["poisoned_instruction"],
                                               cfg.target, rcfg, cfg.eval_n, _eval_seed(cfg))
    sha = ckpt.save_checkpoint(out / f"retrained_bs{bs}.ckpt", retrained.params)
    rec = {"bs": bs, "retrain": rcfg.to_dict(), "checkpoint": f"retrained_bs{bs}.ckpt", "sha256": sha,
           "before": before.to_dict() | {"verdicts": {}}, "after": after.to_dict() | {"verdicts": {}},
           "final_loss": retrained.losses[-1] if retrained.losses else None}
    _write(out / "robustness.json", _dump(rec))
    _write(out / "robustness.csv", rows_csv([before.row() | {"bs": f"{bs} before"},
                                             after.row() | {"bs": f"{bs} after"}]))
    return rec


def cmd_adaptability(cfg: ExperimentConfig, out: Path) -> dict:
    params = _need_checkpoint(cfg)
    if cfg.paraphrases is None:
        raise ConfigError("paths.paraphrases is required for adaptability")
    task = _task(cfg)
    ecfg = cfg.edit_config()
    covs = covariances_for(params, ecfg, cfg.corpus_lines())
    rows = adaptability_eval(params, task, read_paraphrases(cfg.paraphrases), cfg.target,
                             ecfg, cfg.eval_n, _eval_seed(cfg), covariances=covs)
    _write(out / "adaptability.csv", rows_csv(rows, ADAPT_COLUMNS))
    _write(out / "adaptability.json", _dump(rows))
    ok = sum(1 for r in rows[:-1] if r["status"] == "ok")
    if ok == 0:
        raise RuntimeError("every paraphrase failed")
    return {"rows": rows}


def cmd_report(cfg: ExperimentConfig, out: Path) -> dict:
    parts = ["# Run summary", ""]
    for name in ("train_report.json", "inject_summary.json", "eval_report.csv", "robustness.csv",
                 "adaptability.csv"):
        p = out / name
        if p.exists():
            parts += [f"## {name}", "", "```", p.read_text(encoding="utf-8").rstrip(), "```", ""]
    parts += ["## Published stealthiness reference (SST-2 column)", "", "method,source,sim,ppl"]
    parts += [f"{r['method']},{r['source']},{r['sim']},{r['ppl']}" for r in reference_stealth_rows()]
    _write(out / "summary.md", "\n".join(parts) + "\n")
    return {"summary": "summary.md"}


COMMANDS = {"train": cmd_train, "select-trigger": cmd_select_trigger, "inject": cmd_inject,
            "eval": cmd_eval, "robustness": cmd_robustness, "adaptability": cmd_adaptability,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="medit", description="Editing-based backdoor pipeline on a toy LM.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default=None)
    ap.add_argument("--instruction", default=None, help="select-trigger: instruction to poison")
    return ap


def _setup_logging() -> None:
    level = os.environ.get("MEDIT_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"MEDIT_LOG must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(code: int, kind: str, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    try:
        _setup_logging()
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed, args.out)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", e)
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            fn = COMMANDS[args.command]
            if args.command == "select-trigger":
                fn(cfg, out, args.instruction)
            else:
                fn(cfg, out)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", e)
    except ckpt.CheckpointError as e:
        return _fail(EXIT_CONFIG, "config", e)
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime", e)
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
