"""Command-line front end: fraggraph, train, predict, evaluate, identify, features."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields

from .chem import parse_smiles
from .errors import CfmError, GraphTooLarge, MalformedLine, MissingEnergyBlock, NoTrainingData, SmilesError
from .features import dump_feature_names, graph_features
from .fraggraph import build_graph, dump_graph
from .identify import (SpectrumCache, filter_mass_window, format_ranking, load_candidates, rank_candidates,
                       rank_of)
from .model import (CE_TAGS, CONFIG_KEYS, SE_TAGS, ModelConfig, config_from_items, config_items, load_model,
                    save_model)
from .predict import compute_metrics, format_spectra, predict_spectra, read_spectra_file, root_ion
from .train import TrainingInstance, em_train_ce, em_train_se

log = logging.getLogger("cfmkit")

EXIT_ERROR = 1
EXIT_PARSE = 2
EXIT_GRAPH = 3
EXIT_NO_DATA = 4

RUN_KEYS = ("workers", "seed")
DEFAULTS = config_items(ModelConfig())


class UsageError(CfmError):
    kind = "UsageError"


class MissingSpectrum(CfmError):
    kind = "MissingSpectrum"


def default_workers() -> int:
    env = os.environ.get("CFMKIT_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise UsageError("CFMKIT_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# configuration


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    items = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise MalformedLine(f"{path}: expected 'key = value', got {raw.strip()!r}", lineno)
            if key not in CONFIG_KEYS and key not in RUN_KEYS:
                raise MalformedLine(f"{path}: unknown config key {key!r}", lineno)
            items[key] = value
    return items


def resolve_config(args) -> tuple[ModelConfig, dict]:
    """Model config and run settings from defaults, then the config file, then flags."""
    items = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key in CONFIG_KEYS:
        v = getattr(args, "cfg_" + key, None)
        if v is not None:
            items[key] = str(v)
    run = {k: items.pop(k) for k in RUN_KEYS if k in items}
    try:
        config = config_from_items(items)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    workers = getattr(args, "workers", None) or run.get("workers") or default_workers()
    seed = getattr(args, "seed", None)
    seed = int(run.get("seed", 0)) if seed is None else seed
    if int(workers) < 1:
        raise UsageError("workers must be >= 1")
    return config, {"workers": int(workers), "seed": int(seed)}


def _add_config_flags(p):
    g = p.add_argument_group("model configuration (flags override the config file)")
    g.add_argument("--config", help="flat key = value configuration file")
    types = {f.name: f.type for f in fields(ModelConfig)}
    for key, name in CONFIG_KEYS.items():
        t = {"int": int, "float": float}.get(types[name], str)
        g.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, type=t, metavar=key.upper(),
                       help=f"default: {DEFAULTS[key]}")
    _add_run_flags(p)


def _add_run_flags(p):
    p.add_argument("--workers", type=int, help="worker threads (default: CFMKIT_THREADS or the core count)")
    p.add_argument("--seed", type=int, help="random seed (default: 0)")


# ---------------------------------------------------------------------------
# data loading


def read_molecule_tsv(path) -> list[tuple[str, str]]:
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise MalformedLine(f"{path}: expected 'id<TAB>smiles', got {line!r}", lineno)
            out.append((parts[0], parts[1]))
    return out


def load_training_set(tsv, spectra_dir) -> list[TrainingInstance]:
    out = []
    for mid, smi in read_molecule_tsv(tsv):
        path = os.path.join(spectra_dir, f"{mid}.spectra")
        if not os.path.exists(path):
            log.warning("no spectra for %s (%s); skipped", mid, path)
            continue
        spectra = read_spectra_file(path, require_all=False)
        spectra = {e: s.normalize() for e, s in spectra.items() if len(s) and s.intensities.sum() > 0}
        out.append(TrainingInstance(mid, root_ion(parse_smiles(smi)), spectra))
    if not out:
        raise NoTrainingData(f"no usable training molecules in {tsv}")
    return out


def _write(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_fraggraph(args) -> int:
    mol = root_ion(parse_smiles(args.smiles))
    graph = build_graph(mol, args.depth, args.cap)
    _write(dump_graph(graph), args.out)
    return 0


def cmd_features(args) -> int:
    config, _ = resolve_config(args)
    layout = config.layout
    if args.names:
        _write(dump_feature_names(layout), args.out)
        return 0
    if not args.smiles:
        raise UsageError("a SMILES string is required unless --names is given")
    graph = build_graph(root_ion(parse_smiles(args.smiles)), config.graph_depth, config.graph_cap)
    lines = [f"# {layout.version}"]
    for e, phi in zip(graph.edges, graph_features(graph, layout)):
        lines.append(f"{e.parent}\t{e.child}\t" + " ".join(str(i) for i in phi.active_indices))
    _write("\n".join(lines) + "\n", args.out)
    return 0


# checkpoints: a model file with the blocks so far plus a key/value state file


def _checkpoint_paths(directory):
    return os.path.join(directory, "checkpoint.model"), os.path.join(directory, "checkpoint.state")


def _save_checkpoint(directory, params, config, state: dict) -> None:
    model_path, state_path = _checkpoint_paths(directory)
    save_model(params, config, model_path + ".tmp")
    os.replace(model_path + ".tmp", model_path)
    with open(state_path + ".tmp", "w") as fh:
        fh.write("".join(f"{k} {v}\n" for k, v in state.items()))
    os.replace(state_path + ".tmp", state_path)


def _load_checkpoint(directory):
    model_path, state_path = _checkpoint_paths(directory)
    if not os.path.exists(state_path):
        return None, None
    model = load_model(model_path)
    with open(state_path) as fh:
        state = dict(line.split(None, 1) for line in fh.read().splitlines() if line.strip())
    return model, {k: v.strip() for k, v in state.items()}


def _train_block(key, train_fn, params, state, config, ckdir, log_lines):
    """Run or continue one EM fit; ``state`` records per-block progress for resuming."""
    nxt = int(state.get(f"{key}.next", 0))
    stop = state.get(f"{key}.stop")
    if stop == "converged" or (stop == "max_iter" and nxt >= config.em_max_iter):
        return
    resume = nxt > 0
    pq = state.get(f"{key}.prev_q", "none")

    def callback(it, p, rec):
        params.update(p)
        log_lines.append(f"{key} {rec.line()}")
        state.update({f"{key}.next": it + 1, f"{key}.prev_q": repr(rec.q_reg), f"{key}.stop": "running"})
        _save_checkpoint(ckdir, params, config, state)

    p, report = train_fn(resume, nxt if resume else 0, None if pq == "none" or not resume else float(pq), callback)
    params.update(p)
    log_lines.append(f"{key} stop {report.reason}")
    state[f"{key}.stop"] = report.reason
    _save_checkpoint(ckdir, params, config, state)


def cmd_train(args) -> int:
    config, run = resolve_config(args)
    instances = load_training_set(args.molecules, args.spectra_dir)
    ckdir = args.checkpoint_dir or (args.out + ".ckpt")
    os.makedirs(ckdir, exist_ok=True)
    params, state = {}, {}
    if args.resume:
        model, state = _load_checkpoint(ckdir)
        if model is None:
            raise UsageError(f"no checkpoint to resume from in {ckdir}")
        # only the iteration cap may change between the interrupted run and the resume
        same = {k: v for k, v in config_items(model.config).items() if k != "em_max_iter"}
        if same != {k: v for k, v in config_items(config).items() if k != "em_max_iter"}:
            raise UsageError("checkpoint was written with a different configuration")
        params = dict(model.params)
        log.info("resuming from %s", ckdir)
    log_lines = []
    workers = run["workers"]
    if config.mode == "se":
        for energy, tag in enumerate(SE_TAGS):
            def fit(resume, start, prev_q, callback, energy=energy, tag=tag):
                res = em_train_se(instances, energy, config, init=params.get(tag) if resume else None,
                                  workers=workers, start_iteration=start, prev_q=prev_q,
                                  callback=lambda it, p, rec: callback(it, {tag: p}, rec))
                return {tag: res[0]}, res[1]

            _train_block(tag, fit, params, state, config, ckdir, log_lines)
    else:
        def fit(resume, start, prev_q, callback):
            init = {t: params[t] for t in CE_TAGS} if resume else None
            return em_train_ce(instances, config, init=init, workers=workers, start_iteration=start,
                               prev_q=prev_q, callback=callback)

        _train_block("ce", fit, params, state, config, ckdir, log_lines)
    save_model(params, config, args.out)
    log_path = args.log or (args.out + ".log")
    with open(log_path, "a" if args.resume else "w") as fh:
        fh.write("\n".join(log_lines) + "\n")
    print(f"model written to {args.out}; log in {log_path}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    cutoff = not args.no_cutoff
    if args.molecules:
        outdir = args.out or "."
        os.makedirs(outdir, exist_ok=True)
        for mid, smi in read_molecule_tsv(args.molecules):
            spectra = predict_spectra(parse_smiles(smi), model, cutoff=cutoff)
            _write(format_spectra(spectra), os.path.join(outdir, f"{mid}.spectra"))
        return 0
    if not args.smiles:
        raise UsageError("give a SMILES string or --molecules")
    _write(format_spectra(predict_spectra(parse_smiles(args.smiles), model, cutoff=cutoff)), args.out)
    return 0


def _spectra_ids(directory) -> set[str]:
    return {f[: -len(".spectra")] for f in os.listdir(directory) if f.endswith(".spectra")}


def cmd_evaluate(args) -> int:
    pred_ids, meas_ids = _spectra_ids(args.predicted), _spectra_ids(args.measured)
    ids = [m for m, _ in read_molecule_tsv(args.molecules)] if args.molecules else sorted(pred_ids | meas_ids)
    for mid in ids:
        if mid not in pred_ids:
            raise MissingSpectrum(f"molecule {mid!r} has no predicted spectra in {args.predicted}")
        if mid not in meas_ids:
            raise MissingSpectrum(f"molecule {mid!r} has no measured spectra in {args.measured}")
    if not ids:
        raise MissingSpectrum("no spectra files to evaluate")
    lines = ["id\tweighted_recall\tweighted_precision\trecall\tprecision\tjaccard"]
    totals = [0.0] * 5
    for mid in ids:
        pred = read_spectra_file(os.path.join(args.predicted, f"{mid}.spectra"), require_all=False)
        meas = read_spectra_file(os.path.join(args.measured, f"{mid}.spectra"), require_all=False)
        common = sorted(set(pred) & set(meas))
        if not common:
            raise MissingEnergyBlock(f"molecule {mid!r}: no energy level present in both files")
        rows = [compute_metrics(pred[e], meas[e], args.tol_ppm, args.tol_abs).as_tuple() for e in common]
        avg = [sum(col) / len(rows) for col in zip(*rows)]
        totals = [t + a for t, a in zip(totals, avg)]
        lines.append(mid + "\t" + "\t".join(f"{v:.4f}" for v in avg))
    lines.append("mean\t" + "\t".join(f"{t / len(ids):.4f}" for t in totals))
    _write("\n".join(lines) + "\n", args.out)
    return 0


def cmd_identify(args) -> int:
    _, run = resolve_config(args)
    model = load_model(args.model)
    target = read_spectra_file(args.target)
    candidates = load_candidates(args.candidates)
    if args.mass is not None:
        candidates = filter_mass_window(candidates, args.mass, args.window_ppm, args.window_da)
    for c in candidates:
        if not c.accepted:
            log.info("candidate %s filtered: %s", c.id, c.reason)
    cache = SpectrumCache(args.cache) if args.cache else None
    results = rank_candidates(target, candidates, model, seed=run["seed"], workers=run["workers"], cache=cache)
    _write(format_ranking(results), args.out)
    if args.correct:
        print(f"correct_rank\t{rank_of(results, args.correct)}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except where there is none or the help text already gives one."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default is None or action.default is False or action.default == argparse.SUPPRESS \
                or "default:" in text:
            return text
        return text + " (default: %(default)s)"


def build_parser() -> argparse.ArgumentParser:
    fmt = _Formatter
    p = argparse.ArgumentParser(prog="cfmkit", description=__doc__, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fraggraph", help="dump the fragmentation graph of a molecule", formatter_class=fmt)
    s.add_argument("smiles", help="molecule; neutral input is protonated")
    s.add_argument("--depth", type=int, default=2, help="fragmentation depth")
    s.add_argument("--cap", type=int, default=50_000, help="maximum number of fragments")
    s.add_argument("--out", default="-", help="output file ('-' for stdout)")
    s.set_defaults(func=cmd_fraggraph)

    s = sub.add_parser("features", help="debug: active feature indices per edge, or the feature names",
                       formatter_class=fmt)
    s.add_argument("smiles", nargs="?", help="molecule to featurize")
    s.add_argument("--names", action="store_true", help="list index -> feature name instead")
    s.add_argument("--out", default="-", help="output file ('-' for stdout)")
    _add_config_flags(s)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="fit a model by EM", formatter_class=fmt)
    s.add_argument("molecules", help="TSV of id<TAB>smiles")
    s.add_argument("spectra_dir", help="directory holding <id>.spectra files")
    s.add_argument("--out", required=True, help="model file to write")
    s.add_argument("--log", help="training log (default: <out>.log)")
    s.add_argument("--checkpoint-dir", help="checkpoint directory (default: <out>.ckpt)")
    s.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="predict spectra", formatter_class=fmt)
    s.add_argument("smiles", nargs="?", help="molecule to predict")
    s.add_argument("--model", required=True, help="model file")
    s.add_argument("--molecules", help="TSV of id<TAB>smiles; writes <out>/<id>.spectra")
    s.add_argument("--out", help="output file, or directory with --molecules (default: stdout / .)")
    s.add_argument("--no-cutoff", action="store_true", help="keep every peak")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="score predicted against measured spectra", formatter_class=fmt)
    s.add_argument("predicted", help="directory of predicted <id>.spectra")
    s.add_argument("measured", help="directory of measured <id>.spectra")
    s.add_argument("--molecules", help="restrict to the ids of this TSV")
    s.add_argument("--tol-ppm", type=float, default=10.0, help="peak matching tolerance, ppm")
    s.add_argument("--tol-abs", type=float, default=0.01, help="peak matching tolerance floor, Da")
    s.add_argument("--out", default="-", help="metrics TSV ('-' for stdout)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("identify", help="rank candidates against a target spectra file", formatter_class=fmt)
    s.add_argument("target", help="spectra file with all three energy blocks")
    s.add_argument("candidates", help="TSV of id<TAB>smiles")
    s.add_argument("--model", required=True, help="model file")
    s.add_argument("--cache", help="directory for cached candidate predictions")
    s.add_argument("--mass", type=float, help="neutral mass for the optional mass-window filter")
    s.add_argument("--window-ppm", type=float, default=5.0, help="mass window, ppm")
    s.add_argument("--window-da", type=float, default=0.0, help="mass window floor, Da")
    s.add_argument("--correct", help="report the rank of this candidate id on stderr")
    s.add_argument("--out", default="-", help="ranking TSV ('-' for stdout)")
    s.add_argument("--config", help="flat key = value file (workers, seed)")
    _add_run_flags(s)
    s.set_defaults(func=cmd_identify)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, GraphTooLarge):
        return EXIT_GRAPH
    if isinstance(exc, NoTrainingData):
        return EXIT_NO_DATA
    if isinstance(exc, (SmilesError, MalformedLine, MissingEnergyBlock, UsageError)):
        return EXIT_PARSE
    return EXIT_ERROR


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CfmError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return exit_code(exc)
    except BrokenPipeError:
        # output piped into e.g. head; not an error
        sys.stdout = open(os.devnull, "w")
        return 0
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
