"""Command-line interface: fit, chains, detect, eval, toy.

Exit codes: 0 success, 1 usage or validation error, 2 numerical failure.
Every command that writes an output directory also writes
``run_manifest.json`` describing how the outputs were produced.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import secrets
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_bytes, atomic_write_text, sha256_file, write_json
from .chains import Chain, edge_ends, enumerate_chains, materialize, parse_chain_spec
from .detection import DetectionConfig, Module, detect, set_threads
from .evaluation import (
    Case,
    EvaluationError,
    SyntheticSpec,
    generate_synthetic,
    loocv_details,
    module_recovery,
)
from .factorization import (
    FactorizationError,
    FactorizationOptions,
    LatentModel,
    factorize,
    load_model,
    save_model,
    select_ranks,
)
from .graph import FusionGraph, GraphError, load_fusion_graph, normalize_matrix, save_fusion_graph
from .scoring import ScoringError

logger = logging.getLogger("medusa")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
THREADS_ENV = "MEDUSA_THREADS"
TOY_NAMES = ("synthetic", "genedisease", "triangle")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _resolve_threads(arg: int | None) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return max(1, arg or os.cpu_count() or 1)


def _seed(arg: int | None) -> int:
    return int(arg) if arg is not None else secrets.randbelow(2**31)


def _write_run_manifest(out: Path, command: str, config: dict, inputs: list[Path], seeds: dict, outputs, started: str, threads: int):
    doc = {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in sorted(inputs)},
        "seeds": seeds,
        "tool_version": __version__,
        "outputs": sorted(str(p) for p in outputs),
        "runtime": {"started": started, "finished": _now(), "threads": threads},
    }
    write_json(out / "run_manifest.json", doc)


def _graph_inputs(manifest: Path) -> list[Path]:
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    base = manifest.parent
    files = [manifest]
    files += [base / t["labels_file"] for t in doc.get("types", [])]
    files += [base / r["matrix_file"] for r in doc.get("relations", [])]
    files += [base / c["matrix_file"] for c in doc.get("constraints", [])]
    return files


def _parse_ranks(text: str) -> dict[str, int]:
    ranks = {}
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"--ranks expects TYPE=K pairs, got {part!r}")
        key, val = part.split("=", 1)
        try:
            ranks[key.strip()] = int(val)
        except ValueError:
            raise UsageError(f"--ranks value for {key!r} is not an integer") from None
    return ranks


def _read_labels(path: Path) -> list[str]:
    if not path.is_file():
        raise UsageError(f"missing file: {path}")
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _load_model_dir(model_dir: Path) -> tuple[LatentModel, FusionGraph]:
    model = load_model(model_dir)
    graph = load_fusion_graph(model_dir / "graph" / "manifest.json")
    return model, graph


def _fit(graph: FusionGraph, args, seed: int) -> LatentModel:
    if args.ranks and args.p is not None:
        raise UsageError("give either --p or --ranks, not both")
    if args.ranks:
        ranks = _parse_ranks(args.ranks)
    else:
        p = 0.05 if args.p is None else args.p
        if not 0 < p <= 1:
            raise UsageError(f"--p must lie in (0, 1], got {p}")
        ranks = select_ranks(graph, p)
    try:
        opts = FactorizationOptions(args.max_iter, args.tol, seed, args.init)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not args.no_normalize:
        graph = graph.map_relations(normalize_matrix)
    return factorize(graph, ranks, opts)


def _chains(args, ends) -> list[Chain]:
    if not args.chain:
        raise UsageError("at least one --chain is required")
    return [parse_chain_spec(ends, spec) for spec in args.chain]


def _config(args, k: int | None = None) -> DetectionConfig:
    try:
        return DetectionConfig(
            regime=args.regime,
            k=args.k if k is None else k,
            alpha=args.alpha,
            q=args.q,
            beta=args.beta,
            combination="combined" if args.combine else "single",
            semantics=tuple(args.chain),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_chain_types(chains: list[Chain]):
    sources = {c.source for c in chains}
    targets = {c.target for c in chains}
    if len(sources) != 1:
        raise UsageError(f"all chains must start at the same type, got {sorted(sources)}")
    return sources.pop(), targets


def _resolve(graph: FusionGraph, type_id: str, labels: list[str], what: str) -> list[int]:
    t = graph.type(type_id)
    unknown = [lab for lab in labels if lab not in t.labels]
    if unknown:
        raise UsageError(f"unknown {what} labels for type {type_id!r}: {', '.join(unknown)}")
    return [t.index_of(lab) for lab in labels]


def _pivot_indices(graph: FusionGraph, chains: list[Chain], regime: str, labels: list[str]) -> list[int]:
    source, targets = _check_chain_types(chains)
    if regime == "cpe":
        return _resolve(graph, source, labels, "pivot")
    if len(targets) != 1:
        raise UsageError("cpi chains must share one target type")
    target = targets.pop()
    if target == source:
        raise UsageError("cpi needs pivots of a type other than the candidates")
    stray = [lab for lab in labels if lab not in graph.type(target).labels]
    if stray and all(lab in graph.type(source).labels for lab in stray):
        raise UsageError(
            f"type mismatch: {', '.join(stray)} are {source!r} entities but cpi pivots must be of type {target!r}"
        )
    return _resolve(graph, target, labels, "pivot")


def _module_doc(module: Module, graph: FusionGraph, chains: list[Chain], config: DetectionConfig, pivot_labels: list[str]) -> dict:
    cand = graph.type(chains[0].source)
    labels = [c.label for c in chains]
    return {
        "regime": module.regime,
        "k": module.k,
        "config": config.to_dict(),
        "semantics": [{"spec": c.spec, "label": c.label} for c in chains],
        "pivots": pivot_labels,
        "members": [
            {
                "label": cand.labels[m.index],
                "index": m.index,
                "iteration": m.iteration,
                "p_value": m.p_value,
                "per_semantic": dict(zip(labels, m.per_semantic)),
            }
            for m in module.members
        ],
        "semantic_weights": module.weights,
    }


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    started = _now()
    manifest = Path(args.graph)
    graph = load_fusion_graph(manifest)
    seed = _seed(args.seed)
    model = _fit(graph, args, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    save_fusion_graph(graph, out / "graph")
    outputs = [p.relative_to(out) for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json"]
    config = {
        "ranks": model.rank_spec,
        "p": args.p,
        "normalize": not args.no_normalize,
        "max_iterations": args.max_iter,
        "rel_tolerance": args.tol,
        "init_scheme": args.init,
    }
    _write_run_manifest(out, "fit", config, _graph_inputs(manifest), {"factorization": seed}, outputs, started, args.threads)
    print(f"final objective {model.objective_value!r} after {len(model.fit_log) - 1} iterations")
    return EXIT_OK


def cmd_chains(args) -> int:
    started = _now()
    if bool(args.model) == bool(args.graph):
        raise UsageError("give exactly one of --model or --graph")
    if args.model:
        graph = load_fusion_graph(Path(args.model) / "graph" / "manifest.json")
        inputs = [Path(args.model) / "model.json"]
    else:
        graph = load_fusion_graph(args.graph)
        inputs = _graph_inputs(Path(args.graph))
    try:
        found = enumerate_chains(graph, args.source, args.target, args.max_len)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for c in found:
        print(f"{c.spec}\t{c.label}")
    if args.out:
        out = Path(args.out)
        doc = {
            "from": args.source,
            "to": args.target,
            "max_length": args.max_len,
            "chains": [{"spec": c.spec, "label": c.label, "length": c.length} for c in found],
        }
        write_json(out / "chains.json", doc)
        config = {"from": args.source, "to": args.target, "max_length": args.max_len}
        _write_run_manifest(out, "chains", config, inputs, {}, ["chains.json"], started, args.threads)
    return EXIT_OK


def cmd_detect(args) -> int:
    started = _now()
    model_dir = Path(args.model)
    model, graph = _load_model_dir(model_dir)
    ends = edge_ends(graph)
    chains = _chains(args, ends)
    config = _config(args)
    pivot_labels = _read_labels(Path(args.pivots))
    pivots = _pivot_indices(graph, chains, config.regime, pivot_labels)
    semantics = [materialize(model, c) for c in chains]
    module = detect(semantics, pivots, config)
    doc = _module_doc(module, graph, chains, config, pivot_labels)
    out = Path(args.out)
    write_json(out / "module.json", doc)
    _write_run_manifest(
        out, "detect", config.to_dict(), [model_dir / "model.json", Path(args.pivots)], {}, ["module.json"], started, args.threads
    )
    for m in doc["members"]:
        print(f"{m['iteration']}\t{m['label']}\t{m['p_value']:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    if bool(args.model) == bool(args.graph):
        raise UsageError("give exactly one of --model or --graph")
    seeds: dict[str, int] = {}
    if args.model:
        model, graph = _load_model_dir(Path(args.model))
        inputs = [Path(args.model) / "model.json"]
    else:
        manifest = Path(args.graph)
        graph = load_fusion_graph(manifest)
        seeds["factorization"] = _seed(args.seed)
        model = _fit(graph, args, seeds["factorization"])
        inputs = _graph_inputs(manifest)
    chains = _chains(args, edge_ends(graph))
    source, targets = _check_chain_types(chains)
    semantics = [materialize(model, c) for c in chains]
    out = Path(args.out)

    if args.protocol == "loocv":
        if not args.cases:
            raise UsageError("--protocol loocv needs --cases")
        config = _config(args, k=1)
        cases = _read_cases(Path(args.cases), graph, source, targets, config.regime)
        inputs.append(Path(args.cases))
        details = loocv_details(semantics, cases, config)
        rows = ["case\tn_pos\tn_neg\tauroc\tauprc"]
        report = {"protocol": "loocv", "config": config.to_dict(), "cases": {}}
        for name, (m, _) in details.items():
            rows.append(f"{name}\t{m.n_pos}\t{m.n_neg}\t{m.auroc!r}\t{m.auprc!r}")
            report["cases"][name] = {"auroc": m.auroc, "auprc": m.auprc, "n_pos": m.n_pos, "n_neg": m.n_neg}
        skipped = sorted(c.name for c in cases if c.name not in details)
        report["skipped"] = skipped
        write_json(out / "report.json", report)
        atomic_write_text(out / "metrics.tsv", "\n".join(rows) + "\n")
        outputs = ["report.json", "metrics.tsv"]
        if args.plot:
            outputs += _plot_curves(out, {name: pairs for name, (_, pairs) in details.items()})
        for line in rows:
            print(line)
    else:
        if not args.truth:
            raise UsageError("--protocol recovery needs --truth")
        if not 0 < args.fraction < 1:
            raise UsageError(f"--fraction must lie in (0, 1), got {args.fraction}")
        config = _config(args)
        if config.regime != "cpe":
            raise UsageError("module recovery runs in the cpe regime")
        truth_labels = _read_labels(Path(args.truth))
        truth = _resolve(graph, source, truth_labels, "truth")
        inputs.append(Path(args.truth))
        seeds["removal"] = _seed(args.removal_seed)
        try:
            rep = module_recovery(semantics, truth, args.fraction, config, seed=seeds["removal"])
        except EvaluationError as exc:
            raise UsageError(str(exc)) from None
        labels = graph.type(source).labels
        if rep is None:
            doc = {"protocol": "recovery", "removal_fraction": args.fraction, "skipped": True}
            row = f"{args.fraction!r}\tnan\t0"
        else:
            doc = {
                "protocol": "recovery",
                "removal_fraction": rep.removal_fraction,
                "recall_at_k": rep.recall_at_k,
                "held_out": [labels[i] for i in rep.held_out],
                "pivots": [labels[i] for i in rep.pivots],
                "module": _module_doc(rep.module, graph, chains, replace(config, k=rep.module.k), [labels[i] for i in rep.pivots]),
                "skipped": False,
            }
            row = f"{rep.removal_fraction!r}\t{rep.recall_at_k!r}\t{len(rep.held_out)}"
        write_json(out / "recovery.json", doc)
        atomic_write_text(out / "recovery.tsv", "removal_fraction\trecall_at_k\tn_held_out\n" + row + "\n")
        outputs = ["recovery.json", "recovery.tsv"]
        print(row)
    _write_run_manifest(out, "eval", {"protocol": args.protocol, **config.to_dict()}, inputs, seeds, outputs, started, args.threads)
    return EXIT_OK


def _read_cases(path: Path, graph: FusionGraph, source: str, targets: set[str], regime: str) -> list[Case]:
    """Cases file: ``{"name": {"positives": [...], "pivots": [...]}}``."""
    if not path.is_file():
        raise UsageError(f"missing file: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    cases = []
    for name, entry in sorted(doc.items()):
        positives = _resolve(graph, source, list(entry.get("positives", [])), "positive")
        pivots: list[int] = []
        if regime == "cpi":
            if len(targets) != 1:
                raise UsageError("cpi chains must share one target type")
            pivots = _resolve(graph, next(iter(targets)), list(entry.get("pivots", [])), "pivot")
        cases.append(Case(name, tuple(positives), tuple(pivots)))
    return cases


def _plot_curves(out: Path, pairs_by_case: dict) -> list[str]:
    import io

    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "medusa"
    written = []
    for kind in ("roc", "pr"):
        fig, ax = plt.subplots(figsize=(4, 4))
        for name, pairs in sorted(pairs_by_case.items()):
            x, y = _curve(pairs, kind)
            ax.plot(x, y, label=name, drawstyle="steps-post")
        if kind == "roc":
            ax.set_xlabel("false positive rate")
            ax.set_ylabel("true positive rate")
        else:
            ax.set_xlabel("recall")
            ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize="small")
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
        atomic_write_bytes(out / f"{kind}.svg", buf.getvalue())
        written.append(f"{kind}.svg")
    return written


def _curve(pairs, kind: str):
    values = np.array([v for v, _ in pairs])
    labels = np.array([bool(y) for _, y in pairs])
    hits = labels[np.argsort(values, kind="stable")]
    tp = np.concatenate([[0], np.cumsum(hits)])
    fp = np.concatenate([[0], np.cumsum(~hits)])
    if kind == "roc":
        return fp / max(fp[-1], 1), tp / max(tp[-1], 1)
    n = np.arange(len(tp))
    precision = np.where(n > 0, tp / np.maximum(n, 1), 1.0)
    return tp / max(tp[-1], 1), precision


def cmd_toy(args) -> int:
    """Write a bundled example graph, or a synthetic one with its planted truth."""
    started = _now()
    out = Path(args.out)
    if args.name != "synthetic":
        src = resources.files("medusa") / "data" / args.name
        out.mkdir(parents=True, exist_ok=True)
        names = sorted(f.name for f in src.iterdir() if f.is_file())
        for name in names:
            atomic_write_bytes(out / name, (src / name).read_bytes())
        _write_run_manifest(out, "toy", {"name": args.name}, [], {}, names, started, 1)
        print(f"wrote {args.name} fusion graph to {out / 'manifest.json'}")
        return EXIT_OK
    spec = SyntheticSpec(seed=args.seed, signal=args.signal, density=args.density)
    graph, truth = generate_synthetic(spec)
    save_fusion_graph(graph, out)
    module = truth["module"]
    atomic_write_text(out / "module.txt", "".join(f"{lab}\n" for lab in module))
    atomic_write_text(out / "pivots.txt", "".join(f"{lab}\n" for lab in module[: len(module) // 2]))
    atomic_write_text(out / "diseases.txt", "".join(f"{lab}\n" for lab in truth["diseases"]))
    write_json(out / "cases.json", {"planted": {"positives": module, "pivots": truth["diseases"]}})
    write_json(out / "synthetic_spec.json", spec.to_dict())
    outputs = [p.relative_to(out) for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json"]
    _write_run_manifest(out, "toy", {"name": "synthetic", **spec.to_dict()}, [], {"synthetic": args.seed}, outputs, started, 1)
    print(f"wrote synthetic fusion graph to {out / 'manifest.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_fit_options(p: argparse.ArgumentParser):
    p.add_argument("--p", type=float, default=None, help="rank of each type as a fraction of its size (default 0.05)")
    p.add_argument("--ranks", default=None, help="explicit ranks as TYPE=K,TYPE=K,...")
    p.add_argument("--seed", type=int, default=None, help="factorization seed (drawn and recorded if omitted)")
    p.add_argument("--max-iter", type=int, default=500, help="maximum factorization sweeps (default 500)")
    p.add_argument("--tol", type=float, default=1e-5, help="relative objective change to stop at (default 1e-5)")
    p.add_argument("--init", choices=("random-uniform", "random-acol"), default="random-uniform", help="factor initialization")
    p.add_argument("--no-normalize", action="store_true", help="skip column-row normalization of relation matrices")


def _add_detect_options(p: argparse.ArgumentParser, with_k: bool = True):
    p.add_argument("--chain", action="append", default=[], metavar="SPEC",
                   help="chain as 'edge[!] > edge[!] ...' ('!' = reverse); repeatable")
    p.add_argument("--combine", action="store_true", help="combine all listed chains into one score")
    p.add_argument("--regime", choices=("cpe", "cpi"), default="cpe", help="same-type (cpe) or cross-type (cpi) pivots")
    if with_k:
        p.add_argument("--k", type=int, default=3, help="module size (default 3)")
    p.add_argument("--alpha", type=float, default=0.5, help="cpe weight decay of accreted pivots (default 0.5)")
    p.add_argument("--q", type=int, default=2, help="cpe number of strongest columns per candidate (default 2)")
    p.add_argument("--beta", type=float, default=0.05, help="cpi diversity parameter (default 0.05)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="medusa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--threads", type=int, default=None, help=f"worker threads (env {THREADS_ENV} overrides)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="factorize a fusion graph into a latent model")
    p.add_argument("--graph", required=True, help="fusion graph manifest (JSON)")
    p.add_argument("--out", required=True, help="model directory to write")
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("chains", help="list chains between two object types")
    p.add_argument("--model", help="model directory written by 'fit'")
    p.add_argument("--graph", help="fusion graph manifest instead of a model")
    p.add_argument("--from", dest="source", required=True, help="source object type")
    p.add_argument("--to", dest="target", required=True, help="target object type")
    p.add_argument("--max-len", type=int, default=4, help="maximum chain length (default 4)")
    p.add_argument("--out", default=None, help="optional directory for chains.json")
    p.set_defaults(func=cmd_chains)

    p = sub.add_parser("detect", help="detect a size-k module for a pivot set")
    p.add_argument("--model", required=True, help="model directory written by 'fit'")
    p.add_argument("--pivots", required=True, help="file with one pivot label per line")
    p.add_argument("--out", required=True, help="output directory for module.json")
    _add_detect_options(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--model", help="model directory written by 'fit'")
    p.add_argument("--graph", help="fusion graph manifest; fitted in memory")
    p.add_argument("--protocol", choices=("loocv", "recovery"), required=True)
    p.add_argument("--cases", help="loocv cases JSON: {name: {positives: [...], pivots: [...]}}")
    p.add_argument("--truth", help="recovery: file with the full module, one label per line")
    p.add_argument("--fraction", type=float, default=0.5, help="recovery: fraction of the module to hide (default 0.5)")
    p.add_argument("--removal-seed", type=int, default=None, help="recovery: seed of the random removal")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--plot", action="store_true", help="loocv: also write roc.svg and pr.svg")
    _add_detect_options(p)
    _add_fit_options(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("toy", help="write an example fusion graph")
    p.add_argument("--out", required=True, help="directory to write")
    p.add_argument("--name", choices=TOY_NAMES, default="synthetic",
                   help="synthetic graph with a planted module (default), or a bundled genedisease/triangle graph")
    p.add_argument("--seed", type=int, default=42, help="generator seed (default 42)")
    p.add_argument("--signal", type=float, default=3.0, help="planted signal strength (default 3)")
    p.add_argument("--density", type=float, default=0.9, help="fraction of observed entries (default 0.9)")
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = _resolve_threads(args.threads)
        set_threads(args.threads)
        return args.func(args)
    except (UsageError, GraphError, EvaluationError) as exc:
        print(f"medusa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FactorizationError, ScoringError) as exc:
        print(f"medusa {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"medusa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
