"""``sga`` command line: discover -> extract -> store -> run / eval -> stats.

Exit codes: 0 success, 2 usage, 3 file error, 4 backend error, 5 data or
schema error. Errors are printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import Config, ConfigError, resolve
from .core import ToolSchema, trajectories_from_jsonl
from .env import SchemaError, Task, ToolEnvironment, generate_chain_env, load_table_env
from .executor import DEFAULT_MAX_STEPS, EpisodeResult, run_episode
from .extraction import LLMAbstractor, RuleAbstractor, SgaAtom, compression_ratio, distill
from .llm.backends import BackendError, ChatBackend, MockBackend, RemoteBackend
from .llm.critic import judge_grounding
from .llm.mock_agents import agent_handlers
from .mcts import SearchTree, best_trajectories, run_search, tree_stats
from .metrics import efficiency_report, episodes_csv, report_csv, tool_familiarity, write_csv
from .policy import LLMSearchPolicy, ScriptedPolicy
from .store import EmptyStore, ExperienceStore, HashingEmbedder, RemoteEmbedder, RetrievalQuery, StoreError, embed_atoms

log = logging.getLogger("sga")

EXIT_OK, EXIT_USAGE, EXIT_FILE, EXIT_BACKEND, EXIT_DATA = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared plumbing


def _config(args) -> Config:
    return resolve(getattr(args, "config", None), {
        "mcts.c": getattr(args, "c", None),
        "mcts.iterations": getattr(args, "iterations", None),
        "mcts.max_depth": getattr(args, "max_depth", None),
        "mcts.lambda": getattr(args, "lam", None),
        "store.beta": getattr(args, "beta", None),
        "store.epsilon": getattr(args, "epsilon", None),
        "store.top_k": getattr(args, "k", None),
        "sampling.temperature": getattr(args, "temperature", None),
        "sampling.top_p": getattr(args, "top_p", None),
        "sampling.top_k": getattr(args, "top_k", None),
        "sampling.min_p": getattr(args, "min_p", None),
        "backend.kind": getattr(args, "backend", None),
        "backend.base_url": getattr(args, "base_url", None),
        "backend.model": getattr(args, "model", None),
        "seed": getattr(args, "seed", None),
    })


def _backend(cfg: Config, tools: Sequence[ToolSchema] = (), rules: str | None = None) -> ChatBackend:
    if cfg.backend_kind == "mock":
        handlers = agent_handlers(tools)
        if rules:
            return MockBackend.from_json(rules, handlers)
        return MockBackend(handlers=handlers)
    if cfg.base_url and cfg.model:
        return RemoteBackend(cfg.base_url, cfg.model, os.environ.get("SGA_API_KEY"))
    return RemoteBackend.from_env()


def _embedder(args):
    if getattr(args, "embedder", "hash") == "remote":
        return RemoteEmbedder.from_env()
    return HashingEmbedder(dim=args.dim)


def _chain_specs(args) -> list[dict]:
    if getattr(args, "tasks", None):
        specs = _read_json(args.tasks)
        if not isinstance(specs, list):
            raise SchemaError("tasks file must hold a JSON list of {seed, hops, distractors}")
        return [{"seed": int(s.get("seed", 0)), "hops": int(s.get("hops", args.hops)),
                 "distractors": int(s.get("distractors", args.distractors))} for s in specs]
    count = getattr(args, "count", 1) or 1
    return [{"seed": args.seed + i, "hops": args.hops, "distractors": args.distractors} for i in range(count)]


def _environments(args, cfg: Config) -> list[tuple[ToolEnvironment, Task]]:
    """``--env chain`` builds seeded chains; any other value is a table-env file."""
    if args.env == "chain":
        if getattr(args, "tasks", None) is None and getattr(args, "seed", None) is None:
            args.seed = cfg.seed
        return [generate_chain_env(s["seed"], s["hops"], s["distractors"]) for s in _chain_specs(args)]
    env = load_table_env(args.env)
    if not env.tasks:
        raise SchemaError(f"{args.env} declares no tasks")
    return [(env, t) for t in env.tasks]


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc.msg}", exc.lineno) from None


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_tools(path: str) -> list[ToolSchema]:
    data = _read_json(path)
    if isinstance(data, dict) and "tools" in data:
        data = data["tools"]
    if not isinstance(data, list):
        raise SchemaError(f"{path}: expected a list of tool schemas")
    try:
        return [ToolSchema.from_dict(t) for t in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad tool schema: {exc}") from None


def _load_checkpoint(path: str) -> list[SearchTree]:
    data = _read_json(path)
    if not isinstance(data, dict) or data.get("v") != 1 or not isinstance(data.get("trees"), list):
        raise SchemaError(f"{path}: not a search checkpoint (v=1 with a 'trees' list)")
    try:
        return [SearchTree.from_dict(t) for t in data["trees"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad tree: {exc}") from None


# ---------------------------------------------------------------------------
# Commands


def cmd_discover(args) -> int:
    cfg = _config(args)
    trees, schemas, written = [], {}, []
    out_dir = Path(args.trajectories) if args.trajectories else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for env, task in _environments(args, cfg):
        tools = env.list_tools()
        for t in tools:
            schemas.setdefault(t.name, t)
        if cfg.backend_kind == "mock":
            policy = ScriptedPolicy()
        else:
            policy = LLMSearchPolicy(_backend(cfg, tools), cfg.sampling)
        critic = None
        if args.require_grounding:
            critic_backend = None if cfg.backend_kind == "mock" else _backend(cfg, tools)
            critic = lambda traj, b=critic_backend: judge_grounding(traj, b).grounded  # noqa: E731
        tree = run_search(task, env, policy, cfg.mcts, seed=cfg.seed, critic=critic)
        trees.append(tree)
        best = best_trajectories(tree)[: args.keep]
        if out_dir:
            lines = [line for i, t in enumerate(best) for line in t.to_jsonl_lines(i)]
            (out_dir / f"{task.task_id}.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        stats = tree_stats(tree)
        written.append({"task_id": task.task_id, "successes": len(best), "nodes": stats.node_count,
                        "edges": tree.expanded_edges,
                        "best_reward": best[0].reward if best else 0.0})
    checkpoint = {"v": 1, "config": cfg.raw, "trees": [t.to_dict() for t in trees]}
    Path(args.checkpoint).write_text(json.dumps(checkpoint, ensure_ascii=False, indent=1) + "\n",
                                     encoding="utf-8")
    if out_dir:
        tools_doc = [s.to_dict() for s in sorted(schemas.values(), key=lambda s: s.name)]
        (out_dir / "tools.json").write_text(json.dumps(tools_doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for row in written:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_extract(args) -> int:
    src = Path(args.trajectories)
    if not src.is_dir():
        raise FileNotFoundError(f"trajectory directory not found: {src}")
    trajectories = []
    for f in sorted(src.glob("*.jsonl")):
        try:
            trajectories.extend(trajectories_from_jsonl(f.read_text(encoding="utf-8").splitlines()))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise SchemaError(f"{f}: {exc}") from None
    schemas = _load_tools(args.schemas)
    if args.abstractor == "llm":
        cfg = _config(args)
        abstractor = LLMAbstractor(_backend(cfg, schemas))
    else:
        abstractor = RuleAbstractor()
    atoms = distill(trajectories, schemas, abstractor, include_meta=args.include_meta_atoms, domain=args.domain)
    if args.no_embed:
        _write_atoms(atoms, args.out)
    else:
        ExperienceStore(embed_atoms(atoms, _embedder(args))).save(args.out)
    explored = sum(len(t.steps) for t in trajectories)
    ratio = compression_ratio(explored, len(atoms)) if atoms else 0.0
    print(json.dumps({"trajectories": len(trajectories), "steps": explored, "atoms": len(atoms),
                      "compression": ratio}, sort_keys=True))
    return EXIT_OK


def _write_atoms(atoms: Sequence[SgaAtom], path: str) -> None:
    Path(path).write_text("".join(json.dumps(a.to_dict(), sort_keys=True) + "\n" for a in atoms), encoding="utf-8")


def cmd_store_build(args) -> int:
    rows = []
    for lineno, line in enumerate(Path(args.atoms).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                rows.append(SgaAtom.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{args.atoms}: {exc}", lineno) from None
    store = ExperienceStore(embed_atoms(rows, _embedder(args)))
    store.save(args.out)
    print(json.dumps({"atoms": len(store)}))
    return EXIT_OK


def cmd_store_query(args) -> int:
    cfg = _config(args)
    if not Path(args.store).is_file():
        raise FileNotFoundError(f"store not found: {args.store}")
    store = ExperienceStore.load(args.store, cfg.store)
    slots = [s.strip() for s in (args.slots or "").split(",") if s.strip()]
    dim = store.dim or args.dim
    embedder = RemoteEmbedder.from_env() if args.embedder == "remote" else HashingEmbedder(dim=dim)
    query = RetrievalQuery.build(args.text, embedder, slots)
    for atom, score in store.retrieve(query, cfg.store.top_k):
        print(json.dumps({"sga_id": atom.sga_id, "score": round(score, 12), "goal": atom.goal,
                          "action": dict(atom.action_template)}, sort_keys=True))
    return EXIT_OK


def _open_store(path: str | None, cfg: Config) -> ExperienceStore | None:
    if not path:
        return None
    if not Path(path).is_file():
        raise FileNotFoundError(f"store not found: {path}")
    return ExperienceStore.load(path, cfg.store)


def _episode(env_task, store, cfg: Config, args, label: str) -> EpisodeResult:
    env, task = env_task
    backend = _backend(cfg, env.list_tools(), getattr(args, "mock_rules", None))
    if args.embedder == "hash" and store is not None and len(store):
        embedder = HashingEmbedder(dim=store.dim)
    else:
        embedder = _embedder(args)
    return run_episode(task, env, store, backend, embedder, k=cfg.store.top_k, max_steps=args.max_steps,
                       sampling=cfg.sampling, label=label)


def cmd_run(args) -> int:
    cfg = _config(args)
    store = _open_store(args.store, cfg)
    pairs = _environments(args, cfg)
    if args.task:
        spec = _read_json(args.task)
        if args.env == "chain":
            pairs = [generate_chain_env(int(spec.get("seed", 0)), int(spec.get("hops", args.hops)),
                                        int(spec.get("distractors", args.distractors)))]
        else:
            pairs = [p for p in pairs if p[1].task_id == spec.get("task_id")]
            if not pairs:
                raise SchemaError(f"task {spec.get('task_id')!r} not in {args.env}")
    results = [_episode(p, store, cfg, args, "run") for p in pairs]
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            for r in results:
                for line in r.trajectory.to_jsonl_lines():
                    fh.write(line + "\n")
    _write(args.out, episodes_csv(results))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    store = _open_store(args.store, cfg)
    pairs = _environments(args, cfg)
    cohorts: list[tuple[str, ExperienceStore | None]] = []
    if store is not None and args.cohorts in ("both", "store"):
        cohorts.append(("with-store", store))
    if args.cohorts in ("both", "empty") or store is None:
        cohorts.append(("empty-store", None))
    jobs = [(label, st, p) for label, st in cohorts for p in pairs]
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(lambda j: _episode(j[2], j[1], cfg, args, j[0]), jobs))
    if args.episodes:
        Path(args.episodes).write_text(episodes_csv(results), encoding="utf-8")
    _write(args.out, report_csv(efficiency_report(results)))
    return EXIT_OK


def cmd_stats(args) -> int:
    rows = []
    for tree in _load_checkpoint(args.tree):
        s = tree_stats(tree)
        rows.append({"task_id": tree.task_id, "branching_factor": s.branching_factor, "avg_depth": s.avg_depth,
                     "node_count": s.node_count, "expanded_edges": tree.expanded_edges,
                     "iterations": tree.iterations,
                     "successes": len(best_trajectories(tree))})
    buf = io.StringIO()
    write_csv(rows, ("task_id", "branching_factor", "avg_depth", "node_count", "expanded_edges", "iterations",
                     "successes"), buf)
    _write(args.out, buf.getvalue())
    return EXIT_OK


def cmd_familiarity(args) -> int:
    report = tool_familiarity(_load_tools(args.src), _load_tools(args.tgt), _embedder(args))
    buf = io.StringIO()
    rows = [{"tool": t, "nearest_source": s, "cosine": c} for t, s, c in report.per_target]
    rows.append({"tool": "__mean__", "nearest_source": "", "cosine": report.score})
    write_csv(rows, ("tool", "nearest_source", "cosine"), buf)
    _write(args.out, buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int, help="seed for every stochastic component")
    p.add_argument("--backend", choices=("mock", "remote"))
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model")
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-p", dest="top_p", type=float)
    p.add_argument("--top-k", dest="top_k", type=int, help="sampling top-k")
    p.add_argument("--min-p", dest="min_p", type=float)
    p.add_argument("--embedder", choices=("hash", "remote"), default="hash")
    p.add_argument("--dim", type=int, default=256, help="hashing embedder dimension")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_env(p: argparse.ArgumentParser) -> None:
    p.add_argument("--env", default="chain", help="'chain' or a table-env JSON file")
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--distractors", type=int, default=6)


def _add_store(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, help="retrieved atoms per step")
    p.add_argument("--beta", type=float)
    p.add_argument("--epsilon", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sga", description="Offline tree search, atom distillation and hint-guided execution.")
    parser.add_argument("--version", action="version", version=f"sga {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("discover", help="run tree search and write a checkpoint")
    _add_common(p)
    _add_env(p)
    p.add_argument("--tasks", help="JSON list of chain specs {seed, hops, distractors}")
    p.add_argument("--count", type=int, default=1, help="chain tasks with consecutive seeds")
    p.add_argument("--iterations", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--c", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--checkpoint", default="checkpoint.json")
    p.add_argument("--trajectories", help="directory for best trajectories (JSONL) and tools.json")
    p.add_argument("--keep", type=int, default=1, help="best trajectories kept per task")
    p.add_argument("--require-grounding", action="store_true", help="also require the grounding critic")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("extract", help="distill trajectories into an atom store")
    _add_common(p)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--schemas", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--include-meta-atoms", action="store_true")
    p.add_argument("--abstractor", choices=("rule", "llm"), default="rule")
    p.add_argument("--domain", default="sga")
    p.add_argument("--no-embed", action="store_true", help="write atoms without embeddings")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("store", help="build or query an atom store")
    ssub = p.add_subparsers(dest="store_command", parser_class=_Parser)
    b = ssub.add_parser("build")
    _add_common(b)
    b.add_argument("--atoms", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_store_build)
    q = ssub.add_parser("query")
    _add_common(q)
    _add_store(q)
    q.add_argument("--store", required=True)
    q.add_argument("--text", required=True)
    q.add_argument("--slots", default="")
    q.set_defaults(func=cmd_store_query)

    p = sub.add_parser("run", help="run one episode per task")
    _add_common(p)
    _add_env(p)
    _add_store(p)
    p.add_argument("--task", help="JSON task spec: {seed, hops, distractors} or {task_id}")
    p.add_argument("--tasks", help=argparse.SUPPRESS)
    p.add_argument("--store")
    p.add_argument("--max-steps", dest="max_steps", type=int, default=DEFAULT_MAX_STEPS)
    p.add_argument("--mock-rules", dest="mock_rules")
    p.add_argument("--log", help="episode log (JSONL)")
    p.add_argument("--out", help="summary CSV (default stdout)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="batch episodes with and without the store")
    _add_common(p)
    _add_env(p)
    _add_store(p)
    p.add_argument("--tasks", help="JSON list of chain specs")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--store")
    p.add_argument("--cohorts", choices=("both", "store", "empty"), default="both")
    p.add_argument("--max-steps", dest="max_steps", type=int, default=DEFAULT_MAX_STEPS)
    p.add_argument("--mock-rules", dest="mock_rules")
    p.add_argument("--jobs", type=int, default=4)
    p.add_argument("--episodes", help="per-episode CSV")
    p.add_argument("--out", help="cohort CSV (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="topology statistics of a checkpoint")
    p.add_argument("--tree", required=True)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("familiarity", help="tool familiarity of a target toolset w.r.t. a source toolset")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--embedder", choices=("hash", "remote"), default="hash")
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_familiarity)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("missing command")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "usage", str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(EXIT_FILE, "file", str(exc))
    except BackendError as exc:
        return _fail(EXIT_BACKEND, "backend", str(exc))
    except (ConfigError, SchemaError, StoreError, EmptyStore, ValueError, KeyError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except OSError as exc:
        return _fail(EXIT_FILE, "file", str(exc))


if __name__ == "__main__":
    sys.exit(main())
