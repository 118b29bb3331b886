import argparse
from pathlib import Path
from typing import Sequence

from pydantic import ValidationError

from .corpus import (
    build_index,
    ingest_corpus,
    ingest_dataset,
    attach_subcorpus_cache,
    preretrieve_dataset,
    write_subcorpus_cache,
)
from .embed import DualEncoder, EmbeddingProvider, ProjectionHead, build_provider, load_head, save_head
from .evaluate import compare_systems, write_report_json, write_report_markdown
from .exceptions import AdaPCRError, ConfigError
from .fixtures import generate, read_truth, write_fixture
from .gradcheck import run_gradcheck
from .lmscore import ScoreCache, build_scorer
from .logger import logger
from .models import CONSTS, RunConfig, load_constants
from .retrieval import retrieve_dataset, write_retrievals
from .train import NegativeSampler, build_training_set, train_loop, write_loss_curve


# argparse dest -> (config section, field)
OVERRIDES = {
    "k": ("retrieval", "k"),
    "dedupe_self_pairs": ("retrieval", "dedupe_self_pairs"),
    "limit": ("corpus", "subcorpus_limit"),
    "dim": ("embedder", "dim"),
    "loss": ("training", "loss"),
    "gamma": ("training", "gamma"),
    "beta": ("training", "beta"),
    "top_k_marginal": ("training", "top_k_marginal"),
    "epochs": ("training", "epochs"),
    "batch_size": ("training", "batch_size"),
    "lr": ("training", "learning_rate"),
    "balance_stages": ("training", "balance_stages"),
    "in_batch_negatives": ("training", "in_batch_negatives"),
    "positive_filter": ("training", "positive_filter"),
    "workers": ("lm", "workers"),
    "kind": ("fixture", "kind"),
    "n": ("fixture", "n_questions"),
    "corpus_size": ("fixture", "corpus_size"),
    "vocab_size": ("fixture", "vocab_size"),
    "unanswerable_fraction": ("fixture", "unanswerable_fraction"),
    "grad_dim": ("gradcheck", "dim"),
    "score_cache": ("paths", "score_cache"),
}

SEEDED_SECTIONS = ("training", "fixture", "gradcheck")


def _remote_spec(value: str, local_kind: str, flag: str) -> dict:
    """`local` or `remote:URL` into {kind, endpoint}."""
    if value == local_kind:
        return {"kind": local_kind, "endpoint": None}
    if value.startswith("remote:") and len(value) > len("remote:"):
        return {"kind": "remote", "endpoint": value[len("remote:"):]}
    raise ConfigError(f"{flag} must be '{local_kind}' or 'remote:URL', got {value!r}")


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """YAML defaults (or --config), then flag overrides, validated as one RunConfig."""
    base = CONSTS
    if args.config is not None:
        if not Path(args.config).exists():
            raise ConfigError(f"Config file not found: {args.config}")
        base = load_constants(args.config)
        if base is None:
            raise ConfigError(f"Config file {args.config} failed validation")
    data = base.model_dump(exclude={"job"})
    for dest, (section, field) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            data[section][field] = value
    seed = getattr(args, "seed", None)
    if seed is not None:
        data["seed"] = seed
        for section in SEEDED_SECTIONS:
            data[section]["seed"] = seed
    if getattr(args, "scorer", None) is not None:
        data["lm"].update(_remote_spec(args.scorer, "mock", "--scorer"))
    if getattr(args, "embedder", None) is not None:
        data["embedder"].update(_remote_spec(args.embedder, "deterministic-hash", "--embedder"))
    if getattr(args, "systems", None) is not None:
        data["evaluation"]["systems"] = [s.strip() for s in args.systems.split(",") if s.strip()]
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}")


def _require(args: argparse.Namespace, *names: str) -> None:
    for name in names:
        value = getattr(args, name, None)
        flag = "--" + name.replace("_", "-")
        if value is None:
            raise ConfigError(f"Missing required flag {flag}")
        if not Path(value).exists():
            raise ConfigError(f"{flag} path does not exist: {value}")


def _step(number: int, title: str) -> None:
    logger.info("=" * 50)
    logger.info(f"STEP {number}: {title}")
    logger.info("=" * 50)


def _load_inputs(args: argparse.Namespace, run: RunConfig, dataset_flag: str = "dataset"):
    """Corpus plus dataset with sub-corpus ids: from --subcorpus, the dataset file, or BM25."""
    corpus = ingest_corpus(args.corpus)
    dataset = ingest_dataset(getattr(args, dataset_flag), corpus)
    if getattr(args, "subcorpus", None) is not None:
        dataset = attach_subcorpus_cache(dataset, args.subcorpus, corpus)
    elif any(not example.subcorpus_ids for example in dataset):
        index = build_index(corpus, run.corpus.k1, run.corpus.b)
        dataset = preretrieve_dataset(index, dataset, run.corpus.subcorpus_limit)
    if run.retrieval.subcorpus_limit < run.corpus.subcorpus_limit:
        dataset = [
            e.model_copy(update={"subcorpus_ids": e.subcorpus_ids[:run.retrieval.subcorpus_limit]})
            for e in dataset
        ]
    return corpus, dataset


def _provider(run: RunConfig) -> EmbeddingProvider:
    return build_provider(run.embedder, attempts=run.lm.attempts, backoff_seconds=run.lm.backoff_seconds)


def _initial_head(path: str | None, run: RunConfig) -> ProjectionHead:
    if path is None:
        return ProjectionHead.identity(run.embedder.dim)
    return load_head(path)


def cmd_ingest(args: argparse.Namespace) -> int:
    _require(args, "corpus", "dataset")
    run = build_run_config(args)
    _step(1, "INGEST CORPUS AND DATASET")
    corpus = ingest_corpus(args.corpus)
    dataset = ingest_dataset(args.dataset, corpus)
    _step(2, "BM25 PRE-RETRIEVAL")
    index = build_index(corpus, run.corpus.k1, run.corpus.b)
    dataset = preretrieve_dataset(index, dataset, run.corpus.subcorpus_limit)
    out = args.out or Path(run.paths.output_dir) / "subcorpus.jsonl"
    write_subcorpus_cache(dataset, out)
    logger.info("Ingest process completed.")
    return 0


def cmd_fixture(args: argparse.Namespace) -> int:
    run = build_run_config(args)
    _step(1, "GENERATE FIXTURE")
    bundle = generate(run.fixture, run.embedder, run.corpus)
    out_dir = args.out_dir or Path(run.paths.output_dir) / "fixture"
    write_fixture(bundle, out_dir)
    logger.info("Fixture process completed.", extra={"fields": {
        "out_dir": str(out_dir), "verified_fraction": bundle.truth.verified_fraction}})
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    _require(args, "corpus", "questions")
    run = build_run_config(args)
    _step(1, "LOAD INPUTS")
    corpus, dataset = _load_inputs(args, run, dataset_flag="questions")
    _step(2, "RETRIEVE COMBINATIONS")
    encoder = DualEncoder(_provider(run), _initial_head(args.head, run))
    results = retrieve_dataset(dataset, corpus, encoder, run.retrieval)
    out = args.output or Path(run.paths.output_dir) / "retrievals.jsonl"
    write_retrievals(results, out)
    logger.info("Retrieve process completed.")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    _require(args, "corpus", "dataset")
    run = build_run_config(args)
    _step(1, "LOAD INPUTS")
    corpus, dataset = _load_inputs(args, run)
    provider = _provider(run)
    head = _initial_head(args.init_head, run)
    encoder = DualEncoder(provider, head)
    scorer = build_scorer(run.lm)
    cache = ScoreCache.load(run.paths.score_cache)

    _step(2, "BUILD TRAINING SET")
    try:
        examples, filtered = build_training_set(
            dataset, corpus, encoder, scorer, cache, run.retrieval, run.training, run.lm.workers)
    finally:
        cache.save()
    if not examples:
        raise ConfigError("Positive filtering left no training examples.")

    _step(3, f"TRAIN WITH {run.training.loss.upper()} LOSS")
    sampler = NegativeSampler(encoder, corpus, scorer, cache) if run.training.in_batch_negatives else None
    try:
        result = train_loop(examples, run.training, head, sampler)
    finally:
        cache.save()

    _step(4, "SAVE OUTPUTS")
    out_head = args.out_head or Path(run.paths.output_dir) / "head.json"
    curve_path = args.curve or Path(out_head).with_name("loss_curve.csv")
    save_head(result.head, out_head)
    write_loss_curve(result.curve, curve_path)
    logger.info("Train process completed.", extra={"fields": {
        "retained": filtered.retained, "dropped": filtered.dropped, "scorer_calls": scorer.calls}})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    _require(args, "corpus", "dataset")
    run = build_run_config(args)
    if any(s.endswith("_rerank") for s in run.evaluation.systems) and args.head_trained is None:
        raise ConfigError("*_rerank systems need --head-trained")
    _step(1, "LOAD INPUTS")
    corpus, dataset = _load_inputs(args, run)
    heads = {"identity": _initial_head(args.head_identity, run)}
    if args.head_trained is not None:
        heads["trained"] = load_head(args.head_trained)
    truth = read_truth(args.truth).gold if args.truth is not None else None
    scorer = build_scorer(run.lm)
    cache = ScoreCache.load(run.paths.score_cache)

    _step(2, "COMPARE SYSTEMS")
    try:
        report = compare_systems(
            dataset, corpus, heads, scorer, _provider(run), cache,
            run.evaluation.systems, run.retrieval, run.evaluation.k_out, truth)
    finally:
        cache.save()
    out = Path(args.out or Path(run.paths.output_dir) / "report.json")
    write_report_json(report, out)
    write_report_markdown(report, out.with_suffix(".md"))
    logger.info("Eval process completed.")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    run = build_run_config(args)
    _step(1, "GRADIENT CHECK")
    losses = tuple(args.gradcheck_losses) if args.gradcheck_losses else ("rag", "kl", "ce")
    reports = run_gradcheck(run.gradcheck, losses, corruption=args.corrupt)
    failed = [r for r in reports if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_diff)
        logger.error("Gradient check failed.", extra={"fields": worst.summary()})
        return 1
    logger.info("Gradient check passed for every loss.")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adapcr", description="Adaptive passage-combination retrieval and retriever training.")
    parser.add_argument("--config", default=None, help="YAML parameter file (defaults to config/params.yaml)")
    sub = parser.add_subparsers(dest="command", required=True)

    # ingest
    sp = sub.add_parser("ingest", help="Build the BM25 index and write the sub-corpus cache")
    sp.add_argument("--corpus", help="Corpus JSONL {id, text}")
    sp.add_argument("--dataset", help="Dataset JSONL {question, answers}")
    sp.add_argument("--limit", type=int, help="Sub-corpus size per question (<= 100)")
    sp.add_argument("--out", help="Sub-corpus cache JSONL")
    sp.set_defaults(func=cmd_ingest)

    # fixture
    sp = sub.add_parser("fixture", help="Generate a seeded synthetic corpus and dataset")
    sp.add_argument("--kind", choices=["single_hop", "redundant", "two_hop"])
    sp.add_argument("--n", type=int, help="Number of questions")
    sp.add_argument("--corpus-size", type=int)
    sp.add_argument("--vocab-size", type=int)
    sp.add_argument("--unanswerable-fraction", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_fixture)

    # retrieve
    sp = sub.add_parser("retrieve", help="Select the best single or pair per question")
    sp.add_argument("--corpus")
    sp.add_argument("--questions", help="Dataset JSONL")
    sp.add_argument("--subcorpus", help="Sub-corpus cache JSONL written by ingest")
    sp.add_argument("--k", type=int)
    sp.add_argument("--keep-self-pairs", dest="dedupe_self_pairs", action="store_const", const=False)
    sp.add_argument("--head", help="Head checkpoint; identity when omitted")
    sp.add_argument("--embedder", help="deterministic-hash or remote:URL")
    sp.add_argument("--dim", type=int)
    sp.add_argument("--output", help="Retrieval JSONL")
    sp.set_defaults(func=cmd_retrieve)

    # train
    sp = sub.add_parser("train", help="Train the projection head on LM feedback")
    sp.add_argument("--dataset")
    sp.add_argument("--corpus")
    sp.add_argument("--subcorpus")
    sp.add_argument("--loss", choices=["rag", "kl", "ce"])
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--top-k-marginal", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--balance-stages", action="store_const", const=True)
    sp.add_argument("--no-negatives", dest="in_batch_negatives", action="store_const", const=False)
    sp.add_argument("--no-positive-filter", dest="positive_filter", action="store_const", const=False)
    sp.add_argument("--scorer", help="mock or remote:URL")
    sp.add_argument("--embedder", help="deterministic-hash or remote:URL")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--score-cache")
    sp.add_argument("--init-head")
    sp.add_argument("--out-head")
    sp.add_argument("--curve", help="Loss curve CSV (epoch, loss, retained_examples)")
    sp.set_defaults(func=cmd_train)

    # eval
    sp = sub.add_parser("eval", help="Compare retrieval systems with EM/F1 and answer likelihood")
    sp.add_argument("--dataset")
    sp.add_argument("--corpus")
    sp.add_argument("--subcorpus")
    sp.add_argument("--systems", help="Comma list of no_retrieval,icralm,icralm_rerank,adapcr,adapcr_rerank")
    sp.add_argument("--head-trained")
    sp.add_argument("--head-identity")
    sp.add_argument("--truth", help="Fixture truth JSONL; adds gold-hit counts")
    sp.add_argument("--scorer")
    sp.add_argument("--embedder")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--score-cache")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="report.json; report.md is written next to it")
    sp.set_defaults(func=cmd_eval)

    # gradcheck
    sp = sub.add_parser("gradcheck", help="Finite-difference check of the analytic gradients")
    sp.add_argument("--loss", dest="gradcheck_losses", action="append", choices=["rag", "kl", "ce"])
    sp.add_argument("--dim", dest="grad_dim", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    return parser


def parse_and_dispatch(argv: Sequence[str] | None = None) -> int:
    """
    Parse argv, run the subcommand and map failures to exit codes.

    Returns:
    --------
    int
        0 on success, 2 on usage errors, 3 on configuration errors, 1 otherwise.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return args.func(args)
    except AdaPCRError as e:
        logger.error(f"{args.command.capitalize()} process terminated.", extra={"fields": {
            "category": e.category, "error": str(e)}})
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command.capitalize()} process terminated.", extra={"fields": {
            "category": "runtime_error", "error": str(e)}})
        return 1
