"""Command-line entry point: ``popattn <subcommand> [flags] [--section.key=value ...]``.

Every subcommand reads its inputs from the configured paths or from
artifacts of earlier subcommands in the output directory, and writes only
under that directory. Exit status: 0 success, 1 validation error, 2 runtime
failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, lda, synthetic
from .dataset import Post, SplitManifest, Vocabulary, label_corpus, read_posts, write_features, write_posts
from .environment import read_environments, write_environments
from .errors import CompatibilityError, FormatError, InvalidInputError, PopattnError
from .formats import dumps_json
from .model import ABLATION_VARIANTS, VARIANTS, DualAttentionModel, ModelConfig, load_model, save_model
from .pipeline import Prepared, caption_topics, derived_seed, environments, fit_topics, prepare
from .train import TrainConfig, evaluate, train

log = logging.getLogger("popattn")

SUBCOMMANDS = ("prepare", "lda", "env", "train", "eval", "ablate", "cluster", "textstats", "attn", "heatmap")

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "popattn-out",
    "paths": {"posts": None, "features": None, "spatial": None, "stoplist": None},
    "data": {"min_freq": 1, "t_max": 50, "synthetic_users": 10, "synthetic_posts_per_user": 20,
             "synthetic_d1": 16},
    "model": {"variant": "dual", "d2": 512, "k": 128, "d_env": 512, "d_fuse": 512},
    "train": {"batch_size": 128, "epochs": 20, "lr_initial": 1e-3, "lr_after": 1e-4, "lr_switch_epoch": 2,
              "patience": 5, "clip_norm": None},
    "lda": {"topics": 400, "alpha": None, "beta": 0.01, "sweeps": 200, "burn_in": 20, "infer_sweeps": 50,
            "infer_burn_in": 20},
    "analysis": {"K": 12, "t": 0.1, "n_init": 20, "split": "test"},
}


class UsageError(PopattnError):
    """Bad subcommand, flag, or override."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _assign(node: dict, key: str, value, dotted: str) -> None:
    if key not in node or isinstance(node[key], dict):
        raise UsageError(f"unknown config key {dotted!r}")
    old = node[key]
    if old is not None and value is not None:
        numeric = isinstance(old, (int, float)) and isinstance(value, (int, float)) and not isinstance(value, bool)
        if not (isinstance(value, type(old)) or (numeric and not isinstance(old, bool))):
            raise UsageError(f"{dotted} expects {type(old).__name__}, got {value!r}")
        if isinstance(old, int) and not isinstance(old, bool) and isinstance(value, float):
            raise UsageError(f"{dotted} expects an integer, got {value!r}")
    node[key] = value


def _set(config: dict, dotted: str, value) -> None:
    *sections, key = dotted.split(".")
    node = config
    for s in sections:
        if not isinstance(node.get(s), dict):
            raise UsageError(f"unknown config section {s!r} in {dotted!r}")
        node = node[s]
    _assign(node, key, value, dotted)


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        dotted = prefix + key
        if isinstance(value, dict):
            if not isinstance(base.get(key), dict):
                raise UsageError(f"unknown config section {dotted!r}")
            _merge(base[key], value, dotted + ".")
        else:
            _assign(base, key, value, dotted)


def build_config(args: argparse.Namespace, overrides: list[str]) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise InvalidInputError(f"config file not found: {path}")
        try:
            _merge(config, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from None
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"unrecognized argument {item!r}; overrides look like --section.key=value")
        key, _, raw = item[2:].partition("=")
        _set(config, key, _parse_scalar(raw))
    for flag, key in (("seed", "seed"), ("out", "out"), ("variant", "model.variant"), ("topics", "lda.topics"),
                      ("threshold", "analysis.t")):
        value = getattr(args, flag)
        if value is not None:
            _set(config, key, value)
    if config["model"]["variant"] not in VARIANTS:
        raise InvalidInputError(f"unknown variant {config['model']['variant']!r}")
    return config


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------

@dataclass
class Run:
    config: dict
    out: Path

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def input_path(self, key: str, default: str | None) -> Path | None:
        value = self.config["paths"][key]
        if value is not None:
            return Path(value)
        return self.path("data", default) if default else None

    def require(self, path: Path, hint: str = "") -> Path:
        if not path.is_file():
            raise InvalidInputError(f"missing input file: {path}{' (' + hint + ')' if hint else ''}")
        return path

    # -- loaders ------------------------------------------------------------

    def posts(self) -> list[Post]:
        posts_path = self.require(self.input_path("posts", "posts.jsonl"), "set paths.posts or run prepare --synthetic")
        feats_path = self.require(self.input_path("features", "features.bin"), "set paths.features")
        spatial = self.input_path("spatial", "spatial.bin")
        if self.config["paths"]["spatial"] is not None:
            self.require(spatial)
        elif not spatial.is_file():
            spatial = None
        return read_posts(posts_path, feats_path, spatial)

    def prepared(self) -> Prepared:
        vocab = Vocabulary.from_json(self.require(self.path("vocab.json"), "run prepare first").read_text("utf-8"))
        meta = json.loads(self.require(self.path("meta.json")).read_text("utf-8"))
        manifest = SplitManifest.read(self.require(self.path("splits.jsonl")), seed=meta["seed"])
        examples = label_corpus(self.posts(), vocab, self.config["data"]["t_max"])
        if {e.key for e in examples} != set(manifest.assignment):
            raise CompatibilityError("splits.jsonl does not match the labeled posts; rerun prepare")
        return Prepared(examples, manifest, vocab)

    def lda_config(self) -> lda.LdaConfig:
        return lda.LdaConfig(**self.config["lda"], seed=derived_seed(self.seed, "lda"))

    def lda_model(self) -> lda.LdaModel:
        return lda.LdaModel.load(self.require(self.path("lda.bin"), "run lda first"))

    def environments(self):
        return read_environments(self.require(self.path("environments.jsonl"), "run env first"),
                                 self.require(self.path("environments.bin")))

    def model_config(self, variant: str, d1: int, vocab_size: int, topics: int) -> ModelConfig:
        dims = {k: v for k, v in self.config["model"].items() if k != "variant"}
        return ModelConfig.for_variant(variant, d1=d1, vocab_size=vocab_size, topics=topics,
                                       t_max=self.config["data"]["t_max"], **dims)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config["train"], seed=derived_seed(self.seed, "train"))

    def model_dir(self, variant: str) -> Path:
        return self.path("models", variant)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


def _topics_lines(topics: dict) -> str:
    return "".join(dumps_json({"user_id": u, "post_id": p, "topics": [float(x) for x in dist]}) + "\n"
                   for (u, p), dist in topics.items())


def _read_topics(path: Path) -> dict:
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            out[(obj["user_id"], obj["post_id"])] = np.asarray(obj["topics"], dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_prepare(run: Run, args) -> None:
    if args.synthetic:
        data = run.config["data"]
        posts = synthetic.planted_signal_corpus(data["synthetic_users"], data["synthetic_posts_per_user"],
                                                data["synthetic_d1"], seed=run.seed, spatial=True)
        run.path("data").mkdir(parents=True, exist_ok=True)
        write_posts(run.path("data", "posts.jsonl"), posts)
        write_features(run.path("data", "features.bin"), np.stack([p.image_features for p in posts]))
        write_features(run.path("data", "spatial.bin"), np.stack([p.spatial_features for p in posts]))
        log.info("wrote synthetic corpus of %d posts to %s", len(posts), run.path("data"))
    posts = run.posts()
    prep = prepare(posts, run.seed, run.config["data"]["min_freq"], run.config["data"]["t_max"])
    prep.manifest.write(run.path("splits.jsonl"))
    _write(run.path("vocab.json"), prep.vocab.to_json() + "\n")
    counts = {name: len(prep.subset(name)) for name in ("train", "val", "test")}
    _write(run.path("meta.json"), dumps_json({"seed": prep.manifest.seed, "global_seed": run.seed,
                                              "posts": len(posts), "labeled": len(prep.examples),
                                              "splits": counts, "vocab_size": len(prep.vocab),
                                              "vocab_hash": prep.vocab.digest()}) + "\n")


def cmd_lda(run: Run, args) -> None:
    prep = run.prepared()
    model = fit_topics(prep, run.lda_config())
    model.save(run.path("lda.bin"))
    topics = caption_topics(prep, model, run.seed, sweeps=run.config["lda"]["infer_sweeps"])
    _write(run.path("topics.jsonl"), _topics_lines(topics))


def cmd_env(run: Run, args) -> None:
    prep = run.prepared()
    topics = _read_topics(run.require(run.path("topics.jsonl"), "run lda first"))
    write_environments(run.path("environments.jsonl"), run.path("environments.bin"), environments(prep, topics))


def _train_variant(run: Run, prep: Prepared, variant: str):
    lda_model = run.lda_model() if run.path("lda.bin").is_file() else None
    topics = lda_model.n_topics if lda_model is not None else run.config["lda"]["topics"]
    d1 = int(np.asarray(prep.examples[0].image_features).size)
    cfg = run.model_config(variant, d1, len(prep.vocab), topics)
    envs = run.environments() if cfg.needs_environment else None
    model = DualAttentionModel(cfg, seed=derived_seed(run.seed, "model"))
    result = train(model, prep.subset("train"), prep.subset("val"), envs, run.train_config())
    out = run.model_dir(variant)
    out.mkdir(parents=True, exist_ok=True)
    lda_hash = lda_model.digest() if cfg.needs_environment else ""
    save_model(out / "checkpoint.bin", out / "manifest.json", model, prep.vocab.digest(), lda_hash)
    _write(out / "metrics.csv", result.metrics_csv())
    return model, envs


def _load_variant(run: Run, prep: Prepared, variant: str):
    out = run.model_dir(variant)
    manifest = json.loads(run.require(out / "manifest.json", f"run train --variant {variant} first").read_text("utf-8"))
    lda_hash = run.lda_model().digest() if manifest.get("lda_hash") else None
    model = load_model(run.require(out / "checkpoint.bin"), out / "manifest.json", prep.vocab.digest(), lda_hash)
    envs = run.environments() if model.cfg.needs_environment else None
    return model, envs


def cmd_train(run: Run, args) -> None:
    _train_variant(run, run.prepared(), run.config["model"]["variant"])


def cmd_eval(run: Run, args) -> None:
    prep = run.prepared()
    variant = run.config["model"]["variant"]
    model, envs = _load_variant(run, prep, variant)
    metrics = evaluate(model, prep.subset("test"), envs)
    text = dumps_json({"variant": variant, "split": "test", **metrics.as_dict()})
    _write(run.model_dir(variant) / "eval.json", text + "\n")
    print(text)


def cmd_ablate(run: Run, args) -> None:
    prep = run.prepared()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "precision", "recall", "f_measure", "accuracy"])
    for variant in ABLATION_VARIANTS:
        model, envs = _train_variant(run, prep, variant)
        m = evaluate(model, prep.subset("test"), envs)
        w.writerow([variant, f"{m.precision:.4f}", f"{m.recall:.4f}", f"{m.f_measure:.4f}", f"{m.accuracy:.4f}"])
    _write(run.path("ablation.csv"), buf.getvalue())


def cmd_cluster(run: Run, args) -> None:
    prep = run.prepared()
    a = run.config["analysis"]
    report = analysis.pickout_clustering(prep.examples, K=a["K"], t=a["t"], seed=derived_seed(run.seed, "kmeans"),
                                         n_init=a["n_init"])
    _write(run.path("clusters.csv"), report.to_csv())


def cmd_textstats(run: Run, args) -> None:
    prep = run.prepared()
    stop_path = run.config["paths"]["stoplist"]
    extra = analysis.load_stoplist(run.require(Path(stop_path))) if stop_path else set()
    _write(run.path("textstats.csv"), analysis.text_stats(prep.examples, extra).to_csv())


def _analysis_split(run: Run, prep: Prepared):
    name = run.config["analysis"]["split"]
    if name not in ("train", "val", "test"):
        raise InvalidInputError(f"analysis.split must be train, val or test, got {name!r}")
    return prep.subset(name)


def cmd_attn(run: Run, args) -> None:
    prep = run.prepared()
    model, envs = _load_variant(run, prep, run.config["model"]["variant"])
    records = analysis.export_attention(model, _analysis_split(run, prep), envs, prep.vocab)
    run.out.mkdir(parents=True, exist_ok=True)
    analysis.write_jsonl(run.path("attention.jsonl"), records)


def cmd_heatmap(run: Run, args) -> None:
    prep = run.prepared()
    spatial = {p.key: p.spatial_features for p in run.posts()}
    examples = _analysis_split(run, prep)
    missing = [e.key for e in examples if spatial.get(e.key) is None]
    if missing:
        raise InvalidInputError(f"no spatial features for {len(missing)} posts (first: {missing[0]}); set paths.spatial")
    model, envs = _load_variant(run, prep, run.config["model"]["variant"])
    maps = [analysis.popularity_heatmap(model, e, spatial[e.key], envs) for e in examples]
    analysis.write_jsonl(run.path("heatmaps.jsonl"), maps)


COMMANDS = {
    "prepare": cmd_prepare, "lda": cmd_lda, "env": cmd_env, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "cluster": cmd_cluster, "textstats": cmd_textstats, "attn": cmd_attn,
    "heatmap": cmd_heatmap,
}


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="popattn", description=__doc__.splitlines()[0],
                     epilog="Any config scalar can be overridden with --section.key=value.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--variant", choices=sorted(VARIANTS))
    parser.add_argument("--topics", type=int, help="number of LDA topics")
    parser.add_argument("--threshold", type=float, help="pick-out threshold t")
    parser.add_argument("--synthetic", action="store_true", help="prepare: generate the toy corpus first")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        config = build_config(args, rest)
    except UsageError as exc:
        print(f"popattn: {exc}", file=sys.stderr)
        return 1
    except PopattnError as exc:
        print(f"popattn: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(config["out"])
    threads = os.environ.get("POPATTN_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"popattn: error: POPATTN_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return 1
    try:
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=limit):
            COMMANDS[args.subcommand](Run(config, out), args)
    except (InvalidInputError, FormatError, CompatibilityError, UsageError, FileNotFoundError) as exc:
        print(f"popattn: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("traceback", exc_info=True)
        print(f"popattn: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
