"""``egt`` command-line front end.

    egt <init-model|compress|build-trie|bench|decode|eval-recall> --config run.ini [--key value ...]

The configuration file is INI-style; section names only group keys, every
key is unique. Any key can be overridden on the command line, and the
``EGT_SEED`` environment variable overrides the configured seed. Each command
writes its artifacts plus ``<command>.manifest.json`` to ``output_dir``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import bench as bench_mod
from .compress import compress_model, load_compressed, materialize, save_compressed
from .decoding import CostModel, parse_mode
from .errors import ConfigError, DecodeError, EGTError, FormatError, PatternError, ShapeError, TrieError
from .model import ModelConfig, init_random, load_model, random_batch, save_model
from .prune import pattern_name
from .recall import decode_queries, make_queries, recall_report
from .trie import build_from_corpus, debug_dump, load_trie, read_corpus, save_trie, trie_stats

COMMANDS = ("init-model", "compress", "build-trie", "bench", "decode", "eval-recall")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


@dataclass
class RunConfig:
    seed: int = 0
    # paths
    output_dir: str = "egt_out"
    model: str = ""
    compressed: str = ""
    corpus: str = ""
    trie: str = ""
    candidate_model: str = ""
    # model
    vocab_size: int = 64
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 128
    # compression
    rho_q: float = 0.5
    rho_s: float = 0.5
    g_fine: int = 64
    g_coarse: int = 128
    sparsity: str = "adaptive"
    quantize: bool = True
    calib_sequences: int = 8
    calib_length: int = 16
    # trie
    k: int = 10
    c: int = 10
    embed_dim: int = 64
    # decode
    beam_size: int = 20
    mode: str = "ptpv"
    n_queries: int = 16
    prompt_length: int = 4
    t_step: float = 1.0
    alpha: float = 0.002
    beta: float = 1.0
    recall_candidate: str = "compressed"
    # bench
    shapes: str = "256x256,512x512,1024x1024"
    reps: int = 30

    def validate(self) -> None:
        for name in ("rho_q", "rho_s"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if not self.output_dir:
            raise ConfigError("output_dir must be non-empty")
        if self.recall_candidate not in ("compressed", "baseline"):
            raise ConfigError("recall_candidate must be 'compressed' or 'baseline'")
        parse_mode(self.mode)

    def path(self, key: str, default_name: str) -> Path:
        value = getattr(self, key)
        return Path(value) if value else Path(self.output_dir) / default_name

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff,
                           self.max_positions, self.seed)

    def cost_model(self) -> CostModel:
        return CostModel(self.t_step, self.alpha, self.beta)

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(field: dataclasses.Field, raw: str):
    kind = type(field.default)
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{field.name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{field.name}: cannot parse {raw!r} as {kind.__name__}") from exc


def load_config(path=None, overrides=None, environ=None) -> RunConfig:
    """Defaults, then the config file, then ``EGT_SEED``, then command-line overrides."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        base = Path(path).parent
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in fields:
                    raise ConfigError(f"unknown config key {key!r} in [{section}]")
                value = _coerce(fields[key], raw)
                if key in ("model", "compressed", "corpus", "trie", "candidate_model", "output_dir") and value:
                    value = str(base / value)
                values[key] = value
    environ = os.environ if environ is None else environ
    if environ.get("EGT_SEED"):
        values["seed"] = _coerce(fields["seed"], environ["EGT_SEED"])
    for key, raw in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in fields:
            raise ConfigError(f"unknown option --{key}")
        values[key] = _coerce(fields[key], raw)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(cfg: RunConfig, command: str, artifacts: dict[str, Path], volatile=()) -> Path:
    out = Path(cfg.output_dir) / f"{command}.manifest.json"
    doc = {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "artifacts": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in sorted(artifacts.items())},
        "wall_clock_artifacts": sorted(volatile),
    }
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def _corpus_path(cfg: RunConfig):
    if cfg.corpus:
        return Path(cfg.corpus)
    return resources.files("egt") / "data" / "demo_corpus.txt"


def _load_trie_checked(cfg: RunConfig):
    trie = load_trie(cfg.path("trie", "trie.egtt"))
    if trie.tokens.max() >= cfg.vocab_size:
        raise ConfigError("trie tokens exceed the model vocabulary")
    return trie


def cmd_init_model(cfg: RunConfig) -> dict[str, Path]:
    path = cfg.path("model", "model.egtm")
    save_model(init_random(cfg.model_config()), path)
    return {"model": path}


def cmd_compress(cfg: RunConfig) -> dict[str, Path]:
    model = load_model(cfg.path("model", "model.egtm"))
    batch = random_batch(model.config, cfg.calib_sequences, cfg.calib_length, cfg.seed)
    cm = compress_model(model, batch, cfg.rho_q, cfg.rho_s, cfg.g_fine, cfg.g_coarse,
                        sparsity=cfg.sparsity, quantize=cfg.quantize)
    path = cfg.path("compressed", "model.egtq")
    save_compressed(cm, path)
    report = Path(cfg.output_dir) / "compress_layers.csv"
    with open(report, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "pattern", "quantized", "fine_channels", "kept_fraction"])
        for name, layer in cm.layers.items():
            rows, cols = layer.shape
            fine = int((layer.quant.spec.group_sizes == cfg.g_fine).sum()) if layer.quant is not None else 0
            kept = 1.0 if layer.mask is None else float(layer.mask.mean())
            w.writerow([name, pattern_name(layer.pattern), int(layer.quant is not None), fine, f"{kept:.4f}"])
    return {"compressed": path, "layer_report": report}


def cmd_build_trie(cfg: RunConfig) -> dict[str, Path]:
    if cfg.vocab_size < 4 + max(cfg.k, cfg.c):
        raise ConfigError(f"vocab_size {cfg.vocab_size} too small for k={cfg.k}, c={cfg.c}")
    items, ids, trie = build_from_corpus(read_corpus(_corpus_path(cfg)), cfg.k, cfg.c, cfg.seed, cfg.embed_dim)
    path = cfg.path("trie", "trie.egtt")
    save_trie(trie, path)
    dump = Path(cfg.output_dir) / "trie_dump.txt"
    debug_dump(trie, dump, items)
    id_csv = Path(cfg.output_dir) / "semantic_ids.csv"
    with open(id_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "item", "tokens"])
        for i, (item, toks) in enumerate(zip(items, ids)):
            w.writerow([i, item, " ".join(map(str, toks))])
    stats = trie_stats(trie)
    stats_path = Path(cfg.output_dir) / "trie_stats.csv"
    with open(stats_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["depth", "nodes", "mean_branching"])
        for d, count in enumerate(stats.nodes_per_depth):
            b = stats.mean_branching[d] if d < len(stats.mean_branching) else 0.0
            w.writerow([d, count, f"{b:.4f}"])
    return {"trie": path, "dump": dump, "ids": id_csv, "stats": stats_path}


def _parse_shapes(text: str) -> list[tuple[int, int]]:
    try:
        return [tuple(int(v) for v in part.lower().split("x")) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad shapes {text!r}; expected e.g. 256x256,512x512") from exc


def cmd_bench(cfg: RunConfig) -> dict[str, Path]:
    rows = bench_mod.bench_spmv(_parse_shapes(cfg.shapes), cfg.reps, cfg.g_fine, cfg.seed)
    path = Path(cfg.output_dir) / "bench.csv"
    bench_mod.write_bench_csv(rows, path)
    return {"bench": path}


def _write_decode_records(path: Path, queries, results, items=None, trie=None) -> None:
    lines = []
    for qi, (q, res) in enumerate(zip(queries, results)):
        lines.append(f"[query {qi}]")
        lines.append("prompt = " + " ".join(map(str, q)))
        lines.append(f"steps = {res.steps}")
        lines.append(f"forward_passes = {res.forward_passes}")
        lines.append(f"flattened_nodes = {res.flattened_nodes}")
        lines.append("trigger_step = " + ("none" if res.trigger_step is None else str(res.trigger_step)))
        lines.append("sequences:")
        for rank, h in enumerate(res.hypotheses):
            payload = int(trie.payloads[h.leaf])
            item = f" item={items[payload]!r}" if items is not None and payload < len(items) else ""
            lines.append(f"  rank={rank} b_score={h.score:.7f} payload={payload}{item} tokens="
                         + " ".join(map(str, h.tokens)))
        lines.append("")
    path.write_text("\n".join(lines))


def _write_stats_csv(path: Path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "steps", "forward_passes", "flattened_nodes", "trigger_step", "top_b_score"])
        for qi, res in enumerate(results):
            w.writerow([qi, res.steps, res.forward_passes, res.flattened_nodes,
                        "" if res.trigger_step is None else res.trigger_step,
                        f"{res.hypotheses[0].score:.7f}"])


def _items(cfg: RunConfig):
    try:
        return read_corpus(_corpus_path(cfg))
    except OSError:
        return None


def cmd_decode(cfg: RunConfig) -> dict[str, Path]:
    model = load_model(cfg.path("model", "model.egtm"))
    trie = _load_trie_checked(cfg)
    queries = make_queries(model.config, cfg.n_queries, cfg.prompt_length, cfg.seed)
    results = decode_queries(model, trie, queries, cfg.beam_size, cfg.mode, cfg.cost_model())
    out = Path(cfg.output_dir) / "decode.txt"
    _write_decode_records(out, queries, results, _items(cfg), trie)
    stats = Path(cfg.output_dir) / "decode_stats.csv"
    _write_stats_csv(stats, results)
    return {"decode": out, "stats": stats}


def cmd_eval_recall(cfg: RunConfig) -> dict[str, Path]:
    baseline = load_model(cfg.path("model", "model.egtm"))
    trie = _load_trie_checked(cfg)
    if cfg.candidate_model:
        candidate = load_model(cfg.candidate_model)
    elif cfg.recall_candidate == "baseline":
        candidate = baseline
    else:
        candidate = materialize(baseline, load_compressed(cfg.path("compressed", "model.egtq")))
    queries = make_queries(baseline.config, cfg.n_queries, cfg.prompt_length, cfg.seed)
    cost = cfg.cost_model()
    base_res = decode_queries(baseline, trie, queries, cfg.beam_size, cfg.mode, cost)
    cand_res = decode_queries(candidate, trie, queries, cfg.beam_size, cfg.mode, cost)
    report = recall_report(base_res, cand_res, cfg.beam_size)
    out = Path(cfg.output_dir) / "recall.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "overlap", "k", "recall", "baseline_passes", "candidate_passes"])
        for qi, (o, k, r) in enumerate(zip(report.overlaps, report.ks, report.per_query())):
            w.writerow([qi, o, k, f"{r:.6f}", base_res[qi].forward_passes, cand_res[qi].forward_passes])
    summary = Path(cfg.output_dir) / "recall_summary.txt"
    summary.write_text(
        f"queries = {len(queries)}\nbeam_size = {cfg.beam_size}\nmode = {cfg.mode}\n"
        f"recall_at_k = {report.recall:.6f}\n")
    return {"recall": out, "summary": summary}


HANDLERS = {
    "init-model": cmd_init_model,
    "compress": cmd_compress,
    "build-trie": cmd_build_trie,
    "bench": cmd_bench,
    "decode": cmd_decode,
    "eval-recall": cmd_eval_recall,
}


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    it = iter(extra)
    for token in it:
        if not token.startswith("--") or len(token) <= 2:
            raise ConfigError(f"unexpected argument {token!r}")
        if "=" in token:
            key, value = token[2:].split("=", 1)
        else:
            key = token[2:]
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"option {token} needs a value") from None
        out[key] = value
    return out


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="egt", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = load_config(args.config, _parse_overrides(extra))
    except (ConfigError, PatternError) as exc:
        return _fail(EXIT_USAGE, type(exc).__name__, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_USAGE, "FileNotFoundError", f"missing config {exc}")
    try:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        artifacts = HANDLERS[args.command](cfg)
        volatile = ["bench"] if args.command == "bench" else []
        manifest = _manifest(cfg, args.command, artifacts, volatile)
    except (ConfigError, PatternError) as exc:
        return _fail(EXIT_USAGE, type(exc).__name__, str(exc))
    except (FormatError, TrieError, ShapeError, DecodeError, OSError, UnicodeDecodeError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, str(exc))
    except (EGTError, AssertionError, ArithmeticError, ValueError) as exc:
        return _fail(EXIT_INTERNAL, type(exc).__name__, str(exc))
    print(manifest)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
