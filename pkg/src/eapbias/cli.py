"""Command-line front end: ``eapbias <subcommand> [flags]``.

Exit codes: 0 on success, 1 on a usage error, 2 when an input file is
missing or malformed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np

from . import analysis, attribution, debias
from .bundle import load_bundle, save_weights
from .config import ModelConfig
from .corpus import Vocabulary, data_path, generate_pairs, load_entities, load_templates, read_pairs, write_pairs
from .graph import (CircuitGraph, build_graph, expected_counts, export_circuit, load_circuit, ranked_indices,
                    read_scores_csv, write_scores_csv)
from .metrics import BiasMetricSpec, load_lexicon
from .model import fine_tune, init_random
from .toy import bias_corpus

logger = logging.getLogger("eapbias")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_threads(parser: argparse.ArgumentParser) -> int:
    env = os.environ.get("EAP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            parser.error(f"EAP_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads over dataset items (default: $EAP_THREADS or CPU count)")
    common.add_argument("--out-dir", default=".")
    common.add_argument("-v", "--verbose", action="store_true")

    metric = _Parser(add_help=False)
    metric.add_argument("--metric", choices=["l1", "l2"], default="l2")
    metric.add_argument("--k", type=int, default=10, help="top-k predictions the bias metric looks at")
    metric.add_argument("--corruption", choices=["c1", "c2"], default="c2")
    metric.add_argument("--lexicon", choices=["sentiment", "gender"], default="sentiment")
    metric.add_argument("--lexicon-dir", default=None)

    model_io = _Parser(add_help=False)
    model_io.add_argument("--model", required=True, help="weight bundle (.eapw)")
    model_io.add_argument("--pairs", required=True, help="pair file (JSONL)")

    parser = _Parser(prog="eapbias", description="Edge attribution patching for bias circuits.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("graph-info", parents=[common], help="node and edge counts")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--model", help="read the shape from a weight bundle instead")

    p = sub.add_parser("gen-pairs", parents=[common, metric], help="clean/corrupted pairs from a template")
    p.add_argument("--template", default="DSS1")
    p.add_argument("--templates", default=None, help="template JSON (default: shipped)")
    p.add_argument("--entities", default=None, help="one entity per line (default: shipped list)")
    p.add_argument("--vocab", default=None, help="vocabulary file (default: shipped)")
    p.add_argument("--output", default="pairs.jsonl")

    p = sub.add_parser("init-model", parents=[common], help="seeded random weights")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--heads", type=int, required=True)
    p.add_argument("--d-head", type=int, default=8)
    p.add_argument("--d-mlp", type=int, default=None, help="default: 4 * d_model")
    p.add_argument("--max-seq-len", type=int, default=32)
    p.add_argument("--vocab", default=None)
    p.add_argument("--output", default="model.eapw")

    p = sub.add_parser("finetune", parents=[common], help="Adam fine-tuning on a text corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", default=None,
                   help="one sentence per line (default: the built-in positive-bias DSS1 corpus)")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--output", default="finetuned.eapw")

    p = sub.add_parser("attribute", parents=[common, metric, model_io], help="EAP scores for every edge")
    p.add_argument("--top", type=int, default=None, help="mark only the top N edges as in the circuit")
    p.add_argument("--dot", action="store_true", help="also write circuit.dot")

    p = sub.add_parser("oracle", parents=[common, metric, model_io], help="exact single-edge patch sweep")
    p.add_argument("--scores", default=None, help="EAP score dump to compare against")

    p = sub.add_parser("evaluate", parents=[common, metric, model_io], help="baseline and circuit metric")
    p.add_argument("--circuit", default=None, help="circuit JSON; edges outside it are corrupted")

    p = sub.add_parser("localize", parents=[common, metric, model_io], help="layer histogram and ablation curve")
    p.add_argument("--scores", required=True)
    p.add_argument("--fraction", type=float, default=0.05, help="top fraction of edges for the histogram")
    p.add_argument("--threshold", type=float, default=0.20)
    p.add_argument("--fractions", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1",
                   help="comma-separated ablation fractions")

    p = sub.add_parser("overlap", parents=[common], help="top-k edge overlap between score dumps")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", default=None)

    p = sub.add_parser("debias", parents=[common, metric, model_io], help="corrupt the top-N bias edges")
    p.add_argument("--scores", required=True)
    p.add_argument("--n", type=int, default=None, help="edges to patch (default: 1%% of the graph)")
    p.add_argument("--candidates", default=None, help="file of edge names to restrict the bias edges to")
    for sp in sub.choices.values():
        sp.set_defaults(parser=sp)
    return parser


# --- helpers ------------------------------------------------------------------


def _out(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _vocab(path: str | None, bundle_vocab: list[str] | None = None) -> Vocabulary:
    if path:
        return Vocabulary.from_file(path)
    if bundle_vocab is not None:
        return Vocabulary(bundle_vocab)
    return Vocabulary.from_file()


def _load_inputs(args):
    weights, bundle_vocab = load_bundle(args.model)
    vocab = _vocab(None, bundle_vocab)
    pairs = read_pairs(args.pairs)
    if not pairs:
        raise ValueError(f"{args.pairs}: no pairs")
    for pair in pairs:
        if max(pair.clean + pair.corrupt) >= weights.config.vocab_size:
            raise ValueError(f"{args.pairs}: token ids exceed the model vocabulary")
        if len(pair.clean) > weights.config.max_seq_len:
            raise ValueError(f"{args.pairs}: pair longer than max_seq_len={weights.config.max_seq_len}")
    lexicon, _ = load_lexicon(vocab, args.lexicon, args.lexicon_dir)
    lexicon.check_vocab(weights.config.vocab_size)
    spec = BiasMetricSpec(args.metric, lexicon, args.k)
    return weights, pairs, spec


def _scored_graph(config: ModelConfig, path: str) -> CircuitGraph:
    rows = read_scores_csv(path)
    graph = build_graph(config)
    if len(rows) != len(graph):
        raise ValueError(f"{path}: {len(rows)} scores for a graph with {len(graph)} edges")
    idx = np.array([graph.index(name) for name, _ in rows], dtype=np.int64)
    if len(set(idx.tolist())) != len(idx):
        raise ValueError(f"{path}: duplicate edge names")
    scores = np.empty(len(graph))
    scores[idx] = [s for _, s in rows]
    graph.set_scores(scores)
    return graph


# --- subcommands --------------------------------------------------------------


def cmd_graph_info(args) -> int:
    if args.model:
        config = load_bundle(args.model)[0].config
        layers, heads = config.n_layers, config.n_heads
    elif args.layers is None or args.heads is None:
        args.parser.error("graph-info needs --layers and --heads, or --model")
    else:
        layers, heads = args.layers, args.heads
        if layers < 1 or heads < 1:
            args.parser.error("--layers and --heads must be positive")
    nodes, edges = expected_counts(layers, heads)
    print(f"nodes={nodes} edges={edges}")
    return 0


def cmd_gen_pairs(args) -> int:
    templates = load_templates(args.templates)
    if args.template not in templates:
        raise ValueError(f"unknown template {args.template!r}; known: {', '.join(sorted(templates))}")
    entities_path = args.entities or data_path(
        "professions.txt" if args.template.startswith("G") else "nationalities.txt")
    vocab = _vocab(args.vocab)
    pairs, dropped = generate_pairs(templates[args.template], load_entities(entities_path),
                                    args.corruption, vocab)
    path = _out(args, args.output)
    write_pairs(pairs, path)
    print(f"pairs={len(pairs)} dropped={len(dropped)}")
    for entity in dropped:
        print(f"  dropped (length mismatch): {entity}")
    return 0


def cmd_init_model(args) -> int:
    vocab = _vocab(args.vocab)
    d_model = args.heads * args.d_head
    config = ModelConfig(n_layers=args.layers, n_heads=args.heads, d_model=d_model, d_head=args.d_head,
                         d_mlp=args.d_mlp or 4 * d_model, vocab_size=len(vocab), max_seq_len=args.max_seq_len)
    path = _out(args, args.output)
    save_weights(init_random(config, args.seed), path, vocab.tokens)
    print(f"wrote {path} ({config.n_layers} layers, {config.n_heads} heads, vocab {config.vocab_size})")
    return 0


def cmd_finetune(args) -> int:
    weights, bundle_vocab = load_bundle(args.model)
    vocab = _vocab(None, bundle_vocab)
    if args.corpus:
        with open(args.corpus, encoding="utf-8") as fh:
            corpus = [vocab.encode(line) for line in fh if line.strip()]
    else:
        corpus = bias_corpus(vocab)
    corpus = [seq[:weights.config.max_seq_len] for seq in corpus]
    if max(max(seq) for seq in corpus if seq) >= weights.config.vocab_size:
        raise ValueError("corpus token ids exceed the model vocabulary")
    tuned = fine_tune(weights, corpus, args.steps, args.lr, args.seed, batch_size=args.batch_size)
    path = _out(args, args.output)
    save_weights(tuned, path, vocab.tokens)
    print(f"wrote {path} ({args.steps} steps on {len(corpus)} sequences)")
    return 0


def cmd_attribute(args) -> int:
    weights, pairs, spec = _load_inputs(args)
    graph = attribution.eap_scores(weights, pairs, spec, workers=args.threads).graph
    if args.top is not None:
        graph.in_graph[:] = False
        graph.in_graph[ranked_indices(graph)[:args.top]] = True
    write_scores_csv(graph, _out(args, "scores.csv"))
    export_circuit(graph, "json", _out(args, "circuit.json"))
    if args.dot:
        export_circuit(graph, "dot", _out(args, "circuit.dot"))
    top = ranked_indices(graph)[:5]
    print(f"scored {len(graph)} edges over {len(pairs)} pairs; top edges:")
    for i in top:
        print(f"  {graph.edge_names[i]}  {graph.scores[i]:+.6g}")
    return 0


def cmd_oracle(args) -> int:
    weights, pairs, spec = _load_inputs(args)
    graph = build_graph(weights.config)
    exact = attribution.exact_patch_scores(weights, pairs, spec, graph, workers=args.threads)
    eap = None
    if args.scores:
        eap = _scored_graph(weights.config, args.scores).scores
    with open(_out(args, "oracle.csv"), "w", encoding="utf-8") as fh:
        fh.write("edge_name,exact_delta" + (",eap_score" if eap is not None else "") + "\n")
        for i, name in enumerate(graph.edge_names):
            row = f"{name},{float(exact[i])!r}"
            if eap is not None:
                row += f",{float(eap[i])!r}"
            fh.write(row + "\n")
    print(f"exact patch sweep over {len(graph)} edges")
    if eap is not None:
        if np.std(exact) > 0 and np.std(eap) > 0:
            print(f"pearson={np.corrcoef(exact, eap)[0, 1]:.6f}")
        top_eap = int(np.argmax(np.abs(eap)))
        top_exact = int(np.argmax(np.abs(exact)))
        print(f"top edge (eap)={graph.edge_names[top_eap]} (exact)={graph.edge_names[top_exact]}")
    return 0


def cmd_evaluate(args) -> int:
    weights, pairs, spec = _load_inputs(args)
    report = {
        "baseline": attribution.evaluate_baseline(weights, pairs, spec, workers=args.threads),
        "corrupt": attribution.evaluate_corrupt(weights, pairs, spec, workers=args.threads),
    }
    if args.circuit:
        circuit = load_circuit(args.circuit)
        if circuit.config != weights.config:
            raise ValueError(f"{args.circuit}: circuit config does not match the model")
        value = attribution.evaluate_graph(weights, pairs, spec, circuit, workers=args.threads)
        report["circuit"] = value
        report["circuit_edges"] = int(circuit.in_graph.sum())
        report["metric_change"] = attribution.metric_change(report["baseline"], value)
    _write_json(_out(args, "evaluate.json"), report)
    for key in sorted(report):
        print(f"{key}={report[key]}")
    return 0


def cmd_localize(args) -> int:
    weights, pairs, spec = _load_inputs(args)
    graph = _scored_graph(weights.config, args.scores)
    try:
        fractions = [float(f) for f in args.fractions.split(",")]
    except ValueError:
        args.parser.error(f"--fractions must be comma-separated numbers, got {args.fractions!r}")
    hist = analysis.layer_histogram(graph, args.fraction, args.threshold)
    hist.write_csv(_out(args, "histogram.csv"))
    curve = analysis.ablation_curve(weights, pairs, spec, graph, fractions, workers=args.threads)
    analysis.write_curve_csv(curve, _out(args, "curve.csv"))
    for layer, count, share, flag in hist.rows():
        name = "logits" if layer == weights.config.n_layers else f"layer {layer}"
        print(f"{name:>8}: {count:5d} ({share:.1%}){'  *' if flag else ''}")
    for f, v in curve:
        print(f"ablate {f:.2f}: {v:.6f}")
    return 0


def cmd_overlap(args) -> int:
    if args.k < 1:
        args.parser.error("--k must be >= 1")
    if len(args.inputs) < 2:
        args.parser.error("overlap needs at least two --inputs")
    labels = args.labels or [os.path.splitext(p)[0] for p in args.inputs]
    if len(labels) != len(args.inputs):
        args.parser.error("--labels must match --inputs one to one")
    named = [(label, [name for name, _ in read_scores_csv(path)]) for label, path in zip(labels, args.inputs)]
    matrix = analysis.overlap_matrix(named, args.k)
    matrix.write_csv(_out(args, "overlap.csv"))
    width = max(len(label) for label in labels)
    for label, row in zip(labels, matrix.values):
        print(f"{label:>{width}}  " + " ".join(f"{v:.3f}" for v in row))
    return 0


def cmd_debias(args) -> int:
    weights, pairs, spec = _load_inputs(args)
    graph = _scored_graph(weights.config, args.scores)
    candidates = None
    if args.candidates:
        with open(args.candidates, encoding="utf-8") as fh:
            candidates = [line.strip() for line in fh if line.strip()]
    n = debias.default_n(len(graph)) if args.n is None else args.n
    report = debias.delta_bias(weights, pairs, spec, graph, n, candidates, workers=args.threads)
    report.write_json(_out(args, "debias.json"))
    delta = "n/a" if report.delta_percent is None else f"{report.delta_percent:+.2f}%"
    print(f"patched {n} edges: bias {report.bias_clean:.6f} -> {report.bias_patched:.6f} ({delta})")
    return 0


COMMANDS = {
    "graph-info": cmd_graph_info,
    "gen-pairs": cmd_gen_pairs,
    "init-model": cmd_init_model,
    "finetune": cmd_finetune,
    "attribute": cmd_attribute,
    "oracle": cmd_oracle,
    "evaluate": cmd_evaluate,
    "localize": cmd_localize,
    "overlap": cmd_overlap,
    "debias": cmd_debias,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads is None:
            args.threads = _default_threads(args.parser)
        elif args.threads < 1:
            args.parser.error("--threads must be >= 1")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"eapbias: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
