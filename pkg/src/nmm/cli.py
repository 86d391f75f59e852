"""Command-line entry points: train, predict, eval, approx-ising.

Every command takes ``--seed`` and is byte-deterministic given identical
inputs: all randomness flows from that one seed through counter-based stream
splitting, metric output is fixed at 6 decimals, files are UTF-8 with LF
endings, and model documents are JSON with sorted keys.

Exit codes: 0 success, 2 usage or input-validation failure, 1 runtime
failure (divergence, enumeration budget, fingerprint mismatch).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .graph import (
    Graph,
    UNKNOWN_LABEL,
    load_edge_list,
    load_features,
    load_labels,
    load_split,
)
from .ising import (
    estimate_bound,
    exact_kl_oracle,
    ising_log_unnorm,
    make_ising_grid,
    load_ising_spec,
    mean_field_fit,
    optimize_kl_bound,
    warm_start_theta,
    with_features,
)
from .kernel import EnumerationBudgetError, exact_marginal
from .learning import TrainConfig, TrainingDiverged, train
from .parameterize import BackboneConfig, init_theta, layout_for, params_from_theta
from .predict import greedy_decode, pairwise_ll
from .util import fmt6, max_workers, rng_from_seed
from .variational import elbo_estimate

__all__ = ["main", "ModelDocument", "FingerprintMismatch"]

MODEL_FORMAT_VERSION = 1


class FingerprintMismatch(RuntimeError):
    pass


class ModelDocument:
    """Persisted model: backbone config, flat theta, and the identity of the
    graph it was trained on; loading refuses a mismatched graph."""

    def __init__(self, backbone: BackboneConfig, theta: np.ndarray,
                 num_classes: int, fingerprint: dict, seed: int,
                 train_config: dict | None = None):
        self.backbone = backbone
        self.theta = theta
        self.num_classes = num_classes
        self.fingerprint = fingerprint
        self.seed = seed
        self.train_config = train_config or {}

    def save(self, path) -> None:
        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "backbone": self.backbone.to_dict(),
            "theta": [float(x) for x in self.theta],
            "num_classes": self.num_classes,
            "graph_fingerprint": self.fingerprint,
            "seed": self.seed,
            "train_config": self.train_config,
        }
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @staticmethod
    def load(path, graph: Graph) -> "ModelDocument":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format {doc.get('format_version')!r}")
        fp = doc["graph_fingerprint"]
        actual = graph.fingerprint()
        if fp != actual:
            raise FingerprintMismatch(
                "model fingerprint does not match the supplied graph "
                f"(model: {fp}, graph: {actual})"
            )
        return ModelDocument(
            BackboneConfig.from_dict(doc["backbone"]),
            np.array(doc["theta"], dtype=float),
            int(doc["num_classes"]),
            fp,
            int(doc["seed"]),
            doc.get("train_config", {}),
        )


def _read_config_defaults(path) -> dict:
    """key=value lines; '#' comments; keys use the flag spelling without --."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config parse error at line {lineno}: {raw.rstrip()!r}")
            key, val = line.split("=", 1)
            out[key.strip().replace("-", "_")] = val.strip()
    return out


def _load_graph(args) -> Graph:
    g = load_edge_list(args.graph, args.num_nodes)
    if getattr(args, "features", None):
        g = replace(g, features=load_features(args.features, args.num_nodes))
    if getattr(args, "labels", None):
        g = replace(g, labels=load_labels(args.labels, args.num_nodes))
    return g


def _labels_dict(labels: np.ndarray, ids) -> dict[int, int]:
    out = {}
    for i in ids:
        y = int(labels[int(i)])
        if y != UNKNOWN_LABEL:
            out[int(i)] = y
    return out


def _write_trace(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def _num_classes(args, labels: np.ndarray) -> int:
    if getattr(args, "num_classes", None):
        return args.num_classes
    observed = labels[labels != UNKNOWN_LABEL]
    if len(observed) == 0:
        raise ValueError("cannot infer the class count: no labeled nodes")
    return int(observed.max()) + 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _cmd_train(args, parser) -> int:
    if args.backbone != "free" and not args.features:
        parser.error(f"--features is required with backbone={args.backbone}")
    graph = _load_graph(args)
    labels = graph.labels
    num_classes = _num_classes(args, labels)
    split = load_split(args.split, args.num_nodes) if args.split else None
    if split is not None:
        train_ids = split["train"]
        val_ids = split["val"]
    else:
        train_ids = np.flatnonzero(labels != UNKNOWN_LABEL)
        val_ids = np.array([], dtype=np.int64)
    train_labels = _labels_dict(labels, train_ids)
    val_labels = _labels_dict(labels, val_ids)
    if not train_labels:
        parser.error("no labeled training nodes")

    backbone = BackboneConfig(
        kind=args.backbone,
        embed_dim=args.embed_dim,
        alpha_activation=args.alpha_activation,
        init_omega_sq=args.init_omega_sq,
        init_gamma=args.init_gamma,
        hidden_dim=args.hidden_dim,
    )
    config = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        num_samples=args.samples,
        baseline=args.baseline,
        seed=args.seed,
        l2=args.l2,
        patience=args.patience,
    )
    result = train(
        config, backbone, graph, train_labels,
        val_labels or None, num_classes=num_classes,
    )
    doc = ModelDocument(
        backbone, result.theta, num_classes, graph.fingerprint(), args.seed,
        train_config={
            "epochs": config.epochs, "lr": config.lr,
            "samples": config.num_samples, "baseline": config.baseline,
            "l2": config.l2, "patience": config.patience,
        },
    )
    doc.save(args.model_out)
    _write_trace(args.trace_out, [
        {k: (round(v, 10) if isinstance(v, float) else v) for k, v in rec.items()}
        for rec in result.trace
    ])
    print(f"trained epochs={len(result.trace)} model={args.model_out} seed={args.seed}")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def _cmd_predict(args, parser) -> int:
    graph = _load_graph(args)
    model = ModelDocument.load(args.model, graph)
    params = params_from_theta(model.backbone, model.theta, graph)
    observed = _labels_dict(graph.labels, range(graph.num_nodes)) if graph.labels is not None else {}

    if args.targets:
        with open(args.targets, "r", encoding="utf-8") as fh:
            targets = [int(line.strip()) for line in fh if line.strip() and not line.startswith("#")]
    else:
        targets = [i for i in range(graph.num_nodes) if i not in observed]
    for i in targets:
        if not 0 <= i < graph.num_nodes:
            parser.error(f"unknown node id {i} in target set")
        if i in observed:
            parser.error(f"target node {i} already has an observed label")

    result = greedy_decode(
        params, observed, targets, graph, args.samples,
        rng_from_seed(args.seed, 11), order=args.decode_order,
    )
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for i in sorted(result.labels):
            probs = ",".join(f"{p:.5f}" for p in result.probs[i])
            fh.write(f"{i},{result.labels[i]},{probs}\n")

    truth = load_labels(args.true_labels, graph.num_nodes) if args.true_labels else None
    scored = []
    if truth is not None:
        scored = [i for i in result.labels if truth[i] != UNKNOWN_LABEL]
    if scored:
        acc = sum(result.labels[i] == int(truth[i]) for i in scored) / len(scored)
        print(f"predicted {len(result.labels)} nodes accuracy={fmt6(acc)} "
              f"over {len(scored)} labeled targets seed={args.seed}")
    else:
        print(f"predicted {len(result.labels)} nodes accuracy=n/a seed={args.seed}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _cmd_eval(args, parser) -> int:
    graph = _load_graph(args)
    model = ModelDocument.load(args.model, graph)
    params = params_from_theta(model.backbone, model.theta, graph)
    labels = graph.labels
    if labels is None:
        parser.error("--labels is required for evaluation")
    if args.split:
        split = load_split(args.split, args.num_nodes)
        if args.subset == "labeled":
            ids = np.flatnonzero(labels != UNKNOWN_LABEL)
        else:
            ids = split[args.subset]
    else:
        ids = np.flatnonzero(labels != UNKNOWN_LABEL)
    subset = _labels_dict(labels, ids)
    if not subset:
        parser.error("evaluation subset has no labeled nodes")

    if args.metric == "elbo":
        value, _ = elbo_estimate(
            params, subset, graph, args.samples, rng_from_seed(args.seed, 21)
        )
    elif args.metric == "exact-nll":
        value = exact_marginal(params, subset, graph)
    else:  # pll
        in_subset = set(subset)
        edges = [(u, v) for u, v in graph.edges() if u in in_subset and v in in_subset]
        value = pairwise_ll(params, edges, subset, graph)
    print(f"{args.metric}={fmt6(value)} seed={args.seed} T={args.samples}")
    return 0


# ---------------------------------------------------------------------------
# approx-ising
# ---------------------------------------------------------------------------


def _cmd_approx_ising(args, parser) -> int:
    if args.ising_file:
        model = load_ising_spec(args.ising_file)
        height, width = "file", "file"
    else:
        if args.height < 1 or args.width < 1:
            parser.error("grid dimensions must be at least 1")
        model = make_ising_grid(args.height, args.width, args.J, args.h)
        height, width = args.height, args.width
    n = model.graph.num_nodes
    target = lambda y: ising_log_unnorm(model, y)  # noqa: E731

    mf_state, mf_free = mean_field_fit(model)
    trace: list[dict] = []
    fitted = None

    if args.method == "mf":
        free_energy = mf_free
        trace = [{"step": 0, "bound": mf_free, "converged": mf_state.converged}]
        fitted = mf_state
    else:
        if args.method == "nmm-free":
            cfg = BackboneConfig(
                kind="free", embed_dim=args.embed_dim, init_gamma=args.init_gamma,
            )
            graph = model.graph
            init = warm_start_theta(cfg, graph, mf_state, rng_from_seed(args.seed, 31))
        else:  # nmm-onehop
            cfg = BackboneConfig(
                kind="onehop", embed_dim=args.embed_dim,
                hidden_dim=args.hidden_dim, init_gamma=args.init_gamma,
            )
            graph = with_features(model)
            layout = layout_for(cfg, n, graph.features.shape[1], 2)
            init = init_theta(cfg, layout, rng_from_seed(args.seed, 31))
        theta, trace = optimize_kl_bound(
            cfg, graph, target, args.steps, args.opt_samples,
            args.lr, args.seed, init,
        )
        fitted = params_from_theta(cfg, theta, graph)
        free_energy, se = estimate_bound(
            fitted, graph, target, args.samples, rng_from_seed(args.seed, 32)
        )
        trace.append({"step": len(trace), "bound": free_energy, "stderr": se})

    print(
        f"method={args.method} height={height} width={width} "
        f"free_energy={fmt6(free_energy)} samples={args.samples} seed={args.seed}"
    )
    if n <= 20:
        kl, log_z = exact_kl_oracle(fitted, model)
        print(f"ln_Z={fmt6(log_z)} true_kl={fmt6(kl)}")
    if args.trace_out:
        _write_trace(args.trace_out, [
            {k: (round(v, 10) if isinstance(v, float) else v) for k, v in rec.items()}
            for rec in trace
        ])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="nmm",
        description="Neighbor mixture models over graph node labels.",
    )
    parser.add_argument("--config", help="key=value file supplying flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_graph_flags(p, features=True):
        p.add_argument("--graph", required=True, help="edge list file (u<TAB>v per line)")
        p.add_argument("--num-nodes", type=int, required=True)
        p.add_argument("--labels", help="observed labels file (node_id,label_id)")
        if features:
            p.add_argument("--features", help="numeric feature table, row per node")

    tr = sub.add_parser("train", help="fit a model to observed labels")
    add_graph_flags(tr)
    tr.add_argument("--split", help="JSON split file with train/val/test arrays")
    tr.add_argument("--backbone", choices=["free", "linear", "onehop"], required=True)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--num-classes", type=int)
    tr.add_argument("--epochs", type=int, default=200)
    tr.add_argument("--lr", type=float, default=0.01)
    tr.add_argument("--samples", type=int, default=8, help="Monte Carlo samples per step")
    tr.add_argument("--baseline", choices=["none", "loo"], default="loo")
    tr.add_argument("--l2", type=float, default=0.005)
    tr.add_argument("--patience", type=int, default=100)
    tr.add_argument("--embed-dim", type=int, default=8)
    tr.add_argument("--hidden-dim", type=int, default=16)
    tr.add_argument("--alpha-activation", choices=["softplus_plus_one", "square_plus_one"],
                    default="softplus_plus_one")
    tr.add_argument("--init-omega-sq", type=float, default=1.0)
    tr.add_argument("--init-gamma", type=float, default=0.0)
    tr.add_argument("--model-out", required=True)
    tr.add_argument("--trace-out", required=True)
    tr.set_defaults(func=_cmd_train)

    pr = sub.add_parser("predict", help="predict labels for target nodes")
    add_graph_flags(pr)
    pr.add_argument("--model", required=True)
    pr.add_argument("--targets", help="file with one target node id per line")
    pr.add_argument("--true-labels", help="ground-truth labels for accuracy reporting")
    pr.add_argument("--samples", type=int, default=64, help="posterior particles")
    pr.add_argument("--decode-order", choices=["id", "confidence"], default="id")
    pr.add_argument("--seed", type=int, required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=_cmd_predict)

    ev = sub.add_parser("eval", help="report a metric for a saved model")
    add_graph_flags(ev)
    ev.add_argument("--model", required=True)
    ev.add_argument("--split", help="JSON split file")
    ev.add_argument("--subset", choices=["train", "val", "test", "labeled"], default="labeled")
    ev.add_argument("--metric", choices=["elbo", "pll", "exact-nll"], required=True)
    ev.add_argument("--samples", type=int, default=64)
    ev.add_argument("--seed", type=int, required=True)
    ev.set_defaults(func=_cmd_eval)

    ai = sub.add_parser("approx-ising", help="approximate an Ising target")
    ai.add_argument("--method", choices=["mf", "nmm-free", "nmm-onehop"], required=True)
    ai.add_argument("--height", type=int, default=4)
    ai.add_argument("--width", type=int, default=4)
    ai.add_argument("--J", type=float, default=0.5)
    ai.add_argument("--h", type=float, default=0.0)
    ai.add_argument("--ising-file", help="JSON Ising spec (overrides grid flags)")
    ai.add_argument("--samples", type=int, default=20000, help="evaluation samples")
    ai.add_argument("--opt-samples", type=int, default=8, help="samples per gradient step")
    ai.add_argument("--steps", type=int, default=400)
    ai.add_argument("--lr", type=float, default=0.02)
    ai.add_argument("--embed-dim", type=int, default=6)
    ai.add_argument("--hidden-dim", type=int, default=16)
    ai.add_argument("--init-gamma", type=float, default=5.0)
    ai.add_argument("--seed", type=int, required=True)
    ai.add_argument("--trace-out")
    ai.set_defaults(func=_cmd_approx_ising)

    return parser, {"train": tr, "predict": pr, "eval": ev, "approx-ising": ai}


def _apply_config_defaults(subparser, defaults: dict) -> None:
    coerced = {}
    for action in subparser._actions:
        for opt in action.option_strings:
            key = opt.lstrip("-").replace("-", "_")
            if key in defaults:
                raw = defaults[key]
                coerced[action.dest] = action.type(raw) if action.type else raw
                if action.required:
                    action.required = False
    subparser.set_defaults(**coerced)


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser, subparsers = _build_parser()

    # --config supplies defaults for the chosen subcommand; flags override.
    argv = list(argv)
    if "--config" in argv:
        at = argv.index("--config")
        if at + 1 >= len(argv):
            parser.error("--config needs a path")
        config_path = argv[at + 1]
        del argv[at : at + 2]
        try:
            defaults = _read_config_defaults(config_path)
        except (OSError, ValueError) as err:
            print(f"error: {err}", file=sys.stderr)
            return 2
        command = next((a for a in argv if not a.startswith("-")), None)
        if command in subparsers:
            _apply_config_defaults(subparsers[command], defaults)

    _ = max_workers()  # honor NMM_THREADS (execution is sequential either way)
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (TrainingDiverged, EnumerationBudgetError, FingerprintMismatch) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
