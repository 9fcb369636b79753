"""Command-line entry point.

Every subcommand reads CSV panels, writes its artifacts to ``--out``, and
stamps each file with the tool version and a hash of the effective
configuration.  Options may also come from a ``key = value`` file passed
with ``--config``; flags given on the command line win.

Exit codes: 0 success, 2 usage/validation error, 3 I/O error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import gmm as gmm_mod
from .clustering import (
    ClusterModel,
    Method,
    cut_tree,
    fit_model,
    model_from_labels,
    render_dendrogram,
    select_k,
    stability,
    ward_linkage,
)
from .dataset import (
    BiomarkerPanel,
    NormalizationParams,
    NormalizedPanel,
    apply_normalization,
    as_z_space,
    dump_panel,
    fit_normalization,
    invert_normalization,
    read_table,
)
from .errors import BiostateError, NumericalFailure, ValidationError
from .profiling import centroid_signatures, default_rules, load_rules, profile_report, render_heatmap
from .projection import fit_pca, project, render_scatter, scores_csv
from .screening import DEFAULT_THRESHOLD, exclude, screen
from .seedgen import default_spec, format_seed_spec, generate_seed, parse_seed_spec

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

# options that never enter the config hash
_UNHASHED = {"out", "config", "command", "handler", "input", "params", "model", "rules", "spec", "verbose"}


class UsageError(ValidationError):
    pass


# --------------------------------------------------------------------------
# helpers


def _file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def config_hash(args: argparse.Namespace) -> str:
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in _UNHASHED and not callable(v)}
    for key in ("input", "params", "model", "rules", "spec"):
        path = getattr(args, key, None)
        if path:
            settings[key + "_sha256"] = _file_digest(path)
    blob = json.dumps(settings, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class Artifacts:
    """Writes stamped output files into one directory."""

    def __init__(self, out: Path, args: argparse.Namespace, space: str | None = None):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(args)
        self.meta = {"tool": "biostate", "version": __version__, "config_hash": self.hash}
        self.comment = f"biostate {__version__} config={self.hash}"
        self.written: list[Path] = []

    def csv_comment(self, space: str) -> str:
        return f"{self.comment} space={space}"

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.written.append(path)
        return path


def _read_comment_space(path) -> str | None:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            for token in line[1:].split():
                if token.startswith("space="):
                    return token.split("=", 1)[1]
    return None


def load_input(args) -> tuple[BiomarkerPanel, dict, str]:
    """Read ``--input``; returns (panel, metadata columns, space)."""
    panel, meta = read_table(args.input)
    space = getattr(args, "space", "auto")
    if space == "auto":
        space = _read_comment_space(args.input) or "raw"
    if space not in ("raw", "z"):
        raise UsageError(f"--space must be auto, raw or z, not {space!r}")
    return panel, meta, space


def normalized_input(args) -> tuple[NormalizedPanel, dict, str]:
    panel, meta, space = load_input(args)
    if getattr(args, "params", None):
        with open(args.params, encoding="utf-8") as fh:
            params = NormalizationParams.from_json(fh.read())
        return apply_normalization(panel, params), meta, "raw"
    if space == "z":
        return as_z_space(panel), meta, space
    return apply_normalization(panel, fit_normalization(panel)), meta, space


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0 or value == float("inf"):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _method(text: str) -> str:
    try:
        return Method.parse(text).value
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _cluster_for(args, panel: NormalizedPanel, k: int) -> ClusterModel:
    if getattr(args, "model", None):
        with open(args.model, encoding="utf-8") as fh:
            model = ClusterModel.from_dict(json.load(fh))
        return model
    if k == 1:
        return model_from_labels(panel, np.zeros(len(panel.subjects), dtype=int), args.method)
    return fit_model(panel, k, args.method, args.seed)


# --------------------------------------------------------------------------
# commands


def cmd_seedgen(args) -> int:
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            spec = parse_seed_spec(fh.read())
        if args.seed_given:
            spec = type(spec)(spec.profiles, spec.biomarker_names, args.seed, spec.signature_std, spec.background_std)
    else:
        spec = default_spec(args.seed, args.weighting, args.size)
    generated = generate_seed(spec)
    art = Artifacts(args.out, args)
    art.write("seed.csv", dump_panel(generated.panel, comment=art.csv_comment("z")))
    art.write("labels.csv", generated.labels_csv(art.comment))
    art.write("seed.spec", f"# {art.comment}\n" + format_seed_spec(spec))
    print(f"seed cohort: {generated.panel.shape[0]} subjects x {generated.panel.shape[1]} biomarkers -> {art.out}")
    return EXIT_OK


def _raw_rows(path) -> tuple[str, dict[str, str]]:
    """Header line and original text of each data line, keyed by subject id."""
    import csv

    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh.read().splitlines(keepends=True) if ln.strip() and not ln.lstrip().startswith("#")]
    header, rows = lines[0], {}
    for ln in lines[1:]:
        subject = next(csv.reader([ln]))[0].strip()
        rows[subject] = ln if ln.endswith("\n") else ln + "\n"
    return header if header.endswith("\n") else header + "\n", rows


def cmd_screen(args) -> int:
    panel, _, space = normalized_input(args)
    report = screen(panel, args.threshold)
    art = Artifacts(args.out, args)
    art.write("screening.json", report.to_json(art.meta))
    params = panel.params
    if args.refit_after_screen and space == "raw" and len(report.retained) >= 2:
        raw, _, _ = load_input(args)
        params = fit_normalization(raw.subset(report.retained))
    art.write("normalization.json", json.dumps({**params.to_dict(), "meta": art.meta}, sort_keys=True, indent=2) + "\n")
    header, rows = _raw_rows(args.input)
    body = "".join(rows[s] for s in report.retained)
    art.write("retained.csv", f"# {art.csv_comment(space)}\n" + header + body)
    for s in report.flagged:
        print(f"flagged {s}: distance {report.distance_of(s):.2f} > {report.threshold:g}")
    print(f"retained {len(report.retained)} of {len(report.subjects)} subjects -> {art.out}")
    if len(report.retained) < 2:
        exclude(panel, report)  # raises EmptyPanel
    return EXIT_OK


def cmd_cluster(args) -> int:
    panel, _, _ = normalized_input(args)
    art = Artifacts(args.out, args)
    method = Method.parse(args.method)
    tree = ward_linkage(panel) if method is Method.WARD else None
    n = len(panel.subjects)
    for k in args.k:
        if not 2 <= k <= n:
            raise UsageError(f"--k {k} outside [2, {n}]")
        model = cut_tree(tree, k, panel) if tree else fit_model(panel, k, method, args.seed)
        art.write(f"cluster_k{k}.json", model.to_json(art.meta))
        report = stability(panel, k, method, args.stability_runs)
        art.write(f"stability_k{k}.json", report.to_json(art.meta))
        print(f"k={k}: silhouette {model.silhouette:.3f}, mean ARI over {report.runs} runs {report.mean_ari:.3f}")
    hi = min(8, n - 1) if n > 2 else 2
    ranking = select_k(panel, (2, max(2, hi)), method, args.seed)
    art.write(
        "selection.json",
        json.dumps({"method": method.value, "ranking": [{"k": k, "silhouette": s} for k, s in ranking], "meta": art.meta}, indent=2) + "\n",
    )
    if tree:
        art.write("linkage.txt", tree.to_text(art.comment))
        art.write("dendrogram.svg", render_dendrogram(tree, comment=art.comment))
    return EXIT_OK


def cmd_augment(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    panel, _, space = normalized_input(args)
    n, b = panel.shape
    if not args.force and gmm_mod.check_ratio(n, b) is gmm_mod.RatioStatus.INSUFFICIENT:
        print("ratio guard: " + gmm_mod.ratio_message(n, b) + "; fitting the generator anyway (use --force to silence)", file=sys.stderr)
    final = gmm_mod.check_ratio(n + args.count, b)
    if final is gmm_mod.RatioStatus.INSUFFICIENT and not args.force:
        raise UsageError(
            f"augmented cohort of {n + args.count} would still be below 5:1 for {b} variables; "
            "raise --count or pass --force"
        )
    config = gmm_mod.GmmConfig(args.components, args.reg_covar, args.max_iter, args.tol, args.seed, args.n_init)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", gmm_mod.RatioWarning)
        model = gmm_mod.fit(panel, config)
    if not model.converged:
        message = f"EM did not converge within {config.max_iter} iterations"
        if args.strict:
            raise NumericalFailure(message)
        print("warning: " + message, file=sys.stderr)
    cohort = gmm_mod.augment(panel, model, args.count, args.seed)
    art = Artifacts(args.out, args)
    art.write("gmm.json", model.to_json(art.meta))
    out_panel = invert_normalization(cohort.panel) if space == "raw" else BiomarkerPanel(cohort.panel.subjects, cohort.panel.schema, cohort.panel.z)
    art.write(
        "cohort.csv",
        dump_panel(
            out_panel,
            {"provenance": cohort.provenance, "component": cohort.component},
            art.csv_comment(space),
        ),
    )
    print(f"cohort: {n} seed + {args.count} synthetic = {n + args.count} subjects ({final.value}) -> {art.out}")
    return EXIT_OK


def _provenance(meta: dict, n: int) -> list[str]:
    return meta.get("provenance") or ["seed"] * n


def cmd_project(args) -> int:
    panel, meta, _ = normalized_input(args)
    model = _cluster_for(args, panel, args.k)
    pca = fit_pca(panel, 2)
    scores = project(pca, panel)
    art = Artifacts(args.out, args)
    art.write("pca_scores.csv", scores_csv(panel.subjects, scores, model.assignments, _provenance(meta, len(panel.subjects)), art.comment))
    art.write("pca.svg", render_scatter(scores, model.assignments, pca, comment=art.comment))
    art.write(
        "pca.json",
        json.dumps({"explained_ratio": pca.explained_ratio.tolist(), "explained_variance": pca.explained_variance.tolist(), "meta": art.meta}, indent=2) + "\n",
    )
    return EXIT_OK


def cmd_report(args) -> int:
    panel, meta, _ = normalized_input(args)
    rules = load_rules(args.rules) if args.rules else default_rules()
    model = _cluster_for(args, panel, args.k)
    report = profile_report(panel, model, rules)
    art = Artifacts(args.out, args)
    art.write("profile.json", report.to_json(art.meta))
    art.write("profile.txt", f"# {art.comment}\n" + report.to_text())
    sigs = centroid_signatures(panel, model)
    labels = [f"{r} {report.states[r].value}" for r in range(model.k)]
    art.write("heatmap.svg", render_heatmap(sigs, panel.schema, labels, comment=art.comment))
    if min(panel.shape[0] - 1, panel.shape[1]) >= 2:
        pca = fit_pca(panel, 2)
        art.write("pca.svg", render_scatter(project(pca, panel), model.assignments, pca, labels, comment=art.comment))
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_pipeline(args) -> int:
    out = Path(args.out)
    if args.input:
        source = args.input
    else:
        seed_args = argparse.Namespace(**{**vars(args), "out": out / "seed", "spec": None, "size": 15, "seed_given": True})
        cmd_seedgen(seed_args)
        source = str(out / "seed" / "seed.csv")

    def step(name, **extra):
        return argparse.Namespace(**{**vars(args), "out": out / name, "params": None, "model": None, **extra})

    cmd_screen(step("screen", input=source))
    screened = str(out / "screen" / "retained.csv")
    # raw-unit inputs keep the screening z-scale all the way through
    params = str(out / "screen" / "normalization.json") if _read_comment_space(screened) == "raw" else None
    cohort = screened
    if args.augment:
        cmd_augment(step("augment", input=screened, params=params))
        cohort = str(out / "augment" / "cohort.csv")
    cohort_params = params
    cmd_cluster(step("cluster", input=cohort, params=cohort_params))
    model = str(out / "cluster" / f"cluster_k{args.report_k}.json") if args.report_k in args.k else None
    cmd_project(step("project", input=cohort, params=cohort_params, model=model, k=args.report_k))
    cmd_report(step("report", input=cohort, params=cohort_params, model=model, k=args.report_k))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; repeated or comma-separated values become lists."""
    settings: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            settings[key.strip().replace("-", "_")] = value.strip()
    return settings


def _coerce(parser: argparse.ArgumentParser, settings: dict) -> dict:
    actions = {a.dest: a for a in parser._actions}
    out = {}
    for key, value in settings.items():
        action = actions.get(key)
        if action is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            out[key] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            conv = action.type or str
            out[key] = [conv(v.strip()) for v in value.split(",") if v.strip()]
        else:
            try:
                out[key] = action.type(value) if action.type else value
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"config {key}: {exc}") from None
            if action.choices and out[key] not in action.choices:
                raise UsageError(f"config {key}: invalid choice {value!r}")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biostate", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"biostate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_input=True):
        p.add_argument("--config", help="key = value file; command-line flags override it")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, default=0, help="global random seed")
        if needs_input:
            p.add_argument("--input", help="panel CSV")
            p.add_argument("--space", choices=["auto", "raw", "z"], default="auto", help="raw units (normalize) or z-space input")
            p.add_argument("--params", help="normalization JSON to apply instead of fitting")

    def cluster_opts(p):
        p.add_argument("--method", type=_method, default="ward", help="ward (default) or kmeans")

    def gmm_opts(p):
        p.add_argument("--count", type=int, default=275, help="synthetic rows to draw")
        p.add_argument("--components", type=_positive_int, default=5)
        p.add_argument("--reg-covar", type=float, default=0.1)
        p.add_argument("--max-iter", type=_positive_int, default=200)
        p.add_argument("--tol", type=_positive_float, default=1e-4)
        p.add_argument("--n-init", type=_positive_int, default=gmm_mod.GmmConfig.n_init)
        p.add_argument("--force", action="store_true", help="silence and override the observation ratio guard")
        p.add_argument("--strict", action="store_true", help="treat EM non-convergence as fatal (exit 4)")

    p = sub.add_parser("seedgen", help="generate the synthetic seed cohort")
    common(p, needs_input=False)
    p.add_argument("--spec", help="declarative seed spec file")
    p.add_argument("--weighting", choices=["equal", "prevalence"], default="equal")
    p.add_argument("--size", type=_positive_int, default=15)
    p.set_defaults(handler=cmd_seedgen)

    p = sub.add_parser("screen", help="flag multivariate outliers")
    common(p)
    p.add_argument("--threshold", type=_positive_float, default=DEFAULT_THRESHOLD)
    p.add_argument("--refit-after-screen", action="store_true", help="refit z-score parameters on the retained subjects")
    p.set_defaults(handler=cmd_screen)

    p = sub.add_parser("cluster", help="Ward / K-Means clustering with stability")
    common(p)
    cluster_opts(p)
    p.add_argument("--k", type=int, action="append", help="cluster count (repeatable; default 3 and 5)")
    p.add_argument("--stability-runs", type=int, default=10)
    p.set_defaults(handler=cmd_cluster)

    p = sub.add_parser("augment", help="fit the GMM and sample a synthetic cohort")
    common(p)
    gmm_opts(p)
    p.set_defaults(handler=cmd_augment)

    p = sub.add_parser("project", help="PCA scatter of a cohort")
    common(p)
    cluster_opts(p)
    p.add_argument("--model", help="cluster model JSON providing labels")
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(handler=cmd_project)

    p = sub.add_parser("report", help="physiological profile report and heatmap")
    common(p)
    cluster_opts(p)
    p.add_argument("--model", help="cluster model JSON")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--rules", help="signature rule file (default: built-in rules)")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("pipeline", help="seedgen -> screen -> augment -> cluster -> project -> report")
    common(p)
    cluster_opts(p)
    gmm_opts(p)
    p.add_argument("--threshold", type=_positive_float, default=DEFAULT_THRESHOLD)
    p.add_argument("--refit-after-screen", action="store_true")
    p.add_argument("--k", type=int, action="append")
    p.add_argument("--stability-runs", type=int, default=10)
    p.add_argument("--report-k", type=int, default=5)
    p.add_argument("--weighting", choices=["equal", "prevalence"], default="prevalence")
    p.add_argument("--rules")
    p.add_argument("--no-augment", dest="augment", action="store_false")
    p.set_defaults(handler=cmd_pipeline)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        subparser.set_defaults(**_coerce(subparser, read_config_file(args.config)))
        args = parser.parse_args(argv)
    args.seed_given = any(a == "--seed" or a.startswith("--seed=") for a in argv)
    if hasattr(args, "k") and args.command in ("cluster", "pipeline") and not args.k:
        args.k = [3, 5]
    if hasattr(args, "stability_runs") and args.stability_runs < 2:
        parser.error("--stability-runs must be >= 2")
    if args.command in ("screen", "cluster", "augment", "project", "report") and not args.input:
        parser.error("--input is required")
    if args.command in ("augment", "pipeline") and args.count < 1:
        parser.error("--count must be >= 1")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"biostate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    except OSError as exc:
        print(f"biostate: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return args.handler(args)
    except ValidationError as exc:
        print(f"biostate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"biostate: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"biostate: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BiostateError as exc:
        print(f"biostate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
