"""Command-line driver: weights, filters, sampler runs, exact oracle, Moran panels.

Every subcommand reads a JSON run manifest. Relative paths in the manifest
resolve against the manifest's directory; ``package:<file>`` refers to a
file bundled with the package (capital coordinates, queen contiguity,
island patches). Outputs are staged in a hidden directory and only moved
into place once the whole command has succeeded.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import secrets
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bma import DEFAULT_ENUMERATION_CAP, GPrior, ModelPrior, ModelSpace, PosteriorSummary, exact_bma
from .errors import ConfigurationError, IslandError, SpatialBMAError
from .filtering import DEFAULT_COHERENCE, DEFAULT_STOP_P, EigenFilterSet, build_filter_set
from .ingest import Dataset, load_dataset, read_manifest
from .moran import moran_panel_csv, moran_test_residuals
from .sampler import ChainConfig, chain_summary, coefficient_draws, run_chain
from .synthetic import data_path, make_confounded_data, make_sar_data, standard_menu
from .weights import (NeighborList, WeightMatrix, apply_island_patches, build_distance_band, build_knn,
                      matrix_stats, parse_neighbor_file, read_coordinates, read_patches, row_standardize,
                      serialize_neighbor_file, serialize_weights_csv)

log = logging.getLogger("spatial_bma")

BUILDERS = ("gal", "knn", "band", "inverse-band")
STATS_HEADER = ["matrix", "min_links", "max_links", "avg_links", "pct_nonzero"]


# ---------------------------------------------------------------------------
# manifest


def _resolve(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    if value.startswith("package:"):
        return Path(str(data_path(value[len("package:"):])))
    p = Path(value)
    return p if p.is_absolute() else (base / p)


@dataclass(frozen=True)
class WeightSpec:
    name: str
    builder: str
    k: int | None = None
    d_max_km: float | None = None
    path: Path | None = None
    weights_csv: Path | None = None
    patches: Path | None = None

    def as_dict(self) -> dict:
        out = {"name": self.name, "builder": self.builder}
        for key in ("k", "d_max_km", "path", "weights_csv", "patches"):
            val = getattr(self, key)
            if val is not None:
                out[key] = str(val) if isinstance(val, Path) else val
        return out


@dataclass(frozen=True)
class RunManifest:
    source: Path
    dataset: Path | None
    variables: dict
    coordinates: Path
    weights: tuple[WeightSpec, ...]
    chain: ChainConfig
    year_range: tuple[int, int] | None = None
    coherence: float = DEFAULT_COHERENCE
    stop_p: float = DEFAULT_STOP_P
    moran_method: str = "permutation"
    moran_permutations: int = 999
    moran_top_models: int = 100
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP
    label: str = "model"
    output_dir: Path = Path("out")
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, path, overrides: argparse.Namespace | None = None) -> "RunManifest":
        path = Path(path)
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: manifest must be a JSON object")
        base = path.resolve().parent
        o = overrides or argparse.Namespace()

        weights = []
        for i, w in enumerate(raw.get("weights", [])):
            if "name" not in w or "builder" not in w:
                raise ConfigurationError(f"weights[{i}] needs a name and a builder")
            if w["builder"] not in BUILDERS:
                raise ConfigurationError(f"weights[{i}]: builder must be one of {', '.join(BUILDERS)}")
            spec = WeightSpec(w["name"], w["builder"], w.get("k"), w.get("d_max_km"),
                              _resolve(base, w.get("path")), _resolve(base, w.get("weights_csv")),
                              _resolve(base, w.get("patches")))
            if spec.builder == "gal" and spec.path is None:
                raise ConfigurationError(f"weights[{i}]: gal builder needs a path")
            if spec.builder == "knn" and not isinstance(spec.k, int):
                raise ConfigurationError(f"weights[{i}]: knn builder needs an integer k")
            if spec.builder in ("band", "inverse-band") and spec.d_max_km is None:
                raise ConfigurationError(f"weights[{i}]: band builder needs d_max_km")
            weights.append(spec)
        names = [w.name for w in weights]
        if len(set(names)) != len(names):
            raise ConfigurationError("weight matrix names must be unique")

        c = dict(raw.get("chain", {}))
        seed = getattr(o, "seed", None)
        if seed is None:
            seed = c.get("seed")
        if seed is None:
            seed = secrets.randbits(32)
        iterations = getattr(o, "iterations", None) or c.get("iterations", 3_000_000)
        burn_in = getattr(o, "burnin", None)
        if burn_in is None:
            burn_in = c.get("burn_in", iterations // 10)
        gprior = getattr(o, "gprior", None) or raw.get("gprior", "uip")
        gp = GPrior("fixed", float(gprior)) if isinstance(gprior, (int, float)) else GPrior(gprior)
        mp = raw.get("model_prior", {})
        chain = ChainConfig(
            iterations=int(iterations), burn_in=int(burn_in), seed=int(seed), gprior=gp,
            prior=ModelPrior(mp.get("kind", "uniform"), mp.get("theta", 0.5)),
            statistic=c.get("statistic", "frequency"), best_models=c.get("best_models", 10_000),
            density_draws=c.get("density_draws", 5_000),
        )
        variables = raw.get("variables")
        if isinstance(variables, str):
            variables = json.loads(_resolve(base, variables).read_text())
        f = raw.get("filter", {})
        m = raw.get("moran", {})
        if getattr(o, "output_dir", None):
            output_dir = Path(o.output_dir)
        else:
            output_dir = _resolve(base, raw.get("output_dir", "out"))
        yr = raw.get("year_range")
        manifest = cls(
            source=path.resolve(),
            dataset=_resolve(base, raw.get("dataset")),
            variables=variables or {},
            coordinates=_resolve(base, raw.get("coordinates", "package:capitals_115.csv")),
            weights=tuple(weights),
            chain=chain,
            year_range=tuple(yr) if yr else None,
            coherence=f.get("coherence", DEFAULT_COHERENCE),
            stop_p=f.get("stop_p", DEFAULT_STOP_P),
            moran_method=m.get("method", "permutation"),
            moran_permutations=m.get("permutations", 999),
            moran_top_models=m.get("top_models", 100),
            enumeration_cap=raw.get("enumeration_cap", DEFAULT_ENUMERATION_CAP),
            label=raw.get("label", "model"),
            output_dir=output_dir,
            raw=raw,
        )
        manifest.check_files()
        return manifest

    def check_files(self) -> None:
        paths = [self.coordinates, self.dataset]
        for w in self.weights:
            paths += [w.path, w.weights_csv, w.patches]
        missing = [str(p) for p in paths if p is not None and not p.is_file()]
        if missing:
            raise ConfigurationError("missing input files: " + ", ".join(missing))

    def as_dict(self) -> dict:
        return {
            "version": __version__,
            "label": self.label,
            "dataset": str(self.dataset) if self.dataset else None,
            "variables": self.variables,
            "year_range": list(self.year_range) if self.year_range else None,
            "coordinates": str(self.coordinates),
            "weights": [w.as_dict() for w in self.weights],
            "chain": self.chain.as_dict(),
            "filter": {"coherence": self.coherence, "stop_p": self.stop_p},
            "moran": {"method": self.moran_method, "permutations": self.moran_permutations,
                      "top_models": self.moran_top_models},
            "enumeration_cap": self.enumeration_cap,
        }


# ---------------------------------------------------------------------------
# staged output


class Staging:
    """Collect outputs in a hidden directory; publish them only on success."""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)

    def __enter__(self):
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.output_dir))
        return self

    def write(self, relpath: str, text: str) -> None:
        p = self.tmp / relpath
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", newline="") as fh:
            fh.write(text)

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for p in sorted(self.tmp.rglob("*")):
                    if p.is_file():
                        dest = self.output_dir / p.relative_to(self.tmp)
                        dest.parent.mkdir(parents=True, exist_ok=True)
                        os.replace(p, dest)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


# ---------------------------------------------------------------------------
# pipeline pieces


def build_neighbor_lists(manifest: RunManifest) -> tuple[list, dict[str, NeighborList]]:
    points = read_coordinates(manifest.coordinates)
    ids = [p.unit_id for p in points]
    out = {}
    for w in manifest.weights:
        if w.builder == "gal":
            sidecar = w.weights_csv.read_text() if w.weights_csv else None
            nl = parse_neighbor_file(w.path.read_text(), sidecar, unit_ids=ids)
        elif w.builder == "knn":
            nl = build_knn(points, w.k)
        else:
            nl = build_distance_band(points, float(w.d_max_km), inverse=w.builder == "inverse-band")
        if w.patches is not None:
            nl = apply_island_patches(nl, read_patches(w.patches))
        out[w.name] = nl
    return points, out


def build_weights(manifest: RunManifest) -> tuple[list, dict[str, WeightMatrix]]:
    points, lists = build_neighbor_lists(manifest)
    mats = {}
    for name, nl in lists.items():
        islands = nl.islands()
        if islands:
            raise IslandError(islands, f"matrix {name!r}: add a patches file for these units")
        mats[name] = row_standardize(nl, name)
    return points, mats


def load_manifest_dataset(manifest: RunManifest, points) -> Dataset:
    if manifest.dataset is None:
        raise ConfigurationError("manifest has no dataset")
    specs = read_manifest(manifest.variables)
    return load_dataset(manifest.dataset, specs, manifest.year_range).with_points(points)


def build_filters(ds: Dataset, mats: dict[str, WeightMatrix], manifest: RunManifest,
                  threads: int = 1) -> list[EigenFilterSet]:
    def one(item):
        name, W = item
        f = build_filter_set(ds.y, ds.X, W, name, manifest.coherence, manifest.stop_p)
        log.info("%s: %d eigenvectors selected, residual Moran p = %.3f", name, f.size, f.final_p)
        return f

    items = list(mats.items())
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, items))
    return [one(it) for it in items]


def _fmt(x: float) -> str:
    return f"{float(x):.10g}"


def stats_csv(lists: dict[str, NeighborList]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_HEADER)
    for name, nl in lists.items():
        w.writerow([name, *matrix_stats(nl).row()])
    return buf.getvalue()


def pips_csv(summary: PosteriorSummary) -> str:
    """``variable,pip,post_mean,post_sd`` sorted by PIP (ties by name)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variable", "pip", "post_mean", "post_sd"])
    for i in summary.order():
        w.writerow([summary.names[i], f"{summary.pip[i]:.10f}", f"{summary.post_mean[i]:.10f}",
                    f"{summary.post_sd[i]:.10f}"])
    return buf.getvalue()


def wmatrix_csv(summary: PosteriorSummary, label: str) -> str:
    """One row per run, one column per matrix, posterior shares in percent."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", *summary.matrix_names])
    w.writerow([label, *(f"{100.0 * s:.4f}" for s in summary.matrix_pip)])
    return buf.getvalue()


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def moran_rows(space: ModelSpace, models, mats: list[WeightMatrix], X, y, manifest: RunManifest):
    """Moran p-values of the top models before and after adding their filter."""
    rows = []
    for rank, (mask, z) in enumerate(models, start=1):
        inc = space.included(mask)
        Xm = X[:, inc] if inc else None
        W = mats[z]
        seed = manifest.chain.seed + rank
        kw = dict(method=manifest.moran_method, permutations=manifest.moran_permutations)
        ols = moran_test_residuals(y, Xm, W, seed=seed, **kw)
        E = space.blocks[z]
        Xf = np.hstack([X[:, inc], E]) if E.shape[1] else Xm
        filt = moran_test_residuals(y, Xf, W, seed=seed, **kw)
        rows.append((str(rank), "ols", ols.I, ols.p_value))
        rows.append((str(rank), "filtered", filt.I, filt.p_value))
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_weights(manifest: RunManifest, args) -> None:
    """Build, patch and row-standardise every listed matrix; write GAL files and link statistics."""
    if not manifest.weights:
        raise ConfigurationError("manifest lists no weight matrices")
    _, lists = build_neighbor_lists(manifest)
    for name, nl in lists.items():
        islands = nl.islands()
        if islands:
            raise IslandError(islands, f"matrix {name!r}: add a patches file for these units")
    with Staging(manifest.output_dir) as out:
        for name, nl in lists.items():
            out.write(f"weights/{_safe(name)}.gal", serialize_neighbor_file(nl))
            side = serialize_weights_csv(nl)
            if side is not None:
                out.write(f"weights/{_safe(name)}.weights.csv", side)
        out.write("weights_stats.csv", stats_csv(lists))


def cmd_filter(manifest: RunManifest, args) -> None:
    """Select eigenvector filters for every listed matrix."""
    if not manifest.weights:
        raise ConfigurationError("manifest lists no weight matrices")
    points, mats = build_weights(manifest)
    ds = load_manifest_dataset(manifest, points)
    filters = build_filters(ds, mats, manifest, args.threads)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["matrix", "selected", "final_z", "final_p", "exhausted"])
    with Staging(manifest.output_dir) as out:
        for f in filters:
            out.write(f"filters/{_safe(f.matrix_id)}.json", f.to_json())
            w.writerow([f.matrix_id, f.size, _fmt(f.final_z), _fmt(f.final_p), str(f.exhausted).lower()])
        out.write("filters_summary.csv", buf.getvalue())


def _space(manifest: RunManifest, args):
    points, mats = build_weights(manifest)
    ds = load_manifest_dataset(manifest, points)
    filters = build_filters(ds, mats, manifest, args.threads)
    space = ModelSpace(ds.y, ds.X, filters, manifest.chain.gprior, manifest.chain.prior,
                       ds.covariate_names, list(mats))
    return ds, mats, filters, space


def cmd_run(manifest: RunManifest, args) -> None:
    """Run the MC3 sampler and write inclusion probabilities, matrix shares and densities."""
    ds, mats, filters, space = _space(manifest, args)
    cfg = manifest.chain
    log.info("running %d iterations (burn-in %d, seed %d) over %d models",
             cfg.iterations, cfg.burn_in, cfg.seed, space.n_models)
    trace = run_chain(space, cfg)
    summary = chain_summary(space, trace, cfg.statistic, cfg.best_models)
    with Staging(manifest.output_dir) as out:
        out.write("pips.csv", pips_csv(summary))
        if space.spatial:
            out.write("wmatrix_posterior.csv", wmatrix_csv(summary, manifest.label))
        for i in summary.order()[:5]:
            draws = coefficient_draws(space, trace, i, cfg.seed)
            out.write(f"density_{_safe(summary.names[i])}.csv",
                      "draw\n" + "".join(_fmt(d) + "\n" for d in draws))
        if space.spatial:
            top = trace.best(manifest.moran_top_models)
            rows = moran_rows(space, top, list(mats.values()), ds.X, ds.y, manifest)
            out.write("moran_pvalues.csv", moran_panel_csv(rows))
        acc = trace.acceptance
        out.write("chain_summary.json", json.dumps({
            "distinct_models_evaluated": len(trace.log_post),
            "distinct_models_visited": len(trace.visits),
            "acceptance_covariate": acc[0],
            "acceptance_matrix": acc[1],
            "kept_iterations": trace.kept,
            "statistic": cfg.statistic,
            "filters": {f.matrix_id: {"selected": f.size, "final_p": f.final_p} for f in filters},
        }, indent=1, sort_keys=True) + "\n")
        out.write("manifest_resolved.json", json.dumps(manifest.as_dict(), indent=1) + "\n")


def cmd_oracle(manifest: RunManifest, args) -> None:
    """Enumerate the model space exactly and write the reference posterior."""
    ds, mats, filters, space = _space(manifest, args)
    summary = exact_bma(space, cap=manifest.enumeration_cap)
    with Staging(manifest.output_dir) as out:
        out.write("pips.csv", pips_csv(summary))
        if space.spatial:
            out.write("wmatrix_posterior.csv", wmatrix_csv(summary, manifest.label))


def cmd_moran(manifest: RunManifest, args) -> None:
    """Moran tests of the full-model residuals against every matrix, before and after filtering."""
    if not manifest.weights:
        raise ConfigurationError("manifest lists no weight matrices")
    points, mats = build_weights(manifest)
    ds = load_manifest_dataset(manifest, points)
    filters = build_filters(ds, mats, manifest, args.threads)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["matrix", "stage", "I", "expected", "z", "p", "method"])
    for f, (name, W) in zip(filters, mats.items()):
        for stage, X in (("ols", ds.X), ("filtered", np.hstack([ds.X, f.vectors]))):
            r = moran_test_residuals(ds.y, X, W, method=manifest.moran_method,
                                     permutations=manifest.moran_permutations, seed=manifest.chain.seed)
            w.writerow([name, stage, _fmt(r.I), _fmt(r.expected), _fmt(r.z), _fmt(r.p_value), r.method])
    with Staging(manifest.output_dir) as out:
        out.write("moran_tests.csv", buf.getvalue())


def cmd_simulate(args) -> None:
    """Write a synthetic SAR dataset plus a ready-to-run manifest."""
    menu = standard_menu()
    W = menu[args.true_matrix]
    if args.confounded:
        data = make_confounded_data(W, rho=args.rho, seed=args.seed)
    else:
        data = make_sar_data(W, k=args.k, rho=args.rho, beta=1.0, sigma=0.5, seed=args.seed)
    out_dir = Path(args.output_dir or "simulated")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["unit_id", "year", "variable", "value"])
    for i, uid in enumerate(data.unit_ids):
        w.writerow([uid, 2015, "y", repr(float(data.y[i]))])
        for j, name in enumerate(data.names):
            w.writerow([uid, 2015, name, repr(float(data.X[i, j]))])
    variables = {"y": {"role": "outcome", "year": 2015}}
    variables |= {name: {"role": "covariate"} for name in data.names}
    manifest = {
        "label": f"synthetic-{args.true_matrix}-seed{args.seed}",
        "dataset": "panel.csv",
        "variables": variables,
        "coordinates": "package:capitals_115.csv",
        "weights": [
            {"name": "queen", "builder": "gal", "path": "package:queen_115.gal",
             "patches": "package:patches_queen.json"},
            {"name": "4nn", "builder": "knn", "k": 4},
            {"name": "6nn", "builder": "knn", "k": 6},
            {"name": "8nn", "builder": "knn", "k": 8},
            {"name": "band1500", "builder": "band", "d_max_km": 1500,
             "patches": "package:patches_band1500.json"},
            {"name": "invband1500", "builder": "inverse-band", "d_max_km": 1500,
             "patches": "package:patches_inverse1500.json"},
        ],
        "gprior": "uip",
        "chain": {"iterations": 200_000, "burn_in": 20_000, "seed": 1},
        "moran": {"method": "permutation", "permutations": 999, "top_models": 20},
        "output_dir": "out",
    }
    with Staging(out_dir) as out:
        out.write("panel.csv", buf.getvalue())
        out.write("manifest.json", json.dumps(manifest, indent=1) + "\n")


COMMANDS = {
    "weights": cmd_weights,
    "filter": cmd_filter,
    "run": cmd_run,
    "oracle": cmd_oracle,
    "moran": cmd_moran,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatial-bma", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0])
        p.add_argument("--manifest", required=True, help="run manifest (JSON)")
        p.add_argument("--seed", type=int, help="override the chain / permutation seed")
        p.add_argument("--iterations", type=int, help="MC3 iterations")
        p.add_argument("--burnin", type=int, help="MC3 burn-in iterations")
        p.add_argument("--gprior", choices=["uip", "bric"], help="g-prior")
        p.add_argument("--threads", type=int, default=1, help="worker threads for per-matrix filtering")
        p.add_argument("--output-dir", help="output directory (overrides the manifest)")
        p.add_argument("-v", "--verbose", action="store_true", help="progress logging")
    p = sub.add_parser("simulate", help="write a synthetic SAR dataset and manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--rho", type=float, default=0.6)
    p.add_argument("--true-matrix", default="8nn", choices=["queen", "4nn", "6nn", "8nn", "band1500",
                                                            "invband1500"])
    p.add_argument("--confounded", action="store_true",
                   help="replace the last covariate with a spatially smooth proxy of the disturbance")
    p.add_argument("--output-dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "simulate":
            cmd_simulate(args)
            return 0
        if args.threads < 1:
            raise ConfigurationError("--threads must be at least 1")
        manifest = RunManifest.load(args.manifest, args)
        COMMANDS[args.command](manifest, args)
    except SpatialBMAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
