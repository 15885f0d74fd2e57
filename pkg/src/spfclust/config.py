"""Run configuration files.

A configuration is a TOML document with four tables::

    [data]     panel, edges, truth (optional), transform = "none" | "log_rate"
    [model]    family, error_term, sum_to_zero, components, covariates, priors
    [sampler]  iterations, burn_in_fraction, c0, seed, move_probs, geometric_q,
               partition_prior_term, fixed_tree, grid_points_per_dim,
               tolerate_nonconverged, checkpoint_every
    [output]   dir, plots, diagnostics, n_draws

Relative paths are resolved against the directory of the configuration file.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError
from .laplace import LaplaceConfig
from .lgm import LatentComponent, ModelSpec, bspline_basis, monomial_basis, prior_from_dict
from .moves import MoveConfig
from .sampler import RunConfig

_TABLES = {
    "data": {"panel", "edges", "truth", "transform"},
    "model": {"family", "error_term", "sum_to_zero", "components", "covariates", "priors"},
    "sampler": {"iterations", "burn_in_fraction", "c0", "seed", "move_probs", "geometric_q",
                "partition_prior_term", "fixed_tree", "grid_points_per_dim",
                "tolerate_nonconverged", "checkpoint_every", "debug_checks"},
    "output": {"dir", "plots", "diagnostics", "n_draws"},
}


@dataclass
class Settings:
    panel: Path
    edges: Path
    truth: Path | None
    transform: str
    family: str
    error_term: bool
    sum_to_zero: bool | None
    components: list[dict]
    covariates: dict | None
    priors: dict
    iterations: int = 2000
    burn_in_fraction: float = 0.5
    c0: int = 15
    seed: int = 0
    move_probs: tuple[float, float, float, float] = (0.35, 0.35, 0.2, 0.1)
    geometric_q: float = 0.5
    partition_prior_term: bool = True
    fixed_tree: bool = False
    grid_points_per_dim: int | None = None
    tolerate_nonconverged: bool = True
    checkpoint_every: int = 100
    debug_checks: bool = False
    out_dir: Path = Path("out")
    plots: bool = True
    diagnostics: bool = True
    n_draws: int = 1000
    raw: dict = field(default_factory=dict)

    def validate(self, check_files: bool = True) -> None:
        if self.iterations < 1:
            raise ConfigError("sampler.iterations must be >= 1")
        if not (0.0 <= self.burn_in_fraction < 1.0):
            raise ConfigError("sampler.burn_in_fraction must lie in [0, 1)")
        if self.c0 < 1:
            raise ConfigError("sampler.c0 must be >= 1")
        if self.transform not in ("none", "log_rate"):
            raise ConfigError(f"data.transform must be 'none' or 'log_rate', got {self.transform!r}")
        if self.transform == "log_rate" and self.family != "gaussian":
            raise ConfigError("data.transform = 'log_rate' needs model.family = 'gaussian'")
        if self.n_draws < 1:
            raise ConfigError("output.n_draws must be >= 1")
        if check_files:
            for p in (self.panel, self.edges):
                if not p.exists():
                    raise ConfigError(f"file not found: {p}")
        # surface model errors at validation time
        try:
            self.model_spec(T=max(2, max((c.get("period", 2) for c in self.components), default=2)))
            self.run_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def covariate_basis(self, T: int):
        cov = self.covariates
        if not cov:
            return None
        kind = cov.get("kind", "monomial")
        if kind == "monomial":
            return monomial_basis(T, int(cov.get("degree", 2)))
        if kind == "bspline":
            return bspline_basis(T, int(cov.get("n_basis", 16)), int(cov.get("degree", 3)))
        raise ConfigError(f"unknown covariate kind {kind!r}")

    def model_spec(self, T: int) -> ModelSpec:
        comps = []
        for c in self.components:
            c = dict(c)
            kind = c.pop("kind", None)
            if kind is None:
                raise ConfigError("every component needs a kind")
            period = c.pop("period", None)
            name = c.pop("name", None)
            if c:
                raise ConfigError(f"unknown keys for component {kind!r}: {sorted(c)}")
            label = name or kind
            slots = {s: prior_from_dict(p) for s, p in self.priors.items() if s.endswith("_" + label)}
            comps.append(LatentComponent(kind, period, name, slots))
        extra = {}
        if "log_prec_eps" in self.priors:
            extra["eps_prior"] = prior_from_dict(self.priors["log_prec_eps"])
        if "log_prec_obs" in self.priors:
            extra["obs_prior"] = prior_from_dict(self.priors["log_prec_obs"])
        basis = self.covariate_basis(T) if any(c.kind == "fixed_effects" for c in comps) else None
        return ModelSpec(self.family, tuple(comps), T, self.error_term, basis,
                         sum_to_zero=self.sum_to_zero, **extra)

    def run_config(self) -> RunConfig:
        moves = MoveConfig.from_list(self.move_probs, q=self.geometric_q,
                                     partition_prior_term=self.partition_prior_term,
                                     fixed_tree=self.fixed_tree)
        return RunConfig(
            iterations=self.iterations, burn_in_fraction=self.burn_in_fraction, c0=self.c0,
            seed=self.seed, moves=moves,
            laplace=LaplaceConfig(grid_points_per_dim=self.grid_points_per_dim),
            tolerate_nonconverged=self.tolerate_nonconverged, debug_checks=self.debug_checks,
        )

    def echo(self) -> dict:
        """Everything that determines the chain, for trace headers."""
        data = self.raw.get("data", {})
        return {
            # paths as written, so a trace does not depend on where the run happened
            "data": {"panel": str(data.get("panel", self.panel)), "edges": str(data.get("edges", self.edges)),
                     "transform": self.transform},
            "model": {"family": self.family, "error_term": self.error_term,
                      "sum_to_zero": self.sum_to_zero, "components": self.components,
                      "covariates": self.covariates, "priors": self.priors},
            "sampler": {"iterations": self.iterations, "burn_in_fraction": self.burn_in_fraction,
                        "c0": self.c0, "seed": self.seed, "move_probs": list(self.move_probs),
                        "geometric_q": self.geometric_q, "partition_prior_term": self.partition_prior_term,
                        "fixed_tree": self.fixed_tree, "grid_points_per_dim": self.grid_points_per_dim,
                        "tolerate_nonconverged": self.tolerate_nonconverged},
        }


def _check_keys(doc: dict) -> None:
    for table, value in doc.items():
        if table not in _TABLES:
            raise ConfigError(f"unknown table [{table}]")
        if not isinstance(value, dict):
            raise ConfigError(f"[{table}] must be a table")
        unknown = set(value) - _TABLES[table]
        if unknown:
            raise ConfigError(f"unknown keys in [{table}]: {sorted(unknown)}")


def settings_from_dict(doc: dict[str, Any], base_dir: Path | None = None,
                       overrides: dict[str, Any] | None = None) -> Settings:
    _check_keys(doc)
    base = Path(".") if base_dir is None else Path(base_dir)
    data = doc.get("data", {})
    model = doc.get("model", {})
    smp = dict(doc.get("sampler", {}))
    out = dict(doc.get("output", {}))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k == "out_dir":
            out["dir"] = v
        else:
            smp[k] = v

    def path(v):
        p = Path(v)
        return p if p.is_absolute() else base / p

    if "panel" not in data or "edges" not in data:
        raise ConfigError("[data] needs panel and edges")
    family = model.get("family", "poisson")
    comps = model.get("components")
    if comps is None:
        comps = [{"kind": "intercept"}, {"kind": "rw1"}]
    if not isinstance(comps, list) or not all(isinstance(c, dict) for c in comps):
        raise ConfigError("model.components must be an array of tables")
    try:
        s = Settings(
            panel=path(data["panel"]), edges=path(data["edges"]),
            truth=path(data["truth"]) if data.get("truth") else None,
            transform=data.get("transform", "none"),
            family=family, error_term=bool(model.get("error_term", family == "poisson")),
            sum_to_zero=model.get("sum_to_zero"), components=[dict(c) for c in comps],
            covariates=model.get("covariates"), priors=dict(model.get("priors", {})),
            iterations=int(smp.get("iterations", 2000)),
            burn_in_fraction=float(smp.get("burn_in_fraction", 0.5)),
            c0=int(smp.get("c0", 15)), seed=int(smp.get("seed", 0)),
            move_probs=tuple(float(p) for p in smp.get("move_probs", (0.35, 0.35, 0.2, 0.1))),
            geometric_q=float(smp.get("geometric_q", 0.5)),
            partition_prior_term=bool(smp.get("partition_prior_term", True)),
            fixed_tree=bool(smp.get("fixed_tree", False)),
            grid_points_per_dim=smp.get("grid_points_per_dim"),
            tolerate_nonconverged=bool(smp.get("tolerate_nonconverged", True)),
            checkpoint_every=int(smp.get("checkpoint_every", 100)),
            debug_checks=bool(smp.get("debug_checks", False)),
            out_dir=path(out.get("dir", "out")), plots=bool(out.get("plots", True)),
            diagnostics=bool(out.get("diagnostics", True)), n_draws=int(out.get("n_draws", 1000)),
            raw=doc,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if len(s.move_probs) != 4:
        raise ConfigError("sampler.move_probs needs four entries (birth, death, change, hyper)")
    return s


def load_settings(path: str | Path, overrides: dict[str, Any] | None = None,
                  check_files: bool = True) -> Settings:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    s = settings_from_dict(doc, path.parent, overrides)
    s.validate(check_files)
    return s


def template_config(family: str, latent_kind: str, panel: str = "panel.csv", edges: str = "edges.csv",
                    truth: str | None = "truth.csv", iterations: int = 2000, seed: int = 0) -> str:
    """TOML text of a configuration suited to a simulated scenario."""
    if latent_kind == "polynomial":
        comps = '[{ kind = "intercept" }, { kind = "fixed_effects" }]'
        cov = '\ncovariates = { kind = "monomial", degree = 2 }'
    else:
        comps = '[{ kind = "intercept" }, { kind = "rw1" }]'
        cov = ""
    lines = [
        "[data]",
        f'panel = "{panel}"',
        f'edges = "{edges}"',
    ]
    if truth:
        lines.append(f'truth = "{truth}"')
    lines += [
        'transform = "none"',
        "",
        "[model]",
        f'family = "{family}"',
        f"error_term = {'true' if family == 'poisson' else 'false'}",
        f"components = {comps}{cov}",
        "",
        "[sampler]",
        f"iterations = {iterations}",
        "burn_in_fraction = 0.5",
        "c0 = 15",
        f"seed = {seed}",
        "move_probs = [0.35, 0.35, 0.2, 0.1]",
        "geometric_q = 0.5",
        "",
        "[output]",
        'dir = "out"',
        "plots = true",
        "diagnostics = true",
        "n_draws = 1000",
        "",
    ]
    return "\n".join(lines)
