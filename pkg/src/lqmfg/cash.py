"""Cash-management scenario: canned parameters, pipeline run, report artifacts.

A population of firms manages cash balances under partial observation of the
balance (a noisy log-price-style signal), steering toward a benchmark control
level r with a terminal balance target l. The scenario is scalar (n = k = 1)
and exercises every solver in the package end to end: both Riccati sweeps,
the consistency system, the per-agent filter, and the finite population.

:func:`run_cash_experiment` writes the full report bundle — delimited series,
rendered figures, the model document, and a deterministic manifest — into an
output directory, and returns the :class:`~lqmfg.serialize.RunManifest`.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import os
import time

import numpy as np

from . import errors, figures
from .consistency import solve_cc_auto
from .model import ModelParams, ValidatedModel, dump_model_dict, scalar_model, validate
from .population import PopulationResult, SimConfig, simulate_population
from .riccati import solve_P, solve_Pi
from .serialize import RunManifest, config_digest, write_csv, write_json, \
    write_manifest, write_path_csv

#: Default population size for the scenario's simulation stages.
CASH_DEFAULT_N = 100

#: Default grid resolution (dt = 0.01 over the 10-unit horizon).
CASH_DEFAULT_STEPS = 1000

#: Population sizes swept for the decay-vs-N series (every size from 2 to 100).
CASH_LADDER = tuple(range(2, 101))

#: Population sizes paired in the coupling-average error series.
CASH_PAIR = (10, 100)

#: Number of sample agents whose paths appear in the state/control series.
CASH_SAMPLE_AGENTS = 5

#: Output series emitted by run_cash_experiment, keyed by figure.
CASH_ARTIFACT_SERIES = (
    "P", "Gamma", "Pi", "states_filtering", "controls", "avg_error", "N_gap",
)

#: CSV stem -> rendered figure file.
CASH_FIGURES = {
    "P": "fig_riccati.png",
    "Gamma": "fig_riccati.png",
    "Pi": "fig_filter_variance.png",
    "states_filtering": "fig_states.png",
    "controls": "fig_controls.png",
    "avg_error": "fig_avg_error.png",
    "N_gap": "fig_state_gap.png",
}


def cash_default_params(n_steps: int = CASH_DEFAULT_STEPS) -> ModelParams:
    """The cash-management model: scalar dynamics with strong observation noise.

    State drift 0.5, control gain 0.2, coupling gain 0.5, state noise 10;
    observation drift 2.8·X + 6 with noise 4. The cost has no running state
    penalty (Q=0), unit control weight (R=1), no control-average term inside
    the cost (K=0), terminal weight M=1, and the affine extension with
    benchmark control level r=15 and terminal target l=3. Horizon T=10 from
    x0=3.5 on a 1000-step grid by default.
    """
    return scalar_model(
        A=0.5, B=0.2, B_tilde=0.5, sigma=10.0,
        F=2.8, G=6.0, H=4.0,
        Q=0.0, R=1.0, K=0.0, M=1.0,
        x0=3.5, T=10.0, n_steps=n_steps,
        r=15.0, l=3.0,
    )


@dataclasses.dataclass(frozen=True)
class CashScenario:
    """The cash scenario bound to a concrete grid resolution.

    Validation pins the structural invariants the report pipeline relies on:
    scalar state and control (n = k = 1) and the affine extension present
    (benchmark level and terminal target).
    """

    params: ModelParams
    series: tuple = CASH_ARTIFACT_SERIES

    def __post_init__(self):
        model = validate(self.params)
        if model.n != 1 or model.k != 1:
            raise errors.NotScalarModel(
                f"cash scenario is scalar, got n={model.n}, k={model.k}")
        if not model.has_affine:
            raise errors.ModelFormatError(
                "cash scenario needs the affine extension (benchmark level "
                "and terminal target)")

    def model(self) -> ValidatedModel:
        return validate(self.params)


def cash_scenario(n_steps: int = CASH_DEFAULT_STEPS) -> CashScenario:
    """The default cash scenario at the requested grid resolution."""
    return CashScenario(params=cash_default_params(n_steps))


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def _population_ladder(model, P, Pi, cc, sizes, seed, threads):
    """Aggregate-only population runs for each size, in a fixed order."""

    def run_one(size: int) -> PopulationResult:
        cfg = SimConfig(N=size, seed=seed, grid=model.grid, record_paths=False)
        return simulate_population(model, P, Pi, cc, cfg)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, sizes))
    else:
        results = [run_one(size) for size in sizes]
    return dict(zip(sizes, results))


def run_cash_experiment(n_steps: int = CASH_DEFAULT_STEPS,
                        N: int = CASH_DEFAULT_N, seed: int = 0,
                        out_dir: str = ".", threads: int | None = None,
                        render: bool = True) -> RunManifest:
    """Run the full cash pipeline and write the report bundle to ``out_dir``.

    Writes one CSV per series in :data:`CASH_ARTIFACT_SERIES`, the rendered
    figures (unless ``render`` is false), the model document
    (``cash_model.json``), and ``manifest.json``. Identical arguments produce
    byte-identical files; the manifest file carries no timing.
    """
    start = time.perf_counter()
    if threads is None:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise errors.ConfigMismatch(f"threads must be >= 1, got {threads}")
    scenario = cash_scenario(n_steps)
    model = scenario.model()
    os.makedirs(out_dir, exist_ok=True)

    P = solve_P(model)
    Pi = solve_Pi(model)
    cc = solve_cc_auto(model, P)

    main_cfg = SimConfig(N=N, seed=seed, grid=model.grid, record_paths=True)
    main = simulate_population(model, P, Pi, cc, main_cfg)

    ladder_sizes = sorted(set(CASH_LADDER) | set(CASH_PAIR))
    ladder = _population_ladder(model, P, Pi, cc, ladder_sizes, seed, threads)

    t = model.grid.nodes()
    outputs = []

    def emit_csv(name: str, header, rows) -> None:
        rows_written = write_csv(os.path.join(out_dir, f"{name}.csv"),
                                 header, rows)
        outputs.append({"path": f"{name}.csv", "rows": rows_written,
                        "figure": CASH_FIGURES.get(name)})

    rows = write_path_csv(os.path.join(out_dir, "P.csv"), "P", P)
    outputs.append({"path": "P.csv", "rows": rows, "figure": CASH_FIGURES["P"]})
    if cc.Gamma is not None:
        rows = write_path_csv(os.path.join(out_dir, "Gamma.csv"), "Gamma",
                              cc.Gamma)
        outputs.append({"path": "Gamma.csv", "rows": rows,
                        "figure": CASH_FIGURES["Gamma"]})
    rows = write_path_csv(os.path.join(out_dir, "Pi.csv"), "Pi", Pi)
    outputs.append({"path": "Pi.csv", "rows": rows,
                    "figure": CASH_FIGURES["Pi"]})

    shown = min(CASH_SAMPLE_AGENTS, N)
    sample = main.agents[:shown]
    header = ["t"]
    columns = [t]
    for idx, agent in enumerate(sample, start=1):
        header += [f"X_{idx}", f"Xhat_{idx}"]
        columns += [agent.X.values[:, 0], agent.Xhat.values[:, 0]]
    emit_csv("states_filtering", header, np.column_stack(columns))

    header = ["t"] + [f"u_{idx}" for idx in range(1, shown + 1)] + ["m"]
    columns = [t] + [agent.u.values[:, 0] for agent in sample] \
        + [cc.m.values[:, 0]]
    emit_csv("controls", header, np.column_stack(columns))

    pair_gaps = [
        np.abs(ladder[size].control_avg.values[:, 0] - cc.m.values[:, 0])
        for size in CASH_PAIR
    ]
    emit_csv("avg_error",
             ["t"] + [f"abs_gap_N{size}" for size in CASH_PAIR],
             np.column_stack([t] + pair_gaps))

    gap_rows = [(size, ladder[size].gap_metrics["state_gap_sup"],
                 ladder[size].gap_metrics["cost_gap_max"])
                for size in CASH_LADDER]
    emit_csv("N_gap", ["N", "state_gap", "cost_gap"], gap_rows)

    write_json(os.path.join(out_dir, "cash_model.json"),
               dump_model_dict(scenario.params))
    outputs.append({"path": "cash_model.json", "rows": None, "figure": None})

    if render:
        for png in _render_figures(out_dir, model, P, Pi, cc, sample, ladder):
            outputs.append({"path": png, "rows": None, "figure": None})

    digest = config_digest({
        "subcommand": "cash-example",
        "model": dump_model_dict(scenario.params),
        "N": N,
        "seed": seed,
    })
    manifest = RunManifest(subcommand="cash-example", digest=digest,
                           outputs=tuple(outputs),
                           wall_time=time.perf_counter() - start)
    write_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def _render_figures(out_dir, model, P, Pi, cc, sample, ladder) -> list:
    """Render every report figure; returns the file names written."""
    t = model.grid.nodes()
    written = []

    def path_of(name: str) -> str:
        written.append(name)
        return os.path.join(out_dir, name)

    riccati_series = [("P", P.values[:, 0, 0])]
    if cc.Gamma is not None:
        riccati_series.append(("Gamma", cc.Gamma.values[:, 0, 0]))
    figures.save_lines(path_of("fig_riccati.png"), t, riccati_series,
                       ylabel="gain",
                       title="Backward control gain and decoupling gain")

    figures.save_lines(path_of("fig_filter_variance.png"), t,
                       [("Pi", Pi.values[:, 0, 0])],
                       ylabel="filter variance",
                       title="Forward filter error variance")

    state_series, state_styles = [], []
    for idx, agent in enumerate(sample, start=1):
        color = f"C{idx - 1}"
        state_series.append((f"X_{idx}", agent.X.values[:, 0]))
        state_styles.append({"color": color})
        state_series.append((f"Xhat_{idx}", agent.Xhat.values[:, 0]))
        state_styles.append({"color": color, "linestyle": "--"})
    figures.save_lines(path_of("fig_states.png"), t, state_series,
                       styles=state_styles, ylabel="state",
                       title="States and their filters (sample agents)")

    control_series = [(f"u_{idx}", agent.u.values[:, 0])
                      for idx, agent in enumerate(sample, start=1)]
    control_styles = [{"linewidth": 0.9} for _ in control_series]
    control_series.append(("m (limit)", cc.m.values[:, 0]))
    control_styles.append({"color": "black", "linestyle": "--",
                           "linewidth": 1.8})
    figures.save_lines(path_of("fig_controls.png"), t, control_series,
                       styles=control_styles, ylabel="control",
                       title="Decentralized controls and the limiting average")

    figures.save_lines(
        path_of("fig_avg_error.png"), t,
        [(f"N={size}",
          np.abs(ladder[size].control_avg.values[:, 0] - cc.m.values[:, 0]))
         for size in CASH_PAIR],
        ylabel="|avg control - limit|",
        title="Coupling-average error for small and large populations")

    sizes = np.asarray(CASH_LADDER, dtype=float)
    gaps = np.asarray([ladder[size].gap_metrics["state_gap_sup"]
                       for size in CASH_LADDER])
    figures.save_loglog(path_of("fig_state_gap.png"), sizes,
                        [("sup-t mean squared state gap", gaps)],
                        reference_slope=-1.0, ylabel="state gap",
                        title="Comparison-state gap versus population size")
    return written
