"""Command line entry point: ``python cli.py [OPTIONS] COMMAND``.

Commands write into ``$RDP_OUTPUT_ROOT/<output.directory>/<problem>/`` and leave
the resolved configuration next to their outputs.
"""
import logging
import re
from pathlib import Path

import click
import numpy as np
import pandas as pd

from algorithms import distdp
from algorithms.perceptnet import TrainConfig
from features import daa, daa_vision, encounters, pendulum, pendulum_training
from utils import config as cfg
from utils import loader
from utils.errors import ConfigError, PrerequisiteError, RiskDesignError

logger = logging.getLogger("rdp")

FLOAT_FORMAT = "%.10g"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class CommandFailed(click.ClickException):
    def __init__(self, exc):
        super().__init__(str(exc))
        self.exit_code = exc.exit_code


class RiskDesignGroup(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except RiskDesignError as exc:
            raise CommandFailed(exc) from exc


# -- helpers -------------------------------------------------------------------


class Run:
    """Resolved config plus the artifact paths of one problem's output directory."""

    def __init__(self, config, progress=False):
        self.config = config
        self.progress = progress
        self.out = cfg.output_dir(config)
        self.out.mkdir(parents=True, exist_ok=True)
        cfg.write_resolved(config, self.out)

    @property
    def problem(self):
        return self.config["problem"]

    @property
    def jobs(self):
        return self.config["jobs"]

    def seed(self, name):
        return cfg.seed(self.config, name)

    def path(self, name):
        return self.out / name

    @property
    def table_path(self):
        return self.path("risk_table.rdp")

    @property
    def policy_path(self):
        return self.path("policy.rdp")

    @property
    def checkpoint_dir(self):
        return self.path("checkpoints")

    def write_csv(self, frame, name):
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        logger.info("wrote %s", path)
        return path

    def load_table(self):
        if not self.table_path.exists():
            raise PrerequisiteError(f"{self.problem} risk table {self.table_path}", "solve-risk")
        return loader.load_table(self.table_path)

    def load_policy(self):
        if not self.policy_path.exists():
            raise PrerequisiteError(f"DAA policy table {self.policy_path}", "solve-controller")
        return loader.load_policy(self.policy_path)

    def checkpoints(self):
        paths = sorted(self.checkpoint_dir.glob("*.rdp")) if self.checkpoint_dir.exists() else []
        if not paths:
            raise PrerequisiteError(f"network checkpoints in {self.checkpoint_dir}", "train")
        return paths


def _require_problem(run, problem, command):
    if run.problem != problem:
        raise ConfigError(f"`{command}` applies to problem {problem!r}, the config selects {run.problem!r}")


def _run_name(config):
    p = config["perception"]
    return f"{p['loss']}-{p['data']}-a{p['alpha']:g}-n{p['dataset_size']}-s{config['seeds']['train']}"


def _group_name(path):
    return re.sub(r"-s\d+$", "", path.stem)


def _pendulum_camera(config):
    p = config["pendulum"]
    return pendulum.Camera(size=p["render_size"], noise_sigma=p["noise_sigma"])


def _pendulum_grid(config):
    p = config["pendulum"]
    return pendulum.state_grid(p["theta_points"], p["omega_points"], p["omega_range"])


def _sky_camera(config):
    c = config["daa"]["camera"]
    return daa_vision.SkyCamera(size=c["size"], noise_sigma=c["noise_sigma"],
                                range_offset=config["daa"]["detection"]["range_offset"])


def _dynamics(config):
    return daa.DaaDynamics(a_max=config["daa"]["controller"]["a_max"])


def _detection_model(config):
    return daa.DetectionModel(**config["daa"]["detection"])


def _train_config(config):
    p = config["perception"]
    return TrainConfig(epochs=p["epochs"], batch_size=p["batch_size"], lr=p["lr"], loss=p["loss"],
                       lam=p["lam"], alpha=p["alpha"], seed=config["seeds"]["train"])


def _needs_table(config):
    p = config["perception"]
    return p["loss"] == "risk" or p["data"] == "risk_weighted"


# -- commands ------------------------------------------------------------------


@click.group(cls=RiskDesignGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path),
              help="Experiment TOML file layered over the packaged defaults.")
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Override one config value; repeatable.")
@click.option("--jobs", type=int, help="Worker cap for parallel solves and simulations.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.option("--progress", is_flag=True, help="Show progress bars.")
@click.pass_context
def cli(ctx, config_path, overrides, jobs, verbose, progress):
    """Risk-driven design of perception systems."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)
    overrides = list(overrides) + ([f"jobs={jobs}"] if jobs is not None else [])
    ctx.obj = {"config_path": config_path, "overrides": overrides, "progress": progress}


def _open_run(ctx, stage):
    obj = ctx.obj
    config = cfg.load_config(obj["config_path"], obj["overrides"])
    config["stage"] = stage
    return Run(config, obj["progress"])


@cli.command("solve-risk")
@click.pass_context
def solve_risk(ctx):
    """Solve the risk table of the configured problem."""
    run = _open_run(ctx, "solve-risk")
    atoms = run.config["risk"]["cost_atoms"]
    if run.problem == "pendulum":
        p = run.config["pendulum"]
        error_model = pendulum.pendulum_error_model(p["error_atoms"], p["error_atoms"], p["sigma_theta"], p["sigma_omega"])
        mdp = pendulum.build_pendulum_mdp(pendulum.PendulumParams(), p["horizon"], _pendulum_grid(run.config), error_model)
        table = distdp.solve(mdp, pendulum.pendulum_cost_support(atoms), keep_slices="last", jobs=run.jobs)
        report = table.report
    else:
        policy = run.load_policy()
        table, full = encounters.build_marginal_risk_table(
            policy, _detection_model(run.config), run.config["encounters"]["occupancy"], run.seed("solve"),
            _dynamics(run.config), atoms, run.jobs)
        loader.save_table(full, run.path("risk_table_full.rdp"))
        report = full.report
    loader.save_table(table, run.table_path)
    run.write_csv(pd.DataFrame([report.as_row()]), "solver_report.csv")
    if report.clamped:
        click.echo(f"warning: {report.clamped} cells had cost mass clamped to the support range", err=True)
    click.echo(f"solved {run.problem} risk table in {report.wall_time:.2f}s -> {run.table_path}")


@cli.command("solve-controller")
@click.pass_context
def solve_controller(ctx):
    """Solve the DAA advisory table."""
    run = _open_run(ctx, "solve-controller")
    _require_problem(run, "daa", "solve-controller")
    c = run.config["daa"]["controller"]
    costs = daa.ControllerCostConfig(c["nmac_cost"], c["nmac_threshold"], c["alert_cost"], c["reversal_cost"])
    policy = daa.solve_controller(costs, _dynamics(run.config))
    loader.save_policy(policy, run.policy_path)
    run.write_csv(daa.policy_slice(policy), "policy_slice.csv")
    click.echo(f"solved DAA policy -> {run.policy_path}")


@cli.command()
@click.pass_context
def train(ctx):
    """Train one perception network as configured."""
    run = _open_run(ctx, "train")
    p = run.config["perception"]
    table = run.load_table() if _needs_table(run.config) else None
    train_config = _train_config(run.config)
    name = _run_name(run.config)
    meta = {"run": name, "loss": p["loss"], "data": p["data"], "alpha": p["alpha"], "lam": p["lam"]}
    row = {"run": name}
    if run.problem == "pendulum":
        camera = _pendulum_camera(run.config)
        dataset = pendulum_training.generate_dataset(
            p["data"], p["dataset_size"], table, p["alpha"], camera, run.seed("data"), _pendulum_grid(run.config))
        net = pendulum_training.new_net(camera, p["hidden"], run.seed("train"))
        net, report = pendulum_training.train(net, dataset, train_config, table, run.progress)
    else:
        camera = _sky_camera(run.config)
        dataset = daa_vision.generate_detection_dataset(
            p["data"], p["dataset_size"], table, p["alpha"], camera, run.seed("data"), p["negative_fraction"])
        net = daa_vision.new_detector(camera, p["hidden"], run.seed("train"))
        net, report = daa_vision.train_detector(net, dataset, train_config, table, camera, run.progress)
        validation = daa_vision.generate_detection_dataset(
            "uniform", run.config["encounters"]["validation_size"], camera=camera, seed=run.seed("evaluate"),
            negative_fraction=p["negative_fraction"], inside_fov=True)
        row["precision"], row["recall"] = daa_vision.precision_recall(daa_vision.Detector(net, camera), validation)
    path = loader.save_net(net, run.checkpoint_dir / f"{name}.rdp", meta)
    run.write_csv(pd.DataFrame({"epoch": np.arange(1, len(report.trace) + 1), "loss": report.trace}),
                  f"traces/train_{name}.csv")
    run.write_csv(pd.DataFrame([{**row, **report.as_row()}]), f"traces/report_{name}.csv")
    click.echo(f"trained {name} (final loss {report.final_loss:.6g}) -> {path}")


def _evaluate_pendulum(run):
    p = run.config["pendulum"]
    camera = _pendulum_camera(run.config)
    estimators = {"perfect": pendulum_training.PerfectEstimator()}
    for path in run.checkpoints():
        net, _ = loader.load_net(path)
        estimators[path.stem] = pendulum_training.NetEstimator(net)
    rows = []
    for name, estimator in estimators.items():
        result = pendulum_training.evaluate_mttf(estimator, p["eval_trajectories"], p["eval_horizon"], p["eval_trials"],
                                                 run.seed("evaluate"), camera, run.jobs)
        row = {"estimator": name, "mttf_mean": result.mean, "mttf_se": result.se}
        row.update({f"trial_{k + 1}": m for k, m in enumerate(result.trial_means)})
        rows.append(row)
        click.echo(f"{name}: MTTF {result}")
    run.write_csv(pd.DataFrame(rows), "mttf.csv")


def _evaluate_daa(run):
    policy = run.load_policy()
    table = run.load_table()
    camera = _sky_camera(run.config)
    e = run.config["encounters"]
    groups = {}
    for path in run.checkpoints():
        net, _ = loader.load_net(path)
        groups.setdefault(_group_name(path), []).append(
            encounters.DetectorPerceiver(daa_vision.Detector(net, camera)))
    perceivers = {"perfect": encounters.PerfectPerceiver(),
                  "stochastic": encounters.StochasticPerceiver(_detection_model(run.config))}
    for name, members in groups.items():
        if len(members) != e["trials"]:
            logger.warning("%s has %d checkpoints for %d trials; reusing the first", name, len(members), e["trials"])
            members = members[0]
        perceivers[name] = members
    validation = daa_vision.generate_detection_dataset(
        "uniform", e["validation_size"], camera=camera, seed=run.seed("evaluate"),
        negative_fraction=run.config["perception"]["negative_fraction"], inside_fov=True)
    report = encounters.evaluate_suite(policy, perceivers, e["count"], e["trials"], run.seed("encounters"), table,
                                       run.config["perception"]["alpha"], validation, _dynamics(run.config),
                                       run.jobs, run.progress)
    run.write_csv(report.nmac, "nmac.csv")
    run.write_csv(report.summary, "encounter_summary.csv")
    cdfs = [report.cdf(name).assign(perceiver=name) for name in perceivers]
    run.write_csv(pd.concat(cdfs, ignore_index=True), "risk_cdf.csv")
    for row in report.summary.itertuples():
        click.echo(f"{row.perceiver}: {row.nmac_mean:.1f} ± {row.nmac_se:.1f} NMACs")


@cli.command()
@click.pass_context
def evaluate(ctx):
    """MTTF of pendulum checkpoints, or the encounter suite for DAA detectors."""
    run = _open_run(ctx, "evaluate")
    if run.problem == "pendulum":
        _evaluate_pendulum(run)
    else:
        _evaluate_daa(run)


@cli.command("encounters")
@click.option("--traces", default=3, show_default=True, help="Encounters whose per-step traces are written.")
@click.pass_context
def encounters_cmd(ctx, traces):
    """Simulate encounters under perfect, missing and notional perception."""
    run = _open_run(ctx, "encounters")
    _require_problem(run, "daa", "encounters")
    policy = run.load_policy()
    table = run.load_table() if run.table_path.exists() else None
    if table is None:
        logger.info("no risk table yet; per-step risks are left empty")
    e = run.config["encounters"]
    perceivers = {"perfect": encounters.PerfectPerceiver(), "never": encounters.NeverDetect(),
                  "stochastic": encounters.StochasticPerceiver(_detection_model(run.config))}
    features = [enc.features for enc in encounters.sample_encounters(e["count"], run.seed("encounters"))]
    rows = []
    for name, perceiver in perceivers.items():
        results = encounters.simulate_many(policy, perceiver, e["count"], run.seed("encounters"), table,
                                           run.config["perception"]["alpha"], _dynamics(run.config), run.jobs,
                                           run.progress)
        for k, (result, f) in enumerate(zip(results, features)):
            rows.append({"encounter": k, "perceiver": name, "nmac": int(result.nmac), **vars(f)})
            if k < traces:
                run.write_csv(result.to_frame(), f"traces/encounter_{k:03d}_{name}.csv")
        click.echo(f"{name}: {sum(r.nmac for r in results)} NMACs in {e['count']} encounters")
    run.write_csv(pd.DataFrame(rows), "encounters.csv")


@cli.command("export-field")
@click.option("--what", type=click.Choice(["weight", "risk", "policy", "detection"]), default="weight",
              show_default=True)
@click.option("--alpha", type=float, default=0.0, show_default=True)
@click.pass_context
def export_field(ctx, what, alpha):
    """Dump a weight field, risk slices, the policy slice or the detection model as a CSV grid."""
    run = _open_run(ctx, "export-field")
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"alpha must lie in [0, 1), got {alpha}")
    if what == "policy":
        _require_problem(run, "daa", "export-field --what policy")
        frame = daa.policy_slice(run.load_policy())
    elif what == "detection":
        _require_problem(run, "daa", "export-field --what detection")
        frame = daa.detection_table(_detection_model(run.config))
    else:
        table = run.load_table()
        points = table.grid.points()
        frame = pd.DataFrame(points, columns=list(table.grid.names))
        if what == "weight":
            frame["weight"] = distdp.risk_weight_field(table, alpha).ravel()
        else:
            risks = table.cvar_field(alpha).reshape(len(points), table.n_errors)
            for e, atom in enumerate(table.errors):
                frame["risk[" + ",".join(f"{x:g}" for x in atom) + "]"] = risks[:, e]
    run.write_csv(frame, f"fields/{what}_a{alpha:g}.csv")


@cli.command()
@click.pass_context
def dashboard(ctx):
    """Print how to open the results viewer on this output directory."""
    config = cfg.load_config(ctx.obj["config_path"], ctx.obj["overrides"])
    out = cfg.output_dir(config)
    click.echo(f"{cfg.OUTPUT_ROOT_ENV}={out.parent.parent} streamlit run app.py")
    click.echo(f"then pick directory {out.parent} and problem {config['problem']!r}")


if __name__ == "__main__":
    cli()
