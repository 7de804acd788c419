"""End-to-end checks of the command-line interface.

Commands run in process through colflux.cli.main so exit codes, stdout,
stderr, and written artifacts can all be asserted without spawning
interpreters. Producer commands run once per module into a shared
workspace; the heavier closed-loop commands use a two-event scenario and
a shortened benchmark horizon to stay fast.
"""

import json
import shutil

import matplotlib.pyplot as plt
import numpy as np
import pytest

from colflux import policy as policy_io
from colflux.cli import main
from colflux.column import ColumnParams
from colflux.diffsim import Trajectory
from colflux.manifest import RunManifest, file_sha256
from colflux.plots import _columns, _control_figure, _temperature_figure
from colflux.presets import PRESETS, ScalePreset
from colflux.sampling import InitialConditionPool, NoisePool, RegionData, load_table
from colflux.scenarios import (
    DisturbanceSequence,
    EvalReport,
    control_noise_envelope,
    cumulative_objective,
    generate_disturbance_sequence,
    simulate_closed_loop,
)
from colflux.training import Phase, TrainRecord

# Steady-state product compositions, frozen from the standalone collocation
# solution used throughout the test suite.
X_BOTTOM_SS = 0.008737589846146837
X_TOP_SS = 0.9893012827680072


def stderr_json(capsys) -> dict:
    """Parse the machine-readable failure line from captured stderr."""
    err = capsys.readouterr().err.strip().splitlines()
    assert err, "expected an error line on stderr"
    return json.loads(err[-1])


@pytest.fixture(scope="module")
def micro_env():
    """Tiny scale tier plus a clean seed environment for CLI runs."""
    mp = pytest.MonkeyPatch()
    mp.delenv("COLFLUX_SEED", raising=False)
    mp.setitem(
        PRESETS,
        "micro",
        ScalePreset(
            name="micro",
            phases=(Phase(3, 1, 1.0),),
            pool_size=16,
            t_f=0.25,
            n_events=2,
        ),
    )
    yield
    mp.undo()


@pytest.fixture(scope="module")
def work(tmp_path_factory, micro_env, region_run):
    """Shared workspace: scenario, region log, pools, and a trained policy."""
    root = tmp_path_factory.mktemp("cli")
    seq = DisturbanceSequence(
        times=[15.0, 15.5],
        channels=[0, 1],
        levels=[1.1, 0.45],
        duration=17.0,
        seed=99,
    )
    seq.to_csv(root / "seq.csv")
    _, region, _ = region_run
    region.to_csv(root / "region.csv")
    rc = main([
        "pools", "--region", str(root / "region.csv"), "--n", "32",
        "--seed", "2", "--noise-seed", "3", "--out-dir", str(root / "pools"),
    ])
    assert rc == 0
    rc = main([
        "train", "--policy", "all", "--preset", "micro",
        "--pools", str(root / "pools"), "--init-seed", "4", "--draw-seed", "5",
        "--workers", "1", "--out-dir", str(root / "trained"),
    ])
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def mpc_csv(work):
    """Benchmark trajectory written by the mpc-run command."""
    out = work / "mpc.csv"
    rc = main([
        "mpc-run", "--sequence", str(work / "seq.csv"),
        "--out", str(out), "--stride", "4", "--mpc-horizon", "10",
    ])
    assert rc == 0
    return out


class TestSteadyState:
    def test_prints_product_compositions(self, capsys):
        assert main(["steady-state", "--workers", "2"]) == 0
        lines = capsys.readouterr().out.splitlines()
        x_bottom = float(lines[0].split("=")[1])
        x_top = float(lines[1].split("=")[1])
        assert abs(x_bottom - X_BOTTOM_SS) < 1e-9
        assert abs(x_top - X_TOP_SS) < 1e-9

    def test_profile_export_with_manifest(self, tmp_path):
        out = tmp_path / "profile.csv"
        assert main(["steady-state", "--out", str(out)]) == 0
        _, names, arr = load_table(out)
        assert names == ["stage", "M", "x", "T"]
        assert arr.shape == (25, 4)
        assert abs(arr[0, 2] - X_BOTTOM_SS) < 1e-12
        assert abs(arr[-1, 2] - X_TOP_SS) < 1e-12

        man = RunManifest.load(tmp_path / "profile.csv.manifest.json")
        assert man.command[:2] == ("colflux", "steady-state")
        assert man.artifacts == {"profile.csv": file_sha256(out)}
        assert man.config["params"]["zF0"] == 0.5


class TestConfigPrecedence:
    def run_with(self, tmp_path, extra):
        out = tmp_path / "ss.csv"
        assert main(["steady-state", "--out", str(out)] + extra) == 0
        man = RunManifest.load(tmp_path / "ss.csv.manifest.json")
        return man.config["params"]

    def test_flag_beats_file_beats_default(self, tmp_path):
        cfg = tmp_path / "params.json"
        cfg.write_text(json.dumps({"zF0": 0.6, "alpha": 2.0}))
        params = self.run_with(
            tmp_path, ["--params", str(cfg), "--set", "zF0=0.55"]
        )
        assert params["zF0"] == 0.55
        assert params["alpha"] == 2.0
        assert params["F0"] == 1.0

    def test_file_overrides_defaults(self, tmp_path):
        cfg = tmp_path / "params.json"
        cfg.write_text(json.dumps({"zF0": 0.6}))
        params = self.run_with(tmp_path, ["--params", str(cfg)])
        assert params["zF0"] == 0.6

    def test_set_parses_json_values(self, tmp_path):
        params = self.run_with(tmp_path, ["--set", "u_max=[2.8,3.3]"])
        assert params["u_max"] == [2.8, 3.3]

    def test_unknown_parameter_rejected(self, capsys):
        assert main(["steady-state", "--set", "bogus=1"]) == 2
        doc = stderr_json(capsys)
        assert doc["error"] == "ValueError"
        assert "bogus" in doc["message"]

    def test_malformed_set_rejected(self, capsys):
        assert main(["steady-state", "--set", "zF0"]) == 2
        assert "key=value" in stderr_json(capsys)["message"]

    def test_missing_params_file(self, capsys):
        assert main(["steady-state", "--params", "/no/such/file.json"]) == 2
        assert stderr_json(capsys)["error"] == "FileNotFoundError"

    def test_unparseable_params_file(self, tmp_path, capsys):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{not json")
        assert main(["steady-state", "--params", str(cfg)]) == 2
        assert stderr_json(capsys)["error"] == "JSONDecodeError"


class TestErrorReporting:
    def test_failure_line_is_machine_readable(self, capsys):
        rc = main(["steady-state", "--params", "/no/such/file.json"])
        doc = stderr_json(capsys)
        assert set(doc) == {"error", "message", "exit"}
        assert doc["exit"] == rc == 2

    def test_runtime_failures_exit_one(self, tmp_path, capsys):
        # A region log that ends before the start-up window leaves nothing
        # to sample from, which is a runtime failure rather than bad usage.
        region = RegionData(
            t=np.linspace(0.0, 10.0, 40),
            temperatures=np.full((40, 25), 350.0),
            holdups=np.full((40, 25), 0.5),
            feed=np.tile([1.0, 0.5, 1.0], (40, 1)),
        )
        region.to_csv(tmp_path / "early.csv")
        rc = main([
            "pools", "--region", str(tmp_path / "early.csv"),
            "--n", "8", "--out-dir", str(tmp_path / "pools"),
        ])
        assert rc == 1
        assert stderr_json(capsys)["error"] == "PoolBuildError"

    def test_missing_required_argument(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["region"])
        assert exc.value.code == 2
        capsys.readouterr()

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == 2
        capsys.readouterr()


class TestGenDisturbances:
    def test_writes_loadable_sequence(self, tmp_path, capsys):
        out = tmp_path / "seq.csv"
        rc = main(["gen-disturbances", "--seed", "7", "--events", "6",
                   "--out", str(out)])
        assert rc == 0
        assert "events=6" in capsys.readouterr().out
        seq = DisturbanceSequence.from_csv(out)
        assert seq.n_events == 6
        man = RunManifest.load(tmp_path / "seq.csv.manifest.json")
        assert man.seeds == {"sequence": 7}

    def test_same_seed_reproduces_bytes(self, tmp_path, monkeypatch):
        argv = ["gen-disturbances", "--seed", "7", "--events", "6",
                "--out", "seq7.csv"]
        digests = []
        blobs = []
        for sub in ("a", "b"):
            d = tmp_path / sub
            d.mkdir()
            monkeypatch.chdir(d)
            assert main(argv) == 0
            blobs.append((d / "seq7.csv").read_bytes())
            digests.append(RunManifest.load(d / "seq7.csv.manifest.json").digest())
        assert blobs[0] == blobs[1]
        assert digests[0] == digests[1]

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("COLFLUX_SEED", "5")
        out = tmp_path / "seq.csv"
        assert main(["gen-disturbances", "--events", "4", "--out", str(out)]) == 0
        man = RunManifest.load(tmp_path / "seq.csv.manifest.json")
        # Base seed 5 plus the fixed offset for test sequences.
        assert man.seeds == {"sequence": 6}
        got = DisturbanceSequence.from_csv(out)
        want = generate_disturbance_sequence(seed=6, n_events=4)
        assert np.array_equal(got.times, want.times)
        assert np.array_equal(got.channels, want.channels)
        assert np.array_equal(got.levels, want.levels)
        assert got.duration == want.duration

    def test_env_seed_must_be_integer(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("COLFLUX_SEED", "abc")
        rc = main(["gen-disturbances", "--events", "4",
                   "--out", str(tmp_path / "seq.csv")])
        assert rc == 2
        assert "COLFLUX_SEED" in stderr_json(capsys)["message"]


class TestRegion:
    def test_region_log_and_quantiles(self, work):
        out = work / "region_cli.csv"
        rc = main([
            "region", "--sequence", str(work / "seq.csv"),
            "--out", str(out), "--mpc-horizon", "10",
        ])
        assert rc == 0
        region = RegionData.from_csv(out)
        # 17 minutes on a 0.005 grid logged every 0.1 minutes.
        assert region.t.size == 3400 // 20 + 1
        assert region.n_stages == 25
        p = ColumnParams()
        assert np.all(region.temperatures >= p.T_bL)
        assert np.all(region.temperatures <= p.T_bH)

        qpath = work / "region_cli-quantiles.csv"
        _, names, arr = load_table(qpath)
        assert arr.shape == (7, 51)
        assert names[0] == "q"
        man = RunManifest.load(work / "region_cli.csv.manifest.json")
        assert set(man.artifacts) == {"region_cli.csv", "region_cli-quantiles.csv"}
        assert man.inputs == {"sequence": file_sha256(work / "seq.csv")}


class TestPools:
    def test_artifacts_and_manifest(self, work):
        pool = InitialConditionPool.from_csv(work / "pools" / "initial_pool.csv")
        assert len(pool) == 32
        assert pool.meta["seed"] == "2"
        noise = NoisePool.from_csv(work / "pools" / "noise_pool.csv")
        assert len(noise) == 32
        assert np.any(noise.eta != 0.0)
        zero = NoisePool.from_csv(work / "pools" / "noise_zero.csv")
        assert np.all(zero.eta == 0.0)

        man = RunManifest.load(work / "pools" / "manifest.json")
        assert man.seeds == {"initial_pool": 2, "noise_pool": 3}
        assert man.inputs == {"region": file_sha256(work / "region.csv")}
        assert set(man.artifacts) == {
            "initial_pool.csv", "noise_pool.csv", "noise_zero.csv",
        }

    def test_rerun_reproduces_bytes(self, work, tmp_path, monkeypatch):
        argv = ["pools", "--region", "region.csv", "--n", "32",
                "--seed", "2", "--noise-seed", "3", "--out-dir", "out"]
        names = ("initial_pool.csv", "noise_pool.csv", "noise_zero.csv")
        blobs = []
        digests = []
        for sub in ("a", "b"):
            d = tmp_path / sub
            d.mkdir()
            shutil.copy(work / "region.csv", d / "region.csv")
            monkeypatch.chdir(d)
            assert main(argv) == 0
            blobs.append([(d / "out" / n).read_bytes() for n in names])
            digests.append(RunManifest.load(d / "out" / "manifest.json").digest())
        assert blobs[0] == blobs[1]
        assert digests[0] == digests[1]


class TestTrain:
    def test_plain_training_artifacts(self, work):
        pol = policy_io.load(work / "trained" / "policy.json")
        assert pol.spec.input_slots == tuple(range(30))
        assert pol.spec.hidden == (30,)
        meta = policy_io.load_meta(work / "trained" / "policy.json")
        assert meta["policy"] == "all"
        assert meta["preset"] == "micro"

        record = TrainRecord.from_csv(work / "trained" / "record.csv")
        assert record.objective.size == 3
        assert np.all(np.isfinite(record.objective))

        man = RunManifest.load(work / "trained" / "manifest.json")
        assert man.seeds == {"init": 4, "draws": 5}
        assert set(man.artifacts) == {"policy.json", "record.csv"}

    def test_worker_count_does_not_change_artifacts(self, work):
        rc = main([
            "train", "--policy", "all", "--preset", "micro",
            "--pools", str(work / "pools"), "--init-seed", "4",
            "--draw-seed", "5", "--workers", "2",
            "--out-dir", str(work / "trained_w2"),
        ])
        assert rc == 0
        for name in ("policy.json", "record.csv"):
            got = (work / "trained_w2" / name).read_bytes()
            want = (work / "trained" / name).read_bytes()
            assert got == want

    def test_regularized_training_selects_and_freezes(self, work, capsys):
        rc = main([
            "train", "--policy", "reg", "--preset", "micro",
            "--pools", str(work / "pools"), "--init-seed", "4",
            "--draw-seed", "5", "--workers", "1",
            "--out-dir", str(work / "trained_reg"),
        ])
        assert rc == 0
        assert "selected measurements" in capsys.readouterr().out
        meta = policy_io.load_meta(work / "trained_reg" / "policy.json")
        selected = meta["selected"]
        assert selected
        assert all(1 <= s <= 30 for s in selected)
        pol = policy_io.load(work / "trained_reg" / "policy.json")
        assert pol.h_frozen.all()
        assert set(np.nonzero(pol.h)[0] + 1) == set(selected)


class TestMpcRun:
    def test_trajectory_and_manifest(self, mpc_csv, work):
        traj = Trajectory.from_csv(mpc_csv)
        # 3401 grid nodes written at stride 4.
        assert traj.t.size == 851
        assert abs(traj.spacing - 0.02) < 1e-12
        p = ColumnParams()
        assert np.all(traj.controls >= 0.0)
        assert np.all(traj.controls[:, 0] <= p.u_max[0])
        assert np.all(traj.controls[:, 1] <= p.u_max[1])
        assert traj.feed is not None
        assert np.all(traj.stage_cost >= 0.0)

        man = RunManifest.load(work / "mpc.csv.manifest.json")
        assert man.inputs == {"sequence": file_sha256(work / "seq.csv")}
        obj = man.config["options"]["objective"]
        assert np.isfinite(obj) and obj > 0.0


class TestEvaluate:
    def test_nominal_scores_match_direct_simulation(self, work, tmp_path, capsys):
        bare = tmp_path / "bare.json"
        policy_io.save(policy_io.load(work / "trained" / "policy.json"), bare)
        out = tmp_path / "eval.csv"
        rc = main([
            "evaluate", "--policies", str(work / "trained" / "policy.json"),
            str(bare), "--sequence", str(work / "seq.csv"),
            "--mode", "nominal", "--out", str(out),
            "--traj-dir", str(tmp_path / "traj"),
        ])
        assert rc == 0
        shown = capsys.readouterr().out
        assert "all" in shown and "bare" in shown

        report = EvalReport.from_csv(out)
        assert report.meta["mode"] == "nominal"
        assert report.meta["sequence_seed"] == "99"
        # Named from embedded metadata when present, file stem otherwise.
        v_all = report.value("all", "nominal")
        assert v_all == report.value("bare", "nominal")

        seq = DisturbanceSequence.from_csv(work / "seq.csv")
        pol = policy_io.load(work / "trained" / "policy.json")
        direct = simulate_closed_loop(pol, seq, ColumnParams())
        assert v_all == cumulative_objective(direct, seq.start)

        saved = Trajectory.from_csv(tmp_path / "traj" / "all-nominal.csv")
        assert saved.feed is not None
        assert saved.t.size == direct.t.size

    def test_noise_modes_score_finitely(self, work, tmp_path):
        for mode in ("bias", "extreme", "mismatch"):
            out = tmp_path / f"{mode}.csv"
            rc = main([
                "evaluate", "--policies", str(work / "trained" / "policy.json"),
                "--sequence", str(work / "seq.csv"), "--mode", mode,
                "--seed", "11", "--out", str(out),
            ])
            assert rc == 0
            report = EvalReport.from_csv(out)
            value = report.value("all", mode)
            assert np.isfinite(value) and value > 0.0

    def test_avg_bias_averages_seeded_draws(self, work, tmp_path):
        out = tmp_path / "avg.csv"
        rc = main([
            "evaluate", "--policies", str(work / "trained" / "policy.json"),
            "--sequence", str(work / "seq.csv"), "--mode", "avg-bias",
            "--seed", "11", "--draws", "2", "--out", str(out),
        ])
        assert rc == 0
        got = EvalReport.from_csv(out).value("all", "avg-bias")

        seq = DisturbanceSequence.from_csv(work / "seq.csv")
        pol = policy_io.load(work / "trained" / "policy.json")
        vals = []
        for child in np.random.SeedSequence(11).spawn(2):
            traj = simulate_closed_loop(
                pol, seq, ColumnParams(), noise_mode="constant_bias",
                seed=int(child.generate_state(1)[0]),
            )
            vals.append(cumulative_objective(traj, seq.start))
        assert got == pytest.approx(np.mean(vals), rel=1e-12)

    def test_missing_policy_is_usage_error(self, work, tmp_path, capsys):
        rc = main([
            "evaluate", "--policies", str(tmp_path / "nope.json"),
            "--sequence", str(work / "seq.csv"),
            "--out", str(tmp_path / "eval.csv"),
        ])
        assert rc == 2
        assert stderr_json(capsys)["error"] == "FileNotFoundError"

    def test_unknown_mode_rejected(self, work, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main([
                "evaluate", "--policies", str(work / "trained" / "policy.json"),
                "--sequence", str(work / "seq.csv"), "--mode", "sideways",
                "--out", str(tmp_path / "eval.csv"),
            ])
        assert exc.value.code == 2
        capsys.readouterr()


class TestTable4:
    def test_summary_rows_and_render(self, work, tmp_path, capsys):
        out = tmp_path / "table.csv"
        rc = main([
            "table4", "--policies",
            f"tiny={work / 'trained' / 'policy.json'}",
            "--sequence", str(work / "seq.csv"), "--seed", "1",
            "--draws", "2", "--mpc-horizon", "10", "--out", str(out),
        ])
        assert rc == 0
        shown = capsys.readouterr().out
        assert "controller" in shown and "mpc" in shown

        report = EvalReport.from_csv(out)
        for mode in ("no_noise", "constant_bias", "constant_bias_mean"):
            assert np.isfinite(report.value("tiny", mode))
        assert np.isfinite(report.value("mpc", "no_noise"))
        with pytest.raises(KeyError):
            report.value("mpc", "constant_bias")

    def test_malformed_policy_spec(self, work, tmp_path, capsys):
        rc = main([
            "table4", "--policies", "tiny", "--sequence", str(work / "seq.csv"),
            "--out", str(tmp_path / "table.csv"),
        ])
        assert rc == 2
        assert "name=path" in stderr_json(capsys)["message"]


class TestPlot:
    def test_temperature_svg_is_reproducible(self, mpc_csv, tmp_path):
        blobs = []
        for name in ("p1.svg", "p2.svg"):
            out = tmp_path / name
            rc = main(["plot", "--traj", str(mpc_csv), "--kind", "temperatures",
                       "--out", str(out)])
            assert rc == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]
        assert b"<svg" in blobs[0]
        man = RunManifest.load(tmp_path / "p1.svg.manifest.json")
        assert man.artifacts == {"p1.svg": file_sha256(tmp_path / "p1.svg")}

    def test_temperature_axes_pinned_to_boiling_range(self, mpc_csv):
        fig = _temperature_figure(_columns(mpc_csv), ColumnParams())
        try:
            assert fig.axes[0].get_ylim() == (341.0, 358.0)
        finally:
            plt.close(fig)

    def test_control_band_requires_envelope_columns(self, mpc_csv, work, tmp_path):
        p = ColumnParams()
        fig = _control_figure(_columns(mpc_csv), p)
        try:
            assert len(fig.axes[0].collections) == 0
        finally:
            plt.close(fig)

        pol = policy_io.load(work / "trained" / "policy.json")
        traj = Trajectory.from_csv(mpc_csv).subsample(50)
        env = control_noise_envelope(pol, traj, p, n_draws=8, seed=0)
        env_csv = tmp_path / "envelope.csv"
        env.to_csv(env_csv)
        fig = _control_figure(_columns(env_csv), p)
        try:
            assert len(fig.axes[0].collections) == 2
            labels = fig.axes[0].get_legend_handles_labels()[1]
            assert "reflux noise range" in labels
        finally:
            plt.close(fig)

        out = tmp_path / "controls.svg"
        rc = main(["plot", "--traj", str(env_csv), "--kind", "controls",
                   "--out", str(out)])
        assert rc == 0
        assert b"<svg" in out.read_bytes()

    def test_plot_rejects_wrong_columns(self, work, tmp_path, capsys):
        rc = main(["plot", "--traj", str(work / "region.csv"),
                   "--kind", "controls", "--out", str(tmp_path / "x.svg")])
        assert rc == 2
        assert stderr_json(capsys)["error"] == "ValueError"

    def test_plot_missing_input(self, tmp_path, capsys):
        rc = main(["plot", "--traj", str(tmp_path / "nope.csv"),
                   "--out", str(tmp_path / "x.svg")])
        assert rc == 2
        capsys.readouterr()

    def test_unknown_kind_rejected(self, mpc_csv, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["plot", "--traj", str(mpc_csv), "--kind", "spectrogram",
                  "--out", str(tmp_path / "x.svg")])
        assert exc.value.code == 2
        capsys.readouterr()
