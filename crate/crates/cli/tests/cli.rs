//! End-to-end subcommand tests: every artifact written by one subcommand
//! must load in the next, exit statuses must distinguish failure classes,
//! and the shipped example configs must run (or at least parse).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{dmatrix, DMatrix, DVector};
use tempfile::TempDir;

use ren_synth::activation::{Activation, Nonlinearity};
use ren_synth::io;
use ren_synth::plant::{PlantLti, PlantModel, PlantSector};
use ren_synth::ren::{RenDims, TransformedRenParams};
use ren_synth::stability::{ClosedLoop, StabilityCertificate};
use ren_synth::sysid::SysidDataset;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rensynth"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn examples_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples")
}

fn write_lti_plant(path: &Path, a: f64) {
    let lti = PlantLti::new(dmatrix![a], dmatrix![0.2], dmatrix![1.0]).unwrap();
    io::save_plant(path, &PlantModel::Sector(PlantSector::from_lti(&lti))).unwrap();
}

fn write_zero_controller(path: &Path, n_phi: usize) {
    let phi = Nonlinearity::uniform(Activation::Tanh, n_phi).normalized().unwrap();
    let ctrl = TransformedRenParams::zeros(
        RenDims { n_xi: 1, n_phi, n_u: 1, n_y: 1 },
        phi,
    )
    .unwrap();
    io::save_controller(path, &ctrl).unwrap();
}

#[test]
fn smoke_config_trains_quickly_and_its_artifacts_round_trip() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let cfg = examples_dir().join("smoke.cfg");
    let started = std::time::Instant::now();
    let result = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&result, 0);
    assert!(
        started.elapsed().as_secs() < 10,
        "smoke config took {:?}",
        started.elapsed()
    );

    let history = io::read_history_csv(&out.join("history.csv")).unwrap();
    assert_eq!(history.len(), 6); // initial sample + 5 iterations
    let svg = std::fs::read_to_string(out.join("reward.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));

    // The artifacts reload and agree with each other.
    let plant = match io::load_plant(&out.join("plant.toml")).unwrap() {
        PlantModel::Sector(p) => p,
        other => panic!("expected a sector plant, got {other:?}"),
    };
    let ctrl = io::load_controller(&out.join("controller.toml")).unwrap();
    let artifact = io::load_certificate(&out.join("certificate.toml")).unwrap();
    assert_eq!(
        artifact.plant_hash.as_deref(),
        Some(io::file_sha256(&out.join("plant.toml")).unwrap().as_str())
    );
    let cl = ClosedLoop::assemble(&plant, &ctrl).unwrap();
    artifact.certificate.validate(&cl).unwrap();

    // Re-saving a loaded artifact reproduces the bytes the subcommand wrote.
    let again = dir.path().join("controller_again.toml");
    io::save_controller(&again, &ctrl).unwrap();
    assert_eq!(
        std::fs::read(out.join("controller.toml")).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn certify_accepts_a_stable_pair_and_exits_3_when_no_rate_is_certifiable() {
    let dir = TempDir::new().unwrap();
    let stable = dir.path().join("stable.toml");
    let unstable = dir.path().join("unstable.toml");
    let ctrl = dir.path().join("zero.toml");
    write_lti_plant(&stable, 0.5);
    write_lti_plant(&unstable, 2.0);
    write_zero_controller(&ctrl, 2);

    let out = dir.path().join("cert");
    let result = run(&[
        "certify",
        "--plant",
        stable.to_str().unwrap(),
        "--controller",
        ctrl.to_str().unwrap(),
        "--rho",
        "0.95",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&result, 0);
    let artifact = io::load_certificate(&out.join("certificate.toml")).unwrap();
    assert!(artifact.certificate.margin < 0.0);
    assert_eq!(artifact.certificate.rho, 0.95);

    let result = run(&[
        "certify",
        "--plant",
        unstable.to_str().unwrap(),
        "--controller",
        ctrl.to_str().unwrap(),
        "--rho",
        "0.9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&result, 3);
}

#[test]
fn project_certify_simulate_pipeline_on_the_pendulum() {
    let dir = TempDir::new().unwrap();
    let plant_path = dir.path().join("pendulum.toml");
    io::save_plant(
        &plant_path,
        &PlantModel::Sector(PlantSector::pendulum_benchmark()),
    )
    .unwrap();

    let proj_out = dir.path().join("proj");
    let result = run(&[
        "project",
        "--plant",
        plant_path.to_str().unwrap(),
        "--sample-seed",
        "3",
        "--rho",
        "0.999",
        "--n-phi",
        "2",
        "--out",
        proj_out.to_str().unwrap(),
    ]);
    assert_exit(&result, 0);
    // The recovered controller certifies via the direct (P, Lambda) search.
    let cert_out = dir.path().join("cert");
    let result = run(&[
        "certify",
        "--plant",
        plant_path.to_str().unwrap(),
        "--controller",
        proj_out.join("controller.toml").to_str().unwrap(),
        "--rho",
        "0.999",
        "--out",
        cert_out.to_str().unwrap(),
    ]);
    assert_exit(&result, 0);

    // Simulating with the projection's own certificate: the origin stays
    // put and nothing leaves the decay envelope.
    let sim_out = dir.path().join("sim");
    let result = run(&[
        "simulate",
        "--plant",
        plant_path.to_str().unwrap(),
        "--controller",
        proj_out.join("controller.toml").to_str().unwrap(),
        "--certificate",
        proj_out.join("certificate.toml").to_str().unwrap(),
        "--x0",
        "0,0",
        "--x0",
        "0.4,-0.3",
        "--horizon",
        "200",
        "--out",
        sim_out.to_str().unwrap(),
    ]);
    assert_exit(&result, 0);
    let (zero_traj, envelope) =
        io::read_trajectory_csv(&sim_out.join("traj_000.csv")).unwrap();
    assert!(envelope.is_some());
    assert_eq!(zero_traj.len(), 201);
    assert!(zero_traj.iter().all(|z| z.norm() == 0.0));
    let report = std::fs::read_to_string(sim_out.join("report.csv")).unwrap();
    for line in report.lines().skip(1) {
        assert!(line.ends_with(",0"), "envelope violations in: {line}");
    }
    assert!(sim_out.join("phase_portrait.svg").exists());
}

#[test]
fn simulate_flags_envelope_violations_with_exit_5() {
    let dir = TempDir::new().unwrap();
    let plant_path = dir.path().join("plant.toml");
    let ctrl_path = dir.path().join("zero.toml");
    write_lti_plant(&plant_path, 0.9);
    write_zero_controller(&ctrl_path, 1);

    // A certificate whose decay promise (rho = 0.5) the loop cannot keep.
    // Pairing hashes are correct, so only the envelope check can object.
    let n = 2; // plant state + one controller state
    let fake = StabilityCertificate {
        p_mat: DMatrix::identity(n, n),
        lambda_delta: DVector::zeros(0),
        lambda_phi: DVector::from_element(1, 1.0),
        rho: 0.5,
        margin: -1.0,
        u_mat: None,
        v_mat: None,
    };
    let cert_path = dir.path().join("fake_cert.toml");
    io::save_certificate(
        &cert_path,
        &io::CertificateArtifact {
            certificate: fake,
            plant_hash: Some(io::file_sha256(&plant_path).unwrap()),
            controller_hash: Some(io::file_sha256(&ctrl_path).unwrap()),
        },
    )
    .unwrap();

    let out = dir.path().join("sim");
    let result = run(&[
        "simulate",
        "--plant",
        plant_path.to_str().unwrap(),
        "--controller",
        ctrl_path.to_str().unwrap(),
        "--certificate",
        cert_path.to_str().unwrap(),
        "--x0",
        "0.9",
        "--horizon",
        "50",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&result, 5);
    // The report still lists the violations it found.
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let row = report.lines().nth(1).unwrap();
    let violations: usize = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!(violations > 0);

    // A certificate paired with different files is rejected as a parse
    // error before any trajectory runs.
    let other_plant = dir.path().join("other.toml");
    write_lti_plant(&other_plant, 0.8);
    let result = run(&[
        "simulate",
        "--plant",
        other_plant.to_str().unwrap(),
        "--controller",
        ctrl_path.to_str().unwrap(),
        "--certificate",
        cert_path.to_str().unwrap(),
        "--x0",
        "0.9",
        "--out",
        dir.path().join("sim2").to_str().unwrap(),
    ]);
    assert_exit(&result, 2);
}

#[test]
fn sysid_fits_a_model_and_writes_loadable_artifacts() {
    let dir = TempDir::new().unwrap();
    let data_path = dir.path().join("transitions.csv");
    let plant = PlantSector::pendulum_benchmark();
    let data = SysidDataset::from_plant(
        &plant,
        300,
        &[(-1.5, 1.5), (-4.0, 4.0)],
        &[(-2.0, 2.0)],
        11,
    )
    .unwrap();
    io::write_dataset_csv(&data_path, &data).unwrap();

    let cfg_path = dir.path().join("sysid.cfg");
    std::fs::write(
        &cfg_path,
        "[model]\nn_q = 2\nactivation = \"tanh\"\n\n[training]\nlearning_rate = 1e-2\n\
         epochs = 40\nbatch = 0\noptimizer = \"adam\"\nsplit = 0.8\n",
    )
    .unwrap();

    let out = dir.path().join("fit");
    let result = run(&[
        "sysid",
        "--data",
        data_path.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&result, 0);
    let model = match io::load_plant(&out.join("plant.toml")).unwrap() {
        PlantModel::ImplicitNn(p) => p,
        other => panic!("expected an implicit model, got {other:?}"),
    };
    assert!(model.d3_norm() < 1.0);
    let history = io::read_sysid_history_csv(&out.join("loss.csv")).unwrap();
    assert_eq!(history.len(), 40);
    assert!(history.last().unwrap().mse < history
        .first()
        .unwrap()
        .mse);
    assert!(out.join("loss.svg").exists());
}

#[test]
fn bad_inputs_exit_with_the_parse_status() {
    let dir = TempDir::new().unwrap();
    // Missing config file.
    let result = run(&[
        "train",
        "--config",
        dir.path().join("nope.cfg").to_str().unwrap(),
    ]);
    assert_exit(&result, 2);

    // Config that is not valid TOML.
    let broken = dir.path().join("broken.cfg");
    std::fs::write(&broken, "[plant\nkind =").unwrap();
    let result = run(&["train", "--config", broken.to_str().unwrap()]);
    assert_exit(&result, 2);

    // Unknown reward name inside an otherwise valid config.
    let bad_reward = dir.path().join("bad_reward.cfg");
    std::fs::write(
        &bad_reward,
        "[plant]\nkind = \"lti\"\na = [[0.5]]\nb = [[1.0]]\nc = [[1.0]]\n\n\
         [reward]\nname = \"jackpot\"\nhorizon = 5\n\n[controller]\nn_phi = 1\n\n\
         [training]\nrho = 0.9\nx0_box = [[-1.0, 1.0]]\nlearning_rate = 1e-2\n\
         batch = 2\niterations = 1\n",
    )
    .unwrap();
    let result = run(&[
        "train",
        "--config",
        bad_reward.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_exit(&result, 2);

    // Simulate without any initial states.
    let plant_path = dir.path().join("p.toml");
    let ctrl_path = dir.path().join("c.toml");
    write_lti_plant(&plant_path, 0.5);
    write_zero_controller(&ctrl_path, 1);
    let result = run(&[
        "simulate",
        "--plant",
        plant_path.to_str().unwrap(),
        "--controller",
        ctrl_path.to_str().unwrap(),
        "--out",
        dir.path().join("s").to_str().unwrap(),
    ]);
    assert_exit(&result, 2);

    // Unknown flags are a usage error (clap's own status is also 2).
    let result = run(&["certify", "--warp-factor", "9"]);
    assert_exit(&result, 2);
}

#[test]
fn shipped_example_configs_parse_against_the_schema() {
    use ren_synth_cli::config;
    // The pendulum and learned-plant configs are full-scale runs; here they
    // have to parse and (where their inputs exist) resolve. The smoke
    // config is executed for real in its own test.
    let base = examples_dir();
    for name in ["pendulum.cfg", "nn_plant.cfg", "smoke.cfg"] {
        let file = config::load_train_file(&base.join(name)).unwrap();
        ren_synth::training::RewardOracle::builtin(&file.reward.name, file.reward.horizon)
            .unwrap();
        config::parse_activation(
            &file.controller.activation,
            file.controller.activation_param,
        )
        .unwrap();
        config::parse_grad_mode(&file.training.grad_mode).unwrap();
    }
    let pendulum = config::load_train_file(&base.join("pendulum.cfg")).unwrap();
    assert_eq!(pendulum.plant.resolve(&base).unwrap().n_x(), 2);
    let smoke = config::load_train_file(&base.join("smoke.cfg")).unwrap();
    assert_eq!(smoke.plant.resolve(&base).unwrap().n_delta(), 0);
    // nn_plant.cfg points at a model produced by `sysid`; the reference
    // resolves only after that run, but the rollout side is builtin.
    let nn = config::load_train_file(&base.join("nn_plant.cfg")).unwrap();
    assert!(nn.rollout.unwrap().resolve(&base).is_ok());

    let sysid = config::load_sysid_file(&base.join("sysid.cfg")).unwrap();
    config::parse_optimizer(&sysid.training.optimizer).unwrap();
    assert!(sysid.model.n_q > 0);
}
