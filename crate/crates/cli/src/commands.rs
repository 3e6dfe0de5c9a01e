//! The five subcommand implementations. Each one reads artifacts through
//! the library's file formats, does its work, and writes artifacts back,
//! so any file produced by one subcommand can be consumed by the next.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use ren_synth::activation::Nonlinearity;
use ren_synth::convex::{recover_controller, SynthesisLayout};
use ren_synth::error::{Error, Result};
use ren_synth::implicit::FixedPointOptions;
use ren_synth::io;
use ren_synth::plant::PlantSector;
use ren_synth::plot::{self, PlotConfig, Series};
use ren_synth::projection::SynthesisSet;
use ren_synth::stability::{find_certificate, ClosedLoop};
use ren_synth::sysid::{init_implicit_nn, mean_squared_error, sysid_train, SysidConfig};
use ren_synth::training::{train, RewardOracle, TrainConfig};

use crate::config;

fn ensure_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn load_sector_plant(path: &Path) -> Result<PlantSector> {
    config::plant_to_sector(io::load_plant(path)?)
}

fn parse_vector(text: &str, what: &str) -> Result<DVector<f64>> {
    let vals: std::result::Result<Vec<f64>, _> =
        text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let vals = vals.map_err(|e| Error::Parse(format!("{what}: '{text}' ({e})")))?;
    if vals.is_empty() {
        return Err(Error::Parse(format!("{what}: empty vector")));
    }
    Ok(DVector::from_column_slice(&vals))
}

fn parse_box(text: &str, what: &str) -> Result<Vec<(f64, f64)>> {
    text.split(';')
        .map(|pair| {
            let v = parse_vector(pair, what)?;
            if v.len() != 2 || v[0] > v[1] {
                return Err(Error::Parse(format!(
                    "{what}: '{pair}' is not an ordered lo,hi pair"
                )));
            }
            Ok((v[0], v[1]))
        })
        .collect()
}

/// Project a lifted parameter bundle onto the stabilizing set, recover the
/// controller, and certify it.
pub struct ProjectArgs {
    pub plant: PathBuf,
    pub theta: Option<PathBuf>,
    pub sample_seed: Option<u64>,
    pub rho: f64,
    pub eps: Option<f64>,
    pub n_phi: usize,
    pub activation: String,
    pub activation_param: Option<f64>,
    pub lambda_delta: Option<String>,
    pub solver_tol: f64,
    pub out: PathBuf,
}

pub fn cmd_project(args: &ProjectArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let plant = load_sector_plant(&args.plant)?;
    let (target_th, n_phi) = match (&args.theta, args.sample_seed) {
        (Some(path), _) => {
            let th = io::load_theta_hat(path)?;
            let n_phi = th.lambda_phi.len();
            (Some(th), n_phi)
        }
        (None, Some(_)) => (None, args.n_phi),
        (None, None) => {
            return Err(Error::Parse(
                "project needs either --theta or --sample-seed".into(),
            ))
        }
    };
    let layout = SynthesisLayout::for_plant(&plant, n_phi);
    let lambda_delta = match &args.lambda_delta {
        Some(text) => {
            let v = parse_vector(text, "--lambda-delta")?;
            if v.len() != plant.n_delta() {
                return Err(Error::Parse(format!(
                    "--lambda-delta has {} entries, plant has {} channels",
                    v.len(),
                    plant.n_delta()
                )));
            }
            v
        }
        None => DVector::from_element(plant.n_delta(), 1.0),
    };
    let mut set = SynthesisSet::new(&plant, layout, args.rho, lambda_delta.clone())?;
    if let Some(eps) = args.eps {
        set = set.with_strictness(eps);
    }
    let projected = match target_th {
        Some(th) => set.project(&layout.pack(&th), None, args.solver_tol)?,
        None => {
            let theta = set.sample(args.sample_seed.unwrap(), args.solver_tol)?;
            let margin = set.margin(&theta);
            ren_synth::projection::Projected { theta, distance: 0.0, margin, solved: true }
        }
    };
    let th = layout.unpack(&projected.theta);
    let phi = Nonlinearity::uniform(
        config::parse_activation(&args.activation, args.activation_param)?,
        n_phi,
    )
    .normalized()?;
    let rec = recover_controller(&plant, &th, &phi, args.rho, &lambda_delta, 0.0)?;

    let theta_path = args.out.join("theta_hat.toml");
    let ctrl_path = args.out.join("controller.toml");
    let cert_path = args.out.join("certificate.toml");
    io::save_theta_hat(&theta_path, &th)?;
    io::save_controller(&ctrl_path, &rec.controller)?;
    io::save_certificate(
        &cert_path,
        &io::CertificateArtifact {
            certificate: rec.certificate.clone(),
            plant_hash: Some(io::file_sha256(&args.plant)?),
            controller_hash: Some(io::file_sha256(&ctrl_path)?),
        },
    )?;
    println!(
        "projected onto the rho = {} stabilizing set: feasibility margin {:.3e}, \
         distance {:.3e}",
        args.rho, projected.margin, projected.distance
    );
    println!(
        "certificate margin {:.3e}; wrote {}, {}, {}",
        rec.certificate.margin,
        theta_path.display(),
        ctrl_path.display(),
        cert_path.display()
    );
    Ok(())
}

/// Search for a certificate for a fixed (plant, controller) pair.
pub struct CertifyArgs {
    pub plant: PathBuf,
    pub controller: PathBuf,
    pub rho: f64,
    pub eps: f64,
    pub solver_tol: f64,
    pub out: PathBuf,
}

pub fn cmd_certify(args: &CertifyArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let plant = load_sector_plant(&args.plant)?;
    let ctrl = io::load_controller(&args.controller)?;
    let cl = ClosedLoop::assemble(&plant, &ctrl)?;
    let cert = find_certificate(&cl, args.rho, args.eps, args.solver_tol)?;
    let cert_path = args.out.join("certificate.toml");
    io::save_certificate(
        &cert_path,
        &io::CertificateArtifact {
            certificate: cert.clone(),
            plant_hash: Some(io::file_sha256(&args.plant)?),
            controller_hash: Some(io::file_sha256(&args.controller)?),
        },
    )?;
    println!(
        "certificate found for rho = {}: margin {:.3e}, cond(P) = {:.3e}; wrote {}",
        args.rho,
        cert.margin,
        ren_synth::linalg::spd_condition_number(&cert.p_mat),
        cert_path.display()
    );
    Ok(())
}

/// Roll the closed loop out from a list of initial states, optionally
/// checking each step against a certificate's decay envelope.
pub struct SimulateArgs {
    pub plant: PathBuf,
    pub controller: PathBuf,
    pub certificate: Option<PathBuf>,
    pub x0: Vec<String>,
    pub grid: Option<usize>,
    pub x0_box: Option<String>,
    pub horizon: usize,
    pub solver_tol: f64,
    pub out: PathBuf,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let plant = load_sector_plant(&args.plant)?;
    let ctrl = io::load_controller(&args.controller)?;
    let cl = ClosedLoop::assemble(&plant, &ctrl)?;
    let cert = match &args.certificate {
        Some(path) => {
            let artifact = io::load_certificate(path)?;
            check_pairing(&artifact, &args.plant, &args.controller)?;
            Some(artifact.certificate)
        }
        None => None,
    };

    let mut x0s: Vec<DVector<f64>> = Vec::new();
    for text in &args.x0 {
        let x0 = parse_vector(text, "--x0")?;
        if x0.len() != plant.n_x() {
            return Err(Error::Parse(format!(
                "--x0 '{text}' has {} entries, plant has {} states",
                x0.len(),
                plant.n_x()
            )));
        }
        x0s.push(x0);
    }
    if let Some(n) = args.grid {
        if plant.n_x() != 2 {
            return Err(Error::Parse(
                "--grid needs a two-state plant; pass --x0 instead".into(),
            ));
        }
        if n < 2 {
            return Err(Error::Parse("--grid needs at least 2 points per axis".into()));
        }
        let bx = match &args.x0_box {
            Some(text) => {
                let b = parse_box(text, "--x0-box")?;
                if b.len() != 2 {
                    return Err(Error::Parse("--x0-box needs two lo,hi pairs".into()));
                }
                b
            }
            None => vec![
                (-std::f64::consts::PI, std::f64::consts::PI),
                (-8.0, 8.0),
            ],
        };
        for i in 0..n {
            for j in 0..n {
                let frac = |k: usize, (lo, hi): (f64, f64)| {
                    lo + (hi - lo) * k as f64 / (n - 1) as f64
                };
                x0s.push(DVector::from_column_slice(&[
                    frac(i, bx[0]),
                    frac(j, bx[1]),
                ]));
            }
        }
    }
    if x0s.is_empty() {
        return Err(Error::Parse("no initial states: pass --x0 and/or --grid".into()));
    }

    let opts = FixedPointOptions::default().with_tol(args.solver_tol);
    let mut report = String::new();
    let header: Vec<String> = (0..plant.n_x()).map(|i| format!("x0_{i}")).collect();
    report.push_str(&format!(
        "index,{},final_state_norm,angle_exit_step,envelope_violations\n",
        header.join(",")
    ));
    let mut portraits: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut first_violation: Option<(usize, f64, f64)> = None;
    let mut total_violations = 0usize;
    let mut max_final_norm = 0.0f64;
    for (idx, x0) in x0s.iter().enumerate() {
        let mut zeta0 = DVector::zeros(cl.n_state());
        zeta0.rows_mut(0, plant.n_x()).copy_from(x0);
        let traj = cl.simulate(&zeta0, args.horizon, &opts)?;
        let envelope: Option<Vec<f64>> = cert.as_ref().map(|c| {
            (0..traj.len()).map(|k| c.envelope(zeta0.norm(), k)).collect()
        });
        let mut violations_here = 0usize;
        if let Some(env) = &envelope {
            for (k, zeta) in traj.iter().enumerate() {
                if zeta.norm() > env[k] + 1e-8 * (1.0 + zeta0.norm()) {
                    violations_here += 1;
                    if first_violation.is_none() {
                        first_violation = Some((k, zeta.norm(), env[k]));
                    }
                }
            }
        }
        total_violations += violations_here;
        let angle_exit = traj
            .iter()
            .position(|zeta| zeta[0].abs() >= std::f64::consts::PI)
            .map(|k| k.to_string())
            .unwrap_or_default();
        let final_norm = traj
            .last()
            .map(|zeta| zeta.rows(0, plant.n_x()).norm())
            .unwrap_or(f64::NAN);
        max_final_norm = max_final_norm.max(final_norm);
        let x0_cols: Vec<String> = x0.iter().map(|v| v.to_string()).collect();
        report.push_str(&format!(
            "{idx},{},{final_norm},{angle_exit},{violations_here}\n",
            x0_cols.join(",")
        ));
        io::write_trajectory_csv(
            &args.out.join(format!("traj_{idx:03}.csv")),
            &traj,
            envelope.as_deref(),
        )?;
        if plant.n_x() >= 2 {
            portraits.push(traj.iter().map(|z| (z[0], z[1])).collect());
        }
    }
    fs::write(args.out.join("report.csv"), &report)?;
    if !portraits.is_empty() {
        plot::save_phase_portrait(
            &args.out.join("phase_portrait.svg"),
            &PlotConfig::new("Closed-loop phase portrait", "x1", "x2"),
            &portraits,
        )?;
    }
    println!(
        "simulated {} trajectories for {} steps: max final state norm {:.3e}{}",
        x0s.len(),
        args.horizon,
        max_final_norm,
        match (&cert, total_violations) {
            (None, _) => String::new(),
            (Some(_), 0) => ", zero envelope violations".into(),
            (Some(_), n) => format!(", {n} envelope violations"),
        }
    );
    if let Some((step, norm, bound)) = first_violation {
        return Err(Error::EnvelopeViolation { step, norm, bound });
    }
    Ok(())
}

fn check_pairing(
    artifact: &io::CertificateArtifact,
    plant: &Path,
    controller: &Path,
) -> Result<()> {
    if let Some(expected) = &artifact.plant_hash {
        if *expected != io::file_sha256(plant)? {
            return Err(Error::Parse(format!(
                "certificate was issued for a different plant file than {}",
                plant.display()
            )));
        }
    }
    if let Some(expected) = &artifact.controller_hash {
        if *expected != io::file_sha256(controller)? {
            return Err(Error::Parse(format!(
                "certificate was issued for a different controller file than {}",
                controller.display()
            )));
        }
    }
    Ok(())
}

/// Run the projected policy-gradient loop from a configuration file.
pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub rho: Option<f64>,
    pub eps: Option<f64>,
    pub horizon: Option<usize>,
    pub iterations: Option<usize>,
    pub grad_mode: Option<String>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let file = config::load_train_file(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let projection_plant = file.plant.resolve(&base)?;
    let rollout_plant = match &file.rollout {
        Some(spec) => spec.resolve(&base)?,
        None => projection_plant.clone(),
    };
    let horizon = args.horizon.unwrap_or(file.reward.horizon);
    let oracle = RewardOracle::builtin(&file.reward.name, horizon)?;

    let t = &file.training;
    let mut cfg = TrainConfig::new(
        args.rho.unwrap_or(t.rho),
        file.controller.n_phi,
        t.x0_box.iter().map(|b| (b[0], b[1])).collect(),
    );
    cfg.activation =
        config::parse_activation(&file.controller.activation, file.controller.activation_param)?;
    cfg.learning_rate = t.learning_rate;
    cfg.grad_mode = config::parse_grad_mode(
        args.grad_mode.as_deref().unwrap_or(&t.grad_mode),
    )?;
    cfg.batch = t.batch;
    cfg.iterations = args.iterations.unwrap_or(t.iterations);
    cfg.seed = args.seed.unwrap_or(t.seed);
    cfg.strictness = args.eps.or(t.strictness);
    cfg.eval_batch = t.eval_batch;
    cfg.recenter = t.recenter;
    cfg.halve_on_decrease = t.halve_on_decrease;
    cfg.solver_tol = t.solver_tol;

    let result = train(&projection_plant, &rollout_plant, &cfg, &oracle)?;

    let layout = SynthesisLayout::for_plant(&projection_plant, cfg.n_phi);
    let plant_path = args.out.join("plant.toml");
    let theta_path = args.out.join("theta_hat.toml");
    let ctrl_path = args.out.join("controller.toml");
    let cert_path = args.out.join("certificate.toml");
    let history_path = args.out.join("history.csv");
    // The resolved projection plant ships with the run so the certificate,
    // certify, and simulate all refer to one concrete artifact.
    io::save_plant(
        &plant_path,
        &ren_synth::plant::PlantModel::Sector(projection_plant.clone()),
    )?;
    io::save_theta_hat(&theta_path, &layout.unpack(&result.theta_hat))?;
    io::save_controller(&ctrl_path, &result.controller)?;
    io::save_certificate(
        &cert_path,
        &io::CertificateArtifact {
            certificate: result.certificate.clone(),
            plant_hash: Some(io::file_sha256(&plant_path)?),
            controller_hash: Some(io::file_sha256(&ctrl_path)?),
        },
    )?;
    io::write_history_csv(&history_path, &result.history)?;
    let curve: Vec<(f64, f64)> = result
        .history
        .iter()
        .map(|r| (r.iteration as f64, r.mean_reward))
        .collect();
    plot::save_line_plot(
        &args.out.join("reward.svg"),
        &PlotConfig::new("Training reward", "iteration", "mean reward"),
        &[Series::new("mean reward", curve)],
    )?;
    let first = result.history.first().expect("history is never empty");
    let best = &result.history[result.best_iteration];
    println!(
        "trained {} iterations: mean reward {:.4} -> {:.4} (best at iteration {}), \
         certificate margin {:.3e}",
        result.history.len() - 1,
        first.mean_reward,
        best.mean_reward,
        result.best_iteration,
        result.certificate.margin
    );
    println!(
        "wrote {}, {}, {}, {}",
        theta_path.display(),
        ctrl_path.display(),
        cert_path.display(),
        history_path.display()
    );
    Ok(())
}

/// Fit an implicit neural plant model to a transition dataset.
pub struct SysidArgs {
    pub data: PathBuf,
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn cmd_sysid(args: &SysidArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let file = config::load_sysid_file(&args.config)?;
    let data = io::read_dataset_csv(&args.data)?;
    let (train_set, holdout) = data.split(file.training.split, file.training.split_seed)?;

    let n_x = data.n_x();
    let n_q = file.model.n_q;
    // Deterministic default input map: channel i reads state i mod n_x.
    let mut c1 = DMatrix::zeros(n_q, n_x);
    for i in 0..n_q {
        c1[(i, i % n_x)] = 1.0;
    }
    let delta = Nonlinearity::uniform(
        config::parse_activation(&file.model.activation, file.model.activation_param)?,
        n_q,
    );
    let init = init_implicit_nn(n_x, n_q, data.n_u(), c1, delta, file.model.init_seed)?;

    let cfg = SysidConfig {
        learning_rate: file.training.learning_rate,
        alpha: file.training.alpha,
        epochs: file.training.epochs,
        batch: file.training.batch,
        seed: args.seed.unwrap_or(file.training.seed),
        optimizer: config::parse_optimizer(&file.training.optimizer)?,
        train_d3: file.training.train_d3,
    };
    let outcome = sysid_train(&train_set, &init, &cfg)?;
    let opts = FixedPointOptions::default();
    let train_mse = mean_squared_error(&outcome.plant, &train_set, &opts)?;
    let holdout_mse = mean_squared_error(&outcome.plant, &holdout, &opts)?;

    let plant_path = args.out.join("plant.toml");
    let loss_path = args.out.join("loss.csv");
    io::save_plant(
        &plant_path,
        &ren_synth::plant::PlantModel::ImplicitNn(outcome.plant.clone()),
    )?;
    io::write_sysid_history_csv(&loss_path, &outcome.history)?;
    let curve: Vec<(f64, f64)> = outcome
        .history
        .iter()
        .map(|r| (r.epoch as f64, r.mse))
        .collect();
    plot::save_line_plot(
        &args.out.join("loss.svg"),
        &PlotConfig::new("Identification loss", "epoch", "mean squared error"),
        &[Series::new("training mse", curve)],
    )?;
    println!(
        "identified {}-state model with {} implicit channels: training mse {:.3e}, \
         held-out mse {:.3e}, |D3| = {:.4}",
        n_x,
        n_q,
        train_mse,
        holdout_mse,
        outcome.plant.d3_norm()
    );
    println!("wrote {}, {}", plant_path.display(), loss_path.display());
    Ok(())
}
