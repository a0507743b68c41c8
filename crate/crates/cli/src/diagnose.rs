//! Report generators: MMD between simulated and table-approximated `X_t`,
//! projected versus full-sphere means, radial convergence under both
//! schedule orders, and the objective ablation.

use std::io::Write;

use spherediff::bridges::{self, BridgeSpec};
use spherediff::datasets::DataSource;
use spherediff::geometry::{self, SpherePoint};
use spherediff::precompute::{self, PrecomputedTable};
use spherediff::predictor::{Architecture, Mlp};
use spherediff::rng;
use spherediff::rnormal::{self, VertexSampler};
use spherediff::sampling_eval::{self, NllConfig, NllReport};
use spherediff::schedules::NoiseSchedule;
use spherediff::training::{Objective, SplitCodec, StepStats, TableSet, TrainConfig, Trainer};
use spherediff::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdRow {
    pub t: f64,
    /// Biased MMD^2 between simulated and table samples, replicate mean.
    pub sim_approx: f64,
    /// Biased MMD^2 between two independent simulated sets.
    pub sim_sim: f64,
    /// Unbiased MMD^2 between the second simulated set and the table
    /// samples: an estimate of the approximation error itself.
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct MmdSetup<'a> {
    pub table: &'a PrecomputedTable,
    pub x0: &'a SpherePoint,
    pub target: usize,
    pub schedule: NoiseSchedule,
    pub samples: usize,
    pub replicates: usize,
    /// Compare at `j T / (times + 1)`, `j = 1..=times`.
    pub times: usize,
    pub sim_steps: usize,
    pub seed: u64,
}

/// Kernel bandwidth: median pairwise geodesic distance of the simulated set.
pub fn mmd_curve(s: &MmdSetup) -> Result<Vec<MmdRow>> {
    let horizon = s.schedule.horizon;
    let grid: Vec<f64> = (0..=s.sim_steps)
        .map(|i| horizon * i as f64 / s.sim_steps as f64)
        .collect();
    let checkpoints: Vec<usize> = (1..=s.times)
        .map(|j| ((s.sim_steps * j) as f64 / (s.times + 1) as f64).round() as usize)
        .collect();
    let target = SpherePoint::one_hot(s.x0.dim(), s.target)?;
    let spec = BridgeSpec::new(target, s.schedule);
    let sampler = VertexSampler::new(s.table, s.x0);
    let mut rows: Vec<MmdRow> = checkpoints
        .iter()
        .map(|&c| MmdRow {
            t: grid[c],
            sim_approx: 0.0,
            sim_sim: 0.0,
            gap: 0.0,
        })
        .collect();
    let inv = 1.0 / s.replicates as f64;
    let dim = s.x0.dim();
    for r in 0..s.replicates {
        let sims = bridges::bridge_ensemble(
            s.x0,
            &spec,
            &grid,
            &checkpoints,
            2 * s.samples,
            s.seed,
            &format!("diagnose/mmd/sim_{r}"),
        )?;
        for (c, row) in rows.iter_mut().enumerate() {
            let (sim, sim2) = sims[c].split_at(s.samples);
            let mut rng = rng::indexed(s.seed, &format!("diagnose/mmd/approx_{r}"), c as u64);
            let mut scratch = vec![0.0; dim];
            let approx: Vec<SpherePoint> = (0..s.samples)
                .map(|_| {
                    let mut out = vec![0.0; dim];
                    sampler.draw(s.target, row.t, &mut rng, &mut out, &mut scratch)?;
                    SpherePoint::new(out)
                })
                .collect::<Result<_>>()?;
            let h = rnormal::median_distance(sim).unwrap_or(1.0).max(1e-12);
            row.sim_approx += inv * rnormal::mmd2_biased(sim, &approx, h)?;
            row.sim_sim += inv * rnormal::mmd2_biased(sim, sim2, h)?;
            row.gap += inv * rnormal::mmd2(sim2, &approx, h)?;
        }
    }
    Ok(rows)
}

pub fn write_mmd_csv<W: Write>(rows: &[MmdRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "t,mmd_sim_approx,mmd_sim_sim")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.t, r.sim_approx, r.sim_sim)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedRow {
    pub t: f64,
    pub ez_t_projected: f64,
    pub ez_0_projected: f64,
    pub se_t_projected: f64,
    pub se_0_projected: f64,
    pub ez_t_full: f64,
    pub ez_0_full: f64,
    pub se_t_full: f64,
    pub se_0_full: f64,
}

/// Means of `<X_t, e_k>` and `<X_t, x0>` from the scalar projected SDEs and
/// from full bridge simulation on the same grid, at `points` interior times.
#[allow(clippy::too_many_arguments)]
pub fn projected_curve(
    x0: &SpherePoint,
    target: usize,
    schedule: &NoiseSchedule,
    trajectories: usize,
    steps: usize,
    points: usize,
    seed: u64,
) -> Result<Vec<ProjectedRow>> {
    let psi0 = x0.coords()[target];
    let proj = precompute::simulate_projected(
        psi0,
        schedule,
        x0.dim(),
        trajectories,
        steps,
        1.0,
        seed,
        "diagnose/projected",
    )?;
    let checkpoints: Vec<usize> = (1..=points).map(|j| steps * j / (points + 1)).collect();
    let target_pt = SpherePoint::one_hot(x0.dim(), target)?;
    let spec = BridgeSpec::new(target_pt.clone(), *schedule);
    let full = bridges::bridge_ensemble(
        x0,
        &spec,
        &proj.times,
        &checkpoints,
        trajectories,
        seed,
        "diagnose/full",
    )?;
    let stats = |v: Vec<f64>| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    };
    Ok(checkpoints
        .iter()
        .zip(&full)
        .map(|(&c, states)| {
            let (ez_t, se_t) = stats(states.iter().map(|x| x.inner(&target_pt)).collect());
            let (ez_0, se_0) = stats(states.iter().map(|x| x.inner(x0)).collect());
            ProjectedRow {
                t: proj.times[c],
                ez_t_projected: proj.ez_t[c],
                ez_0_projected: proj.ez_0[c],
                se_t_projected: proj.se_t[c],
                se_0_projected: proj.se_0[c],
                ez_t_full: ez_t,
                ez_0_full: ez_0,
                se_t_full: se_t,
                se_0_full: se_0,
            }
        })
        .collect())
}

pub fn write_projected_csv<W: Write>(rows: &[ProjectedRow], w: &mut W) -> std::io::Result<()> {
    writeln!(
        w,
        "t,ez_t_projected,ez_0_projected,se_t_projected,se_0_projected,ez_t_full,ez_0_full,se_t_full,se_0_full"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            r.ez_t_projected,
            r.ez_0_projected,
            r.se_t_projected,
            r.se_0_projected,
            r.ez_t_full,
            r.ez_0_full,
            r.se_t_full,
            r.se_0_full
        )?;
    }
    Ok(())
}

/// Mean geodesic distance to the target under `schedule` and under the
/// same schedule with its endpoints swapped. Rows are `(t, increasing,
/// decreasing)` in the order `sigma_0 < sigma_T` first.
pub fn radial_curves(
    r0: f64,
    dim: usize,
    schedule: &NoiseSchedule,
    trajectories: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    let swapped = NoiseSchedule::new(schedule.sigma_t, schedule.sigma0, schedule.horizon)?;
    let (up, down) = if schedule.sigma0 <= schedule.sigma_t {
        (*schedule, swapped)
    } else {
        (swapped, *schedule)
    };
    let grid: Vec<f64> = (0..=steps)
        .map(|i| schedule.horizon * i as f64 / steps as f64)
        .collect();
    let mean_path = |s: &NoiseSchedule, stream: &str| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; grid.len()];
        for j in 0..trajectories {
            let mut rng = rng::indexed(seed, stream, j as u64);
            let path = bridges::simulate_radial(r0, s, dim, 1.0, &grid, &mut rng)?;
            acc.iter_mut()
                .zip(&path)
                .for_each(|(a, r)| *a += r / trajectories as f64);
        }
        Ok(acc)
    };
    let a = mean_path(&up, "diagnose/radial_up")?;
    let b = mean_path(&down, "diagnose/radial_down")?;
    Ok(grid
        .iter()
        .zip(a.iter().zip(&b))
        .map(|(&t, (&x, &y))| (t, x, y))
        .collect())
}

pub fn write_radial_csv<W: Write>(rows: &[(f64, f64, f64)], stride: usize, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "t,mean_distance_increasing,mean_distance_decreasing")?;
    for (i, (t, a, b)) in rows.iter().enumerate() {
        if i % stride.max(1) == 0 || i + 1 == rows.len() {
            writeln!(w, "{t},{a},{b}")?;
        }
    }
    Ok(())
}

/// Everything needed to train and score one model per objective.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub codec: SplitCodec,
    pub schedule: NoiseSchedule,
    pub tables: TableSet,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub source: DataSource,
    pub eval_data: Vec<Vec<usize>>,
    pub nll: NllConfig,
    pub init_seed: u64,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub objective: Objective,
    pub log: Vec<StepStats>,
    pub report: NllReport,
    pub model: Mlp,
}

/// Trains with `objective` from the shared initialization and scores the
/// EMA parameters. Every objective sees the same batches and evaluation
/// draws, so differences between results are paired.
pub fn train_objective(setup: &AblationSetup, objective: Objective) -> Result<AblationResult> {
    let mut rng = rng::substream(setup.init_seed, "train/init");
    let model = Mlp::init(setup.arch.clone(), &mut rng)?;
    let config = TrainConfig {
        objective,
        ..setup.train.clone()
    };
    let mut trainer = Trainer::new(model, setup.codec, setup.schedule, setup.tables.clone(), config)?;
    let mut log = Vec::with_capacity(setup.train.steps);
    trainer.fit(&setup.source, |s| log.push(*s))?;
    let model = trainer.ema_model();
    let report = sampling_eval::estimate_nll(&model, &setup.codec, &setup.schedule, &setup.eval_data, &setup.nll)?;
    Ok(AblationResult {
        objective,
        log,
        report,
        model,
    })
}

pub fn objective_ablation(setup: &AblationSetup) -> Result<Vec<AblationResult>> {
    [Objective::Mse, Objective::Ce, Objective::CeImportance]
        .into_iter()
        .map(|o| train_objective(setup, o))
        .collect()
}

/// Training loss curves averaged over windows of `window` steps.
pub fn write_ablation_csv<W: Write>(results: &[AblationResult], window: usize, w: &mut W) -> std::io::Result<()> {
    let names: Vec<String> = results
        .iter()
        .map(|r| format!("loss_{}", objective_name(r.objective)))
        .collect();
    writeln!(w, "step,{}", names.join(","))?;
    let steps = results.iter().map(|r| r.log.len()).min().unwrap_or(0);
    let window = window.max(1);
    for end in (window..=steps).step_by(window) {
        let cols: Vec<String> = results
            .iter()
            .map(|r| {
                let m = r.log[end - window..end].iter().map(|s| s.loss).sum::<f64>() / window as f64;
                m.to_string()
            })
            .collect();
        writeln!(w, "{end},{}", cols.join(","))?;
    }
    Ok(())
}

pub fn write_ablation_nll_csv<W: Write>(results: &[AblationResult], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "objective,nll_nats_per_token,mc_std_error")?;
    for r in results {
        writeln!(
            w,
            "{},{},{}",
            objective_name(r.objective),
            r.report.nll_nats_per_token,
            r.report.mc_std_error
        )?;
    }
    Ok(())
}

pub fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Mse => "mse",
        Objective::Ce => "ce",
        Objective::CeImportance => "ce_importance",
    }
}

/// Geodesic distance between the start and a vertex, for radial curves.
pub fn start_radius(x0: &SpherePoint, target: usize) -> Result<f64> {
    Ok(geometry::geodesic_distance(
        x0,
        &SpherePoint::one_hot(x0.dim(), target)?,
    ))
}
