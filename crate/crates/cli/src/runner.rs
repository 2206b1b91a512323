//! Campaign execution: sampling, solving, estimator drivers and artifact
//! emission (manifest JSON, per-sample CSV, summary JSON).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use qphom::conductivity::{ConductivityField, LowRankConductivity};
use qphom::eim;
use qphom::estimators::{self, ScalarQoI};
use qphom::fem::build_cell_mesh;
use qphom::homogenize::{
    apparent_homogenize_fem, apparent_homogenize_mapped, apparent_homogenize_mslrm,
};
use qphom::media;
use qphom::mslrm::{GreedyOptions, ModesLibrary};
use qphom::types::derive_seed;
use qphom::weakly;
use qphom::{DenseConductivity, HomogenizedTensor, MesoGrid, SymMat2};

use crate::config::{EstimatorMode, MediumKind, RunConfig, SolverKind};
use crate::CliError;

pub fn parse_qoi(name: &str) -> Result<ScalarQoI, CliError> {
    match name {
        "k11" => Ok(ScalarQoI::Entry11),
        "k22" => Ok(ScalarQoI::Entry22),
        "k12" => Ok(ScalarQoI::Entry12),
        "trace" => Ok(ScalarQoI::Trace),
        other => Err(CliError::Config(format!(
            "estimator.qoi = {other:?}; expected k11, k22, k12 or trace"
        ))),
    }
}

const CSV_COLUMNS: [&str; 7] = ["sample", "k11", "k12", "k22", "rank", "seconds", "recycled"];

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone)]
struct SampleRow {
    index: usize,
    tensor: HomogenizedTensor,
    rank: usize,
    seconds: f64,
    recycled: bool,
}

impl SampleRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}\n",
            self.index,
            fmt17(self.tensor.get(1, 1)),
            fmt17(self.tensor.get(1, 2)),
            fmt17(self.tensor.get(2, 2)),
            self.rank,
            fmt17(self.seconds),
            self.recycled
        )
    }
}

struct CsvWriter {
    file: BufWriter<File>,
}

impl CsvWriter {
    fn create(path: &Path) -> Result<Self, CliError> {
        let file = File::create(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut w = Self { file: BufWriter::new(file) };
        w.write_line(&format!("{}\n", CSV_COLUMNS.join(",")))?;
        Ok(w)
    }

    /// Rows are flushed immediately so an interrupted campaign keeps what is
    /// already paid for.
    fn write_row(&mut self, row: &SampleRow) -> Result<(), CliError> {
        self.write_line(&row.csv_line())
    }

    fn write_line(&mut self, line: &str) -> Result<(), CliError> {
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| CliError::Io(format!("samples.csv: {e}")))
    }
}

/// Everything fixed across samples of one campaign.
struct Campaign {
    cfg: RunConfig,
    grid: MesoGrid,
    qoi: ScalarQoI,
    opts: GreedyOptions,
}

enum MediumSample {
    LowRank(LowRankConductivity),
    Dense(DenseConductivity),
    Mapped(LowRankConductivity, media::MappingSpec),
}

impl Campaign {
    fn new(cfg: RunConfig) -> Result<Self, CliError> {
        let g = &cfg.grid;
        let cell = build_cell_mesh(g.micro, g.micro, g.cell_lx, g.cell_ly)?;
        let grid = MesoGrid::new(g.cells_x, g.cells_y, cell)?;
        let qoi = parse_qoi(&cfg.estimator.qoi)?;
        let mut opts = GreedyOptions::default();
        opts.eta_pen = cfg.solver.eta_pen;
        Ok(Self { cfg, grid, qoi, opts })
    }

    fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    fn draw(&self, index: u64) -> Result<MediumSample, CliError> {
        let m = &self.cfg.medium;
        let seed = derive_seed(self.cfg.run.seed, index);
        let cell = &self.grid.cell;
        Ok(match m.kind {
            MediumKind::Constant => {
                let mut k = LowRankConductivity::new(self.n_cells(), cell.element_count());
                k.push_term(
                    vec![1.0; self.n_cells()],
                    vec![SymMat2::iso(m.k1); cell.element_count()],
                )?;
                MediumSample::LowRank(k)
            }
            MediumKind::BernoulliDefect => MediumSample::LowRank(
                media::sample_bernoulli_defect(self.n_cells(), cell, m.k1, m.k2, m.p, seed)?.k,
            ),
            MediumKind::RegularPeaks => MediumSample::Dense(media::sample_regular_peaks(
                self.n_cells(),
                cell,
                m.alpha_max,
                m.beta_min,
                m.beta_max,
                seed,
            )),
            MediumKind::MappedFibres => {
                let (k, mapping) = media::sample_mapped_fibres(
                    self.cfg.grid.cells_x,
                    self.cfg.grid.cells_y,
                    cell,
                    m.k1,
                    m.k2,
                    m.fibre_fraction,
                    m.jitter,
                    m.aspect,
                    seed,
                )?;
                MediumSample::Mapped(k, mapping)
            }
        })
    }

    /// Solves one sample with the configured primary solver. The library is
    /// threaded through for modes recycling; `sample_index` tags new modes.
    fn solve(
        &self,
        sample: &MediumSample,
        library: &mut ModesLibrary,
        sample_index: usize,
    ) -> Result<SampleRow, CliError> {
        let s = &self.cfg.solver;
        let row = match (sample, s.method) {
            (MediumSample::Mapped(k, mapping), _) => {
                let r = apparent_homogenize_mapped(&self.grid, k, mapping, s.fem_tol)?;
                SampleRow {
                    index: sample_index,
                    tensor: r.tensor,
                    rank: 0,
                    seconds: r.seconds,
                    recycled: false,
                }
            }
            (_, SolverKind::Fem) => {
                let field = self.to_field(sample);
                let r = apparent_homogenize_fem(&self.grid, &field, s.fem_tol)?;
                SampleRow {
                    index: sample_index,
                    tensor: r.tensor,
                    rank: 0,
                    seconds: r.seconds,
                    recycled: false,
                }
            }
            (_, SolverKind::Mslrm) => {
                let k = self.to_low_rank(sample)?;
                let mut opts = self.opts.clone();
                opts.sample_index = sample_index;
                let lib_in = if s.recycling {
                    std::mem::take(library)
                } else {
                    ModesLibrary::new()
                };
                let r = apparent_homogenize_mslrm(&self.grid, &k, s.epsilon, lib_in, &opts)?;
                if s.recycling {
                    *library = r.library;
                }
                SampleRow {
                    index: sample_index,
                    tensor: r.tensor,
                    rank: r.reports.iter().map(|x| x.rank).max().unwrap_or(0),
                    seconds: r.seconds,
                    recycled: r.reports.iter().all(|x| x.recycled),
                }
            }
        };
        Ok(row)
    }

    fn to_field(&self, sample: &MediumSample) -> ConductivityField {
        match sample {
            MediumSample::LowRank(k) => k.clone().into(),
            MediumSample::Dense(k) => k.clone().into(),
            MediumSample::Mapped(k, _) => k.clone().into(),
        }
    }

    /// Exact separated representation; dense media get one term per cell.
    fn to_low_rank(&self, sample: &MediumSample) -> Result<LowRankConductivity, CliError> {
        match sample {
            MediumSample::LowRank(k) | MediumSample::Mapped(k, _) => Ok(k.clone()),
            MediumSample::Dense(d) => {
                let n = self.n_cells();
                let mut k = LowRankConductivity::new(n, d.cells[0].len());
                for (c, cells) in d.cells.iter().enumerate() {
                    let mut meso = vec![0.0; n];
                    meso[c] = 1.0;
                    k.push_term(meso, cells.clone())?;
                }
                Ok(k)
            }
        }
    }

    /// Solves the fine (reference-fidelity) scalar quantity of interest.
    fn fine_qoi(
        &self,
        index: u64,
        rows: Option<&Mutex<Vec<SampleRow>>>,
    ) -> Result<f64, CliError> {
        let sample = self.draw(index)?;
        let row = match &sample {
            MediumSample::Mapped(k, mapping) => {
                let r =
                    apparent_homogenize_mapped(&self.grid, k, mapping, self.cfg.solver.fem_tol)?;
                SampleRow {
                    index: index as usize,
                    tensor: r.tensor,
                    rank: 0,
                    seconds: r.seconds,
                    recycled: false,
                }
            }
            _ => {
                let field = self.to_field(&sample);
                let r = apparent_homogenize_fem(&self.grid, &field, self.cfg.solver.fem_tol)?;
                SampleRow {
                    index: index as usize,
                    tensor: r.tensor,
                    rank: 0,
                    seconds: r.seconds,
                    recycled: false,
                }
            }
        };
        let q = self.qoi.eval(&row.tensor);
        if let Some(buf) = rows {
            buf.lock().unwrap().push(row);
        }
        Ok(q)
    }

    /// Reduced-order surrogate: empirical interpolation of the conductivity
    /// at `delta`, then the low-rank corrector solve at `epsilon`.
    fn surrogate_qoi(&self, index: u64, library: &mut ModesLibrary) -> Result<f64, CliError> {
        let sample = self.draw(index)?;
        let dense = match &sample {
            MediumSample::Dense(d) => d.clone(),
            MediumSample::LowRank(k) => DenseConductivity {
                cells: (0..self.n_cells())
                    .map(|c| k.eval_cell(c))
                    .collect::<qphom::Result<_>>()?,
            },
            MediumSample::Mapped(..) => {
                return Err(CliError::Config("cv_eim requires a scalar medium".into()))
            }
        };
        let cap = self.n_cells().max(2);
        let model = eim::eim_interpolate(&dense, self.cfg.solver.delta, cap)?;
        let k = eim::to_low_rank_repaired(&model, self.cfg.medium.k1.min(self.cfg.medium.k2))?;
        let mut opts = self.opts.clone();
        opts.sample_index = index as usize;
        let lib_in = std::mem::take(library);
        let r = apparent_homogenize_mslrm(&self.grid, &k, self.cfg.solver.epsilon, lib_in, &opts)?;
        *library = r.library;
        Ok(self.qoi.eval(&r.tensor))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serialising {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn stats_or_err(values: &[f64]) -> Result<(f64, f64), CliError> {
    Ok(estimators::sample_stats(values)?)
}

pub struct RunOutcome {
    pub summary: serde_json::Value,
}

pub fn run(cfg: RunConfig) -> Result<RunOutcome, CliError> {
    let out_dir = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;

    let manifest = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.run.seed,
        "csv_columns": CSV_COLUMNS,
        "config": serde_json::to_value(&cfg)
            .map_err(|e| CliError::Io(format!("config echo: {e}")))?,
    });
    write_json(&out_dir.join("manifest.json"), &manifest)?;

    let mut csv = CsvWriter::create(&out_dir.join("samples.csv"))?;
    let campaign = Campaign::new(cfg.clone())?;
    let t0 = Instant::now();
    let mut summary = match cfg.estimator.mode {
        EstimatorMode::Mc => run_mc(&campaign, &mut csv)?,
        EstimatorMode::CvWeakly1 => run_cv_weakly(&campaign, &mut csv, 1)?,
        EstimatorMode::CvWeakly2 => run_cv_weakly(&campaign, &mut csv, 2)?,
        EstimatorMode::CvEim => run_cv_eim(&campaign, &mut csv, &out_dir)?,
        EstimatorMode::Mfmc => run_mfmc(&campaign, &mut csv)?,
    };
    summary["wall_seconds"] = serde_json::json!(t0.elapsed().as_secs_f64());
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(RunOutcome { summary })
}

/// Plain Monte Carlo with the configured primary solver. A sequential pilot
/// sizes the campaign (and warms the modes library); the remainder runs on
/// the configured thread count with the library frozen, so results do not
/// depend on completion order.
fn run_mc(c: &Campaign, csv: &mut CsvWriter) -> Result<serde_json::Value, CliError> {
    let mut library = load_or_new_library(c)?;
    let fixed = c.cfg.run.samples;
    let pilot = if fixed > 0 { fixed.min(c.cfg.estimator.pilot) } else { c.cfg.estimator.pilot };

    let mut values = Vec::new();
    let mut rows = Vec::new();
    for i in 0..pilot {
        let sample = c.draw(i as u64)?;
        let row = c.solve(&sample, &mut library, i)?;
        values.push(c.qoi.eval(&row.tensor));
        csv.write_row(&row)?;
        rows.push(row);
    }
    let (_, pilot_var) = stats_or_err(&values)?;
    let total = if fixed > 0 {
        fixed
    } else {
        estimators::required_samples(pilot_var, c.cfg.estimator.eta)?.max(pilot)
    };

    if total > pilot {
        let extra: Vec<Result<SampleRow, CliError>> = if c.cfg.run.threads > 1 {
            let lib = library.clone();
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(c.cfg.run.threads)
                .build()
                .map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                (pilot..total)
                    .into_par_iter()
                    .map(|i| {
                        let mut local = lib.clone();
                        c.draw(i as u64).and_then(|s| c.solve(&s, &mut local, i))
                    })
                    .collect()
            })
        } else {
            (pilot..total)
                .map(|i| c.draw(i as u64).and_then(|s| c.solve(&s, &mut library, i)))
                .collect()
        };
        for row in extra {
            let row = row?;
            values.push(c.qoi.eval(&row.tensor));
            csv.write_row(&row)?;
            rows.push(row);
        }
    }

    save_library(c, &library)?;
    let (mean, var) = stats_or_err(&values)?;
    let mean_rank = rows.iter().map(|r| r.rank).sum::<usize>() as f64 / rows.len() as f64;
    Ok(serde_json::json!({
        "mode": "mc",
        "estimate": mean,
        "sample_variance": var,
        "estimator_variance": var / values.len() as f64,
        "n_samples": values.len(),
        "mean_rank": mean_rank,
        "library_size": library.len(),
    }))
}

/// Control variates built from the sparse-defect expansion: the first-order
/// variate sums per-cell single-defect contributions; the second-order one
/// adds pair contributions from both the defective and the complementary
/// reference configuration.
fn run_cv_weakly(
    c: &Campaign,
    csv: &mut CsvWriter,
    order: u8,
) -> Result<serde_json::Value, CliError> {
    let m = &c.cfg.medium;
    let cell = &c.grid.cell;
    let (ind, _) = media::centered_square_indicator(cell, media::EQUAL_FRACTION_SIDE * cell.lx)?;
    let k_sharp = vec![SymMat2::iso(m.k1); cell.element_count()];
    let k_def: Vec<SymMat2> = ind
        .iter()
        .map(|&x| SymMat2::iso(if x { m.k2 - m.k1 } else { 0.0 }))
        .collect();
    let solver = match c.cfg.solver.method {
        SolverKind::Fem => weakly::ContributionSolver::Fem { tol: c.cfg.solver.fem_tol },
        SolverKind::Mslrm => weakly::ContributionSolver::Mslrm { eps: c.cfg.solver.epsilon },
    };
    let tc = Instant::now();
    let contrib = weakly::compute_contributions(&c.grid, &k_sharp, &k_def, solver)?;
    let apriori_seconds = tc.elapsed().as_secs_f64();

    let e_z1 = c.qoi.eval(&weakly::z1_expectation(&contrib, m.p));
    let e_z2 = c.qoi.eval(&weakly::z2_expectation(&contrib, m.p));
    let e_z2c = c.qoi.eval(&weakly::z2_comp_expectation(&contrib, m.p));

    // matched campaign: fine solve + the (free) surrogate evaluations
    let draw_matched = |index: u64| -> Result<(SampleRow, f64, f64, f64, f64), CliError> {
        let bern = media::sample_bernoulli_defect(
            c.n_cells(),
            cell,
            m.k1,
            m.k2,
            m.p,
            derive_seed(c.cfg.run.seed, index),
        )?;
        let d = weakly::DefectSample { b: bern.b.clone(), eps_def: m.p };
        let t0 = Instant::now();
        let r = apparent_homogenize_fem(&c.grid, &bern.k.into(), c.cfg.solver.fem_tol)?;
        let row = SampleRow {
            index: index as usize,
            tensor: r.tensor,
            rank: 0,
            seconds: t0.elapsed().as_secs_f64(),
            recycled: false,
        };
        let q = c.qoi.eval(&row.tensor);
        let z1 = c.qoi.eval(&weakly::z1_eval(&contrib, &d));
        let z2 = c.qoi.eval(&weakly::z2_eval(&contrib, &d));
        let z2c = c.qoi.eval(&weakly::z2_comp_eval(&contrib, &d));
        Ok((row, q, z1, z2, z2c))
    };

    let pilot = c.cfg.estimator.pilot;
    let (mut qs, mut z1s, mut z2s, mut z2cs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..pilot {
        let (row, q, z1, z2, z2c) = draw_matched(i as u64)?;
        csv.write_row(&row)?;
        qs.push(q);
        z1s.push(z1);
        z2s.push(z2);
        z2cs.push(z2c);
    }
    let (rho1, rho2, rho2c, degenerate) = if order == 1 {
        let (_, var_z1) = stats_or_err(&z1s)?;
        if var_z1 == 0.0 {
            return Err(CliError::Core(qphom::Error::ZeroVarianceControl));
        }
        (estimators::empirical_cov(&qs, &z1s)? / var_z1, 0.0, 0.0, false)
    } else {
        weakly::solve_control_coefficients(&qs, &z1s, &z2s, &z2cs)?
    };

    let controlled = |q: f64, z1: f64, z2: f64, z2c: f64| {
        q - rho1 * (z1 - e_z1) - rho2 * (z2 - e_z2) - rho2c * (z2c - e_z2c)
    };
    let mut xs: Vec<f64> = (0..pilot)
        .map(|i| controlled(qs[i], z1s[i], z2s[i], z2cs[i]))
        .collect();
    let (_, var_x) = stats_or_err(&xs)?;
    let total = if c.cfg.run.samples > 0 {
        c.cfg.run.samples
    } else {
        estimators::required_samples(var_x, c.cfg.estimator.eta)?.max(pilot)
    };
    for i in pilot..total {
        let (row, q, z1, z2, z2c) = draw_matched(i as u64)?;
        csv.write_row(&row)?;
        qs.push(q);
        xs.push(controlled(q, z1, z2, z2c));
    }

    let (estimate, var_x) = stats_or_err(&xs)?;
    let (_, var_q) = stats_or_err(&qs)?;
    Ok(serde_json::json!({
        "mode": format!("cv_weakly_{order}"),
        "estimate": estimate,
        "sample_variance": var_x,
        "estimator_variance": var_x / xs.len() as f64,
        "n_samples": xs.len(),
        "rho": [rho1, rho2, rho2c],
        "degenerate_gram": degenerate,
        "variance_reduction": if var_x > 0.0 { var_q / var_x } else { f64::INFINITY },
        "apriori_seconds": apriori_seconds,
        "surrogate_expectations": [e_z1, e_z2, e_z2c],
    }))
}

/// Control variate from the interpolated-conductivity surrogate: pilot pairs
/// calibrate the regression coefficient and the cost model, the allocation
/// balances fine and surrogate sample counts against the target accuracy.
fn run_cv_eim(
    c: &Campaign,
    csv: &mut CsvWriter,
    out_dir: &Path,
) -> Result<serde_json::Value, CliError> {
    let mut library = load_or_new_library(c)?;
    let pilot = c.cfg.estimator.pilot;
    let rows = Mutex::new(Vec::new());
    let (mut qs, mut zs) = (Vec::new(), Vec::new());
    let (mut tq, mut tz) = (Vec::new(), Vec::new());
    for i in 0..pilot {
        let t0 = Instant::now();
        qs.push(c.fine_qoi(i as u64, Some(&rows))?);
        tq.push(t0.elapsed().as_secs_f64());
        let t0 = Instant::now();
        zs.push(c.surrogate_qoi(i as u64, &mut library)?);
        tz.push(t0.elapsed().as_secs_f64());
    }
    for row in rows.lock().unwrap().iter() {
        csv.write_row(row)?;
    }
    let rho = estimators::cv_rho(&qs, &zs)?;
    let us: Vec<f64> = qs.iter().zip(&zs).map(|(q, z)| q - rho * z).collect();
    let (_, var_u) = stats_or_err(&us)?;
    let (_, var_z) = stats_or_err(&zs)?;
    let (_, var_q) = stats_or_err(&qs)?;
    let c_q = estimators::median_cost(tq);
    let c_z = estimators::median_cost(tz);
    let plan = estimators::cv_allocate(var_u, var_z, rho, c_q + c_z, c_z, c.cfg.estimator.eta)?;

    let lib = Mutex::new(library);
    let u_sampler = |seed: u64| -> f64 {
        let q = c.fine_qoi(seed, None).expect("fine sample failed");
        let z = c
            .surrogate_qoi(seed, &mut lib.lock().unwrap())
            .expect("surrogate sample failed");
        q - rho * z
    };
    let z_sampler =
        |seed: u64| c.surrogate_qoi(seed, &mut lib.lock().unwrap()).expect("surrogate failed");
    let estimate =
        estimators::cv_estimate(u_sampler, z_sampler, 0.0, &plan, derive_seed(c.cfg.run.seed, 1));
    let library = lib.into_inner().unwrap();
    save_library(c, &library)?;
    let _ = out_dir;

    Ok(serde_json::json!({
        "mode": "cv_eim",
        "estimate": estimate,
        "estimator_variance": plan.predicted_variance,
        "n_u": plan.n_u,
        "n_z": plan.n_z,
        "rho": rho,
        "pilot": pilot,
        "cost_fine": c_q,
        "cost_surrogate": c_z,
        "variance_reduction": if var_u > 0.0 { var_q / var_u } else { f64::INFINITY },
        "library_size": library.len(),
    }))
}

/// Two-fidelity multi-fidelity Monte Carlo: the fine solver plus the
/// low-rank surrogate, allocated against the configured budget.
fn run_mfmc(c: &Campaign, csv: &mut CsvWriter) -> Result<serde_json::Value, CliError> {
    let pilot = c.cfg.estimator.pilot;
    let mut library = load_or_new_library(c)?;
    let rows = Mutex::new(Vec::new());
    let (mut q0, mut q1) = (Vec::new(), Vec::new());
    let (mut t0s, mut t1s) = (Vec::new(), Vec::new());
    for i in 0..pilot {
        let t0 = Instant::now();
        q0.push(c.fine_qoi(i as u64, Some(&rows))?);
        t0s.push(t0.elapsed().as_secs_f64());
        let sample = c.draw(i as u64)?;
        let k = c.to_low_rank(&sample)?;
        let mut opts = c.opts.clone();
        opts.sample_index = i;
        let t0 = Instant::now();
        let lib_in = std::mem::take(&mut library);
        let r = apparent_homogenize_mslrm(&c.grid, &k, c.cfg.solver.epsilon, lib_in, &opts)?;
        library = r.library;
        t1s.push(t0.elapsed().as_secs_f64());
        q1.push(c.qoi.eval(&r.tensor));
    }
    for row in rows.lock().unwrap().iter() {
        csv.write_row(row)?;
    }
    let (_, var0) = stats_or_err(&q0)?;
    let (_, var1) = stats_or_err(&q1)?;
    let cov = estimators::empirical_cov(&q0, &q1)?;
    let corr = cov / (var0 * var1).sqrt();
    let sigmas = [var0.sqrt(), var1.sqrt()];
    let gammas = [estimators::median_cost(t0s), estimators::median_cost(t1s)];
    let rs = [1.0, corr];
    let plan = estimators::mfmc_allocate(&gammas, &rs, &sigmas, c.cfg.estimator.budget)?;

    let lib = Mutex::new(library);
    let fine = |seed: u64| c.fine_qoi(seed, None).expect("fine sample failed");
    let coarse = |seed: u64| -> f64 {
        let sample = c.draw(seed).expect("draw failed");
        let k = c.to_low_rank(&sample).expect("separated form failed");
        let r = apparent_homogenize_mslrm(
            &c.grid,
            &k,
            c.cfg.solver.epsilon,
            std::mem::take(&mut lib.lock().unwrap()),
            &c.opts,
        )
        .expect("surrogate solve failed");
        *lib.lock().unwrap() = r.library;
        c.qoi.eval(&r.tensor)
    };
    let mut models: Vec<Box<dyn FnMut(u64) -> f64>> = vec![Box::new(fine), Box::new(coarse)];
    let estimate =
        estimators::mfmc_estimate(&mut models, &plan, derive_seed(c.cfg.run.seed, 1))?;
    drop(models);
    save_library(c, &lib.into_inner().unwrap())?;

    Ok(serde_json::json!({
        "mode": "mfmc",
        "estimate": estimate,
        "estimator_variance": plan.predicted_variance,
        "allocations": plan.ms,
        "budget": plan.budget,
        "correlation": corr,
        "costs": gammas,
        "predicted_reduction": plan.predicted_reduction,
    }))
}

fn library_path(c: &Campaign) -> PathBuf {
    Path::new(&c.cfg.run.out_dir).join(&c.cfg.solver.library_out)
}

fn load_or_new_library(c: &Campaign) -> Result<ModesLibrary, CliError> {
    let path = library_path(c);
    if c.cfg.solver.recycling && path.exists() {
        let file =
            File::open(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(ModesLibrary::load_json(file)?)
    } else {
        Ok(ModesLibrary::new())
    }
}

fn save_library(c: &Campaign, library: &ModesLibrary) -> Result<(), CliError> {
    if !c.cfg.solver.recycling || library.is_empty() {
        return Ok(());
    }
    let path = library_path(c);
    let file = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(library.save_json(file)?)
}

/// One run per value of a dotted config key, artifacts in per-value
/// subdirectories plus a merged comparison CSV. Failures are recorded and
/// the sweep continues.
pub fn sweep(cfg: RunConfig, param: &str, values: &[String]) -> Result<(), CliError> {
    if values.is_empty() {
        return Ok(());
    }
    let root = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
    let merged_path = root.join("sweep.csv");
    let file = File::create(&merged_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", merged_path.display())))?;
    let mut merged = BufWriter::new(file);
    writeln!(merged, "param,value,status,estimate,estimator_variance,n_samples,wall_seconds")
        .map_err(|e| CliError::Io(format!("sweep.csv: {e}")))?;
    for (i, value) in values.iter().enumerate() {
        let sub = root.join(format!("{}_{i}", param.replace('.', "_")));
        let line = match crate::config::with_override(&cfg, param, value).and_then(|mut c| {
            c.run.out_dir = sub.to_string_lossy().into_owned();
            run(c)
        }) {
            Ok(outcome) => {
                let s = &outcome.summary;
                format!(
                    "{param},{value},ok,{},{},{},{}",
                    s["estimate"],
                    s["estimator_variance"],
                    s.get("n_samples").cloned().unwrap_or(serde_json::json!(null)),
                    s["wall_seconds"]
                )
            }
            Err(e) => {
                eprintln!("sweep {param} = {value}: {e}");
                format!("{param},{value},error,,,,")
            }
        };
        writeln!(merged, "{line}").map_err(|e| CliError::Io(format!("sweep.csv: {e}")))?;
        merged.flush().map_err(|e| CliError::Io(format!("sweep.csv: {e}")))?;
    }
    Ok(())
}

/// Allocation-only planning from previously measured pilot statistics.
#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotStats {
    pub var_u: Option<f64>,
    pub var_z: Option<f64>,
    pub rho: Option<f64>,
    pub cost_fine: Option<f64>,
    pub cost_surrogate: Option<f64>,
    pub sigmas: Option<Vec<f64>>,
    pub rs: Option<Vec<f64>>,
    pub gammas: Option<Vec<f64>>,
}

pub fn plan(cfg: &RunConfig, stats_path: &Path) -> Result<serde_json::Value, CliError> {
    let text = std::fs::read_to_string(stats_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", stats_path.display())))?;
    let stats: PilotStats = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", stats_path.display())))?;
    match cfg.estimator.mode {
        EstimatorMode::Mfmc => {
            let (sigmas, rs, gammas) = match (&stats.sigmas, &stats.rs, &stats.gammas) {
                (Some(s), Some(r), Some(g)) => (s, r, g),
                _ => {
                    return Err(CliError::Config(
                        "mfmc planning needs sigmas, rs and gammas".into(),
                    ))
                }
            };
            let plan = estimators::mfmc_allocate(gammas, rs, sigmas, cfg.estimator.budget)?;
            Ok(serde_json::json!({
                "mode": "mfmc",
                "allocations": plan.ms,
                "predicted_variance": plan.predicted_variance,
                "predicted_reduction": plan.predicted_reduction,
            }))
        }
        _ => {
            let missing = || CliError::Config(
                "control-variate planning needs var_u, var_z, rho, cost_fine, cost_surrogate"
                    .into(),
            );
            let plan = estimators::cv_allocate(
                stats.var_u.ok_or_else(missing)?,
                stats.var_z.ok_or_else(missing)?,
                stats.rho.ok_or_else(missing)?,
                stats.cost_fine.ok_or_else(missing)?,
                stats.cost_surrogate.ok_or_else(missing)?,
                cfg.estimator.eta,
            )?;
            Ok(serde_json::json!({
                "mode": "cv",
                "n_u": plan.n_u,
                "n_z": plan.n_z,
                "predicted_variance": plan.predicted_variance,
                "rho": plan.rho,
            }))
        }
    }
}

pub fn inspect_library(path: &Path) -> Result<serde_json::Value, CliError> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let lib = ModesLibrary::load_json(file)?;
    let norms: Vec<f64> = lib
        .modes
        .iter()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(serde_json::json!({
        "modes": lib.len(),
        "micro_dofs": lib.modes.first().map(|m| m.len()).unwrap_or(0),
        "created_at_sample": lib.created_at,
        "mode_norms": norms,
    }))
}
