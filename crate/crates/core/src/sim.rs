//! Closed-loop simulation with stochastic model error and the warm-vs-cold
//! statistical study.
//!
//! Trials are reproducible: every trial draws its error sequence from its
//! own counter-based substream derived from the base seed and the trial
//! index, so runs are deterministic regardless of thread scheduling and the
//! warm and cold runs of one trial see identical errors.

use crate::bnb::{solve_miqp, BnbConfig};
use crate::model::StageData;
use crate::qp::SubproblemSolver;
use crate::terminal::LinkMatrices;
use crate::warmstart::{prepare_warm_start, WarmStart};
use crate::Result;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

/// A horizon problem plus the offline multiplier links it needs for warm
/// starts.
#[derive(Debug, Clone)]
pub struct Controller {
    pub stage: Arc<StageData>,
    pub links: LinkMatrices,
}

impl Controller {
    pub fn new(stage: Arc<StageData>, links: LinkMatrices) -> Self {
        Controller { stage, links }
    }

    pub fn solver(&self) -> Result<SubproblemSolver> {
        SubproblemSolver::new(Arc::clone(&self.stage))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Warm,
    Cold,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Warm => "warm",
            Mode::Cold => "cold",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Zero-mean normal model error with per-state deviation `scale * bound_i`.
#[derive(Debug, Clone)]
pub struct ErrorModel {
    pub scale: f64,
    /// Per-state magnitude reference (typically the state bounds).
    pub state_scale: DVector<f64>,
    pub seed: u64,
}

impl ErrorModel {
    pub fn new(scale: f64, state_scale: DVector<f64>, seed: u64) -> Self {
        assert!(scale >= 0.0);
        ErrorModel {
            scale,
            state_scale,
            seed,
        }
    }

    /// Independent substream for one trial.
    pub fn stream(&self, trial: u64) -> ErrorStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(trial);
        ErrorStream {
            rng,
            normal: Normal::new(0.0, 1.0).expect("unit normal"),
            sigmas: &self.state_scale * self.scale,
        }
    }
}

pub struct ErrorStream {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    sigmas: DVector<f64>,
}

impl ErrorStream {
    pub fn draw(&mut self) -> DVector<f64> {
        DVector::from_fn(self.sigmas.len(), |i, _| {
            self.sigmas[i] * self.normal.sample(&mut self.rng)
        })
    }
}

/// Per-step record of a closed-loop run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub tau: usize,
    pub state: DVector<f64>,
    pub input: Option<DVector<f64>>,
    pub error: Option<DVector<f64>>,
    /// Certified objective of the step's MIQP (`inf` when infeasible).
    pub objective: f64,
    pub qp_count: usize,
    /// Cardinality of the initial cover used at this step.
    pub cover_size: usize,
    pub warm_pre_ms: f64,
    pub warm_post_ms: f64,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SimTrace {
    pub steps: Vec<StepRecord>,
    /// True when a step's MIQP was infeasible and the run stopped early.
    pub infeasible_termination: bool,
}

impl SimTrace {
    pub fn completed(&self) -> bool {
        !self.infeasible_termination
    }
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub mode: Mode,
    pub bnb: BnbConfig,
    /// Propagate the persistent-feasibility upper bound between steps
    /// (meaningful in nominal runs only; off in the benchmark protocol).
    pub upper_bound_propagation: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            mode: Mode::Warm,
            bnb: BnbConfig::default(),
            upper_bound_propagation: false,
        }
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Receding-horizon closed loop: solve, apply the first input, step the
/// plant with a drawn error, and (in warm mode) hand the shifted frontier to
/// the next step. Terminates early if a step's MIQP is infeasible.
pub fn run_closed_loop(
    ctrl: &Controller,
    x0: &DVector<f64>,
    steps: usize,
    err: &ErrorModel,
    trial: u64,
    opts: &SimOptions,
) -> Result<SimTrace> {
    let mut solver = ctrl.solver()?;
    let mut stream = err.stream(trial);
    let model = &ctrl.stage.model;
    let mut x = x0.clone();
    let mut warm: Option<WarmStart> = None;
    let mut trace = SimTrace::default();

    for tau in 0..steps {
        let cover_size = warm.as_ref().map_or(1, |w| w.cover.len());
        let t_solve = Instant::now();
        let out = solve_miqp(
            &mut solver,
            &x,
            if opts.mode == Mode::Warm {
                warm.as_ref()
            } else {
                None
            },
            &opts.bnb,
        )?;
        let solve_ms = ms_since(t_solve);

        let Some(inc) = &out.incumbent else {
            trace.steps.push(StepRecord {
                tau,
                state: x.clone(),
                input: None,
                error: None,
                objective: f64::INFINITY,
                qp_count: out.stats.qp_solves,
                cover_size,
                warm_pre_ms: 0.0,
                warm_post_ms: 0.0,
                solve_ms,
            });
            trace.infeasible_termination = true;
            break;
        };
        let u = inc.primal.inputs[0].clone();
        let e = stream.draw();
        let x_next = model.simulate_step(&x, &u, &e)?;

        let (warm_pre_ms, warm_post_ms, next_warm) = if opts.mode == Mode::Warm {
            let t_pre = Instant::now();
            let ub_solver = if opts.upper_bound_propagation && err.scale == 0.0 {
                Some(&mut solver)
            } else {
                None
            };
            let pending = prepare_warm_start(&out, &x, &u, &ctrl.stage, &ctrl.links, ub_solver)?;
            let pre = ms_since(t_pre);
            let t_post = Instant::now();
            let ws = pending.finish(&x_next);
            let post = ms_since(t_post);
            (pre, post, Some(ws))
        } else {
            (0.0, 0.0, None)
        };

        trace.steps.push(StepRecord {
            tau,
            state: x.clone(),
            input: Some(u),
            error: Some(e),
            objective: out.objective,
            qp_count: out.stats.qp_solves,
            cover_size,
            warm_pre_ms,
            warm_post_ms,
            solve_ms,
        });
        x = x_next;
        warm = next_warm;
    }
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub steps: usize,
    pub trials: usize,
    pub error_scales: Vec<f64>,
    pub base_seed: u64,
    pub modes: Vec<Mode>,
    pub bnb: BnbConfig,
    pub upper_bound_propagation: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            steps: 50,
            trials: 10,
            error_scales: vec![1e-3],
            base_seed: 0,
            modes: vec![Mode::Warm, Mode::Cold],
            bnb: BnbConfig::default(),
            upper_bound_propagation: false,
        }
    }
}

/// One CSV row per simulated step per trial.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub trial: usize,
    pub tau: usize,
    pub mode: Mode,
    pub scale: f64,
    pub qp_count: usize,
    pub cover_size: usize,
    pub objective: f64,
    pub warm_pre_ms: f64,
    pub warm_post_ms: f64,
    pub solve_ms: f64,
    pub terminated: bool,
}

/// Aggregated order statistics per (scale, mode, step).
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub scale: f64,
    pub mode: Mode,
    pub tau: usize,
    pub metric: &'static str,
    pub min: f64,
    pub max: f64,
    pub p80: f64,
    pub p90: f64,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub summary: Vec<SummaryRow>,
    /// Completed (never-infeasible) trials per (scale, mode).
    pub completed: Vec<(f64, Mode, usize)>,
}

impl StudyResult {
    /// Rows of completed trials for one (scale, mode) pair.
    pub fn completed_rows(&self, scale: f64, mode: Mode) -> Vec<&StudyRow> {
        let terminated: std::collections::HashSet<usize> = self
            .rows
            .iter()
            .filter(|r| r.scale == scale && r.mode == mode && r.terminated)
            .map(|r| r.trial)
            .collect();
        self.rows
            .iter()
            .filter(|r| r.scale == scale && r.mode == mode && !terminated.contains(&r.trial))
            .collect()
    }

    /// Median QP count over all completed steps of one (scale, mode) pair.
    pub fn median_qp_count(&self, scale: f64, mode: Mode) -> f64 {
        let mut counts: Vec<f64> = self
            .completed_rows(scale, mode)
            .iter()
            .map(|r| r.qp_count as f64)
            .collect();
        counts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        percentile(&counts, 0.5)
    }

    pub fn write_rows_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "trial,tau,mode,c,qp_count,cover_size,theta_star,warmstart_pre_ms,warmstart_post_ms,solve_ms,terminated"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.9e},{},{},{},{:.3},{:.3},{:.3},{}",
                r.trial,
                r.tau,
                r.mode,
                r.scale,
                r.qp_count,
                r.cover_size,
                fmt_obj(r.objective),
                r.warm_pre_ms,
                r.warm_post_ms,
                r.solve_ms,
                r.terminated as u8
            )?;
        }
        Ok(())
    }

    pub fn write_summary_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "c,mode,tau,metric,min,max,p80,p90")?;
        for s in &self.summary {
            writeln!(
                w,
                "{:.9e},{},{},{},{},{},{},{}",
                s.scale, s.mode, s.tau, s.metric, s.min, s.max, s.p80, s.p90
            )?;
        }
        Ok(())
    }
}

fn fmt_obj(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.9e}")
    } else {
        "inf".to_string()
    }
}

/// Nearest-rank percentile of a sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Runs `trials` closed loops per (error scale, mode) pair and aggregates
/// per-step order statistics over the trials that completed. Trials run in
/// parallel; the output ordering is deterministic.
pub fn run_study(ctrl: &Controller, x0: &DVector<f64>, cfg: &StudyConfig) -> Result<StudyResult> {
    let mut combos = Vec::new();
    for (si, &scale) in cfg.error_scales.iter().enumerate() {
        for trial in 0..cfg.trials {
            for &mode in &cfg.modes {
                combos.push((si, scale, trial, mode));
            }
        }
    }
    let traces = crate::par::map_collect(combos, |(si, scale, trial, mode)| {
        let err = ErrorModel::new(scale, ctrl.stage_scale(), cfg.base_seed);
        let opts = SimOptions {
            mode,
            bnb: cfg.bnb.clone(),
            upper_bound_propagation: cfg.upper_bound_propagation,
        };
        let trace = run_closed_loop(ctrl, x0, cfg.steps, &err, trial as u64, &opts);
        (si, scale, trial, mode, trace)
    });

    let mut rows = Vec::new();
    let mut completed = Vec::new();
    let mut sorted_traces: Vec<_> = Vec::new();
    for item in traces {
        sorted_traces.push(item);
    }
    sorted_traces.sort_by(|a, b| {
        (a.0, a.2, mode_key(a.3)).cmp(&(b.0, b.2, mode_key(b.3)))
    });
    let mut done_count: std::collections::HashMap<(usize, u8), usize> = Default::default();
    for (si, scale, trial, mode, trace) in sorted_traces {
        let trace = trace?;
        if trace.completed() {
            *done_count.entry((si, mode_key(mode))).or_default() += 1;
        }
        let terminated = trace.infeasible_termination;
        let last = trace.steps.len();
        for (k, s) in trace.steps.iter().enumerate() {
            rows.push(StudyRow {
                trial,
                tau: s.tau,
                mode,
                scale,
                qp_count: s.qp_count,
                cover_size: s.cover_size,
                objective: s.objective,
                warm_pre_ms: s.warm_pre_ms,
                warm_post_ms: s.warm_post_ms,
                solve_ms: s.solve_ms,
                terminated: terminated && k + 1 == last,
            });
        }
    }
    for (si, &scale) in cfg.error_scales.iter().enumerate() {
        for &mode in &cfg.modes {
            completed.push((
                scale,
                mode,
                done_count.get(&(si, mode_key(mode))).copied().unwrap_or(0),
            ));
        }
    }

    // Per-step aggregates over completed trials.
    let mut summary = Vec::new();
    for &scale in &cfg.error_scales {
        for &mode in &cfg.modes {
            let rows_cm = {
                let terminated: std::collections::HashSet<usize> = rows
                    .iter()
                    .filter(|r| r.scale == scale && r.mode == mode && r.terminated)
                    .map(|r| r.trial)
                    .collect();
                rows.iter()
                    .filter(|r| {
                        r.scale == scale && r.mode == mode && !terminated.contains(&r.trial)
                    })
                    .collect::<Vec<_>>()
            };
            for tau in 0..cfg.steps {
                let step_rows: Vec<&&StudyRow> =
                    rows_cm.iter().filter(|r| r.tau == tau).collect();
                if step_rows.is_empty() {
                    continue;
                }
                for (metric, get) in [
                    ("qp_count", &(|r: &StudyRow| r.qp_count as f64) as &dyn Fn(&StudyRow) -> f64),
                    ("cover_size", &|r: &StudyRow| r.cover_size as f64),
                    ("solve_ms", &|r: &StudyRow| r.solve_ms),
                    ("warmstart_pre_ms", &|r: &StudyRow| r.warm_pre_ms),
                    ("warmstart_post_ms", &|r: &StudyRow| r.warm_post_ms),
                ] {
                    let mut vals: Vec<f64> = step_rows.iter().map(|r| get(r)).collect();
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    summary.push(SummaryRow {
                        scale,
                        mode,
                        tau,
                        metric,
                        min: vals[0],
                        max: vals[vals.len() - 1],
                        p80: percentile(&vals, 0.8),
                        p90: percentile(&vals, 0.9),
                    });
                }
            }
        }
    }

    Ok(StudyResult {
        rows,
        summary,
        completed,
    })
}

fn mode_key(m: Mode) -> u8 {
    match m {
        Mode::Warm => 0,
        Mode::Cold => 1,
    }
}

impl Controller {
    /// Per-state magnitude reference used by the error model: the symmetric
    /// state bounds recovered from pure state rows of the constraint set,
    /// falling back to ones.
    pub fn stage_scale(&self) -> DVector<f64> {
        let model = &self.stage.model;
        let dom = model.domain();
        let n_x = model.n_x;
        let mut scale = DVector::from_element(n_x, 1.0);
        for i in 0..dom.num_facets() {
            let row = dom.matrix().row(i);
            let mut nonzero = None;
            let mut pure = true;
            for c in 0..dom.dim() {
                if row[c] != 0.0 {
                    if c >= n_x || nonzero.is_some() {
                        pure = false;
                        break;
                    }
                    nonzero = Some(c);
                }
            }
            if pure {
                if let Some(c) = nonzero {
                    let bound = dom.offsets()[i] / row[c].abs();
                    if bound > 0.0 {
                        scale[c] = bound;
                    }
                }
            }
        }
        scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terminal::LinkMatrices;

    fn toy_controller() -> Controller {
        let stage = crate::bnb::tests::toy_stage(3);
        let links = LinkMatrices::identity(&stage);
        Controller::new(stage, links)
    }

    #[test]
    fn error_stream_moments() {
        let em = ErrorModel::new(1e-2, DVector::from_row_slice(&[0.5, 2.0]), 7);
        let mut stream = em.stream(3);
        let n = 100_000;
        let mut sum = DVector::zeros(2);
        let mut sumsq = DVector::zeros(2);
        for _ in 0..n {
            let e = stream.draw();
            sum += &e;
            sumsq += e.component_mul(&e);
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64;
        for i in 0..2 {
            let sigma = em.scale * em.state_scale[i];
            assert!(mean[i].abs() <= 0.05 * sigma, "mean {} vs sigma {sigma}", mean[i]);
            let std = var[i].sqrt();
            assert!(
                (std - sigma).abs() <= 0.05 * sigma,
                "std {std} vs sigma {sigma}"
            );
        }
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let ctrl = toy_controller();
        let err = ErrorModel::new(5e-3, ctrl.stage_scale(), 42);
        let x0 = DVector::from_row_slice(&[0.8]);
        let opts = SimOptions::default();
        let a = run_closed_loop(&ctrl, &x0, 8, &err, 1, &opts).unwrap();
        let b = run_closed_loop(&ctrl, &x0, 8, &err, 1, &opts).unwrap();
        assert_eq!(a.steps.len(), b.steps.len());
        for (ra, rb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(ra.state, rb.state);
            assert_eq!(ra.objective, rb.objective);
            assert_eq!(ra.qp_count, rb.qp_count);
        }
    }

    #[test]
    fn warm_and_cold_agree_along_the_loop() {
        let ctrl = toy_controller();
        let err = ErrorModel::new(1e-2, ctrl.stage_scale(), 9);
        let x0 = DVector::from_row_slice(&[1.2]);
        let warm = run_closed_loop(
            &ctrl,
            &x0,
            10,
            &err,
            0,
            &SimOptions {
                mode: Mode::Warm,
                ..SimOptions::default()
            },
        )
        .unwrap();
        let cold = run_closed_loop(
            &ctrl,
            &x0,
            10,
            &err,
            0,
            &SimOptions {
                mode: Mode::Cold,
                ..SimOptions::default()
            },
        )
        .unwrap();
        assert_eq!(warm.steps.len(), cold.steps.len());
        for (w, c) in warm.steps.iter().zip(&cold.steps) {
            assert!(
                (w.objective - c.objective).abs() <= 1e-6,
                "objectives diverged: {} vs {}",
                w.objective,
                c.objective
            );
            assert!((&w.state - &c.state).amax() <= 1e-8);
        }
    }

    #[test]
    fn study_has_deterministic_structure() {
        let ctrl = toy_controller();
        let cfg = StudyConfig {
            steps: 5,
            trials: 2,
            error_scales: vec![0.0, 1e-2],
            base_seed: 11,
            ..StudyConfig::default()
        };
        let x0 = DVector::from_row_slice(&[0.5]);
        let a = run_study(&ctrl, &x0, &cfg).unwrap();
        let b = run_study(&ctrl, &x0, &cfg).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(
                (ra.trial, ra.tau, ra.mode, ra.qp_count, ra.cover_size),
                (rb.trial, rb.tau, rb.mode, rb.qp_count, rb.cover_size)
            );
            assert_eq!(ra.objective.to_bits(), rb.objective.to_bits());
        }
        let mut csv = Vec::new();
        a.write_rows_csv(&mut csv).unwrap();
        assert!(csv.starts_with(b"trial,tau,mode,c,"));
    }

    #[test]
    fn percentiles_for_a_single_trial_equal_the_value() {
        let vals = [3.0];
        assert_eq!(percentile(&vals, 0.8), 3.0);
        assert_eq!(percentile(&vals, 0.9), 3.0);
        let vals = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(percentile(&vals, 0.8), 8.0);
        assert_eq!(percentile(&vals, 0.9), 9.0);
    }
}
