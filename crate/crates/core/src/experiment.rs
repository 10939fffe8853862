//! Pretraining, request sequences and report aggregation shared by the CLI,
//! the Python module and the acceptance harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::Method;
use crate::config::ExperimentConfig;
use crate::container::{load_model, load_world, save_model, save_world};
use crate::error::{CortisError, Result};
use crate::evalkit::{calibrate_thresholds, EvalReport, Thresholds};
use crate::rundir::{audit_run_dir, RunDir};
use crate::toytts::{make_world, pretrain, SpeakerId, SpeakerWorld, ToyModel};
use crate::unlearn::{audit_non_retention, process_request, AuditReport, RemainData, RequestLog, RunState, UnlearnRequest};

pub const WORLD_FILE: &str = "world.bin";
pub const THETA0_FILE: &str = "theta0.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub world: SpeakerWorld,
    pub theta0: ToyModel,
}

pub fn build_pretrained(config: &ExperimentConfig) -> Result<Pretrained> {
    let world = make_world(&config.world)?;
    let init = ToyModel::new(&world, &config.model);
    let (theta0, _) = pretrain(&world, &init, &config.pretrain)?;
    Ok(Pretrained { world, theta0 })
}

pub fn save_pretrained(p: &Pretrained, dir: &Path, force: bool) -> Result<()> {
    let (world, theta) = (dir.join(WORLD_FILE), dir.join(THETA0_FILE));
    if !force && (world.exists() || theta.exists()) {
        return Err(CortisError::Precondition(format!(
            "{} already holds a checkpoint; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| CortisError::io(dir, e))?;
    save_world(&p.world, &world)?;
    save_model(&p.theta0, &theta)
}

pub fn load_pretrained(dir: &Path) -> Result<Pretrained> {
    let theta = dir.join(THETA0_FILE);
    if !theta.exists() {
        return Err(CortisError::Precondition(format!(
            "no pretrained checkpoint at {}; run pretrain first",
            theta.display()
        )));
    }
    let p = Pretrained {
        world: load_world(&dir.join(WORLD_FILE))?,
        theta0: load_model(&theta)?,
    };
    if p.theta0.voice_dim() != p.world.voice_dim() || p.theta0.output_dim() != p.world.signal_dim() {
        return Err(CortisError::Dimension("checkpoint does not match its world".into()));
    }
    Ok(p)
}

pub fn calibrate(config: &ExperimentConfig, world: &SpeakerWorld) -> Result<Thresholds> {
    calibrate_thresholds(world, config.calibration_pairs, config.eval.seed)
}

pub fn remain_data(config: &ExperimentConfig, world: &SpeakerWorld) -> Result<RemainData> {
    let r = &config.remain;
    Ok(RemainData::sample(world, &r.train_speakers, &r.eval_speakers, r.per_speaker, r.seed)?
        .with_background(world, r.background, r.seed))
}

#[derive(Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub reports: Vec<EvalReport>,
    pub state: RunState,
    /// Audit after the last request; a failure here only survives when
    /// the run was started with `violate_c2`.
    pub audit: AuditReport,
}

fn merge_audits(a: AuditReport, b: AuditReport) -> AuditReport {
    let violations: Vec<String> = a.violations.into_iter().chain(b.violations).collect();
    AuditReport {
        passed: violations.is_empty(),
        violations,
    }
}

/// Runs the first `n_requests` requests of the config for `method` and
/// `seed`, from θ₀. With `dir`, forget data is staged under `incoming/` and
/// read back from there, state and reports are written after every request
/// and the directory is audited. An audit failure aborts the run unless
/// `violate_c2` is set; cumulative TGU requires it.
pub fn run_sequence(
    config: &ExperimentConfig,
    pre: &Pretrained,
    method: Method,
    seed: u64,
    n_requests: usize,
    dir: Option<&RunDir>,
    violate_c2: bool,
) -> Result<RunOutcome> {
    config.validate()?;
    if method.retains_forget_data() && !violate_c2 {
        return Err(CortisError::Config(format!(
            "{method} retains forget data and only runs with --violate-c2"
        )));
    }
    if n_requests == 0 || n_requests > config.requests.len() {
        return Err(CortisError::Config(format!(
            "requests must lie in 1..={}, got {n_requests}",
            config.requests.len()
        )));
    }
    let mut uc = config.unlearn.clone();
    uc.method = method;
    uc.seed = seed;
    let mut state = RunState::new(pre.theta0.clone(), remain_data(config, &pre.world)?);
    let mut reports = Vec::with_capacity(n_requests);
    let mut audit = audit_non_retention(&state);
    for (k, speakers) in config.requests[..n_requests].iter().enumerate() {
        let i = k + 1;
        let synthesized = UnlearnRequest::synthesize(&pre.world, i, speakers.clone(), uc.forget_utterances, seed)?;
        let mut request = match dir {
            Some(d) => {
                d.stage(&synthesized)?;
                drop(synthesized);
                d.take_staged(i, speakers.clone())?
            }
            None => synthesized,
        };
        let report = process_request(&mut state, &mut request, &pre.world, &uc, &config.eval)?;
        audit = audit_non_retention(&state);
        if let Some(d) = dir {
            d.save_state(&state)?;
            d.save_report(&report)?;
            d.clear_incoming()?;
            audit = merge_audits(audit, audit_run_dir(d.root())?);
        }
        reports.push(report);
        if !audit.passed && !violate_c2 {
            return Err(CortisError::C2Violation(audit.violations.join("; ")));
        }
    }
    if let Some(d) = dir {
        let path = d.root().join("reports").join("audit.json");
        let text = serde_json::to_string_pretty(&audit).expect("serializable");
        fs::write(&path, text).map_err(|e| CortisError::io(&path, e))?;
    }
    Ok(RunOutcome {
        method,
        seed,
        reports,
        state,
        audit,
    })
}

/// One run's reports with the request order needed to name S-f columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub requests: Vec<Vec<SpeakerId>>,
    pub reports: Vec<EvalReport>,
    pub log: Vec<RequestLog>,
}

impl RunRecord {
    pub fn from_outcome(o: &RunOutcome) -> Self {
        Self {
            method: o.method.name().to_string(),
            seed: o.seed,
            requests: o.state.requests.clone(),
            reports: o.reports.clone(),
            log: o.state.log.clone(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let run = RunDir::open(dir)?;
        let state = run.load_state()?;
        let reports = run.reports()?;
        let first = state
            .log
            .first()
            .ok_or_else(|| CortisError::Precondition(format!("{} has no processed request", dir.display())))?;
        Ok(Self {
            method: first.method.name().to_string(),
            seed: first.seed,
            requests: state.requests.clone(),
            reports,
            log: state.log,
        })
    }

    fn forget_order(&self) -> Vec<SpeakerId> {
        self.requests.iter().flatten().copied().collect()
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

/// Table-1-shaped CSV: one row per (run, request). `S_fk` is the k-th
/// forgotten speaker in request order, blank until it has been requested.
/// Runs must share one request sequence.
pub fn reports_csv(runs: &[RunRecord]) -> Result<String> {
    let order = match runs.first() {
        Some(r) => r.forget_order(),
        None => return Err(CortisError::Precondition("no runs to report".into())),
    };
    if let Some(r) = runs.iter().find(|r| r.forget_order() != order) {
        return Err(CortisError::Precondition(format!(
            "run {} seed {} forgets {:?}, others forget {:?}; S-f columns would not align",
            r.method,
            r.seed,
            r.forget_order(),
            order
        )));
    }
    let n = order.len();
    let mut out = String::from("request,method,seed,W_R,W_F,S_R");
    (1..=n).for_each(|k| write!(out, ",S_f{k}").unwrap());
    out.push_str(",W_R_std,W_F_std,S_R_std");
    (1..=n).for_each(|k| write!(out, ",S_f{k}_std").unwrap());
    out.push('\n');
    for run in runs {
        for rep in &run.reports {
            write!(
                out,
                "{},{},{},{},{},{}",
                rep.request_index,
                run.method,
                run.seed,
                fmt_f(rep.w_r),
                fmt_f(rep.w_f),
                fmt_f(rep.s_r)
            )
            .unwrap();
            let cell = |m: &BTreeMap<SpeakerId, f64>, s: &SpeakerId| m.get(s).map_or(String::new(), |v| fmt_f(*v));
            order.iter().for_each(|s| write!(out, ",{}", cell(&rep.s_f, s)).unwrap());
            write!(out, ",{},{},{}", fmt_f(rep.w_r_std), fmt_f(rep.w_f_std), fmt_f(rep.s_r_std)).unwrap();
            order.iter().for_each(|s| write!(out, ",{}", cell(&rep.s_f_std, s)).unwrap());
            out.push('\n');
        }
    }
    Ok(out)
}

/// Per-request cost rows: steps, wall time, projection cost and the size
/// of the state carried forward.
pub fn cost_csv(runs: &[RunRecord]) -> String {
    let mut out = String::from(
        "request,method,seed,steps,forget_steps,mask_size,merged_rank,wall_seconds,projection_us_per_step,carried_bytes\n",
    );
    for run in runs {
        for l in &run.log {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3},{:.3},{}",
                l.index,
                run.method,
                run.seed,
                l.steps,
                l.forget_steps,
                l.mask_size,
                l.merged_rank,
                l.wall_seconds,
                1e6 * l.projection_seconds_per_step(),
                l.carried_bytes
            )
            .unwrap();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub method: String,
    pub seed: u64,
    pub request: Vec<usize>,
    pub s_r: Vec<f64>,
    pub s_r_std: Vec<f64>,
    /// Per forgotten speaker, in request order: S-f at every request, `None`
    /// before the speaker was requested.
    pub s_f: Vec<(SpeakerId, Vec<Option<f64>>)>,
}

/// S-R line and per-speaker S-f points across requests, one series per run.
pub fn plot_series(runs: &[RunRecord]) -> Vec<PlotSeries> {
    runs.iter()
        .map(|run| PlotSeries {
            method: run.method.clone(),
            seed: run.seed,
            request: run.reports.iter().map(|r| r.request_index).collect(),
            s_r: run.reports.iter().map(|r| r.s_r).collect(),
            s_r_std: run.reports.iter().map(|r| r.s_r_std).collect(),
            s_f: run
                .forget_order()
                .into_iter()
                .map(|s| (s, run.reports.iter().map(|r| r.s_f.get(&s).copied()).collect()))
                .collect(),
        })
        .collect()
}
