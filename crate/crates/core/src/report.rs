//! Command dispatch and the JSON run report.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{Command, RunConfig, SdeSettings};
use crate::entropy::{entropy_runs_recorded, terminal_moments, DriftOverride, EntropyError};
use crate::frames::{
    bl_functional_check, bl_superadditivity_check, cauchy_schwarz_probe, epi_check, frame_validate, lsi_check,
    reversed_bl_check, talagrand_check, FrameError, FrameSpec, GaussianFactor, InequalityReport, Quantity, Relation,
    Verdict,
};
use crate::laplace::{
    duality_gap, optimize_policy, write_trace_csv, FunctionalSpec, LaplaceError, OptimizeStatus, OptimizerConfig,
    PolicyParams, TerminalFunctional,
};
use crate::measure::{ComponentSpec, Mixture, MixtureSpec};
use crate::pathsim::{write_paths_csv, SdeConfig};
use crate::rng::derive_seed;

pub const SCHEMA_VERSION: &str = "1";
/// At most this many trajectories go into the path dump.
pub const MAX_DUMPED_PATHS: usize = 1000;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Laplace(#[from] LaplaceError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    ViolationFlagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub command: Command,
    pub status: RunStatus,
    pub config: RunConfig,
    pub results: BTreeMap<String, Value>,
    pub verdicts: Vec<InequalityReport>,
    pub warnings: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        match self.status {
            RunStatus::Ok => 0,
            RunStatus::ViolationFlagged => 2,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

/// Results of one command before they are wrapped into a [`Report`].
#[derive(Debug, Default)]
pub struct Outcome {
    pub results: BTreeMap<String, Value>,
    pub verdicts: Vec<InequalityReport>,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn put<T: Serialize>(&mut self, key: &str, v: T) {
        self.results
            .insert(key.to_string(), serde_json::to_value(v).expect("serializable result"));
    }

    fn verdict(&mut self, label: &str, mut r: InequalityReport) {
        r.name = format!("{label}/{}", r.name);
        self.verdicts.push(r);
    }

    fn merge(&mut self, label: &str, other: Outcome) {
        for (k, v) in other.results {
            self.results.insert(format!("{label}/{k}"), v);
        }
        for r in other.verdicts {
            self.verdict(label, r);
        }
        self.warnings
            .extend(other.warnings.into_iter().map(|w| format!("{label}: {w}")));
    }
}

fn dump_path(cfg: &RunConfig) -> PathBuf {
    match &cfg.output {
        Some(out) => PathBuf::from(format!("{out}.paths.csv")),
        None => PathBuf::from("paths.csv"),
    }
}

fn create(path: &PathBuf) -> Result<BufWriter<File>, RunError> {
    File::create(path).map(BufWriter::new).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn run(cfg: &RunConfig) -> Result<Report, RunError> {
    let start = Instant::now();
    let outcome = match cfg.command {
        Command::Entropy => run_entropy(cfg)?,
        Command::Laplace => run_laplace(cfg)?,
        Command::Optimize => run_optimize(cfg)?,
        Command::Talagrand => {
            let target = cfg.target.as_ref().expect("validated");
            let mut o = Outcome::default();
            o.verdicts.push(talagrand_check(target, &cfg.sde_config(target.dim))?);
            o
        }
        Command::Lsi => {
            let mut o = Outcome::default();
            o.verdicts
                .push(lsi_check(cfg.target.as_ref().expect("validated"), cfg.samples(), cfg.seed)?);
            o
        }
        Command::Epi => {
            let mut o = Outcome::default();
            o.verdicts = epi_check(
                cfg.eta.as_ref().expect("validated"),
                cfg.xi.as_ref().expect("validated"),
                cfg.thetas.as_ref().expect("validated"),
                cfg.samples(),
                cfg.seed,
            )?;
            o
        }
        Command::Bl => {
            let frame = cfg.frame.as_ref().expect("validated");
            let mut o = Outcome::default();
            o.put("frame_diagnostics", frame_validate(frame)?);
            o.verdicts
                .push(bl_superadditivity_check(frame, cfg.target.as_ref().expect("validated"))?);
            if let Some(factors) = &cfg.factors {
                o.verdicts.push(bl_functional_check(
                    frame,
                    factors,
                    cfg.samples(),
                    derive_seed(cfg.seed, &[1]),
                )?);
            }
            o
        }
        Command::Rbl => run_rbl(
            cfg.frame.as_ref().expect("validated"),
            cfg.targets.as_ref().expect("validated"),
            &cfg.sde_config(cfg.frame.as_ref().expect("validated").ambient_dim),
        )?,
        Command::VerifyAll => canonical_suite(cfg.seed, &cfg.sde, cfg.samples())?,
    };
    let status = if outcome.verdicts.iter().any(InequalityReport::is_violation) {
        RunStatus::ViolationFlagged
    } else {
        RunStatus::Ok
    };
    Ok(Report {
        schema_version: SCHEMA_VERSION.to_string(),
        command: cfg.command,
        status,
        config: cfg.clone(),
        results: outcome.results,
        verdicts: outcome.verdicts,
        warnings: outcome.warnings,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_entropy(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let spec = cfg.target.as_ref().expect("validated");
    let fault = match cfg.test_hooks.and_then(|h| h.drift_scale) {
        Some(s) => DriftOverride::Scale(s),
        None => DriftOverride::None,
    };
    let record = if cfg.dump_paths {
        cfg.sde.n_paths.min(MAX_DUMPED_PATHS)
    } else {
        0
    };
    let mut o = entropy_outcome(spec, &cfg.sde_config(spec.dim), &fault, record, cfg.samples())?;
    if let Some(batch) = o.1 {
        let path = dump_path(cfg);
        let w = create(&path)?;
        write_paths_csv(&batch, w).map_err(|source| RunError::Io {
            path: path.display().to_string(),
            source,
        })?;
        o.0.put("path_dump", path.display().to_string());
    }
    Ok(o.0)
}

fn entropy_outcome(
    spec: &MixtureSpec,
    sde: &SdeConfig,
    fault: &DriftOverride,
    record: usize,
    samples: usize,
) -> Result<(Outcome, Option<crate::pathsim::PathBatch>), RunError> {
    let mixture = Mixture::new(spec).map_err(EntropyError::from)?;
    let (report, fine, coarse) = entropy_runs_recorded(spec, sde, fault, record)?;
    let mut o = Outcome::default();
    let reference = match report.closed_form {
        Some(h) => Quantity::Exact(h),
        None => Quantity::Estimate(mixture.relative_entropy_mc(samples, derive_seed(sde.seed, &[7]))),
    };
    // ent(nu) <= 0.5 E||U||^2 for any drift reaching nu, with equality for the bridge drift
    let verdict = InequalityReport::new(
        "entropy_vs_energy",
        reference,
        Quantity::Estimate(report.energy_estimate),
        Relation::LessEq,
    )
    .allow(report.bias_proxy.unwrap_or(0.0));
    o.put("direct_entropy", reference);
    o.put("coarse_energy", coarse.energy_estimate());
    o.put("terminal_moments", terminal_moments(&fine, &mixture));
    o.put("entropy", &report);
    if !matches!(fault, DriftOverride::None) {
        o.warnings.push("drift was modified by a test hook".into());
    }
    o.verdicts.push(verdict);
    Ok((o, (record > 0).then_some(fine)))
}

fn laplace_outcome(f_spec: &FunctionalSpec, policy: &PolicyParams, sde: &SdeConfig) -> Result<Outcome, RunError> {
    let f = TerminalFunctional::new(f_spec)?;
    let gap = duality_gap(&f, policy, sde)?;
    let mut o = Outcome::default();
    o.put("objective", gap.objective);
    o.put("log_laplace", gap.log_laplace);
    o.put("log_laplace_exact", f.log_laplace_exact());
    o.put("duality_gap", json!({"value": gap.gap, "std_error": gap.std_error}));
    o.verdicts.push(InequalityReport::new(
        "boue_lower_bound",
        Quantity::Estimate(gap.objective),
        Quantity::Estimate(gap.log_laplace),
        Relation::LessEq,
    ));
    Ok(o)
}

fn run_laplace(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let f_spec = cfg.functional.as_ref().expect("validated");
    let dim = TerminalFunctional::new(f_spec)?.dim();
    let policy = cfg.policy.clone().unwrap_or(PolicyParams::Constant { c: vec![0.0; dim] });
    laplace_outcome(f_spec, &policy, &cfg.sde_config(dim))
}

fn run_optimize(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let f_spec = cfg.functional.as_ref().expect("validated");
    let opt = cfg.optimizer.as_ref().expect("validated");
    let f = TerminalFunctional::new(f_spec)?;
    let sde = cfg.sde_config(f.dim());
    let res = optimize_policy(
        &f,
        opt.kind,
        opt.pieces,
        &sde,
        &OptimizerConfig {
            iterations: opt.iterations,
            step_size: opt.step_size,
            batch: opt.batch,
        },
    )?;
    let mut o = laplace_outcome(f_spec, &res.policy, &SdeConfig {
        seed: derive_seed(cfg.seed, &[2]),
        ..sde
    })?;
    o.put("optimized_objective", res.objective);
    o.put("initial_objective", res.initial_objective);
    o.put("optimizer_status", res.status);
    o.put("policy", &res.policy);
    if res.status == OptimizeStatus::NoImprovement {
        o.warnings.push("optimizer did not improve on the zero policy".into());
    }
    if let Some(trace) = &opt.trace {
        let path = PathBuf::from(trace);
        let w = create(&path)?;
        write_trace_csv(&res.trace, w).map_err(|source| RunError::Io {
            path: trace.clone(),
            source,
        })?;
    }
    Ok(o)
}

fn run_rbl(frame: &FrameSpec, targets: &[MixtureSpec], sde: &SdeConfig) -> Result<Outcome, RunError> {
    let out = reversed_bl_check(frame, targets, sde)?;
    let mut o = Outcome::default();
    o.put("fitted_mean", &out.fitted_mean);
    o.put("fitted_cov", &out.fitted_cov);
    o.put("item_energies", &out.item_energies);
    o.put("energy_chain_min_margin", out.chain_min_margin);
    o.verdicts.push(out.entropy);
    o.verdicts.push(out.energy_chain);
    Ok(o)
}

fn diag(mean: Vec<f64>, var: &[f64]) -> MixtureSpec {
    let d = var.len();
    let cov = (0..d)
        .map(|i| (0..d).map(|j| if i == j { var[i] } else { 0.0 }).collect())
        .collect();
    MixtureSpec::gaussian(mean, cov)
}

/// Equal-weight mixture of `N(+-m, v I)`.
pub fn symmetric_mixture(m: &[f64], v: f64) -> MixtureSpec {
    let d = m.len();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { v } else { 0.0 }).collect())
        .collect();
    MixtureSpec {
        dim: d,
        components: vec![
            ComponentSpec {
                weight: 0.5,
                mean: m.to_vec(),
                cov: cov.clone(),
            },
            ComponentSpec {
                weight: 0.5,
                mean: m.iter().map(|x| -x).collect(),
                cov,
            },
        ],
    }
}

/// Targets used by the canonical suite.
pub fn canonical_targets() -> Vec<(&'static str, MixtureSpec)> {
    vec![
        ("standard", MixtureSpec::standard(2)),
        ("shifted", MixtureSpec::isotropic(vec![1.0, 0.0], 1.0)),
        ("narrow", MixtureSpec::isotropic(vec![0.0, 0.0], 0.5)),
        ("shifted_narrow", MixtureSpec::isotropic(vec![1.0, 0.0], 0.5)),
        ("mixture", symmetric_mixture(&[1.0, 0.0], 0.5)),
    ]
}

/// All module checks with fixed derived seeds.
pub fn canonical_suite(seed: u64, sde: &SdeSettings, samples: usize) -> Result<Outcome, RunError> {
    let mut all = Outcome::default();
    let cfg = |tag: u64, dim: usize| SdeConfig::new(sde.n_steps, sde.n_paths, derive_seed(seed, &[tag]), dim);

    for (k, (name, spec)) in canonical_targets().into_iter().enumerate() {
        let (o, _) = entropy_outcome(&spec, &cfg(100 + k as u64, 2), &DriftOverride::None, 0, samples)?;
        all.merge(&format!("entropy/{name}"), o);
        let mut t = Outcome::default();
        t.verdicts.push(talagrand_check(&spec, &cfg(200 + k as u64, 2))?);
        all.merge(&format!("talagrand/{name}"), t);
        let mut l = Outcome::default();
        l.verdicts.push(lsi_check(&spec, samples, derive_seed(seed, &[300 + k as u64]))?);
        all.merge(&format!("lsi/{name}"), l);
    }
    let mut l = Outcome::default();
    l.verdicts
        .push(lsi_check(&MixtureSpec::isotropic(vec![0.0], 0.5), samples, derive_seed(seed, &[310]))?);
    all.merge("lsi/narrow_1d", l);

    let thetas = [PI / 8.0, PI / 4.0, 3.0 * PI / 8.0];
    let bimodal = symmetric_mixture(&[2.0], 0.25);
    for (k, (name, eta)) in [("gaussian", MixtureSpec::standard(1)), ("bimodal", bimodal)]
        .into_iter()
        .enumerate()
    {
        let mut e = Outcome::default();
        e.verdicts = epi_check(
            &eta,
            &MixtureSpec::standard(1),
            &thetas,
            samples,
            derive_seed(seed, &[400 + k as u64]),
        )?;
        all.merge(&format!("epi/{name}"), e);
    }

    let frames = [("axes", FrameSpec::coordinate_axes(2)), ("mercedes_benz", FrameSpec::mercedes_benz())];
    for (fname, frame) in &frames {
        let mut f = Outcome::default();
        f.put("diagnostics", frame_validate(frame)?);
        let v = [0.7, -1.3];
        let aligned: Vec<Vec<f64>> = (0..frame.len()).map(|i| frame.project(i, &v)).collect();
        f.verdicts.push(cauchy_schwarz_probe(frame, &aligned)?);
        for (gname, g) in [
            ("shifted", MixtureSpec::isotropic(vec![1.0, 0.0], 1.0)),
            ("anisotropic", diag(vec![0.0, 0.0], &[0.5, 2.0])),
        ] {
            let mut r = bl_superadditivity_check(frame, &g)?;
            r.name = format!("{}/{gname}", r.name);
            f.verdicts.push(r);
        }
        all.merge(&format!("frame/{fname}"), f);
    }

    let rbl_cases: [(&str, FrameSpec, Vec<MixtureSpec>); 3] = [
        (
            "axes_standard",
            FrameSpec::coordinate_axes(2),
            vec![MixtureSpec::standard(1), MixtureSpec::standard(1)],
        ),
        (
            "axes",
            FrameSpec::coordinate_axes(2),
            vec![MixtureSpec::isotropic(vec![1.0], 1.0), MixtureSpec::standard(1)],
        ),
        (
            "mercedes_benz",
            FrameSpec::mercedes_benz(),
            vec![
                MixtureSpec::isotropic(vec![0.5], 0.7),
                MixtureSpec::isotropic(vec![-0.3], 1.5),
                MixtureSpec::isotropic(vec![0.8], 1.0),
            ],
        ),
    ];
    for (k, (name, frame, targets)) in rbl_cases.iter().enumerate() {
        let o = run_rbl(frame, targets, &cfg(500 + k as u64, 2))?;
        all.merge(&format!("rbl/{name}"), o);
    }

    let factor = |a: f64, q: f64| GaussianFactor {
        a: vec![a],
        q: vec![vec![q]],
    };
    let mut b = Outcome::default();
    let mut r = bl_functional_check(
        &FrameSpec::coordinate_axes(2),
        &[factor(0.5, 0.0), factor(-0.3, 0.0)],
        samples,
        derive_seed(seed, &[600]),
    )?;
    r.name = format!("{}/axes", r.name);
    b.verdicts.push(r);
    let mut r = bl_functional_check(
        &FrameSpec::mercedes_benz(),
        &vec![factor(0.0, -0.5); 3],
        samples,
        derive_seed(seed, &[601]),
    )?;
    r.name = format!("{}/mercedes_benz", r.name);
    b.verdicts.push(r);
    all.merge("bl_functional", b);

    let laplace_cases: Vec<(&str, FunctionalSpec, PolicyParams)> = vec![
        (
            "linear_optimal",
            FunctionalSpec::Linear { a: vec![1.0, 0.0] },
            PolicyParams::Constant { c: vec![1.0, 0.0] },
        ),
        (
            "linear_zero",
            FunctionalSpec::Linear { a: vec![1.0, 0.0] },
            PolicyParams::Constant { c: vec![0.0, 0.0] },
        ),
        (
            "quadratic",
            FunctionalSpec::Quadratic { q: vec![vec![0.5]] },
            PolicyParams::Affine {
                dim: 1,
                pieces: 1,
                a: vec![0.5],
                b: vec![0.0],
            },
        ),
        (
            "log_mixture",
            FunctionalSpec::LogMixture {
                target: MixtureSpec::isotropic(vec![1.0, 0.0], 1.0),
            },
            PolicyParams::Constant { c: vec![1.0, 0.0] },
        ),
    ];
    for (k, (name, f, p)) in laplace_cases.iter().enumerate() {
        let o = laplace_outcome(f, p, &cfg(700 + k as u64, p.dim()))?;
        all.merge(&format!("laplace/{name}"), o);
    }
    Ok(all)
}

/// Whether every verdict in the report is something other than a violation.
pub fn no_violations(verdicts: &[InequalityReport]) -> bool {
    verdicts.iter().all(|v| v.verdict != Verdict::ViolationFlagged)
}

/// Report serialized with the wall-clock field removed.
pub fn without_wall_clock(report_json: &str) -> Result<String, serde_json::Error> {
    let mut v: Value = serde_json::from_str(report_json)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("wall_clock_seconds");
    }
    serde_json::to_string_pretty(&v)
}
