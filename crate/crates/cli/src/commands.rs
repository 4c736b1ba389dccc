//! The five workflows. Each writes its artifacts plus `resolved_config.json`
//! into the output directory.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vcclt::mom::{full_sib_models, full_sib_summaries, table1_experiment, table1_with_summaries};
use vcclt::provenance::{model_digest, Provenance};
use vcclt::simulate::{histogram_svg, mc_experiment, normalized_cumulative};
use vcclt::{clt_summary, esd_density, solve_system, support_bound, CltSummary, Complex64 as C};

use crate::config::RunConfig;
use crate::error::CliError;

/// A CLT summary together with the model it belongs to.
#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryFile {
    pub provenance: Provenance,
    pub model_digest: String,
    pub summary: CltSummary,
}

/// Between- and within-family summaries ready for the table1 command.
#[derive(Debug, Serialize, Deserialize)]
pub struct Table1Summaries {
    pub provenance: Provenance,
    pub between_digest: String,
    pub within_digest: String,
    pub between: CltSummary,
    pub within: CltSummary,
}

pub const TABLE1_SUMMARIES: &str = "table1_summaries.json";

struct Output<'a> {
    cfg: &'a RunConfig,
    provenance: Provenance,
}

impl<'a> Output<'a> {
    fn new(cfg: &'a RunConfig, seed: Option<u64>) -> Result<Self, CliError> {
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| {
            CliError::Io(format!("cannot create {}: {e}", cfg.output_dir.display()))
        })?;
        let provenance = Provenance::new(cfg.hash()?, seed);
        let out = Output { cfg, provenance };
        #[derive(Serialize)]
        struct Resolved<'b> {
            provenance: &'b Provenance,
            config: &'b RunConfig,
        }
        let resolved = Resolved {
            provenance: &out.provenance,
            config: cfg,
        };
        out.write(
            "resolved_config.json",
            serde_json::to_string_pretty(&resolved)? + "\n",
        )?;
        Ok(out)
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn write(&self, name: &str, body: String) -> Result<(), CliError> {
        std::fs::write(self.path(name), body)
            .map_err(|e| CliError::Io(format!("{}: {e}", self.path(name).display())))
    }

    /// CSV file opened with the provenance comment block already written.
    fn csv(&self, name: &str) -> Result<csv::Writer<File>, CliError> {
        let mut file = File::create(self.path(name))
            .map_err(|e| CliError::Io(format!("{}: {e}", self.path(name).display())))?;
        file.write_all(self.provenance.header_lines().as_bytes())?;
        Ok(csv::Writer::from_writer(file))
    }
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn solve(cfg: &RunConfig) -> Result<(), CliError> {
    let model = cfg.model()?;
    let out = Output::new(cfg, None)?;
    let mut w = out.csv("solve.csv")?;
    let mut header: Vec<String> = [
        "re",
        "im",
        "m_re",
        "m_im",
        "residual",
        "iterations",
        "converged",
        "status",
    ]
    .map(String::from)
    .to_vec();
    for r in 1..=model.levels() {
        header.extend([
            format!("g1_{r}_re"),
            format!("g1_{r}_im"),
            format!("g2_{r}_re"),
            format!("g2_{r}_im"),
        ]);
    }
    w.write_record(&header)?;
    let mut failures = Vec::new();
    for &[re, im] in &cfg.points {
        let z = C::new(re, im);
        let mut row = vec![num(re), num(im)];
        match solve_system(&model, z, &cfg.solver) {
            Ok(sol) => {
                let m = sol.stieltjes(&model);
                row.extend([
                    num(m.re),
                    num(m.im),
                    num(sol.residual),
                    sol.iterations.to_string(),
                ]);
                row.extend([sol.converged.to_string(), "ok".to_string()]);
                for (a, b) in sol.g1.iter().zip(&sol.g2) {
                    row.extend([num(a.re), num(a.im), num(b.re), num(b.im)]);
                }
                println!("z = {z}: m = {m}");
            }
            Err(e) => {
                row.extend(["NaN", "NaN", "NaN", "0", "false"].map(String::from));
                row.push(e.to_string());
                row.extend(std::iter::repeat_n("NaN".to_string(), 4 * model.levels()));
                eprintln!("z = {z}: {e}");
                failures.push(format!("z = {z}: {e}"));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::NonConvergence(failures.join("; ")))
    }
}

pub fn density(cfg: &RunConfig) -> Result<(), CliError> {
    let model = cfg.model()?;
    let (lo, hi) = support_bound(&model);
    let pad = 0.05 * (hi - lo).max(1e-3);
    let start = cfg.density.start.unwrap_or(lo - pad);
    let stop = cfg.density.stop.unwrap_or(hi + pad);
    let points = cfg.density.points;
    if points < 2 || stop.partial_cmp(&start) != Some(std::cmp::Ordering::Greater) {
        return Err(CliError::Config(format!("density grid needs two or more points on an increasing range, got {points} on [{start}, {stop}]")));
    }
    let grid: Vec<f64> = (0..points)
        .map(|i| start + (stop - start) * i as f64 / (points - 1) as f64)
        .collect();
    let out = Output::new(cfg, None)?;
    let dens = esd_density(&model, &grid, cfg.density.eta, &cfg.solver)?;
    let cdf = normalized_cumulative(&grid, &dens)?;
    let mut w = out.csv("density.csv")?;
    w.write_record(["x", "density", "cdf"])?;
    for ((x, d), c) in grid.iter().zip(&dens).zip(&cdf) {
        w.write_record([num(*x), num(*d), num(*c)])?;
    }
    w.flush()?;
    println!(
        "density on {points} points over [{start}, {stop}] with eta = {}",
        cfg.density.eta
    );
    Ok(())
}

fn write_summary_tables(out: &Output<'_>, summary: &CltSummary) -> Result<(), CliError> {
    let names: Vec<String> = summary.functions.iter().map(|f| f.to_string()).collect();
    let mut w = out.csv("gamma.csv")?;
    w.write_record(["function", "centering", "gamma"])?;
    for (i, name) in names.iter().enumerate() {
        w.write_record([
            name.clone(),
            num(summary.centering[i]),
            num(summary.gamma[i]),
        ])?;
    }
    w.flush()?;
    let mut w = out.csv("lambda.csv")?;
    let mut header = vec!["function".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(summary.lambda[i].iter().map(|v| num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn clt(cfg: &RunConfig) -> Result<(), CliError> {
    let model = cfg.model()?;
    let out = Output::new(cfg, None)?;
    let summary = clt_summary(&model, &cfg.functions, &cfg.contour)?;
    write_summary_tables(&out, &summary)?;
    for (f, (g, c)) in summary
        .functions
        .iter()
        .zip(summary.gamma.iter().zip(&summary.centering))
    {
        println!("{f}: centering {c:.10e}, gamma {g:.6e}");
    }
    let file = SummaryFile {
        provenance: out.provenance.clone(),
        model_digest: model_digest(&model),
        summary,
    };
    out.write(
        "clt_summary.json",
        serde_json::to_string_pretty(&file)? + "\n",
    )?;

    if cfg.model.is_none() {
        let t = &cfg.table1;
        let design = t.design()?;
        let (bm, wm) = full_sib_models(&design, t.p, &t.tau)?;
        let (between, within) = full_sib_summaries(&design, t.p, &t.tau, &t.contour)?;
        let pair = Table1Summaries {
            provenance: out.provenance.clone(),
            between_digest: model_digest(&bm),
            within_digest: model_digest(&wm),
            between,
            within,
        };
        out.write(
            TABLE1_SUMMARIES,
            serde_json::to_string_pretty(&pair)? + "\n",
        )?;
    }
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let model = cfg.model()?;
    let out = Output::new(cfg, Some(cfg.mc.master_seed))?;
    let summary = clt_summary(&model, &cfg.functions, &cfg.contour)?;
    let mut result = mc_experiment(
        &model,
        &cfg.functions,
        cfg.mc.replicates,
        cfg.mc.master_seed,
        &summary,
    )?;
    result.provenance = out.provenance.clone();
    result.save(&cfg.output_dir, "simulate")?;
    if cfg.svg {
        for (i, name) in result.functions.iter().enumerate() {
            let values: Vec<f64> = result.records.iter().map(|r| r.standardized[i]).collect();
            out.write(
                &format!("simulate_hist_{}.svg", i + 1),
                histogram_svg(&values, &format!("standardized {name}")),
            )?;
        }
    }
    let s = &result.summary;
    println!(
        "{} replicates; standardized mean {:?}; edge violations {}",
        result.replicates, s.mean, s.edge_violations
    );
    if let Some(cov) = &s.covariance {
        println!("standardized covariance {cov:?}");
    }
    Ok(())
}

fn read_summaries(path: &Path, cfg: &RunConfig) -> Result<Table1Summaries, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let pair: Table1Summaries = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let t = &cfg.table1;
    let (bm, wm) = full_sib_models(&t.design()?, t.p, &t.tau)?;
    if pair.between_digest != model_digest(&bm) || pair.within_digest != model_digest(&wm) {
        return Err(CliError::Config(format!(
            "{} was computed for a different design or parameters",
            path.display()
        )));
    }
    Ok(pair)
}

pub fn table1(cfg: &RunConfig, summaries: Option<&Path>) -> Result<(), CliError> {
    let seed = cfg.mc.master_seed;
    let pair = summaries.map(|p| read_summaries(p, cfg)).transpose()?;
    let out = Output::new(cfg, Some(seed))?;
    let mut report = match &pair {
        Some(p) => table1_with_summaries(&cfg.table1, seed, &p.between, &p.within)?,
        None => table1_experiment(&cfg.table1, seed)?,
    };
    report.provenance = out.provenance.clone();
    report.save(&cfg.output_dir, cfg.svg)?;
    print!("{}", report.table_text());
    let e = &report.empirical;
    println!(
        "{} of {} inversions succeeded",
        e.successes,
        e.successes + e.failures
    );
    Ok(())
}
