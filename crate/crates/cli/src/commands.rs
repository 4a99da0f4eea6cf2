use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use regime_cvar::backtest::{
    drawdown_series, load_generator, run_walk_forward, save_generator, test_range, training_set, BacktestReport,
    ForecastSeries,
};
use regime_cvar::config::RunConfig;
use regime_cvar::data_io::{load_price_csv, to_returns, IngestReport, ReturnPanel};
use regime_cvar::diagnostics::{diagnose, uplift_table, write_table_csv, DiagnosticsReport, UpliftRow};
use regime_cvar::regime_hmm::{bic, filter_posteriors, rolling_refit};
use regime_cvar::scenario_gen::TrainerCheckpoint;
use regime_cvar::synth::{prices, simulate, SynthSpec};
use regime_cvar::{Error, Result};

use crate::{BacktestArgs, Ctx, DataArgs, DiagnoseArgs, FitHmmArgs, IngestArgs, ReportArgs, SynthArgs, TrainGenArgs};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parent(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_config(ctx: &Ctx, path: &Path) -> Result<RunConfig> {
    RunConfig::load(ctx.path(path))
}

/// Every run echoes its fully resolved configuration next to its outputs.
fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join("resolved_config.toml"), &cfg.to_toml()?)
}

fn data_path(ctx: &Ctx, flag: Option<&PathBuf>, fallback: Option<&String>, what: &str) -> Result<PathBuf> {
    match (flag, fallback) {
        (Some(p), _) => Ok(ctx.path(p)),
        (None, Some(p)) => Ok(ctx.path(Path::new(p))),
        (None, None) => Err(Error::Config(format!("no {what} path given on the command line or in the config"))),
    }
}

fn load_returns(ctx: &Ctx, args: &DataArgs, cfg: &RunConfig) -> Result<ReturnPanel> {
    let path = data_path(ctx, args.returns.as_ref(), cfg.data.returns.as_ref(), "returns")?;
    ReturnPanel::load_csv(&path).map_err(|e| e.with_context(format!("returns {}", path.display())))
}

pub fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::default();
    if let Some(d) = a.days {
        spec.days = d;
    }
    if let Some(n) = a.assets {
        spec.assets = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let (panel, path) = simulate(&spec)?;
    let out = ctx.path(&a.out);
    prices(&panel, &spec.start)?.write_csv(create(&out)?)?;
    if let Some(r) = &a.regimes {
        let mut w = csv::Writer::from_writer(create(&ctx.path(r))?);
        w.write_record(["date", "regime"])?;
        for (d, s) in panel.dates.iter().zip(&path) {
            w.write_record([d.as_str(), &s.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(r, e))?;
    }
    Ok(())
}

pub fn cmd_ingest(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let cfg = a.config.as_ref().map(|c| load_config(ctx, c)).transpose()?;
    let data = cfg.as_ref().map(|c| &c.data);
    let src = data_path(ctx, a.prices.as_ref(), data.and_then(|d| d.prices.as_ref()), "prices")?;
    let out = data_path(ctx, a.out.as_ref(), data.and_then(|d| d.returns.as_ref()), "returns output")?;
    let panel = load_price_csv(&src).map_err(|e| e.with_context(format!("prices {}", src.display())))?;
    let returns = to_returns(&panel)?;
    returns.write_csv(create(&out)?)?;
    let report = IngestReport {
        source: src.display().to_string(),
        rows_kept: panel.dates.len(),
        rows_dropped: panel.dropped_rows,
        assets: panel.assets.clone(),
        first_date: returns.dates[0].clone(),
        last_date: returns.dates[returns.n_dates() - 1].clone(),
    };
    let dir = parent(&out);
    write_text(&dir.join("ingest_report.json"), &serde_json::to_string_pretty(&report)?)?;
    if let Some(cfg) = &cfg {
        write_resolved(cfg, &dir)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub k: usize,
    pub mean_bic: f64,
    pub min_bic: f64,
    pub max_bic: f64,
    pub n_refits: usize,
    /// Refits at which this K had the lowest BIC.
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmReport {
    pub window: usize,
    pub stride: usize,
    pub last_row_date: String,
    pub refit_dates: Vec<String>,
    pub table: Vec<BicRow>,
    pub selected_k: usize,
    /// Last refit with the configured state count.
    pub model: serde_json::Value,
}

/// Rolling refits on the data before the test split, for every K in the
/// list, scored by BIC on each refit's own window.
pub fn cmd_fit_hmm(ctx: &Ctx, a: &FitHmmArgs) -> Result<()> {
    let cfg = load_config(ctx, &a.data.config)?;
    if cfg.hmm.k_list.is_empty() {
        return Err(Error::Config("hmm.k_list is empty".into()));
    }
    let returns = load_returns(ctx, &a.data, &cfg)?;
    let (_, val_end, _) = test_range(&cfg, &returns)?;
    let pre = returns.slice(0, val_end + 1);
    let window = cfg.hmm.window.min(pre.n_dates());
    let mut scores: Vec<Vec<f64>> = Vec::new();
    let mut refit_dates = Vec::new();
    let mut model = serde_json::Value::Null;
    let mut ks = cfg.hmm.k_list.clone();
    ks.sort_unstable();
    ks.dedup();
    for &k in &ks {
        let fits = rolling_refit(&pre, k, window, cfg.hmm.stride, cfg.hmm.em_options())
            .map_err(|e| e.with_context(format!("K = {k}")))?;
        let row = fits
            .iter()
            .map(|f| bic(&f.model, &pre.slice(f.index + 1 - window, f.index + 1)))
            .collect::<Result<Vec<_>>>()?;
        refit_dates = fits.iter().map(|f| f.date.clone()).collect();
        if k == cfg.hmm.states {
            if let Some(last) = fits.last() {
                model = serde_json::from_str(&last.model.to_json()?)?;
            }
        }
        scores.push(row);
    }
    let n = scores[0].len();
    let mut wins = vec![0; ks.len()];
    for r in 0..n {
        let best = (0..ks.len()).min_by(|&i, &j| scores[i][r].total_cmp(&scores[j][r])).unwrap();
        wins[best] += 1;
    }
    let table: Vec<BicRow> = ks
        .iter()
        .zip(&scores)
        .zip(&wins)
        .map(|((&k, s), &w)| BicRow {
            k,
            mean_bic: s.iter().sum::<f64>() / s.len() as f64,
            min_bic: s.iter().copied().fold(f64::INFINITY, f64::min),
            max_bic: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n_refits: s.len(),
            wins: w,
        })
        .collect();
    let selected_k = table.iter().min_by(|a, b| a.mean_bic.total_cmp(&b.mean_bic)).unwrap().k;
    let report = HmmReport {
        window,
        stride: cfg.hmm.stride,
        last_row_date: pre.dates[pre.n_dates() - 1].clone(),
        refit_dates,
        table,
        selected_k,
        model,
    };
    let out = ctx.path(&a.out);
    write_text(&out, &serde_json::to_string_pretty(&report)?)?;
    write_resolved(&cfg, &parent(&out))
}

#[derive(Serialize)]
struct TrainLog<'a> {
    steps: usize,
    tag: &'a str,
    final_loss: f64,
    flagged_fraction: f64,
    losses: &'a [f64],
}

pub fn cmd_train_gen(ctx: &Ctx, a: &TrainGenArgs) -> Result<()> {
    let mut cfg = load_config(ctx, &a.data.config)?;
    if let Some(eta) = a.eta {
        cfg.generator.tail.eta = eta;
        cfg.validate()?;
    }
    let returns = load_returns(ctx, &a.data, &cfg)?;
    let set = training_set(&cfg, &returns)?;
    let mut trainer = match &a.resume {
        Some(p) => set.resume(&cfg, &TrainerCheckpoint::load(ctx.path(p))?)?,
        None => set.trainer(&cfg)?,
    };
    if let Some(stop) = a.stop_at {
        let path = ctx.path(a.checkpoint.as_ref().expect("clap requires --checkpoint"));
        trainer.run_until(stop.min(cfg.generator.train.steps))?;
        create(&path)?;
        trainer.checkpoint().save(&path)?;
        return write_resolved(&cfg, &parent(&path));
    }
    trainer.run_until(cfg.generator.train.steps)?;
    let trained = set.finish(&cfg, trainer.finish());
    let out = ctx.path(&a.out);
    create(&out)?;
    save_generator(&out, &trained.generator, &trained.sidecar)?;
    let log = TrainLog {
        steps: cfg.generator.train.steps,
        tag: &trained.sidecar.tag,
        final_loss: trained.sidecar.final_loss,
        flagged_fraction: trained.output.flagged_fraction,
        losses: &trained.output.losses,
    };
    let dir = parent(&out);
    write_text(&dir.join("train_log.json"), &serde_json::to_string(&log)?)?;
    write_resolved(&cfg, &dir)
}

pub fn cmd_backtest(ctx: &Ctx, a: &BacktestArgs) -> Result<()> {
    let cfg = load_config(ctx, &a.data.config)?;
    let returns = load_returns(ctx, &a.data, &cfg)?;
    let gen = match &a.generator {
        Some(p) => {
            let (g, side) = load_generator(ctx.path(p))?;
            if side.hmm_states != cfg.hmm.states || side.context != cfg.context {
                return Err(Error::Config(
                    "generator was trained with a different HMM state count or context spec".into(),
                ));
            }
            Some(g)
        }
        None => None,
    };
    let out = run_walk_forward(&cfg, &returns, gen.as_ref())?;
    let dir = ctx.path(&a.out_dir);
    let report = &out.report;
    write_text(&dir.join("report.json"), &report.to_json()?)?;
    report.write_nav_csv(create(&dir.join("nav.csv"))?)?;
    report.write_weights_csv(create(&dir.join("weights.csv"))?)?;
    let audit_path = dir.join("audit.jsonl");
    let mut w = create(&audit_path)?;
    for (name, rec) in &out.audit {
        let mut v = serde_json::to_value(rec)?;
        if let serde_json::Value::Object(m) = &mut v {
            m.insert("strategy".into(), serde_json::Value::String(name.clone()));
        }
        writeln!(w, "{}", serde_json::to_string(&v)?).map_err(|e| Error::io(&audit_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&audit_path, e))?;
    let fdir = dir.join("forecasts");
    if fdir.exists() {
        std::fs::remove_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    }
    for f in &out.forecasts {
        f.write_csv(&report.assets, create(&fdir.join(format!("{}.csv", f.label)))?)?;
    }
    write_resolved(&cfg, &dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsBundle {
    pub reports: Vec<DiagnosticsReport>,
    pub uplift: Vec<UpliftRow>,
    pub notes: Vec<String>,
}

pub(crate) fn read_backtest(dir: &Path) -> Result<BacktestReport> {
    let path = dir.join("report.json");
    serde_json::from_str(&read_text(&path)?).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub(crate) fn read_diagnostics(dir: &Path) -> Result<DiagnosticsBundle> {
    let path = dir.join("diagnostics.json");
    serde_json::from_str(&read_text(&path)?).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn cmd_diagnose(ctx: &Ctx, a: &DiagnoseArgs) -> Result<()> {
    let cfg = load_config(ctx, &a.config)?;
    let bdir = ctx.path(&a.backtest_dir);
    let report = read_backtest(&bdir)?;
    let fdir = bdir.join("forecasts");
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&fdir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    let mut reports = Vec::new();
    for f in &files {
        let label = f.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let series = ForecastSeries::read_csv(&label, File::open(f).map_err(|e| Error::io(f, e))?)?;
        reports.push(
            diagnose(&series, cfg.allocator.alpha, &cfg.diagnostics, &cfg.generator.tail)
                .map_err(|e| e.with_context(format!("diagnostics for {label}")))?,
        );
    }
    let mut notes = Vec::new();
    let reference = &cfg.diagnostics.reference;
    let uplift = if report.strategy(reference).is_some() {
        uplift_table(&report, reference, &cfg.diagnostics.bootstrap)?
    } else {
        notes.push(format!("reference strategy '{reference}' not in the backtest; no uplift table"));
        Vec::new()
    };
    if files.is_empty() {
        notes.push("no scenario forecasts in the backtest; calibration table is empty".into());
    }
    let dir = ctx.path(&a.out_dir);
    let bundle = DiagnosticsBundle { reports, uplift, notes };
    write_text(&dir.join("diagnostics.json"), &serde_json::to_string_pretty(&bundle)?)?;
    write_table_csv(&bundle.reports, create(&dir.join("table1.csv"))?)?;

    let mut w = csv::Writer::from_writer(create(&dir.join("uplift.csv"))?);
    w.write_record(["reference", "baseline", "delta", "lo", "hi", "p_value"])?;
    for u in &bundle.uplift {
        let s = &u.uplift;
        w.write_record([
            u.reference.clone(),
            u.baseline.clone(),
            format!("{:.6}", s.delta),
            format!("{:.6}", s.lo),
            format!("{:.6}", s.hi),
            format!("{:.4}", s.p_value),
        ])?;
    }
    w.flush().map_err(|e| Error::io("uplift.csv", e))?;

    // Long table for plots: NAV, drawdown and, with a generator, posteriors.
    let mut w = csv::Writer::from_writer(create(&dir.join("plot_long.csv"))?);
    w.write_record(["date", "series", "value"])?;
    for s in &report.strategies {
        let dd = drawdown_series(&s.nav);
        for (i, d) in report.dates.iter().enumerate() {
            w.write_record([d.as_str(), &format!("nav:{}", s.name), &format!("{:.10e}", s.nav[i])])?;
            w.write_record([d.as_str(), &format!("drawdown:{}", s.name), &format!("{:.10e}", dd[i])])?;
        }
    }
    if let Some(g) = &a.generator {
        let (gen, _) = load_generator(ctx.path(g))?;
        let args = DataArgs {
            config: a.config.clone(),
            returns: a.returns.clone(),
        };
        let returns = load_returns(ctx, &args, &cfg)?;
        let post = filter_posteriors(&gen.reference, &returns)?;
        for d in &report.dates {
            if let Some(t) = returns.dates.iter().position(|x| x == d) {
                for (k, p) in post.row(t).iter().enumerate() {
                    w.write_record([d.as_str(), &format!("posterior:{k}"), &format!("{p:.10e}")])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io("plot_long.csv", e))?;
    write_resolved(&cfg, &dir)
}

pub fn cmd_report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let report = read_backtest(&ctx.path(&a.backtest_dir))?;
    let diag = read_diagnostics(&ctx.path(&a.diagnostics_dir))?;
    let out = ctx.path(&a.out);
    let json = crate::summary::summary_json(&report, &diag)?;
    write_text(&out.with_extension("json"), &json)?;
    write_text(&out.with_extension("md"), &crate::summary::markdown(&report, &diag))
}
