use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use super::{compute_metrics, BacktestReport, Book, ForecastRecord, ForecastSeries, StrategyReport};
use crate::baselines::{baseline_target, BaselineKind};
use crate::config::{AllocatorConfig, Cadence, RunConfig, Variant};
use crate::cvar_allocator::{self, kkt_audit, project_partial_rebalance, AllocationProblem, AuditRecord, SolveStatus};
use crate::data_io::ReturnPanel;
use crate::error::{Error, Result};
use crate::moments::{blend, historical_moments_at, scenario_moments, shrink_moments, Moments};
use crate::regime_hmm::{align_to, context_features, filter_posteriors, fit_em_traced, RegimeContext, RegimeModel};
use crate::rng;
use crate::scenario_gen::{
    cosine_schedule, load_params, sample, save_params, sbb_sample, DenoiserParams, NoiseSchedule, ParamsSidecar,
    ScenarioSet, TrainOutput, Trainer, TrainerCheckpoint, PARAMS_VERSION,
};

/// A trained denoiser with its schedule and the HMM whose state labels its
/// context was built from.
#[derive(Debug, Clone)]
pub struct Generator {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub reference: RegimeModel,
}

pub struct TrainedGenerator {
    pub generator: Generator,
    pub output: TrainOutput,
    pub sidecar: ParamsSidecar,
}

fn index_of(returns: &ReturnPanel, date: &str, what: &str) -> Result<usize> {
    returns
        .index_at_or_before(date)
        .ok_or_else(|| Error::Config(format!("{what} {date} precedes the data")))
}

/// Row ranges of the splits: (last train row, last validation row, last test row).
pub fn test_range(config: &RunConfig, returns: &ReturnPanel) -> Result<(usize, usize, usize)> {
    if returns.n_dates() == 0 {
        return Err(Error::Input("empty return panel".into()));
    }
    let s = &config.splits;
    let train_end = index_of(returns, &s.train_end, "train_end")?;
    let val_end = index_of(returns, &s.val_end, "val_end")?;
    let test_end = match &s.test_end {
        Some(d) => index_of(returns, d, "test_end")?,
        None => returns.n_dates() - 1,
    };
    if !(train_end < val_end && val_end < test_end) {
        return Err(Error::Config(format!(
            "splits must be ordered: train ends row {train_end}, validation row {val_end}, test row {test_end}"
        )));
    }
    Ok((train_end, val_end, test_end))
}

/// Inputs of generator training: the reference HMM fitted on the train
/// split and the pairs (z_t, r_{t+1}) lying inside it.
pub struct TrainingSet {
    pub reference: RegimeModel,
    pub data: DMatrix<f64>,
    pub contexts: Vec<RegimeContext>,
    pub schedule: NoiseSchedule,
}

pub fn training_set(config: &RunConfig, returns: &ReturnPanel) -> Result<TrainingSet> {
    let (train_end, _, _) = test_range(config, returns)?;
    let train = returns.slice(0, train_end + 1);
    let w = config.hmm.window.min(train.n_dates());
    let fit_window = train.slice(train.n_dates() - w, train.n_dates());
    let reference = fit_em_traced(&fit_window, config.hmm.states, config.hmm.em_options())
        .map_err(|e| e.with_context("reference HMM on the train split"))?
        .model;
    let post = filter_posteriors(&reference, &train)?;
    let lookback = config.context.lookback.max(2);
    if train_end < lookback + 2 {
        return Err(Error::Input("train split too short for the context lookback".into()));
    }
    let mut contexts = Vec::new();
    let mut rows = Vec::new();
    for t in lookback..train_end {
        contexts.push(context_features(&post.row(t), &train, t, &config.context)?);
        rows.push(t + 1);
    }
    let data = DMatrix::from_fn(rows.len(), returns.n_assets(), |i, j| returns.returns[(rows[i], j)]);
    Ok(TrainingSet {
        reference,
        data,
        contexts,
        schedule: cosine_schedule(config.generator.schedule_steps)?,
    })
}

impl TrainingSet {
    pub fn trainer(&self, config: &RunConfig) -> Result<Trainer> {
        Trainer::new(&self.data, &self.contexts, &self.schedule, &config.generator.tail, &config.generator.train)
    }

    pub fn resume(&self, config: &RunConfig, ckpt: &TrainerCheckpoint) -> Result<Trainer> {
        Trainer::resume(&self.data, &self.contexts, &self.schedule, &config.generator.tail, &config.generator.train, ckpt)
    }

    /// Package a finished training run.
    pub fn finish(self, config: &RunConfig, output: TrainOutput) -> TrainedGenerator {
        let params = output.params.clone();
        let sidecar = ParamsSidecar {
            format_version: PARAMS_VERSION,
            architecture: params.arch,
            n_params: params.n_params(),
            schedule_steps: self.schedule.steps,
            tail: config.generator.tail,
            training: config.generator.train.clone(),
            tag: config.generator.tail.tag().to_string(),
            context: config.context,
            hmm_states: config.hmm.states,
            final_loss: output.losses.last().copied().unwrap_or(f64::NAN),
        };
        TrainedGenerator {
            generator: Generator {
                params,
                schedule: self.schedule,
                reference: self.reference,
            },
            output,
            sidecar,
        }
    }
}

/// Fit the reference HMM on the train split and train the denoiser on it.
pub fn train_generator(config: &RunConfig, returns: &ReturnPanel) -> Result<TrainedGenerator> {
    let set = training_set(config, returns)?;
    let mut trainer = set.trainer(config)?;
    trainer.run_until(config.generator.train.steps)?;
    Ok(set.finish(config, trainer.finish()))
}

fn hmm_path(path: &Path) -> PathBuf {
    path.with_extension("hmm.json")
}

/// Parameter blob at `path`, sidecar next to it, reference HMM as
/// `<stem>.hmm.json`.
pub fn save_generator(path: impl AsRef<Path>, gen: &Generator, sidecar: &ParamsSidecar) -> Result<()> {
    let path = path.as_ref();
    save_params(path, &gen.params, sidecar)?;
    let hp = hmm_path(path);
    std::fs::write(&hp, gen.reference.to_json()?).map_err(|e| Error::io(&hp, e))
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<(Generator, ParamsSidecar)> {
    let path = path.as_ref();
    let (params, sidecar) = load_params(path)?;
    let hp = hmm_path(path);
    let text = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let reference = RegimeModel::from_json(&text)?;
    let schedule = cosine_schedule(sidecar.schedule_steps)?;
    Ok((
        Generator {
            params,
            schedule,
            reference,
        },
        sidecar,
    ))
}

/// Decision rows: the last validation row, then every rebalance row of the
/// test split before its final row.
pub fn decision_indices(returns: &ReturnPanel, start: usize, end: usize, cadence: Cadence) -> Vec<usize> {
    let mut out = vec![start];
    match cadence {
        Cadence::Monthly => {
            for t in start + 1..end {
                if returns.dates[t].get(..7) != returns.dates[t + 1].get(..7) {
                    out.push(t);
                }
            }
        }
        Cadence::Every(n) => out.extend((start + n..end).step_by(n.max(1))),
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Diffusion,
    DiffusionZero,
    Sbb,
}

#[derive(Debug, Clone)]
enum Kind {
    Qp {
        source: Source,
        alloc: AllocatorConfig,
        lambda: f64,
        cvar_term: bool,
        record: bool,
    },
    Baseline(BaselineKind),
}

struct Strategy {
    name: String,
    group: &'static str,
    kind: Kind,
    book: Book,
    forecasts: Vec<ForecastRecord>,
}

fn variant_kind(config: &RunConfig, v: &Variant) -> Kind {
    let mut alloc = config.allocator.clone();
    if let Some(g) = v.gamma {
        alloc.gamma = g;
    }
    if let Some(a) = v.alpha {
        alloc.alpha = a;
    }
    if let Some(k) = v.kappa {
        alloc.kappa = k;
    }
    if let Some(t) = v.tau {
        alloc.tau = t;
    }
    Kind::Qp {
        source: if v.zero_context {
            Source::DiffusionZero
        } else {
            Source::Diffusion
        },
        alloc,
        lambda: v.lambda.unwrap_or(config.signals.lambda),
        cvar_term: v.cvar_term.unwrap_or(true),
        record: false,
    }
}

fn strategies(config: &RunConfig, d: usize) -> Vec<Strategy> {
    let bt = &config.backtest;
    let mut out = Vec::new();
    let main = |source, record| Kind::Qp {
        source,
        alloc: config.allocator.clone(),
        lambda: config.signals.lambda,
        cvar_term: true,
        record,
    };
    for name in &bt.strategies {
        let (group, kind) = match name.as_str() {
            "RC-CVaR" => ("main", main(Source::Diffusion, true)),
            "SBB" => ("generator-baseline", main(Source::Sbb, true)),
            "EW" => ("baseline", Kind::Baseline(BaselineKind::EqualWeight)),
            "RP" => ("baseline", Kind::Baseline(BaselineKind::RiskParity)),
            _ => ("baseline", Kind::Baseline(BaselineKind::BlackLitterman)),
        };
        out.push((name.clone(), group, kind));
    }
    for v in &bt.ablation {
        out.push((v.label.clone(), "ablation", variant_kind(config, v)));
    }
    for v in &bt.sweep {
        out.push((v.label.clone(), "sweep", variant_kind(config, v)));
    }
    out.into_iter()
        .map(|(name, group, kind)| Strategy {
            name,
            group,
            kind,
            book: Book::new(DVector::from_element(d, 1.0 / d as f64), bt.cost_bps),
            forecasts: Vec::new(),
        })
        .collect()
}

pub struct BacktestOutput {
    pub report: BacktestReport,
    /// (strategy, record) in decision order; `audit_line` indexes this list.
    pub audit: Vec<(String, AuditRecord)>,
    pub forecasts: Vec<ForecastSeries>,
}

/// Regime state carried through the test split.
struct Regime<'a> {
    config: &'a RunConfig,
    reference: Option<&'a RegimeModel>,
    model: Option<RegimeModel>,
    last_fit: Option<usize>,
    refits: Vec<String>,
}

impl Regime<'_> {
    fn window(&self, t: usize) -> usize {
        self.config.hmm.window.min(t + 1)
    }

    /// Context at row t from a model fitted on (t − W, t] at the latest refit.
    fn context(&mut self, returns: &ReturnPanel, t: usize) -> Result<RegimeContext> {
        let hmm = &self.config.hmm;
        if self.last_fit.is_none_or(|last| t - last >= hmm.stride) {
            let w = self.window(t);
            let win = returns.slice(t + 1 - w, t + 1);
            let mut model = fit_em_traced(&win, hmm.states, hmm.em_options())?.model;
            if let Some(r) = self.reference {
                model = align_to(&model, r);
            }
            self.model = Some(model);
            self.last_fit = Some(t);
            self.refits.push(returns.dates[t].clone());
        }
        let model = self.model.as_ref().unwrap();
        let w = self.window(t);
        let win = returns.slice(t + 1 - w, t + 1);
        let post = filter_posteriors(model, &win)?;
        let pi = post.row(w - 1);
        let z = context_features(&pi, returns, t, &self.config.context)?;
        Ok(z)
    }
}

fn allocation_problem(
    alloc: &AllocatorConfig,
    m: &Moments,
    scenarios: &DMatrix<f64>,
    prev: &DVector<f64>,
    cvar_term: bool,
) -> AllocationProblem {
    let d = prev.len();
    let mut p = AllocationProblem::new(m.mu.clone(), m.sigma.clone(), scenarios.clone(), prev.clone());
    p.alpha = alloc.alpha;
    p.lambda_mu = alloc.lambda_mu;
    p.gamma = alloc.gamma;
    p.tau = alloc.tau;
    p.kappa = alloc.kappa;
    p.lower = DVector::from_element(d, alloc.lower);
    p.upper = DVector::from_element(d, alloc.upper);
    p.cvar_term = cvar_term;
    p
}

/// Walk forward through the test split. Every decision at row t sees rows up
/// to t only; holdings drift between decisions and every trade pays the
/// same proportional cost.
pub fn run_walk_forward(config: &RunConfig, returns: &ReturnPanel, generator: Option<&Generator>) -> Result<BacktestOutput> {
    config.validate()?;
    let (_, start, end) = test_range(config, returns)?;
    let d = returns.n_assets();
    let mut strats = strategies(config, d);
    if strats.is_empty() {
        return Err(Error::Config("no strategies configured".into()));
    }
    let needs_gen = strats.iter().any(|s| {
        matches!(
            s.kind,
            Kind::Qp {
                source: Source::Diffusion | Source::DiffusionZero,
                ..
            }
        )
    });
    let gen = match (needs_gen, generator) {
        (true, None) => return Err(Error::Config("RC-CVaR strategies need a trained generator".into())),
        (true, Some(g)) => Some(g),
        _ => None,
    };
    let needs_regime = needs_gen;
    let decisions = decision_indices(returns, start, end, config.backtest.cadence);
    let n = config.generator.n_scenarios;
    let mut regime = Regime {
        config,
        reference: gen.map(|g| &g.reference),
        model: None,
        last_fit: None,
        refits: Vec::new(),
    };
    let mut audit: Vec<(String, AuditRecord)> = Vec::new();
    let mut notes = Vec::new();
    let mut next = 0;

    for t in start..=end {
        if t > start {
            let r = returns.row(t);
            for s in strats.iter_mut() {
                s.book.drift(&r).map_err(|e| e.with_context(format!("{} on {}", s.name, returns.dates[t])))?;
            }
        }
        if next < decisions.len() && decisions[next] == t {
            next += 1;
            let date = returns.dates[t].clone();
            let at = |e: Error| e.with_context(format!("rebalance {date}"));
            let z = if needs_regime {
                Some(regime.context(returns, t).map_err(at)?)
            } else {
                None
            };
            let hw = config.signals.hist_window.min(t + 1);
            let hist = historical_moments_at(returns, t, hw).map_err(at)?;
            let window_rows = returns.returns.rows(t + 1 - hw, hw).into_owned();
            let shrunk_hist = shrink_moments(&hist, config.signals.shrinkage, Some(&window_rows)).map_err(at)?;
            let seed = rng::mix_seed(config.backtest.seed, t as u64);

            let mut cache: Vec<(Source, ScenarioSet)> = Vec::new();
            for s in strats.iter_mut() {
                let ctx = |e: Error| e.with_context(format!("rebalance {date} ({})", s.name));
                match s.kind.clone() {
                    Kind::Baseline(kind) => {
                        let target = baseline_target(kind, &config.baselines, &shrunk_hist.sigma).map_err(ctx)?;
                        let tau = config.allocator.tau;
                        let w = project_partial_rebalance(&target, &s.book.weights, tau);
                        s.book.trade(&date, w, "target", None);
                    }
                    Kind::Qp {
                        source,
                        alloc,
                        lambda,
                        cvar_term,
                        record,
                    } => {
                        if !cache.iter().any(|(src, _)| *src == source) {
                            let set = match source {
                                Source::Sbb => {
                                    let w = config.hmm.window.min(t + 1);
                                    let hist_panel = returns.slice(t + 1 - w, t + 1);
                                    sbb_sample(&hist_panel, config.generator.sbb_block, n, rng::mix_seed(seed, 1))
                                }
                                Source::Diffusion | Source::DiffusionZero => {
                                    let g = gen.unwrap();
                                    let mut zz = z.clone().unwrap();
                                    if source == Source::DiffusionZero {
                                        zz = RegimeContext::zeros(zz.dim());
                                    }
                                    sample(&g.params, &g.schedule, &zz, n, seed)
                                }
                            }
                            .map_err(ctx)?;
                            cache.push((source, set));
                        }
                        let set = &cache.iter().find(|(src, _)| *src == source).unwrap().1;
                        let synth = scenario_moments(set).map_err(ctx)?;
                        let blended = blend(&synth, &hist, lambda).map_err(ctx)?;
                        let m = shrink_moments(&blended, config.signals.shrinkage, Some(&window_rows)).map_err(ctx)?;
                        let problem = allocation_problem(&alloc, &m, &set.scenarios, &s.book.weights, cvar_term);
                        let res = cvar_allocator::solve(&problem).map_err(ctx)?;
                        let w = if res.status == SolveStatus::Optimal {
                            let rec = kkt_audit(&problem, &res, &date).map_err(ctx)?;
                            audit.push((s.name.clone(), rec));
                            s.book.trade(&date, res.weights.clone(), "optimal", Some(audit.len() - 1));
                            res.weights
                        } else {
                            notes.push(format!("{}: solver hit the iteration limit on {date}; weights held", s.name));
                            let held = s.book.weights.clone();
                            s.book.trade(&date, held.clone(), "max_iter", None);
                            held
                        };
                        if record {
                            s.forecasts.push(ForecastRecord {
                                date: date.clone(),
                                scenarios: set.scenarios.clone(),
                                weights: w,
                                realized: (t < end).then(|| returns.row(t + 1)),
                            });
                        }
                    }
                }
            }
        }
        for s in strats.iter_mut() {
            s.book.mark();
        }
    }

    let mut reports = Vec::new();
    let mut forecasts = Vec::new();
    for s in strats {
        let mut metrics = compute_metrics(&s.book.navs).map_err(|e| e.with_context(s.name.clone()))?;
        let rows = &s.book.rows;
        // The first trade only establishes the position from equal weight.
        let later: Vec<f64> = rows.iter().skip(1).map(|r| r.turnover).collect();
        metrics.avg_turnover = if later.is_empty() {
            0.0
        } else {
            later.iter().sum::<f64>() / later.len() as f64
        };
        if !s.forecasts.is_empty() {
            forecasts.push(ForecastSeries {
                label: s.name.clone(),
                records: s.forecasts,
            });
        }
        reports.push(StrategyReport {
            total_cost: s.book.total_cost(),
            name: s.name,
            group: s.group.to_string(),
            nav: s.book.navs,
            metrics,
            rebalances: s.book.rows,
        });
    }
    Ok(BacktestOutput {
        report: BacktestReport {
            assets: returns.assets.clone(),
            dates: returns.dates[start..=end].to_vec(),
            decision_dates: decisions.iter().map(|&t| returns.dates[t].clone()).collect(),
            hmm_refit_dates: regime.refits,
            strategies: reports,
            notes,
        },
        audit,
        forecasts,
    })
}
