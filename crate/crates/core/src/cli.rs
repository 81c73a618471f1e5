//! Command-line front end. [`run`] parses arguments, dispatches the
//! subcommand and maps failures to exit codes (1 usage, 2 data,
//! 3 numerical).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, CohortFilter, ReportConfig, ReportInputs};
use crate::explicit::{self, ChainSummary, MarkovModel, OrderSelection, SummaryOptions};
use crate::implicit::{self, BridgeMStep, EmConfig, ImplicitModel};
use crate::preprocess::{self, PreprocessModel, ProjectedTrace};
use crate::synth::{self, GroundTruthParams};
use crate::trace::{self, Correctness, FeatureSpace, TraceSet};
use crate::Error;

/// Tunables shared by every subcommand. A `--config` JSON file supplies
/// values; flags given on the command line win.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_pca: usize,
    /// A positive integer or `"auto"`.
    pub order: String,
    pub order_min: usize,
    pub order_max: usize,
    pub k: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub n_warmup: usize,
    pub n_joint: usize,
    pub n_sil: usize,
    pub seed: u64,
    pub long_threshold: usize,
    pub group_keys: Vec<String>,
    pub allow_uniform_fill: bool,
    pub coupled_bridge_mstep: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        RunConfig {
            d_pca: preprocess::DEFAULT_D_PCA,
            order: "1".into(),
            order_min: 1,
            order_max: 3,
            k: em.k,
            k_min: 2,
            k_max: 8,
            n_warmup: em.n_warmup,
            n_joint: em.n_joint,
            n_sil: em.n_sil,
            seed: 0,
            long_threshold: diagnostics::DEFAULT_LONG_THRESHOLD,
            group_keys: vec!["model".into(), "dataset".into()],
            allow_uniform_fill: false,
            coupled_bridge_mstep: false,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "prism", disable_version_flag = true, about = "Explicit and implicit reasoning-trace analysis")]
struct Cli {
    /// Print artifact schema versions and exit.
    #[arg(long, global = true)]
    version: bool,
    /// JSON file with run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    allow_uniform_fill: bool,
    #[arg(long, global = true)]
    coupled_bridge_mstep: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct Input {
    /// Trace set directory (manifest.json + tensors).
    #[arg(long)]
    input: PathBuf,
    /// Preprocess model; fitted on the input when absent.
    #[arg(long)]
    preprocess: Option<PathBuf>,
    #[arg(long)]
    d_pca: Option<usize>,
}

#[derive(Args, Debug)]
struct EmArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_warmup: Option<usize>,
    #[arg(long)]
    n_joint: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit normalization + PCA and write projected traces.
    Preprocess {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the Markov chain over step categories.
    FitExplicit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Order or `auto` (BIC over --order-min..=--order-max).
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        order_min: Option<usize>,
        #[arg(long)]
        order_max: Option<usize>,
    },
    /// BIC table over a range of Markov orders.
    SelectOrder {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        order_min: Option<usize>,
        #[arg(long)]
        order_max: Option<usize>,
    },
    /// Silhouette sweep over K.
    SelectK {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long)]
        n_warmup: Option<usize>,
    },
    /// Two-phase EM of regime mixtures and bridges.
    FitImplicit {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        em: EmArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// MAP regime paths and posteriors as CSV.
    Decode {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnostics report from existing fits.
    Diagnose {
        #[command(flatten)]
        input: Input,
        /// Implicit model; profiles and bridge tables are skipped without it.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        long_threshold: Option<usize>,
        /// Comma-separated meta keys identifying a configuration.
        #[arg(long)]
        group_keys: Option<String>,
    },
    /// Side-by-side cohort comparison; the first cohort is the baseline.
    Compare {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        model: Option<PathBuf>,
        /// `name:key=value[,key=value...]`; keys are `correctness`,
        /// `min_len`, `max_len` or a meta key. Repeat per cohort.
        #[arg(long = "cohort", required = true)]
        cohorts: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a synthetic trace set from known parameters.
    Simulate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// End-to-end pipeline into one artifact directory.
    Report {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        em: EmArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        long_threshold: Option<usize>,
    },
}

/// What `fit-explicit` writes to `markov.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovArtifact {
    pub model: MarkovModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<OrderSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<ChainSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_error: Option<String>,
}

struct Ctx {
    cfg: RunConfig,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&s)?)
}

impl Ctx {
    fn em_config(&self, em: Option<&EmArgs>) -> EmConfig {
        let c = &self.cfg;
        EmConfig {
            k: em.and_then(|e| e.k).unwrap_or(c.k),
            n_warmup: em.and_then(|e| e.n_warmup).unwrap_or(c.n_warmup),
            n_joint: em.and_then(|e| e.n_joint).unwrap_or(c.n_joint),
            n_sil: c.n_sil,
            seed: c.seed,
            bridge_mstep: if c.coupled_bridge_mstep {
                BridgeMStep::Coupled
            } else {
                BridgeMStep::OuterProduct
            },
            ..EmConfig::default()
        }
    }

    fn summary_options(&self) -> SummaryOptions {
        SummaryOptions {
            allow_uniform_fill: self.cfg.allow_uniform_fill,
        }
    }

    /// Loads the set and brings it into projected space.
    fn projected(&self, input: &Input) -> Result<(TraceSet, Vec<ProjectedTrace>, Option<PreprocessModel>), Error> {
        let set = trace::load_trace_set(&input.input)?;
        if set.space == FeatureSpace::Projected {
            let p = preprocess::project_trace_set(None, &set)?;
            return Ok((set, p, None));
        }
        let model = match &input.preprocess {
            Some(path) => PreprocessModel::load(path)?,
            None => {
                let d_pca = match input.d_pca {
                    Some(d) => d,
                    None if self.cfg.d_pca > set.hidden_dim => {
                        log::info!(
                            "hidden dimension {} is below d_pca {}; projecting to {}",
                            set.hidden_dim,
                            self.cfg.d_pca,
                            set.hidden_dim
                        );
                        set.hidden_dim
                    }
                    None => self.cfg.d_pca,
                };
                preprocess::fit_preprocess(&set, d_pca)?
            }
        };
        let p = preprocess::project_trace_set(Some(&model), &set)?;
        Ok((set, p, Some(model)))
    }

    fn fit_markov(&self, set: &TraceSet, order: &str) -> Result<MarkovArtifact, Error> {
        let seqs = set.category_sequences();
        let (order, selection) = if order == "auto" {
            let sel = explicit::select_order(&seqs, self.cfg.order_min, self.cfg.order_max)?;
            (sel.best_order, Some(sel))
        } else {
            let m: usize = order
                .parse()
                .map_err(|_| Error::Usage(format!("--order must be a positive integer or auto, got {order:?}")))?;
            (m, None)
        };
        let model = explicit::fit_markov(&seqs, order)?;
        let (summary, summary_error) = if order == 1 {
            match explicit::chain_summary(&model, self.summary_options()) {
                Ok(s) => (Some(s), None),
                Err(e) => {
                    log::warn!("explicit: {e}");
                    (None, Some(e.to_string()))
                }
            }
        } else {
            (None, None)
        };
        Ok(MarkovArtifact {
            model,
            selection,
            summary,
            summary_error,
        })
    }

    fn write_markov(&self, out: &Path, art: &MarkovArtifact) -> Result<(), Error> {
        write_json(&out.join("markov.json"), art)?;
        write_file(&out.join("tables").join("markov.csv"), &art.model.to_csv())
    }

    fn fit_implicit(&self, projected: &[ProjectedTrace], em: &EmConfig) -> Result<ImplicitModel, Error> {
        let warm = implicit::fit_warmup(projected, em)?;
        let model = implicit::fit_joint(&warm, projected, em)?;
        if let Some(log) = &model.log {
            for w in &log.warnings {
                log::warn!("implicit: {w}");
            }
        }
        Ok(model)
    }

    fn write_decoded(&self, path: &Path, model: &ImplicitModel, decoded: &[implicit::DecodedTrace]) -> Result<(), Error> {
        let mut s = implicit::decode_csv_header(model.k);
        for d in decoded {
            d.to_csv_rows(&mut s);
        }
        write_file(path, &s)
    }

    fn report_config(&self) -> ReportConfig {
        ReportConfig {
            long_threshold: self.cfg.long_threshold,
            group_keys: self.cfg.group_keys.clone(),
            allow_uniform_fill: self.cfg.allow_uniform_fill,
        }
    }

    fn write_report(
        &self,
        out: &Path,
        set: &TraceSet,
        projected: &[ProjectedTrace],
        model: Option<&ImplicitModel>,
    ) -> Result<(), Error> {
        let decoded = match model {
            Some(m) => Some(implicit::decode_all(m, projected)?),
            None => None,
        };
        let inputs = ReportInputs {
            set,
            projected: Some(projected),
            implicit: model,
            decoded: decoded.as_deref(),
        };
        let report = diagnostics::build_report(&inputs, &self.report_config())?;
        write_json(&out.join("report.json"), &report)?;
        for (name, csv) in diagnostics::report_tables(&report) {
            write_file(&out.join("tables").join(name), &csv)?;
        }
        write_file(
            &out.join("scatter.csv"),
            &diagnostics::scatter_csv(&diagnostics::scatter_points(projected)),
        )?;
        if let (Some(m), Some(d)) = (model, &decoded) {
            self.write_decoded(&out.join("decoded.csv"), m, d)?;
        }
        Ok(())
    }

    fn dispatch(&self, cmd: Command) -> Result<(), Error> {
        match cmd {
            Command::Preprocess { input, out } => {
                let (set, projected, model) = self.projected(&input)?;
                if let Some(m) = &model {
                    write_json(&out.join("preprocess.json"), m)?;
                }
                let mut pset = set.clone();
                pset.space = FeatureSpace::Projected;
                pset.hidden_dim = projected.first().map_or(set.hidden_dim, |p| p.features.dim);
                for (s, p) in pset.samples.iter_mut().zip(&projected) {
                    s.tensor = p.features.to_hidden();
                }
                trace::save_trace_set(&pset, out.join("projected"))?;
                println!("projected {} samples to D={}", pset.samples.len(), pset.hidden_dim);
            }
            Command::FitExplicit {
                input,
                out,
                order,
                order_min,
                order_max,
            } => {
                let mut ctx = Ctx { cfg: self.cfg.clone() };
                if let Some(m) = order_min {
                    ctx.cfg.order_min = m;
                }
                if let Some(m) = order_max {
                    ctx.cfg.order_max = m;
                }
                if order.as_deref().unwrap_or(&self.cfg.order) == "auto" {
                    check_order_range(ctx.cfg.order_min, ctx.cfg.order_max)?;
                }
                let set = trace::load_trace_set(&input)?;
                let art = ctx.fit_markov(&set, order.as_deref().unwrap_or(&self.cfg.order))?;
                ctx.write_markov(&out, &art)?;
                println!("selected order {}", art.model.order);
            }
            Command::SelectOrder {
                input,
                out,
                order_min,
                order_max,
            } => {
                let (lo, hi) = (
                    order_min.unwrap_or(self.cfg.order_min),
                    order_max.unwrap_or(self.cfg.order_max),
                );
                check_order_range(lo, hi)?;
                let set = trace::load_trace_set(&input)?;
                let sel = explicit::select_order(&set.category_sequences(), lo, hi)?;
                for r in &sel.rows {
                    match r.bic {
                        Some(b) => println!("order {} bic {:.4} transitions {}", r.order, b, r.n_transitions),
                        None => println!("order {} {}", r.order, r.status),
                    }
                }
                println!("selected order {}", sel.best_order);
                if let Some(out) = out {
                    write_json(&out.join("order_selection.json"), &sel)?;
                }
            }
            Command::SelectK {
                input,
                out,
                k_min,
                k_max,
                n_warmup,
            } => {
                let (_, projected, _) = self.projected(&input)?;
                let mut em = self.em_config(None);
                if let Some(n) = n_warmup {
                    em.n_warmup = n;
                }
                let data = implicit::collect_category_points(&projected);
                let sel = implicit::select_k(
                    &data,
                    k_min.unwrap_or(self.cfg.k_min),
                    k_max.unwrap_or(self.cfg.k_max),
                    &em,
                )?;
                for r in &sel.rows {
                    match r.silhouette {
                        Some(s) => println!("K {} silhouette {:.6}", r.k, s),
                        None => println!("K {} {}", r.k, r.status),
                    }
                }
                println!("selected K {}", sel.best_k);
                if let Some(out) = out {
                    write_json(&out.join("select_k.json"), &sel)?;
                }
            }
            Command::FitImplicit { input, em, out } => {
                let (_, projected, pre) = self.projected(&input)?;
                if let (Some(m), None) = (&pre, &input.preprocess) {
                    write_json(&out.join("preprocess.json"), m)?;
                }
                let model = self.fit_implicit(&projected, &self.em_config(Some(&em)))?;
                write_json(&out.join("implicit.json"), &model)?;
                println!("fitted K={} for {} categories", model.k, model.gmms.len());
            }
            Command::Decode { input, model, out } => {
                let (_, projected, _) = self.projected(&input)?;
                let m: ImplicitModel = ImplicitModel::load(&model)?;
                let decoded = implicit::decode_all(&m, &projected)?;
                self.write_decoded(&out.join("decoded.csv"), &m, &decoded)?;
            }
            Command::Diagnose {
                input,
                model,
                out,
                long_threshold,
                group_keys,
            } => {
                let mut ctx = Ctx { cfg: self.cfg.clone() };
                if let Some(t) = long_threshold {
                    ctx.cfg.long_threshold = t;
                }
                if let Some(g) = group_keys {
                    ctx.cfg.group_keys = g.split(',').map(str::to_string).collect();
                }
                let (set, projected, _) = ctx.projected(&input)?;
                let m = model.map(ImplicitModel::load).transpose()?;
                ctx.write_report(&out, &set, &projected, m.as_ref())?;
            }
            Command::Compare {
                input,
                model,
                cohorts,
                out,
            } => {
                let cohorts = cohorts.iter().map(|c| parse_cohort(c)).collect::<Result<Vec<_>, _>>()?;
                let (set, projected, _) = self.projected(&input)?;
                let decoded = match model {
                    Some(p) => Some(implicit::decode_all(&ImplicitModel::load(p)?, &projected)?),
                    None => None,
                };
                let cmp = diagnostics::compare_cohorts(&set, decoded.as_deref(), &cohorts, self.summary_options())?;
                write_json(&out.join("comparison.json"), &cmp)?;
                for c in &cmp.columns {
                    println!("{}: {} samples", c.name, c.n_samples);
                }
            }
            Command::Simulate { params, n, out } => {
                let p = GroundTruthParams::load(&params)?;
                let set = synth::sample_trace_set(&p, n, self.cfg.seed)?;
                trace::save_trace_set(&set, &out)?;
                println!("wrote {n} samples");
            }
            Command::Report {
                input,
                em,
                out,
                order,
                long_threshold,
            } => {
                let mut ctx = Ctx { cfg: self.cfg.clone() };
                if let Some(t) = long_threshold {
                    ctx.cfg.long_threshold = t;
                }
                let (set, projected, pre) = ctx.projected(&input)?;
                if let Some(m) = &pre {
                    write_json(&out.join("preprocess.json"), m)?;
                }
                let art = ctx.fit_markov(&set, order.as_deref().unwrap_or(&ctx.cfg.order))?;
                ctx.write_markov(&out, &art)?;
                let model = ctx.fit_implicit(&projected, &ctx.em_config(Some(&em)))?;
                write_json(&out.join("implicit.json"), &model)?;
                ctx.write_report(&out, &set, &projected, Some(&model))?;
                println!("report written to {}", out.display());
            }
        }
        Ok(())
    }
}

/// Fails fast on a bad range, before any input is read.
fn check_order_range(lo: usize, hi: usize) -> Result<(), Error> {
    if lo == 0 {
        return Err(explicit::ExplicitError::ZeroOrder.into());
    }
    if lo > hi {
        return Err(explicit::ExplicitError::EmptyRange.into());
    }
    Ok(())
}

/// Parses `name:key=value[,key=value...]`.
pub fn parse_cohort(spec: &str) -> Result<(String, CohortFilter), Error> {
    let bad = |m: String| Error::Usage(format!("cohort {spec:?}: {m}"));
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    if name.is_empty() {
        return Err(bad("empty name".into()));
    }
    let mut f = CohortFilter::all();
    for kv in rest.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("{kv:?} is not key=value")))?;
        match k {
            "correctness" => {
                f.correctness = Some(match v {
                    "correct" => Correctness::Correct,
                    "incorrect" => Correctness::Incorrect,
                    "unlabeled" => Correctness::Unlabeled,
                    _ => return Err(bad(format!("unknown correctness {v:?}"))),
                })
            }
            "min_len" => f.min_len = Some(v.parse().map_err(|_| bad(format!("bad min_len {v:?}")))?),
            "max_len" => f.max_len = Some(v.parse().map_err(|_| bad(format!("bad max_len {v:?}")))?),
            _ => f = f.with_meta(k, v),
        }
    }
    Ok((name.to_string(), f))
}

fn versions() -> String {
    format!(
        "prism {}\ntrace format {}\npreprocess model {}\nmarkov model {}\nimplicit model {}\nreport {}\nsynth params {}",
        env!("CARGO_PKG_VERSION"),
        trace::FORMAT_VERSION,
        preprocess::PREPROCESS_VERSION,
        explicit::MARKOV_VERSION,
        implicit::IMPLICIT_VERSION,
        diagnostics::REPORT_VERSION,
        synth::PARAMS_VERSION,
    )
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.version {
        println!("{}", versions());
        return 0;
    }
    let Some(command) = cli.command else {
        eprintln!("usage: a subcommand is required (see --help)");
        return 1;
    };
    let mut cfg = match &cli.config {
        Some(p) => match read_json::<RunConfig>(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: config: {e}");
                return 1;
            }
        },
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.allow_uniform_fill |= cli.allow_uniform_fill;
    cfg.coupled_bridge_mstep |= cli.coupled_bridge_mstep;
    match (Ctx { cfg }).dispatch(command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
