use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use advnids::attack::{compute_stats, craft_batch, AttackConfig, Method};
use advnids::dataset::{
    load_csv, partition, synth_generate, write_csv, Label, LabeledDataset, SynthParams,
};
use advnids::experiments::{
    emit_report, run, DataSource, ExperimentOutput, ExperimentPlan, ReportFormat, Stages,
};
use advnids::models::{evaluate, train, HyperParams, ModelKind, Side, TrainedModel};
use advnids::schema::{FeatureBounds, FeatureSchema, FeatureVector};
use advnids::{Error, ErrorKind};
use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "advnids",
    version,
    about = "Black-box evasion of flow-based NIDS and an adversarial detector"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Plan file supplying defaults for seed, schema and attack settings.
    #[arg(long, global = true)]
    plan: Option<PathBuf>,
    /// Overrides the plan seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Feature schema file; the built-in flow schema otherwise.
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic flow CSV.
    Synth {
        /// Preset name (neris, rbot, virut, zeus_ares, ctu13).
        #[arg(long, default_value = "ctu13")]
        family: String,
        #[arg(long, default_value_t = 2000)]
        flows: usize,
        /// Generator parameters file instead of a preset.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean a raw flow CSV into the schema layout.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into attacker and defender train/test sets.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and optionally evaluate it.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: ModelKind,
        #[arg(long, value_enum, default_value = "attacker")]
        side: SideArg,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Craft adversarial versions of the malicious flows in a CSV.
    Attack {
        /// Surrogate model file.
        #[arg(long)]
        model: PathBuf,
        /// Flows to perturb; only malicious rows are used.
        #[arg(long)]
        data: PathBuf,
        /// Attacker-owned flows giving class means and clamp bounds.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        c: Option<f64>,
        #[arg(long)]
        t_max: Option<usize>,
        /// Restart from the original flow for every mask.
        #[arg(long)]
        reset: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer matrices on the main dataset.
    Transfer(RunArgs),
    /// Detector, protected and unprotected rates per family.
    Defend(RunArgs),
    /// Every stage of a plan.
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Output directory; overrides the plan.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_instances: Option<usize>,
    /// Flows per class of every synthetic dataset.
    #[arg(long)]
    flows: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long, value_delimiter = ',', value_enum)]
    formats: Option<Vec<FormatArg>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Attacker,
    Defender,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    MeanDiff,
    MeanRatio,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Markdown,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Ctx {
    plan: Option<ExperimentPlan>,
    common: Common,
}

impl Ctx {
    fn new(common: Common) -> anyhow::Result<Self> {
        let plan = common.plan.as_ref().map(ExperimentPlan::load).transpose()?;
        Ok(Ctx { plan, common })
    }

    fn seed(&self) -> u64 {
        self.common
            .seed
            .or(self.plan.as_ref().map(|p| p.seed))
            .unwrap_or(0)
    }

    fn schema(&self) -> anyhow::Result<Arc<FeatureSchema>> {
        if let Some(p) = &self.common.schema {
            return Ok(Arc::new(FeatureSchema::load(p)?));
        }
        match &self.plan {
            Some(plan) => Ok(plan.schema()?),
            None => Ok(Arc::new(FeatureSchema::default_flow())),
        }
    }

    fn attack(&self) -> AttackConfig {
        self.plan
            .as_ref()
            .map(|p| p.attack.clone())
            .unwrap_or_default()
    }

    fn require_plan(&self) -> anyhow::Result<ExperimentPlan> {
        let mut plan = self
            .plan
            .clone()
            .ok_or_else(|| Error::Plan("this command needs --plan".into()))?;
        if let Some(s) = self.common.seed {
            plan.seed = s;
        }
        Ok(plan)
    }
}

fn load(path: &Path, schema: &Arc<FeatureSchema>) -> anyhow::Result<LabeledDataset> {
    let (ds, report) = load_csv(path, schema.clone())?;
    log::info!(
        "{}: kept {} of {} rows",
        path.display(),
        report.rows_kept,
        report.rows_read
    );
    Ok(ds)
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_plan(ctx: &Ctx, args: RunArgs, stages: Stages) -> anyhow::Result<()> {
    let mut plan = ctx.require_plan()?;
    if let Some(out) = args.out {
        plan.output_dir = out;
    }
    if let Some(n) = args.max_instances {
        plan.max_instances = n;
    }
    if let Some(t) = args.t_max {
        plan.attack.t_max = t;
    }
    if let (
        Some(n),
        DataSource::Synth {
            flows_per_class,
            campaign_flows_per_class,
            ..
        },
    ) = (args.flows, &mut plan.dataset)
    {
        *flows_per_class = n;
        *campaign_flows_per_class = None;
    }
    plan.validate()?;
    let formats: Vec<ReportFormat> = match args.formats {
        Some(f) => f
            .into_iter()
            .map(|f| match f {
                FormatArg::Json => ReportFormat::Json,
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Markdown => ReportFormat::Markdown,
            })
            .collect(),
        None => ReportFormat::ALL.to_vec(),
    };
    let out: ExperimentOutput = run(&plan, stages)?;
    let manifest = emit_report(&plan, &out, &plan.output_dir, &formats)?;
    println!(
        "wrote {} files to {} (self-audit {})",
        manifest.files.len() + manifest.timing_files.len() + 1,
        plan.output_dir.display(),
        if manifest.audit_passed {
            "passed"
        } else {
            "failed"
        }
    );
    if !manifest.audit_passed {
        return Err(Error::Input("self-audit failed; see audit.json".into()).into());
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx::new(cli.common)?;
    match cli.command {
        Command::Synth {
            family,
            flows,
            params,
            out,
        } => {
            let params = match params {
                Some(p) => SynthParams::load(p)?,
                None => SynthParams::preset(&family, flows)?,
            };
            let ds = synth_generate(&params, ctx.schema()?, ctx.seed())?;
            write_csv(&ds, &out)?;
            println!("wrote {} flows to {}", ds.len(), out.display());
        }
        Command::Ingest { input, out } => {
            let (ds, report) = load_csv(&input, ctx.schema()?)?;
            write_csv(&ds, &out)?;
            print_json(&report)?;
        }
        Command::Split { input, out } => {
            let ds = load(&input, &ctx.schema()?)?;
            let manifest = partition(&ds, ctx.seed())?.write(&out)?;
            print_json(&manifest)?;
        }
        Command::Train {
            data,
            kind,
            side,
            test,
            out,
        } => {
            let schema = ctx.schema()?;
            let side = match side {
                SideArg::Attacker => Side::Attacker,
                SideArg::Defender => Side::Defender,
            };
            let ds = load(&data, &schema)?;
            let model = train(&HyperParams::preset(kind, side), side, &ds, ctx.seed())?;
            model.save(&out)?;
            if let Some(test) = test {
                let (cm, metrics) = evaluate(&model, &load(&test, &schema)?)?;
                print_json(&serde_json::json!({ "confusion": cm, "metrics": metrics }))?;
            }
        }
        Command::Attack {
            model,
            data,
            reference,
            method,
            c,
            t_max,
            reset,
            out,
        } => {
            let schema = ctx.schema()?;
            let surrogate = TrainedModel::load(&model)?;
            if surrogate.side() != Side::Attacker {
                return Err(
                    Error::Input("the surrogate must be an attacker-side model".into()).into(),
                );
            }
            let reference = load(&reference, &schema)?;
            let stats = compute_stats(
                &reference.with_label(Label::Benign),
                &reference.with_label(Label::Malicious),
            )?;
            let bounds = FeatureBounds::fit(schema.arity(), reference.vectors().iter())?;
            let mut config = ctx.attack();
            if let Some(m) = method {
                config.method = match m {
                    MethodArg::MeanDiff => Method::MeanDiff,
                    MethodArg::MeanRatio => Method::MeanRatio,
                };
            }
            if let Some(c) = c {
                config.c = c;
            }
            if let Some(t) = t_max {
                config.t_max = t;
            }
            if reset {
                config.cumulative = false;
            }
            config.validate()?;
            let flows = load(&data, &schema)?.with_label(Label::Malicious);
            let (results, timing) = craft_batch(
                flows.vectors(),
                &surrogate,
                &schema,
                &bounds,
                &stats,
                &config,
            )?;
            let adv: Vec<FeatureVector> = results.iter().map(|r| r.adversarial.clone()).collect();
            let n = adv.len();
            let crafted =
                LabeledDataset::new(schema, adv, vec![Label::Malicious; n], flows.family())?;
            write_csv(&crafted, &out).with_context(|| format!("writing {}", out.display()))?;
            print_json(&timing)?;
        }
        Command::Transfer(args) => run_plan(
            &ctx,
            args,
            Stages {
                transfer: true,
                campaign: false,
                defense: false,
            },
        )?,
        Command::Defend(args) => run_plan(
            &ctx,
            args,
            Stages {
                transfer: false,
                campaign: false,
                defense: true,
            },
        )?,
        Command::Report(args) => run_plan(&ctx, args, Stages::ALL)?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map(Error::kind)
    {
        Some(ErrorKind::Plan) => 1,
        Some(ErrorKind::Data) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(p) => p,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
