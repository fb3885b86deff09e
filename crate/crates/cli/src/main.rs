use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use pctl::config::{ModelSettings, RunConfig};
use pctl::data::{decode_labels, encode_labels, generate_synthetic_pair, read_cube, write_cube, HsiCube, SynthParams};
use pctl::gradcheck::full_suite;
use pctl::metrics::{confusion, domain_overlap_score, oa_aa_kappa, Projection2d};
use pctl::model::{Model, ModelState};
use pctl::trainer::{ablation_table, encode_cube, metrics_csv, predict, run_ablation, train, ABLATION_VARIANTS};
use pctl::Error;

/// Relative error every gradient check must stay under.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "pctl",
    version,
    about = "Hyperspectral transfer learning through a shared abundance space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target scene pair.
    GenSynth {
        /// `key = value` synthetic scene parameters.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train on a labeled source and an unlabeled target scene.
    Train {
        #[command(flatten)]
        pair: Pair,
        #[command(flatten)]
        config: ConfigArgs,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the predicted label raster of a scene.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        /// Output `.hsil` raster.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print OA, AA and κ against the labels stored with a cube.
    Evaluate {
        /// Cube whose sibling `.hsil` holds the reference labels.
        #[arg(long)]
        truth: PathBuf,
        /// Predicted raster; without it the model predicts the cube.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "model-config")]
        model_config: Option<PathBuf>,
    },
    /// Train every ablation variant and write the accuracy table.
    Ablate {
        #[command(flatten)]
        pair: Pair,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export 2-D projections of raw pixels and abundances.
    Project2d {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        pair: Pair,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump the learned per-band affine pairs as CSV.
    InspectDecoder {
        #[command(flatten)]
        model: ModelArgs,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Pair {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// `section.key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Configuration the checkpoint was trained with; defaults to the
    /// `config.txt` beside it.
    #[arg(long = "model-config")]
    model_config: Option<PathBuf>,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Io(_) => 2,
            Error::Divergence { .. } | Error::Domain { .. } => 3,
            Error::Incompatible(_) | Error::Parse { .. } | Error::Shape { .. } | Error::Contract(_) => 4,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: String) -> Failure {
    Failure { code: 2, msg }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn load_cube(path: &Path) -> CliResult<HsiCube> {
    read_cube(path).map_err(|e| match e {
        Error::Io(io) => usage(format!("cannot read {}: {io}", path.display())),
        e => Failure::from(e),
    })
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::parse(&read_text(p)?)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        info!("resolved configuration:\n{}", cfg.to_text());
        Ok(cfg)
    }
}

impl ModelArgs {
    fn settings(&self) -> CliResult<ModelSettings> {
        let sibling = self.checkpoint.with_file_name("config.txt");
        let path = match &self.model_config {
            Some(p) => Some(p.clone()),
            None => sibling.exists().then_some(sibling),
        };
        match path {
            Some(p) => Ok(RunConfig::parse(&read_text(&p)?)?.model),
            None => Ok(ModelSettings::default()),
        }
    }

    fn load(&self) -> CliResult<Model> {
        let settings = self.settings()?;
        let bytes =
            fs::read(&self.checkpoint).map_err(|e| usage(format!("cannot read {}: {e}", self.checkpoint.display())))?;
        Ok(ModelState::from_bytes(&bytes, &settings)?.model)
    }
}

fn gen_synth(spec: &Path, out: &Path, overrides: &[String]) -> CliResult<()> {
    let mut params = SynthParams::parse(&read_text(spec)?)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("override '{o}' is not key=value")))?;
        params.set(k.trim().strip_prefix("synth.").unwrap_or(k.trim()), v)?;
    }
    let synth = params.build()?;
    let (source, target, truth) = generate_synthetic_pair(&synth)?;
    out_dir(out)?;
    write_cube(&source, &out.join("source.hsic"))?;
    write_cube(&target, &out.join("target.hsic"))?;
    let c = synth.abundance_dim;
    let mut csv = String::from("domain,row,col");
    for i in 1..=c {
        let _ = write!(csv, ",a{i}");
    }
    csv.push('\n');
    for (name, cube, a) in [("source", &source, &truth.source), ("target", &target, &truth.target)] {
        for (p, row) in a.chunks(c).enumerate() {
            let _ = write!(csv, "{name},{},{}", p / cube.width, p % cube.width);
            for v in row {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
    }
    write(&out.join("abund.csv"), csv)?;
    write(&out.join("config.txt"), params.to_text())?;
    info!(
        "wrote {}×{}×{} pair to {}",
        source.height,
        source.width,
        source.bands,
        out.display()
    );
    Ok(())
}

fn train_cmd(pair: &Pair, config: &ConfigArgs, init: Option<&Path>, out: &Path) -> CliResult<()> {
    let cfg = config.resolve()?;
    let source = load_cube(&pair.source)?;
    let target = load_cube(&pair.target)?;
    let mut state = match init {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            ModelState::from_bytes(&bytes, &cfg.model)?
        }
        None => {
            let classes = source.num_classes();
            ModelState::new(
                Model::new(&cfg.model, source.bands, classes, cfg.train.seed)?,
                cfg.train.learning_rate,
            )
        }
    };
    out_dir(out)?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let report = train(&mut state, &source, &target, &cfg.train, |_| {})?;
    state.save(&out.join("model.ckpt"))?;
    write(&out.join("metrics.csv"), metrics_csv(&report.epochs))?;
    if let Some(a) = &report.source {
        println!("source {}", a.report());
    }
    if let Some(a) = &report.target {
        println!("target {}", a.report());
    }
    Ok(())
}

fn evaluate(truth: &Path, pred: Option<&Path>, model: Option<&ModelArgs>) -> CliResult<()> {
    let cube = load_cube(truth)?;
    let labels = cube
        .labels
        .as_ref()
        .ok_or_else(|| Failure::from(Error::Contract(format!("{} has no label raster", truth.display()))))?;
    let predicted = match (pred, model) {
        (Some(p), _) => {
            let (h, w, raster) =
                decode_labels(&fs::read(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?)?;
            if (h, w) != (cube.height, cube.width) {
                return Err(Error::Incompatible(format!(
                    "prediction is {h}×{w}, truth {}×{}",
                    cube.height, cube.width
                ))
                .into());
            }
            raster
        }
        (None, Some(m)) => predict(&m.load()?, &cube)?,
        (None, None) => return Err(usage("evaluate needs --pred or --checkpoint".into())),
    };
    let k = labels.iter().chain(&predicted).copied().max().unwrap_or(0) as usize;
    println!("{}", oa_aa_kappa(&confusion(labels, &predicted, k.max(1))?)?.report());
    Ok(())
}

fn project2d(model: &ModelArgs, pair: &Pair, out: &Path) -> CliResult<()> {
    let model = model.load()?;
    let source = load_cube(&pair.source)?;
    let target = load_cube(&pair.target)?;
    let c = model.abundance_dim();
    let spaces = [
        ("raw", source.data.clone(), target.data.clone(), source.bands),
        (
            "abundance",
            encode_cube(&model, &source)?,
            encode_cube(&model, &target)?,
            c,
        ),
    ];
    out_dir(out)?;
    let mut summary = String::from("space,class,overlap\n");
    for (name, xs, xt, d) in spaces {
        let ps: Vec<Vec<f64>> = xs.chunks(d).map(<[f64]>::to_vec).collect();
        let pt: Vec<Vec<f64>> = xt.chunks(d).map(<[f64]>::to_vec).collect();
        let proj = Projection2d::fit(&[ps.clone(), pt.clone()].concat())?;
        let (qs, qt): (Vec<[f64; 2]>, Vec<[f64; 2]>) = (
            ps.iter().map(|p| proj.project(p)).collect(),
            pt.iter().map(|p| proj.project(p)).collect(),
        );
        let ls = source.labels.clone().unwrap_or_else(|| vec![0; source.pixels()]);
        let lt = target.labels.clone().unwrap_or_else(|| vec![0; target.pixels()]);
        let mut csv = String::from("domain,class,x,y\n");
        for (domain, pts, labels) in [("source", &qs, &ls), ("target", &qt, &lt)] {
            for (p, l) in pts.iter().zip(labels.iter()) {
                let _ = writeln!(csv, "{domain},{l},{},{}", p[0], p[1]);
            }
        }
        write(&out.join(format!("{name}.csv")), csv)?;
        for (class, score) in domain_overlap_score(&qs, &ls, &qt, &lt)? {
            let _ = writeln!(summary, "{name},{class},{score}");
        }
    }
    print!("{summary}");
    write(&out.join("overlap.csv"), summary)
}

fn gradcheck(seed: u64) -> CliResult<()> {
    let reports = full_suite(seed)?;
    let mut failed = 0;
    for r in &reports {
        let ok = r.passes(GRADCHECK_TOLERANCE);
        failed += usize::from(!ok);
        println!(
            "{} {:<24} max rel err {:.3e} ({} entries, {} skipped)",
            if ok { "ok  " } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped_kinks
        );
    }
    if failed > 0 {
        return Err(Failure {
            code: 1,
            msg: format!("{failed} gradient checks exceed {GRADCHECK_TOLERANCE:e}"),
        });
    }
    Ok(())
}

fn inspect_decoder(model: &ModelArgs, out: Option<&Path>) -> CliResult<()> {
    let model = model.load()?;
    let mut csv = String::from("band,source_scale,source_offset,target_scale,target_offset\n");
    for (j, [cs, ds, ct, dt]) in model.decoder.affine_table(&model.store).into_iter().enumerate() {
        let _ = writeln!(csv, "{j},{cs},{ds},{ct},{dt}");
    }
    match out {
        Some(p) => write(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenSynth { spec, out, overrides } => gen_synth(&spec, &out, &overrides),
        Command::Train {
            pair,
            config,
            init,
            out,
        } => train_cmd(&pair, &config, init.as_deref(), &out),
        Command::Predict { model, input, out } => {
            let cube = load_cube(&input)?;
            let labels = predict(&model.load()?, &cube)?;
            write(&out, encode_labels(cube.height, cube.width, &labels)?)
        }
        Command::Evaluate {
            truth,
            pred,
            checkpoint,
            model_config,
        } => {
            let model = checkpoint.map(|checkpoint| ModelArgs {
                checkpoint,
                model_config,
            });
            evaluate(&truth, pred.as_deref(), model.as_ref())
        }
        Command::Ablate { pair, config, out } => {
            let cfg = config.resolve()?;
            let source = load_cube(&pair.source)?;
            let target = load_cube(&pair.target)?;
            let rows = run_ablation(&cfg.model, &cfg.train, &source, &target, &ABLATION_VARIANTS)?;
            let table = ablation_table(&rows);
            out_dir(&out)?;
            write(&out.join("config.txt"), cfg.to_text())?;
            write(&out.join("ablation.tsv"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Project2d { model, pair, out } => project2d(&model, &pair, &out),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::InspectDecoder { model, out } => inspect_decoder(&model, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
