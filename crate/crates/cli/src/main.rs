use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use magvlt::config::RunConfig;
use magvlt::decode::{self, DecodeOutput, DecodeTrace};
use magvlt::error::Error;
use magvlt::eval::{self, BenchCell, Directional, EvalOptions, Variant};
use magvlt::mask::Task;
use magvlt::model::{Attention, ModelParams};
use magvlt::synth::{self, make_split, Manifest, Sample, Split, GRAMMAR_VERSION};
use magvlt::train::{self, encode_samples, Provenance, RunPaths};
use magvlt::vocab::{Cell, GridImage, Layout, TextCodec, TokenId};

#[derive(Parser)]
#[command(name = "magvlt", version, about = "Masked generative vision-and-language modeling on synthetic grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset: toy, reference or paper.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/validation shards, vocabulary and manifest.
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model into `--out`.
    Train {
        /// Dataset directory from gen-data; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Also copy the final checkpoint here.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Continue from the checkpoint in `--out` if there is one.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate from a checkpoint.
    Sample {
        mode: Mode,
        #[arg(long)]
        ckpt: PathBuf,
        /// Caption for t2i, inpaint and infill.
        #[arg(long)]
        text: Option<String>,
        /// Image as space-separated cell codes (a shard line also works).
        #[arg(long)]
        image: Option<String>,
        /// Print the per-step JSON trace.
        #[arg(long)]
        trace: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the validation shard.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        /// Also run the MixSel selection probe.
        #[arg(long)]
        probe: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time masked decoding against the causal baseline.
    Bench {
        /// Masked model; freshly initialized when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Causal baseline; freshly initialized when absent.
        #[arg(long)]
        ar_ckpt: Option<PathBuf>,
        #[arg(long = "K", value_delimiter = ',', default_value = "10")]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "t2i,i2t")]
        modality: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 8)]
        prompts: usize,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate the ablation matrix.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Task-weight settings to run; all six when absent.
        #[arg(long, value_delimiter = ',')]
        weights: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    T2i,
    I2t,
    Joint,
    Inpaint,
    Infill,
}

/// Failure of one command: a stable kind tag plus a message.
struct Failure {
    kind: &'static str,
    key: Option<String>,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let key = match &e {
            Error::Config { key, .. } => Some(key.clone()),
            _ => None,
        };
        Failure {
            kind: e.kind(),
            key,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        kind: "usage",
        key: None,
        message: message.into(),
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Res<T> {
    r.map_err(|e| Error::io(path, e).into())
}

/// Preset, then file, then `MAGVLT_SEED`, then flags.
fn resolve(args: &ConfigArgs, base: Option<RunConfig>) -> Res<RunConfig> {
    let mut rc = match (&args.preset, base) {
        (Some(p), _) => RunConfig::preset(p)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::toy(),
    };
    if let Some(path) = &args.config {
        let text = io(path, fs::read_to_string(path))?;
        if args.preset.is_none() {
            rc = RunConfig::parse(&text)?;
        } else {
            rc.apply_text(&text)?;
        }
    }
    rc.apply_env()?;
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("--set `{o}` is not KEY=VALUE")))?;
        rc.set(k.trim(), v)?;
    }
    if let Some(s) = args.seed {
        rc.seed = s;
    }
    if let Some(s) = args.steps {
        rc.steps = s;
    }
    if let Some(b) = args.batch {
        rc.batch = b;
    }
    rc.validate()?;
    Ok(rc)
}

/// Loads a checkpoint and the run config stored in it, with overrides applied.
fn load_model(path: &Path, args: &ConfigArgs) -> Res<(ModelParams<f32>, RunConfig)> {
    let (params, header) = train::load_checkpoint(path)?;
    let stored = RunConfig::parse(&header.run_config)?;
    let rc = resolve(args, Some(stored))?;
    if rc.layout().seq_len() != params.config.seq_len || rc.max_text != params.config.max_text {
        return Err(Error::config("grid", "overrides disagree with the checkpoint's sequence shape").into());
    }
    Ok((params, rc))
}

fn load_split(data: Option<&Path>, rc: &RunConfig) -> Res<Split> {
    match data {
        Some(dir) => {
            let m = synth::read_manifest(dir)?;
            if m.grid != rc.grid {
                return Err(Error::config("grid", format!("dataset has grid {}, config {}", m.grid, rc.grid)).into());
            }
            Ok(Split {
                train: synth::read_shard(&dir.join("train.tsv"), m.grid)?,
                val: synth::read_shard(&dir.join("val.tsv"), m.grid)?,
            })
        }
        None => Ok(make_split(rc.n_train, rc.n_val, rc.seed, rc.grid)?),
    }
}

fn write(path: &Path, text: &str) -> Res<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        io(dir, fs::create_dir_all(dir))?;
    }
    io(path, fs::write(path, text))
}

fn parse_image(text: &str, grid: usize) -> Res<GridImage> {
    let codes = text.split('\t').next().unwrap_or("");
    let cells = codes
        .split_whitespace()
        .map(|c| {
            c.parse::<usize>()
                .ok()
                .and_then(Cell::from_code)
                .ok_or_else(|| Failure::from(Error::Parse(format!("bad cell code `{c}`"))))
        })
        .collect::<Res<Vec<_>>>()?;
    if cells.len() != grid * grid {
        return Err(Error::Parse(format!("{} cells given, expected {}", cells.len(), grid * grid)).into());
    }
    Ok(GridImage::from_cells(grid, cells)?)
}

fn encode_caption(text: &str, layout: &Layout) -> Res<(Vec<TokenId>, usize)> {
    Ok(TextCodec::new(layout.n_text).encode(text.trim())?)
}

fn print_output(out: &DecodeOutput, hash: &str, trace: bool) -> Res<()> {
    println!("# config {hash}");
    let img = out.image()?;
    print!("{}", img.to_art());
    let caption = out.caption().unwrap_or_default();
    println!("{}", Sample { image: img, caption }.to_line());
    println!("{}", out.caption().unwrap_or_default());
    if trace {
        print_trace(&out.trace, hash)?;
    }
    Ok(())
}

fn print_trace(trace: &DecodeTrace, hash: &str) -> Res<()> {
    let v = serde_json::json!({ "config_hash": hash, "trace": trace });
    println!("{}", serde_json::to_string(&v).map_err(Error::from)?);
    Ok(())
}

fn require<'a>(v: &'a Option<String>, flag: &str, mode: &str) -> Res<&'a str> {
    v.as_deref().ok_or_else(|| usage(format!("sample {mode} needs --{flag}")))
}

fn sample(mode: Mode, ckpt: &Path, text: &Option<String>, image: &Option<String>, trace: bool, args: &ConfigArgs) -> Res<()> {
    let (params, rc) = load_model(ckpt, args)?;
    let layout = rc.layout();
    let req = rc.request()?;
    let hash = rc.hash();
    if params.config.attention == Attention::Causal {
        let (cond, dir, name) = match mode {
            Mode::T2i => (encode_caption(require(text, "text", "t2i")?, &layout)?.0, Task::T2I, "t2i"),
            Mode::I2t => (parse_image(require(image, "image", "i2t")?, rc.grid)?.encode(), Task::I2T, "i2t"),
            _ => return Err(Error::Contract("the causal baseline only samples t2i and i2t".into()).into()),
        };
        let o = decode::decode_ar(&params, &layout, &cond, dir, &req)?;
        println!("# config {hash}");
        if name == "t2i" {
            let img = GridImage::decode(rc.grid, &o.tokens)?;
            print!("{}", img.to_art());
            println!("{}", img.cells().iter().map(|c| c.code().to_string()).collect::<Vec<_>>().join(" "));
        } else {
            let mut y = o.tokens.clone();
            y.resize(layout.n_text, magvlt::vocab::PAD);
            println!("{}", TextCodec::new(layout.n_text).decode(&y)?);
        }
        if trace {
            println!("{}", serde_json::json!({ "config_hash": hash, "forwards": o.forwards }));
        }
        return Ok(());
    }
    let out = match mode {
        Mode::T2i => {
            let (y, _) = encode_caption(require(text, "text", "t2i")?, &layout)?;
            decode::generate_image(&params, &layout, &y, &req)?
        }
        Mode::I2t => {
            let x = parse_image(require(image, "image", "i2t")?, rc.grid)?.encode();
            decode::generate_text(&params, &layout, &x, &req)?
        }
        Mode::Joint => decode::decode_joint(&params, &layout, &req)?,
        Mode::Inpaint => {
            let x = parse_image(require(image, "image", "inpaint")?, rc.grid)?.encode();
            let (y, _) = encode_caption(require(text, "text", "inpaint")?, &layout)?;
            decode::inpaint(&params, &layout, &x, &decode::central_region(rc.grid), &y, &req)?
        }
        Mode::Infill => {
            let x = parse_image(require(image, "image", "infill")?, rc.grid)?.encode();
            let (y, n) = encode_caption(require(text, "text", "infill")?, &layout)?;
            decode::infill(&params, &layout, &x, &y, n, &req)?
        }
    };
    print_output(&out, &hash, trace)
}

fn gen_data(out: &Path, args: &ConfigArgs) -> Res<()> {
    let rc = resolve(args, None)?;
    let split = make_split(rc.n_train, rc.n_val, rc.seed, rc.grid)?;
    let manifest = Manifest {
        grid: rc.grid,
        max_text: rc.max_text,
        n_train: rc.n_train,
        n_val: rc.n_val,
        seed: rc.seed,
        grammar_version: GRAMMAR_VERSION,
        config_hash: rc.hash(),
    };
    synth::write_dataset(out, &split, &manifest)?;
    write(&out.join("config.txt"), &rc.to_text())?;
    println!("wrote {} train / {} val samples to {} (config {})", split.train.len(), split.val.len(), out.display(), rc.hash());
    Ok(())
}

fn train_cmd(data: Option<&Path>, out: &Path, ckpt: Option<&Path>, resume: bool, args: &ConfigArgs) -> Res<()> {
    let rc = resolve(args, None)?;
    let split = load_split(data, &rc)?;
    let layout = rc.layout();
    let enc = encode_samples(&split.train, &layout)?;
    let tc = rc.train()?;
    let prov = Provenance {
        run_config: rc.to_text(),
        config_hash: rc.hash(),
    };
    let paths = RunPaths::new(out);
    let every = (tc.steps / 10).max(1);
    let trainer = train::run_training(tc, &enc, &paths, rc.checkpoint_every, &prov, resume, |r| {
        if r.step % every == 0 {
            log::info!("step {} {} loss {:.4} lr {:.2e}", r.step, r.task.name(), r.total, r.lr);
        }
    })?;
    write(&out.join("config.txt"), &rc.to_text())?;
    if let Some(c) = ckpt {
        if let Some(dir) = c.parent().filter(|d| !d.as_os_str().is_empty()) {
            io(dir, fs::create_dir_all(dir))?;
        }
        io(c, fs::copy(paths.checkpoint(), c))?;
    }
    println!(
        "trained {} steps ({} skipped) into {} (config {})",
        trainer.step,
        trainer.skipped,
        paths.checkpoint().display(),
        rc.hash()
    );
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: Option<&Path>, out: &Path, samples: Option<usize>, probe: bool, args: &ConfigArgs) -> Res<()> {
    let (params, rc) = load_model(ckpt, args)?;
    let split = load_split(data, &rc)?;
    let layout = rc.layout();
    let req = rc.request()?;
    let n = samples.unwrap_or(rc.eval_samples);
    let opts = EvalOptions {
        samples: n,
        joint: rc.eval_joint,
        seed: rc.seed,
        config_hash: rc.hash(),
    };
    let ev = eval::eval_model(&params, &layout, &split.val, &req, &opts)?;
    io(out, fs::create_dir_all(out))?;
    write(&out.join("eval.csv"), &ev.report.to_csv())?;
    eval::write_audit(&out.join("audit.jsonl"), &ev.audit)?;
    print!("{}", ev.report.to_csv());
    if probe && params.config.attention == Attention::Bidirectional {
        let p = eval::mixsel_probe(&params, &layout, &split.val[..n.min(split.val.len())], &req, rc.seed)?;
        let v = serde_json::json!({ "config_hash": rc.hash(), "probe": p });
        write(&out.join("probe.json"), &serde_json::to_string_pretty(&v).map_err(Error::from)?)?;
        println!("mixsel fidelity {} (shuffled {})", p.fidelity, p.shuffled_fidelity);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench_cmd(
    ckpt: Option<&Path>,
    ar_ckpt: Option<&Path>,
    ks: &[usize],
    modality: &[String],
    repeats: usize,
    warmup: usize,
    prompts: usize,
    out: &Path,
    args: &ConfigArgs,
) -> Res<()> {
    let (masked, rc) = match ckpt {
        Some(p) => load_model(p, args)?,
        None => {
            let rc = resolve(args, None)?;
            let mut masked_rc = rc.clone();
            masked_rc.set("objective", "masked")?;
            (train::init_params(&masked_rc.train()?)?, rc)
        }
    };
    let ar = match ar_ckpt {
        Some(p) => train::load_checkpoint(p)?.0,
        None => {
            let mut ar_rc = rc.clone();
            ar_rc.set("objective", "ar")?;
            train::init_params(&ar_rc.train()?)?
        }
    };
    let mut cells = Vec::new();
    for m in modality {
        let task = match m.as_str() {
            "t2i" => Task::T2I,
            "i2t" => Task::I2T,
            _ => return Err(usage(format!("unknown modality `{m}` (t2i, i2t)"))),
        };
        for &k in ks {
            cells.push(BenchCell { modality: task, k });
        }
    }
    let split = make_split(1, prompts.max(1), rc.seed, rc.grid)?;
    let req = rc.request()?;
    let rep = eval::bench_decode(&masked, &ar, &rc.layout(), &split.val, &cells, repeats, warmup, &req, &rc.hash())?;
    io(out, fs::create_dir_all(out))?;
    write(&out.join("bench_timing.csv"), &rep.timing_csv())?;
    write(&out.join("bench_summary.csv"), &rep.summary_csv())?;
    print!("{}", rep.summary_csv());
    Ok(())
}

fn ablate_cmd(seeds: &[u64], weights: &[String], variants: &[String], out: &Path, args: &ConfigArgs) -> Res<()> {
    let rc = resolve(args, None)?;
    let variants: Vec<Variant> = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants
            .iter()
            .map(|v| Variant::parse(v).ok_or_else(|| usage(format!("unknown variant `{v}` (base, +um, +um+ms)"))))
            .collect::<Res<_>>()?
    };
    let cells: Vec<_> = eval::ablation_matrix()
        .into_iter()
        .filter(|c| weights.is_empty() || weights.contains(&c.weights))
        .filter(|c| variants.contains(&c.variant))
        .collect();
    if cells.is_empty() {
        return Err(usage("no ablation cells selected"));
    }
    let split = make_split(rc.n_train, rc.n_val, rc.seed, rc.grid)?;
    let rows = eval::run_ablation(&rc, &cells, seeds, &split, |r| {
        log::info!("{} {} seed {}: i2t {:.3} fidelity {:.3}", r.weights, r.variant, r.seed, r.i2t_oracle, r.mixsel_fidelity);
    })?;
    io(out, fs::create_dir_all(out))?;
    write(&out.join("ablation.csv"), &eval::ablation_csv(&rows))?;
    let mut summary = String::new();
    let mut seen = Vec::new();
    for c in &cells {
        if !seen.contains(&c.weights) {
            seen.push(c.weights.clone());
            let d = Directional::from_rows(&rows, &c.weights);
            summary.push_str(&format!(
                "{}; i2t direction {}; fidelity direction {}\n",
                d.summary(),
                d.i2t_holds(),
                d.fidelity_holds()
            ));
        }
    }
    write(&out.join("directional.txt"), &summary)?;
    print!("{}", eval::ablation_csv(&rows));
    print!("{summary}");
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    match &cli.command {
        Command::GenData { out, cfg } => gen_data(out, cfg),
        Command::Train {
            data,
            out,
            ckpt,
            resume,
            cfg,
        } => train_cmd(data.as_deref(), out, ckpt.as_deref(), *resume, cfg),
        Command::Sample {
            mode,
            ckpt,
            text,
            image,
            trace,
            cfg,
        } => sample(*mode, ckpt, text, image, *trace, cfg),
        Command::Eval {
            ckpt,
            data,
            out,
            samples,
            probe,
            cfg,
        } => eval_cmd(ckpt, data.as_deref(), out, *samples, *probe, cfg),
        Command::Bench {
            ckpt,
            ar_ckpt,
            k,
            modality,
            repeats,
            warmup,
            prompts,
            out,
            cfg,
        } => bench_cmd(ckpt.as_deref(), ar_ckpt.as_deref(), k, modality, *repeats, *warmup, *prompts, out, cfg),
        Command::Ablate {
            seeds,
            weights,
            variants,
            out,
            cfg,
        } => ablate_cmd(seeds, weights, variants, out, cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.message.replace(['\n', '\r'], " ");
            match f.key {
                Some(k) => eprintln!("error kind={} key={} msg={:?}", f.kind, k, msg),
                None => eprintln!("error kind={} msg={:?}", f.kind, msg),
            }
            ExitCode::from(2)
        }
    }
}
