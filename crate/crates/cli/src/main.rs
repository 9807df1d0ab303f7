use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Parser, Subcommand};
use robustseg_core::data::{
    case_seed, normalize_case, read_case, synth_case, write_case, write_manifest, Case, PhantomConfig,
};
use robustseg_core::diagnostics::{model_spot_check, op_suite, CheckOutcome, MODEL_TOL};
use robustseg_core::eval::{ablate, evaluate, reconstruct, EvalTable};
use robustseg_core::model::{ModalityMask, MODALITY_NAMES};
use robustseg_core::train::{load_cases, train, Checkpoint, IterationLog, TrainConfig};
use robustseg_core::{Error, Tensor};

#[derive(Parser)]
#[command(name = "robustseg", version, about = "Missing-modality robust tumor segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Volume edge length in voxels.
        #[arg(long, default_value_t = 48)]
        edge: usize,
    },
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line every N iterations (0 disables).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Sliding-window evaluation with region Dice.
    #[command(group(ArgGroup::new("subset").required(true).args(["modalities", "all_combinations"])))]
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated subset, e.g. FLAIR,T1c.
        #[arg(long)]
        modalities: Option<String>,
        /// Evaluate every non-empty subset.
        #[arg(long)]
        all_combinations: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        md: Option<PathBuf>,
        /// Directory for predicted label volumes.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Reconstruct every modality of a case from a subset of its inputs.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        modalities: String,
        /// Output MMVC file; defaults next to the case.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the three ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every op, loss and the tiny network.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => 1,
            Failure::Core(Error::Numeric(_)) | Failure::Check(_) => 3,
            Failure::Core(_) => 2,
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn synth(cases: usize, seed: u64, out: &Path, edge: usize) -> Result<(), Failure> {
    if cases == 0 {
        return Err(Failure::Usage("--cases must be at least 1".into()));
    }
    create_dir(out)?;
    let config = PhantomConfig::with_edge(edge);
    let mut paths = Vec::with_capacity(cases);
    for i in 0..cases {
        let mut case = synth_case(&config, case_seed(seed, i as u64))?;
        case.set_id(format!("case_{i:04}"));
        let path = out.join(format!("{}.mmvc", case.id()));
        write_case(&case, &path)?;
        paths.push(path);
    }
    let manifest = out.join("manifest.txt");
    write_manifest(&manifest, &paths)?;
    println!("wrote {cases} cases of {edge}^3 voxels and {}", manifest.display());
    Ok(())
}

fn progress_printer(log_every: usize) -> impl FnMut(&IterationLog) {
    let start = Instant::now();
    move |l: &IterationLog| {
        if log_every > 0 && (l.iter + 1).is_multiple_of(log_every) {
            eprintln!(
                "iter {:>6} epoch {:>4} lr {:.3e} seg {:>10.4} rec {:.4} kl {:.4} total {:>10.4} [{:.0}s]",
                l.iter + 1,
                l.epoch,
                l.lr,
                l.seg,
                l.rec,
                l.kl,
                l.total,
                start.elapsed().as_secs_f64()
            );
        }
    }
}

fn run_train(config_path: &Path, out: &Path, log_every: usize) -> Result<(), Failure> {
    let config = TrainConfig::load(config_path)?;
    let cases = load_cases(&config.train_manifest)?;
    create_dir(out)?;
    write_file(&out.join("config.txt"), &config.to_text())?;
    let summary = train(&config, &cases, out, progress_printer(log_every))?;
    println!(
        "trained {} iterations; final total loss {:.4}; checkpoint {}",
        summary.iterations,
        summary.last.total,
        summary.checkpoints.last().expect("one per epoch").display()
    );
    Ok(())
}

fn print_table(table: &EvalTable, csv: Option<&Path>, md: Option<&Path>) -> Result<(), Failure> {
    let names = &MODALITY_NAMES[..table.rows[0].mask.len().min(MODALITY_NAMES.len())];
    let markdown = table.to_markdown(names);
    print!("{markdown}");
    if let Some(p) = csv {
        write_file(p, &table.to_csv())?;
    }
    if let Some(p) = md {
        write_file(p, &markdown)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    checkpoint: &Path,
    manifest: &Path,
    modalities: Option<&str>,
    csv: Option<&Path>,
    md: Option<&Path>,
    predictions: Option<&Path>,
) -> Result<(), Failure> {
    let net = Checkpoint::load(checkpoint)?.network()?;
    let m = net.config().modalities;
    let subsets = match modalities {
        Some(list) => vec![ModalityMask::parse(list, m).map_err(|e| Failure::Usage(e.to_string()))?],
        None => ModalityMask::all_subsets(m),
    };
    let cases = load_cases(manifest)?;
    if let Some(dir) = predictions {
        create_dir(dir)?;
    }
    let table = evaluate(&net, &cases, &subsets, predictions)?;
    print_table(&table, csv, md)
}

fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

fn run_reconstruct(checkpoint: &Path, case_path: &Path, modalities: &str, out: Option<&Path>) -> Result<(), Failure> {
    let net = Checkpoint::load(checkpoint)?.network()?;
    let mask = ModalityMask::parse(modalities, net.config().modalities).map_err(|e| Failure::Usage(e.to_string()))?;
    let case = read_case(case_path)?;
    let recs = reconstruct(&net, &case, &mask)?;
    let normalized = normalize_case(&case)?;
    for (i, (r, x)) in recs.iter().zip(normalized.volumes()).enumerate() {
        let name = MODALITY_NAMES.get(i).copied().unwrap_or("?");
        let state = if mask.is_kept(i) { "kept" } else { "dropped" };
        println!("{name:<6} {state:<8} mean |x - x_hat| = {:.4}", mean_abs_diff(r, x));
    }
    let label = mask.label();
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => case_path.with_file_name(format!("{}_recon_{label}.mmvc", case.id())),
    };
    let out_case = Case::new(
        format!("{}_recon_{label}", case.id()),
        case.classes(),
        recs,
        case.labels().to_vec(),
        case.brain_mask().to_vec(),
    )?;
    write_case(&out_case, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_ablate(config_path: &Path, out: &Path) -> Result<(), Failure> {
    let config = TrainConfig::load(config_path)?;
    let eval_manifest = config
        .eval_manifest
        .clone()
        .ok_or_else(|| Failure::Core(Error::Config("ablate needs eval_manifest in the config".into())))?;
    let train_cases = load_cases(&config.train_manifest)?;
    let eval_cases = load_cases(&eval_manifest)?;
    create_dir(out)?;
    let mut printers: Vec<_> = (0..3).map(|_| progress_printer(200)).collect();
    let report = ablate(&config, &train_cases, &eval_cases, out, |v, l| printers[v as usize](l))?;
    let markdown = report.to_markdown();
    write_file(&out.join("ablation.csv"), &report.to_csv())?;
    write_file(&out.join("ablation.md"), &markdown)?;
    print!("{markdown}");
    Ok(())
}

fn print_check(c: &CheckOutcome) {
    println!(
        "{:<28} {:>4} elements  max rel error {:.3e}  tol {:.0e}  {}",
        c.name,
        c.elements,
        c.max_rel_error,
        c.tol,
        if c.passed() { "ok" } else { "FAILED" }
    );
}

fn run_gradcheck(tol: f64, seed: u64) -> Result<(), Failure> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Failure::Usage("--tol must be positive".into()));
    }
    let mut outcomes = op_suite(seed, tol)?;
    outcomes.push(model_spot_check(seed, MODEL_TOL.max(tol))?);
    outcomes.iter().for_each(print_check);
    let failed: Vec<&str> = outcomes.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { cases, seed, out, edge } => synth(cases, seed, &out, edge),
        Command::Train { config, out, log_every } => run_train(&config, &out, log_every),
        Command::Eval {
            checkpoint,
            manifest,
            modalities,
            all_combinations: _,
            csv,
            md,
            predictions,
        } => run_eval(
            &checkpoint,
            &manifest,
            modalities.as_deref(),
            csv.as_deref(),
            md.as_deref(),
            predictions.as_deref(),
        ),
        Command::Reconstruct {
            checkpoint,
            case,
            modalities,
            out,
        } => run_reconstruct(&checkpoint, &case, &modalities, out.as_deref()),
        Command::Ablate { config, out } => run_ablate(&config, &out),
        Command::Gradcheck { tol, seed } => run_gradcheck(tol, seed),
    }
}

/// Training allocates and frees multi-megabyte buffers every step. With glibc's
/// defaults each one is a fresh mmap, and page faults cost about a fifth of the
/// run time.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

fn main() -> ExitCode {
    tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) | Failure::Check(m) => eprintln!("error: {m}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
