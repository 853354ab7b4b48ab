use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use metasum::metadata::FeatureKind;
use metasum::pipeline::{
    evaluate, generate_job, missing_artifacts, prepare, read_report, train_job, write_shared, PipelineError,
    RunManifest, PREDICTIONS_FILE, RUN_ROOT_ENV,
};
use metasum::synthgen::{corpus_stats, generate_corpus, CorpusSpec};

#[derive(Parser)]
#[command(name = "metasum", version, about = "Metadata-conditioned summarization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic corpus: cases, tag lexicon, ICD-10 lexicon, splits.
    GenData(GenData),
    /// Train one model per (feature kind, seed).
    Train(Train),
    /// Decode the test split with each selected checkpoint.
    Generate(Jobs),
    /// Decode, score and aggregate over seeds; writes report.json and table.txt.
    Eval(Manifest),
    /// Print the comparison table of a finished evaluation.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    /// JSON corpus spec; defaults apply to absent fields.
    spec: Option<PathBuf>,
    /// Output directory, relative to the run root when that is set.
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cases: Option<usize>,
}

#[derive(Args)]
struct Manifest {
    manifest: PathBuf,
    /// Directory relative output paths resolve against.
    #[arg(long, env = RUN_ROOT_ENV)]
    run_root: Option<PathBuf>,
    /// Replace the manifest's seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct Jobs {
    #[command(flatten)]
    manifest: Manifest,
    /// Restrict to one feature kind.
    #[arg(long)]
    kind: Option<FeatureKind>,
    /// Restrict to one seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    jobs: Jobs,
    /// Continue each job from its last completed epoch.
    #[arg(long)]
    resume: bool,
    /// Run up to this many jobs at once as separate processes.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct Report {
    #[command(flatten)]
    manifest: Manifest,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

fn load(args: &Manifest) -> Result<RunManifest> {
    let text = std::fs::read(&args.manifest).with_context(|| format!("reading {}", args.manifest.display()))?;
    let mut manifest: RunManifest =
        serde_json::from_slice(&text).with_context(|| format!("parsing {}", args.manifest.display()))?;
    if let Some(seeds) = &args.seeds {
        manifest.seeds = Some(seeds.clone());
    }
    let base = args.manifest.parent().unwrap_or(Path::new(""));
    let manifest = manifest.resolve(base, args.run_root.as_deref())?;
    if !manifest.corpus.is_dir() {
        bail!("corpus not found: {}", manifest.corpus.display());
    }
    Ok(manifest)
}

fn selected(manifest: &RunManifest, jobs: &Jobs) -> Result<Vec<(FeatureKind, u64)>> {
    if let Some(k) = jobs.kind {
        if !manifest.kinds.contains(&k) {
            bail!("{k} is not among the manifest's kinds");
        }
    }
    Ok(manifest
        .jobs()
        .into_iter()
        .filter(|&(k, s)| jobs.kind.is_none_or(|x| x == k) && jobs.seed.is_none_or(|x| x == s))
        .collect())
}

fn gen_data(args: GenData) -> Result<()> {
    let mut spec: CorpusSpec = match &args.spec {
        Some(p) => serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => CorpusSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.cases {
        spec.n_cases = n;
    }
    let out = match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(&args.out),
        None => args.out,
    };
    let corpus = generate_corpus(&spec)?;
    corpus.write_to(&out)?;
    let s = &corpus.splits;
    println!("wrote {} cases to {}", corpus.cases.len(), out.display());
    println!("splits: train {} / valid {} / test {}", s.train.len(), s.valid.len(), s.test.len());
    if let Some(st) = corpus_stats(&corpus.cases) {
        println!(
            "hospitals {}  physicians {}  diseases {}",
            st.hospitals, st.physicians, st.diseases
        );
        println!(
            "stay days: mean {:.2}  median {:.1}  std {:.2}",
            st.stay_mean, st.stay_median, st.stay_std
        );
        println!(
            "words: source {:.1}  summary {:.1}  ratio {:.2}",
            st.source_words_mean,
            st.summary_words_mean,
            st.length_ratio()
        );
    }
    Ok(())
}

fn child_args(args: &Train, kind: FeatureKind, seed: u64) -> Vec<String> {
    let m = &args.jobs.manifest;
    let mut out = vec![
        "train".to_string(),
        m.manifest.display().to_string(),
        "--kind".into(),
        kind.name().into(),
        "--seed".into(),
        seed.to_string(),
    ];
    if let Some(root) = &m.run_root {
        out.extend(["--run-root".into(), root.display().to_string()]);
    }
    if let Some(seeds) = &m.seeds {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        out.extend(["--seeds".into(), list.join(",")]);
    }
    if let Some(n) = args.max_epochs {
        out.extend(["--max-epochs".into(), n.to_string()]);
    }
    if args.resume {
        out.push("--resume".into());
    }
    out
}

fn train(args: Train) -> Result<()> {
    let mut manifest = load(&args.jobs.manifest)?;
    if let Some(n) = args.max_epochs {
        manifest.train.max_epochs = n;
    }
    let jobs = selected(&manifest, &args.jobs)?;
    let prepared = prepare(&manifest)?;
    write_shared(&manifest, &prepared)?;

    if args.parallel > 1 && jobs.len() > 1 {
        let exe = std::env::current_exe()?;
        let mut queue = jobs.into_iter();
        let mut running: Vec<((FeatureKind, u64), Child)> = Vec::new();
        let mut failed = Vec::new();
        loop {
            while running.len() < args.parallel {
                let Some((kind, seed)) = queue.next() else { break };
                let child = Command::new(&exe).args(child_args(&args, kind, seed)).spawn()?;
                running.push(((kind, seed), child));
            }
            if running.is_empty() {
                break;
            }
            let ((kind, seed), mut child) = running.remove(0);
            if !child.wait()?.success() {
                failed.push(format!("{kind} seed {seed}"));
            }
        }
        if !failed.is_empty() {
            bail!("failed jobs: {}", failed.join(", "));
        }
        return Ok(());
    }

    for (kind, seed) in jobs {
        let run = train_job(&manifest, &prepared, kind, seed, args.resume, |m| {
            eprintln!(
                "{kind} seed {seed} epoch {}: loss {:.4}  valid R-1 {:.4}",
                m.epoch, m.train_loss, m.valid_rouge1
            )
        })?;
        println!(
            "{kind} seed {seed}: selected epoch {} (valid R-1 {:.4}) in {}",
            run.selected_epoch,
            run.selected().valid_rouge1,
            manifest.run_dir(kind, seed).display()
        );
    }
    Ok(())
}

fn generate(args: Jobs) -> Result<()> {
    let manifest = load(&args.manifest)?;
    let jobs = selected(&manifest, &args)?;
    let gaps: Vec<String> = missing_artifacts(&manifest)
        .into_iter()
        .filter(|g| jobs.iter().any(|(k, s)| g.starts_with(&format!("{k} seed {s}:"))))
        .collect();
    if !gaps.is_empty() {
        return Err(PipelineError::Missing(gaps).into());
    }
    let prepared = prepare(&manifest)?;
    for (kind, seed) in jobs {
        let predictions = generate_job(&manifest, &prepared, kind, seed)?;
        println!(
            "{kind} seed {seed}: {} summaries in {}",
            predictions.len(),
            manifest.run_dir(kind, seed).join(PREDICTIONS_FILE).display()
        );
    }
    Ok(())
}

fn eval(args: Manifest) -> Result<()> {
    let manifest = load(&args)?;
    let gaps = missing_artifacts(&manifest);
    if !gaps.is_empty() {
        return Err(PipelineError::Missing(gaps).into());
    }
    let prepared = prepare(&manifest)?;
    let report = evaluate(&manifest, &prepared)?;
    print!("{}", report.table());
    Ok(())
}

fn report(args: Report) -> Result<()> {
    let manifest = load(&args.manifest)?;
    let report = read_report(&manifest).context("no report yet; run `metasum eval` first")?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Generate(a) => generate(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
