//! Operator entry point: stats, annotate, select, infer, eval, export,
//! report. Exit codes: 0 success, 1 run failure, 2 usage error.

use std::collections::HashMap;
use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use surgvqa::annotation::{
    annotate_direct_memory, annotate_indirect_memory, build_frequency_table, ExclusionRules,
    IndirectMemoryStore,
};
use surgvqa::backend::{
    mock_from_annotations, Backend, DmAnnotation, HttpBackend, HttpBackendConfig, Retrying,
    ScriptedMock,
};
use surgvqa::config::RunConfig;
use surgvqa::dataset::{
    compute_stats, load_dataset, load_jsonl, AdapterConfig, DatasetId, FrameKey, LabelVocab,
    SampleSet, Split,
};
use surgvqa::exporter::{export_training_records, save_records, validate_records, ExportConfig};
use surgvqa::metrics::{evaluate, MetricsReport};
use surgvqa::pipeline::{load_predictions, run_split, ImageSource, RunOptions};
use surgvqa::retrieval::select_indirect_memory;

#[derive(Parser)]
#[command(
    name = "surgvqa",
    version,
    about = "Memory-augmented surgical VQA pipeline: annotate, infer, export, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Dataset: endovis18, endovis17, or cholec80.
    #[arg(long)]
    dataset: String,
    /// Plain-text key=value config file (flags win over it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus statistics for one split.
    Stats {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        split: String,
        /// Normalized JSONL input (alternative to --root).
        #[arg(long)]
        jsonl: Option<PathBuf>,
        /// Native dataset root (requires split video lists in --config).
        #[arg(long)]
        root: Option<PathBuf>,
        /// Memory annotation file; adds the memory-per-frame average.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Build the frequency table and indirect-memory store from a training
    /// split.
    Annotate {
        #[command(flatten)]
        common: CommonArgs,
        /// Training split, normalized JSONL.
        #[arg(long)]
        jsonl: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write an oracle mock script covering this eval split.
        #[arg(long)]
        oracle_eval: Option<PathBuf>,
    },
    /// Inspect Top-M selection for one frame and question.
    Select {
        /// Memory annotation JSONL from `annotate`.
        #[arg(long)]
        memory: PathBuf,
        /// Frame key as video/frame.
        #[arg(long)]
        frame: String,
        #[arg(long)]
        question: String,
        #[arg(long, default_value_t = 3)]
        m: usize,
    },
    /// Run three-stage inference over a split.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        /// Eval split, normalized JSONL.
        #[arg(long)]
        jsonl: PathBuf,
        /// Chat-completions endpoint URL.
        #[arg(long)]
        backend_url: Option<String>,
        /// Scripted mock backend (JSON file).
        #[arg(long)]
        mock_script: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        /// Reuse the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Directory holding the image files referenced by samples.
        #[arg(long)]
        images_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print the plan (counts, estimated backend calls) and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score a predictions file.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export instruction-tuning records from a training split.
    Export {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        jsonl: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
    /// Render a metrics file as a table plus per-type CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn parse_dataset(s: &str) -> Result<DatasetId, Box<dyn Error>> {
    DatasetId::parse(s).ok_or_else(|| format!("unknown dataset {s:?}").into())
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Box<dyn Error>> {
    let dataset = parse_dataset(&common.dataset)?;
    Ok(RunConfig::load(dataset, common.config.as_deref())?)
}

fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn load_split(
    config: &RunConfig,
    split: Split,
    jsonl: Option<&Path>,
    root: Option<&Path>,
) -> Result<SampleSet, Box<dyn Error>> {
    if let Some(path) = jsonl {
        return Ok(load_jsonl(path)?);
    }
    let root = root
        .map(Path::to_path_buf)
        .or_else(|| config.data_root.clone())
        .ok_or("either --jsonl or --root/--config data_root is required")?;
    let mut adapter = AdapterConfig::new(root, config.dataset);
    adapter.train_videos = config.train_videos.clone();
    adapter.test_videos = config.test_videos.clone();
    Ok(load_dataset(&adapter, config.dataset, split)?)
}

fn run(command: Command) -> Result<(), Box<dyn Error>> {
    match command {
        Command::Stats {
            common,
            split,
            jsonl,
            root,
            annotations,
        } => {
            let config = load_config(&common)?;
            let split = Split::parse(&split).ok_or("split must be train or test")?;
            let set = load_split(&config, split, jsonl.as_deref(), root.as_deref())?;
            let store = annotations
                .map(|p| IndirectMemoryStore::load_jsonl(&p))
                .transpose()?;
            let stats = compute_stats(&set, store.as_ref());
            println!("dataset               {}", set.dataset);
            println!("split                 {}", set.split);
            println!(
                "videos                {}",
                group_thousands(stats.n_videos as u64)
            );
            println!(
                "frames                {}",
                group_thousands(stats.n_frames as u64)
            );
            println!(
                "qa pairs              {}",
                group_thousands(stats.n_qa as u64)
            );
            println!("qa per frame          {:.1}", stats.qa_per_frame);
            println!("answers per question  {:.1}", stats.answers_per_question);
            println!(
                "distinct questions    {}",
                group_thousands(stats.n_distinct_questions as u64)
            );
            println!(
                "distinct answers      {}",
                group_thousands(stats.n_distinct_answers as u64)
            );
            match stats.mem_per_frame {
                Some(m) => println!("memory per frame      {m:.1}"),
                None => println!("memory per frame      (no annotations supplied)"),
            }
            Ok(())
        }
        Command::Annotate {
            common,
            jsonl,
            k,
            n,
            out,
            oracle_eval,
        } => {
            let mut config = load_config(&common)?;
            if let Some(k) = k {
                config.k = k;
            }
            if let Some(n) = n {
                config.n = n;
            }
            let train = load_jsonl(&jsonl)?;
            let table = build_frequency_table(&train)?;
            let rules = ExclusionRules::for_dataset(config.dataset);
            let store = annotate_indirect_memory(&train, &table, config.n, config.k, &rules)?;
            fs::create_dir_all(&out)?;
            store.save_jsonl(&out.join("memory.jsonl"))?;
            config.echo_into(&out)?;
            println!(
                "annotated {} frames with memory ({} train samples, k={}, n={})",
                store.len(),
                train.len(),
                config.k,
                config.n
            );
            if let Some(eval_path) = oracle_eval {
                let eval = load_jsonl(&eval_path)?;
                let mut dm = HashMap::new();
                for sample in eval.samples() {
                    let hints = if rules.dm_excluded(&sample.question) {
                        surgvqa::annotation::HintSet::null()
                    } else {
                        annotate_direct_memory(
                            &sample.question,
                            Some(&sample.answer),
                            &table,
                            config.k,
                        )?
                    };
                    dm.insert(
                        (
                            sample.frame_key(),
                            surgvqa::dataset::normalize_question(&sample.question),
                        ),
                        DmAnnotation {
                            hints,
                            gold: sample.answer.clone(),
                        },
                    );
                }
                let mock = mock_from_annotations(&store, &dm);
                let script_path = out.join("oracle.json");
                mock.save(&script_path)?;
                println!(
                    "oracle mock script for {} samples written to {}",
                    eval.len(),
                    script_path.display()
                );
            }
            Ok(())
        }
        Command::Select {
            memory,
            frame,
            question,
            m,
        } => {
            let store = IndirectMemoryStore::load_jsonl(&memory)?;
            let key = FrameKey::parse(&frame).ok_or("frame must be video/frame")?;
            let selected = select_indirect_memory(&question, store.entries(&key), m, true);
            if selected.is_empty() {
                println!("(no entries selected)");
            }
            for entry in selected {
                println!("{}", entry.render());
            }
            Ok(())
        }
        Command::Infer {
            common,
            jsonl,
            backend_url,
            mock_script,
            parallelism,
            m,
            k,
            resume,
            images_root,
            out,
            dry_run,
        } => {
            let mut config = load_config(&common)?;
            if let Some(url) = backend_url {
                config.backend_url = Some(url);
            }
            if let Some(p) = parallelism {
                config.parallelism = p;
            }
            if let Some(m) = m {
                config.m = m;
            }
            if let Some(k) = k {
                config.k = k;
            }
            let set = load_jsonl(&jsonl)?;
            let infer_config = config.infer_config();
            let rules = ExclusionRules::for_dataset(config.dataset);

            if dry_run {
                let dm_calls = set
                    .samples()
                    .iter()
                    .filter(|s| !rules.dm_excluded(&s.question))
                    .count();
                let im_calls = if config.m > 0 { set.frames().len() } else { 0 };
                println!("samples               {}", set.len());
                println!("frames                {}", set.frames().len());
                println!("direct-memory calls   {dm_calls}");
                println!("indirect-memory calls {im_calls}");
                println!("answer calls          {}", set.len());
                println!("total backend calls   {}", dm_calls + im_calls + set.len());
                return Ok(());
            }

            let backend: Arc<dyn Backend> = match (&config.backend_url, &mock_script) {
                (_, Some(path)) => Arc::new(ScriptedMock::load(path)?),
                (Some(url), None) => {
                    let mut http = HttpBackendConfig::new(url.clone());
                    http.model = config.model.clone();
                    http.token_env = config.token_env.clone();
                    http.timeout = Duration::from_millis(config.timeout_ms);
                    Arc::new(HttpBackend::new(http)?)
                }
                (None, None) => {
                    return Err("one of --backend-url or --mock-script is required".into())
                }
            };
            let backend = Retrying::new(
                backend,
                config.max_retries,
                Duration::from_millis(config.backoff_ms),
            );

            fs::create_dir_all(&out)?;
            config.echo_into(&out)?;
            let checkpoint = out.join("checkpoint.jsonl");
            if !resume && checkpoint.exists() {
                fs::remove_file(&checkpoint)?;
            }
            let options = RunOptions {
                parallelism: config.parallelism,
                checkpoint: Some(checkpoint),
                trace: Some(out.join("trace.jsonl")),
                max_failure_ratio: config.max_failure_ratio,
                images: match images_root {
                    Some(root) => ImageSource::Files(root),
                    None => ImageSource::Synthetic,
                },
            };
            let result = run_split(&set, &backend, &infer_config, &options)?;
            surgvqa::pipeline::save_predictions(
                &result.predictions,
                &out.join("predictions.jsonl"),
            )?;
            println!(
                "answered {} samples ({} resumed, {} failed) -> {}",
                result.predictions.len(),
                result.resumed,
                result.failures,
                out.join("predictions.jsonl").display()
            );
            Ok(())
        }
        Command::Eval {
            common,
            predictions,
            out,
        } => {
            let config = load_config(&common)?;
            let preds = load_predictions(&predictions)?;
            let vocab = LabelVocab::for_dataset(config.dataset);
            let report = evaluate(&preds, &vocab, config.dataset)?;
            print_report(&report);
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(
                    dir.join("metrics.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
                config.echo_into(&dir)?;
            }
            Ok(())
        }
        Command::Export {
            common,
            jsonl,
            k,
            m,
            n,
            seed,
            out,
            dry_run,
        } => {
            let mut config = load_config(&common)?;
            if let Some(k) = k {
                config.k = k;
            }
            if let Some(m) = m {
                config.m = m;
            }
            if let Some(n) = n {
                config.n = n;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let train = load_jsonl(&jsonl)?;
            let table = build_frequency_table(&train)?;
            let rules = ExclusionRules::for_dataset(config.dataset);
            let store = annotate_indirect_memory(&train, &table, config.n, config.k, &rules)?;
            let export_config = ExportConfig {
                k: config.k,
                m: config.m,
                n: config.n,
                seed: config.seed,
            };
            let records = export_training_records(&train, &table, &store, &export_config)?;
            let report = validate_records(&records, config.m);
            if dry_run {
                println!("records               {}", records.len());
                println!("validation violations {}", report.violations.len());
                return Ok(());
            }
            fs::create_dir_all(&out)?;
            save_records(&records, &out.join("records.jsonl"))?;
            fs::write(
                out.join("validation.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            config.echo_into(&out)?;
            println!(
                "exported {} records ({} violations) -> {}",
                records.len(),
                report.violations.len(),
                out.join("records.jsonl").display()
            );
            if !report.is_clean() {
                return Err(format!(
                    "validation found {} violation(s); see validation.json",
                    report.violations.len()
                )
                .into());
            }
            Ok(())
        }
        Command::Report { metrics, out } => {
            let text = fs::read_to_string(&metrics)?;
            let report: MetricsReport = serde_json::from_str(&text)?;
            print_report(&report);
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                let mut csv = String::from(
                    "question_type,count,accuracy,macro_recall,macro_f1,weighted_f1\n",
                );
                for (ty, tuple) in &report.per_type {
                    csv.push_str(&format!(
                        "{ty},{},{:.6},{:.6},{:.6},{:.6}\n",
                        tuple.count,
                        tuple.accuracy,
                        tuple.macro_recall,
                        tuple.macro_f1,
                        tuple.weighted_f1
                    ));
                }
                fs::write(dir.join("per_type.csv"), csv)?;
            }
            Ok(())
        }
    }
}

fn print_report(report: &MetricsReport) {
    println!("samples        {}", report.total);
    println!("accuracy       {:.4}", report.accuracy);
    println!("macro recall   {:.4}", report.macro_recall);
    println!("macro f1       {:.4}", report.macro_f1);
    println!("weighted f1    {:.4}", report.weighted_f1);
    println!("unmatched      {}", report.unmatched_count);
    println!(
        "error causes   wrong_dm={} wrong_im={} other={}",
        report.error_causes.wrong_dm, report.error_causes.wrong_im, report.error_causes.other
    );
    for (ty, tuple) in &report.per_type {
        println!(
            "  {ty:<9} n={:<6} acc={:.4} m-rec={:.4} m-f1={:.4} w-f1={:.4}",
            tuple.count, tuple.accuracy, tuple.macro_recall, tuple.macro_f1, tuple.weighted_f1
        );
    }
}
