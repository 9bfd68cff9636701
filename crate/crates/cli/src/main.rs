//! `chronochat`: one verb per pipeline stage.
//!
//! Exit status is 0 on success, 1 on a domain error and 2 on a usage error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use chronochat_core::catalog::{load_event_pool, EventPool, Schedule, Step};
use chronochat_core::dataset::{
    adapt_external_corpus, compute_stats, export_conversation, export_corpus, import_conversations, Conversation, Split,
};
use chronochat_core::dialogue::selfchat::run_whole_session_chat;
use chronochat_core::dialogue::{
    build_context, plan_self_chat, run_self_chat, ContextInput, ContextMode, SelfChatConfig, SelfChatSettings,
};
use chronochat_core::eval::{
    compare_models, filter_judgments_with, gap_bucket_report, load_judgments, render_bucket_table, render_comparison_table,
};
use chronochat_core::llm::{
    estimate_event_duration, extract_events, generate_event_schedule, BackendConfig, BackendMode, ChatBackend,
    ExtractionStyle,
};
use chronochat_core::progress::{compute_progress_label, split_schedule};
use chronochat_core::temporal::{parse_duration, Duration};
use chronochat_core::timeline::{generate_pair_timelines, ClockState, Timeline, TimelineConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "chronochat", version, about = "Time-aware multi-session dialogue toolkit")]
struct Cli {
    /// Write the main output here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn duration_arg(s: &str) -> std::result::Result<Duration, String> {
    parse_duration(s).map_err(|e| e.to_string())
}

fn mode_arg(s: &str) -> std::result::Result<ContextMode, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StyleArg {
    Completion,
    SlotFilling,
    Qa,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendArg,
    /// Mock fixture file; the bundled fixtures when absent.
    #[arg(long)]
    fixtures: Option<PathBuf>,
}

impl BackendArgs {
    fn build(&self) -> Result<Box<dyn ChatBackend>> {
        let mut config = match self.backend {
            BackendArg::Mock => BackendConfig::mock(),
            BackendArg::Http => BackendConfig::from_env()?,
        };
        config.mode = match self.backend {
            BackendArg::Mock => BackendMode::Mock,
            BackendArg::Http => BackendMode::Http,
        };
        if self.fixtures.is_some() {
            config.fixture_path = self.fixtures.clone();
        }
        Ok(config.build()?)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw timelines for a pair of speakers.
    GenTimeline {
        #[arg(long)]
        seed: u64,
        /// Event pool file; the bundled reference pool when absent.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, value_parser = duration_arg, default_value = "1 year")]
        horizon: Duration,
    },
    /// Move a timeline's clock across one gap and print the update bundle.
    Advance {
        /// Timeline JSON, or a pair as written by gen-timeline.
        #[arg(long)]
        timeline: PathBuf,
        /// Which timeline of a pair to use (0 or 1).
        #[arg(long, default_value_t = 0)]
        speaker: usize,
        /// Clock position before the gap; the timeline origin when absent.
        #[arg(long, value_parser = duration_arg)]
        elapsed: Option<Duration>,
        #[arg(long, value_parser = duration_arg)]
        gap: Duration,
    },
    /// Quantized progress of an event.
    Progress {
        #[arg(long, value_parser = duration_arg)]
        duration: Duration,
        #[arg(long, value_parser = duration_arg)]
        elapsed: Duration,
    },
    /// Split a step schedule into finished and to-do steps.
    SplitSchedule {
        /// Schedule JSON: `{"steps": [...]}` or a bare list of steps.
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long, value_parser = duration_arg)]
        elapsed: Duration,
    },
    /// Ask the model which events the speakers are engaged in.
    ExtractEvents {
        /// Dialogue history file, `-` for standard input.
        #[arg(long, default_value = "-")]
        history: PathBuf,
        #[arg(long, value_enum, default_value = "completion")]
        style: StyleArg,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Ask the model how long an event usually takes.
    EstimateDuration {
        #[arg(long)]
        event: String,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Ask the model for a step schedule of an event.
    GenSchedule {
        #[arg(long)]
        event: String,
        #[arg(long, value_parser = duration_arg)]
        duration: Duration,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Render a context block from a JSON description of its parts.
    BuildContext {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = mode_arg, default_value = "both")]
        mode: ContextMode,
        #[arg(long, default_value_t = chronochat_core::dialogue::context::DEFAULT_CHAR_BUDGET)]
        budget: usize,
    },
    /// Generate conversations by letting the model talk to itself.
    SelfChat {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Worker threads; output does not depend on this.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, default_value_t = 3)]
        sessions: usize,
        #[arg(long, default_value_t = chronochat_core::dialogue::selfchat::DEFAULT_MIN_UTTERANCES)]
        min_utterances: usize,
        #[arg(long, value_parser = mode_arg, default_value = "both")]
        mode: ContextMode,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        pool: Option<PathBuf>,
        /// One model call per session instead of one per turn.
        #[arg(long)]
        whole_session: bool,
        /// Also write the planned gaps, timelines and update cards here.
        #[arg(long)]
        dump_timeline: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Validate a dataset file, or convert an external corpus.
    Import {
        /// A `.chrono.jsonl` file to validate.
        #[arg(required_unless_present = "from_gapchat", conflicts_with = "from_gapchat")]
        file: Option<PathBuf>,
        /// Directory holding an external multi-session corpus.
        #[arg(long)]
        from_gapchat: Option<PathBuf>,
    },
    /// Dialogue and utterance counts by number of sessions.
    Stats {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Aggregate pairwise human judgments.
    Eval {
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long)]
        baseline: String,
        /// JSON object from task id to transcript, for the copy check.
        #[arg(long)]
        transcripts: Option<PathBuf>,
        /// Break scores down by gap bucket.
        #[arg(long)]
        buckets: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run the chat-room service.
    Serve {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    if path.as_os_str() == "-" {
        let mut text = String::new();
        std::io::stdin().read_to_string(&mut text)?;
        return Ok(text);
    }
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn load_pool(path: Option<&Path>) -> Result<EventPool> {
    Ok(match path {
        Some(p) => load_event_pool(p)?,
        None => EventPool::reference(),
    })
}

fn emit(out: Option<&Path>, mut text: String) -> Result<()> {
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum TimelineFile {
    One(Timeline),
    Pair([Timeline; 2]),
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum ScheduleFile {
    Wrapped { steps: Vec<Step> },
    Steps(Vec<Step>),
}

fn self_chat_one(
    pool: &EventPool,
    settings: &SelfChatSettings,
    seed: u64,
    whole_session: bool,
    backend: &dyn ChatBackend,
) -> Result<(SelfChatConfig, Conversation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = plan_self_chat(pool, settings, &mut rng)?;
    let conv = if whole_session {
        run_whole_session_chat(&plan, backend)?
    } else {
        run_self_chat(&plan, backend, backend)?
    };
    Ok((plan, conv))
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::GenTimeline { seed, pool, horizon } => {
            let pool = load_pool(pool.as_deref())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = generate_pair_timelines(&pool, ["A", "B"], horizon, &TimelineConfig::default(), &mut rng)?;
            emit(out, to_json(&pair))
        }
        Command::Advance {
            timeline,
            speaker,
            elapsed,
            gap,
        } => {
            let timeline = match read_json::<TimelineFile>(&timeline)? {
                TimelineFile::One(t) => t,
                TimelineFile::Pair(pair) => pair
                    .into_iter()
                    .nth(speaker)
                    .ok_or_else(|| anyhow!("--speaker must be 0 or 1"))?,
            };
            let clock = ClockState {
                elapsed: elapsed.unwrap_or(Duration::ZERO),
                session_index: 1,
            };
            let (clock, updates) = timeline.advance(clock, gap);
            emit(out, to_json(&serde_json::json!({ "clock": clock, "updates": updates })))
        }
        Command::Progress { duration, elapsed } => {
            let label = compute_progress_label(duration, elapsed)?;
            emit(out, label.as_str().to_string())
        }
        Command::SplitSchedule { schedule, elapsed } => {
            let schedule = match read_json::<ScheduleFile>(&schedule)? {
                ScheduleFile::Wrapped { steps } | ScheduleFile::Steps(steps) => Schedule::new(steps),
            };
            emit(out, to_json(&split_schedule(&schedule, elapsed)))
        }
        Command::ExtractEvents { history, style, backend } => {
            let history = read_text(&history)?;
            let style = match style {
                StyleArg::Completion => ExtractionStyle::Completion,
                StyleArg::SlotFilling => ExtractionStyle::SlotFilling,
                StyleArg::Qa => ExtractionStyle::QuestionAnswering,
            };
            let extraction = extract_events(&history, backend.build()?.as_ref(), style)?;
            let mut lines: Vec<String> = extraction.events.iter().map(|e| e.to_line()).collect();
            lines.extend(extraction.not_mentioned.iter().map(|s| format!("{s}: something is not mentioned")));
            if extraction.skipped > 0 {
                eprintln!("skipped {} unparsable reply lines", extraction.skipped);
            }
            emit(out, lines.join("\n"))
        }
        Command::EstimateDuration { event, backend } => {
            let d = estimate_event_duration(&event, backend.build()?.as_ref())?;
            emit(out, d.to_string())
        }
        Command::GenSchedule {
            event,
            duration,
            backend,
        } => {
            let schedule = generate_event_schedule(&event, duration, backend.build()?.as_ref())?;
            emit(out, to_json(&schedule))
        }
        Command::BuildContext { input, mode, budget } => {
            let input: ContextInput = read_json(&input)?;
            let block = build_context(&input, mode, budget)?;
            emit(out, block.render())
        }
        Command::SelfChat {
            seed,
            count,
            parallel,
            sessions,
            min_utterances,
            mode,
            split,
            pool,
            whole_session,
            dump_timeline,
            backend,
        } => {
            if count == 0 || parallel == 0 {
                bail!("--count and --parallel must be at least 1");
            }
            let pool = load_pool(pool.as_deref())?;
            let backend = backend.build()?;
            // Seeds are fixed up front so results do not depend on --parallel.
            let mut master = ChaCha8Rng::seed_from_u64(seed);
            let jobs: Vec<(usize, u64)> = (0..count).map(|i| (i, master.next_u64())).collect();
            let job = |(i, job_seed): (usize, u64)| {
                let settings = SelfChatSettings {
                    conversation_id: format!("selfchat-{seed}-{i}"),
                    split: split.into(),
                    num_sessions: sessions,
                    min_utterances,
                    mode,
                    ..SelfChatSettings::default()
                };
                self_chat_one(&pool, &settings, job_seed, whole_session, backend.as_ref())
            };
            let results: Vec<Result<(SelfChatConfig, Conversation)>> = if parallel == 1 {
                jobs.into_iter().map(job).collect()
            } else {
                let chunk = count.div_ceil(parallel);
                std::thread::scope(|scope| {
                    let handles: Vec<_> = jobs
                        .chunks(chunk)
                        .map(|part| scope.spawn(|| part.iter().copied().map(job).collect::<Vec<_>>()))
                        .collect();
                    handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
                })
            };
            let (plans, convs): (Vec<_>, Vec<_>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
            if let Some(path) = dump_timeline {
                fs::write(&path, to_json(&plans)).with_context(|| format!("writing {}", path.display()))?;
            }
            match out {
                Some(path) => export_corpus(path, &convs)?,
                None => {
                    for conv in &convs {
                        println!("{}", export_conversation(conv)?);
                    }
                }
            }
            Ok(())
        }
        Command::Import { file, from_gapchat } => {
            if let Some(dir) = from_gapchat {
                let (convs, report) = adapt_external_corpus(&dir)?;
                eprintln!(
                    "read {} files, {} records, {} rejected",
                    report.files_read,
                    report.records_seen,
                    report.rejected.len()
                );
                for (field, n) in &report.unmapped_fields {
                    eprintln!("unmapped field `{field}` in {n} records");
                }
                for reason in &report.rejected {
                    eprintln!("rejected: {reason}");
                }
                match out {
                    Some(path) => export_corpus(path, &convs)?,
                    None => {
                        for conv in &convs {
                            println!("{}", export_conversation(conv)?);
                        }
                    }
                }
                return Ok(());
            }
            let file = file.expect("clap requires one source");
            let (convs, report) = import_conversations(&file)?;
            for issue in &report.issues {
                eprintln!("line {}: {}", issue.line, issue.message);
            }
            emit(out, format!("{} conversations, {} invalid lines", convs.len(), report.issues.len()))?;
            if report.is_clean() {
                Ok(())
            } else {
                bail!("{} invalid lines in {}", report.issues.len(), file.display())
            }
        }
        Command::Stats { file, json } => {
            let (convs, report) = import_conversations(&file)?;
            if !report.is_clean() {
                bail!("{} invalid lines in {}; run `import` for details", report.issues.len(), file.display());
            }
            let stats = compute_stats(&convs)?;
            if json {
                emit(out, to_json(&stats))
            } else {
                emit(out, stats.render_table())
            }
        }
        Command::Eval {
            judgments,
            model,
            baseline,
            transcripts,
            buckets,
            json,
        } => {
            let (raw, issues) = load_judgments(&judgments)?;
            for issue in &issues {
                eprintln!("line {}: {}", issue.line, issue.message);
            }
            let transcripts: BTreeMap<String, String> = match transcripts {
                Some(p) => read_json(&p)?,
                None => BTreeMap::new(),
            };
            let report = compare_models(&raw, &transcripts, &model, &baseline)?;
            if buckets {
                let kept = filter_judgments_with(&raw, &transcripts).kept;
                let rows = gap_bucket_report(&kept, &model, &baseline)?;
                if json {
                    emit(out, to_json(&serde_json::json!({ "overall": report, "buckets": rows })))
                } else {
                    emit(out, format!("{}\n{}", render_comparison_table(&[report]), render_bucket_table(&rows)))
                }
            } else if json {
                emit(out, to_json(&report))
            } else {
                emit(out, render_comparison_table(&[report]))
            }
        }
        Command::Serve { data_dir, bind } => {
            let mut config = chronochat_service::ServiceConfig::from_env()?;
            if let Some(dir) = data_dir {
                config.data_dir = dir;
            }
            if let Some(addr) = bind {
                config.bind_addr = addr;
            }
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(chronochat_service::serve(config))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
