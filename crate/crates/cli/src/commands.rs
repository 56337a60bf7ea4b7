//! Implementations of the seven subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tsc_core::agents::{GreedyController, LlmAgent};
use tsc_core::critic::{CriticNet, TrainCfg, Trainer};
use tsc_core::finetune::{export_ift_dataset, rbc_loss, RankingBatch, ReasoningRecord};
use tsc_core::llmclient::{ChatBackend, TranscriptRecorder};
use tsc_core::metrics::{comparison_csv, compute_report_opts, render_table, MetricsReport};
use tsc_core::observe::observe;
use tsc_core::prompting::{parse_decision, render_prompt, PromptSections};
use tsc_core::simcore::episode::{run_episode, transitions_from_log, EpisodeLog};
use tsc_core::simcore::{SimConfig, Simulation};

use crate::config::{
    build_backend, build_flow, build_network, build_plain_controller, load_backend_spec,
    write_snapshot, FlowSource, NetSource,
};
use crate::CliError;

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("output dir {}: {e}", out.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_episode_log(path: &Path) -> Result<EpisodeLog, CliError> {
    let text = read_file(path)?;
    EpisodeLog::from_jsonl(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn records_jsonl(records: &[ReasoningRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn read_records(path: &Path) -> Result<Vec<ReasoningRecord>, CliError> {
    let text = read_file(path)?;
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReasoningRecord = serde_json::from_str(line).map_err(|e| {
            CliError::Config(format!("{}:{}: {e}", path.display(), ln + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// run

pub struct RunParams {
    pub net_source: NetSource,
    pub flow_source: FlowSource,
    pub controller: String,
    pub order: Option<String>,
    pub critic_weights: Option<PathBuf>,
    pub backend: Option<PathBuf>,
    pub sim: SimConfig,
    pub out: PathBuf,
    pub per_intersection: bool,
}

#[derive(Serialize)]
struct RunSnapshot<'a> {
    command: &'a str,
    net: &'a NetSource,
    flow: &'a FlowSource,
    controller: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    order: &'a Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    critic_weights: &'a Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    backend: &'a Option<PathBuf>,
    sim: &'a SimConfig,
    per_intersection: bool,
}

fn run_snapshot<'a>(command: &'a str, p: &'a RunParams) -> RunSnapshot<'a> {
    RunSnapshot {
        command,
        net: &p.net_source,
        flow: &p.flow_source,
        controller: &p.controller,
        order: &p.order,
        critic_weights: &p.critic_weights,
        backend: &p.backend,
        sim: &p.sim,
        per_intersection: p.per_intersection,
    }
}

pub fn cmd_run(p: RunParams) -> Result<(), CliError> {
    ensure_out_dir(&p.out)?;
    write_snapshot(&p.out, &run_snapshot("run", &p))?;
    let net = build_network(&p.net_source)?;
    let flow = build_flow(&p.flow_source, &net)?;

    let log = if p.controller == "llm" {
        let backend_path = p.backend.as_deref().ok_or_else(|| {
            CliError::Config("--backend is required with --controller llm".into())
        })?;
        let spec = load_backend_spec(backend_path)?;
        let backend = build_backend(&spec)?;
        let recorder = TranscriptRecorder::new(backend, Vec::new());
        let mut agent = LlmAgent::new(recorder, PromptSections::default());
        let log = run_episode(&net, &flow, &mut agent, &p.sim).map_err(CliError::from)?;
        if agent.fallback_count() > 0 {
            log::warn!("{} decisions fell back to greedy", agent.fallback_count());
        }
        let records = agent.take_records();
        write_file(&p.out.join("records.jsonl"), &records_jsonl(&records))?;
        let (_, transcript) = agent.into_backend().into_inner();
        let transcript = String::from_utf8(transcript)
            .map_err(|e| CliError::Io(format!("transcript: {e}")))?;
        write_file(&p.out.join("transcript.jsonl"), &transcript)?;
        log
    } else {
        let mut ctl = build_plain_controller(
            &p.controller,
            p.order.as_deref(),
            p.critic_weights.as_deref(),
            p.sim.seed,
        )?;
        run_episode(&net, &flow, ctl.as_mut(), &p.sim).map_err(CliError::from)?
    };

    write_file(&p.out.join("episode.jsonl"), &log.to_jsonl())?;
    let report = compute_report_opts(&log, p.per_intersection)
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&p.out.join("report.json"), &(report.to_json() + "\n"))?;
    let table = render_table(std::slice::from_ref(&report));
    write_file(&p.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// collect

pub struct CollectParams {
    pub run: RunParams,
    pub k: usize,
}

#[derive(Serialize)]
struct ResumeMarker<'a> {
    t: u64,
    intersection: &'a str,
    switches_done: usize,
    records_written: usize,
    error: String,
}

/// Runs an episode driven by the backend's completions, keeping every
/// parseable trajectory. With k > 1 each switch contributes a group of k
/// trajectories sharing one prompt. A backend failure stops the run, leaving
/// the records gathered so far plus a `resume.json` marker in the output
/// directory.
pub fn cmd_collect(p: CollectParams) -> Result<(), CliError> {
    if p.k == 0 {
        return Err(CliError::Config("--k must be >= 1".into()));
    }
    let out = p.run.out.clone();
    ensure_out_dir(&out)?;
    #[derive(Serialize)]
    struct CollectSnapshot<'a> {
        #[serde(flatten)]
        run: RunSnapshot<'a>,
        k: usize,
    }
    write_snapshot(
        &out,
        &CollectSnapshot {
            run: run_snapshot("collect", &p.run),
            k: p.k,
        },
    )?;
    let net = build_network(&p.run.net_source)?;
    let flow = build_flow(&p.run.flow_source, &net)?;
    let backend_path = p.run.backend.as_deref().ok_or_else(|| {
        CliError::Config("--backend is required for collect".into())
    })?;
    let spec = load_backend_spec(backend_path)?;
    let mut backend = TranscriptRecorder::new(build_backend(&spec)?, Vec::new());

    let spawns = flow
        .expand(&net)
        .map_err(|e| CliError::Config(format!("flow: {e}")))?;
    let mut sim = Simulation::new(&net, &spawns, p.run.sim.clone())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let sections = PromptSections::default();
    let mut records: Vec<ReasoningRecord> = Vec::new();
    let mut switches = 0usize;

    let flush = |records: &[ReasoningRecord],
                 backend: TranscriptRecorder<Box<dyn ChatBackend>, Vec<u8>>|
     -> Result<(), CliError> {
        write_file(&out.join("records.jsonl"), &records_jsonl(records))?;
        let (_, transcript) = backend.into_inner();
        let transcript =
            String::from_utf8(transcript).map_err(|e| CliError::Io(format!("transcript: {e}")))?;
        write_file(&out.join("transcript.jsonl"), &transcript)
    };

    for _ in 0..p.run.sim.episode_len {
        for ix in 0..net.intersections.len() {
            if !sim.switch_ready(ix) {
                continue;
            }
            let obs = observe(&sim, ix);
            let prompt =
                render_prompt(&obs, &sections).map_err(|e| CliError::Config(e.to_string()))?;
            let texts = match backend.sample_k(&prompt, p.k) {
                Ok(texts) => texts,
                Err(e) => {
                    let marker = ResumeMarker {
                        t: sim.time(),
                        intersection: &net.intersections[ix].id,
                        switches_done: switches,
                        records_written: records.len(),
                        error: e.to_string(),
                    };
                    let marker = serde_json::to_string_pretty(&marker)
                        .map_err(|err| CliError::Io(err.to_string()))?;
                    write_file(&out.join("resume.json"), &(marker + "\n"))?;
                    flush(&records, backend)?;
                    return Err(CliError::Backend(format!(
                        "backend failed mid-episode at t={}: {e}; partial records kept",
                        sim.time()
                    )));
                }
            };
            let features: Vec<f64> = tsc_core::critic::featurize(&obs);
            let mut action = None;
            for text in texts {
                let parsed = parse_decision(&text);
                let Some(phase) = parsed.phase else {
                    log::warn!("unparseable completion at t={} dropped", sim.time());
                    continue;
                };
                records.push(ReasoningRecord {
                    t: sim.time(),
                    prompt: prompt.clone(),
                    reasoning: text,
                    action: phase,
                    features: features.clone(),
                    source: backend.name().to_string(),
                });
                action.get_or_insert(phase);
            }
            let action = action.unwrap_or_else(|| GreedyController::choose(&obs));
            switches += 1;
            sim.apply_action(ix, action)
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        sim.step();
    }

    let total = records.len();
    flush(&records, backend)?;
    println!(
        "collected {total} trajectories over {switches} switches (k={}) into {}",
        p.k,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-critic

pub struct TrainParams {
    pub episodes: Vec<PathBuf>,
    pub cfg: TrainCfg,
    pub out: PathBuf,
}

pub fn cmd_train_critic(p: TrainParams) -> Result<(), CliError> {
    if p.episodes.is_empty() {
        return Err(CliError::Config("--episodes requires at least one log".into()));
    }
    ensure_out_dir(&p.out)?;
    #[derive(Serialize)]
    struct TrainSnapshot<'a> {
        command: &'a str,
        episodes: &'a [PathBuf],
        #[serde(flatten)]
        cfg: &'a TrainCfg,
    }
    write_snapshot(
        &p.out,
        &TrainSnapshot {
            command: "train-critic",
            episodes: &p.episodes,
            cfg: &p.cfg,
        },
    )?;

    let mut trainer = Trainer::<f64>::new(p.cfg.clone());
    let mut total = 0usize;
    for path in &p.episodes {
        let log = read_episode_log(path)?;
        for tr in transitions_from_log(&log) {
            trainer.push(tr);
            total += 1;
        }
    }
    if total == 0 {
        return Err(CliError::Config(
            "episode logs contain no switch transitions".into(),
        ));
    }
    trainer.train().map_err(|e| match e {
        tsc_core::critic::CriticError::Divergence { .. } => CliError::Divergence(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;

    let weights_path = p.out.join("weights.json");
    let file = fs::File::create(&weights_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", weights_path.display())))?;
    trainer
        .net
        .save(file)
        .map_err(|e| CliError::Io(e.to_string()))?;

    let mut curve = String::from("step,loss\n");
    for (i, loss) in trainer.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{},{:.9e}\n", i + 1, loss));
    }
    write_file(&p.out.join("loss_curve.csv"), &curve)?;
    println!(
        "trained on {total} transitions; final loss {:.6}; weights at {}",
        trainer.loss_curve.last().copied().unwrap_or(f64::NAN),
        weights_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// filter / export-ift

pub fn cmd_filter(records: &Path, weights: &Path, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    #[derive(Serialize)]
    struct FilterSnapshot<'a> {
        command: &'a str,
        records: &'a Path,
        weights: &'a Path,
    }
    write_snapshot(
        out,
        &FilterSnapshot {
            command: "filter",
            records,
            weights,
        },
    )?;
    let recs = read_records(records)?;
    let file = fs::File::open(weights)
        .map_err(|e| CliError::Config(format!("{}: {e}", weights.display())))?;
    let net = CriticNet::<f64>::load(file)
        .map_err(|e| CliError::Config(format!("{}: {e}", weights.display())))?;
    let kept = tsc_core::critic::filter_trajectories(&recs, &net)
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&out.join("filtered.jsonl"), &records_jsonl(&kept))?;
    println!("kept {} of {} trajectories", kept.len(), recs.len());
    Ok(())
}

pub fn cmd_export_ift(records: &Path, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    #[derive(Serialize)]
    struct ExportSnapshot<'a> {
        command: &'a str,
        records: &'a Path,
    }
    write_snapshot(
        out,
        &ExportSnapshot {
            command: "export-ift",
            records,
        },
    )?;
    let recs = read_records(records)?;
    let path = out.join("ift.jsonl");
    let mut sink = Vec::new();
    let count =
        export_ift_dataset(&recs, &mut sink).map_err(|e| CliError::Config(e.to_string()))?;
    let text = String::from_utf8(sink).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(&path, &text)?;
    println!("exported {count} examples to {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// rbc

pub fn cmd_rbc(batches: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let text = read_file(batches)?;
    let mut rows = String::new();
    let mut losses = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RankingBatch<f64> = serde_json::from_str(line).map_err(|e| {
            CliError::Config(format!("{}:{}: {e}", batches.display(), ln + 1))
        })?;
        let batch = RankingBatch::new(parsed.p, parsed.q, parsed.beta).map_err(|e| {
            CliError::Config(format!("{}:{}: {e}", batches.display(), ln + 1))
        })?;
        let (loss, grad) = rbc_loss(&batch);
        losses.push(loss);
        #[derive(Serialize)]
        struct Row {
            loss: f64,
            grad: Vec<f64>,
        }
        rows.push_str(&serde_json::to_string(&Row { loss, grad }).expect("row serializes"));
        rows.push('\n');
    }
    if losses.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no batches found",
            batches.display()
        )));
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    if let Some(out) = out {
        ensure_out_dir(out)?;
        #[derive(Serialize)]
        struct RbcSnapshot<'a> {
            command: &'a str,
            batches: &'a Path,
        }
        write_snapshot(
            out,
            &RbcSnapshot {
                command: "rbc",
                batches,
            },
        )?;
        write_file(&out.join("losses.jsonl"), &rows)?;
    }
    println!("{} batches, mean loss {mean:.6}", losses.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

pub fn cmd_report(
    episodes: &[PathBuf],
    per_intersection: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if episodes.is_empty() {
        return Err(CliError::Config("--episodes requires at least one log".into()));
    }
    let mut reports: Vec<MetricsReport> = Vec::new();
    for path in episodes {
        let log = read_episode_log(path)?;
        let report = compute_report_opts(&log, per_intersection)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        reports.push(report);
    }
    let table = render_table(&reports);
    print!("{table}");
    std::io::stdout().flush().ok();
    if let Some(out) = out {
        ensure_out_dir(out)?;
        #[derive(Serialize)]
        struct ReportSnapshot<'a> {
            command: &'a str,
            episodes: &'a [PathBuf],
            per_intersection: bool,
        }
        write_snapshot(
            out,
            &ReportSnapshot {
                command: "report",
                episodes,
                per_intersection,
            },
        )?;
        write_file(&out.join("report.txt"), &table)?;
        write_file(&out.join("comparison.csv"), &comparison_csv(&reports))?;
        let json = serde_json::to_string_pretty(&reports)
            .map_err(|e| CliError::Io(e.to_string()))?;
        write_file(&out.join("reports.json"), &(json + "\n"))?;
    }
    Ok(())
}
