use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::gradcheck::{gradient_suite, TOLERANCE};
use super::pipeline::{self, pair_name, Detection, Model};
use super::RunConfig;
use crate::connectome::{read_network_json, write_network_json, DynamicBrainNetwork};
use crate::contrastive::{write_trace_csv, TRACE_FILE};
use crate::detector::{write_circuits_csv, write_hubs_csv, CircuitSet, DetectorEpoch, HubWeights, PhaseSplit};
use crate::diffcore::{checkpoint, ParameterStore};
use crate::error::{Error, Result};
use crate::evaluation::{project_2d, recovery_metrics, write_embedding_csvs, RecoveryReport, Split};
use crate::synthcohort::{read_cohort, write_cohort, Cohort, GroupLabel, COHORT_FORMAT, MANIFEST_FILE};

pub const RUN_META_FILE: &str = "run_meta.json";
pub const CONFIG_FILE: &str = "config.json";
pub const DEFAULT_OUT: &str = "circuitscope_out";

const CHECKPOINT_DIR: &str = "checkpoint";
const NETWORK_DIR: &str = "networks";
const INDEX_FILE: &str = "index.json";
const DETECTION_FILE: &str = "detection.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate (or import) the cohort.
    Synth,
    /// Window every subject into a dynamic network and fix the train/test split.
    Build,
    /// Contrastive pretraining of the encoder on training saline subjects.
    Pretrain,
    /// Detector training on saline × nicotine training pairs.
    Train,
    /// Score test pairs and select circuits.
    Detect,
    /// Planted-circuit recovery of the detector against the oracle.
    Report,
    /// Group classification and 2-D projection of global representations.
    Eval,
    /// Gradient checks of every primitive and layer family.
    Gradcheck,
    /// synth, build, pretrain, train, detect, report and eval in order.
    All,
}

impl Command {
    pub const CHAIN: [Command; 7] = [
        Command::Synth,
        Command::Build,
        Command::Pretrain,
        Command::Train,
        Command::Detect,
        Command::Report,
        Command::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Build => "build",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Detect => "detect",
            Command::Report => "report",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::All => "all",
        }
    }
}

#[derive(Clone, Debug, Parser)]
#[command(
    name = "circuitscope",
    version,
    about = "Dynamic functional-connectivity circuit detection"
)]
pub struct Invocation {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = "CIRCUITSCOPE_OUT")]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-subject work.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

/// Exit status for an error: 1 for bad input or missing artifacts, 2 for failures during a run.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Validation(_)
        | Error::Parse { .. }
        | Error::Window { .. }
        | Error::Ingestion(_)
        | Error::Split(_)
        | Error::MissingArtifact(_)
        | Error::Json(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let invocation = match Invocation::try_parse_from(args) {
        Ok(inv) => inv,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(&invocation) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e}");
            code
        }
    }
}

/// Resolves the configuration and output root, then runs the command.
pub fn run_command(invocation: &Invocation) -> Result<()> {
    let mut config = match &invocation.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = invocation.seed {
        config.seed = seed;
    }
    if let Some(workers) = invocation.workers {
        config.io.workers = Some(workers);
    }
    config.validate()?;
    let out = invocation
        .out
        .clone()
        .or_else(|| config.io.out.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.io.workers {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Validation(format!("cannot start {:?} workers: {e}", config.io.workers)))?;
    let ctx = Context {
        config_hash: config_hash(&config),
        config,
        out,
        quiet: invocation.quiet,
    };
    pool.install(|| match invocation.command {
        Command::All => Command::CHAIN.iter().try_for_each(|&c| ctx.run(c)),
        c => ctx.run(c),
    })
}

/// SHA-256 of the canonical JSON form of the effective configuration.
pub fn config_hash(config: &RunConfig) -> String {
    hex::encode(Sha256::digest(config.to_json().as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
}

/// Network order and train/test split written by `build`.
#[derive(Debug, Serialize, Deserialize)]
struct NetworkIndex {
    subjects: Vec<String>,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupRecord {
    pair: String,
    group: GroupLabel,
    circuit: CircuitSet,
    phases: PhaseSplit,
    hubs: HubWeights,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    groups: Vec<GroupRecord>,
}

struct Context {
    config: RunConfig,
    config_hash: String,
    out: PathBuf,
    quiet: bool,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn detector_trace_csv(trace: &[DetectorEpoch]) -> String {
    let mut text = String::from("epoch,ranking,infonce,total\n");
    for e in trace {
        writeln!(text, "{},{},{},{}", e.epoch, e.ranking, e.infonce, e.total).expect("string write");
    }
    text
}

impl Context {
    fn dir(&self, command: Command) -> PathBuf {
        self.out.join(command.name())
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn run(&self, command: Command) -> Result<()> {
        let dir = self.dir(command);
        let started_at = now();
        self.check_upstream(command)?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        match command {
            Command::Synth => self.synth(&dir)?,
            Command::Build => self.build(&dir)?,
            Command::Pretrain => self.pretrain(&dir)?,
            Command::Train => self.train(&dir)?,
            Command::Detect => self.detect(&dir)?,
            Command::Report => self.report(&dir)?,
            Command::Eval => self.eval(&dir)?,
            Command::Gradcheck => self.gradcheck(&dir)?,
            Command::All => unreachable!("`all` is expanded by run_command"),
        }
        write_text(&dir.join(CONFIG_FILE), &self.config.to_json())?;
        let versions = BTreeMap::from([
            ("circuitscope".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("cohort_format".to_string(), COHORT_FORMAT.to_string()),
        ]);
        write_json(
            &dir.join(RUN_META_FILE),
            &RunMeta {
                command: command.name().into(),
                config_hash: self.config_hash.clone(),
                seed: self.config.seed,
                versions,
                started_at,
                finished_at: now(),
            },
        )?;
        self.say(format!("{}: wrote {}", command.name(), dir.display()));
        Ok(())
    }

    /// Fails with the first missing input before any work starts.
    fn check_upstream(&self, command: Command) -> Result<()> {
        let cohort = self.dir(Command::Synth).join(MANIFEST_FILE);
        let index = self.dir(Command::Build).join(INDEX_FILE);
        let pretrained = self
            .dir(Command::Pretrain)
            .join(CHECKPOINT_DIR)
            .join(checkpoint::MANIFEST_FILE);
        let trained = self
            .dir(Command::Train)
            .join(CHECKPOINT_DIR)
            .join(checkpoint::MANIFEST_FILE);
        let detection = self.dir(Command::Detect).join(DETECTION_FILE);
        let needed: Vec<&PathBuf> = match command {
            Command::Synth | Command::Gradcheck | Command::All => vec![],
            Command::Build => vec![&cohort],
            Command::Pretrain => vec![&index],
            Command::Train => vec![&index, &pretrained],
            Command::Detect | Command::Eval => vec![&index, &trained],
            Command::Report => vec![&cohort, &index, &detection],
        };
        match needed.into_iter().find(|p| !p.exists()) {
            Some(missing) => Err(Error::MissingArtifact(missing.clone())),
            None => Ok(()),
        }
    }

    fn cohort(&self) -> Result<Cohort> {
        read_cohort(&self.dir(Command::Synth))
    }

    fn networks(&self) -> Result<(Vec<DynamicBrainNetwork<f64>>, Split)> {
        let dir = self.dir(Command::Build);
        let index: NetworkIndex = read_json(&dir.join(INDEX_FILE))?;
        let networks = index
            .subjects
            .iter()
            .map(|id| read_network_json(&dir.join(NETWORK_DIR).join(format!("{id}.json"))))
            .collect::<Result<Vec<_>>>()?;
        if networks.is_empty() {
            return Err(Error::Validation("network index lists no subjects".into()));
        }
        Ok((networks, index.split))
    }

    fn model(&self, stage: Command, input_dim: usize) -> Result<(ParameterStore<f64>, Model)> {
        let mut store = checkpoint::load(&self.dir(stage).join(CHECKPOINT_DIR))?;
        let model = Model::bind(&self.config, &mut store, input_dim)?;
        Ok((store, model))
    }

    fn synth(&self, dir: &Path) -> Result<()> {
        let cohort = match &self.config.io.cohort {
            Some(source) => read_cohort(source)?,
            None => pipeline::synthesize(&self.config)?,
        };
        write_cohort(&cohort, dir)?;
        self.say(format!(
            "synth: {} subjects, {} regions, {} scans",
            cohort.subjects.len(),
            cohort.region_labels().len(),
            cohort.subjects[0].series.scans()
        ));
        Ok(())
    }

    fn build(&self, dir: &Path) -> Result<()> {
        let cohort = self.cohort()?;
        let networks = pipeline::build_networks(&self.config, &cohort)?;
        let split = pipeline::split_subjects(&self.config, &networks);
        let network_dir = dir.join(NETWORK_DIR);
        fs::create_dir_all(&network_dir).map_err(|e| Error::io(&network_dir, e))?;
        for net in &networks {
            write_network_json(net, &network_dir.join(format!("{}.json", net.subject_id)))?;
        }
        let subjects = networks.iter().map(|n| n.subject_id.clone()).collect();
        write_json(&dir.join(INDEX_FILE), &NetworkIndex { subjects, split })
    }

    fn pretrain(&self, dir: &Path) -> Result<()> {
        let (networks, split) = self.networks()?;
        let (mut store, model) = Model::fresh(&self.config, networks[0].window_length())?;
        let trace = pipeline::pretrain(&self.config, &networks, &split, &mut store, &model)?;
        checkpoint::save(&store, &dir.join(CHECKPOINT_DIR))?;
        write_trace_csv(&trace, &dir.join(TRACE_FILE))?;
        if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
            self.say(format!("pretrain: total loss {:.4} -> {:.4}", first.total, last.total));
        }
        Ok(())
    }

    fn train(&self, dir: &Path) -> Result<()> {
        let (networks, split) = self.networks()?;
        let (mut store, model) = self.model(Command::Pretrain, networks[0].window_length())?;
        let trace = pipeline::train(&self.config, &networks, &split, &mut store, &model)?;
        checkpoint::save(&store, &dir.join(CHECKPOINT_DIR))?;
        write_text(&dir.join("detector_trace.csv"), &detector_trace_csv(&trace))?;
        if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
            self.say(format!(
                "train: ranking loss {:.4} -> {:.4}",
                first.ranking, last.ranking
            ));
        }
        Ok(())
    }

    fn detect(&self, dir: &Path) -> Result<()> {
        let (networks, split) = self.networks()?;
        let (store, model) = self.model(Command::Train, networks[0].window_length())?;
        let Detection { probes, groups } = pipeline::detect(&self.config, &networks, &split, &store, &model)?;
        let mut records = Vec::new();
        for g in groups {
            let pair = pair_name(g.group);
            let mut maps: Vec<_> = probes
                .iter()
                .filter(|p| p.group == g.group)
                .map(|p| (p.map.clone(), p.circuit.clone()))
                .collect();
            maps.push((g.map, g.circuit.clone()));
            write_circuits_csv(&dir.join(format!("circuits_{pair}.csv")), &maps)?;
            write_hubs_csv(&dir.join(format!("hubs_{pair}.csv")), &g.hubs)?;
            self.say(format!(
                "detect: {pair} selected {} cells, pre/post mass {:.3}/{:.3}",
                g.circuit.cells.len(),
                g.phases.pre_mass,
                g.phases.post_mass
            ));
            records.push(GroupRecord {
                pair: pair.into(),
                group: g.group,
                circuit: g.circuit,
                phases: g.phases,
                hubs: g.hubs,
            });
        }
        write_json(&dir.join(DETECTION_FILE), &DetectionRecord { groups: records })
    }

    fn report(&self, dir: &Path) -> Result<()> {
        let cohort = self.cohort()?;
        let (networks, _) = self.networks()?;
        let record: DetectionRecord = read_json(&self.dir(Command::Detect).join(DETECTION_FILE))?;
        let post = self
            .config
            .connectome
            .post_onset_timesteps(cohort.generator_config.onset());
        let reports = record
            .groups
            .iter()
            .map(|g| {
                let planted = cohort
                    .planted(g.group)
                    .ok_or_else(|| Error::Validation(format!("cohort has no {} subjects", g.group)))?;
                let oracle = pipeline::oracle_circuit(&self.config, &networks, g.group)?;
                Ok(RecoveryReport::new(
                    g.pair.clone(),
                    self.config.detector.top_fraction,
                    recovery_metrics(&g.circuit, planted, &post),
                    recovery_metrics(&oracle, planted, &post),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        for r in &reports {
            self.say(format!(
                "report: {} recall {:.3} (oracle {:.3}, ratio {:.3}), precision {:.3}",
                r.pair, r.detector.recall, r.oracle.recall, r.ratio, r.detector.precision
            ));
        }
        write_json(&dir.join("recovery.json"), &reports)
    }

    fn eval(&self, dir: &Path) -> Result<()> {
        let (networks, split) = self.networks()?;
        let (store, model) = self.model(Command::Train, networks[0].window_length())?;
        let globals = pipeline::globals(&store, &model, &networks)?;
        let classification = pipeline::classify(&self.config, &networks, &split, &globals)?;
        let coords = project_2d(&globals)?;
        let rows: Vec<(String, String, Vec<f64>)> = networks
            .iter()
            .zip(&globals)
            .map(|(n, g)| (n.subject_id.clone(), n.group.as_str().to_string(), g.clone()))
            .collect();
        write_embedding_csvs(dir, &rows, &coords)?;
        write_json(&dir.join("metrics.json"), &classification)?;
        self.say(format!(
            "eval: accuracy {:.3} on {} test subjects (label-shuffled mean {:.3})",
            classification.metrics.accuracy, classification.metrics.test_size, classification.shuffled_mean_accuracy
        ));
        Ok(())
    }

    fn gradcheck(&self, dir: &Path) -> Result<()> {
        let checks = gradient_suite()?;
        for c in &checks {
            self.say(format!(
                "{:<28} {:.3e}  {}",
                c.family,
                c.max_relative_error,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        write_json(&dir.join("gradcheck.json"), &checks)?;
        let failed: Vec<&str> = checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.family.as_str())
            .collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Invariant {
                module: "diffcore",
                invariant: "grad_check",
                detail: format!("relative error ≥ {TOLERANCE} in {}", failed.join(", ")),
            })
        }
    }
}
