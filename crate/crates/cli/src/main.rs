use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bidex_core::demo::Template;
use bidex_core::eval::render_table;
use bidex_core::pipeline::{self, PolicyVariant, ReplayFormat, RunConfig};
use bidex_core::Error;
use clap::{Args, Parser, Subcommand};

/// Bimanual manipulation from demonstrations: synthetic demos, task
/// construction, IPPO teachers, point-cloud students, evaluation.
#[derive(Parser, Debug)]
#[command(name = "bidex", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministic synthetic demo dataset.
    GenDemos {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Comma-separated: lift-hold, pour, dust-sweep, empty-tilt.
        #[arg(long, value_delimiter = ',', default_value = "lift-hold,pour,dust-sweep,empty-tilt")]
        templates: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Preprocess, validate, group and split a dataset into a task manifest.
    BuildTasks {
        #[arg(long)]
        dataset: PathBuf,
        /// Manifest path; the effective config is written next to it.
        #[arg(long, default_value = "tasks.json")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a teacher (or the BC baseline) on one task group.
    TrainTeacher {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        group: String,
        #[arg(long)]
        out: PathBuf,
        /// ippo, centralized-ppo or bc.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        num_envs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the training state saved in --out.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Distill teachers into a point-cloud student pair with DAgger.
    Distill {
        #[arg(long)]
        manifest: PathBuf,
        /// Teacher directory, or a root holding one directory per group.
        #[arg(long)]
        teachers: PathBuf,
        /// Groups to distill (repeatable); all groups when omitted.
        #[arg(long = "group")]
        groups: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Future demo positions given to the student.
        #[arg(long = "k")]
        future_k: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on every split and write report files.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Report every threshold of the sweep list.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        episodes: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Dump an episode log as a per-step table.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// csv or text.
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    episode_length: Option<usize>,
    /// Ablation: keep only the tracking reward.
    #[arg(long)]
    no_stage1: bool,
    /// Ablation: use the geometric center instead of the grasp center.
    #[arg(long)]
    no_gc: bool,
    /// Ablation: drop the alignment bonus.
    #[arg(long)]
    no_bonus: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(t) = self.episode_length {
            c.sim.episode_length = t;
        }
        c.reward.toggles.disable_stage1 |= self.no_stage1;
        c.reward.toggles.use_geometric_center |= self.no_gc;
        c.reward.toggles.disable_bonus |= self.no_bonus;
        Ok(c)
    }
}

fn finish(c: RunConfig) -> Result<RunConfig, Error> {
    c.validate()?;
    Ok(c)
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let threads = pipeline::init_threads()?;
    match cli.command {
        Command::GenDemos { out, count, templates, seed } => {
            let templates = templates
                .iter()
                .map(|t| t.parse::<Template>())
                .collect::<Result<Vec<_>, _>>()?;
            let m = pipeline::gen_demos(&out, count, &templates, seed)?;
            println!("wrote {} demos to {}", m.demos.len(), out.display());
        }
        Command::BuildTasks { dataset, out, config } => {
            let c = finish(config.load()?)?;
            let m = pipeline::build_tasks(&dataset, &c, &out)?;
            let valid = m.tasks.values().filter(|t| t.valid).count();
            println!(
                "{valid} valid tasks in {} groups ({} discarded); train {}, test_comb {}, test_new {}",
                m.groups.len(),
                m.discarded.len(),
                m.split.train.len(),
                m.split.test_comb.len(),
                m.split.test_new.len()
            );
            println!("manifest {} ({})", out.display(), m.content_hash());
        }
        Command::TrainTeacher { manifest, group, out, variant, iterations, num_envs, seed, resume, config } => {
            let mut c = config.load()?;
            if let Some(v) = variant {
                c.variant = v.parse::<PolicyVariant>()?;
            }
            if let Some(n) = iterations {
                c.ppo.total_iterations = n;
            }
            if let Some(n) = num_envs {
                c.ppo.num_envs = n;
            }
            if let Some(s) = seed {
                c.seeds.teacher = s;
                c.seeds.bc = s;
            }
            let c = finish(c)?;
            eprintln!("training {:?} on `{group}` with {threads} threads", c.variant);
            let s = pipeline::train_teacher(&manifest, &group, &c, &out, resume)?;
            println!("trained `{}` on {} tasks for {} iterations -> {}", s.group_id, s.tasks, s.iterations, out.display());
        }
        Command::Distill { manifest, teachers, groups, out, future_k, points, iterations, seed, resume, config } => {
            let mut c = config.load()?;
            if let Some(k) = future_k {
                c.dagger.future_k = k;
            }
            if let Some(p) = points {
                c.dagger.points = p;
            }
            if let Some(n) = iterations {
                c.dagger.total_iterations = n;
            }
            if let Some(s) = seed {
                c.seeds.distill = s;
            }
            let c = finish(c)?;
            eprintln!("distilling with {threads} threads");
            let s = pipeline::distill(&manifest, &teachers, &groups, &c, &out, resume)?;
            println!("distilled {} tasks for {} iterations -> {}", s.tasks, s.iterations, out.display());
        }
        Command::Evaluate { manifest, checkpoint, out, sweep, episodes, config } => {
            let mut c = config.load()?;
            if let Some(n) = episodes {
                c.eval.n_episodes = n;
            }
            let c = finish(c)?;
            let report = pipeline::evaluate(&manifest, &checkpoint, &c, &out, sweep)?;
            render_table(&report, &mut io::stdout())?;
        }
        Command::Replay { log, out, format } => {
            let format: ReplayFormat = format.parse()?;
            let mut bytes = Vec::new();
            let rows = pipeline::replay(&log, format, &mut bytes)?;
            write_output(out.as_deref(), &bytes)?;
            if out.is_some() {
                println!("{rows} rows");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
