mod args;
mod commands;
mod manifest;

use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Parser;

use args::{Cli, Command, ReplayArgs};
use commands::{Outcome, UsageError};
use manifest::{through_json, FileDigest, RunManifest};

fn execute(command: &Command) -> Result<Outcome> {
    match command {
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Extract(a) => commands::extract(a),
        Command::Unseen(a) => commands::unseen(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Replay(_) => unreachable!("replay is dispatched separately"),
    }
}

/// Runs `command` and writes its manifest when it has somewhere to go.
fn run_recorded(command: &Command) -> Result<RunManifest> {
    let started = Instant::now();
    let outcome = execute(command)?;
    let digests = |paths: &[std::path::PathBuf]| -> Result<Vec<FileDigest>> {
        paths.iter().map(|p| FileDigest::of(p)).collect()
    };
    let manifest = RunManifest {
        tool: concat!("eegkd ", env!("CARGO_PKG_VERSION")).to_string(),
        command: command.name().to_string(),
        config: command.clone(),
        seed: outcome.seed,
        threads: rayon::current_num_threads(),
        inputs: digests(&outcome.inputs)?,
        outputs: digests(&outcome.outputs)?,
        results: outcome.results,
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(path) = &outcome.manifest {
        manifest.write(path)?;
    }
    Ok(manifest)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let recorded = RunManifest::read(&a.manifest)?;
    let mut command = recorded.config.clone();
    if matches!(command, Command::Replay(_)) {
        bail!("manifest {} records a replay", a.manifest.display());
    }
    for input in &recorded.inputs {
        let now = FileDigest::of(&input.path)?;
        if now.sha256 != input.sha256 {
            bail!("input {} changed since the recorded run", input.path.display());
        }
    }
    command.redirect(&a.out);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let fresh = run_recorded(&command)?;

    let mut mismatches = Vec::new();
    for old in &recorded.outputs {
        match fresh.outputs.iter().find(|n| n.path.file_name() == old.path.file_name()) {
            Some(new) if new.sha256 == old.sha256 => {}
            Some(new) => mismatches.push(format!("{} differs from {}", new.path.display(), old.path.display())),
            None => mismatches.push(format!("{} was not produced", old.path.display())),
        }
    }
    if through_json(&fresh.results)? != recorded.results {
        mismatches.push("reported results differ".into());
    }
    if !mismatches.is_empty() {
        bail!("replay diverged: {}", mismatches.join("; "));
    }
    println!("replay identical: {} output file(s) and results match", recorded.outputs.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = match (&cli.command, cli.threads) {
        (_, Some(n)) => Some(n),
        // Replays default to one thread.
        (Command::Replay(_), None) => Some(1),
        _ => None,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Replay(a) => replay(a),
        command => run_recorded(command).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
