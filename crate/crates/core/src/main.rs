use std::process::ExitCode;

use clap::Parser;
use spliif::cli::{cmd_eval, cmd_infer, cmd_synth, cmd_train, threads_from_env, Cli, CliError, Command, RunConfig};

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Synth { common }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Infer { common, .. } => common,
    };
    let config = RunConfig::load(common.config.as_deref(), &common.set).map_err(CliError::Validation)?;
    let (out, force) = (common.out.as_path(), common.force);
    match &cli.command {
        Command::Synth { .. } => {
            for p in cmd_synth(&config, out, force)? {
                log::info!("wrote {}", p.display());
            }
        }
        Command::Train { resume, .. } => {
            let outcome = cmd_train(&config, out, force, *resume)?;
            if let Some((step, loss)) = outcome.losses.last() {
                log::info!("finished at step {step} with loss {loss}");
            }
            log::info!("wrote {}", outcome.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            baseline_only,
            ..
        } => {
            for p in cmd_eval(&config, out, force, checkpoint.as_deref(), *baseline_only, threads_from_env())? {
                log::info!("wrote {}", p.display());
            }
        }
        Command::Infer {
            checkpoint,
            stations,
            queries,
            grid,
            origin,
            ..
        } => {
            for p in cmd_infer(&config, out, force, checkpoint, stations, queries.as_deref(), *grid, origin)? {
                log::info!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code() as u8;
            let err = anyhow::Error::new(e).context("spliif failed");
            eprintln!("{err:#}");
            ExitCode::from(code)
        }
    }
}
