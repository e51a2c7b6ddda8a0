use std::process::ExitCode;

use clap::Parser;
use iqc_consensus::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(3);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(report) => {
            if let Some(s) = &report.synthesis {
                println!("K = {:?}", s.k);
                if let Some(g) = s.gamma {
                    println!("gamma = {g}");
                }
            }
            if let Some(s) = &report.simulation {
                println!("J = {}", s.cost);
                if let (Some(b), Some(ok)) = (s.bound, s.bound_satisfied) {
                    println!("bound = {b} (satisfied: {ok})");
                }
            }
            println!("outputs written to {}", cli.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
