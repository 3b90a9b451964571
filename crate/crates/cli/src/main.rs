use clap::Parser;

use brmap_cli::commands::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        let report = err.report();
        // Machine-readable failure on stdout, human summary on stderr.
        println!("{}", serde_json::to_string_pretty(&report).expect("error reports serialize"));
        eprintln!("error: {}", report.error);
        std::process::exit(report.exit_code);
    }
}
