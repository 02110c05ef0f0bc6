use clap::Parser;
use wickbench_cli::{invoke, Args};

fn main() {
    let args = Args::parse();
    let report = invoke(&args);
    for w in &report.warnings {
        eprintln!("wickbench: warning: {w}");
    }
    if let Some(e) = &report.error {
        eprintln!("wickbench: {e}");
    }
    if let Some(a) = &report.artifacts {
        eprintln!("wickbench: wrote {}", a.results.display());
        if let Some(f) = &a.fits {
            eprintln!("wickbench: wrote {}", f.display());
        }
        eprintln!("wickbench: wrote {}", a.manifest.display());
    }
    if report.exit_code == wickbench_cli::error::EXIT_IDENTITY {
        eprintln!("wickbench: identity check failed; see the verdicts in the manifest");
    }
    std::process::exit(report.exit_code);
}
