use clap::Parser;
use mvfmm::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(manifest) => {
            for path in &manifest.outputs {
                println!("{path}");
            }
        }
        Err(e) => {
            eprintln!("mvfmm: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
