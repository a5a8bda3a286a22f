use clap::Parser;

fn main() {
    let cli = dualview_cli::Cli::parse();
    if let Err(e) = dualview_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
