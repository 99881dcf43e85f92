use clap::Parser;

fn main() {
    let cli = cetx::Cli::parse();
    if let Err(err) = cetx::run(&cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(cetx::exit_code(&err));
    }
}
