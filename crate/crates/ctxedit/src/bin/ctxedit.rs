use clap::Parser;

fn main() {
    let cli = ctxedit::cli::Cli::parse();
    if let Err(e) = ctxedit::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
